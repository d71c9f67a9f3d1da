use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use flare_core::data::{CorpusBundle, SequenceOptions};
use flare_core::eval::{
    evaluate, evaluate_mutated, EvalOptions, EvalReport, MutationSpec,
};
use flare_core::flare::{toy_grad_check, FusionMode, ToyCheckConfig};
use flare_core::nn::checkpoint::sha256_hex;
use flare_core::synth::{make_synthetic_corpus, Structure, SyntheticSpec};
use flare_core::train::{load_model, preset_names, train, TrainConfig};
use flare_serve::{AppState, Snapshot};

use crate::config;
use crate::{
    Cli, CliError, Command, EvalCommon, GradCheckArgs, PreprocessArgs, ServeArgs, SynthArgs,
    TrainArgs,
};

/// Written next to every output; identical resolved inputs give identical
/// manifests.
#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: Value,
    /// Path as given on the command line -> SHA-256 of its contents.
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct Ctx<'a> {
    workdir: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn read(&self, p: &Path) -> Result<Vec<u8>, CliError> {
        let full = self.path(p);
        std::fs::read(&full).map_err(|e| CliError::io(&full, e))
    }

    fn hash(&self, p: &Path) -> Result<(String, String), CliError> {
        Ok((p.display().to_string(), sha256_hex(&self.read(p)?)))
    }

    fn load_bundle(&self, p: &Path) -> Result<CorpusBundle, CliError> {
        let full = self.path(p);
        Ok(CorpusBundle::from_bytes(&self.read(p)?, &full)?)
    }

    fn ensure_parent(&self, p: &Path) -> Result<PathBuf, CliError> {
        let full = self.path(p);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(full)
    }

    fn write_manifest(
        &self,
        at: &Path,
        command: &str,
        config: Value,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<(), CliError> {
        let hashes = |paths: &[&Path]| -> Result<BTreeMap<String, String>, CliError> {
            paths.iter().map(|p| self.hash(p)).collect()
        };
        let manifest = Manifest {
            tool: "flare",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            inputs: hashes(inputs)?,
            outputs: hashes(outputs)?,
        };
        let full = self.ensure_parent(at)?;
        std::fs::write(&full, serde_json::to_vec_pretty(&manifest)?).map_err(|e| CliError::io(&full, e))
    }
}

fn manifest_beside(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        workdir: &cli.workdir,
    };
    if !cli.workdir.is_dir() {
        return Err(CliError::Usage(format!(
            "workdir {} is not a directory",
            cli.workdir.display()
        )));
    }
    match &cli.command {
        Command::Preprocess(a) => preprocess(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, &a.common, Setting::Level(a.critique)),
        Command::MutateEval(a) => eval_cmd(
            &ctx,
            &a.common,
            Setting::Mutation(
                MutationSpec::new(a.level as usize, a.seed)
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            ),
        ),
        Command::GradCheck(a) => grad_check(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Presets => {
            let mut out = std::io::stdout().lock();
            for name in preset_names() {
                // A closed pipe (e.g. `| head`) is not an error.
                if writeln!(out, "{name}").is_err() {
                    break;
                }
            }
            Ok(())
        }
    }
}

fn preprocess(ctx: &Ctx, a: &PreprocessArgs) -> Result<(), CliError> {
    let mut options = match a.policy.as_str() {
        "filter50" => SequenceOptions::filter50(),
        _ => SequenceOptions::trim51(),
    };
    options.dedup = a.dedup;
    let open = |p: &Path| -> Result<BufReader<File>, CliError> {
        let full = ctx.path(p);
        Ok(BufReader::new(File::open(&full).map_err(|e| CliError::io(&full, e))?))
    };
    let bundle =
        CorpusBundle::from_reviews(open(&a.reviews)?, open(&a.meta)?, options, a.split, a.seed)?;
    let out = ctx.ensure_parent(&a.out)?;
    let hash = bundle.save(&out)?;
    let config = json!({ "options": options, "split": a.split, "seed": a.seed });
    ctx.write_manifest(
        &manifest_beside(&a.out),
        "preprocess",
        config,
        &[&a.reviews, &a.meta],
        &[&a.out],
    )?;
    println!(
        "{} items, {} sequences, {} train / {} valid / {} test; content hash {hash}",
        bundle.items.len(),
        bundle.sequences.len(),
        bundle.split.train.len(),
        bundle.split.valid.len(),
        bundle.split.test.len()
    );
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<(), CliError> {
    let mut spec = match a.structure.as_str() {
        "markov" => SyntheticSpec::markov(a.items, a.users, a.seed),
        _ => SyntheticSpec::category_driven(a.items, a.users, a.seed),
    };
    if let Some(v) = a.min_len {
        spec.min_len = v;
    }
    if let Some(v) = a.max_len {
        spec.max_len = v;
    }
    match &mut spec.structure {
        Structure::CategoryDriven {
            branching,
            follow_prob,
            shared_levels,
        } => {
            if let Some(b) = &a.branching {
                branching.copy_from_slice(b);
            }
            if let Some(p) = a.follow_prob {
                *follow_prob = p;
            }
            if let Some(s) = a.shared_levels {
                *shared_levels = s;
            }
        }
        Structure::Markov => {
            if a.branching.is_some() || a.follow_prob.is_some() || a.shared_levels.is_some() {
                return Err(CliError::Usage(
                    "--branching, --follow-prob and --shared-levels need --structure category_driven"
                        .into(),
                ));
            }
        }
    }
    let bundle = make_synthetic_corpus(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = ctx.ensure_parent(&a.out)?;
    let hash = bundle.save(&out)?;
    ctx.write_manifest(
        &manifest_beside(&a.out),
        "synth",
        serde_json::to_value(&spec)?,
        &[],
        &[&a.out],
    )?;
    println!(
        "{} items, {} users, Bayes-optimal Recall@1 {:.3} / Recall@10 {:.3}; content hash {hash}",
        bundle.items.len(),
        bundle.sequences.len(),
        spec.bayes_optimal_recall(1),
        spec.bayes_optimal_recall(10)
    );
    Ok(())
}

/// Applies ablations, then the individual flags, over the resolved config.
pub fn apply_flags(cfg: &mut TrainConfig, a: &TrainArgs) {
    for ab in &a.ablation {
        ab.apply(cfg);
    }
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { $field = v; })*
        };
    }
    set! {
        steps => cfg.total_steps,
        lr => cfg.lr,
        batch => cfg.batch,
        token_budget => cfg.token_budget,
        weight_decay => cfg.weight_decay,
        seed => cfg.seed,
        fusion => cfg.fusion,
        alpha => cfg.loss.alpha,
        tau => cfg.loss.tau,
        margin => cfg.loss.margin,
        mask_rate => cfg.mask_rate,
        mask_mode => cfg.mask_mode,
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    if a.precomputed.is_some() {
        cfg.text_encoder.precomputed = a.precomputed.clone();
    }
    if a.no_contrastive {
        cfg.loss.contrastive_enabled = false;
    }
    if a.dedup {
        cfg.dedup = true;
    }
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<(), CliError> {
    let file = a.config.as_ref().map(|p| ctx.path(p));
    let mut cfg = config::resolve(a.preset.as_deref(), file.as_deref())?;
    apply_flags(&mut cfg, a);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    // Precomputed embeddings are resolved against the workdir too.
    let mut run_cfg = cfg.clone();
    if let Some(p) = &run_cfg.text_encoder.precomputed {
        run_cfg.text_encoder.precomputed = Some(ctx.path(p));
    }
    let bundle = ctx.load_bundle(&a.corpus)?;
    let out_dir = ctx.path(&a.out);
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_vec_pretty(&cfg)?)
        .map_err(|e| CliError::io(&out_dir, e))?;
    let outcome = train(&run_cfg, &bundle, Some(&out_dir))?;

    let first = outcome.log.first().map_or(f64::NAN, |l| l.l_mlm);
    let last = outcome.log.last().map_or(f64::NAN, |l| l.l_mlm);
    let final_ckpt = outcome
        .checkpoints
        .last()
        .ok_or_else(|| CliError::Invariant("no checkpoint written".into()))?;
    let rel = |p: &Path| a.out.join(p.strip_prefix(&out_dir).unwrap_or(p));
    let outputs: Vec<PathBuf> = outcome.checkpoints.iter().map(|c| rel(&c.path)).collect();
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    if let Some(p) = &cfg.text_encoder.precomputed {
        inputs.push(p);
    }
    ctx.write_manifest(
        &a.out.join("manifest.json"),
        "train",
        serde_json::to_value(&cfg)?,
        &inputs,
        &output_refs,
    )?;
    println!(
        "{} steps: l_mlm {first:.4} -> {last:.4}; final checkpoint {} sha256 {}",
        outcome.log.len(),
        rel(&final_ckpt.path).display(),
        final_ckpt.sha256
    );
    Ok(())
}

enum Setting {
    Level(flare_core::eval::CritiqueLevel),
    Mutation(MutationSpec),
}

fn eval_cmd(ctx: &Ctx, a: &EvalCommon, setting: Setting) -> Result<(), CliError> {
    if a.k.is_empty() || a.k.contains(&0) || a.ndcg_k == 0 {
        return Err(CliError::Usage("cut-offs must be at least 1".into()));
    }
    let bundle = ctx.load_bundle(&a.corpus)?;
    let (model, meta, sha) = load_model(&ctx.path(&a.checkpoint), &bundle)?;
    let opts = EvalOptions {
        k_list: a.k.clone(),
        ndcg_k: a.ndcg_k,
        ideal: a.ideal,
        limit: a.limit,
    };
    let (command, mut report): (&str, EvalReport) = match &setting {
        Setting::Level(level) => ("eval", evaluate(&model, &bundle, a.split, *level, &opts)?),
        Setting::Mutation(spec) => (
            "mutate-eval",
            evaluate_mutated(&model, &bundle, a.split, spec, &opts)?,
        ),
    };
    report.config = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "checkpoint_sha256": sha,
        "corpus": a.corpus.display().to_string(),
        "corpus_hash": bundle.content_hash()?,
        "fusion": meta.model.mode,
        "step": meta.step,
    });
    if meta.model.mode != FusionMode::TextIdCritique && matches!(setting, Setting::Mutation(_)) {
        log::warn!("model was not trained with critiques; mutated critiques are ignored");
    }

    for (name, value) in &report.metrics {
        println!("{name:>14}  {value:.4}");
    }
    println!(
        "{:>14}  {} (skipped {}, critique fallbacks {})",
        "queries", report.n_queries, report.skipped, report.critique_fallbacks
    );
    let mut outputs: Vec<&Path> = Vec::new();
    if let Some(p) = &a.out {
        report.write_json(&ctx.ensure_parent(p)?)?;
        outputs.push(p);
    }
    if let Some(p) = &a.csv {
        report.write_csv(&ctx.ensure_parent(p)?)?;
        outputs.push(p);
    }
    if let Some(p) = &a.out {
        let config = json!({
            "split": report.split,
            "critique": report.critique,
            "options": report.options,
            "model": report.config,
        });
        ctx.write_manifest(&manifest_beside(p), command, config, &[&a.checkpoint, &a.corpus], &outputs)?;
    }
    let violations = report.invariant_violations();
    if !violations.is_empty() {
        return Err(CliError::Invariant(violations.join("; ")));
    }
    Ok(())
}

fn grad_check(ctx: &Ctx, a: &GradCheckArgs) -> Result<(), CliError> {
    let modes: Vec<FusionMode> = match a.mode.as_str() {
        "all" => vec![FusionMode::IdOnly, FusionMode::TextId, FusionMode::TextIdCritique],
        m => vec![config::serde_enum(m).map_err(|e| CliError::Usage(format!("--mode: {e}")))?],
    };
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for mode in modes {
        let mut cfg = ToyCheckConfig {
            mode,
            ..ToyCheckConfig::default()
        };
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(e) = a.eps {
            cfg.eps = e;
        }
        if let Some(t) = a.tolerance {
            cfg.tolerance = t;
        }
        let r = toy_grad_check(&cfg)?;
        println!(
            "{:<18} max relative error {:.3e} at {} (tolerance {:.0e}) {}",
            format!("{mode:?}"),
            r.max_rel_err,
            r.worst_param,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(format!("{mode:?}"));
        }
        reports.push(json!({ "config": cfg, "report": r }));
    }
    if let Some(p) = &a.out {
        let full = ctx.ensure_parent(p)?;
        std::fs::write(&full, serde_json::to_vec_pretty(&reports)?).map_err(|e| CliError::io(&full, e))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let cors = flare_serve::cors(a.cors_origin.as_deref()).map_err(|e| CliError::Usage(e.to_string()))?;
    let snapshot = Snapshot::load(&ctx.path(&a.checkpoint), &ctx.path(&a.corpus))?;
    log::info!(
        "loaded checkpoint {} ({} items)",
        snapshot.fingerprint.checkpoint_sha256,
        snapshot.items.len()
    );
    let state = Arc::new(AppState::with_snapshot(snapshot));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io(Path::new("tokio runtime"), e))?;
    rt.block_on(flare_serve::run(addr, state, cors))?;
    Ok(())
}
