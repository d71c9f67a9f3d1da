//! Ranking metrics, the leave-one-out harness, critique levels, category
//! mutation and Cat-nDCG.

mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{
    cat_ndcg, category_relevance, mrr, ndcg_at_k, recall_at_k, IdealDcg, RankedList,
};

use crate::data::{CorpusBundle, EvalQuery, Item, CATEGORY_DELIMITER};
use crate::error::{Error, Result};
use crate::flare::{FlareModel, Query};

pub const PRECISE_LEVELS: usize = 4;
pub const BROAD_LEVELS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritiqueLevel {
    #[default]
    None,
    Broad,
    Precise,
}

impl CritiqueLevel {
    pub fn levels(self) -> Option<usize> {
        match self {
            CritiqueLevel::None => None,
            CritiqueLevel::Broad => Some(BROAD_LEVELS),
            CritiqueLevel::Precise => Some(PRECISE_LEVELS),
        }
    }

    /// Category levels revealed for `item`, and whether the item had fewer
    /// levels than requested.
    pub fn critique_levels(self, item: &Item) -> (Option<Vec<String>>, bool) {
        match self.levels() {
            None => (None, false),
            Some(_) if item.categories.is_empty() => (None, true),
            Some(n) => {
                let short = item.categories.len() < n;
                (Some(item.categories[..n.min(item.categories.len())].to_vec()), short)
            }
        }
    }
}

impl std::str::FromStr for CritiqueLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "broad" => Ok(Self::Broad),
            "precise" => Ok(Self::Precise),
            _ => Err(Error::InvalidArgument(format!(
                "critique level {s:?}; expected none, broad or precise"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationSpec {
    /// First mutated level (1-based, 2..=4); levels before it are kept.
    pub level: usize,
    pub min_items_per_category: usize,
    pub seed: u64,
}

impl MutationSpec {
    pub fn new(level: usize, seed: u64) -> Result<Self> {
        if !(2..=PRECISE_LEVELS).contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "mutation level {level} outside 2..=4"
            )));
        }
        Ok(Self {
            level,
            min_items_per_category: 5,
            seed,
        })
    }
}

/// Item counts per precise (first four levels) category path.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryIndex {
    counts: BTreeMap<Vec<String>, usize>,
}

impl CategoryIndex {
    pub fn from_items(items: &[Item]) -> Self {
        let mut counts = BTreeMap::new();
        for it in items {
            if it.categories.len() >= PRECISE_LEVELS {
                *counts
                    .entry(it.categories[..PRECISE_LEVELS].to_vec())
                    .or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, path: &[String]) -> usize {
        self.counts.get(path).copied().unwrap_or(0)
    }

    pub fn paths(&self) -> impl Iterator<Item = (&Vec<String>, usize)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }
}

/// Candidate precise categories for mutating `original` at `spec.level`:
/// same levels before it, a different category at it, and enough items.
pub fn mutation_candidates<'a>(
    original: &[String],
    spec: &MutationSpec,
    index: &'a CategoryIndex,
) -> Vec<&'a Vec<String>> {
    let j = spec.level - 1;
    if original.len() < PRECISE_LEVELS {
        return Vec::new();
    }
    index
        .paths()
        .filter(|(p, n)| {
            *n >= spec.min_items_per_category && p[..j] == original[..j] && p[j] != original[j]
        })
        .map(|(p, _)| p)
        .collect()
}

pub fn mutate_critique<R: rand::Rng>(
    original: &[String],
    spec: &MutationSpec,
    index: &CategoryIndex,
    rng: &mut R,
) -> Option<Vec<String>> {
    mutation_candidates(original, spec, index)
        .choose(rng)
        .map(|p| (*p).clone())
}

/// Produces full-vocabulary scores for a batch of queries.
pub trait Scorer {
    fn score(&self, queries: &[Query]) -> Result<Vec<Vec<f64>>>;
}

/// Token budget used when packing evaluation queries.
pub const EVAL_TOKEN_BUDGET: usize = 512;

impl Scorer for FlareModel {
    fn score(&self, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
        self.score_queries(queries, EVAL_TOKEN_BUDGET)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Valid,
    Test,
}

impl EvalSplit {
    pub fn queries(self, bundle: &CorpusBundle) -> &[EvalQuery] {
        match self {
            EvalSplit::Valid => &bundle.split.valid,
            EvalSplit::Test => &bundle.split.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k_list: Vec<usize>,
    /// Cut-off for nDCG and Cat-nDCG.
    pub ndcg_k: usize,
    pub ideal: IdealDcg,
    /// Evaluate at most this many queries (in split order).
    pub limit: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k_list: vec![1, 5, 10],
            ndcg_k: 10,
            ideal: IdealDcg::FullRelevance,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub user_id: String,
    pub target: usize,
    pub rank: usize,
    pub critique: Option<String>,
    /// Aligned with the report's `k_list`.
    pub recall: Vec<f64>,
    pub ndcg: f64,
    pub mrr: f64,
    pub cat_ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CritiqueSetting {
    Level { level: CritiqueLevel },
    Mutation { spec: MutationSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub critique: CritiqueSetting,
    pub options: EvalOptions,
    pub n_queries: usize,
    /// Queries without a usable mutation target.
    pub skipped: usize,
    /// Queries whose item had fewer category levels than requested.
    pub critique_fallbacks: usize,
    pub metrics: BTreeMap<String, f64>,
    pub records: Vec<QueryRecord>,
    /// Free-form echo of the run configuration.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.metric(&format!("recall@{k}"))
    }

    /// Violations of the report's internal consistency: aggregates must be
    /// the means of the per-query values and every value must lie in [0, 1].
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.records.len() != self.n_queries {
            bad.push(format!("{} records for {} queries", self.records.len(), self.n_queries));
        }
        let n = self.records.len().max(1) as f64;
        let mut expect: Vec<(String, f64)> = Vec::new();
        for (j, k) in self.options.k_list.iter().enumerate() {
            let sum: f64 = self.records.iter().map(|r| r.recall[j]).sum();
            expect.push((format!("recall@{k}"), sum / n));
        }
        let k = self.options.ndcg_k;
        expect.push((format!("ndcg@{k}"), self.records.iter().map(|r| r.ndcg).sum::<f64>() / n));
        expect.push(("mrr".into(), self.records.iter().map(|r| r.mrr).sum::<f64>() / n));
        expect.push((
            format!("cat_ndcg@{k}"),
            self.records.iter().map(|r| r.cat_ndcg).sum::<f64>() / n,
        ));
        for (name, value) in expect {
            let got = self.metric(&name);
            if !((got - value).abs() <= 1e-9) {
                bad.push(format!("{name}: aggregate {got} vs mean {value}"));
            }
        }
        for r in &self.records {
            let values = r.recall.iter().chain([&r.ndcg, &r.mrr, &r.cat_ndcg]);
            if values.into_iter().any(|v| !(0.0..=1.0).contains(v)) {
                bad.push(format!("query {} has a metric outside [0, 1]", r.user_id));
            }
        }
        bad
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let recall_cols: Vec<String> = self
            .options
            .k_list
            .iter()
            .map(|k| format!("recall@{k}"))
            .collect();
        writeln!(
            out,
            "user_id,target,rank,critique,{},ndcg@{k},mrr,cat_ndcg@{k}",
            recall_cols.join(","),
            k = self.options.ndcg_k
        )?;
        for r in &self.records {
            let recalls: Vec<String> = r.recall.iter().map(|v| v.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                quote(&r.user_id),
                r.target,
                r.rank,
                quote(r.critique.as_deref().unwrap_or("")),
                recalls.join(","),
                r.ndcg,
                r.mrr,
                r.cat_ndcg
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

struct Prepared<'a> {
    query: &'a EvalQuery,
    critique: Option<Vec<String>>,
    /// Levels Cat-nDCG is measured against.
    reference: Vec<String>,
}

fn run(
    scorer: &dyn Scorer,
    bundle: &CorpusBundle,
    prepared: Vec<Prepared>,
    opts: &EvalOptions,
) -> Result<(Vec<QueryRecord>, BTreeMap<String, f64>)> {
    if prepared.is_empty() {
        return Err(Error::EmptySplit);
    }
    if opts.k_list.contains(&0) || opts.ndcg_k == 0 {
        return Err(Error::InvalidArgument("cut-offs must be at least 1".into()));
    }
    let queries: Vec<Query> = prepared
        .iter()
        .map(|p| Query {
            history: p.query.history.clone(),
            critique: p.critique.as_ref().map(|c| c.join(CATEGORY_DELIMITER)),
        })
        .collect();
    let scores = scorer.score(&queries)?;
    if scores.len() != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "scorer returned {} rows for {} queries",
            scores.len(),
            queries.len()
        )));
    }
    let mut records = Vec::with_capacity(prepared.len());
    for ((p, q), s) in prepared.iter().zip(queries).zip(&scores) {
        if s.len() != bundle.items.len() {
            return Err(Error::InvalidArgument(format!(
                "scorer returned {} scores for {} items",
                s.len(),
                bundle.items.len()
            )));
        }
        let ranked = RankedList::from_scores(p.query.user_id.clone(), s);
        let target = p.query.target;
        let top: Vec<&[String]> = ranked
            .top(opts.ndcg_k)
            .iter()
            .map(|&i| bundle.items[i].categories.as_slice())
            .collect();
        records.push(QueryRecord {
            user_id: p.query.user_id.clone(),
            target,
            rank: ranked.rank_of(target).ok_or(Error::UnknownItemIndex(target))?,
            critique: q.critique,
            recall: opts
                .k_list
                .iter()
                .map(|&k| recall_at_k(&ranked, target, k))
                .collect(),
            ndcg: ndcg_at_k(&ranked, target, opts.ndcg_k),
            mrr: mrr(&ranked, target)?,
            cat_ndcg: cat_ndcg(&top, &p.reference, opts.ndcg_k, opts.ideal),
        });
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&QueryRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let mut metrics = BTreeMap::new();
    for (j, k) in opts.k_list.iter().enumerate() {
        metrics.insert(format!("recall@{k}"), mean(&|r| r.recall[j]));
    }
    metrics.insert(format!("ndcg@{}", opts.ndcg_k), mean(&|r| r.ndcg));
    metrics.insert("mrr".into(), mean(&|r| r.mrr));
    metrics.insert(format!("cat_ndcg@{}", opts.ndcg_k), mean(&|r| r.cat_ndcg));
    Ok((records, metrics))
}

fn limited<'a>(bundle: &'a CorpusBundle, split: EvalSplit, opts: &EvalOptions) -> &'a [EvalQuery] {
    let q = split.queries(bundle);
    &q[..opts.limit.unwrap_or(q.len()).min(q.len())]
}

/// Ranks the full catalog for each query of `split`, attaching the target
/// item's categories at `level` as the critique.
pub fn evaluate(
    scorer: &dyn Scorer,
    bundle: &CorpusBundle,
    split: EvalSplit,
    level: CritiqueLevel,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut fallbacks = 0;
    let prepared: Vec<Prepared> = limited(bundle, split, opts)
        .iter()
        .map(|q| {
            let item = &bundle.items[q.target];
            let (critique, short) = level.critique_levels(item);
            fallbacks += usize::from(short);
            let reference = match &critique {
                Some(c) => c.clone(),
                None => item.categories[..item.categories.len().min(PRECISE_LEVELS)].to_vec(),
            };
            Prepared {
                query: q,
                critique,
                reference,
            }
        })
        .collect();
    let n_queries = prepared.len();
    let (records, metrics) = run(scorer, bundle, prepared, opts)?;
    Ok(EvalReport {
        split,
        critique: CritiqueSetting::Level { level },
        options: opts.clone(),
        n_queries,
        skipped: 0,
        critique_fallbacks: fallbacks,
        metrics,
        records,
        config: serde_json::Value::Null,
    })
}

/// Replaces each target's precise critique with a mutated one and measures
/// how well the ranking follows it (Cat-nDCG against the mutated string).
pub fn evaluate_mutated(
    scorer: &dyn Scorer,
    bundle: &CorpusBundle,
    split: EvalSplit,
    spec: &MutationSpec,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    MutationSpec::new(spec.level, spec.seed)?;
    let index = CategoryIndex::from_items(&bundle.items);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut skipped = 0;
    let mut prepared = Vec::new();
    for q in limited(bundle, split, opts) {
        match mutate_critique(&bundle.items[q.target].categories, spec, &index, &mut rng) {
            Some(m) => prepared.push(Prepared {
                query: q,
                critique: Some(m.clone()),
                reference: m,
            }),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("mutation level {}: skipped {skipped} queries without candidates", spec.level);
    }
    let n_queries = prepared.len();
    let (records, metrics) = run(scorer, bundle, prepared, opts)?;
    Ok(EvalReport {
        split,
        critique: CritiqueSetting::Mutation { spec: spec.clone() },
        options: opts.clone(),
        n_queries,
        skipped,
        critique_fallbacks: 0,
        metrics,
        records,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_synthetic_corpus, SyntheticSpec};

    struct Oracle<'a>(&'a CorpusBundle, EvalSplit);

    impl Scorer for Oracle<'_> {
        fn score(&self, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
            let split = self.1.queries(self.0);
            Ok(queries
                .iter()
                .map(|q| {
                    let target = split
                        .iter()
                        .find(|e| e.history == q.history)
                        .map(|e| e.target)
                        .unwrap();
                    let mut s = vec![0.0; self.0.items.len()];
                    s[target] = 1.0;
                    s
                })
                .collect())
        }
    }

    #[test]
    fn perfect_oracle_scores_one() {
        let b = make_synthetic_corpus(&SyntheticSpec::markov(30, 40, 3)).unwrap();
        let r = evaluate(
            &Oracle(&b, EvalSplit::Test),
            &b,
            EvalSplit::Test,
            CritiqueLevel::None,
            &EvalOptions::default(),
        )
        .unwrap();
        for m in ["recall@1", "recall@5", "recall@10", "ndcg@10", "mrr"] {
            assert_eq!(r.metric(m), 1.0, "{m}");
        }
        assert!(r.invariant_violations().is_empty());
        let mut tampered = r.clone();
        tampered.metrics.insert("mrr".into(), 0.5);
        assert_eq!(tampered.invariant_violations().len(), 1);
    }

    #[test]
    fn mutation_keeps_prefix_and_category_size() {
        let b = make_synthetic_corpus(&SyntheticSpec::category_driven(240, 10, 1)).unwrap();
        let index = CategoryIndex::from_items(&b.items);
        let orig = &b.items[0].categories;
        for level in 2..=4 {
            let spec = MutationSpec::new(level, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let m = mutate_critique(orig, &spec, &index, &mut rng).unwrap();
            assert_eq!(m[..level - 1], orig[..level - 1]);
            assert_ne!(m[level - 1], orig[level - 1]);
            assert!(index.count(&m) >= 5);
            let mut rng2 = ChaCha8Rng::seed_from_u64(9);
            assert_eq!(Some(m), mutate_critique(orig, &spec, &index, &mut rng2));
        }
        assert!(MutationSpec::new(1, 0).is_err());
    }

    #[test]
    fn empty_split_is_an_error() {
        let mut b = make_synthetic_corpus(&SyntheticSpec::markov(30, 40, 3)).unwrap();
        b.split.valid.clear();
        assert!(matches!(
            evaluate(
                &Oracle(&b, EvalSplit::Valid),
                &b,
                EvalSplit::Valid,
                CritiqueLevel::None,
                &EvalOptions::default()
            ),
            Err(Error::EmptySplit)
        ));
    }
}
