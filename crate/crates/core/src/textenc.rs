//! Frozen text-encoder boundary.
//!
//! Encoders map a string to a sequence of `d_text`-dimensional vectors. They
//! are never trained; item encodings are computed once into an
//! [`EmbeddingCache`].
//!
//! Precomputed embeddings file (JSON lines, UTF-8):
//!
//! ```text
//! {"dim": D, "count": N}
//! {"id": "<item_id>", "vecs": [[f64; D], ...]}     (N records)
//! ```
//!
//! Numbers are written with shortest round-trip formatting, so a
//! write/load cycle reproduces every `f64` exactly.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Item, CATEGORY_DELIMITER};
use crate::error::{Error, Result};
use crate::nn::checkpoint::sha256_hex;
use crate::nn::Tensor;

pub const DEFAULT_D_TEXT: usize = 64;
pub const DEFAULT_BUCKETS: usize = 4096;
pub const DEFAULT_ENCODER_SEED: u64 = 0x5eed_7e47;

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    /// `m × dim` rows, one per token; `m = 0` for empty text.
    fn encode(&self, text: &str) -> Tensor;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashes each token to a row of a fixed random table.
#[derive(Clone, Debug)]
pub struct StandInEncoder {
    seed: u64,
    table: Tensor,
}

impl StandInEncoder {
    pub fn new(seed: u64, buckets: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..buckets * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            seed,
            table: Tensor::from_vec(buckets, dim, data).expect("sized above"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn buckets(&self) -> usize {
        self.table.rows()
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.table.rows() as u64) as usize
    }
}

impl Default for StandInEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_ENCODER_SEED, DEFAULT_BUCKETS, DEFAULT_D_TEXT)
    }
}

impl TextEncoder for StandInEncoder {
    fn dim(&self) -> usize {
        self.table.cols()
    }

    fn encode(&self, text: &str) -> Tensor {
        let rows: Vec<Vec<f64>> = tokenize(text)
            .iter()
            .map(|t| self.table.row(self.bucket(t)).to_vec())
            .collect();
        Tensor::from_rows(&rows, self.dim()).expect("uniform rows")
    }
}

/// Key:value rendering of an item's descriptive fields, empty fields omitted.
pub fn item_text(item: &Item) -> String {
    let mut parts = Vec::with_capacity(4);
    if !item.title.is_empty() {
        parts.push(format!("title: {}", item.title));
    }
    if !item.description.is_empty() {
        parts.push(format!("description: {}", item.description));
    }
    if !item.categories.is_empty() {
        parts.push(format!(
            "category: {}",
            item.categories.join(CATEGORY_DELIMITER)
        ));
    }
    if let Some(b) = item.brand.as_deref().filter(|b| !b.is_empty()) {
        parts.push(format!("brand: {b}"));
    }
    parts.join("; ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    StandIn { seed: u64, buckets: usize },
    Precomputed { sha256: String, fallback: usize },
}

/// Per-item encoder output, indexed by `item_index`. Read-only once built.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    d_text: usize,
    seqs: Vec<Arc<Tensor>>,
    provenance: Provenance,
}

impl EmbeddingCache {
    pub fn build(items: &[Item], encoder: &StandInEncoder) -> Self {
        Self {
            d_text: encoder.dim(),
            seqs: items
                .iter()
                .map(|i| Arc::new(encoder.encode(&item_text(i))))
                .collect(),
            provenance: Provenance::StandIn {
                seed: encoder.seed(),
                buckets: encoder.buckets(),
            },
        }
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn get(&self, item_index: usize) -> Result<&Tensor> {
        self.seqs
            .get(item_index)
            .map(|t| t.as_ref())
            .ok_or(Error::UnknownItemIndex(item_index))
    }

    /// Fingerprint of the cached values, independent of provenance.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(self.d_text as u64).to_le_bytes());
        for t in &self.seqs {
            bytes.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct PrecomputedHeader {
    dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct PrecomputedRecord {
    id: String,
    vecs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrecomputedStats {
    pub loaded: usize,
    pub unknown_ids: usize,
    /// Catalog items absent from the file, encoded with the stand-in instead.
    pub fallback: usize,
}

fn dim_check(rows: &[Vec<f64>], dim: usize, id: &str) -> Result<()> {
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: r.len(),
                context: format!("record {id:?}"),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite embedding value in record {id:?}"
            )));
        }
    }
    Ok(())
}

/// Reads a precomputed embeddings file for `items`. Items missing from the
/// file are encoded with `fallback`, which must produce the file's dimension.
pub fn load_precomputed(
    path: &Path,
    items: &[Item],
    fallback: &StandInEncoder,
) -> Result<(EmbeddingCache, PrecomputedStats)> {
    let bytes = std::fs::read(path)?;
    let mut lines = BufReader::new(bytes.as_slice()).lines();
    let header: PrecomputedHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Malformed {
            line: 1,
            reason: e.to_string(),
        })?,
        None => {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: "missing header".into(),
            })
        }
    };
    if fallback.dim() != header.dim {
        return Err(Error::DimMismatch {
            expected: header.dim,
            found: fallback.dim(),
            context: "fallback encoder".into(),
        });
    }
    let index: HashMap<&str, usize> = items
        .iter()
        .map(|i| (i.item_id.as_str(), i.item_index))
        .collect();
    let mut seqs: Vec<Option<Arc<Tensor>>> = vec![None; items.len()];
    let mut stats = PrecomputedStats::default();
    let mut records = 0;
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        let rec: PrecomputedRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: n + 2,
            reason: e.to_string(),
        })?;
        dim_check(&rec.vecs, header.dim, &rec.id)?;
        match index.get(rec.id.as_str()) {
            Some(&idx) => {
                seqs[idx] = Some(Arc::new(Tensor::from_rows(&rec.vecs, header.dim)?));
                stats.loaded += 1;
            }
            None => stats.unknown_ids += 1,
        }
    }
    if records != header.count {
        log::warn!(
            "{}: header declares {} records, found {records}",
            path.display(),
            header.count
        );
    }
    if stats.unknown_ids > 0 {
        log::warn!("{}: skipped {} unknown item ids", path.display(), stats.unknown_ids);
    }
    let seqs = seqs
        .into_iter()
        .zip(items)
        .map(|(s, item)| {
            s.unwrap_or_else(|| {
                stats.fallback += 1;
                Arc::new(fallback.encode(&item_text(item)))
            })
        })
        .collect();
    if stats.fallback > 0 {
        log::warn!(
            "{}: {} items missing, using the stand-in encoder",
            path.display(),
            stats.fallback
        );
    }
    Ok((
        EmbeddingCache {
            d_text: header.dim,
            seqs,
            provenance: Provenance::Precomputed {
                sha256: sha256_hex(&bytes),
                fallback: stats.fallback,
            },
        },
        stats,
    ))
}

pub fn write_precomputed(path: &Path, items: &[Item], cache: &EmbeddingCache) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut out,
        &PrecomputedHeader {
            dim: cache.d_text,
            count: items.len(),
        },
    )?;
    out.write_all(b"\n")?;
    for item in items {
        let t = cache.get(item.item_index)?;
        let rec = PrecomputedRecord {
            id: item.item_id.clone(),
            vecs: (0..t.rows()).map(|r| t.row(r).to_vec()).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
