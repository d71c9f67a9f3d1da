//! Versioned on-disk corpus: catalog, preprocessed sequences and splits.
//!
//! The file is a single JSON object:
//!
//! ```text
//! {"format": "flare-corpus", "version": 1, "content_hash": "<hex>", "body": {...}}
//! ```
//!
//! `content_hash` is the lowercase hex SHA-256 of the compact JSON
//! serialization of `body` (fields in declaration order, no whitespace).
//! Loading re-serializes the decoded body and rejects the file on mismatch.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_sequences, parse_reviews, split_leave_one_out, split_unseen_users, Item, ItemVocab,
    ParseStats, SequenceOptions, SplitMode, SplitSet, UserSequence,
};
use crate::error::{Error, Result};
use crate::nn::checkpoint::sha256_hex;
use crate::synth::SyntheticSpec;

pub const BUNDLE_FORMAT: &str = "flare-corpus";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSource {
    Reviews {
        options: SequenceOptions,
        stats: ParseStats,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusBundle {
    pub source: CorpusSource,
    pub items: Vec<Item>,
    pub sequences: Vec<UserSequence>,
    pub split: SplitSet,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    content_hash: String,
    body: CorpusBundle,
}

impl CorpusBundle {
    /// Parses review and metadata JSON lines, preprocesses and splits them.
    /// `split_seed` is used only for the unseen-users split.
    pub fn from_reviews<R: BufRead, M: BufRead>(
        reviews: R,
        meta: M,
        options: SequenceOptions,
        split: SplitMode,
        split_seed: u64,
    ) -> Result<Self> {
        let (vocab, raw, stats) = parse_reviews(reviews, meta)?;
        let sequences = build_sequences(&raw, &vocab, &options);
        let split = match split {
            SplitMode::LeaveOneOut => split_leave_one_out(&sequences),
            SplitMode::UnseenUsers => split_unseen_users(&sequences, split_seed)?,
        };
        let bundle = Self {
            source: CorpusSource::Reviews { options, stats },
            items: vocab.items().to_vec(),
            sequences,
            split,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn vocab(&self) -> Result<ItemVocab> {
        ItemVocab::from_items(self.items.clone())
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let env = Envelope {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            content_hash: self.content_hash()?,
            body: self.clone(),
        };
        Ok(serde_json::to_vec(&env)?)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: origin.to_path_buf(),
            reason,
        };
        let env: Envelope = serde_json::from_slice(bytes)?;
        if env.format != BUNDLE_FORMAT || env.version != BUNDLE_VERSION {
            return Err(corrupt(format!(
                "unsupported bundle {} v{}",
                env.format, env.version
            )));
        }
        let actual = env.body.content_hash()?;
        if actual != env.content_hash {
            return Err(corrupt(format!(
                "content hash mismatch: header {}, body {actual}",
                env.content_hash
            )));
        }
        env.body.validate()?;
        Ok(env.body)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        std::fs::write(path, self.to_bytes()?)?;
        self.content_hash()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    /// Checks catalog indexing and that every referenced item exists.
    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let n = vocab.len();
        let check = |i: usize| {
            if i < n {
                Ok(())
            } else {
                Err(Error::UnknownItemIndex(i))
            }
        };
        for s in &self.sequences {
            for e in &s.events {
                check(e.item_index)?;
            }
            if s.events.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                return Err(Error::InvalidArgument(format!(
                    "sequence for {} is not time-ordered",
                    s.user_id
                )));
            }
        }
        for t in &self.split.train {
            t.items.iter().try_for_each(|&i| check(i))?;
        }
        for q in self.split.valid.iter().chain(&self.split.test) {
            q.history.iter().try_for_each(|&i| check(i))?;
            check(q.target)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_leave_one_out, Event};

    fn bundle() -> CorpusBundle {
        let items: Vec<Item> = (0..3)
            .map(|i| {
                let mut it = Item::bare(format!("A{i}"), i);
                it.title = format!("Thing {i}");
                it.price = Some(0.1 * i as f64);
                it
            })
            .collect();
        let seqs = vec![UserSequence {
            user_id: "u".into(),
            events: [0, 1, 2, 1]
                .iter()
                .enumerate()
                .map(|(t, &i)| Event {
                    item_index: i,
                    timestamp: t as i64,
                })
                .collect(),
        }];
        CorpusBundle {
            source: CorpusSource::Reviews {
                options: SequenceOptions::trim51(),
                stats: ParseStats::default(),
            },
            split: split_leave_one_out(&seqs),
            items,
            sequences: seqs,
        }
    }

    #[test]
    fn round_trip_and_hash_check() {
        let b = bundle();
        let bytes = b.to_bytes().unwrap();
        let back = CorpusBundle::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, b);
        let tampered = String::from_utf8(bytes).unwrap().replace("Thing 1", "Thing 9");
        assert!(matches!(
            CorpusBundle::from_bytes(tampered.as_bytes(), Path::new("mem")),
            Err(Error::Corrupt { .. })
        ));
    }
}
