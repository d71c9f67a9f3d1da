use serde::{Deserialize, Serialize};

use super::{ItemVocab, UserSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPolicy {
    /// Keep only the most recent `n` events.
    Trim(usize),
    /// Drop sequences longer than `n` events.
    Filter(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceOptions {
    pub length: LengthPolicy,
    /// Drop events whose item has an empty title.
    pub require_title: bool,
    /// Collapse consecutive repeats of the same item.
    pub dedup: bool,
}

impl SequenceOptions {
    /// Small-catalog preprocessing: trim to the last 51 events.
    pub fn trim51() -> Self {
        Self {
            length: LengthPolicy::Trim(51),
            require_title: false,
            dedup: false,
        }
    }

    /// Large-catalog preprocessing: drop sequences over 50 events and
    /// events on untitled items.
    pub fn filter50() -> Self {
        Self {
            length: LengthPolicy::Filter(50),
            require_title: true,
            dedup: false,
        }
    }
}

/// Applies title filtering, de-duplication and the length policy, in that
/// order. Sequences left empty are dropped.
pub fn build_sequences(
    raw: &[UserSequence],
    vocab: &ItemVocab,
    opts: &SequenceOptions,
) -> Vec<UserSequence> {
    raw.iter()
        .filter_map(|seq| {
            let mut events = seq.events.clone();
            if opts.require_title {
                events.retain(|e| {
                    vocab
                        .item(e.item_index)
                        .is_some_and(|it| !it.title.trim().is_empty())
                });
            }
            if opts.dedup {
                events.dedup_by_key(|e| e.item_index);
            }
            match opts.length {
                LengthPolicy::Trim(n) => {
                    if events.len() > n {
                        events.drain(..events.len() - n);
                    }
                }
                LengthPolicy::Filter(n) => {
                    if events.len() > n {
                        return None;
                    }
                }
            }
            (!events.is_empty()).then(|| UserSequence {
                user_id: seq.user_id.clone(),
                events,
            })
        })
        .collect()
}
