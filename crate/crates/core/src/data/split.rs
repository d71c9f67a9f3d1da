use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::UserSequence;
use crate::error::{Error, Result};

/// Sequences shorter than this never produce validation or test queries.
pub const MIN_EVAL_LENGTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    LeaveOneOut,
    UnseenUsers,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub user_id: String,
    pub items: Vec<usize>,
}

/// Predict `target` from `history`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub user_id: String,
    pub history: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPartition {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub mode: SplitMode,
    pub train: Vec<TrainSequence>,
    pub valid: Vec<EvalQuery>,
    pub test: Vec<EvalQuery>,
    /// Present in unseen-users mode.
    pub users: Option<UserPartition>,
}

/// Training view of a sequence: the last two events are withheld whenever
/// the sequence is long enough to supply evaluation targets.
fn training_items(items: &[usize]) -> Vec<usize> {
    if items.len() >= MIN_EVAL_LENGTH {
        items[..items.len() - 2].to_vec()
    } else {
        items.to_vec()
    }
}

/// Per user: penultimate event is the validation target, last event the test
/// target; training sees neither.
pub fn split_leave_one_out(seqs: &[UserSequence]) -> SplitSet {
    let mut split = SplitSet {
        mode: SplitMode::LeaveOneOut,
        train: Vec::with_capacity(seqs.len()),
        valid: Vec::new(),
        test: Vec::new(),
        users: None,
    };
    for s in seqs {
        let items = s.items();
        if items.is_empty() {
            continue;
        }
        split.train.push(TrainSequence {
            user_id: s.user_id.clone(),
            items: training_items(&items),
        });
        let n = items.len();
        if n >= MIN_EVAL_LENGTH {
            split.valid.push(EvalQuery {
                user_id: s.user_id.clone(),
                history: items[..n - 2].to_vec(),
                target: items[n - 2],
            });
            split.test.push(EvalQuery {
                user_id: s.user_id.clone(),
                history: items[..n - 1].to_vec(),
                target: items[n - 1],
            });
        }
    }
    split
}

/// Disjoint 80/10/10 partition of users; validation and test users are
/// queried on their last event.
pub fn split_unseen_users(seqs: &[UserSequence], seed: u64) -> Result<SplitSet> {
    if seqs.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "unseen-users split needs at least 10 users, got {}",
            seqs.len()
        )));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_valid = seqs.len() / 10;
    let n_test = seqs.len() / 10;
    let n_train = seqs.len() - n_valid - n_test;

    let mut split = SplitSet {
        mode: SplitMode::UnseenUsers,
        train: Vec::with_capacity(n_train),
        valid: Vec::new(),
        test: Vec::new(),
        users: Some(UserPartition {
            train: Vec::with_capacity(n_train),
            valid: Vec::with_capacity(n_valid),
            test: Vec::with_capacity(n_test),
        }),
    };
    let users = split.users.as_mut().expect("set above");
    for (rank, &i) in order.iter().enumerate() {
        let s = &seqs[i];
        let items = s.items();
        let n = items.len();
        let query = || EvalQuery {
            user_id: s.user_id.clone(),
            history: items[..n - 1].to_vec(),
            target: items[n - 1],
        };
        if rank < n_train {
            users.train.push(s.user_id.clone());
            if n > 0 {
                split.train.push(TrainSequence {
                    user_id: s.user_id.clone(),
                    items: training_items(&items),
                });
            }
        } else if rank < n_train + n_valid {
            users.valid.push(s.user_id.clone());
            if n >= MIN_EVAL_LENGTH {
                split.valid.push(query());
            }
        } else {
            users.test.push(s.user_id.clone());
            if n >= MIN_EVAL_LENGTH {
                split.test.push(query());
            }
        }
    }
    Ok(split)
}
