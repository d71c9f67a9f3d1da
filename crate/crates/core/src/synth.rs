//! Synthetic corpora with known generating structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    split_leave_one_out, CorpusBundle, CorpusSource, Event, Item, UserSequence,
};
use crate::error::{Error, Result};

/// Names of the four hierarchy levels; each node gets a globally unique token.
const LEVEL_NAMES: [&str; 4] = ["dept", "aisle", "shelf", "bin"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Structure {
    /// Next item is `σ(previous)` for a fixed cyclic permutation `σ`.
    Markov,
    /// Items sit in the leaves of a four-level category tree. The next leaf
    /// is `f(previous leaf)` with probability `follow_prob`, otherwise a
    /// uniformly random leaf; the item is uniform within the leaf. `f` is a
    /// cyclic permutation that keeps the first `shared_levels` levels, so
    /// sequences stay within a neighbourhood of the tree.
    CategoryDriven {
        branching: [usize; 4],
        follow_prob: f64,
        shared_levels: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub structure: Structure,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn markov(n_items: usize, n_users: usize, seed: u64) -> Self {
        Self {
            n_items,
            n_users,
            structure: Structure::Markov,
            min_len: 4,
            max_len: 12,
            seed,
        }
    }

    /// 48 leaves; transitions stay within the same second-level category.
    pub fn category_driven(n_items: usize, n_users: usize, seed: u64) -> Self {
        Self {
            n_items,
            n_users,
            structure: Structure::CategoryDriven {
                branching: [2, 3, 2, 4],
                follow_prob: 0.6,
                shared_levels: 2,
            },
            min_len: 4,
            max_len: 12,
            seed,
        }
    }

    fn n_leaves(&self) -> usize {
        match &self.structure {
            Structure::Markov => 1,
            Structure::CategoryDriven { branching, .. } => branching.iter().product(),
        }
    }

    /// Recall@k of the best possible ranker that knows the generator and
    /// sees the previous item.
    pub fn bayes_optimal_recall(&self, k: usize) -> f64 {
        match &self.structure {
            Structure::Markov => {
                if k >= 1 {
                    1.0
                } else {
                    0.0
                }
            }
            Structure::CategoryDriven { follow_prob, .. } => {
                let leaves = self.n_leaves() as f64;
                let per_leaf = (self.n_items / self.n_leaves()) as f64;
                let p_leaf = follow_prob + (1.0 - follow_prob) / leaves;
                let p_other = (1.0 - follow_prob) / leaves;
                let mut probs: Vec<f64> = Vec::with_capacity(self.n_items);
                for leaf in 0..self.n_leaves() {
                    let p = if leaf == 0 { p_leaf } else { p_other };
                    probs.extend(std::iter::repeat_n(p / per_leaf, per_leaf as usize));
                }
                probs.sort_by(|a, b| b.total_cmp(a));
                probs.iter().take(k).sum()
            }
        }
    }
}

/// Category path of leaf `leaf` under `branching`, root first.
fn leaf_path(leaf: usize, branching: &[usize; 4]) -> [usize; 4] {
    let mut path = [0; 4];
    let mut rem = leaf;
    for l in (0..4).rev() {
        path[l] = rem % branching[l];
        rem /= branching[l];
    }
    path
}

/// Unique display names per node: level `l` node gets a running index over
/// all nodes at that level.
fn leaf_category_names(leaf: usize, branching: &[usize; 4]) -> Vec<String> {
    let path = leaf_path(leaf, branching);
    let mut global = 0;
    (0..4)
        .map(|l| {
            global = global * branching[l] + path[l];
            format!("{}{}", LEVEL_NAMES[l], global)
        })
        .collect()
}

/// Random cyclic permutation (Sattolo), so no element maps to itself.
fn cyclic_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Draws the next item from the previous one.
type NextItem = Box<dyn Fn(usize, &mut ChaCha8Rng) -> usize>;

pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<CorpusBundle> {
    if spec.n_items < 4 {
        return Err(Error::InvalidArgument(format!(
            "synthetic corpus needs at least 4 items, got {}",
            spec.n_items
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument(format!(
            "bad length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (items, next): (Vec<Item>, NextItem) =
        match &spec.structure {
            Structure::Markov => {
                let sigma = cyclic_permutation(spec.n_items, &mut rng);
                let items = (0..spec.n_items)
                    .map(|i| Item {
                        title: format!("Product {i}"),
                        categories: vec!["Synthetic".into()],
                        has_metadata: true,
                        ..Item::bare(format!("M{i:05}"), i)
                    })
                    .collect();
                (items, Box::new(move |prev, _| sigma[prev]))
            }
            Structure::CategoryDriven {
                branching,
                follow_prob,
                shared_levels,
            } => {
                let leaves: usize = branching.iter().product();
                if *shared_levels > 4 {
                    return Err(Error::InvalidArgument(format!(
                        "shared_levels {shared_levels} above 4"
                    )));
                }
                if branching.contains(&0) || spec.n_items < leaves {
                    return Err(Error::InvalidArgument(format!(
                        "{} items cannot fill {leaves} leaf categories",
                        spec.n_items
                    )));
                }
                if !(0.0..=1.0).contains(follow_prob) {
                    return Err(Error::InvalidArgument(format!(
                        "follow_prob {follow_prob} outside [0, 1]"
                    )));
                }
                let per_leaf = spec.n_items / leaves;
                let n_items = per_leaf * leaves;
                let scope: usize = branching[*shared_levels..].iter().product();
                let mut f = Vec::with_capacity(leaves);
                for group in 0..leaves / scope {
                    let base = group * scope;
                    f.extend(cyclic_permutation(scope, &mut rng).into_iter().map(|l| base + l));
                }
                let items: Vec<Item> = (0..n_items)
                    .map(|i| Item {
                        title: format!("Product {i}"),
                        categories: leaf_category_names(i % leaves, branching),
                        has_metadata: true,
                        ..Item::bare(format!("C{i:05}"), i)
                    })
                    .collect();
                let p = *follow_prob;
                (
                    items,
                    Box::new(move |prev, rng: &mut ChaCha8Rng| {
                        let leaf = prev % leaves;
                        let target = if rng.random::<f64>() < p {
                            f[leaf]
                        } else {
                            rng.random_range(0..leaves)
                        };
                        target + leaves * rng.random_range(0..per_leaf)
                    }),
                )
            }
        };

    let sequences: Vec<UserSequence> = (0..spec.n_users)
        .map(|u| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let mut cur = rng.random_range(0..items.len());
            let mut events = Vec::with_capacity(len);
            for t in 0..len {
                if t > 0 {
                    cur = next(cur, &mut rng);
                }
                events.push(Event {
                    item_index: cur,
                    timestamp: (t as i64 + 1) * 60,
                });
            }
            UserSequence {
                user_id: format!("user{u:06}"),
                events,
            }
        })
        .collect();

    let mut spec_out = spec.clone();
    spec_out.n_items = items.len();
    Ok(CorpusBundle {
        source: CorpusSource::Synthetic { spec: spec_out },
        split: split_leave_one_out(&sequences),
        items,
        sequences,
    })
}

/// Recovers the generator's leaf transition table from a bundle, for tests
/// and diagnostics: for markov corpora the item successor map.
pub fn observed_successors(bundle: &CorpusBundle) -> Vec<Vec<usize>> {
    let mut succ = vec![Vec::new(); bundle.items.len()];
    for s in &bundle.sequences {
        for w in s.events.windows(2) {
            succ[w[0].item_index].push(w[1].item_index);
        }
    }
    for v in &mut succ {
        v.sort_unstable();
        v.dedup();
    }
    succ
}

/// Deterministically shuffles a copy of `items`, for callers wanting a
/// seeded order.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markov_pairs_follow_fixed_permutation() {
        let b = make_synthetic_corpus(&SyntheticSpec::markov(100, 300, 5)).unwrap();
        let succ = observed_successors(&b);
        assert!(succ.iter().all(|s| s.len() <= 1));
        assert!(succ.iter().enumerate().all(|(i, s)| s.first() != Some(&i)));
        b.validate().unwrap();
    }

    #[test]
    fn category_driven_structure() {
        let mut spec = SyntheticSpec::category_driven(240, 200, 9);
        spec.structure = Structure::CategoryDriven {
            branching: [2, 3, 2, 2],
            follow_prob: 1.0,
            shared_levels: 2,
        };
        let b = make_synthetic_corpus(&spec).unwrap();
        b.validate().unwrap();
        assert!(b.items.iter().all(|i| i.categories.len() == 4));
        // With follow_prob = 1 the next item's leaf is a function of the
        // previous leaf, never itself, and keeps the first two levels.
        let leaves = 24;
        let mut map = vec![None; leaves];
        for s in &b.sequences {
            for w in s.events.windows(2) {
                let (a, c) = (w[0].item_index % leaves, w[1].item_index % leaves);
                assert!(map[a].is_none_or(|m| m == c));
                assert_ne!(a, c);
                let (ca, cc) = (&b.items[w[0].item_index].categories, &b.items[w[1].item_index].categories);
                assert_eq!(ca[..2], cc[..2]);
                map[a] = Some(c);
            }
        }
        assert!((spec.bayes_optimal_recall(1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn category_names_are_hierarchical_and_unique() {
        let br = [2, 3, 2, 2];
        let a = leaf_category_names(0, &br);
        let b = leaf_category_names(1, &br);
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
        let all: std::collections::HashSet<String> =
            (0..24).map(|l| leaf_category_names(l, &br)[3].clone()).collect();
        assert_eq!(all.len(), 24);
    }

    #[test]
    fn too_few_items_rejected() {
        assert!(make_synthetic_corpus(&SyntheticSpec::markov(3, 10, 0)).is_err());
    }
}
