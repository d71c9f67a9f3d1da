use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Items ordered by (score descending, item index ascending).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Ranks every index of `scores`.
    pub fn from_scores(query_id: impl Into<String>, scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self {
            query_id: query_id.into(),
            scores: order.iter().map(|&i| scores[i]).collect(),
            items: order,
        }
    }

    /// 1-based rank of `target`.
    pub fn rank_of(&self, target: usize) -> Option<usize> {
        self.items.iter().position(|&i| i == target).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.items[..k.min(self.items.len())]
    }
}

pub fn recall_at_k(ranked: &RankedList, target: usize, k: usize) -> f64 {
    if ranked.top(k).contains(&target) {
        1.0
    } else {
        0.0
    }
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &RankedList, target: usize, k: usize) -> f64 {
    match ranked.rank_of(target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn mrr(ranked: &RankedList, target: usize) -> Result<f64> {
    ranked
        .rank_of(target)
        .map(|r| 1.0 / r as f64)
        .ok_or(Error::UnknownItemIndex(target))
}

/// Length of the longest common prefix of an item's categories and the
/// critique's levels.
pub fn category_relevance(categories: &[String], critique: &[String]) -> usize {
    categories
        .iter()
        .zip(critique)
        .take_while(|(a, b)| a == b)
        .count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdealDcg {
    /// Every one of the `k` ranks fully matches the critique.
    #[default]
    FullRelevance,
    /// The retrieved relevances, re-sorted descending.
    RetrievedList,
}

/// nDCG with graded relevance `2^rel − 1`, where `rel` is the category
/// prefix overlap with the critique.
pub fn cat_ndcg(
    retrieved: &[&[String]],
    critique: &[String],
    k: usize,
    ideal: IdealDcg,
) -> f64 {
    let levels = critique.len();
    let rels: Vec<usize> = retrieved
        .iter()
        .take(k)
        .map(|c| category_relevance(c, critique))
        .collect();
    let gain = |rel: usize| 2f64.powi(rel as i32) - 1.0;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = rels
        .iter()
        .enumerate()
        .map(|(i, &r)| gain(r) * discount(i + 1))
        .sum();
    let idcg: f64 = match ideal {
        IdealDcg::FullRelevance => (1..=k).map(|r| gain(levels) * discount(r)).sum(),
        IdealDcg::RetrievedList => {
            let mut sorted = rels.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            sorted
                .iter()
                .enumerate()
                .map(|(i, &r)| gain(r) * discount(i + 1))
                .sum()
        }
    };
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}
