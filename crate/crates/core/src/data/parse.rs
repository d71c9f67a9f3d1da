use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Event, Item, ItemVocab, UserSequence, CATEGORY_DELIMITER};
use crate::error::{Error, Result};

/// Counters collected while parsing; none of these abort the parse.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub review_lines: usize,
    pub meta_lines: usize,
    /// Metadata records whose asin had already been seen (last one wins).
    pub duplicate_meta: usize,
    /// Items referenced by reviews but absent from metadata.
    pub missing_meta: usize,
    /// Metadata records for items nobody reviewed.
    pub unreviewed_meta: usize,
}

#[derive(Deserialize)]
struct ReviewRecord {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
}

#[derive(Default)]
struct MetaRecord {
    title: String,
    description: String,
    categories: Vec<String>,
    brand: Option<String>,
    price: Option<f64>,
}

/// Splits a raw category field into hierarchy levels.
///
/// Arrays are first joined with `" - "`, then the result is split on the
/// same delimiter, so array elements that themselves contain the delimiter
/// expand into several levels.
pub fn parse_category_field(raw: &Value) -> Vec<String> {
    let joined = match raw {
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.as_str())
            .collect::<Vec<_>>()
            .join(CATEGORY_DELIMITER),
        Value::String(s) => s.clone(),
        _ => String::new(),
    };
    joined
        .split(CATEGORY_DELIMITER)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn text_field(raw: Option<&Value>) -> String {
    match raw {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.as_str())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" "),
        _ => String::new(),
    }
}

fn price_field(raw: Option<&Value>) -> Option<f64> {
    match raw {
        Some(Value::Number(n)) => n.as_f64(),
        Some(Value::String(s)) => {
            let cleaned: String = s.chars().filter(|c| *c != '$' && *c != ',').collect();
            cleaned.trim().parse().ok()
        }
        _ => None,
    }
}

fn parse_meta_line(line: &str, lineno: usize) -> Result<(String, MetaRecord)> {
    let v: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: lineno,
        reason: format!("metadata: {e}"),
    })?;
    let asin = v
        .get("asin")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Malformed {
            line: lineno,
            reason: "metadata: missing string field `asin`".into(),
        })?
        .to_string();
    let brand = text_field(v.get("brand"));
    Ok((
        asin,
        MetaRecord {
            title: text_field(v.get("title")),
            description: text_field(v.get("description")),
            categories: v.get("category").map(parse_category_field).unwrap_or_default(),
            brand: (!brand.is_empty()).then_some(brand),
            price: price_field(v.get("price")),
        },
    ))
}

/// Reads Amazon-reviews-style JSON lines into a vocabulary and one
/// timestamp-ordered sequence per reviewer.
///
/// Items are indexed in ascending asin order; sequences are returned in
/// ascending reviewer order. Equal timestamps keep their input order.
pub fn parse_reviews<R: BufRead, M: BufRead>(
    reviews: R,
    meta: M,
) -> Result<(ItemVocab, Vec<UserSequence>, ParseStats)> {
    let mut stats = ParseStats::default();

    let mut metadata: HashMap<String, MetaRecord> = HashMap::new();
    for (i, line) in meta.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.meta_lines += 1;
        let (asin, rec) = parse_meta_line(&line, i + 1)?;
        if metadata.insert(asin, rec).is_some() {
            stats.duplicate_meta += 1;
        }
    }

    let mut by_user: BTreeMap<String, Vec<(String, i64)>> = BTreeMap::new();
    for (i, line) in reviews.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.review_lines += 1;
        let r: ReviewRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            reason: format!("review: {e}"),
        })?;
        by_user
            .entry(r.reviewer_id)
            .or_default()
            .push((r.asin, r.unix_review_time));
    }

    let mut asins: Vec<&String> = by_user.values().flatten().map(|(a, _)| a).collect();
    asins.sort();
    asins.dedup();
    let items: Vec<Item> = asins
        .iter()
        .enumerate()
        .map(|(idx, asin)| match metadata.get(*asin) {
            Some(m) => Item {
                item_id: (*asin).clone(),
                item_index: idx,
                title: m.title.clone(),
                description: m.description.clone(),
                categories: m.categories.clone(),
                brand: m.brand.clone(),
                price: m.price,
                has_metadata: true,
            },
            None => {
                stats.missing_meta += 1;
                Item::bare((*asin).clone(), idx)
            }
        })
        .collect();
    stats.unreviewed_meta = metadata.len() - (items.len() - stats.missing_meta);
    let vocab = ItemVocab::from_items(items)?;

    let sequences = by_user
        .into_iter()
        .map(|(user_id, mut evs)| {
            evs.sort_by_key(|(_, t)| *t);
            UserSequence {
                user_id,
                events: evs
                    .into_iter()
                    .map(|(asin, t)| Event {
                        item_index: vocab.index_of(&asin).expect("indexed above"),
                        timestamp: t,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok((vocab, sequences, stats))
}
