use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use flare_core::data::{CorpusBundle, Item};
use flare_core::flare::{FlareModel, FusionMode};
use flare_core::train::load_model;

/// Identifies the model and catalog a response was computed from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub checkpoint_sha256: String,
    pub corpus_hash: String,
    pub fusion: FusionMode,
    pub step: usize,
    pub n_items: usize,
}

/// One node of the catalog category tree. `count` is the number of items
/// whose category path starts with `path`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryNode {
    pub name: String,
    pub path: String,
    pub depth: usize,
    pub count: usize,
    pub children: Vec<CategoryNode>,
}

#[derive(Default)]
struct Trie {
    count: usize,
    children: BTreeMap<String, Trie>,
}

impl Trie {
    fn into_nodes(self, prefix: &[String]) -> Vec<CategoryNode> {
        self.children
            .into_iter()
            .map(|(name, sub)| {
                let mut path = prefix.to_vec();
                path.push(name.clone());
                CategoryNode {
                    path: path.join(flare_core::data::CATEGORY_DELIMITER),
                    depth: path.len(),
                    count: sub.count,
                    children: sub.into_nodes(&path),
                    name,
                }
            })
            .collect()
    }
}

/// Builds the category forest, children sorted by name.
pub fn category_tree(items: &[Item]) -> Vec<CategoryNode> {
    let mut root = Trie::default();
    for item in items {
        let mut node = &mut root;
        for level in &item.categories {
            node = node.children.entry(level.clone()).or_default();
            node.count += 1;
        }
    }
    root.into_nodes(&[])
}

pub fn count_nodes(nodes: &[CategoryNode]) -> usize {
    nodes.iter().map(|n| 1 + count_nodes(&n.children)).sum()
}

/// Immutable model plus catalog served to every request.
pub struct Snapshot {
    pub model: FlareModel,
    pub items: Vec<Item>,
    pub categories: Vec<CategoryNode>,
    pub fingerprint: Fingerprint,
    lowercase_titles: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl Snapshot {
    pub fn new(model: FlareModel, bundle: &CorpusBundle, fingerprint: Fingerprint) -> Self {
        let items = bundle.items.clone();
        Self {
            model,
            categories: category_tree(&items),
            lowercase_titles: items.iter().map(|i| i.title.to_lowercase()).collect(),
            by_id: items
                .iter()
                .map(|i| (i.item_id.clone(), i.item_index))
                .collect(),
            items,
            fingerprint,
        }
    }

    pub fn load(checkpoint: &Path, corpus: &Path) -> flare_core::Result<Self> {
        let bundle = CorpusBundle::load(corpus)?;
        let (model, meta, sha) = load_model(checkpoint, &bundle)?;
        let fingerprint = Fingerprint {
            checkpoint_sha256: sha,
            corpus_hash: bundle.content_hash()?,
            fusion: meta.model.mode,
            step: meta.step,
            n_items: bundle.items.len(),
        };
        Ok(Self::new(model, &bundle, fingerprint))
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.by_id.get(item_id).copied()
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.index_of(item_id).map(|i| &self.items[i])
    }

    /// Indices of items whose title contains `query`, ignoring case, in
    /// catalog order.
    pub fn search(&self, query: &str) -> Vec<usize> {
        let q = query.to_lowercase();
        self.lowercase_titles
            .iter()
            .enumerate()
            .filter(|(_, t)| t.contains(&q))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn item(i: usize, cats: &[&str]) -> Item {
        Item {
            categories: cats.iter().map(|c| c.to_string()).collect(),
            ..Item::bare(format!("I{i}"), i)
        }
    }

    #[test]
    fn tree_nodes_match_distinct_prefixes() {
        let items = vec![
            item(0, &["a", "b", "c"]),
            item(1, &["a", "b", "d"]),
            item(2, &["a", "e"]),
            item(3, &["f"]),
            item(4, &[]),
        ];
        let tree = category_tree(&items);
        let prefixes: BTreeSet<Vec<&str>> = items
            .iter()
            .flat_map(|it| {
                (1..=it.categories.len())
                    .map(|n| it.categories[..n].iter().map(String::as_str).collect())
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(count_nodes(&tree), prefixes.len());
        assert_eq!(tree[0].count, 3);
        assert_eq!(tree[0].children[0].path, "a - b");
        assert_eq!(tree[0].children[0].count, 2);
    }
}
