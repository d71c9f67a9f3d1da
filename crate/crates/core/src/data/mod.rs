//! Corpus ingestion, preprocessing, splitting, masking and packing.

mod bundle;
mod masking;
mod packing;
mod parse;
mod preprocess;
mod split;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use bundle::{CorpusBundle, CorpusSource, BUNDLE_FORMAT, BUNDLE_VERSION};
pub use masking::{mask_sequence, MaskMode, MaskedSequence, Token, DEFAULT_MASK_RATE};
pub use packing::{pack_batches, MaskSlot, PackedBatch};
pub use parse::{parse_category_field, parse_reviews, ParseStats};
pub use preprocess::{build_sequences, LengthPolicy, SequenceOptions};
pub use split::{
    split_leave_one_out, split_unseen_users, EvalQuery, SplitMode, SplitSet, TrainSequence,
    UserPartition, MIN_EVAL_LENGTH,
};

/// Delimiter between hierarchy levels in category strings.
pub const CATEGORY_DELIMITER: &str = " - ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub item_index: usize,
    pub title: String,
    pub description: String,
    /// Root-to-leaf category hierarchy.
    pub categories: Vec<String>,
    pub brand: Option<String>,
    pub price: Option<f64>,
    /// False when the item appeared in interactions but had no metadata record.
    pub has_metadata: bool,
}

impl Item {
    pub fn bare(item_id: impl Into<String>, item_index: usize) -> Self {
        Self {
            item_id: item_id.into(),
            item_index,
            title: String::new(),
            description: String::new(),
            categories: Vec::new(),
            brand: None,
            price: None,
            has_metadata: false,
        }
    }

    /// First `levels` category levels joined with the hierarchy delimiter.
    pub fn category_prefix(&self, levels: usize) -> String {
        let n = levels.min(self.categories.len());
        self.categories[..n].join(CATEGORY_DELIMITER)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_index: usize,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub events: Vec<Event>,
}

impl UserSequence {
    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item_index).collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Bijection between external item ids and dense indices `0..n`.
///
/// Two special tokens sit just above the item range: MASK at `n`, PAD at `n+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemVocab {
    id_to_index: HashMap<String, usize>,
    items: Vec<Item>,
}

impl ItemVocab {
    /// Builds from items whose `item_index` fields must equal their position.
    pub fn from_items(items: Vec<Item>) -> crate::Result<Self> {
        let mut id_to_index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if it.item_index != i {
                return Err(crate::Error::InvalidArgument(format!(
                    "item {} has index {} at position {i}",
                    it.item_id, it.item_index
                )));
            }
            if id_to_index.insert(it.item_id.clone(), i).is_some() {
                return Err(crate::Error::InvalidArgument(format!(
                    "duplicate item id {}",
                    it.item_id
                )));
            }
        }
        Ok(Self { id_to_index, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn mask_index(&self) -> usize {
        self.items.len()
    }

    pub fn pad_index(&self) -> usize {
        self.items.len() + 1
    }

    /// Rows needed in an embedding table covering items and specials.
    pub fn table_rows(&self) -> usize {
        self.items.len() + 2
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.id_to_index.get(item_id).copied()
    }

    pub fn item(&self, index: usize) -> Option<&Item> {
        self.items.get(index)
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }
}
