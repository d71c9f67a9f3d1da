use serde::{Deserialize, Serialize};

use super::masking::{MaskedSequence, Token};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSlot {
    /// Offset into the flattened token list.
    pub offset: usize,
    pub label: usize,
}

/// Several masked sequences laid end to end in one example. Attention is
/// legal only between tokens with equal `segment_ids`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub token_budget: usize,
    pub tokens: Vec<Token>,
    pub segment_ids: Vec<usize>,
    /// Position of each token counted back from the end of its own
    /// sequence, so the newest item is always position 0.
    pub positions: Vec<usize>,
    pub critiques: Vec<Option<String>>,
    pub mask_slots: Vec<MaskSlot>,
    /// Index of each packed sequence in the input slice, by segment id.
    pub sources: Vec<usize>,
}

impl PackedBatch {
    fn empty(token_budget: usize) -> Self {
        Self {
            token_budget,
            tokens: Vec::new(),
            segment_ids: Vec::new(),
            positions: Vec::new(),
            critiques: Vec::new(),
            mask_slots: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_sequences(&self) -> usize {
        self.sources.len()
    }

    pub fn push(&mut self, source: usize, seq: &MaskedSequence) {
        let segment = self.sources.len();
        let base = self.tokens.len();
        self.sources.push(source);
        self.tokens.extend_from_slice(&seq.inputs);
        self.segment_ids.extend(std::iter::repeat_n(segment, seq.len()));
        self.positions.extend((0..seq.len()).rev());
        self.critiques.extend(seq.critiques.iter().cloned());
        self.mask_slots.extend(
            seq.masked_positions
                .iter()
                .zip(&seq.labels)
                .map(|(&p, &label)| MaskSlot {
                    offset: base + p,
                    label,
                }),
        );
    }

    /// Wraps one sequence, ignoring any budget.
    pub fn single(seq: &MaskedSequence) -> Self {
        let mut b = Self::empty(seq.len());
        b.push(0, seq);
        b
    }

    /// Lays several batches end to end as one, renumbering segments so
    /// attention stays within each original sequence.
    pub fn concat(parts: &[PackedBatch]) -> Self {
        let mut out = Self::empty(parts.iter().map(|p| p.token_budget).sum());
        for p in parts {
            let base = out.tokens.len();
            let seg = out.sources.len();
            out.tokens.extend_from_slice(&p.tokens);
            out.segment_ids.extend(p.segment_ids.iter().map(|s| s + seg));
            out.positions.extend_from_slice(&p.positions);
            out.critiques.extend(p.critiques.iter().cloned());
            out.mask_slots.extend(p.mask_slots.iter().map(|s| MaskSlot {
                offset: s.offset + base,
                label: s.label,
            }));
            out.sources.extend_from_slice(&p.sources);
        }
        out
    }

    /// Tokens `a` and `b` may attend to each other.
    pub fn may_attend(&self, a: usize, b: usize) -> bool {
        self.segment_ids[a] == self.segment_ids[b]
    }
}

/// First-fit-decreasing bin packing by sequence length.
///
/// Sequences are considered longest first (ties by input order) and each
/// goes into the first batch with room. Batches are returned in creation
/// order.
pub fn pack_batches(seqs: &[MaskedSequence], token_budget: usize) -> Result<Vec<PackedBatch>> {
    if let Some(s) = seqs.iter().find(|s| s.len() > token_budget) {
        return Err(Error::OverBudget {
            len: s.len(),
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by(|&a, &b| seqs[b].len().cmp(&seqs[a].len()));
    let mut batches: Vec<PackedBatch> = Vec::new();
    for i in order {
        let len = seqs[i].len();
        match batches.iter_mut().find(|b| b.len() + len <= token_budget) {
            Some(b) => b.push(i, &seqs[i]),
            None => {
                let mut b = PackedBatch::empty(token_budget);
                b.push(i, &seqs[i]);
                batches.push(b);
            }
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_of(len: usize) -> MaskedSequence {
        let items: Vec<usize> = (0..len).collect();
        MaskedSequence::with_positions(&items, &[len - 1])
    }

    #[test]
    fn first_fit_decreasing_example() {
        let seqs = vec![seq_of(5), seq_of(5), seq_of(6)];
        let packed = pack_batches(&seqs, 10).unwrap();
        let mut shapes: Vec<Vec<usize>> = packed
            .iter()
            .map(|b| b.sources.iter().map(|&s| seqs[s].len()).collect())
            .collect();
        shapes.sort();
        assert_eq!(shapes, vec![vec![5, 5], vec![6]]);
    }

    #[test]
    fn single_sequence_one_segment() {
        let packed = pack_batches(&[seq_of(4)], 10).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].segment_ids, vec![0; 4]);
        assert_eq!(packed[0].positions, vec![3, 2, 1, 0]);
        assert_eq!(packed[0].mask_slots, vec![MaskSlot { offset: 3, label: 3 }]);
    }

    #[test]
    fn over_budget_is_an_error() {
        assert!(matches!(
            pack_batches(&[seq_of(11)], 10),
            Err(Error::OverBudget { len: 11, budget: 10 })
        ));
    }

    #[test]
    fn slots_offset_into_flat_layout() {
        let packed = pack_batches(&[seq_of(3), seq_of(4)], 10).unwrap();
        let b = &packed[0];
        assert_eq!(b.sources, vec![1, 0]);
        assert_eq!(b.mask_slots[0].offset, 3);
        assert_eq!(b.mask_slots[1].offset, 4 + 2);
        assert!(b.may_attend(0, 3) && !b.may_attend(3, 4));
    }
}
