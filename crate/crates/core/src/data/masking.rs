use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// One input position: a visible item or the mask token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Item(usize),
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each position masked independently, at least one guaranteed.
    Bidirectional,
    /// Only the final position is masked.
    LastOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub inputs: Vec<Token>,
    /// Strictly increasing.
    pub masked_positions: Vec<usize>,
    /// Original item at each masked position.
    pub labels: Vec<usize>,
    /// Optional critique text attached to each position.
    pub critiques: Vec<Option<String>>,
    /// True when no Bernoulli draw fired and one position was forced.
    pub forced: bool,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Masks exactly the listed positions (sorted and de-duplicated).
    pub fn with_positions(items: &[usize], positions: &[usize]) -> Self {
        let mut pos = positions.to_vec();
        pos.sort_unstable();
        pos.dedup();
        let mut inputs: Vec<Token> = items.iter().map(|&i| Token::Item(i)).collect();
        let labels = pos
            .iter()
            .map(|&p| {
                inputs[p] = Token::Mask;
                items[p]
            })
            .collect();
        Self {
            critiques: vec![None; items.len()],
            inputs,
            masked_positions: pos,
            labels,
            forced: false,
        }
    }

    /// History followed by one masked slot to predict, as used at inference.
    pub fn for_prediction(history: &[usize], critique: Option<String>) -> Self {
        let mut inputs: Vec<Token> = history.iter().map(|&i| Token::Item(i)).collect();
        inputs.push(Token::Mask);
        let mut critiques = vec![None; inputs.len()];
        *critiques.last_mut().expect("non-empty") = critique;
        Self {
            masked_positions: vec![history.len()],
            // Placeholder label: inference never reads it.
            labels: vec![0],
            inputs,
            critiques,
            forced: false,
        }
    }
}

/// Replaces a random subset of `items` with the mask token.
pub fn mask_sequence<R: Rng>(items: &[usize], rate: f64, rng: &mut R, mode: MaskMode) -> MaskedSequence {
    assert!(!items.is_empty(), "cannot mask an empty sequence");
    match mode {
        MaskMode::LastOnly => MaskedSequence::with_positions(items, &[items.len() - 1]),
        MaskMode::Bidirectional => {
            let mut positions: Vec<usize> = (0..items.len())
                .filter(|_| rng.random::<f64>() < rate)
                .collect();
            let forced = positions.is_empty();
            if forced {
                positions.push(rng.random_range(0..items.len()));
            }
            let mut m = MaskedSequence::with_positions(items, &positions);
            m.forced = forced;
            m
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn explicit_positions_example() {
        // [ID1..ID5] masking the 2nd and 4th items.
        let m = MaskedSequence::with_positions(&[1, 2, 3, 4, 5], &[1, 3]);
        assert_eq!(
            m.inputs,
            vec![Token::Item(1), Token::Mask, Token::Item(3), Token::Mask, Token::Item(5)]
        );
        assert_eq!(m.labels, vec![2, 4]);
        assert_eq!(m.masked_positions, vec![1, 3]);
    }

    #[test]
    fn zero_rate_forces_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = mask_sequence(&[4, 5, 6, 7], 0.0, &mut rng, MaskMode::Bidirectional);
            assert_eq!(m.masked_positions.len(), 1);
            assert!(m.forced);
        }
    }

    #[test]
    fn last_only_masks_final() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask_sequence(&[9, 8, 7], 0.9, &mut rng, MaskMode::LastOnly);
        assert_eq!(m.masked_positions, vec![2]);
        assert_eq!(m.labels, vec![7]);
    }

    #[test]
    fn single_item_sequence_masks_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_sequence(&[42], DEFAULT_MASK_RATE, &mut rng, MaskMode::Bidirectional);
        assert_eq!(m.inputs, vec![Token::Mask]);
        assert_eq!(m.labels, vec![42]);
    }
}
