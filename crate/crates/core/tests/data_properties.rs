use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flare_core::data::{
    mask_sequence, pack_batches, split_leave_one_out, split_unseen_users, CorpusBundle, Event,
    MaskMode, MaskedSequence, Token, UserSequence,
};
use flare_core::synth::{make_synthetic_corpus, SyntheticSpec};

fn user_seqs(lengths: &[usize], n_items: usize) -> Vec<UserSequence> {
    lengths
        .iter()
        .enumerate()
        .map(|(u, &len)| UserSequence {
            user_id: format!("u{u:04}"),
            events: (0..len)
                .map(|t| Event {
                    item_index: (u * 7 + t * 3) % n_items,
                    timestamp: t as i64,
                })
                .collect(),
        })
        .collect()
}

proptest! {
    #[test]
    fn masking_contract(
        items in prop::collection::vec(0usize..500, 1..60),
        rate in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = mask_sequence(&items, rate, &mut rng, MaskMode::Bidirectional);
        prop_assert!(!m.masked_positions.is_empty());
        prop_assert_eq!(m.len(), items.len());
        prop_assert_eq!(m.labels.len(), m.masked_positions.len());
        prop_assert!(m.masked_positions.windows(2).all(|w| w[0] < w[1]));
        for (&p, &label) in m.masked_positions.iter().zip(&m.labels) {
            prop_assert_eq!(label, items[p]);
            prop_assert_eq!(m.inputs[p], Token::Mask);
        }
        for (p, t) in m.inputs.iter().enumerate() {
            if !m.masked_positions.contains(&p) {
                prop_assert_eq!(*t, Token::Item(items[p]));
            }
        }
        if m.forced {
            prop_assert_eq!(m.masked_positions.len(), 1);
        }

        let last = mask_sequence(&items, rate, &mut rng, MaskMode::LastOnly);
        prop_assert_eq!(&last.masked_positions, &vec![items.len() - 1]);
        prop_assert_eq!(&last.labels, &vec![items[items.len() - 1]]);

        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(
            mask_sequence(&items, rate, &mut a, MaskMode::Bidirectional),
            mask_sequence(&items, rate, &mut b, MaskMode::Bidirectional)
        );
    }

    #[test]
    fn packing_layout(
        lengths in prop::collection::vec(1usize..30, 1..25),
        extra in 0usize..40,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<MaskedSequence> = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let items: Vec<usize> = (0..n).map(|t| i * 100 + t).collect();
                mask_sequence(&items, 0.2, &mut rng, MaskMode::Bidirectional)
            })
            .collect();
        let budget = lengths.iter().copied().max().unwrap() + extra;
        let batches = pack_batches(&seqs, budget).unwrap();
        let mut seen = Vec::new();
        for b in &batches {
            prop_assert!(b.len() <= budget);
            let mut offset = 0;
            for (seg, &src) in b.sources.iter().enumerate() {
                let s = &seqs[src];
                seen.push(src);
                prop_assert_eq!(&b.tokens[offset..offset + s.len()], &s.inputs[..]);
                prop_assert!(b.segment_ids[offset..offset + s.len()].iter().all(|&x| x == seg));
                let pos: Vec<usize> = (0..s.len()).rev().collect();
                prop_assert_eq!(&b.positions[offset..offset + s.len()], &pos[..]);
                offset += s.len();
            }
            prop_assert_eq!(offset, b.len());
            for i in 0..b.len() {
                for j in 0..b.len() {
                    prop_assert_eq!(b.may_attend(i, j), b.segment_ids[i] == b.segment_ids[j]);
                }
            }
            for slot in &b.mask_slots {
                prop_assert_eq!(b.tokens[slot.offset], Token::Mask);
            }
            let expect_slots: usize = b.sources.iter().map(|&s| seqs[s].labels.len()).sum();
            prop_assert_eq!(b.mask_slots.len(), expect_slots);
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..seqs.len()).collect::<Vec<_>>());
        prop_assert_eq!(pack_batches(&seqs, budget).unwrap(), batches);
    }

    #[test]
    fn leave_one_out_hides_eval_targets(lengths in prop::collection::vec(1usize..20, 1..40)) {
        let seqs = user_seqs(&lengths, 50);
        let split = split_leave_one_out(&seqs);
        prop_assert_eq!(split.train.len(), seqs.len());
        let eligible = lengths.iter().filter(|&&n| n >= 4).count();
        prop_assert_eq!(split.valid.len(), eligible);
        prop_assert_eq!(split.test.len(), eligible);
        for (s, t) in seqs.iter().zip(&split.train) {
            let items = s.items();
            let n = items.len();
            if n >= 4 {
                // Training never reaches the last two events.
                prop_assert_eq!(&t.items[..], &items[..n - 2]);
            } else {
                prop_assert_eq!(&t.items, &items);
            }
        }
        for (v, t) in split.valid.iter().zip(&split.test) {
            prop_assert_eq!(&v.user_id, &t.user_id);
            let mut full = t.history.clone();
            full.push(t.target);
            let s = seqs.iter().find(|s| s.user_id == t.user_id).unwrap();
            prop_assert_eq!(full, s.items());
            prop_assert_eq!(v.target, t.history[t.history.len() - 1]);
            prop_assert_eq!(&v.history[..], &t.history[..t.history.len() - 1]);
        }
    }

    #[test]
    fn unseen_users_partition(n_users in 10usize..120, seed in any::<u64>()) {
        let lengths: Vec<usize> = (0..n_users).map(|u| 2 + u % 9).collect();
        let seqs = user_seqs(&lengths, 40);
        let split = split_unseen_users(&seqs, seed).unwrap();
        let p = split.users.as_ref().unwrap();
        let (tr, va, te): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) = (
            p.train.iter().collect(),
            p.valid.iter().collect(),
            p.test.iter().collect(),
        );
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(tr.len() + va.len() + te.len(), n_users);
        prop_assert_eq!(va.len(), n_users / 10);
        for q in &split.test {
            prop_assert!(te.contains(&q.user_id));
        }
        for t in &split.train {
            prop_assert!(tr.contains(&t.user_id));
        }
        prop_assert_eq!(split_unseen_users(&seqs, seed).unwrap(), split);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bundle_round_trip(items in 20usize..80, users in 5usize..40, seed in any::<u64>()) {
        let b = make_synthetic_corpus(&SyntheticSpec::markov(items, users, seed)).unwrap();
        let bytes = b.to_bytes().unwrap();
        let back = CorpusBundle::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let again = make_synthetic_corpus(&SyntheticSpec::markov(items, users, seed)).unwrap();
        prop_assert_eq!(again.content_hash().unwrap(), b.content_hash().unwrap());
    }
}
