use std::sync::Arc;

use proptest::prelude::*;

use flare_core::data::Item;
use flare_core::flare::TextContext;
use flare_core::synth::{make_synthetic_corpus, SyntheticSpec};
use flare_core::textenc::{
    load_precomputed, tokenize, write_precomputed, EmbeddingCache, Provenance, StandInEncoder,
    TextEncoder,
};
use flare_core::train::{load_preset, train_with_text};

fn items_from(titles: &[String]) -> Vec<Item> {
    titles
        .iter()
        .enumerate()
        .map(|(i, t)| Item {
            title: t.clone(),
            categories: vec!["Office".into(), format!("Sub{}", i % 3)],
            ..Item::bare(format!("P{i:03}"), i)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn precomputed_round_trip_is_bit_exact(
        titles in prop::collection::vec("[a-zA-Z0-9 ,.-]{0,40}", 1..12),
        seed in any::<u64>(),
        dim in 1usize..9,
    ) {
        let items = items_from(&titles);
        let enc = StandInEncoder::new(seed, 64, dim);
        let cache = EmbeddingCache::build(&items, &enc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        write_precomputed(&path, &items, &cache).unwrap();
        let (back, stats) = load_precomputed(&path, &items, &enc).unwrap();
        prop_assert_eq!(stats.loaded, items.len());
        prop_assert_eq!(stats.fallback, 0);
        prop_assert_eq!(back.content_hash(), cache.content_hash());
        for i in 0..items.len() {
            let (a, b) = (cache.get(i).unwrap(), back.get(i).unwrap());
            let bits = |t: &flare_core::nn::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert_eq!(bits(a), bits(b));
        }
        let is_precomputed = matches!(back.provenance(), Provenance::Precomputed { .. });
        prop_assert!(is_precomputed);
    }

    #[test]
    fn stand_in_is_deterministic_per_token(text in "[a-zA-Z ]{0,60}", seed in any::<u64>()) {
        let a = StandInEncoder::new(seed, 128, 6);
        let b = StandInEncoder::new(seed, 128, 6);
        let (ea, eb) = (a.encode(&text), b.encode(&text));
        prop_assert_eq!(ea.data(), eb.data());
        let tokens = tokenize(&text);
        prop_assert_eq!(ea.rows(), tokens.len());
        for (r, tok) in tokens.iter().enumerate() {
            let single = a.encode(tok);
            prop_assert_eq!(ea.row(r), single.row(0));
        }
    }
}

#[test]
fn training_leaves_the_cache_untouched() {
    let bundle = make_synthetic_corpus(&SyntheticSpec::category_driven(96, 30, 2)).unwrap();
    let mut cfg = load_preset("desk-critique").unwrap();
    cfg.total_steps = 20;
    let enc = Arc::new(StandInEncoder::new(cfg.text_encoder.seed, cfg.text_encoder.buckets, cfg.text_encoder.d_text));
    let cache = Arc::new(EmbeddingCache::build(&bundle.items, &enc));
    let before = cache.content_hash();
    let text = TextContext::new(cache.clone(), enc.clone()).unwrap();
    let out = train_with_text(&cfg, &bundle, Some(text), None).unwrap();
    assert_eq!(cache.content_hash(), before);
    assert_eq!(out.model.text.as_ref().unwrap().cache.content_hash(), before);
    let fresh = EmbeddingCache::build(&bundle.items, &StandInEncoder::new(cfg.text_encoder.seed, cfg.text_encoder.buckets, cfg.text_encoder.d_text));
    assert_eq!(fresh.content_hash(), before);
}
