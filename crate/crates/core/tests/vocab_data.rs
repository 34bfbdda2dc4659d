use draftedit::corrupt::{corrupt, corrupt_region, mtf_augment, CorruptedPair};
use draftedit::model::HashOracle;
use draftedit::{build_vocab, BlockLayout, Error, TokenId, Vocabulary};
use proptest::prelude::*;

fn vocab() -> Vocabulary {
    build_vocab("abcdefgh").unwrap()
}

fn arb_clean(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(0u32..8, len)
}

fn arb_rates() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b)| (a, b * (1.0 - a)))
}

#[test]
fn vocab_examples() {
    assert_eq!(build_vocab("ab").unwrap().size(), 5);
    assert_eq!(build_vocab("aaaa").unwrap().size(), 4);
    assert_eq!(build_vocab("0123456789").unwrap().size(), 13);
    assert!(matches!(build_vocab(""), Err(Error::EmptyCorpus)));
}

#[test]
fn vocab_survives_a_file_roundtrip() {
    let v = build_vocab("the quick brown fox").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.json");
    v.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), v);
}

#[test]
fn layout_maps_every_generation_position_once() {
    let layout = BlockLayout::new(3, 4, 5).unwrap();
    assert_eq!(layout.gen_len(), 20);
    let mut seen = vec![0; layout.num_blocks];
    for pos in 0..layout.total_len() {
        match layout.block_of(pos) {
            None => assert!(layout.is_prompt(pos)),
            Some(b) => {
                assert!(layout.block_range(b).contains(&pos));
                seen[b] += 1;
            }
        }
    }
    assert_eq!(seen, vec![4; 5]);
}

proptest! {
    #[test]
    fn vocab_ids_roundtrip(text in "[a-z0-9 ]{1,40}") {
        let v = build_vocab(&text).unwrap();
        let distinct: std::collections::BTreeSet<char> = text.chars().collect();
        prop_assert_eq!(v.size(), distinct.len() + 3);
        let ids = [v.mask_id(), v.eos_id(), v.pad_id()];
        prop_assert!(ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2]);
        prop_assert!(ids.iter().all(|&i| (i as usize) < v.size()));
        for id in 0..v.size() as TokenId {
            prop_assert_eq!(v.token_id(v.symbol(id).unwrap()), Some(id));
        }
        prop_assert_eq!(v.render(&v.encode(&text).unwrap()), text);
    }

    #[test]
    fn corruption_invariants_and_restore(clean in arb_clean(1..40), (m, n) in arb_rates(), seed in any::<u64>()) {
        let v = vocab();
        let pair = corrupt(&v, &clean, m, n, seed).unwrap();
        prop_assert!(pair.check_invariants(v.mask_id()).is_ok());
        prop_assert_eq!(pair.restore(), clean.clone());
        prop_assert!(pair.corrupted.iter().all(|&t| t == v.mask_id() || !v.is_sentinel(t)));
        prop_assert_eq!(corrupt(&v, &clean, m, n, seed).unwrap(), pair);
    }

    #[test]
    fn corrupt_region_leaves_outside_alone(clean in arb_clean(4..30), (m, n) in arb_rates(), seed in any::<u64>(), cut in 0usize..4) {
        let v = vocab();
        let region = cut..clean.len();
        let pair = corrupt_region(&v, &clean, region.clone(), m, n, seed).unwrap();
        prop_assert_eq!(&pair.corrupted[..cut], &clean[..cut]);
        prop_assert!(pair.m2t_positions.iter().chain(&pair.t2t_positions).all(|i| region.contains(i)));
    }

    #[test]
    fn rate_overflow_is_rejected(m in 0.01f64..=1.0, extra in 0.01f64..1.0) {
        let v = vocab();
        let n = (1.0 - m + extra).min(1.0);
        prop_assume!(m + n > 1.0 + 1e-9);
        prop_assert!(matches!(corrupt(&v, &[0, 1], m, n, 0), Err(Error::RateOverflow)));
    }

    #[test]
    fn mtf_keeps_invariants(clean in arb_clean(6..7), (m, n) in arb_rates(), seed in any::<u64>(), rounds in 1usize..4) {
        let v = vocab();
        let layout = BlockLayout::new(0, 3, 2).unwrap();
        let pair = corrupt(&v, &clean, m, n, seed).unwrap();
        let model = HashOracle::new(v.size(), seed ^ 0x5a);
        let out = mtf_augment(&model, &v, &layout, &pair, rounds, seed).unwrap();
        prop_assert!(out.check_invariants(v.mask_id()).is_ok());
        prop_assert_eq!(out.restore(), clean.clone());
        // MTF only ever shrinks the masked set, and only touches masked positions
        prop_assert!(out.m2t_positions.iter().all(|i| pair.m2t_positions.contains(i)));
        for i in 0..clean.len() {
            if !pair.m2t_positions.contains(&i) {
                prop_assert_eq!(out.corrupted[i], pair.corrupted[i]);
            }
        }
        prop_assert_eq!(mtf_augment(&model, &v, &layout, &pair, rounds, seed).unwrap(), out);
    }
}

#[test]
fn mtf_identity_pair_is_untouched() {
    let v = vocab();
    let layout = BlockLayout::new(0, 3, 2).unwrap();
    let pair = CorruptedPair::identity(vec![1, 2, 3, 4, 5, 6]);
    let out = mtf_augment(&HashOracle::new(v.size(), 0), &v, &layout, &pair, 3, 0).unwrap();
    assert_eq!(out, pair);
}
