use draftedit::decode::{Sentinels, ThresholdConfig};
use draftedit::ebpo::{
    block_log_likelihoods, block_log_likelihoods_naive, clipped_surrogate, collect_rollouts, ebpo_update,
    estimate_log_ratio, group_advantage, ClipConfig, RolloutConfig, RolloutGroup, RolloutRecord, TimestepGrid,
};
use draftedit::harness::tasks::digit_reward;
use draftedit::harness::TaskKind;
use draftedit::layout::encode_prompt;
use draftedit::model::{NetConfig, ToyNet};
use draftedit::{build_vocab, BlockLayout, Error, TokenId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 7;
const MASK: TokenId = 4;

fn net(prompt_len: usize, bs: usize, nb: usize, seed: u64) -> ToyNet {
    let cfg = NetConfig {
        vocab_size: V,
        width: 8,
        heads: 2,
        ffn_width: 16,
        layers: 2,
        prompt_len,
        block_size: bs,
        max_blocks: nb,
    };
    ToyNet::init(cfg, seed).unwrap()
}

fn perturbed(base: &ToyNet, seed: u64, scale: f64) -> ToyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = base.clone();
    n.params.iter_mut().for_each(|p| *p += scale * (rng.gen::<f64>() - 0.5));
    n
}

/// Random completion over regular tokens and a grid with 1..=4 random levels.
fn instance(seed: u64, bs: usize, nb: usize) -> (Vec<TokenId>, Vec<TokenId>, TimestepGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt: Vec<TokenId> = (0..2).map(|_| rng.gen_range(0..4)).collect();
    let completion: Vec<TokenId> = (0..bs * nb).map(|_| rng.gen_range(0..4)).collect();
    let n = rng.gen_range(1..=4);
    let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..=1.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
    let grid = TimestepGrid::materialize(&completion, MASK, &t, &w, rng.gen()).unwrap();
    (prompt, completion, grid)
}

#[test]
fn advantage_examples() {
    let a = group_advantage(&[1.0, 0.0]).unwrap();
    assert!((a[0] - 1.0).abs() < 1e-7 && (a[1] + 1.0).abs() < 1e-7);
    assert_eq!(group_advantage(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
    // mean 2, population std sqrt(2/3)
    let s = (2.0f64 / 3.0).sqrt();
    let a = group_advantage(&[3.0, 1.0, 2.0]).unwrap();
    for (got, want) in a.iter().zip([1.0 / s, -1.0 / s, 0.0]) {
        assert!((got - want).abs() < 1e-7, "{got} vs {want}");
    }
    assert!(matches!(group_advantage(&[1.0]), Err(Error::DegenerateGroup)));
}

#[test]
fn grid_masks_exact_counts() {
    let completion = vec![0, 1, 2, 3, 0, 1, 2];
    let grid = TimestepGrid::materialize(&completion, MASK, &[0.1, 0.5, 1.0], &[1.0; 3], 5).unwrap();
    let counts: Vec<usize> = grid.corrupted.iter().map(|c| c.iter().filter(|&&t| t == MASK).count()).collect();
    assert_eq!(counts, vec![1, 4, 7]);
    assert_eq!(grid, TimestepGrid::materialize(&completion, MASK, &[0.1, 0.5, 1.0], &[1.0; 3], 5).unwrap());
}

#[test]
fn ratio_identity_is_exactly_zero() {
    for seed in 0..20 {
        let theta = net(2, 3, 2, seed);
        let (p, c, grid) = instance(seed, 3, 2);
        assert_eq!(estimate_log_ratio(&theta, &theta, &p, &c, &grid, MASK).unwrap(), 0.0);
    }
}

#[test]
fn single_term_ratio_matches_two_forwards() {
    let theta_old = net(2, 3, 1, 1);
    let theta = perturbed(&theta_old, 2, 0.5);
    let prompt = vec![0, 1];
    let completion = vec![2, 3, 1];
    let mut grid = TimestepGrid::materialize(&completion, MASK, &[0.3], &[1.0], 0).unwrap();
    grid.corrupted = vec![vec![2, MASK, 1]];
    let got = estimate_log_ratio(&theta, &theta_old, &prompt, &completion, &grid, MASK).unwrap();
    let seq = vec![0, 1, 2, MASK, 1];
    let lp = |n: &ToyNet| n.forward(&seq, &[3]).unwrap().row(3).unwrap().probs[3].ln();
    let want = lp(&theta) - lp(&theta_old);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(want != 0.0);
}

#[test]
fn two_levels_two_blocks_match_four_separate_passes() {
    let theta = net(2, 2, 2, 3);
    let prompt = vec![3, 0];
    let completion = vec![1, 2, 0, 3];
    let mut grid = TimestepGrid::materialize(&completion, MASK, &[0.5, 1.0], &[0.25, 0.75], 0).unwrap();
    grid.corrupted = vec![vec![MASK, 2, 0, MASK], vec![MASK; 4]];
    let terms = block_log_likelihoods(&theta, &prompt, &completion, &grid, MASK).unwrap();
    let lp = |seq: Vec<TokenId>, positions: &[usize]| -> f64 {
        let g = theta.forward(&seq, positions).unwrap();
        positions.iter().map(|&i| g.row(i).unwrap().probs[completion[i - 2] as usize].ln()).sum()
    };
    let want = [
        [lp(vec![3, 0, MASK, 2, MASK, MASK], &[2]), lp(vec![3, 0, 1, 2, 0, MASK], &[5])],
        [lp(vec![3, 0, MASK, MASK, MASK, MASK], &[2, 3]), lp(vec![3, 0, 1, 2, MASK, MASK], &[4, 5])],
    ];
    for n in 0..2 {
        for b in 0..2 {
            assert!((terms[n][b] - want[n][b]).abs() < 1e-8, "({n},{b}) {} vs {}", terms[n][b], want[n][b]);
        }
    }
}

#[test]
fn surrogate_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let rho: f64 = rng.gen_range(0.0..3.0);
        let a: f64 = rng.gen_range(-2.0..2.0);
        let (el, eh) = (rng.gen_range(0.01..0.9), rng.gen_range(0.01..0.9));
        let (s, _) = clipped_surrogate(rho, a, el, eh);
        assert!(s <= ((1.0 + eh) * a).max((1.0 - el) * a) + 1e-12);
        if (1.0 - el..=1.0 + eh).contains(&rho) {
            assert_eq!(s, rho * a);
        }
    }
}

fn record(theta: &ToyNet, seed: u64, advantage: f64) -> RolloutRecord {
    let (prompt, completion, grid) = instance(seed, 3, 2);
    let old_terms = block_log_likelihoods(theta, &prompt, &completion, &grid, MASK).unwrap();
    RolloutRecord {
        prompt,
        completion,
        reward: advantage,
        advantage,
        old_terms,
        grid,
    }
}

fn one_group(records: Vec<RolloutRecord>) -> Vec<RolloutGroup> {
    vec![RolloutGroup {
        prompt: records[0].prompt.clone(),
        records,
    }]
}

#[test]
fn zero_advantages_leave_parameters_unchanged() {
    let mut theta = net(2, 3, 2, 4);
    let before = theta.clone();
    let groups = one_group((0..4).map(|s| record(&before, s, 0.0)).collect());
    let stats = ebpo_update(&mut theta, &groups, &ClipConfig::default(), MASK).unwrap();
    assert_eq!(stats.objective, 0.0);
    assert_eq!(theta, before);
}

#[test]
fn first_step_objective_is_mean_advantage() {
    let mut theta = net(2, 3, 2, 5);
    let before = theta.clone();
    let advs = [0.5, -1.0, 2.0];
    let groups = one_group(advs.iter().enumerate().map(|(s, &a)| record(&before, s as u64, a)).collect());
    let stats = ebpo_update(&mut theta, &groups, &ClipConfig::default(), MASK).unwrap();
    assert!((stats.objective - 0.5).abs() < 1e-12);
    assert_eq!(stats.clip_fraction, 0.0);
}

#[test]
fn positive_advantage_step_raises_the_log_ratio() {
    for seed in 0..10 {
        let theta_old = net(2, 3, 2, seed);
        let r = record(&theta_old, seed + 100, 1.0);
        let mut theta = theta_old.clone();
        let clip = ClipConfig {
            lr: 1e-3,
            ..ClipConfig::default()
        };
        ebpo_update(&mut theta, &one_group(vec![r.clone()]), &clip, MASK).unwrap();
        let after = estimate_log_ratio(&theta, &theta_old, &r.prompt, &r.completion, &r.grid, MASK).unwrap();
        assert!(after > 0.0, "seed {seed}: {after}");

        // the step direction has positive inner product with the log-ratio gradient
        let (_, g) = draftedit::ebpo::ratio::block_log_likelihoods_with_grad(
            &theta_old,
            &r.prompt,
            &r.completion,
            &r.grid,
            MASK,
            &r.grid.weights,
        )
        .unwrap();
        let step: f64 = theta.params.iter().zip(&theta_old.params).zip(&g).map(|((a, b), g)| (a - b) * g).sum();
        assert!(step > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composite_matches_per_block_reference(seed in any::<u64>(), bs in 1usize..4, nb in 1usize..4) {
        let theta = net(2, bs, nb, seed);
        let (p, c, grid) = instance(seed ^ 7, bs, nb);
        let fast = block_log_likelihoods(&theta, &p, &c, &grid, MASK).unwrap();
        let slow = block_log_likelihoods_naive(&theta, &p, &c, &grid, MASK).unwrap();
        for (a, b) in fast.iter().flatten().zip(slow.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }
    }
}

fn copy_setup() -> (draftedit::Vocabulary, BlockLayout, Vec<Vec<TokenId>>, ToyNet) {
    let vocab = build_vocab("0123456789").unwrap();
    let layout = BlockLayout::new(3, 2, 2).unwrap();
    let prompts = ["123", "450", "987", "001"]
        .iter()
        .map(|p| encode_prompt(&vocab, &layout, p).unwrap())
        .collect();
    let cfg = NetConfig {
        vocab_size: vocab.size(),
        width: 8,
        heads: 2,
        ffn_width: 16,
        layers: 1,
        prompt_len: 3,
        block_size: 2,
        max_blocks: 2,
    };
    (vocab, layout, prompts, ToyNet::init(cfg, 11).unwrap())
}

#[test]
fn argmax_rollouts_have_zero_advantage() {
    let (vocab, layout, prompts, policy) = copy_setup();
    let rollout = RolloutConfig {
        temperature: 0.0,
        ..RolloutConfig::default()
    };
    let reward = |p: &[TokenId], c: &[TokenId]| digit_reward(TaskKind::Copy, &vocab, &layout, p, c);
    let groups = collect_rollouts(&policy, Sentinels::from(&vocab), layout, &prompts, &ThresholdConfig::speedy(2), &rollout, &reward, 3).unwrap();
    assert_eq!(groups.len(), 4);
    for g in &groups {
        assert!(g.records.iter().all(|r| r.completion == g.records[0].completion && r.advantage == 0.0));
    }
}

#[test]
fn copy_rewards_match_a_string_check() {
    let (vocab, layout, prompts, policy) = copy_setup();
    let reward = |p: &[TokenId], c: &[TokenId]| digit_reward(TaskKind::Copy, &vocab, &layout, p, c);
    let sentinels = Sentinels::from(&vocab);
    let run = |seed| {
        collect_rollouts(&policy, sentinels, layout, &prompts, &ThresholdConfig::speedy(2), &RolloutConfig::default(), &reward, seed).unwrap()
    };
    let groups = run(21);
    assert_eq!(groups, run(21));
    for r in groups.iter().flat_map(|g| &g.records) {
        // the answer plus its terminator, compared symbol by symbol
        let want: Vec<String> = vocab.render(&r.prompt).chars().map(String::from).chain(["[EOS]".into()]).collect();
        let got: Vec<&str> = r.completion.iter().map(|&t| vocab.symbol(t).unwrap()).collect();
        let hits = want.iter().zip(&got).filter(|(a, b)| a.as_str() == **b).count();
        assert_eq!(r.reward, hits as f64 / want.len() as f64);
        assert!(r.old_terms.iter().flatten().all(|t| t.is_finite()));
    }

    // constant rewards: every group has zero variance and the update is a no-op
    let flat = |_: &[TokenId], _: &[TokenId]| Ok(0.5);
    let groups = collect_rollouts(&policy, sentinels, layout, &prompts, &ThresholdConfig::speedy(2), &RolloutConfig::default(), &flat, 1).unwrap();
    let mut theta = policy.clone();
    ebpo_update(&mut theta, &groups, &ClipConfig::default(), sentinels.mask).unwrap();
    assert_eq!(theta, policy);
}

#[test]
fn failed_rewards_drop_records_and_groups() {
    let (vocab, layout, prompts, policy) = copy_setup();
    let picky = |p: &[TokenId], _: &[TokenId]| if p[0] == 1 { Ok(1.0) } else { Err("no".to_string()) };
    let groups = collect_rollouts(&policy, Sentinels::from(&vocab), layout, &prompts, &ThresholdConfig::speedy(2), &RolloutConfig::default(), &picky, 0).unwrap();
    assert_eq!(groups.len(), 1);
    let degenerate = RolloutConfig {
        group_size: 1,
        ..RolloutConfig::default()
    };
    assert!(matches!(
        collect_rollouts(&policy, Sentinels::from(&vocab), layout, &prompts, &ThresholdConfig::speedy(2), &degenerate, &picky, 0),
        Err(Error::DegenerateGroup)
    ));
}
