mod support;

use kvnorm_core::rng::SplitMix64;
use kvnorm_core::ModelConfig;
use support::reference::{gradient_errors, perturbed_model, RefModel};

fn toy_config() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: 16,
        max_seq_len: 16,
        use_rope: true,
        norm_eps: 1e-5,
    }
}

#[test]
fn reference_logits_agree_with_library_forward() {
    let cfg = ModelConfig { num_layers: 2, ..toy_config() };
    let model = perturbed_model(cfg, 3, 0.3);
    let tokens = [1u32, 5, 9, 2, 15, 0];
    let ours = kvnorm_core::model::forward_logits(&model, &tokens).unwrap();
    let theirs = RefModel::from_model(&model).logits(&tokens);
    for (i, row) in theirs.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert!((ours.get(i, j) as f64 - v).abs() < 1e-4, "({i},{j})");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(99);
    let mut worst = 0.0f64;
    for pair in 0..20u64 {
        let model = perturbed_model(toy_config(), pair, 0.4);
        let len = 3 + rng.below(4);
        let tokens: Vec<u32> = (0..len).map(|_| rng.below(16) as u32).collect();
        let targets: Vec<Option<u32>> = (0..len)
            .map(|i| (i != 0 || pair % 2 == 0).then(|| rng.below(16) as u32))
            .collect();
        for (name, group_err, entry_err) in gradient_errors(&model, &[tokens], &[targets], 1e-3, 1e-3) {
            assert!(group_err < 1e-4, "pair {pair}: {name} relative error {group_err:e}");
            // Individual entries near zero are dominated by f32 rounding in
            // the analytic pass, so they only get a loose sanity bound.
            assert!(entry_err < 1e-2, "pair {pair}: {name} entry error {entry_err:e}");
            worst = worst.max(group_err);
        }
    }
    eprintln!("worst group relative gradient error {worst:e}");
}
