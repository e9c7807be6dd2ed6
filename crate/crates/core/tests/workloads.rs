use kvnorm_core::kv_cache::{Budget, CompressionConfig, Policy};
use kvnorm_core::model::cross_entropy;
use kvnorm_core::workloads::{
    eval_lm, eval_retrieval, gen_needle, gen_passkey, lm_trace, tokenize, train, with_token_classes, TrainConfig,
    VOCAB_SIZE,
};
use kvnorm_core::{Model, ModelConfig};

fn corpus() -> Vec<u32> {
    tokenize(
        "It was the best of times, it was the worst of times, it was the age of wisdom, \
         it was the age of foolishness, it was the epoch of belief, it was the epoch of incredulity."
            .as_bytes(),
    )
}

#[test]
fn lm_budget_that_never_binds_changes_nothing() {
    let mut cfg = ModelConfig::tiny();
    cfg.num_layers = 3;
    let model = Model::init(cfg, 1).unwrap();
    let none = eval_lm(&model, &corpus(), 32, &CompressionConfig::none()).unwrap();
    let loose = CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Tokens(32)));
    let same = eval_lm(&model, &corpus(), 32, &loose).unwrap();
    assert!((none.perplexity.unwrap() - same.perplexity.unwrap()).abs() < 1e-6);
    assert_eq!(none.num_samples, corpus().len() / 32);
    let tight = CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Tokens(4)));
    let differs = eval_lm(&model, &corpus(), 32, &tight).unwrap();
    assert_ne!(none.perplexity, differs.perplexity);
}

#[test]
fn uniform_model_has_vocab_sized_perplexity() {
    let mut model = Model::init(ModelConfig::tiny(), 2).unwrap();
    model.weights.unembedding.fill(0.0);
    let r = eval_lm(&model, &corpus(), 16, &CompressionConfig::none()).unwrap();
    let ppl = r.perplexity.unwrap();
    assert!((ppl / VOCAB_SIZE as f64 - 1.0).abs() < 0.01, "{ppl}");
}

#[test]
fn lm_nll_matches_recomputation_from_logits() {
    let model = Model::init(ModelConfig::tiny(), 3).unwrap();
    let text = corpus();
    let chunk = &text[..24];
    let trace = lm_trace(&model, chunk, &CompressionConfig::none()).unwrap();
    let mut nll = 0.0;
    for (i, (logits, target)) in trace.iter().enumerate() {
        assert_eq!(*target, chunk[i + 1]);
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let z: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
        let direct = -((logits[*target as usize] as f64 - max).exp() / z).ln();
        assert!((direct - cross_entropy(logits, *target)).abs() < 1e-9);
        nll += direct;
    }
    let r = eval_lm(&model, chunk, 24, &CompressionConfig::none()).unwrap();
    assert!((r.perplexity.unwrap() - (nll / 23.0).exp()).abs() < 1e-9);
    assert!(eval_lm(&model, &text[..10], 24, &CompressionConfig::none()).is_err());
}

#[test]
fn ratio_zero_matches_uncompressed_retrieval() {
    let model = Model::init(ModelConfig::tiny(), 4).unwrap();
    let samples: Vec<_> = (0..6).map(|s| gen_passkey(s, 40, s as f64 / 5.0, 3).unwrap()).collect();
    let base = eval_retrieval(&model, &samples, &CompressionConfig::none()).unwrap();
    assert_eq!(base.num_samples, 6);
    for policy in [Policy::KeepLowL2, Policy::KeepHighL2, Policy::Random, Policy::OracleAttention, Policy::FastgenLite] {
        let mut config = with_token_classes(CompressionConfig::with_policy(policy, Some(Budget::Ratio(0.0))));
        config.skip_layers.clear();
        let r = eval_retrieval(&model, &samples, &config).unwrap();
        assert_eq!(r.accuracy, base.accuracy);
        assert_eq!(r.ratio, Some(0.0));
    }
    let needles: Vec<_> = (0..4).map(|s| gen_needle(s, 30, 0.5).unwrap()).collect();
    let r = eval_retrieval(&model, &needles, &CompressionConfig::none()).unwrap();
    assert!((0.0..=1.0).contains(&r.accuracy));
    assert!(eval_retrieval(&model, &[], &CompressionConfig::none()).is_err());
}

#[test]
fn passkey_training_reduces_loss() {
    let model = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 32,
        d_head: 16,
        d_ff: 64,
        ..ModelConfig::tiny()
    };
    let config = TrainConfig {
        steps: 200,
        batch_size: 4,
        min_len: 24,
        max_len: 40,
        key_len: 3,
        learning_rate: 3e-3,
        warmup_steps: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&model, &config, None, |_, _| {}).unwrap();
    assert!(out.losses[199] < out.losses[0], "{} vs {}", out.losses[199], out.losses[0]);
}
