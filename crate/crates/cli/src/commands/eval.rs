//! `kvnorm eval`: one compression setting on one task.

use std::path::PathBuf;

use kvnorm_core::analysis::policy_loss_audit;
use kvnorm_core::kv_cache::EvictionAudit;
use kvnorm_core::model::{argmax, decode_step, prefill_into, DecodeState};
use kvnorm_core::workloads::{eval_lm, eval_retrieval, EvalResult};
use kvnorm_core::{CompressionConfig, Model, Policy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{configure_threads, finish_compression, load_model, DataConfig};
use crate::args::{EvalArgs, TaskArg};
use crate::error::CliResult;
use crate::manifest::{load_config, RunManifest};
use crate::output::{join, opt_cell, OutputDir};

pub const RESULT_JSON: &str = "result.json";
pub const RESULT_CSV: &str = "result.csv";
pub const EVICTION_AUDIT_CSV: &str = "eviction_audit.csv";
pub const LOSS_AUDIT_CSV: &str = "loss_audit.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub compression: CompressionConfig,
    pub data: DataConfig,
    pub audit_log: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            compression: CompressionConfig::default(),
            data: DataConfig::default(),
            audit_log: false,
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    task: TaskArg,
    seed: u64,
    #[serde(flatten)]
    result: &'a EvalResult,
}

pub const RESULT_HEADER: [&str; 9] = [
    "task",
    "policy",
    "ratio",
    "budget",
    "skip_layers",
    "accuracy",
    "perplexity",
    "next_token_accuracy",
    "num_samples",
];

pub fn result_row(task: TaskArg, r: &EvalResult) -> Vec<String> {
    vec![
        task_name(task).to_string(),
        r.policy.cli_name().to_string(),
        opt_cell(r.ratio),
        opt_cell(r.budget),
        join(&r.skip_layers, ";"),
        r.accuracy.to_string(),
        opt_cell(r.perplexity),
        opt_cell(r.next_token_accuracy),
        r.num_samples.to_string(),
    ]
}

pub fn task_name(task: TaskArg) -> &'static str {
    match task {
        TaskArg::Lm => "lm",
        TaskArg::Passkey => "passkey",
        TaskArg::Needle => "needle",
    }
}

/// Evaluates `data` under `compression`; retrieval samples use `depths`.
pub fn evaluate(model: &Model, data: &DataConfig, seed: u64, depths: &[f64], compression: &CompressionConfig) -> CliResult<EvalResult> {
    compression.validate()?;
    Ok(match data.task {
        TaskArg::Lm => eval_lm(model, &data.lm_corpus()?, data.chunk_len, compression)?,
        _ => eval_retrieval(model, &data.retrieval_samples(seed, depths)?, compression)?,
    })
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    configure_threads(&args.common)?;
    let mut cfg: EvalConfig = load_config(args.common.config.as_deref(), "eval")?;
    if let Some(m) = &args.common.model {
        cfg.model = Some(m.clone());
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    args.compression.apply(&mut cfg.compression);
    cfg.data.apply(&args.data, args.depths.as_deref())?;
    cfg.audit_log |= args.audit_log;
    cfg.compression = finish_compression(cfg.compression, cfg.seed);
    cfg.compression.validate()?;

    let model = load_model(cfg.model.as_deref())?;
    let out = OutputDir::create(&args.common.out)?;
    let loss_audited = cfg.audit_log && cfg.compression.policy != Policy::None;
    let mut outputs = vec![RESULT_JSON, RESULT_CSV];
    if cfg.audit_log {
        outputs.push(EVICTION_AUDIT_CSV);
    }
    if loss_audited {
        outputs.push(LOSS_AUDIT_CSV);
    }
    let mut manifest = RunManifest::new("eval", &cfg)?
        .seed("seed", cfg.seed)
        .input(cfg.model.as_deref().expect("model was loaded"))?;
    if cfg.data.task == TaskArg::Lm {
        if let Some(c) = &cfg.data.corpus {
            manifest = manifest.input(c)?;
        }
    }
    manifest.outputs(&outputs).write(&out)?;

    let result = evaluate(&model, &cfg.data, cfg.seed, &cfg.data.depths, &cfg.compression)?;
    out.write_json(
        RESULT_JSON,
        &EvalOutput {
            task: cfg.data.task,
            seed: cfg.seed,
            result: &result,
        },
    )?;
    out.write_csv(RESULT_CSV, &RESULT_HEADER, &[result_row(cfg.data.task, &result)])?;

    if cfg.audit_log {
        let sequences = audit_sequences(&cfg)?;
        write_eviction_audit(&out, &model, &cfg.compression, &sequences)?;
        if loss_audited {
            write_loss_audit(&out, &model, &cfg.compression, &sequences)?;
        }
    }
    Ok(())
}

/// Prompt and number of greedily generated tokens for each audited sample.
fn audit_sequences(cfg: &EvalConfig) -> CliResult<Vec<(Vec<u32>, usize)>> {
    Ok(match cfg.data.task {
        TaskArg::Lm => kvnorm_core::workloads::corpus_chunks(&cfg.data.lm_corpus()?, cfg.data.chunk_len)
            .into_iter()
            .map(|c| (c, 0))
            .collect(),
        _ => cfg
            .data
            .retrieval_samples(cfg.seed, &cfg.data.depths)?
            .into_iter()
            .map(|s| {
                let n = s.passkey_tokens.len();
                (s.tokens, n)
            })
            .collect(),
    })
}

fn audited_run(model: &Model, compression: &CompressionConfig, prompt: &[u32], generate: usize) -> CliResult<Vec<EvictionAudit>> {
    let mut state = DecodeState::new(model, compression.clone())?;
    state.enable_audit();
    prefill_into(model, &mut state, prompt)?;
    let mut logits = state.last_logits().unwrap_or_default().to_vec();
    for _ in 1..generate {
        logits = decode_step(model, &mut state, argmax(&logits))?.0;
    }
    Ok(state.take_audit())
}

fn write_eviction_audit(out: &OutputDir, model: &Model, compression: &CompressionConfig, sequences: &[(Vec<u32>, usize)]) -> CliResult<()> {
    let audits: Vec<Vec<EvictionAudit>> = sequences
        .par_iter()
        .map(|(prompt, n)| audited_run(model, compression, prompt, *n))
        .collect::<CliResult<_>>()?;
    let rows: Vec<Vec<String>> = audits
        .iter()
        .enumerate()
        .flat_map(|(sample, passes)| {
            passes.iter().map(move |a| {
                vec![
                    sample.to_string(),
                    a.step.to_string(),
                    a.layer.to_string(),
                    a.head.to_string(),
                    a.policy.cli_name().to_string(),
                    a.pre_occupancy.to_string(),
                    a.post_occupancy.to_string(),
                    join(&a.evicted_positions, ";"),
                ]
            })
        })
        .collect();
    out.write_csv(
        EVICTION_AUDIT_CSV,
        &[
            "sample",
            "step",
            "layer",
            "head",
            "policy",
            "pre_occupancy",
            "post_occupancy",
            "evicted_positions",
        ],
        &rows,
    )
}

/// The attention each pass loses under the chosen policy next to what the
/// score oracle loses at the same step. An oracle run is compared against
/// the norm and random policies instead.
fn write_loss_audit(out: &OutputDir, model: &Model, compression: &CompressionConfig, sequences: &[(Vec<u32>, usize)]) -> CliResult<()> {
    let oracle = CompressionConfig {
        policy: Policy::OracleAttention,
        ..compression.clone()
    };
    let others = match compression.policy {
        Policy::OracleAttention => vec![Policy::KeepLowL2, Policy::KeepHighL2, Policy::Random],
        p => vec![p],
    };
    if oracle.budget.is_none() && oracle.head_budgets.is_empty() {
        return out.write_csv(LOSS_AUDIT_CSV, &LOSS_HEADER, &Vec::<Vec<String>>::new());
    }
    let audits = sequences
        .par_iter()
        .map(|(prompt, _)| policy_loss_audit(model, prompt, &oracle, &others))
        .collect::<kvnorm_core::Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = audits
        .iter()
        .enumerate()
        .flat_map(|(sample, audit)| {
            audit.rows.iter().map(move |r| {
                vec![
                    sample.to_string(),
                    r.step.to_string(),
                    r.layer.to_string(),
                    r.head.to_string(),
                    r.policy.cli_name().to_string(),
                    r.evicted.to_string(),
                    r.oracle_loss.to_string(),
                    r.policy_loss.to_string(),
                ]
            })
        })
        .collect();
    out.write_csv(LOSS_AUDIT_CSV, &LOSS_HEADER, &rows)
}

const LOSS_HEADER: [&str; 8] = [
    "sample",
    "step",
    "layer",
    "head",
    "policy",
    "evicted",
    "oracle_loss",
    "policy_loss",
];
