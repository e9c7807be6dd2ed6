//! `kvnorm sweep`: the policy × ratio × depth × skip-set grid.
//!
//! Each cell is evaluated exactly as `kvnorm eval` would evaluate it with
//! the same seed, a single depth and that cell's compression settings.
//! Rows are sorted by policy name, ratio, depth and skip set.

use std::collections::BTreeSet;
use std::path::PathBuf;

use kvnorm_core::{Budget, CompressionConfig, Policy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, task_name};
use super::{configure_threads, finish_compression, load_model, DataConfig};
use crate::args::{parse_f64_list, parse_layer_sets, parse_policy_list, SweepArgs, TaskArg};
use crate::error::{CliError, CliResult};
use crate::manifest::{load_config, RunManifest};
use crate::output::{join, opt_cell, OutputDir};

pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    /// Settings shared by every cell; policy, budget and skip set are
    /// replaced per cell.
    pub compression: CompressionConfig,
    pub data: DataConfig,
    pub policies: Vec<Policy>,
    pub ratios: Vec<f64>,
    /// Empty means the base config's skip set.
    pub skip_layer_sets: Vec<BTreeSet<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            compression: CompressionConfig::default(),
            data: DataConfig::default(),
            policies: vec![
                Policy::KeepLowL2,
                Policy::KeepHighL2,
                Policy::Random,
                Policy::OracleAttention,
            ],
            ratios: (0..10).map(|i| i as f64 / 10.0).collect(),
            skip_layer_sets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub policy: Policy,
    pub ratio: f64,
    /// `None` for the language-model task.
    pub depth: Option<f64>,
    pub skip_layers: BTreeSet<usize>,
}

impl Cell {
    pub fn compression(&self, base: &CompressionConfig) -> CompressionConfig {
        CompressionConfig {
            policy: self.policy,
            budget: (self.policy != Policy::None).then_some(Budget::Ratio(self.ratio)),
            skip_layers: self.skip_layers.clone(),
            ..base.clone()
        }
    }
}

/// The grid in output order.
pub fn cells(cfg: &SweepConfig) -> Vec<Cell> {
    let depths: Vec<Option<f64>> = match cfg.data.task {
        TaskArg::Lm => vec![None],
        _ => cfg.data.depths.iter().copied().map(Some).collect(),
    };
    let skip_sets = if cfg.skip_layer_sets.is_empty() {
        vec![cfg.compression.skip_layers.clone()]
    } else {
        cfg.skip_layer_sets.clone()
    };
    let mut cells = Vec::new();
    for &policy in &cfg.policies {
        for &ratio in &cfg.ratios {
            for &depth in &depths {
                for skip in &skip_sets {
                    cells.push(Cell {
                        policy,
                        ratio,
                        depth,
                        skip_layers: skip.clone(),
                    });
                }
            }
        }
    }
    cells.sort_by(|a, b| {
        a.policy
            .cli_name()
            .cmp(b.policy.cli_name())
            .then(a.ratio.total_cmp(&b.ratio))
            .then(a.depth.unwrap_or(0.0).total_cmp(&b.depth.unwrap_or(0.0)))
            .then(a.skip_layers.cmp(&b.skip_layers))
    });
    cells
}

pub fn run(args: SweepArgs) -> CliResult<()> {
    configure_threads(&args.common)?;
    let mut cfg: SweepConfig = load_config(args.common.config.as_deref(), "sweep")?;
    if let Some(m) = &args.common.model {
        cfg.model = Some(m.clone());
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    args.compression.apply(&mut cfg.compression);
    cfg.data.apply(&args.data, args.depths.as_deref())?;
    if let Some(p) = &args.policies {
        cfg.policies = parse_policy_list(p).map_err(CliError::Usage)?;
    }
    if let Some(r) = &args.ratios {
        cfg.ratios = parse_f64_list(r).map_err(CliError::Usage)?;
    }
    if let Some(s) = &args.skip_layer_sets {
        cfg.skip_layer_sets = parse_layer_sets(s).map_err(CliError::Usage)?;
    }
    // Budget and policy are set per cell.
    cfg.compression.budget = None;
    cfg.compression.policy = Policy::None;
    cfg.compression = finish_compression(cfg.compression, cfg.seed);

    if cfg.policies.is_empty() || cfg.ratios.is_empty() || (cfg.data.task != TaskArg::Lm && cfg.data.depths.is_empty()) {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let cells = cells(&cfg);
    for c in &cells {
        c.compression(&cfg.compression).validate()?;
    }

    let model = load_model(cfg.model.as_deref())?;
    let out = OutputDir::create(&args.common.out)?;
    let mut manifest = RunManifest::new("sweep", &cfg)?
        .seed("seed", cfg.seed)
        .input(cfg.model.as_deref().expect("model was loaded"))?;
    if cfg.data.task == TaskArg::Lm {
        if let Some(c) = &cfg.data.corpus {
            manifest = manifest.input(c)?;
        }
    }
    manifest.outputs(&[SWEEP_CSV]).write(&out)?;

    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|cell| {
            let depths: Vec<f64> = cell.depth.into_iter().collect();
            let r = evaluate(&model, &cfg.data, cfg.seed, &depths, &cell.compression(&cfg.compression))?;
            Ok(vec![
                task_name(cfg.data.task).to_string(),
                cell.policy.cli_name().to_string(),
                cell.ratio.to_string(),
                opt_cell(cell.depth),
                join(&cell.skip_layers, ";"),
                r.accuracy.to_string(),
                opt_cell(r.perplexity),
                opt_cell(r.next_token_accuracy),
                r.num_samples.to_string(),
                cfg.seed.to_string(),
            ])
        })
        .collect::<CliResult<_>>()?;
    out.write_csv(
        SWEEP_CSV,
        &[
            "task",
            "policy",
            "ratio",
            "depth",
            "skip_layers",
            "accuracy",
            "perplexity",
            "next_token_accuracy",
            "num_samples",
            "seed",
        ],
        &rows,
    )
}
