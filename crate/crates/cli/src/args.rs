use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kvnorm_core::{Budget, CompressionConfig, Policy};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "kvnorm", version, about = "Norm-based KV cache compression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a synthetic task and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate one compression setting on a retrieval or language-model task.
    Eval(EvalArgs),
    /// Evaluate the cross product of policies, ratios, depths and skip sets.
    Sweep(SweepArgs),
    /// Attention/norm analyses: ALr heatmaps, raw dumps and dimension probes.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Checkpoint to load.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// JSON config or a previous run's manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, env = "KVNORM_SEED")]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    Lm,
    Passkey,
    Needle,
}

#[derive(Debug, Clone, Args)]
pub struct CompressionArgs {
    /// none, l2-low, l2-high, random, oracle or fastgen.
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<Policy>,

    /// Fraction of seen tokens to discard.
    #[arg(long, conflicts_with = "budget")]
    pub ratio: Option<f64>,

    /// Fixed number of retained entries per head.
    #[arg(long)]
    pub budget: Option<usize>,

    /// Layers exempt from compression, e.g. "0,1" or "none" [default: 0,1].
    #[arg(long, value_parser = parse_layer_set)]
    pub skip_layers: Option<BTreeSet<usize>>,

    /// Newest entries exempt from eviction [default: 1].
    #[arg(long)]
    pub protect_recent: Option<usize>,

    /// Recent window for fastgen when no budget is given.
    #[arg(long)]
    pub local_window: Option<usize>,

    /// Evict after every prompt token (true) or once after the prompt (false).
    #[arg(long)]
    pub evict_during_prefill: Option<bool>,
}

impl CompressionArgs {
    pub fn apply(&self, config: &mut CompressionConfig) {
        if let Some(p) = self.policy {
            config.policy = p;
            if p == Policy::None && self.ratio.is_none() && self.budget.is_none() {
                config.budget = None;
            }
        }
        if let Some(r) = self.ratio {
            config.budget = Some(Budget::Ratio(r));
        }
        if let Some(b) = self.budget {
            config.budget = Some(Budget::Tokens(b));
        }
        if let Some(s) = &self.skip_layers {
            config.skip_layers = s.clone();
        }
        if let Some(p) = self.protect_recent {
            config.protect_recent = p;
        }
        if let Some(w) = self.local_window {
            config.local_window = w;
        }
        if let Some(e) = self.evict_during_prefill {
            config.evict_during_prefill = e;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RetrievalArgs {
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,

    /// Retrieval samples per cell.
    #[arg(long)]
    pub num_samples: Option<usize>,

    /// Retrieval prompt length in tokens.
    #[arg(long)]
    pub total_len: Option<usize>,

    /// Passkey length in digits.
    #[arg(long)]
    pub key_len: Option<usize>,

    /// Text corpus for the language-model task.
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    /// Window length for language-model evaluation.
    #[arg(long)]
    pub chunk_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub key_len: Option<usize>,
    /// Train on answer tokens only.
    #[arg(long)]
    pub answer_only: Option<bool>,
    /// Text corpus for the language-model task.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub chunk_len: Option<usize>,

    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub compression: CompressionArgs,
    #[command(flatten)]
    pub data: RetrievalArgs,

    /// Needle depths cycled across samples, e.g. "0,0.5,1".
    #[arg(long)]
    pub depths: Option<String>,

    /// Also write per-pass eviction and attention-loss audit CSVs.
    #[arg(long)]
    pub audit_log: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub compression: CompressionArgs,
    #[command(flatten)]
    pub data: RetrievalArgs,

    /// Comma-separated policy names.
    #[arg(long)]
    pub policies: Option<String>,

    /// Comma-separated compression ratios.
    #[arg(long)]
    pub ratios: Option<String>,

    /// Comma-separated needle depths.
    #[arg(long)]
    pub depths: Option<String>,

    /// Semicolon-separated skip-layer sets, e.g. "0,1;0;none".
    #[arg(long)]
    pub skip_layer_sets: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeMode {
    Alr,
    Dump,
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeModeArg {
    Peak,
    Random,
    Both,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[arg(long, value_enum)]
    pub mode: Option<AnalyzeMode>,

    /// Text corpus; synthetic passkey prompts are used when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    /// Number of chunks to analyse.
    #[arg(long)]
    pub num_chunks: Option<usize>,
    /// Trailing queries whose attention is averaged per chunk.
    #[arg(long)]
    pub query_steps: Option<usize>,

    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub head: Option<usize>,
    /// Key dimensions to zero.
    #[arg(long)]
    pub k_dims: Option<usize>,
    #[arg(long, value_enum)]
    pub probe_mode: Option<ProbeModeArg>,
    /// Tokens decoded after the perturbation.
    #[arg(long)]
    pub probe_steps: Option<usize>,
    /// Position whose key is zeroed (defaults to the lowest-norm key).
    #[arg(long)]
    pub target: Option<usize>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: kvnorm_core::Error| e.to_string())
}

pub fn parse_policy_list(s: &str) -> Result<Vec<Policy>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_policy(p.trim()))
        .collect()
}

pub fn parse_layer_set(s: &str) -> Result<BTreeSet<usize>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(BTreeSet::new());
    }
    s.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("bad layer {x:?}: {e}")))
        .collect()
}

pub fn parse_layer_sets(s: &str) -> Result<Vec<BTreeSet<usize>>, String> {
    s.split(';').map(parse_layer_set).collect()
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            let v: f64 = x.trim().parse().map_err(|e| format!("bad number {x:?}: {e}"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite number {x:?}"))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_sets() {
        assert_eq!(parse_layer_set("0,1").unwrap(), [0, 1].into_iter().collect());
        assert!(parse_layer_set("none").unwrap().is_empty());
        assert_eq!(parse_layer_sets("0,1;none;2").unwrap().len(), 3);
        assert!(parse_layer_set("a").is_err());
    }

    #[test]
    fn policy_none_clears_inherited_budget() {
        let mut c = CompressionConfig::with_policy(Policy::Random, Some(Budget::Ratio(0.5)));
        let args = CompressionArgs {
            policy: Some(Policy::None),
            ratio: None,
            budget: None,
            skip_layers: None,
            protect_recent: None,
            local_window: None,
            evict_during_prefill: None,
        };
        args.apply(&mut c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
