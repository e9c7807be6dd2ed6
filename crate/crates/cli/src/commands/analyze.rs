//! `kvnorm analyze`: ALr heatmaps, norm/attention dumps and key-dimension
//! probes, emitted as plot-ready CSV or JSON.

use std::path::PathBuf;

use kvnorm_core::analysis::{alr_heatmap, dim_zero_probe, norm_attention_dump, AlrOptions, ProbeMode, ProbeOptions};
use kvnorm_core::rng::derive_seed;
use kvnorm_core::workloads::{corpus_chunks, gen_passkey};
use kvnorm_core::Model;
use serde::{Deserialize, Serialize};

use super::{configure_threads, load_model, read_corpus};
use crate::args::{AnalyzeArgs, AnalyzeMode, ProbeModeArg};
use crate::error::{CliError, CliResult};
use crate::manifest::{load_config, sha256_hex, RunManifest};
use crate::output::{read_file, OutputDir};

pub const ALR_CSV: &str = "alr_heatmap.csv";
pub const ALR_CHUNKS_CSV: &str = "alr_per_chunk.csv";
pub const ALR_CURVES_CSV: &str = "alr_curves.csv";
pub const DUMP_CSV: &str = "dump.csv";
pub const PROBE_JSON: &str = "probe.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub mode: AnalyzeMode,
    /// Text corpus; seeded passkey prompts stand in when absent.
    pub corpus: Option<PathBuf>,
    pub chunk_len: usize,
    pub num_chunks: usize,
    pub query_steps: usize,
    pub key_len: usize,
    pub layer: usize,
    pub head: usize,
    pub k_dims: usize,
    pub probe_mode: ProbeModeArg,
    pub probe_steps: usize,
    pub target: Option<usize>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            model: None,
            seed: 0,
            mode: AnalyzeMode::Alr,
            corpus: None,
            chunk_len: 128,
            num_chunks: 16,
            query_steps: 1,
            key_len: 5,
            layer: 0,
            head: 0,
            k_dims: 2,
            probe_mode: ProbeModeArg::Both,
            probe_steps: 8,
            target: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct ProbeSummary {
    mode: ProbeMode,
    layer: usize,
    head: usize,
    target_position: usize,
    k_dims: usize,
    zeroed_dims: Vec<usize>,
    attention_delta: f64,
}

impl AnalyzeConfig {
    fn apply(&mut self, a: &AnalyzeArgs) {
        if let Some(m) = &a.common.model {
            self.model = Some(m.clone());
        }
        if let Some(s) = a.common.seed {
            self.seed = s;
        }
        if let Some(c) = &a.corpus {
            self.corpus = Some(c.clone());
        }
        if a.target.is_some() {
            self.target = a.target;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = a.$field { self.$field = v; })*
            };
        }
        set!(mode, chunk_len, num_chunks, query_steps, layer, head, k_dims, probe_mode, probe_steps);
    }

    fn chunks(&self) -> CliResult<Vec<Vec<u32>>> {
        if self.num_chunks == 0 {
            return Err(CliError::Usage("num_chunks must be positive".into()));
        }
        let chunks: Vec<Vec<u32>> = match &self.corpus {
            Some(path) => corpus_chunks(&read_corpus(path)?, self.chunk_len)
                .into_iter()
                .take(self.num_chunks)
                .collect(),
            None => (0..self.num_chunks)
                .map(|i| {
                    let depth = (i % 5) as f64 / 4.0;
                    Ok(gen_passkey(derive_seed(self.seed, &[i as u64]), self.chunk_len, depth, self.key_len)?.tokens)
                })
                .collect::<CliResult<_>>()?,
        };
        if chunks.is_empty() {
            return Err(CliError::Usage("corpus is shorter than one chunk".into()));
        }
        Ok(chunks)
    }

    fn corpus_id(&self) -> CliResult<String> {
        Ok(match &self.corpus {
            Some(p) => format!("sha256:{}", sha256_hex(&read_file(p)?)),
            None => format!("passkey:seed={}", self.seed),
        })
    }
}

pub fn run(args: AnalyzeArgs) -> CliResult<()> {
    configure_threads(&args.common)?;
    let mut cfg: AnalyzeConfig = load_config(args.common.config.as_deref(), "analyze")?;
    cfg.apply(&args);
    let model = load_model(cfg.model.as_deref())?;
    let chunks = cfg.chunks()?;

    let out = OutputDir::create(&args.common.out)?;
    let outputs: &[&str] = match cfg.mode {
        AnalyzeMode::Alr => &[ALR_CSV, ALR_CHUNKS_CSV, ALR_CURVES_CSV],
        AnalyzeMode::Dump => &[DUMP_CSV],
        AnalyzeMode::Probe => &[PROBE_JSON],
    };
    let mut manifest = RunManifest::new("analyze", &cfg)?
        .seed("seed", cfg.seed)
        .input(cfg.model.as_deref().expect("model was loaded"))?;
    if let Some(c) = &cfg.corpus {
        manifest = manifest.input(c)?;
    }
    manifest.outputs(outputs).write(&out)?;

    match cfg.mode {
        AnalyzeMode::Alr => write_alr(&out, &model, &chunks, &cfg),
        AnalyzeMode::Dump => write_dump(&out, &model, &chunks[0]),
        AnalyzeMode::Probe => write_probe(&out, &model, &chunks[0], &cfg),
    }
}

fn write_alr(out: &OutputDir, model: &Model, chunks: &[Vec<u32>], cfg: &AnalyzeConfig) -> CliResult<()> {
    let options = AlrOptions {
        chunk_len: cfg.chunk_len,
        query_steps: cfg.query_steps,
        corpus_id: cfg.corpus_id()?,
    };
    let report = alr_heatmap(model, chunks, &options)?;
    let heat: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| vec![c.layer.to_string(), c.head.to_string(), c.alr.to_string(), report.num_chunks.to_string()])
        .collect();
    out.write_csv(ALR_CSV, &["layer", "head", "alr", "num_chunks"], &heat)?;

    let per_chunk: Vec<Vec<String>> = report
        .cells
        .iter()
        .flat_map(|c| {
            c.per_chunk
                .iter()
                .enumerate()
                .map(move |(i, v)| vec![c.layer.to_string(), c.head.to_string(), i.to_string(), v.to_string()])
        })
        .collect();
    out.write_csv(ALR_CHUNKS_CSV, &["layer", "head", "chunk", "alr"], &per_chunk)?;

    let curves: Vec<Vec<String>> = report
        .cells
        .iter()
        .flat_map(|c| {
            c.curve
                .iter()
                .enumerate()
                .map(move |(i, y)| vec![c.layer.to_string(), c.head.to_string(), (i + 1).to_string(), y.to_string()])
        })
        .collect();
    out.write_csv(ALR_CURVES_CSV, &["layer", "head", "m", "excess_loss"], &curves)
}

fn write_dump(out: &OutputDir, model: &Model, tokens: &[u32]) -> CliResult<()> {
    let rows: Vec<Vec<String>> = norm_attention_dump(model, tokens)?
        .into_iter()
        .map(|r| {
            vec![
                r.layer.to_string(),
                r.head.to_string(),
                r.position.to_string(),
                r.token_id.to_string(),
                r.attention_score.to_string(),
                r.key_norm.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        DUMP_CSV,
        &["layer", "head", "position", "token_id", "attention_score", "key_norm"],
        &rows,
    )
}

fn write_probe(out: &OutputDir, model: &Model, tokens: &[u32], cfg: &AnalyzeConfig) -> CliResult<()> {
    let modes: &[ProbeMode] = match cfg.probe_mode {
        ProbeModeArg::Peak => &[ProbeMode::PeakDims],
        ProbeModeArg::Random => &[ProbeMode::RandomDims],
        ProbeModeArg::Both => &[ProbeMode::PeakDims, ProbeMode::RandomDims],
    };
    let summaries = modes
        .iter()
        .map(|&mode| {
            let r = dim_zero_probe(
                model,
                tokens,
                &ProbeOptions {
                    layer: cfg.layer,
                    head: cfg.head,
                    k_dims: cfg.k_dims,
                    mode,
                    seed: cfg.seed,
                    probe_steps: cfg.probe_steps,
                    target: cfg.target,
                },
            )?;
            Ok(ProbeSummary {
                mode: r.mode,
                layer: r.layer,
                head: r.head,
                target_position: r.target_position,
                k_dims: r.k_dims,
                zeroed_dims: r.zeroed_dims,
                attention_delta: r.attention_delta,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    out.write_json(PROBE_JSON, &summaries)
}
