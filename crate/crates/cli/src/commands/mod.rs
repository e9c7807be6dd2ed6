pub mod analyze;
pub mod eval;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use kvnorm_core::model::checkpoint;
use kvnorm_core::rng::derive_seed;
use kvnorm_core::workloads::{gen_needle, gen_passkey, tokenize, with_token_classes, RetrievalSample};
use kvnorm_core::{CompressionConfig, Model};
use serde::{Deserialize, Serialize};

use crate::args::{parse_f64_list, CommonArgs, RetrievalArgs, TaskArg};
use crate::error::{CliError, CliResult};
use crate::output::read_file;

/// Task data settings shared by `eval` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: TaskArg,
    /// Retrieval samples, or the maximum number of corpus chunks.
    pub num_samples: usize,
    pub total_len: usize,
    pub key_len: usize,
    pub depths: Vec<f64>,
    pub corpus: Option<PathBuf>,
    pub chunk_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskArg::Passkey,
            num_samples: 100,
            total_len: 96,
            key_len: 5,
            depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            corpus: None,
            chunk_len: 128,
        }
    }
}

impl DataConfig {
    pub fn apply(&mut self, args: &RetrievalArgs, depths: Option<&str>) -> CliResult<()> {
        if let Some(t) = args.task {
            self.task = t;
        }
        if let Some(n) = args.num_samples {
            self.num_samples = n;
        }
        if let Some(n) = args.total_len {
            self.total_len = n;
        }
        if let Some(n) = args.key_len {
            self.key_len = n;
        }
        if let Some(c) = &args.corpus {
            self.corpus = Some(c.clone());
        }
        if let Some(n) = args.chunk_len {
            self.chunk_len = n;
        }
        if let Some(d) = depths {
            self.depths = parse_f64_list(d).map_err(CliError::Usage)?;
        }
        Ok(())
    }

    /// Samples `0..num_samples`; sample `i` is seeded by `(seed, i)` and
    /// placed at `depths[i % depths.len()]`.
    pub fn retrieval_samples(&self, seed: u64, depths: &[f64]) -> CliResult<Vec<RetrievalSample>> {
        if depths.is_empty() {
            return Err(CliError::Usage("at least one depth is required".into()));
        }
        if self.num_samples == 0 {
            return Err(CliError::Usage("num_samples must be positive".into()));
        }
        (0..self.num_samples)
            .map(|i| {
                let s = derive_seed(seed, &[i as u64]);
                let depth = depths[i % depths.len()];
                let sample = match self.task {
                    TaskArg::Needle => gen_needle(s, self.total_len, depth)?,
                    _ => gen_passkey(s, self.total_len, depth, self.key_len)?,
                };
                Ok(sample)
            })
            .collect()
    }

    /// Corpus tokens capped at `num_samples` chunks.
    pub fn lm_corpus(&self) -> CliResult<Vec<u32>> {
        let path = self
            .corpus
            .as_deref()
            .ok_or_else(|| CliError::Usage("the lm task needs --corpus".into()))?;
        let mut tokens = read_corpus(path)?;
        tokens.truncate(self.num_samples.saturating_mul(self.chunk_len));
        Ok(tokens)
    }
}

pub fn read_corpus(path: &Path) -> CliResult<Vec<u32>> {
    Ok(tokenize(&read_file(path)?))
}

pub fn load_model(path: Option<&Path>) -> CliResult<Model> {
    let path = path.ok_or_else(|| CliError::Usage("--model is required".into()))?;
    read_file(path)?;
    Ok(checkpoint::load(path)?)
}

pub fn configure_threads(common: &CommonArgs) -> CliResult<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Final touches applied to every resolved compression config.
pub fn finish_compression(mut c: CompressionConfig, seed: u64) -> CompressionConfig {
    c.seed = seed;
    if c.special_token_ids.is_empty() && c.punctuation_token_ids.is_empty() {
        c = with_token_classes(c);
    }
    c
}
