//! `kvnorm train`: fit a model on a synthetic task and checkpoint it.

use std::path::PathBuf;

use kvnorm_core::model::checkpoint;
use kvnorm_core::workloads::{train, TrainConfig, TrainTask};
use kvnorm_core::ModelConfig;
use serde::{Deserialize, Serialize};

use super::{configure_threads, read_corpus};
use crate::args::{TaskArg, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::{load_config, RunManifest};
use crate::output::OutputDir;

pub const CHECKPOINT_FILE: &str = "model.kvsq";
pub const LOSS_CSV: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::reference(),
            train: TrainConfig::default(),
            corpus: None,
        }
    }
}

impl TrainRunConfig {
    fn apply(&mut self, a: &TrainArgs) {
        let t = &mut self.train;
        if let Some(task) = a.task {
            t.task = match task {
                TaskArg::Lm => TrainTask::Lm,
                TaskArg::Passkey => TrainTask::Passkey,
                TaskArg::Needle => TrainTask::Needle,
            };
        }
        if let Some(s) = a.common.seed {
            t.seed = s;
        }
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = a.$flag { $field = v; })*
            };
        }
        set!(
            steps => t.steps,
            batch_size => t.batch_size,
            lr => t.learning_rate,
            warmup_steps => t.warmup_steps,
            grad_clip => t.grad_clip,
            min_len => t.min_len,
            max_len => t.max_len,
            key_len => t.key_len,
            answer_only => t.answer_only,
            chunk_len => t.chunk_len,
            layers => self.model.num_layers,
            heads => self.model.num_heads,
            d_model => self.model.d_model,
            d_ff => self.model.d_ff,
            max_seq_len => self.model.max_seq_len,
        );
        if a.heads.is_some() || a.d_model.is_some() {
            self.model.d_head = self.model.d_model / self.model.num_heads.max(1);
        }
        if let Some(c) = &a.corpus {
            self.corpus = Some(c.clone());
        }
    }
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    configure_threads(&args.common)?;
    if args.common.model.is_some() {
        return Err(CliError::Usage(
            "train writes its checkpoint to --out; --model is not accepted".into(),
        ));
    }
    let mut cfg: TrainRunConfig = load_config(args.common.config.as_deref(), "train")?;
    cfg.apply(&args);
    cfg.model.validate()?;
    cfg.train.validate(&cfg.model)?;
    let corpus = match (cfg.train.task, &cfg.corpus) {
        (TrainTask::Lm, None) => return Err(CliError::Usage("the lm task needs --corpus".into())),
        (TrainTask::Lm, Some(p)) => Some(read_corpus(p)?),
        _ => None,
    };

    let out = OutputDir::create(&args.common.out)?;
    let mut manifest = RunManifest::new("train", &cfg)?.seed("seed", cfg.train.seed);
    if let (TrainTask::Lm, Some(p)) = (cfg.train.task, &cfg.corpus) {
        manifest = manifest.input(p)?;
    }
    manifest.outputs(&[CHECKPOINT_FILE, LOSS_CSV]).write(&out)?;

    let outcome = train(&cfg.model, &cfg.train, corpus.as_deref(), |_, _| {})?;
    let rows: Vec<Vec<String>> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(step, loss)| vec![step.to_string(), loss.to_string()])
        .collect();
    out.write_csv(LOSS_CSV, &["step", "loss"], &rows)?;
    out.write(CHECKPOINT_FILE, &checkpoint::to_bytes(&outcome.model)?)
}
