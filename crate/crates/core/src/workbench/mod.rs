//! Toy tasks, decoding, metrics, experiment configuration, ablations and the CLI.

pub mod ablation;
pub mod cli;
pub mod data;
pub mod decode;
pub mod metrics;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, standard_variants, write_ablation_csv, AblationRow, AblationVariant};
pub use data::{Example, TaskKind, ToyTask};
pub use decode::{beam_search, decode_all, greedy_decode, DecodeConfig, Hypothesis, StepScorer};
pub use metrics::{corpus_bleu, token_and_sequence_accuracy};

use crate::error::{MptError, Result};
use crate::model::{ConnectionSpec, Mpt, MptConfig, Regime, RoutingPattern};
use crate::training::{train_loop, RunPaths, StepReport, TrainConfig, TrainOutcome, TrainState};

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_out_dir() }
    }
}

/// Everything needed to train and evaluate one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: MptConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub task: ToyTask,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses JSON and validates it; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = match path.as_str() {
                "." => missing_field(&inner.to_string()).unwrap_or_else(|| "<root>".into()),
                p => missing_field(&inner.to_string()).map_or_else(|| p.to_string(), |f| format!("{p}.{f}")),
            };
            MptError::schema(field, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MptError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        self.decode.validate()?;
        if self.task.vocab > self.model.vocab {
            return Err(MptError::schema(
                "task.vocab",
                format!("exceeds model.vocab = {}", self.model.vocab),
            ));
        }
        if self.task.max_len + 1 > self.model.max_len {
            return Err(MptError::schema(
                "model.max_len",
                format!("must be at least task.max_len + 1 = {}", self.task.max_len + 1),
            ));
        }
        Ok(())
    }

    /// Small Copy-task experiment used as a default by the CLI.
    pub fn tiny_copy() -> Self {
        let model = MptConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            layers: 3,
            passes: 2,
            vocab: 10,
            max_len: 8,
            dropout: 0.0,
            ..MptConfig::tiny(ConnectionSpec::hard(&[0, 1, 2]).expect("identity"), RoutingPattern::A)
        };
        let mut task = ToyTask::new(TaskKind::Copy, 10, 2, 5);
        task.held_out = 50;
        ExperimentConfig {
            model,
            train: TrainConfig {
                base_lr: 0.005,
                warmup_steps: 20,
                tokens_per_batch: 64,
                max_steps: 40,
                ..TrainConfig::default()
            },
            task,
            decode: DecodeConfig {
                beam: 1,
                ..DecodeConfig::default()
            },
            output: OutputConfig::default(),
        }
    }
}

/// `missing field `x` ...` -> `x`. Unknown fields are already part of the path.
fn missing_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("missing field `")?;
    Some(rest.split('`').next()?.to_string())
}

/// Trains `cfg.model` on `cfg.task`. Artifacts go to `out` when given.
pub fn train_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    on_step: impl FnMut(&Mpt, &StepReport) -> Result<bool>,
) -> Result<(Mpt, TrainOutcome)> {
    cfg.validate()?;
    let mut model = Mpt::new(cfg.model.clone(), cfg.train.seed)?;
    let mut state = TrainState::new(&model, &cfg.train);
    let mut stream = cfg.task.train_stream(cfg.train.tokens_per_batch)?;
    let paths = out.map(RunPaths::new);
    let outcome = train_loop(&mut model, &mut state, &cfg.train, &mut stream, paths.as_ref(), on_step)?;
    Ok((model, outcome))
}

/// Held-out metrics for one decoding regime.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub token_acc: f64,
    pub seq_acc: f64,
    pub bleu: f64,
    pub examples: usize,
    pub truncated: usize,
}

pub fn evaluate(model: &Mpt, examples: &[Example], regime: Regime, decode: &DecodeConfig) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(MptError::Contract("no held-out examples to evaluate".into()));
    }
    let srcs: Vec<Vec<usize>> = examples.iter().map(|e| e.src.clone()).collect();
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.tgt.clone()).collect();
    let hyps = decode_all(model, &srcs, regime, decode)?;
    let truncated = hyps.iter().filter(|h| h.truncated).count();
    let hyps: Vec<Vec<usize>> = hyps.into_iter().map(|h| h.tokens).collect();
    let (token_acc, seq_acc) = token_and_sequence_accuracy(&hyps, &refs);
    Ok(EvalMetrics {
        token_acc,
        seq_acc,
        bleu: corpus_bleu(&hyps, &refs, 4)?,
        examples: examples.len(),
        truncated,
    })
}
