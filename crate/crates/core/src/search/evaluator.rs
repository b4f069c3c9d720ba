//! Candidate scorers for the search harness.

use crate::error::{MptError, Result};
use crate::model::{ConnectionSpec, Permutation, Regime};
use crate::workbench::{evaluate, train_experiment, ExperimentConfig};

/// Scores a permutation; higher is better. Must be deterministic given
/// `(perm, seed)`.
pub trait Evaluator: Sync {
    fn evaluate(&self, perm: &Permutation, seed: u64) -> Result<f64>;
}

impl<F> Evaluator for F
where
    F: Fn(&Permutation, u64) -> Result<f64> + Sync,
{
    fn evaluate(&self, perm: &Permutation, seed: u64) -> Result<f64> {
        self(perm, seed)
    }
}

/// Minus the Hamming distance to a hidden target permutation.
#[derive(Clone, Debug)]
pub struct HammingSurrogate {
    pub target: Permutation,
}

impl Evaluator for HammingSurrogate {
    fn evaluate(&self, perm: &Permutation, _seed: u64) -> Result<f64> {
        if perm.len() != self.target.len() {
            return Err(MptError::Contract(format!(
                "candidate {perm} and target differ in length"
            )));
        }
        Ok(0.0 - perm.hamming(&self.target) as f64)
    }
}

/// Trains a small model with the candidate hard connection and returns
/// held-out token accuracy under final-pass greedy decoding.
#[derive(Clone, Debug)]
pub struct ToyTaskEvaluator {
    pub base: ExperimentConfig,
}

impl ToyTaskEvaluator {
    pub fn new(base: ExperimentConfig) -> Self {
        ToyTaskEvaluator { base }
    }
}

impl Evaluator for ToyTaskEvaluator {
    fn evaluate(&self, perm: &Permutation, seed: u64) -> Result<f64> {
        let mut cfg = self.base.clone();
        cfg.model.connection = ConnectionSpec::Hard { perm: perm.clone() };
        cfg.model.passes = cfg.model.passes.max(2);
        cfg.train.seed = seed;
        cfg.decode.beam = 1;
        let (model, _) = train_experiment(&cfg, None, |_, _| Ok(true))?;
        let held = cfg.task.held_out_set();
        Ok(evaluate(&model, &held, Regime::FinalPass, &cfg.decode)?.token_acc)
    }
}
