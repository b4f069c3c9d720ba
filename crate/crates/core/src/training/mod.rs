//! Optimizer, schedule, training loop, loss traces and checkpoints.

pub mod checkpoint;

#[cfg(test)]
mod tests;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{average_checkpoints, Checkpoint};

use crate::autodiff::{Graph, Var};
use crate::error::{MptError, Result};
use crate::model::{seq2seq_loss, Batch, ForwardCtx, LossMode, ModelVars, Mpt, ParamStore};
use crate::seed;

fn default_base_lr() -> f64 {
    0.0008
}
fn default_warmup() -> usize {
    200
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.98)
}
fn default_adam_eps() -> f64 {
    1e-9
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_tokens_per_batch() -> usize {
    256
}
fn default_max_steps() -> usize {
    1000
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_tokens_per_batch")]
    pub tokens_per_batch: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Batches whose gradients are averaged into one update.
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: default_base_lr(),
            warmup_steps: default_warmup(),
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            label_smoothing: default_smoothing(),
            tokens_per_batch: default_tokens_per_batch(),
            max_steps: default_max_steps(),
            checkpoint_every: 0,
            grad_accum: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, detail: &str| {
            if ok {
                Ok(())
            } else {
                Err(MptError::schema(field, detail))
            }
        };
        check(self.base_lr > 0.0 && self.base_lr.is_finite(), "train.base_lr", "must be positive")?;
        check(self.warmup_steps >= 1, "train.warmup_steps", "must be at least 1")?;
        check(
            (0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1),
            "train.betas",
            "each beta must lie in [0, 1)",
        )?;
        check(self.adam_eps > 0.0, "train.adam_eps", "must be positive")?;
        check(self.weight_decay >= 0.0, "train.weight_decay", "must be non-negative")?;
        check(
            (0.0..1.0).contains(&self.label_smoothing),
            "train.label_smoothing",
            "must lie in [0, 1)",
        )?;
        check(self.tokens_per_batch >= 1, "train.tokens_per_batch", "must be at least 1")?;
        check(self.grad_accum >= 1, "train.grad_accum", "must be at least 1")
    }
}

/// Linear warmup to `base_lr` at `warmup_steps`, then inverse square root decay.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step == 0 {
        return Err(MptError::Contract("learning-rate steps are counted from 1".into()));
    }
    let (s, w) = (step as f64, cfg.warmup_steps as f64);
    Ok(cfg.base_lr * (s / w).min((w / s).sqrt()))
}

/// Mean label-smoothed cross-entropy over the positions whose target is not
/// `pad_id`.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, targets: &[usize], eps: f64, pad_id: usize) -> Result<Var> {
    let targets: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad_id).then_some(t)).collect();
    g.smoothed_cross_entropy(logits, &targets, eps)
}

/// Adam moment estimates, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. `grads` follows store order.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (_, param)) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..param.data.len() {
                let grad = g[j] + cfg.weight_decay * param.data[j];
                m[j] = b1 * m[j] + (1.0 - b1) * grad;
                v[j] = b2 * v[j] + (1.0 - b2) * grad * grad;
                param.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Optimizer state and step counter owned by one training loop.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub adam: Adam,
    pass_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &Mpt, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            adam: Adam::new(&model.params),
            pass_rng: ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[0x7061_7373])),
        }
    }
}

/// Losses reported for one optimizer step, averaged over accumulated batches.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub objective: f64,
    /// Loss from each encoder pass; `None` where the pass was not decoded.
    pub per_pass: Vec<Option<f64>>,
}

/// Forward, backward and one Adam update over `batches` (one per accumulation slot).
pub fn train_step(model: &mut Mpt, batches: &[Batch], state: &mut TrainState, cfg: &TrainConfig) -> Result<StepReport> {
    if batches.is_empty() {
        return Err(MptError::Contract("train_step needs at least one batch".into()));
    }
    let step = state.step + 1;
    let lr = lr_schedule(step, cfg)?;
    let pick = match model.cfg.loss_mode {
        LossMode::RandomPass => state.pass_rng.gen_range(0..model.cfg.passes),
        _ => 0,
    };
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut objective = 0.0;
    let mut per_pass: Vec<Option<f64>> = vec![None; model.cfg.passes];
    let scale = 1.0 / batches.len() as f64;
    for (micro, batch) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &model.params, &model.cfg, true)?;
        let ctx = ForwardCtx::train(model.cfg.dropout, seed::derive(cfg.seed, &[step as u64, micro as u64]));
        let out = seq2seq_loss(
            &mut g,
            &vars,
            &model.cfg,
            batch,
            &ctx,
            cfg.label_smoothing,
            model.cfg.loss_mode,
            pick,
        )?;
        let loss = g.value(out.objective).item();
        if !loss.is_finite() {
            return Err(MptError::Diverged { step, loss });
        }
        objective += scale * loss;
        for (slot, v) in per_pass.iter_mut().zip(&out.per_pass) {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + scale * g.value(*v).item());
            }
        }
        g.backward(out.objective)?;
        let micro_grads = vars.gradients(&g);
        for (acc, name) in grads.iter_mut().zip(&names) {
            for (a, b) in acc.iter_mut().zip(&micro_grads[name]) {
                *a += scale * b;
            }
        }
    }
    state.adam.update(&mut model.params, &grads, lr, cfg);
    state.step = step;
    Ok(StepReport {
        step,
        lr,
        objective,
        per_pass,
    })
}

/// Supplies the batches for each optimizer step.
pub trait BatchSource {
    /// Batches for `step` (1-based), one per gradient-accumulation slot.
    fn batches(&mut self, step: usize, count: usize) -> Result<Vec<Batch>>;
}

/// Writes the loss trace as CSV: `step,lr,objective,loss_pass0,...`.
/// Passes that were not decoded on a step leave their cell empty.
pub struct LossCsv<W: Write> {
    out: W,
}

impl<W: Write> LossCsv<W> {
    pub fn new(mut out: W, passes: usize) -> std::io::Result<Self> {
        let mut header = String::from("step,lr,objective");
        for p in 0..passes {
            header.push_str(&format!(",loss_pass{p}"));
        }
        writeln!(out, "{header}")?;
        Ok(LossCsv { out })
    }

    pub fn record(&mut self, r: &StepReport) -> std::io::Result<()> {
        let mut line = format!("{},{},{}", r.step, r.lr, r.objective);
        for p in &r.per_pass {
            line.push(',');
            if let Some(v) = p {
                line.push_str(&v.to_string());
            }
        }
        writeln!(self.out, "{line}")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("ckpt_{step:07}.mpt"))
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<StepReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `cfg.max_steps` optimizer steps from the current state. When `paths`
/// is given, the loss trace and checkpoints are written there; a checkpoint
/// of the final state is always written, including for zero steps.
/// `on_step` can stop the run early by returning `false`.
pub fn train_loop(
    model: &mut Mpt,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &mut dyn BatchSource,
    paths: Option<&RunPaths>,
    mut on_step: impl FnMut(&Mpt, &StepReport) -> Result<bool>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.cfg.validate()?;
    let mut csv = match paths {
        Some(p) => {
            std::fs::create_dir_all(&p.dir).map_err(|e| MptError::io(&p.dir, e))?;
            let path = p.loss_csv();
            let file = File::create(&path).map_err(|e| MptError::io(&path, e))?;
            Some((LossCsv::new(BufWriter::new(file), model.cfg.passes).map_err(|e| MptError::io(&path, e))?, path))
        }
        None => None,
    };
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    let start = state.step;
    while state.step < start + cfg.max_steps {
        let batches = data.batches(state.step + 1, cfg.grad_accum)?;
        let report = train_step(model, &batches, state, cfg)?;
        if let Some((w, path)) = csv.as_mut() {
            w.record(&report).map_err(|e| MptError::io(path.as_path(), e))?;
        }
        let keep_going = on_step(model, &report)?;
        reports.push(report);
        if let Some(p) = paths {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
                checkpoints.push(save_snapshot(model, cfg, state.step, p)?);
            }
        }
        if !keep_going {
            break;
        }
    }
    if let Some((w, path)) = csv {
        w.into_inner().flush().map_err(|e| MptError::io(&path, e))?;
    }
    if let Some(p) = paths {
        let last = p.checkpoint(state.step);
        if checkpoints.last() != Some(&last) {
            checkpoints.push(save_snapshot(model, cfg, state.step, p)?);
        }
    }
    Ok(TrainOutcome { reports, checkpoints })
}

fn save_snapshot(model: &Mpt, cfg: &TrainConfig, step: usize, paths: &RunPaths) -> Result<PathBuf> {
    let path = paths.checkpoint(step);
    Checkpoint::from_model(model, Some(cfg.clone()), step).save(&path)?;
    Ok(path)
}

/// Per-pass evaluation loss on `batch` with dropout off.
pub fn eval_loss(model: &Mpt, batch: &Batch, cfg: &TrainConfig) -> Result<Vec<f64>> {
    model.eval_losses(batch, cfg.label_smoothing)
}
