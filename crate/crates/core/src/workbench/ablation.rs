//! Trains a set of connection/routing variants on one task and tabulates
//! held-out metrics under both decoding regimes.

use std::io::Write;

use rayon::prelude::*;

use super::{evaluate, train_experiment, EvalMetrics, ExperimentConfig};
use crate::error::{MptError, Result};
use crate::model::{count_params, ConnectionSpec, MptConfig, Permutation, Regime, RoutingPattern};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub connection: ConnectionSpec,
    pub routing: RoutingPattern,
}

impl AblationVariant {
    fn passes(&self, base: usize) -> usize {
        match self.connection {
            ConnectionSpec::None => 1,
            _ => base.max(2),
        }
    }

    pub fn apply(&self, base: &MptConfig) -> MptConfig {
        MptConfig {
            passes: self.passes(base.passes),
            connection: self.connection.clone(),
            routing: self.routing,
            ..base.clone()
        }
    }
}

/// The baseline, chained, default hard, best hard and soft variants under
/// routing (a), then the default hard permutation under routings (b)-(d).
/// `best` must have `layers` entries.
pub fn standard_variants(layers: usize, best: &Permutation) -> Result<Vec<AblationVariant>> {
    if best.len() != layers {
        return Err(MptError::Config(format!("best permutation {best} does not have {layers} entries")));
    }
    let identity = Permutation::identity(layers);
    let hard = |perm: &Permutation| ConnectionSpec::Hard { perm: perm.clone() };
    let v = |name: &str, connection, routing| AblationVariant {
        name: name.into(),
        connection,
        routing,
    };
    let mut out = vec![
        v("baseline", ConnectionSpec::None, RoutingPattern::A),
        v("chained", ConnectionSpec::Chained, RoutingPattern::A),
        v("hard-default", hard(&identity), RoutingPattern::A),
        v("hard-best", hard(best), RoutingPattern::A),
        v("soft", ConnectionSpec::soft(), RoutingPattern::A),
    ];
    for r in [RoutingPattern::B, RoutingPattern::C, RoutingPattern::D] {
        out.push(v(&format!("hard-default-{}", r.letter()), hard(&identity), r));
    }
    Ok(out)
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub passes: usize,
    pub params: usize,
    pub steps: usize,
    /// `ok`, or a description of the failure.
    pub status: String,
    pub train_loss: Option<f64>,
    pub first_pass: Option<EvalMetrics>,
    pub final_pass: Option<EvalMetrics>,
}

fn run_one(base: &ExperimentConfig, variant: &AblationVariant) -> AblationRow {
    let cfg = ExperimentConfig {
        model: variant.apply(&base.model),
        ..base.clone()
    };
    let mut row = AblationRow {
        variant: variant.clone(),
        passes: cfg.model.passes,
        params: count_params(&cfg.model),
        steps: 0,
        status: "ok".into(),
        train_loss: None,
        first_pass: None,
        final_pass: None,
    };
    let result = train_experiment(&cfg, None, |_, _| Ok(true)).and_then(|(model, outcome)| {
        row.steps = outcome.reports.len();
        row.train_loss = outcome.reports.last().map(|r| r.objective);
        let held = cfg.task.held_out_set();
        row.first_pass = Some(evaluate(&model, &held, Regime::FirstPass, &cfg.decode)?);
        row.final_pass = Some(evaluate(&model, &held, Regime::FinalPass, &cfg.decode)?);
        Ok(())
    });
    if let Err(e) = result {
        row.status = e.to_string();
        if let MptError::Diverged { step, .. } = e {
            row.steps = step;
        }
    }
    row
}

/// Trains and evaluates every variant from the same seeds. A failing variant
/// yields a row with its status and empty metrics.
pub fn run_ablation(base: &ExperimentConfig, variants: &[AblationVariant], parallel: bool) -> Result<Vec<AblationRow>> {
    base.validate()?;
    Ok(if parallel {
        variants.par_iter().map(|v| run_one(base, v)).collect()
    } else {
        variants.iter().map(|v| run_one(base, v)).collect()
    })
}

pub const ABLATION_COLUMNS: [&str; 14] = [
    "variant",
    "connection",
    "routing",
    "passes",
    "params",
    "steps",
    "status",
    "train_loss",
    "first_token_acc",
    "first_seq_acc",
    "first_bleu",
    "final_token_acc",
    "final_seq_acc",
    "final_bleu",
];

/// Writes the table as CSV after a `# decode: ...` comment line describing
/// the decoding settings and score normalization.
pub fn write_ablation_csv(rows: &[AblationRow], decode: &super::DecodeConfig, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "# decode: {}", decode.describe()).map_err(|e| MptError::Config(format!("writing report: {e}")))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| MptError::Config(format!("writing report: {e}"));
    w.write_record(ABLATION_COLUMNS).map_err(csv_err)?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let metric = |m: &Option<EvalMetrics>, f: fn(&EvalMetrics) -> f64| num(m.as_ref().map(f));
        w.write_record([
            r.variant.name.clone(),
            r.variant.connection.label(),
            r.variant.routing.letter().to_string(),
            r.passes.to_string(),
            r.params.to_string(),
            r.steps.to_string(),
            r.status.clone(),
            num(r.train_loss),
            metric(&r.first_pass, |m| m.token_acc),
            metric(&r.first_pass, |m| m.seq_acc),
            metric(&r.first_pass, |m| m.bleu),
            metric(&r.final_pass, |m| m.token_acc),
            metric(&r.final_pass, |m| m.seq_acc),
            metric(&r.final_pass, |m| m.bleu),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| MptError::Config(format!("writing report: {e}")))?;
    Ok(())
}
