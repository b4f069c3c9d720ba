//! Transformer blocks, the multi-pass encoder and the full seq2seq model.

pub mod config;
pub mod multipass;
pub mod params;
pub mod seq2seq;
pub mod transformer;


use std::collections::BTreeMap;

pub use config::{ConnectionSpec, Inject, LossMode, MptConfig, Permutation, Regime, RoutingPattern, Tap};
pub use multipass::{
    encoder_output_for_decode, harden_logits, multipass_forward, multipass_forward_with, soft_hard_difference,
    soft_weights, PassFeatures, PassTrace,
};
pub use params::{count_params, init_params, ModelVars, ParamStore};
pub use seq2seq::{encode, seq2seq_loss, tokens, Batch, Mpt};
pub use transformer::{ForwardCtx, Segments};

use crate::autodiff::{gradcheck, GradcheckReport, Var};
use crate::error::Result;

/// Finite-difference check of the full seq2seq loss with respect to every
/// parameter, dropout off. Returns the report and the parameter names in
/// input order.
pub fn model_gradcheck(
    cfg: &MptConfig,
    store: &ParamStore,
    batch: &Batch,
    smoothing: f64,
    h: f64,
    tol: f64,
) -> Result<(GradcheckReport, Vec<String>)> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let inputs: Vec<_> = store.iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck(
        |g, leaves: &[Var]| {
            let map: BTreeMap<String, Var> = names.iter().cloned().zip(leaves.iter().copied()).collect();
            let vars = ModelVars::bind_leaves(g, &map, cfg)?;
            let out = seq2seq_loss(g, &vars, cfg, batch, &ForwardCtx::eval(), smoothing, cfg.loss_mode, 0)?;
            Ok(out.objective)
        },
        &inputs,
        h,
        tol,
    )?;
    Ok((report, names))
}
