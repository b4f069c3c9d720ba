//! Multi-pass encoder: the tied-weight stack evaluated `P` times, with
//! features of pass `p - 1` infused into the layers of pass `p`.

use super::config::{ConnectionSpec, Inject, MptConfig, Permutation, Regime, Tap};
use super::params::{EncoderLayerVars, ModelVars, ParamStore};
use super::transformer::{
    encoder_layers_forward, encoder_module_forward, ForwardCtx, Infusion, LayerPos, Segments,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{MptError, Result};

/// Intermediate (`mid`) and output (`out`) features of one pass, per layer.
#[derive(Clone, Debug)]
pub struct PassFeatures {
    pub mid: Vec<Var>,
    pub out: Vec<Var>,
}

impl PassFeatures {
    pub fn last(&self) -> Var {
        *self.out.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct PassTrace {
    pub passes: Vec<PassFeatures>,
}

impl PassTrace {
    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }
}

/// Row-wise softmax of an `N x N` logit matrix.
pub fn soft_weights(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape[0] != logits.shape[1] {
        return Err(MptError::dim(
            "soft_weights",
            format!("expected a square matrix, got {:?}", logits.shape),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.softmax(x, 1)?;
    Ok(g.value(y).clone())
}

/// Logits whose softmax is (numerically) one-hot at `perm[k]` in row `k`.
pub fn harden_logits(perm: &Permutation, magnitude: f64) -> Vec<Vec<f64>> {
    let n = perm.len();
    perm.as_slice()
        .iter()
        .map(|&j| (0..n).map(|c| if c == j { magnitude } else { 0.0 }).collect())
        .collect()
}

/// Runs the configured number of passes over the embedded source `x0`.
pub fn multipass_forward(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &MptConfig,
    x0: Var,
    segments: &Segments,
    ctx: &ForwardCtx,
) -> Result<PassTrace> {
    multipass_forward_with(g, &[&vars.encoder], vars.soft_logits, cfg, cfg.passes, x0, segments, ctx)
}

/// Generalised driver. `layer_sets` holds one encoder weight set shared by
/// all passes, or one per pass (untied clones, used only in checks).
/// `passes` may be smaller than `cfg.passes` to stop early.
#[allow(clippy::too_many_arguments)]
pub fn multipass_forward_with(
    g: &mut Graph,
    layer_sets: &[&[EncoderLayerVars]],
    soft_logits: Option<Var>,
    cfg: &MptConfig,
    passes: usize,
    x0: Var,
    segments: &Segments,
    ctx: &ForwardCtx,
) -> Result<PassTrace> {
    cfg.validate()?;
    if passes == 0 || passes > cfg.passes {
        return Err(MptError::Config(format!(
            "requested {passes} passes of a {}-pass model",
            cfg.passes
        )));
    }
    let layers_for = |p: usize| -> Result<&[EncoderLayerVars]> {
        let set = if layer_sets.len() == 1 {
            layer_sets[0]
        } else {
            *layer_sets
                .get(p)
                .ok_or_else(|| MptError::Config(format!("no encoder weights for pass {p}")))?
        };
        if set.len() != cfg.layers {
            return Err(MptError::Config(format!(
                "{} encoder layers bound for N = {}",
                set.len(),
                cfg.layers
            )));
        }
        Ok(set)
    };
    let pairs = segments.self_pairs();
    let heads = cfg.heads;

    let (mid, out) = encoder_layers_forward(g, layers_for(0)?, x0, heads, &pairs, ctx, 0)?;
    let mut trace = PassTrace {
        passes: vec![PassFeatures { mid, out }],
    };

    let alpha = match (&cfg.connection, soft_logits) {
        (ConnectionSpec::Soft { .. }, Some(logits)) => Some(g.softmax(logits, 1)?),
        (ConnectionSpec::Soft { .. }, None) => {
            return Err(MptError::Config("soft connection without bound logits".into()))
        }
        _ => None,
    };

    for p in 1..passes {
        let layers = layers_for(p)?;
        let prev = trace.passes[p - 1].clone();
        let features = match &cfg.connection {
            ConnectionSpec::None => unreachable!("validated single pass"),
            ConnectionSpec::Chained => {
                let (mid, out) = encoder_layers_forward(g, layers, prev.last(), heads, &pairs, ctx, p)?;
                PassFeatures { mid, out }
            }
            ConnectionSpec::Hard { .. } | ConnectionSpec::Soft { .. } => {
                let tapped = match cfg.routing.tap {
                    Tap::ModuleOutput => &prev.out,
                    Tap::AttentionOutput => &prev.mid,
                };
                let mut mid = Vec::with_capacity(cfg.layers);
                let mut out = Vec::with_capacity(cfg.layers);
                let mut cur = x0;
                for (k, layer) in layers.iter().enumerate() {
                    let f = match (&cfg.connection, alpha) {
                        (ConnectionSpec::Hard { perm }, _) => tapped[perm.as_slice()[k]],
                        (_, Some(alpha)) => weighted_sum(g, tapped, alpha, k)?,
                        _ => unreachable!(),
                    };
                    let infusion = match cfg.routing.inject {
                        Inject::PreResidual => Infusion {
                            pre: Some(f),
                            post: None,
                        },
                        Inject::PostResidual => Infusion {
                            pre: None,
                            post: Some(f),
                        },
                    };
                    let (m, o) = encoder_module_forward(
                        g,
                        cur,
                        layer,
                        heads,
                        &infusion,
                        &pairs,
                        ctx,
                        LayerPos { layer: k, pass: p },
                    )?;
                    mid.push(m);
                    out.push(o);
                    cur = o;
                }
                PassFeatures { mid, out }
            }
        };
        trace.passes.push(features);
    }
    Ok(trace)
}

/// `sum_j alpha[k, j] * features[j]`.
fn weighted_sum(g: &mut Graph, features: &[Var], alpha: Var, k: usize) -> Result<Var> {
    let n = features.len();
    let mut acc = g.scale_by_element(features[0], alpha, k * n)?;
    for (j, &f) in features.iter().enumerate().skip(1) {
        let term = g.scale_by_element(f, alpha, k * n + j)?;
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

/// Decoder memory: last layer of the first pass, or of the last pass.
pub fn encoder_output_for_decode(trace: &PassTrace, regime: Regime) -> Var {
    match regime {
        Regime::FirstPass => trace.passes[0].last(),
        Regime::FinalPass => trace.passes.last().expect("non-empty trace").last(),
    }
}

/// Max absolute difference, over every layer output of every pass, between
/// the hard model `hard_cfg` and the same weights run as a soft model with
/// the given logits. Dropout is off.
pub fn soft_hard_difference(
    hard_cfg: &MptConfig,
    store: &ParamStore,
    soft_logits: Vec<Vec<f64>>,
    src: &[Vec<usize>],
) -> Result<f64> {
    if !matches!(hard_cfg.connection, ConnectionSpec::Hard { .. }) {
        return Err(MptError::Config("expected a hard connection config".into()));
    }
    let soft_cfg = MptConfig {
        connection: ConnectionSpec::Soft {
            init_logits: Some(soft_logits.clone()),
        },
        ..hard_cfg.clone()
    };
    soft_cfg.validate()?;
    let mut soft_store = store.clone();
    let n = hard_cfg.layers;
    soft_store.insert(
        "conn.soft_logits",
        Tensor::new(vec![n, n], soft_logits.into_iter().flatten().collect())?,
    );
    let run = |cfg: &MptConfig, store: &ParamStore| -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, store, cfg, false)?;
        let enc = super::seq2seq::encode(&mut g, &vars, cfg, src, &ForwardCtx::eval(), cfg.passes)?;
        Ok(enc
            .trace
            .passes
            .iter()
            .flat_map(|p| p.out.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>())
            .collect())
    };
    let a = run(hard_cfg, store)?;
    let b = run(&soft_cfg, &soft_store)?;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max))
}
