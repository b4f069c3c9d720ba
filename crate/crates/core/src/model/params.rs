use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ConnectionSpec, MptConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{MptError, Result};

/// Named trainable arrays. Ordered by name so iteration (and therefore
/// serialization and optimizer updates) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| MptError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Exact count of distinct trainable scalars. Passes share every weight, so
/// `passes` never enters; soft connections add `layers^2` logits.
pub fn count_params(cfg: &MptConfig) -> usize {
    let d = cfg.d_model;
    let attention = 4 * d * d + 4 * d;
    let ffn = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
    let norm = 2 * d;
    let encoder = attention + ffn + 2 * norm;
    let decoder = 2 * attention + ffn + 3 * norm;
    let soft = match cfg.connection {
        ConnectionSpec::Soft { .. } => cfg.layers * cfg.layers,
        _ => 0,
    };
    cfg.vocab * d + cfg.layers * (encoder + decoder) + soft
}

/// Sinusoidal table; row 0 is `[0, 1, 0, 1, ...]`.
pub fn sinusoidal_table(max_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor {
        shape: vec![max_len, d_model],
        data,
        requires_grad: false,
        grad: None,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        requires_grad: false,
        grad: None,
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}

fn attention_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for w in ["q", "k", "v", "o"] {
        store.insert(format!("{prefix}.w{w}"), xavier(rng, d, d));
        store.insert(format!("{prefix}.b{w}"), Tensor::zeros(&[d]));
    }
}

fn ffn_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, d_ff: usize) {
    store.insert(format!("{prefix}.w1"), xavier(rng, d, d_ff));
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]));
    store.insert(format!("{prefix}.w2"), xavier(rng, d_ff, d));
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
}

fn norm_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
}

/// Deterministic initialisation: Xavier-uniform matrices, zero biases, unit
/// norm gains, token table uniform with std `d_model^-1/2`.
pub fn init_params(cfg: &MptConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let bound = (3.0 / d as f64).sqrt();
    store.insert("embed.tokens", uniform(&mut rng, &[cfg.vocab, d], bound));
    for k in 0..cfg.layers {
        let p = format!("enc.{k}");
        attention_params(&mut store, &mut rng, &format!("{p}.self_attn"), d);
        ffn_params(&mut store, &mut rng, &format!("{p}.ffn"), d, cfg.d_ff);
        norm_params(&mut store, &format!("{p}.norm1"), d);
        norm_params(&mut store, &format!("{p}.norm2"), d);
    }
    for k in 0..cfg.layers {
        let p = format!("dec.{k}");
        attention_params(&mut store, &mut rng, &format!("{p}.self_attn"), d);
        attention_params(&mut store, &mut rng, &format!("{p}.src_attn"), d);
        ffn_params(&mut store, &mut rng, &format!("{p}.ffn"), d, cfg.d_ff);
        for n in 1..=3 {
            norm_params(&mut store, &format!("{p}.norm{n}"), d);
        }
    }
    if let ConnectionSpec::Soft { init_logits } = &cfg.connection {
        let n = cfg.layers;
        let data = match init_logits {
            Some(rows) => rows.iter().flatten().copied().collect(),
            None => vec![0.0; n * n],
        };
        store.insert("conn.soft_logits", Tensor::new(vec![n, n], data)?);
    }
    Ok(store)
}

/// Parameter names paired with their graph leaves.
pub type NamedVars = Vec<(String, Var)>;

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Weights of one encoder attention module (self-attention + FFN).
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub self_attn: AttentionVars,
    pub ffn: FfnVars,
    pub norm1: NormVars,
    pub norm2: NormVars,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerVars {
    pub self_attn: AttentionVars,
    pub src_attn: AttentionVars,
    pub ffn: FfnVars,
    pub norm1: NormVars,
    pub norm2: NormVars,
    pub norm3: NormVars,
}

/// A [`ParamStore`] recorded on a graph as leaves.
pub struct ModelVars {
    pub tokens: Var,
    pub positions: Var,
    pub encoder: Vec<EncoderLayerVars>,
    pub decoder: Vec<DecoderLayerVars>,
    pub soft_logits: Option<Var>,
    bound: Vec<(String, Var)>,
}

enum Source<'a> {
    Store { store: &'a ParamStore, trainable: bool },
    Leaves(&'a BTreeMap<String, Var>),
}

struct Binder<'a> {
    graph: &'a mut Graph,
    source: Source<'a>,
    bound: Vec<(String, Var)>,
}

impl Binder<'_> {
    fn var(&mut self, name: String) -> Result<Var> {
        let v = match &self.source {
            Source::Store { store, trainable } => {
                let t = store.get(&name)?.clone();
                if *trainable {
                    self.graph.param(t)
                } else {
                    self.graph.constant(t)
                }
            }
            Source::Leaves(map) => *map
                .get(&name)
                .ok_or_else(|| MptError::Checkpoint(format!("missing parameter {name}")))?,
        };
        self.bound.push((name, v));
        Ok(v)
    }

    fn attention(&mut self, p: &str) -> Result<AttentionVars> {
        Ok(AttentionVars {
            wq: self.var(format!("{p}.wq"))?,
            bq: self.var(format!("{p}.bq"))?,
            wk: self.var(format!("{p}.wk"))?,
            bk: self.var(format!("{p}.bk"))?,
            wv: self.var(format!("{p}.wv"))?,
            bv: self.var(format!("{p}.bv"))?,
            wo: self.var(format!("{p}.wo"))?,
            bo: self.var(format!("{p}.bo"))?,
        })
    }

    fn ffn(&mut self, p: &str) -> Result<FfnVars> {
        Ok(FfnVars {
            w1: self.var(format!("{p}.w1"))?,
            b1: self.var(format!("{p}.b1"))?,
            w2: self.var(format!("{p}.w2"))?,
            b2: self.var(format!("{p}.b2"))?,
        })
    }

    fn norm(&mut self, p: &str) -> Result<NormVars> {
        Ok(NormVars {
            gain: self.var(format!("{p}.gain"))?,
            bias: self.var(format!("{p}.bias"))?,
        })
    }

    fn encoder_layer(&mut self, k: usize) -> Result<EncoderLayerVars> {
        let p = format!("enc.{k}");
        Ok(EncoderLayerVars {
            self_attn: self.attention(&format!("{p}.self_attn"))?,
            ffn: self.ffn(&format!("{p}.ffn"))?,
            norm1: self.norm(&format!("{p}.norm1"))?,
            norm2: self.norm(&format!("{p}.norm2"))?,
        })
    }
}

impl ModelVars {
    /// Records every parameter once. With `trainable == false` the leaves are
    /// constants and no gradient is tracked.
    pub fn bind(graph: &mut Graph, store: &ParamStore, cfg: &MptConfig, trainable: bool) -> Result<Self> {
        Self::bind_from(graph, Source::Store { store, trainable }, cfg)
    }

    /// Uses leaves already recorded on the graph, keyed by parameter name.
    pub fn bind_leaves(graph: &mut Graph, leaves: &BTreeMap<String, Var>, cfg: &MptConfig) -> Result<Self> {
        Self::bind_from(graph, Source::Leaves(leaves), cfg)
    }

    fn bind_from(graph: &mut Graph, source: Source<'_>, cfg: &MptConfig) -> Result<Self> {
        let positions = graph.constant(sinusoidal_table(cfg.max_len, cfg.d_model));
        let mut b = Binder {
            graph,
            source,
            bound: Vec::new(),
        };
        let tokens = b.var("embed.tokens".into())?;
        let encoder = (0..cfg.layers)
            .map(|k| b.encoder_layer(k))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.layers)
            .map(|k| {
                let p = format!("dec.{k}");
                Ok(DecoderLayerVars {
                    self_attn: b.attention(&format!("{p}.self_attn"))?,
                    src_attn: b.attention(&format!("{p}.src_attn"))?,
                    ffn: b.ffn(&format!("{p}.ffn"))?,
                    norm1: b.norm(&format!("{p}.norm1"))?,
                    norm2: b.norm(&format!("{p}.norm2"))?,
                    norm3: b.norm(&format!("{p}.norm3"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let soft_logits = match cfg.connection {
            ConnectionSpec::Soft { .. } => Some(b.var("conn.soft_logits".into())?),
            _ => None,
        };
        let bound = b.bound;
        Ok(ModelVars {
            tokens,
            positions,
            encoder,
            decoder,
            soft_logits,
            bound,
        })
    }

    /// Records a second, independent copy of the encoder weights. Used to
    /// check that tied gradients equal the sum over untied uses.
    pub fn bind_encoder_copy(
        graph: &mut Graph,
        store: &ParamStore,
        cfg: &MptConfig,
        tag: &str,
    ) -> Result<(Vec<EncoderLayerVars>, NamedVars)> {
        let mut b = Binder {
            graph,
            source: Source::Store {
                store,
                trainable: true,
            },
            bound: Vec::new(),
        };
        let layers = (0..cfg.layers)
            .map(|k| b.encoder_layer(k))
            .collect::<Result<Vec<_>>>()?;
        let bound = b
            .bound
            .into_iter()
            .map(|(n, v)| (format!("{tag}:{n}"), v))
            .collect();
        Ok((layers, bound))
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Gradients by parameter name; parameters that received none map to zeros.
    pub fn gradients(&self, graph: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .map(|(name, v)| {
                let g = graph
                    .grad(*v)
                    .map_or_else(|| vec![0.0; graph.value(*v).numel()], <[f64]>::to_vec);
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::RoutingPattern;

    #[test]
    fn tiny_count_matches_hand_enumeration() {
        // d=4, h=1, d_ff=8, N=1, V=10, L_max=8
        let cfg = MptConfig {
            d_model: 4,
            heads: 1,
            d_ff: 8,
            layers: 1,
            passes: 1,
            vocab: 10,
            max_len: 8,
            dropout: 0.0,
            connection: ConnectionSpec::None,
            routing: RoutingPattern::A,
            loss_mode: Default::default(),
        };
        let embed = 10 * 4;
        let attn = 4 * (4 * 4) + 4 * 4; // four 4x4 projections + four biases
        let ffn = 4 * 8 + 8 + 8 * 4 + 4;
        let enc = attn + ffn + 2 * (4 + 4);
        let dec = 2 * attn + ffn + 3 * (4 + 4);
        assert_eq!(embed + enc + dec, 472);
        assert_eq!(count_params(&cfg), 472);
        assert_eq!(init_params(&cfg, 0).unwrap().num_scalars(), 472);
    }

    #[test]
    fn count_agrees_with_initialised_store() {
        for conn in [
            ConnectionSpec::None,
            ConnectionSpec::Chained,
            ConnectionSpec::hard(&[2, 0, 1]).unwrap(),
            ConnectionSpec::soft(),
        ] {
            let cfg = MptConfig::tiny(conn, RoutingPattern::A);
            assert_eq!(count_params(&cfg), init_params(&cfg, 3).unwrap().num_scalars());
        }
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal_table(4, 6);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MptConfig::tiny(ConnectionSpec::soft(), RoutingPattern::A);
        assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
        assert_ne!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 10).unwrap());
        let soft = init_params(&cfg, 9).unwrap();
        assert!(soft.get("conn.soft_logits").unwrap().data.iter().all(|v| *v == 0.0));
    }
}
