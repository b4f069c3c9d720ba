//! Encoder/decoder building blocks: scaled dot-product attention, post-norm
//! attention modules, decoder layers, embeddings and the tied output
//! projection.
//!
//! Sequences of a batch are packed back to back into `[tokens, d_model]`
//! matrices; [`Segments`] records where each one starts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{AttentionVars, DecoderLayerVars, EncoderLayerVars, FfnVars, NormVars};
use crate::autodiff::{AttnPair, Graph, Var};
use crate::error::{MptError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Lengths and offsets of packed sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
    starts: Vec<usize>,
}

impl Segments {
    pub fn from_lens(lens: &[usize]) -> Result<Self> {
        if lens.is_empty() || lens.contains(&0) {
            return Err(MptError::dim("segments", format!("invalid lengths {lens:?}")));
        }
        let starts = lens
            .iter()
            .scan(0, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            })
            .collect();
        Ok(Segments {
            lens: lens.to_vec(),
            starts,
        })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::from_lens(&[len])
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn count(&self) -> usize {
        self.lens.len()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.starts[i]..self.starts[i] + self.lens[i]
    }

    /// Position of every packed token within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }

    pub fn self_pairs(&self) -> Vec<AttnPair> {
        self.cross_pairs(self).expect("same segment count")
    }

    /// Pairs query segment `i` of `self` with key segment `i` of `keys`.
    pub fn cross_pairs(&self, keys: &Segments) -> Result<Vec<AttnPair>> {
        if self.count() != keys.count() {
            return Err(MptError::dim(
                "segments",
                format!("{} query sequences vs {} key sequences", self.count(), keys.count()),
            ));
        }
        Ok((0..self.count())
            .map(|i| AttnPair {
                q_start: self.starts[i],
                q_len: self.lens[i],
                k_start: keys.starts[i],
                k_len: keys.lens[i],
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stack {
    Embed = 0,
    Encoder = 1,
    Decoder = 2,
}

/// Identifies one dropout call so its mask comes from a private stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropSite {
    pub stack: Stack,
    pub layer: usize,
    /// Encoder pass, or for the decoder the pass whose output it reads.
    pub pass: usize,
    pub call: usize,
}

impl DropSite {
    fn stream(&self) -> u64 {
        ((self.stack as u64) << 56)
            | ((self.layer as u64 & 0xffff) << 40)
            | ((self.pass as u64 & 0xfffff) << 20)
            | (self.call as u64 & 0xfffff)
    }
}

/// Training/evaluation switch plus the per-step dropout seed.
///
/// Every dropout call draws from `ChaCha8(seed)` on a stream keyed by
/// (stack, layer, pass, call), so masks do not depend on the order in which
/// the graph happens to be built.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        ForwardCtx {
            training: true,
            dropout,
            seed,
        }
    }

    pub fn rng(&self, site: DropSite) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(site.stream());
        rng
    }

    pub fn dropout(&self, g: &mut Graph, x: Var, site: DropSite) -> Result<Var> {
        if !self.training || self.dropout == 0.0 {
            return Ok(x);
        }
        g.dropout(x, self.dropout, true, &mut self.rng(site))
    }
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn layer_norm(g: &mut Graph, x: Var, n: &NormVars) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    g.layernorm(x, n.gain, n.bias, axis, LAYER_NORM_EPS)
}

fn ffn(g: &mut Graph, x: Var, f: &FfnVars) -> Result<Var> {
    let h = linear(g, x, f.w1, f.b1)?;
    let h = g.relu(h);
    linear(g, h, f.w2, f.b2)
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` over the last two axes. `mask` has shape
/// `[L_q, L_k]` and marks disallowed positions with `true`.
pub fn scaled_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    if sq.len() < 2 || sk.len() < 2 || sq[sq.len() - 1] != sk[sk.len() - 1] {
        return Err(MptError::dim(
            "scaled_attention",
            format!("query {sq:?} and key {sk:?} disagree on d_k"),
        ));
    }
    let d_k = sq[sq.len() - 1];
    let (lq, lk) = (sq[sq.len() - 2], sk[sk.len() - 2]);
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    if let Some(mask) = mask {
        if mask.len() != lq * lk {
            return Err(MptError::dim(
                "scaled_attention",
                format!("mask of {} entries for {lq}x{lk} scores", mask.len()),
            ));
        }
        if let Some(row) = mask.chunks(lk).position(|r| r.iter().all(|&m| m)) {
            return Err(MptError::Contract(format!(
                "attention row {row} has no allowed positions"
            )));
        }
        scores = g.mask_fill(scores, mask)?;
    }
    let axis = g.shape(scores).len() - 1;
    let probs = g.softmax(scores, axis)?;
    g.matmul(probs, v)
}

/// Lower-triangular disallow mask: `mask[i][j] = j > i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|idx| idx % len > idx / len).collect()
}

/// Single-sequence multi-head attention built from [`scaled_attention`]:
/// project, split columns into heads, attend, concatenate, project.
pub fn multi_head_attention(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    a: &AttentionVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.shape(x_q)[g.shape(x_q).len() - 1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(MptError::dim("multi_head_attention", format!("d_model {d} vs {heads} heads")));
    }
    let dk = d / heads;
    let q = linear(g, x_q, a.wq, a.bq)?;
    let k = linear(g, x_kv, a.wk, a.bk)?;
    let v = linear(g, x_kv, a.wv, a.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        outs.push(scaled_attention(g, qh, kh, vh, mask)?);
    }
    let cat = g.concat_cols(&outs)?;
    linear(g, cat, a.wo, a.bo)
}

/// Packed-batch multi-head attention on the fused kernel.
pub fn packed_multi_head_attention(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    a: &AttentionVars,
    heads: usize,
    pairs: &[AttnPair],
    causal: bool,
) -> Result<Var> {
    let q = linear(g, x_q, a.wq, a.bq)?;
    let k = linear(g, x_kv, a.wk, a.bk)?;
    let v = linear(g, x_kv, a.wv, a.bv)?;
    let o = g.packed_attention(q, k, v, heads, pairs, causal)?;
    linear(g, o, a.wo, a.bo)
}

/// Features added into an encoder module by the multi-pass wiring.
#[derive(Clone, Copy, Debug, Default)]
pub struct Infusion {
    /// Added to the module input before the first residual split.
    pub pre: Option<Var>,
    /// Added after the self-attention residual and norm, before the FFN.
    pub post: Option<Var>,
}

/// Where an encoder module sits, for dropout keys and error messages.
#[derive(Clone, Copy, Debug)]
pub struct LayerPos {
    pub layer: usize,
    pub pass: usize,
}

/// One post-norm encoder module. Returns `(S_mid, S_out)`:
///
/// ```text
/// x     = S_in + pre
/// S_mid = LN1(x + Dropout(SelfAttn(x))) + post
/// S_out = LN2(S_mid + Dropout(FFN(S_mid)))
/// ```
#[allow(clippy::too_many_arguments)]
pub fn encoder_module_forward(
    g: &mut Graph,
    s_in: Var,
    layer: &EncoderLayerVars,
    heads: usize,
    infusion: &Infusion,
    pairs: &[AttnPair],
    ctx: &ForwardCtx,
    pos: LayerPos,
) -> Result<(Var, Var)> {
    let shape = g.shape(s_in).to_vec();
    for f in [infusion.pre, infusion.post].into_iter().flatten() {
        if g.shape(f) != shape.as_slice() {
            return Err(MptError::Config(format!(
                "infusion into encoder layer {} has shape {:?}, expected {shape:?}",
                pos.layer,
                g.shape(f)
            )));
        }
    }
    let site = |call| DropSite {
        stack: Stack::Encoder,
        layer: pos.layer,
        pass: pos.pass,
        call,
    };
    let x = match infusion.pre {
        Some(f) => g.add(s_in, f)?,
        None => s_in,
    };
    let a = packed_multi_head_attention(g, x, x, &layer.self_attn, heads, pairs, false)?;
    let a = ctx.dropout(g, a, site(0))?;
    let r = g.add(x, a)?;
    let mut mid = layer_norm(g, r, &layer.norm1)?;
    if let Some(f) = infusion.post {
        mid = g.add(mid, f)?;
    }
    let f = ffn(g, mid, &layer.ffn)?;
    let f = ctx.dropout(g, f, site(1))?;
    let r = g.add(mid, f)?;
    let out = layer_norm(g, r, &layer.norm2)?;
    Ok((mid, out))
}

/// One post-norm decoder layer: causal self-attention, source attention over
/// `memory`, FFN, each wrapped in residual + norm. `cross_pairs` maps each
/// target segment to the memory rows it reads.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_forward(
    g: &mut Graph,
    t_in: Var,
    memory: Var,
    layer: &DecoderLayerVars,
    heads: usize,
    target: &Segments,
    cross_pairs: &[AttnPair],
    ctx: &ForwardCtx,
    pos: LayerPos,
) -> Result<Var> {
    let (dt, dm) = (g.value(t_in).cols(), g.value(memory).cols());
    if dt != dm {
        return Err(MptError::Config(format!(
            "decoder layer {}: target width {dt} vs memory width {dm}",
            pos.layer
        )));
    }
    let site = |call| DropSite {
        stack: Stack::Decoder,
        layer: pos.layer,
        pass: pos.pass,
        call,
    };
    let self_pairs = target.self_pairs();
    let a = packed_multi_head_attention(g, t_in, t_in, &layer.self_attn, heads, &self_pairs, true)?;
    let a = ctx.dropout(g, a, site(0))?;
    let r = g.add(t_in, a)?;
    let x = layer_norm(g, r, &layer.norm1)?;
    let c = packed_multi_head_attention(g, x, memory, &layer.src_attn, heads, cross_pairs, false)?;
    let c = ctx.dropout(g, c, site(1))?;
    let r = g.add(x, c)?;
    let x = layer_norm(g, r, &layer.norm2)?;
    let f = ffn(g, x, &layer.ffn)?;
    let f = ctx.dropout(g, f, site(2))?;
    let r = g.add(x, f)?;
    layer_norm(g, r, &layer.norm3)
}

/// `sqrt(d_model) * tokens[id] + positions[pos]`, then dropout.
///
/// `positions` must have as many entries as `ids`; each is checked against
/// the positional table length.
pub fn embed_and_position(
    g: &mut Graph,
    ids: &[usize],
    positions: &[usize],
    tokens: Var,
    table: Var,
    ctx: &ForwardCtx,
    site: DropSite,
) -> Result<Var> {
    let max_len = g.shape(table)[0];
    if let Some(&p) = positions.iter().max() {
        if p >= max_len {
            return Err(MptError::Length {
                len: p + 1,
                max: max_len,
            });
        }
    }
    if positions.len() != ids.len() {
        return Err(MptError::dim("embed_and_position", "ids and positions differ in length"));
    }
    let d = g.shape(tokens)[1];
    let e = g.embed(ids, tokens)?;
    let e = g.scale(e, (d as f64).sqrt());
    let p = g.embed(positions, table)?;
    let x = g.add(e, p)?;
    ctx.dropout(g, x, site)
}

/// Projection onto the vocabulary with the transposed shared token table.
pub fn output_logits(g: &mut Graph, decoder_out: Var, tokens: Var) -> Result<Var> {
    let t = g.transpose(tokens)?;
    g.matmul(decoder_out, t)
}

pub(crate) fn encoder_layers_forward(
    g: &mut Graph,
    layers: &[EncoderLayerVars],
    x: Var,
    heads: usize,
    pairs: &[AttnPair],
    ctx: &ForwardCtx,
    pass: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut mids = Vec::with_capacity(layers.len());
    let mut outs = Vec::with_capacity(layers.len());
    let mut cur = x;
    for (k, layer) in layers.iter().enumerate() {
        let (m, o) = encoder_module_forward(
            g,
            cur,
            layer,
            heads,
            &Infusion::default(),
            pairs,
            ctx,
            LayerPos { layer: k, pass },
        )?;
        mids.push(m);
        outs.push(o);
        cur = o;
    }
    Ok((mids, outs))
}
