use super::config::{LossMode, MptConfig, Regime};
use super::multipass::{encoder_output_for_decode, multipass_forward_with, PassTrace};
use super::params::{init_params, ModelVars, ParamStore};
use super::transformer::{
    decoder_layer_forward, embed_and_position, output_logits, DropSite, ForwardCtx, LayerPos,
    Segments, Stack,
};
use crate::autodiff::{AttnPair, Graph, Var};
use crate::error::{MptError, Result};

/// Reserved token ids.
pub mod tokens {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    /// First id available to task content.
    pub const FIRST_CONTENT: usize = 3;
}

/// Ragged source/target pairs. Targets carry no BOS/EOS; those are added
/// when the decoder input and output are formed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src_tokens(&self) -> usize {
        self.src.iter().map(Vec::len).sum()
    }

    /// `[BOS] + tgt` per sequence.
    pub fn decoder_inputs(&self) -> Vec<Vec<usize>> {
        self.tgt
            .iter()
            .map(|t| std::iter::once(tokens::BOS).chain(t.iter().copied()).collect())
            .collect()
    }

    /// `tgt + [EOS]` per sequence.
    pub fn decoder_targets(&self) -> Vec<Vec<usize>> {
        self.tgt
            .iter()
            .map(|t| t.iter().copied().chain(std::iter::once(tokens::EOS)).collect())
            .collect()
    }
}

pub struct EncodedSource {
    pub trace: PassTrace,
    pub segments: Segments,
    pub embedded: Var,
}

/// Embeds the packed sources and runs `passes` encoder passes.
pub fn encode(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &MptConfig,
    src: &[Vec<usize>],
    ctx: &ForwardCtx,
    passes: usize,
) -> Result<EncodedSource> {
    let lens: Vec<usize> = src.iter().map(Vec::len).collect();
    let segments = Segments::from_lens(&lens)?;
    let ids: Vec<usize> = src.iter().flatten().copied().collect();
    let site = DropSite {
        stack: Stack::Embed,
        layer: 0,
        pass: 0,
        call: 0,
    };
    let embedded = embed_and_position(g, &ids, &segments.positions(), vars.tokens, vars.positions, ctx, site)?;
    let trace = multipass_forward_with(g, &[&vars.encoder], vars.soft_logits, cfg, passes, embedded, &segments, ctx)?;
    Ok(EncodedSource {
        trace,
        segments,
        embedded,
    })
}

/// Full decoder stack over packed target inputs; returns `[tokens, V]` logits.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &MptConfig,
    tgt_in: &[Vec<usize>],
    memory: Var,
    cross: impl Fn(&Segments) -> Result<Vec<AttnPair>>,
    ctx: &ForwardCtx,
    memory_pass: usize,
) -> Result<Var> {
    let lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
    let target = Segments::from_lens(&lens)?;
    let cross_pairs = cross(&target)?;
    let ids: Vec<usize> = tgt_in.iter().flatten().copied().collect();
    let site = DropSite {
        stack: Stack::Embed,
        layer: 1,
        pass: memory_pass,
        call: 0,
    };
    let mut x = embed_and_position(g, &ids, &target.positions(), vars.tokens, vars.positions, ctx, site)?;
    for (k, layer) in vars.decoder.iter().enumerate() {
        x = decoder_layer_forward(
            g,
            x,
            memory,
            layer,
            cfg.heads,
            &target,
            &cross_pairs,
            ctx,
            LayerPos {
                layer: k,
                pass: memory_pass,
            },
        )?;
    }
    output_logits(g, x, vars.tokens)
}

pub struct LossOutput {
    /// Scalar that is backpropagated.
    pub objective: Var,
    /// Loss decoded from each pass that entered the objective.
    pub per_pass: Vec<Option<Var>>,
}

/// Passes whose decoded loss enters the objective.
pub fn objective_passes(mode: LossMode, passes: usize, random_pick: usize) -> Vec<usize> {
    match mode {
        LossMode::FinalPass => vec![passes - 1],
        LossMode::SumAllPasses => (0..passes).collect(),
        LossMode::RandomPass => vec![random_pick % passes],
    }
}

/// Label-smoothed seq2seq loss for `batch`. `random_pick` selects the pass in
/// [`LossMode::RandomPass`] and is ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn seq2seq_loss(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &MptConfig,
    batch: &Batch,
    ctx: &ForwardCtx,
    smoothing: f64,
    mode: LossMode,
    random_pick: usize,
) -> Result<LossOutput> {
    if batch.is_empty() || batch.src.len() != batch.tgt.len() {
        return Err(MptError::Contract("batch must pair each source with a target".into()));
    }
    let enc = encode(g, vars, cfg, &batch.src, ctx, cfg.passes)?;
    let tgt_in = batch.decoder_inputs();
    let targets: Vec<Option<usize>> = batch
        .decoder_targets()
        .into_iter()
        .flatten()
        .map(|t| (t != tokens::PAD).then_some(t))
        .collect();
    let mut per_pass = vec![None; cfg.passes];
    let mut objective: Option<Var> = None;
    for p in objective_passes(mode, cfg.passes, random_pick) {
        let memory = enc.trace.passes[p].last();
        let logits = decoder_forward(
            g,
            vars,
            cfg,
            &tgt_in,
            memory,
            |t| t.cross_pairs(&enc.segments),
            ctx,
            p,
        )?;
        let loss = g.smoothed_cross_entropy(logits, &targets, smoothing)?;
        per_pass[p] = Some(loss);
        objective = Some(match objective {
            Some(acc) => g.add(acc, loss)?,
            None => loss,
        });
    }
    Ok(LossOutput {
        objective: objective.expect("at least one pass"),
        per_pass,
    })
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Mpt {
    pub cfg: MptConfig,
    pub params: ParamStore,
}

impl Mpt {
    pub fn new(cfg: MptConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Mpt { cfg, params })
    }

    /// Per-pass losses without dropout or gradient tracking.
    pub fn eval_losses(&self, batch: &Batch, smoothing: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params, &self.cfg, false)?;
        let out = seq2seq_loss(
            &mut g,
            &vars,
            &self.cfg,
            batch,
            &ForwardCtx::eval(),
            smoothing,
            LossMode::SumAllPasses,
            0,
        )?;
        Ok(out
            .per_pass
            .iter()
            .map(|v| g.value(v.expect("all passes evaluated")).item())
            .collect())
    }

    /// Number of encoder passes to run for a decoding regime.
    pub fn passes_for(&self, regime: Regime) -> usize {
        match regime {
            Regime::FirstPass => 1,
            Regime::FinalPass => self.cfg.passes,
        }
    }
}

/// Decoder memory for `src` under `regime`.
pub fn encode_memory(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &MptConfig,
    src: &[Vec<usize>],
    regime: Regime,
) -> Result<(Var, Segments, usize)> {
    let passes = match regime {
        Regime::FirstPass => 1,
        Regime::FinalPass => cfg.passes,
    };
    let enc = encode(g, vars, cfg, src, &ForwardCtx::eval(), passes)?;
    let memory = encoder_output_for_decode(&enc.trace, regime);
    Ok((memory, enc.segments, passes - 1))
}
