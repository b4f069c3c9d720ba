//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnPair, Graph, Tensor};
use crate::error::{MptError, Result};
use crate::model::seq2seq::{decoder_forward, encode_memory};
use crate::model::{tokens, ForwardCtx, ModelVars, Mpt, Regime, Segments};

fn default_beam() -> usize {
    4
}
fn default_alpha() -> f64 {
    0.2
}
fn default_decode_len() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "default_beam")]
    pub beam: usize,
    /// Length penalty exponent: hypotheses are ranked by `log_prob / len^alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Maximum number of emitted tokens, EOS included.
    #[serde(default = "default_decode_len")]
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: default_beam(),
            alpha: default_alpha(),
            max_len: default_decode_len(),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(MptError::schema("decode.beam", "must be at least 1"));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(MptError::schema("decode.alpha", "must be non-negative"));
        }
        if self.max_len == 0 {
            return Err(MptError::schema("decode.max_len", "must be at least 1"));
        }
        Ok(())
    }

    /// Description written at the top of reports.
    pub fn describe(&self) -> String {
        format!(
            "beam={} alpha={} max_len={} score=sum_logprob/len^alpha (len counts EOS)",
            self.beam, self.alpha, self.max_len
        )
    }
}

/// Next-token log-probabilities for a set of prefixes. Prefixes hold the
/// emitted tokens only, without BOS.
pub trait StepScorer {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A decoded output.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, without the final EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^alpha`.
    pub score: f64,
    /// Maximum length was reached without EOS.
    pub truncated: bool,
}

pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len as f64).powf(alpha)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Reserved ids that may never be emitted.
fn emittable(token: usize) -> bool {
    token != tokens::PAD && token != tokens::BOS
}

fn masked(mut row: Vec<f64>) -> Vec<f64> {
    row[tokens::PAD] = f64::NEG_INFINITY;
    row[tokens::BOS] = f64::NEG_INFINITY;
    row
}

/// Picks the most likely next token at every step.
pub fn greedy_decode(scorer: &mut dyn StepScorer, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let mut out = Vec::new();
    let mut log_prob = 0.0;
    while out.len() < max_len {
        let row = masked(scorer.log_probs(std::slice::from_ref(&out))?.remove(0));
        let t = argmax(&row);
        log_prob += row[t];
        if t == tokens::EOS {
            let len = out.len() + 1;
            return Ok(Hypothesis {
                tokens: out,
                log_prob,
                score: length_normalized(log_prob, len, alpha),
                truncated: false,
            });
        }
        out.push(t);
    }
    Ok(Hypothesis {
        score: length_normalized(log_prob, out.len(), alpha),
        tokens: out,
        log_prob,
        truncated: true,
    })
}

struct Partial {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. Each step keeps the `beam` highest-probability extensions of
/// the live prefixes; extensions ending in EOS leave the beam as finished
/// hypotheses. Finished hypotheses are ranked by length-normalized score;
/// if none finished within `max_len`, the best truncated one is returned.
pub fn beam_search(scorer: &mut dyn StepScorer, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut live = vec![Partial {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|p| p.tokens.clone()).collect();
        let rows = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, Vec<usize>)> = Vec::new();
        for (p, row) in live.iter().zip(rows) {
            for (t, lp) in row.iter().enumerate() {
                if emittable(t) && lp.is_finite() {
                    let mut toks = p.tokens.clone();
                    toks.push(t);
                    cands.push((p.log_prob + lp, toks));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        cands.truncate(cfg.beam);
        live.clear();
        for (log_prob, mut toks) in cands {
            if toks.last() == Some(&tokens::EOS) {
                let len = toks.len();
                toks.pop();
                finished.push(Hypothesis {
                    tokens: toks,
                    log_prob,
                    score: length_normalized(log_prob, len, cfg.alpha),
                    truncated: false,
                });
            } else {
                live.push(Partial { tokens: toks, log_prob });
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() {
        live.into_iter()
            .map(|p| Hypothesis {
                score: length_normalized(p.log_prob, p.tokens.len(), cfg.alpha),
                tokens: p.tokens,
                log_prob: p.log_prob,
                truncated: true,
            })
            .collect()
    } else {
        finished
    };
    pool.into_iter()
        .min_by(better)
        .ok_or_else(|| MptError::Contract("beam search produced no hypothesis".into()))
}

/// Decoder scoring against encoder memories computed once per source.
pub struct ModelScorer<'a> {
    model: &'a Mpt,
    memory: Tensor,
    sources: Segments,
    memory_pass: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Mpt, srcs: &[Vec<usize>], regime: Regime) -> Result<Self> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &model.params, &model.cfg, false)?;
        let (memory, sources, memory_pass) = encode_memory(&mut g, &vars, &model.cfg, srcs, regime)?;
        Ok(ModelScorer {
            model,
            memory: g.value(memory).clone(),
            sources,
            memory_pass,
        })
    }

    /// Longest emitted sequence the position table allows.
    pub fn max_emit(&self) -> usize {
        self.model.cfg.max_len
    }

    /// Log-probabilities for each prefix; prefix `i` reads source `owners[i]`.
    pub fn log_probs_for(&self, prefixes: &[Vec<usize>], owners: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.model.params, &self.model.cfg, false)?;
        let memory = g.constant(self.memory.clone());
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(tokens::BOS).chain(p.iter().copied()).collect())
            .collect();
        let cross = |target: &Segments| -> Result<Vec<AttnPair>> {
            Ok((0..target.count())
                .map(|i| {
                    let q = target.range(i);
                    let k = self.sources.range(owners[i]);
                    AttnPair {
                        q_start: q.start,
                        q_len: q.len(),
                        k_start: k.start,
                        k_len: k.len(),
                    }
                })
                .collect())
        };
        let logits = decoder_forward(
            &mut g,
            &vars,
            &self.model.cfg,
            &inputs,
            memory,
            cross,
            &ForwardCtx::eval(),
            self.memory_pass,
        )?;
        let logits = g.value(logits);
        let mut row_end = 0;
        Ok(inputs
            .iter()
            .map(|inp| {
                row_end += inp.len();
                log_softmax(logits.row(row_end - 1))
            })
            .collect())
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v - z).collect()
}

/// Scorer bound to one source of a [`ModelScorer`].
pub struct SingleSource<'s, 'a> {
    pub scorer: &'s ModelScorer<'a>,
    pub index: usize,
}

impl StepScorer for SingleSource<'_, '_> {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.scorer.log_probs_for(prefixes, &vec![self.index; prefixes.len()])
    }
}

/// Decodes every source with `cfg`. Beam 1 runs all sources through greedy
/// search together; wider beams search each source separately.
pub fn decode_all(model: &Mpt, srcs: &[Vec<usize>], regime: Regime, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let scorer = ModelScorer::new(model, srcs, regime)?;
    let max_len = cfg.max_len.min(scorer.max_emit());
    if cfg.beam > 1 {
        let local = DecodeConfig {
            max_len,
            ..cfg.clone()
        };
        return (0..srcs.len())
            .map(|index| {
                beam_search(
                    &mut SingleSource {
                        scorer: &scorer,
                        index,
                    },
                    &local,
                )
            })
            .collect();
    }
    let mut outs: Vec<Vec<usize>> = vec![Vec::new(); srcs.len()];
    let mut log_probs = vec![0.0; srcs.len()];
    let mut done = vec![false; srcs.len()];
    for _ in 0..max_len {
        let active: Vec<usize> = (0..srcs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = active.iter().map(|&i| outs[i].clone()).collect();
        let rows = scorer.log_probs_for(&prefixes, &active)?;
        for (&i, row) in active.iter().zip(rows) {
            let row = masked(row);
            let t = argmax(&row);
            log_probs[i] += row[t];
            if t == tokens::EOS {
                done[i] = true;
            } else {
                outs[i].push(t);
            }
        }
    }
    Ok(outs
        .into_iter()
        .zip(log_probs)
        .zip(done)
        .map(|((tokens, log_prob), done)| {
            let len = tokens.len() + usize::from(done);
            Hypothesis {
                score: length_normalized(log_prob, len, cfg.alpha),
                tokens,
                log_prob,
                truncated: !done,
            }
        })
        .collect())
}
