use rand::Rng;

use super::gemm::gemm;
use super::graph::{accumulate, Graph, Node, Op, Var};
use super::tensor::{axis_split, Tensor};
use crate::error::{MptError, Result};

/// Logit assigned to disallowed attention positions.
pub const MASK_VALUE: f64 = -1e9;

/// Number of times `small` repeats when broadcast over the leading axes of
/// `big`, or `None` when `small` is not a suffix of `big`.
fn suffix_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(big[..big.len() - small.len()].iter().product())
}

impl Graph {
    /// Batched matrix product over the last two axes. Leading batch axes must
    /// agree, or one side must carry no batch (broadcast from 1).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || MptError::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let pa: usize = ba.iter().product();
        let pb: usize = bb.iter().product();
        let (batch, a_bcast, b_bcast, out_batch) = if ba == bb {
            (pa, false, false, ba.to_vec())
        } else if pb == 1 {
            (pa, false, true, ba.to_vec())
        } else if pa == 1 {
            (pb, true, false, bb.to_vec())
        } else {
            return Err(mismatch());
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for t in 0..batch {
                let ao = if a_bcast { 0 } else { t * m * k };
                let bo = if b_bcast { 0 } else { t * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &ad[ao..ao + m * k],
                    false,
                    &bd[bo..bo + k * n],
                    false,
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                a_bcast,
                b_bcast,
                m,
                k,
                n,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(MptError::dim("transpose", format!("rank < 2: {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for t in 0..batch {
            let o = t * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[o + c * rows + r] = src[o + r * cols + c];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([cols, rows]);
        Ok(self.push(shape, out, Op::Transpose { x, batch, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(MptError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }))
    }

    /// `a + b`; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let reps = self.broadcast_check("add", a, b)?;
        let bd = self.data(b);
        let blen = bd.len();
        let mut out = self.data(a).to_vec();
        for r in 0..reps {
            for (o, y) in out[r * blen..(r + 1) * blen].iter_mut().zip(bd) {
                *o += y;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }))
    }

    /// Elementwise `a * b`; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let reps = self.broadcast_check("mul", a, b)?;
        let bd = self.data(b);
        let blen = bd.len();
        let mut out = self.data(a).to_vec();
        for r in 0..reps {
            for (o, y) in out[r * blen..(r + 1) * blen].iter_mut().zip(bd) {
                *o *= y;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        suffix_repeats(self.shape(a), self.shape(b)).ok_or_else(|| {
            MptError::dim(
                op,
                format!("{:?} does not broadcast onto {:?}", self.shape(b), self.shape(a)),
            )
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|&v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor })
    }

    /// Multiplies `x` by the single scalar `s[idx]`, differentiable in both.
    pub fn scale_by_element(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let factor = *self.data(s).get(idx).ok_or_else(|| {
            MptError::dim("scale_by_element", format!("index {idx} out of {:?}", self.shape(s)))
        })?;
        let out = self.data(x).iter().map(|&v| v * factor).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleByElement { x, s, idx }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum { x })
    }

    /// Softmax along `axis`, stabilised by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split("softmax", self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, axis }))
    }

    /// Normalises along `axis` to zero mean and unit (biased) variance, then
    /// applies `gain` and `bias`, whose extent must equal the axis extent.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let (outer, len, inner) = axis_split("layernorm", self.shape(x), axis)?;
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return Err(MptError::dim(
                "layernorm",
                format!(
                    "gain {:?} / bias {:?} must both be [{len}]",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let mean = (0..len).map(|a| src[at(a)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|a| (src[at(a)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for a in 0..len {
                    let h = (src[at(a)] - mean) * is;
                    xhat[at(a)] = h;
                    out[at(a)] = h * g[a] + b[a];
                }
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of a `[V, C]` table.
    pub fn embed(&mut self, ids: &[usize], table: Var) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(MptError::dim("embed", format!("table must be rank 2, got {s:?}")));
        }
        let (vocab, width) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(MptError::dim("embed", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(MptError::Vocabulary { index: bad, vocab });
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity (no node recorded) when not training or
    /// when `p == 0`; otherwise draws one uniform per element from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(MptError::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }))
    }

    /// Replaces positions where `mask` (shape = trailing axes of `x`) is true
    /// by [`MASK_VALUE`]; those positions pass no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let numel = self.value(x).numel();
        if mask.is_empty() || !numel.is_multiple_of(mask.len()) {
            return Err(MptError::dim(
                "mask_fill",
                format!("mask of {} does not tile {:?}", mask.len(), self.shape(x)),
            ));
        }
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % mask.len()] { MASK_VALUE } else { v })
            .collect();
        let full: Vec<bool> = (0..numel).map(|i| mask[i % mask.len()]).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MaskFill { x, mask: full }))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap_or(&0);
        if len == 0 || start + len > cols {
            return Err(MptError::dim(
                "slice_cols",
                format!("[{start}, {}) outside {s:?}", start + len),
            ));
        }
        let rows = self.value(x).numel() / cols;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, out, Op::SliceCols { x, start }))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| MptError::dim("concat_cols", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(MptError::dim(
                    "concat_cols",
                    format!("{s:?} does not share leading axes {lead:?}"),
                ));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let c = self.value(x).cols();
                out.extend_from_slice(&self.data(x)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Mean label-smoothed cross entropy over the rows of `[L, V]` logits.
    ///
    /// Each row's target puts `1 - eps` on its class and `eps / (V - 1)` on
    /// every other class. Rows whose target is `None` are skipped.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], eps: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(MptError::dim(
                "cross_entropy",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        let vocab = s[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(MptError::Vocabulary { index: *bad, vocab });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(MptError::Contract("every target position is padding".into()));
        }
        let (on, off) = smoothing_masses(vocab, eps);
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (c, &v) in row.iter().enumerate() {
                let logp = v - lse;
                probs[r * vocab + c] = logp.exp();
                let q = if c == t { on } else { off };
                if q > 0.0 {
                    total -= q * logp;
                }
            }
        }
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::SmoothedCe {
                logits,
                rows: targets.to_vec(),
                eps,
                probs,
            },
        ))
    }
}

/// Target probability on the true class and on each other class.
pub(crate) fn smoothing_masses(vocab: usize, eps: f64) -> (f64, f64) {
    if vocab <= 1 {
        (1.0, 0.0)
    } else {
        (1.0 - eps, eps / (vocab - 1) as f64)
    }
}

pub(crate) fn backward_op(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
) {
    match op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            a_bcast,
            b_bcast,
            m,
            k,
            n,
        } => {
            let ad = &nodes[a.0].value.data;
            let bd = &nodes[b.0].value.data;
            accumulate(nodes, grads, a, |ga| {
                for t in 0..batch {
                    let ao = if a_bcast { 0 } else { t * m * k };
                    let bo = if b_bcast { 0 } else { t * k * n };
                    gemm(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        false,
                        &bd[bo..bo + k * n],
                        true,
                        &mut ga[ao..ao + m * k],
                        true,
                    );
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for t in 0..batch {
                    let ao = if a_bcast { 0 } else { t * m * k };
                    let bo = if b_bcast { 0 } else { t * k * n };
                    gemm(
                        k,
                        m,
                        n,
                        &ad[ao..ao + m * k],
                        true,
                        &g[t * m * n..(t + 1) * m * n],
                        false,
                        &mut gb[bo..bo + k * n],
                        true,
                    );
                }
            });
        }
        &Op::Transpose { x, batch, rows, cols } => accumulate(nodes, grads, x, |gx| {
            for t in 0..batch {
                let o = t * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        gx[o + r * cols + c] += g[o + c * rows + r];
                    }
                }
            }
        }),
        &Op::Reshape { x } => accumulate(nodes, grads, x, |gx| add_into(gx, g)),
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, |ga| add_into(ga, g));
            accumulate(nodes, grads, b, |gb| {
                for chunk in g.chunks(gb.len()) {
                    add_into(gb, chunk);
                }
            });
        }
        &Op::Mul { a, b } => {
            let ad = &nodes[a.0].value.data;
            let bd = &nodes[b.0].value.data;
            let blen = bd.len();
            accumulate(nodes, grads, a, |ga| {
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * bd[i % blen];
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % blen] += gi * ad[i];
                }
            });
        }
        &Op::Relu { x } => {
            let xd = &nodes[x.0].value.data;
            accumulate(nodes, grads, x, |gx| {
                for i in 0..gx.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            });
        }
        &Op::Scale { x, factor } => accumulate(nodes, grads, x, |gx| {
            for (a, b) in gx.iter_mut().zip(g) {
                *a += b * factor;
            }
        }),
        &Op::ScaleByElement { x, s, idx } => {
            let factor = nodes[s.0].value.data[idx];
            let xd = &nodes[x.0].value.data;
            accumulate(nodes, grads, x, |gx| {
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b * factor;
                }
            });
            accumulate(nodes, grads, s, |gs| {
                gs[idx] += g.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
            });
        }
        &Op::Sum { x } => accumulate(nodes, grads, x, |gx| {
            for a in gx.iter_mut() {
                *a += g[0];
            }
        }),
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) =
                axis_split("softmax", &out.shape, axis).expect("validated in forward");
            let y = &out.data;
            accumulate(nodes, grads, x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let dot: f64 = (0..len).map(|a| y[at(a)] * g[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            inv_std,
        } => {
            let (outer, len, inner) =
                axis_split("layernorm", &out.shape, *axis).expect("validated in forward");
            let gd = &nodes[gain.0].value.data;
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| o * len * inner + a * inner + i;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for a in 0..len {
                            let d = g[at(a)] * gd[a];
                            mean_d += d;
                            mean_dx += d * xhat[at(a)];
                        }
                        mean_d /= len as f64;
                        mean_dx /= len as f64;
                        let is = inv_std[o * inner + i];
                        for a in 0..len {
                            let d = g[at(a)] * gd[a];
                            gx[at(a)] += is * (d - mean_d - xhat[at(a)] * mean_dx);
                        }
                    }
                }
            });
            accumulate(nodes, grads, *gain, |gg| {
                for (idx, gi) in g.iter().enumerate() {
                    gg[(idx / inner) % len] += gi * xhat[idx];
                }
            });
            accumulate(nodes, grads, *bias, |gb| {
                for (idx, gi) in g.iter().enumerate() {
                    gb[(idx / inner) % len] += gi;
                }
            });
        }
        Op::Embed { table, ids } => {
            let width = out.cols();
            accumulate(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                }
            });
        }
        Op::Dropout { x, mask } => accumulate(nodes, grads, *x, |gx| {
            for i in 0..gx.len() {
                gx[i] += g[i] * mask[i];
            }
        }),
        Op::MaskFill { x, mask } => accumulate(nodes, grads, *x, |gx| {
            for i in 0..gx.len() {
                if !mask[i] {
                    gx[i] += g[i];
                }
            }
        }),
        &Op::SliceCols { x, start } => {
            let cols = nodes[x.0].value.cols();
            let len = out.cols();
            accumulate(nodes, grads, x, |gx| {
                for (r, chunk) in g.chunks(len).enumerate() {
                    add_into(&mut gx[r * cols + start..r * cols + start + len], chunk);
                }
            });
        }
        Op::ConcatCols { xs } => {
            let total = out.cols();
            let mut offset = 0;
            for &x in xs {
                let c = nodes[x.0].value.cols();
                accumulate(nodes, grads, x, |gx| {
                    for (r, chunk) in gx.chunks_mut(c).enumerate() {
                        add_into(chunk, &g[r * total + offset..r * total + offset + c]);
                    }
                });
                offset += c;
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            pairs,
            probs,
        } => super::attention::attention_backward(nodes, grads, g, *q, *k, *v, *heads, pairs, probs),
        Op::SmoothedCe {
            logits,
            rows,
            eps,
            probs,
        } => {
            let vocab = nodes[logits.0].value.cols();
            let count = rows.iter().filter(|t| t.is_some()).count() as f64;
            let (on, off) = smoothing_masses(vocab, *eps);
            let scale = g[0] / count;
            accumulate(nodes, grads, *logits, |gl| {
                for (r, t) in rows.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..vocab {
                        let q = if c == t { on } else { off };
                        gl[r * vocab + c] += scale * (probs[r * vocab + c] - q);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
