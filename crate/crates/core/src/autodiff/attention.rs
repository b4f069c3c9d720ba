//! Packed multi-head attention kernel.
//!
//! Queries, keys and values are flat `[tokens, width]` matrices holding many
//! sequences back to back. Each [`AttnPair`] names one query segment and the
//! key segment it reads; different pairs may share a key segment. Heads are
//! contiguous column blocks of width `width / heads`.

use super::graph::{accumulate, AttnPair, Graph, Node, Op, Var};
use crate::error::{MptError, Result};

impl Graph {
    /// Per pair and head: `softmax(Q Kᵀ / sqrt(d_k)) V`. With `causal`, query
    /// `i` only sees keys `j <= i` (pairs must then be square).
    pub fn packed_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pairs: &[AttnPair],
        causal: bool,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            return Err(MptError::dim("attention", "q, k, v must be rank 2"));
        }
        let (tq, dq) = (sq[0], sq[1]);
        let (tk, dk) = (sk[0], sk[1]);
        let dv = sv[1];
        if dq != dk || sv[0] != tk {
            return Err(MptError::dim(
                "attention",
                format!("q {sq:?}, k {sk:?}, v {sv:?} are inconsistent"),
            ));
        }
        if heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(MptError::dim(
                "attention",
                format!("widths {dq}/{dv} not divisible by {heads} heads"),
            ));
        }
        for p in pairs {
            if p.q_len == 0 || p.k_len == 0 || p.q_start + p.q_len > tq || p.k_start + p.k_len > tk {
                return Err(MptError::dim("attention", format!("segment {p:?} out of range")));
            }
            if causal && p.q_len != p.k_len {
                return Err(MptError::dim("attention", format!("causal pair {p:?} not square")));
            }
        }
        let hq = dq / heads;
        let hv = dv / heads;
        let scale = 1.0 / (hq as f64).sqrt();
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let mut out = vec![0.0; tq * dv];
        let mut probs = Vec::new();
        let mut row = Vec::new();
        for p in pairs {
            for h in 0..heads {
                for i in 0..p.q_len {
                    let qi = &qd[(p.q_start + i) * dq + h * hq..][..hq];
                    let visible = if causal { i + 1 } else { p.k_len };
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..visible {
                        let kj = &kd[(p.k_start + j) * dk + h * hq..][..hq];
                        let s = dot(qi, kj) * scale;
                        max = max.max(s);
                        row.push(s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let o = &mut out[(p.q_start + i) * dv + h * hv..][..hv];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s /= z;
                        let vj = &vd[(p.k_start + j) * dv + h * hv..][..hv];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += *s * vc;
                        }
                    }
                    probs.extend_from_slice(&row);
                    probs.extend(std::iter::repeat_n(0.0, p.k_len - visible));
                }
            }
        }
        Ok(self.push(
            vec![tq, dv],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                pairs: pairs.to_vec(),
                probs,
            },
        ))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    pairs: &[AttnPair],
    probs: &[f64],
) {
    let qv = &nodes[q.0].value;
    let kv = &nodes[k.0].value;
    let vv = &nodes[v.0].value;
    let (dq, dv) = (qv.cols(), vv.cols());
    let hq = dq / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hq as f64).sqrt();

    let mut gq = vec![0.0; qv.numel()];
    let mut gk = vec![0.0; kv.numel()];
    let mut gv = vec![0.0; vv.numel()];
    let mut dp = Vec::new();
    let mut offset = 0;
    for p in pairs {
        for h in 0..heads {
            for i in 0..p.q_len {
                let pi = &probs[offset..offset + p.k_len];
                offset += p.k_len;
                let go = &g[(p.q_start + i) * dv + h * hv..][..hv];
                dp.clear();
                for j in 0..p.k_len {
                    let vj = &vv.data[(p.k_start + j) * dv + h * hv..][..hv];
                    dp.push(dot(go, vj));
                    let gvj = &mut gv[(p.k_start + j) * dv + h * hv..][..hv];
                    for (a, b) in gvj.iter_mut().zip(go) {
                        *a += pi[j] * b;
                    }
                }
                let mean: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &qv.data[(p.q_start + i) * dq + h * hq..][..hq];
                let gqi_off = (p.q_start + i) * dq + h * hq;
                for j in 0..p.k_len {
                    let ds = pi[j] * (dp[j] - mean) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv.data[(p.k_start + j) * dq + h * hq..][..hq];
                    for c in 0..hq {
                        gq[gqi_off + c] += ds * kj[c];
                    }
                    let gkj = &mut gk[(p.k_start + j) * dq + h * hq..][..hq];
                    for (a, b) in gkj.iter_mut().zip(qi) {
                        *a += ds * b;
                    }
                }
            }
        }
    }
    for (var, contrib) in [(q, gq), (k, gk), (v, gv)] {
        accumulate(nodes, grads, var, |slot| {
            for (a, b) in slot.iter_mut().zip(&contrib) {
                *a += b;
            }
        });
    }
}
