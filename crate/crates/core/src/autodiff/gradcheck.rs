//! Finite-difference gradient oracle: a fourth-order central stencil, or a
//! one-sided stencil when a kink (ReLU, max) falls inside the central one.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{MptError, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest change in slope across the stencil, relative to the gradient,
/// still treated as smooth.
pub const KINK_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `f` against finite
/// differences with step `h`. A failed comparison is reported, not raised.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                if with_grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(MptError::Contract(format!(
                "gradcheck needs a scalar function, got shape {:?}",
                g.shape(out)
            )));
        }
        Ok((g, out, vars))
    };

    let (mut g, out, vars) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let f0 = {
        let (g, o, _) = eval(inputs, false)?;
        g.value(o).item()
    };
    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        let mut rep = InputReport {
            index: idx,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: 0,
        };
        for (e, &analytic) in grad.iter().enumerate() {
            let orig = work[idx].data[e];
            let mut at = |k: f64| -> Result<f64> {
                work[idx].data[e] = orig + k * h;
                let (g, o, _) = eval(&work, false)?;
                Ok(g.value(o).item())
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            let central = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let bend_right = (p2 - 2.0 * p1 + f0) / h;
            let bend_left = (f0 - 2.0 * m1 + m2) / h;
            let numeric = if (bend_right - bend_left).abs() <= KINK_TOL * central.abs().max(1.0) {
                central
            } else {
                // a kink lies within the stencil: differentiate on the smooth side
                let dir = if bend_right.abs() <= bend_left.abs() { 1.0 } else { -1.0 };
                let (q3, q4) = (at(3.0 * dir)?, at(4.0 * dir)?);
                let (q1, q2) = if dir > 0.0 { (p1, p2) } else { (m1, m2) };
                dir * (-25.0 * f0 + 48.0 * q1 - 36.0 * q2 + 16.0 * q3 - 3.0 * q4) / (12.0 * h)
            };
            work[idx].data[e] = orig;
            let rel = relative_error(analytic, numeric);
            rep.max_abs_err = rep.max_abs_err.max((analytic - numeric).abs());
            if rel > rep.max_rel_err || rel.is_nan() {
                rep.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                rep.worst = e;
            }
        }
        reports.push(rep);
    }
    let passed = reports.iter().all(|r| r.max_rel_err <= tol);
    Ok(GradcheckReport {
        inputs: reports,
        tol,
        passed,
    })
}
