//! Central finite-difference checks for graph gradients.
//!
//! Each probe rebuilds the graph from perturbed inputs. Probes whose
//! perturbation crosses a non-differentiable branch (detected through
//! [`Graph::signature`]) retry with a halved step; coordinates that still
//! straddle a kink at `min_step` are counted as skipped.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub min_step: f64,
    pub rel_tol: f64,
    /// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Probe at most this many evenly spaced elements per tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, min_step: 1e-7, rel_tol: 1e-4, floor: 1e-3, max_per_tensor: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
    /// Analytic gradients per checked input, in `wrt` order.
    pub analytic: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor], wrt: &[usize], f: &F) -> Result<(f64, u64, Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if wrt.contains(&i) { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss).item();
    Ok((v, g.signature(), g, loss, vars))
}

/// Compares reverse-mode gradients of the scalar returned by `f` with central
/// differences, for every input listed in `wrt`.
pub fn check_gradients<F>(inputs: &[Tensor], wrt: &[usize], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, base_sig, mut g, loss, vars) = evaluate(inputs, wrt, &f)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|&i| g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]))
        .collect();
    drop(g);

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (slot, &i) in wrt.iter().enumerate() {
        let n = inputs[i].len();
        let probes: Vec<usize> = match cfg.max_per_tensor {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        for idx in probes {
            let x0 = inputs[i].data()[idx];
            let mut h = cfg.step;
            let numeric = loop {
                work[i].data_mut()[idx] = x0 + h;
                let (fp, sp, ..) = evaluate(&work, wrt, &f)?;
                work[i].data_mut()[idx] = x0 - h;
                let (fm, sm, ..) = evaluate(&work, wrt, &f)?;
                work[i].data_mut()[idx] = x0;
                if sp == base_sig && sm == base_sig {
                    break Some((fp - fm) / (2.0 * h));
                }
                h *= 0.5;
                if h < cfg.min_step {
                    break None;
                }
            };
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[slot][idx];
            let e = rel_err(a, numeric, cfg.floor);
            report.checked += 1;
            let m = Mismatch { input: i, index: idx, analytic: a, numeric, rel_err: e };
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(m.clone());
            }
            if e > cfg.rel_tol {
                report.failures.push(m);
            }
        }
    }
    report.analytic = analytic;
    Ok(report)
}

/// Central difference of a scalar function.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
