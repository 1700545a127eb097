//! Central finite-difference gradient checking.
//!
//! The numerical side only ever reads forward values, so it stays
//! independent of the reverse pass it is checking.

use crate::error::Result;
use crate::tape::{norm, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Bound on `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`
    /// evaluated per input tensor.
    pub rel_tol: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-6, rel_tol: 1e-4, floor: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub index: usize,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub rel_tol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.rel_error <= self.rel_tol)
    }
}

/// Evaluate `f` (which must return a single-element node) at `inputs`.
pub fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Central differences of `f` with respect to every element of every input.
pub fn numerical_gradients<F>(inputs: &[Tensor], eps: f64, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = probe[i].data[j];
            probe[i].data[j] = orig + eps;
            let plus = eval_scalar(&probe, f)?;
            probe[i].data[j] = orig - eps;
            let minus = eval_scalar(&probe, f)?;
            probe[i].data[j] = orig;
            *gj = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Analytic gradients of `f` via the tape.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);
    Ok(vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zero(*v, t.len())).collect())
}

/// Compare analytic and numerical gradients of `f` for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numerical_gradients(inputs, cfg.eps, &f)?;
    let inputs = analytic
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(index, (a, n))| {
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            let (na, nn) = (norm(a), norm(n));
            InputReport {
                index,
                rel_error: norm(&diff) / na.max(nn).max(cfg.floor),
                analytic_norm: na,
                numeric_norm: nn,
            }
        })
        .collect();
    Ok(GradReport { rel_tol: cfg.rel_tol, inputs })
}

/// Like [`check_gradients`] but differencing at most `max_coords` evenly
/// spaced elements per input; the relative error is taken over those
/// elements. Keeps checks of large parameter sets affordable.
pub fn check_gradients_sampled<F>(inputs: &[Tensor], cfg: GradCheck, max_coords: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut probe = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (index, a) in analytic.iter().enumerate() {
        let n = inputs[index].len();
        let k = max_coords.clamp(1, n.max(1));
        let coords: Vec<usize> = (0..k).map(|i| i * n / k).collect();
        let (mut an, mut nu) = (Vec::with_capacity(k), Vec::with_capacity(k));
        for &j in &coords {
            let orig = probe[index].data[j];
            probe[index].data[j] = orig + cfg.eps;
            let plus = eval_scalar(&probe, &f)?;
            probe[index].data[j] = orig - cfg.eps;
            let minus = eval_scalar(&probe, &f)?;
            probe[index].data[j] = orig;
            an.push(a[j]);
            nu.push((plus - minus) / (2.0 * cfg.eps));
        }
        let diff: Vec<f64> = an.iter().zip(&nu).map(|(x, y)| x - y).collect();
        let (na, nn) = (norm(&an), norm(&nu));
        reports.push(InputReport {
            index,
            rel_error: norm(&diff) / na.max(nn).max(cfg.floor),
            analytic_norm: na,
            numeric_norm: nn,
        });
    }
    Ok(GradReport { rel_tol: cfg.rel_tol, inputs: reports })
}
