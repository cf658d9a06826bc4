//! Central finite-difference gradient checking.
//!
//! Only forward evaluation is used to build the numeric estimate, so the check
//! stays independent of the backward rules it validates.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` for each input,
    /// restricted to the probed coordinates; zero when both norms are below `1e-10`.
    pub relative_errors: Vec<f64>,
    pub probed: usize,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Checks every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_gradients_at(inputs, &coords, step, f)
}

/// Checks the listed coordinates of each input (`coords[i]` indexes `inputs[i]`).
pub fn check_gradients_at<F>(inputs: &[Tensor<f64>], coords: &[Vec<usize>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probed = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, idx) in coords.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &k in idx {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = eval(&work, &f)?;
            work[i].data_mut()[k] = orig - step;
            let minus = eval(&work, &f)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            probed += 1;
        }
        let scale = na.sqrt().max(nn.sqrt());
        relative_errors.push(if scale < 1e-10 { 0.0 } else { diff.sqrt() / scale });
    }
    Ok(GradCheck {
        relative_errors,
        probed,
    })
}
