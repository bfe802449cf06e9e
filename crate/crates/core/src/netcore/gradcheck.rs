//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it audits. Coordinates whose `±eps` stencil crosses
//! a kink (a change in [`Graph::kink_signature`]) are not differentiable there
//! and are skipped.

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::NetError;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheck {
    /// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)` over
    /// the checked coordinates; zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.relative_error() < tol
    }
}

/// Check `d loss / d x` for a loss built from a single differentiable input.
pub fn check_gradient<F>(shape: &[usize], x0: &[f64], eps: f64, build: F) -> Result<GradCheck, NetError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NetError>,
{
    let indices: Vec<usize> = (0..x0.len()).collect();
    check_gradient_at(shape, x0, &indices, eps, build)
}

pub fn check_gradient_at<F>(
    shape: &[usize],
    x0: &[f64],
    indices: &[usize],
    eps: f64,
    build: F,
) -> Result<GradCheck, NetError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NetError>,
{
    let mut g = Graph::new();
    let x = g.variable(shape, x0.to_vec())?;
    let loss = build(&mut g, x)?;
    let signature = g.kink_signature();
    let grads = g.backward_only(loss)?;
    let full = grads.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x0.len()]);

    let eval = |xs: Vec<f64>| -> Result<(f64, u64), NetError> {
        let mut g = Graph::new();
        let x = g.variable(shape, xs)?;
        let loss = build(&mut g, x)?;
        Ok((g.scalar(loss), g.kink_signature()))
    };

    let mut report = GradCheck { analytic: Vec::new(), numeric: Vec::new(), checked: 0, skipped_kinks: 0 };
    for &i in indices {
        let mut plus = x0.to_vec();
        plus[i] += eps;
        let mut minus = x0.to_vec();
        minus[i] -= eps;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != signature || sm != signature {
            report.skipped_kinks += 1;
            continue;
        }
        report.analytic.push(full[i]);
        report.numeric.push((fp - fm) / (2.0 * eps));
        report.checked += 1;
    }
    Ok(report)
}

/// Check parameter gradients of `forward` for selected entries of `name`.
pub fn check_param_gradient<F>(
    params: &ParamSet,
    name: &str,
    indices: &[usize],
    eps: f64,
    forward: F,
) -> Result<GradCheck, NetError>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var, NetError>,
{
    let mut work = params.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let loss = forward(&mut g, &work)?;
    let signature = g.kink_signature();
    g.backward(loss, &mut work)?;
    let full = work
        .tensor(name)?
        .grad
        .clone()
        .unwrap_or_else(|| vec![0.0; params.tensor(name).map(|t| t.numel()).unwrap_or(0)]);

    let eval = |delta: f64, i: usize| -> Result<(f64, u64), NetError> {
        let mut p = params.clone();
        p.get_mut(name).ok_or_else(|| NetError::MissingParam(name.into()))?.tensor.data_mut()[i] += delta;
        let mut g = Graph::new();
        let loss = forward(&mut g, &p)?;
        Ok((g.scalar(loss), g.kink_signature()))
    };

    let mut report = GradCheck { analytic: Vec::new(), numeric: Vec::new(), checked: 0, skipped_kinks: 0 };
    for &i in indices {
        let (fp, sp) = eval(eps, i)?;
        let (fm, sm) = eval(-eps, i)?;
        if sp != signature || sm != signature {
            report.skipped_kinks += 1;
            continue;
        }
        report.analytic.push(full[i]);
        report.numeric.push((fp - fm) / (2.0 * eps));
        report.checked += 1;
    }
    Ok(report)
}
