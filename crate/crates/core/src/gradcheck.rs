//! Finite-difference verification of reverse-mode gradients with the
//! fourth-order central stencil
//! `(-L(x+2h) + 8 L(x+h) - 8 L(x-h) + L(x-2h)) / 12h`.
//!
//! The closure must be deterministic: with dropout active, or any other
//! source of randomness per call, the reported error is meaningless.
//!
//! Relative error is undefined where the true gradient is zero (key biases
//! under softmax, for one). A coordinate whose analytic and numeric values
//! both fall under the rounding noise of a central difference,
//! `64 eps max(1, |L|) / h`, is counted as an exact zero instead of being
//! scored.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Largest relative error found for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` was observed.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates treated as exact zeros.
    pub zero_coords: usize,
    pub numel: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    /// Magnitude below which both gradients count as zero.
    pub zero_tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the gradient of `loss_fn` from [`Graph::backward`] against
/// the five-point central difference with step `h` on every coordinate of every named
/// parameter.
///
/// `loss_fn` receives a fresh graph and one leaf per parameter (in the
/// order given) and must return a scalar loss node.
pub fn finite_diff_check<S, F>(
    params: &mut [(String, Tensor<S>)],
    h: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");

    let analytic: Vec<Tensor<S>> = {
        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
        let loss = loss_fn(&mut g, &leaves)?;
        g.backward(loss)?;
        leaves
            .iter()
            .map(|&v| g.grad(v).expect("leaf requires grad").clone())
            .collect()
    };

    let mut eval = |params: &[(String, Tensor<S>)]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let loss = loss_fn(&mut g, &leaves)?;
        Ok(g.value(loss).data()[0].to_f64_lossy())
    };

    let base = eval(params)?;
    let zero_tolerance = 64.0 * S::epsilon().to_f64_lossy() * base.abs().max(1.0) / h;
    let mut per_param = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut worst = ParamError {
            name: params[p].0.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            zero_coords: 0,
            numel: params[p].1.numel(),
        };
        for i in 0..params[p].1.numel() {
            let orig = params[p].1.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                params[p].1.data_mut()[i] = orig + S::from_f64_lossy(offset);
                eval(params)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            params[p].1.data_mut()[i] = orig;

            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic[p].data()[i].to_f64_lossy();
            if a.abs() <= zero_tolerance && numeric.abs() <= zero_tolerance {
                worst.zero_coords += 1;
                continue;
            }
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || !err.is_finite() {
                worst.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport { per_param, zero_tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let mut params = vec![(
            "x".to_string(),
            Tensor::<f64>::from_f64(&[4], &[0.5, -1.25, 2.0, 3.5]).unwrap(),
        )];
        let report = finite_diff_check(&mut params, 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        // the stencil is exact on quadratics up to rounding
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }
}
