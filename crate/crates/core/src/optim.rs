//! Adam with bias correction and a warmup-then-linear-decay schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate at `step`: linear ramp from 0 to `peak` over the first
/// `warmup_fraction * total_steps` steps, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    assert!(total_steps >= 1);
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_fraction * total;
    if step < warmup {
        peak * step / warmup
    } else {
        peak * (total - step) / (total - warmup)
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![S::zero(); p.numel()], vec![S::zero(); p.numel()]))
            .unzip();
        Self { config, step: 0, m, v }
    }
}

/// One Adam update. A `None` gradient leaves that parameter and its
/// moments untouched.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Option<&Tensor<S>>],
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), grads.len()],
            &[state.m.len()],
        ));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
    let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
    let step_size = S::from_f64_lossy(lr / bc1);
    let bc2_sqrt = S::from_f64_lossy(bc2.sqrt());
    let eps = S::from_f64_lossy(c.eps);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.shape() != p.shape() || state.m[i].len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let denom = vi.sqrt() / bc2_sqrt + eps;
            *w -= step_size * *mi / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 1e-3, 0.1), 0.0);
        assert_eq!(lr_at(100, 100, 1e-3, 0.1), 0.0);
        assert!((lr_at(10, 100, 1e-3, 0.1) - 1e-3).abs() < 1e-18);
        assert_eq!(lr_at(0, 100, 1e-3, 0.0), 1e-3);
    }

    #[test]
    fn schedule_midpoint_of_decay() {
        // warmup ends at 0.1 T; 0.55 T is halfway down the decay segment
        let lr = lr_at(550, 1000, 2e-3, 0.1);
        assert!((lr - 1e-3).abs() < 1e-12, "{lr}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        assert!(adam_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).is_err());
    }
}
