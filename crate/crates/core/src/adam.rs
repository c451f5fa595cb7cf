//! Adam with bias correction. The learning rate lives in the state and is
//! set by the caller each step; this module applies no schedule of its own.

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

pub fn adam_step(params: &mut ModelParams, opt: &mut OptState, grads: &[f64]) -> Result<()> {
    let n = params.len();
    if grads.len() != n || opt.first_moment.len() != n || opt.second_moment.len() != n {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, moments {}/{}",
            n,
            grads.len(),
            opt.first_moment.len(),
            opt.second_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let values = params.values_mut();
    for i in 0..n {
        let g = grads[i];
        let m = opt.beta1 * opt.first_moment[i] + (1.0 - opt.beta1) * g;
        let v = opt.beta2 * opt.second_moment[i] + (1.0 - opt.beta2) * g * g;
        opt.first_moment[i] = m;
        opt.second_moment[i] = v;
        values[i] -= opt.lr * (m / c1) / ((v / c2).sqrt() + opt.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchDescriptor, ConvLayer};

    fn scalar_params(w: f64) -> ModelParams {
        // 1x1 conv from 1 channel to 2 classes has 4 parameters; only the
        // first is exercised by these tests.
        let arch = ArchDescriptor::new(vec![ConvLayer {
            in_channels: 1,
            out_channels: 2,
            kernel: 1,
        }])
        .unwrap();
        ModelParams::new(arch, vec![w, 0.0, 0.0, 0.0], 0).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_params(0.7);
        let mut opt = OptState::new(4, 1e-3);
        adam_step(&mut p, &mut opt, &[0.0; 4]).unwrap();
        assert_eq!(p.values()[0], 0.7);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, 0.5, 40.0] {
            let mut p = scalar_params(0.0);
            let mut opt = OptState::new(4, 1e-2);
            adam_step(&mut p, &mut opt, &[g, 0.0, 0.0, 0.0]).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expect = -1e-2 * g / (g + DEFAULT_EPSILON);
            assert!((p.values()[0] - expect).abs() < 1e-15);
            assert!((p.values()[0] + 1e-2).abs() < 1e-7);
        }
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut p = scalar_params(1.0);
        let mut opt = OptState::new(4, 1e-2);
        for _ in 0..500 {
            let w = p.values()[0];
            adam_step(&mut p, &mut opt, &[2.0 * w, 0.0, 0.0, 0.0]).unwrap();
        }
        assert!(p.values()[0].abs() < 0.1, "w = {}", p.values()[0]);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = scalar_params(1.0);
        let mut opt = OptState::new(4, 1e-2);
        assert!(matches!(adam_step(&mut p, &mut opt, &[f64::NAN, 0.0, 0.0, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(adam_step(&mut p, &mut opt, &[0.0; 3]), Err(Error::Shape(_))));
        assert_eq!(opt.step, 0);
    }
}
