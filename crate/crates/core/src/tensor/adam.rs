use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 0.008;

    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: impl IntoIterator<Item = usize>, lr: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (alloc::vec![0.0; n], alloc::vec![0.0; n])).unzip();
        AdamState { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v }
    }
}

/// One Adam update of `params` with `grads`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(alloc::format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(Error::Shape(alloc::format!("parameter {i}: size mismatch")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new([3], 0.008);
        adam_step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g| + eps).
        for g in [3.0, -0.25, 1e-3] {
            let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
            let mut s = AdamState::new([1], AdamState::DEFAULT_LR);
            adam_step(&mut [&mut p], &[&[g]], &mut s).unwrap();
            let expected = -0.008 * g / (g.abs() + 1e-8);
            assert!((p.data()[0] - expected).abs() < 1e-15);
            assert!((p.data()[0].abs() - 0.008).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_histories_update_identically() {
        let mut a = Tensor::new(vec![2], vec![0.3, 0.3]).unwrap();
        let mut s = AdamState::new([2], 0.01);
        for g in [0.5, -1.0, 2.0, 0.1] {
            adam_step(&mut [&mut a], &[&[g, g]], &mut s).unwrap();
        }
        assert_eq!(a.data()[0], a.data()[1]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(vec![2]);
        let mut s = AdamState::new([2], 0.01);
        assert!(adam_step(&mut [&mut p], &[&[1.0]], &mut s).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut s).is_err());
    }
}
