//! Adam with decoupled weight decay.

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || -> Vec<Tensor> {
            params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update. Weight decay shrinks each parameter by `lr * weight_decay`
/// before the adaptive step. No parameter changes if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    if !(weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(Error::Config(format!("weight decay {weight_decay} must be finite and >= 0")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((id, name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() || state.m[id.index()].shape() != p.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient for parameter `{name}`")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - BETA1.powi(t);
    let bias2 = 1.0 - BETA2.powi(t);
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let i = id.index();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.value_mut(id).data_mut();
        for j in 0..p.len() {
            p[j] -= lr * weight_decay * p[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut s = scalar_store(1.25);
        let mut st = AdamState::new(&s);
        for _ in 0..10 {
            adam_step(&mut s, &[Tensor::scalar(0.0)], &mut st, 0.005, 0.0).unwrap();
        }
        assert_eq!(s.values()[0].item(), 1.25);
        assert_eq!(st.step(), 10);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        for g in [2.0, -0.5] {
            let mut s = scalar_store(0.0);
            let mut st = AdamState::new(&s);
            for _ in 0..50 {
                adam_step(&mut s, &[Tensor::scalar(g)], &mut st, 0.01, 0.0).unwrap();
            }
            let w = s.values()[0].item();
            assert!(w * g < 0.0, "g={g} w={w}");
        }
    }

    #[test]
    fn quadratic_bowl_descends() {
        // Independent scalar simulation of f(w) = w^2: |w| must shrink
        // every one of the first 100 steps from w = 1.
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let mut prev = 1.0f64;
        for step in 0..100 {
            let w = s.values()[0].item();
            adam_step(&mut s, &[Tensor::scalar(2.0 * w)], &mut st, 0.005, 0.0).unwrap();
            let now = s.values()[0].item().abs();
            assert!(now < prev, "step {step}: {now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &[Tensor::scalar(f64::NAN)], &mut st, 0.005, 0.0).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.values()[0].item(), 1.0);
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn decay_is_applied_before_adaptive_step() {
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Tensor::scalar(0.0)], &mut st, 0.1, 0.5).unwrap();
        assert!((s.values()[0].item() - 1.9).abs() < 1e-15);
    }
}
