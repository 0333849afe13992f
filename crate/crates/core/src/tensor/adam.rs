//! Adam with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step. Parameters without a gradient entry still receive
/// weight decay. A non-finite gradient rejects the whole step — no parameter
/// is touched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient for {name:?}; step rejected"
            )));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?} vs parameter {:?} for {name:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let zero_shape = params.get(&name)?.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&zero_shape));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&zero_shape));
        let p = params.get_mut(&name)?;
        let g = grads.get(&name);
        for i in 0..p.len() {
            let gi = g.map(|g| g.data()[i]).unwrap_or(0.0);
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * pi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_vec(vals.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params_unchanged() {
        let mut params = store_with("x", &[1.5, -0.5]);
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::from_vec(vec![0.0, 0.0]));
        for _ in 0..10 {
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        }
        assert_eq!(params.get("x").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_params_every_step() {
        let mut params = store_with("x", &[2.0, -3.0]);
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            lr: 1e-2,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let grads = BTreeMap::new(); // no entry → zero gradient
        let mut prev: Vec<f64> = params.get("x").unwrap().data().to_vec();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            let cur = params.get("x").unwrap().data().to_vec();
            for (p, c) in prev.iter().zip(&cur) {
                assert!(c.abs() < p.abs(), "decay must shrink magnitude");
                assert_eq!(c.signum(), p.signum());
            }
            prev = cur;
        }
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // f(x) = (x - 3)² / 2, ∇f = x - 3, minimum x* = 3
        let mut params = store_with("x", &[2.5]);
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            let x = params.get("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::from_vec(vec![x - 3.0]));
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        }
        let x = params.get("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 1e-2, "ended at {x}");
    }

    #[test]
    fn non_finite_gradient_rejects_step_untouched() {
        let mut params = store_with("x", &[1.0]);
        let mut state = AdamState::new();
        let cfg = AdamConfig::default();
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::from_vec(vec![f64::NAN]));
        let err = adam_step(&mut params, &grads, &mut state, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(params.get("x").unwrap().data(), &[1.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn first_step_magnitude_matches_bias_corrected_formula() {
        // With constant gradient g on step 1: mhat = g, vhat = g², so the
        // update is lr · g/(|g| + eps) ≈ lr · sign(g).
        let mut params = store_with("x", &[0.0]);
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::from_vec(vec![0.5]));
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let x = params.get("x").unwrap().data()[0];
        assert!((x + 1e-3).abs() < 1e-7, "first step {x}");
    }
}
