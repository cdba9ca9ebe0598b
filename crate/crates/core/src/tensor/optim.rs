use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::array::Tensor;
use super::params::{Grads, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f32,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn sgd(lr: f32) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f32) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        assert!(lr >= 0.0 && lr.is_finite(), "learning rate must be finite and ≥ 0");
        OptimizerState {
            kind,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }
}

/// Apply one update and return the new parameter value. Frozen tensors are
/// copied unchanged; every trainable tensor needs a gradient of its shape.
pub fn optimizer_step(
    params: &ModelParams,
    grads: &Grads,
    state: &mut OptimizerState,
) -> Result<ModelParams> {
    for name in params.trainable_names() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let p = params.get(name).expect("name comes from params");
        if g.shape() != p.shape() {
            return Err(Error::invalid(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = state.lr;
    let mut out = params.clone();
    let names: Vec<String> = params.trainable_names().cloned().collect();
    for name in names {
        let g = grads.get(&name).expect("checked above").data();
        let p = out.tensor_mut(&name).expect("name comes from params");
        match state.kind {
            OptimizerKind::Sgd => {
                for (w, gi) in p.data_mut().iter_mut().zip(g) {
                    *w -= lr * gi;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = state
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                let v = state
                    .second
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                let bc1 = 1.0 - (beta1 as f64).powi(t);
                let bc2 = 1.0 - (beta2 as f64).powi(t);
                for (((w, gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let mhat = *mi as f64 / bc1;
                    let vhat = *vi as f64 / bc2;
                    *w -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("p", Tensor::scalar(v));
        p
    }

    fn grad(v: f32) -> Grads {
        let mut g = Grads::default();
        g.0.insert("p".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn sgd_zero_rate_is_identity() {
        let p = one(1.25);
        let out = optimizer_step(&p, &grad(3.0), &mut OptimizerState::sgd(0.0)).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn sgd_step_hand_value() {
        let out = optimizer_step(&one(1.0), &grad(2.0), &mut OptimizerState::sgd(0.005)).unwrap();
        assert!((out.get("p").unwrap().item() - 0.99).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr_for_any_gradient_scale() {
        // m̂ = g, v̂ = g², so |Δ| = lr·|g|/(|g|+eps)
        for g in [1e-3f32, 0.5, 7.0, 1e4] {
            let mut st = OptimizerState::adam(1e-3);
            let out = optimizer_step(&one(0.0), &grad(g), &mut st).unwrap();
            let delta = out.get("p").unwrap().item().abs() as f64;
            let expect = 1e-3 * g as f64 / (g as f64 + 1e-8);
            assert!((delta - expect).abs() < 1e-9, "g={g}: {delta}");
        }
    }

    #[test]
    fn adam_zero_gradient_moves_within_moment_bound() {
        let (b1, b2) = (0.9f64, 0.999f64);
        let lr = 1e-3;
        let mut st = OptimizerState::adam(lr as f32);
        let mut p = one(0.0);
        let mut seq = vec![0.3f32, -2.0, 5.0, 0.01, 1.0];
        seq.push(0.0);
        for (i, g) in seq.iter().enumerate() {
            let next = optimizer_step(&p, &grad(*g), &mut st).unwrap();
            if *g == 0.0 {
                let t = (i + 1) as i32;
                let gamma = b1 * b1 / b2;
                let bound = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t)) * (1.0 - b1)
                    / (1.0 - b2).sqrt()
                    / (1.0 - gamma).sqrt();
                let delta = (next.get("p").unwrap().item() - p.get("p").unwrap().item()).abs();
                assert!((delta as f64) <= bound, "{delta} > {bound}");
            }
            p = next;
        }
        // fresh state: exact no-op
        let fresh = optimizer_step(&one(2.0), &grad(0.0), &mut OptimizerState::adam(0.1)).unwrap();
        assert_eq!(fresh.get("p").unwrap().item(), 2.0);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let err = optimizer_step(&one(1.0), &Grads::default(), &mut OptimizerState::sgd(0.1));
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "p"));
    }

    #[test]
    fn frozen_tensors_untouched_and_need_no_gradient() {
        let mut p = one(1.0);
        p.insert("q", Tensor::scalar(5.0));
        p.freeze_prefix("q");
        let out = optimizer_step(&p, &grad(1.0), &mut OptimizerState::adam(0.1)).unwrap();
        assert_eq!(out.get("q").unwrap().item(), 5.0);
        assert_ne!(out.get("p").unwrap().item(), 1.0);
    }
}
