//! Gradient-descent and Adam parameter updates.
//!
//! Both optimizers consume gradients keyed by parameter name and update a
//! [`ParamStore`] in place. Adam keeps per-parameter moment tensors and a
//! step counter that advances by exactly one per [`Optimizer::step`].

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSlot {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    slots: Vec<MomentSlot>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[MomentSlot] {
        &self.slots
    }

    /// Restore serialized optimizer state. Slot shapes are validated on the
    /// next `step` against the gradients they are paired with.
    pub fn restore(&mut self, step: u64, slots: Vec<MomentSlot>) {
        self.step = step;
        self.slots = slots;
    }

    /// Apply one update over every `(name, gradient)` pair. Each named
    /// parameter must exist and match its gradient's shape.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, grad) in grads {
                    let entry = params.get_mut(name)?;
                    check_same_shape(name, &entry.value, grad)?;
                    for (p, g) in entry.value.data_mut().iter_mut().zip(grad.data()) {
                        *p -= self.learning_rate * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for (name, grad) in grads {
                    let entry = params.get_mut(name)?;
                    check_same_shape(name, &entry.value, grad)?;
                    let slot = slot_index(&mut self.slots, name, grad)?;
                    let gd = grad.data();
                    let md = slot.m.data_mut();
                    let vd = slot.v.data_mut();
                    let pd = entry.value.data_mut();
                    for i in 0..gd.len() {
                        let g = gd[i];
                        md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g;
                        vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = md[i] / bc1;
                        let v_hat = vd[i] / bc2;
                        pd[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_same_shape(name: &str, param: &Tensor, grad: &Tensor) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            "optimizer step",
            format!(
                "parameter {name:?} has shape {:?} but gradient has shape {:?}",
                param.shape(),
                grad.shape()
            ),
        ));
    }
    Ok(())
}

fn slot_index<'a>(
    slots: &'a mut Vec<MomentSlot>,
    name: &str,
    grad: &Tensor,
) -> Result<&'a mut MomentSlot> {
    if let Some(i) = slots.iter().position(|s| s.name == name) {
        if slots[i].m.shape() != grad.shape() {
            return Err(Error::shape(
                "optimizer step",
                format!(
                    "moment for {name:?} has shape {:?} but gradient has shape {:?}",
                    slots[i].m.shape(),
                    grad.shape()
                ),
            ));
        }
        return Ok(&mut slots[i]);
    }
    slots.push(MomentSlot {
        name: name.to_string(),
        m: Tensor::zeros(grad.shape()),
        v: Tensor::zeros(grad.shape()),
    });
    let last = slots.len() - 1;
    Ok(&mut slots[last])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    fn store(value: Tensor) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", value, ParamGroup::Shared).unwrap();
        p
    }

    fn grad(value: Tensor) -> Vec<(String, Tensor)> {
        vec![("w".to_string(), value)]
    }

    #[test]
    fn sgd_zero_rate_is_identity() {
        let mut p = store(Tensor::new(vec![3], vec![1.0, -2.0, 3.5]).unwrap());
        let before = p.get("w").unwrap().value.clone();
        let mut opt = Optimizer::sgd(0.0);
        opt.step(&mut p, &grad(Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap()))
            .unwrap();
        assert_eq!(p.get("w").unwrap().value, before);
    }

    #[test]
    fn sgd_scalar_update() {
        let mut p = store(Tensor::scalar(1.0));
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut p, &grad(Tensor::scalar(2.0))).unwrap();
        assert!((p.get("w").unwrap().value.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_quadratic_converges_geometrically() {
        // f(x) = x² has gradient 2x, so x_{k+1} = (1−2γ)·x_k exactly.
        let gamma = 0.2;
        let x0 = 3.0;
        let mut p = store(Tensor::scalar(x0));
        let mut opt = Optimizer::sgd(gamma);
        for k in 1..=20u32 {
            let x = p.get("w").unwrap().value.item();
            opt.step(&mut p, &grad(Tensor::scalar(2.0 * x))).unwrap();
            let expect = x0 * (1.0 - 2.0 * gamma).powi(k as i32);
            assert!(
                (p.get("w").unwrap().value.item() - expect).abs() < 1e-12,
                "step {k}"
            );
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // With zero moments, m̂ = g and v̂ = g², so the first update is
        // γ·g/(|g|+ε) for every nonzero gradient magnitude.
        for &g in &[1e-4, 0.5, 3.0, 1e4] {
            let mut p = store(Tensor::scalar(0.0));
            let mut opt = Optimizer::adam(1e-3);
            opt.step(&mut p, &grad(Tensor::scalar(g))).unwrap();
            let moved = p.get("w").unwrap().value.item().abs();
            let expect = 1e-3 * g / (g + ADAM_EPS);
            assert!((moved - expect).abs() < 1e-15, "g = {g}");
            assert!((moved - 1e-3).abs() < 1e-6, "g = {g}");
        }
    }

    #[test]
    fn adam_zero_gradient_never_moves() {
        let mut p = store(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let before = p.get("w").unwrap().value.clone();
        let mut opt = Optimizer::adam(0.01);
        for _ in 0..10 {
            opt.step(&mut p, &grad(Tensor::zeros(&[2]))).unwrap();
        }
        assert_eq!(p.get("w").unwrap().value, before);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn adam_matches_scalar_trace() {
        // Straight-line reference trace kept independent of the optimizer
        // internals.
        let grads = [2.0, -1.0, 0.5, 3.0, -0.25];
        let lr = 0.1;
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            expected.push(theta);
        }

        let mut p = store(Tensor::scalar(1.0));
        let mut opt = Optimizer::adam(lr);
        for (t, &g) in grads.iter().enumerate() {
            opt.step(&mut p, &grad(Tensor::scalar(g))).unwrap();
            let got = p.get("w").unwrap().value.item();
            assert!((got - expected[t]).abs() < 1e-12, "step {}", t + 1);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = store(Tensor::zeros(&[3]));
        let mut opt = Optimizer::sgd(0.1);
        let err = opt
            .step(&mut p, &grad(Tensor::zeros(&[4])))
            .unwrap_err()
            .to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let mut p = store(Tensor::zeros(&[1]));
        let mut opt = Optimizer::adam(0.1);
        let err = opt
            .step(&mut p, &[("nope".to_string(), Tensor::zeros(&[1]))])
            .unwrap_err()
            .to_string();
        assert!(err.contains("nope"), "{err}");
    }
}
