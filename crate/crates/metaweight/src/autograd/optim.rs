//! Named parameter sets, gradient maps, and the two optimizers used across
//! the crate: differentiable SGD for inner-loop updates and Adam (with bias
//! correction) for everything trained the ordinary way.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::Tensor;

/// Named parameter tensors. BTreeMap keeps iteration deterministic.
pub type Params = BTreeMap<String, Tensor>;

/// Parameter name → gradient tensor of identical shape.
pub type GradientMap = BTreeMap<String, Tensor>;

/// Register every parameter as a differentiable leaf on `tape`.
pub fn watch(tape: &Tape, params: &Params) -> Params {
    params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v)))
        .collect()
}

/// Drop all record references, keeping values.
pub fn detach_all(params: &Params) -> Params {
    params
        .iter()
        .map(|(k, v)| (k.clone(), v.detach()))
        .collect()
}

/// Gradients of a scalar `loss` for every entry of `params`.
///
/// Parameters the loss does not depend on come back as zeros.
pub fn grad_map(
    tape: &Tape,
    loss: &Tensor,
    params: &Params,
    higher_order: bool,
) -> Result<GradientMap> {
    let wrt: Vec<&Tensor> = params.values().collect();
    let grads = tape.backward(loss, &wrt, higher_order)?;
    Ok(params
        .keys()
        .cloned()
        .zip(grads)
        .collect())
}

/// θ' = θ − lr·g for every parameter covered by `grads`.
///
/// With `differentiable` the update is recorded on `tape`, so a later loss on
/// θ' can be differentiated through the step (gradients of gradients
/// included, provided `grads` was built with `higher_order`).
pub fn sgd_step(
    tape: &Tape,
    params: &Params,
    grads: &GradientMap,
    lr: f64,
    differentiable: bool,
) -> Result<Params> {
    let mut out = Params::new();
    for (name, theta) in params {
        let updated = match grads.get(name) {
            Some(g) => {
                if !g.data().iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteGrad(name.clone()));
                }
                if g.shape() != theta.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "sgd_step",
                        lhs: theta.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if differentiable {
                    tape.sub(theta, &tape.scale(g, lr)?)?
                } else {
                    let data: Vec<f64> = theta
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(t, gv)| t - lr * gv)
                        .collect();
                    Tensor::from_vec(theta.shape().to_vec(), data)?
                }
            }
            None => theta.clone(),
        };
        out.insert(name.clone(), updated);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Arc<Vec<f64>>>,
    v: BTreeMap<String, Arc<Vec<f64>>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> AdamState {
        AdamState {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam step over the parameters covered by `grads`.
    /// Moments are created lazily per parameter. The step counter advances by
    /// exactly one per call.
    pub fn apply(&mut self, params: &Params, grads: &GradientMap) -> Result<Params> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut out = Params::new();
        for (name, theta) in params {
            let updated = match grads.get(name) {
                Some(g) => {
                    if g.shape() != theta.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "adam_step",
                            lhs: theta.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    if !g.data().iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFiniteGrad(name.clone()));
                    }
                    let n = theta.len();
                    let m_old = self.m.remove(name).unwrap_or_else(|| Arc::new(vec![0.0; n]));
                    let v_old = self.v.remove(name).unwrap_or_else(|| Arc::new(vec![0.0; n]));
                    let mut m_new = Vec::with_capacity(n);
                    let mut v_new = Vec::with_capacity(n);
                    let mut data = Vec::with_capacity(n);
                    for i in 0..n {
                        let gv = g.data()[i];
                        let mi = c.beta1 * m_old[i] + (1.0 - c.beta1) * gv;
                        let vi = c.beta2 * v_old[i] + (1.0 - c.beta2) * gv * gv;
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        let new = theta.data()[i] - c.lr * mhat / (vhat.sqrt() + c.eps);
                        if !new.is_finite() {
                            return Err(Error::NonFinite {
                                op: format!("adam_step({name})"),
                            });
                        }
                        m_new.push(mi);
                        v_new.push(vi);
                        data.push(new);
                    }
                    self.m.insert(name.clone(), Arc::new(m_new));
                    self.v.insert(name.clone(), Arc::new(v_new));
                    Tensor::from_vec(theta.shape().to_vec(), data)?
                }
                None => theta.clone(),
            };
            out.insert(name.clone(), updated);
        }
        Ok(out)
    }
}

pub fn grad_norm(grads: &GradientMap) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w".into(), Tensor::scalar(v));
        p
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let tape = Tape::new();
        let p = one_param(1.0);
        let mut g = GradientMap::new();
        g.insert("w".into(), Tensor::scalar(2.0));
        let out = sgd_step(&tape, &p, &g, 0.0, false).unwrap();
        assert_eq!(out["w"].item(), 1.0);
    }

    #[test]
    fn sgd_basic_arithmetic() {
        let tape = Tape::new();
        let p = one_param(1.0);
        let mut g = GradientMap::new();
        g.insert("w".into(), Tensor::scalar(2.0));
        let out = sgd_step(&tape, &p, &g, 0.1, false).unwrap();
        assert!((out["w"].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_fresh_state_leaves_params() {
        let mut st = AdamState::new(AdamConfig::with_lr(0.1));
        let p = one_param(3.0);
        let mut g = GradientMap::new();
        g.insert("w".into(), Tensor::scalar(0.0));
        let out = st.apply(&p, &g).unwrap();
        assert_eq!(out["w"].item(), 3.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With bias correction and |g| >> eps the first update is ≈ −lr·sign(g).
        let mut st = AdamState::new(AdamConfig::with_lr(0.01));
        let p = one_param(0.0);
        let mut g = GradientMap::new();
        g.insert("w".into(), Tensor::scalar(5.0));
        let out = st.apply(&p, &g).unwrap();
        assert!((out["w"].item() + 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_independent_recurrence_two_steps() {
        let cfg = AdamConfig::with_lr(0.05);
        let mut st = AdamState::new(cfg);
        let mut p = one_param(1.0);
        let gs = [0.7, -0.3];

        // Oracle: the published recurrence, coded independently.
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (t, gv) in gs.iter().enumerate() {
            let tt = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * gv;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * gv * gv;
            let mhat = m / (1.0 - cfg.beta1.powi(tt));
            let vhat = v / (1.0 - cfg.beta2.powi(tt));
            w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }

        for gv in gs {
            let mut g = GradientMap::new();
            g.insert("w".into(), Tensor::scalar(gv));
            p = st.apply(&p, &g).unwrap();
        }
        assert!((p["w"].item() - w).abs() < 1e-12);
    }
}
