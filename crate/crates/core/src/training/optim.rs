use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn new(like: &Tensor) -> Self {
        AdamState {
            m: Tensor::zeros(like.shape()),
            v: Tensor::zeros(like.shape()),
        }
    }
}

/// One Adam update of `param` in place. `t` is the 1-based step count used
/// for bias correction.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64, t: u64) -> Result<()> {
    param.expect_same_shape(grad, "adam_step")?;
    param.expect_same_shape(&state.m, "adam_step")?;
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        *p -= lr * mh / (vh.sqrt() + EPS);
    }
    Ok(())
}

/// `lr_min + (lr_init - lr_min) (1 + cos(pi iter / total)) / 2`.
pub fn cosine_lr(iter: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { (iter.min(total)) as f64 / total as f64 };
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * frac).cos())
}

/// Adam over an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub states: Vec<AdamState>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Adam {
            states: params.iter().map(AdamState::new).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return shape_err(
                "Adam::step",
                format!(
                    "{} params, {} grads, {} states",
                    params.len(),
                    grads.len(),
                    self.states.len()
                ),
            );
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        self.t += 1;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s, lr, self.t)?;
        }
        Ok(())
    }

    /// Moment tensors named after their parameters, for checkpoints.
    pub fn to_records(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * names.len() + 1);
        for (name, s) in names.iter().zip(&self.states) {
            out.push((format!("adam.m/{name}"), s.m.clone()));
            out.push((format!("adam.v/{name}"), s.v.clone()));
        }
        out.push(("adam.t".into(), Tensor::scalar(self.t as f64)));
        out
    }

    /// Restores state from records written by [`Adam::to_records`].
    pub fn from_records(names: &[String], params: &[Tensor], records: &[(String, Tensor)]) -> Result<Self> {
        let find = |key: String| records.iter().find(|(n, _)| *n == key).map(|(_, t)| t.clone());
        let mut adam = Adam::new(params);
        for ((name, s), p) in names.iter().zip(&mut adam.states).zip(params) {
            let (Some(m), Some(v)) = (find(format!("adam.m/{name}")), find(format!("adam.v/{name}"))) else {
                return Err(Error::Malformed(format!("optimizer state for {name} missing")));
            };
            p.expect_same_shape(&m, "Adam::from_records")?;
            p.expect_same_shape(&v, "Adam::from_records")?;
            *s = AdamState { m, v };
        }
        adam.t = find("adam.t".into()).map_or(0, |t| t.data()[0] as u64);
        Ok(adam)
    }
}
