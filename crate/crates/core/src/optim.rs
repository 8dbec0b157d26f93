//! AdamW with decoupled weight decay, a warmup + step-decay learning rate
//! schedule, and per-group learning rate multipliers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// Learning rate as a function of fractional epochs.
///
/// Linear ramp from zero over `warmup_epochs`, then `base_lr` decayed by
/// `decay_factor` every `decay_every` epochs counted from the end of warmup:
///
/// ```text
/// lr(e) = base · e / warmup                                 e < warmup
/// lr(e) = base · factor^floor((e − warmup) / decay_every)   e ≥ warmup
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub decay_every: f64,
    pub decay_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            warmup_epochs: 10.0,
            decay_every: 10.0,
            decay_factor: 0.1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config(format!(
                "opt.lr must be nonnegative, got {}",
                self.base_lr
            )));
        }
        if !(self.warmup_epochs.is_finite() && self.warmup_epochs >= 0.0) {
            return Err(Error::config("opt.warmup_epochs must be nonnegative"));
        }
        if !(self.decay_every.is_finite() && self.decay_every > 0.0) {
            return Err(Error::config("opt.decay_every must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("opt.decay_factor must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        let epoch = epoch.max(0.0);
        if epoch < self.warmup_epochs {
            return self.base_lr * epoch / self.warmup_epochs;
        }
        let decays = ((epoch - self.warmup_epochs) / self.decay_every).floor();
        self.base_lr * self.decay_factor.powf(decays)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First/second moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub t: u64,
    pub moments: Vec<Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &[&Parameter]) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                let n = p.value.data().len();
                Moments {
                    name: p.name.clone(),
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self { config, t: 0, moments }
    }
}

/// One AdamW update. Each parameter moves by
/// `−lr·multiplier·(m̂/(√v̂ + eps) + wd·θ)`, with `wd = 0` for parameters
/// that opt out of decay. Returns the applied per-coordinate updates.
///
/// Non-finite gradients abort the step before any state changes.
pub fn adamw_step(params: &mut [&mut Parameter], state: &mut OptimState, lr: f64) -> Result<Vec<Vec<f64>>> {
    if params.len() != state.moments.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} parameters but {} were given",
            state.moments.len(),
            params.len()
        )));
    }
    for (p, mo) in params.iter().zip(&state.moments) {
        if p.name != mo.name || p.value.data().len() != mo.m.len() {
            return Err(Error::invalid(format!(
                "optimizer state does not match parameter {}",
                p.name
            )));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {} at index {i}; step aborted",
                p.name
            )));
        }
    }

    let c = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let mut deltas = Vec::with_capacity(params.len());
    for (p, mo) in params.iter_mut().zip(state.moments.iter_mut()) {
        let lr_eff = lr * p.lr_multiplier;
        let wd = if p.decay { c.weight_decay } else { 0.0 };
        let mut delta = Vec::with_capacity(mo.m.len());
        let grads = p.grad.data().to_vec();
        for (((theta, g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grads)
            .zip(mo.m.iter_mut())
            .zip(mo.v.iter_mut())
        {
            let g = g as f64;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let old = *theta as f64;
            let d = -lr_eff * (m_hat / (v_hat.sqrt() + c.eps) + wd * old);
            *theta = (old + d) as f32;
            delta.push(d);
        }
        deltas.push(delta);
    }
    Ok(deltas)
}

/// Parameters whose name starts with `prefix` train at `lr_multiplier × lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub prefix: String,
    pub lr_multiplier: f64,
}

pub const DEFAULT_GROUPS: [(&str, &str); 4] = [
    ("fusion", "fusion."),
    ("adapter", "adapter."),
    ("queries", "queries."),
    ("projection", "projection."),
];

/// The standard groups with multipliers overridden from configuration.
pub fn default_groups(multipliers: &BTreeMap<String, f64>) -> Result<Vec<ParamGroup>> {
    for (name, &m) in multipliers {
        if !DEFAULT_GROUPS.iter().any(|(g, _)| g == name) {
            return Err(Error::config(format!(
                "unknown parameter group '{name}' in opt.group_multipliers"
            )));
        }
        if !(m.is_finite() && m >= 0.0) {
            return Err(Error::config(format!(
                "multiplier for group '{name}' must be nonnegative"
            )));
        }
    }
    Ok(DEFAULT_GROUPS
        .iter()
        .map(|&(name, prefix)| ParamGroup {
            name: name.to_string(),
            prefix: prefix.to_string(),
            lr_multiplier: multipliers.get(name).copied().unwrap_or(1.0),
        })
        .collect())
}

/// Assigns every parameter to exactly one group and sets its multiplier.
pub fn param_groups(params: &mut [&mut Parameter], groups: &[ParamGroup]) -> Result<()> {
    for p in params.iter_mut() {
        let mut hits = groups.iter().filter(|g| p.name.starts_with(&g.prefix));
        let group = hits
            .next()
            .ok_or_else(|| Error::config(format!("parameter {} is not assigned to any group", p.name)))?;
        if let Some(other) = hits.next() {
            return Err(Error::config(format!(
                "parameter {} matches groups {} and {}",
                p.name, group.name, other.name
            )));
        }
        p.lr_multiplier = group.lr_multiplier;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn scalar_param(name: &str, value: f32, grad: f32) -> Parameter {
        let mut p = Parameter::new(name, Matrix::from_vec(1, 1, vec![value]).unwrap());
        p.grad.data_mut()[0] = grad;
        p
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::default();
        assert_eq!(s.lr_at(0.0), 0.0);
        assert_eq!(s.lr_at(5.0), 1e-4);
        assert_eq!(s.lr_at(10.0), 2e-4);
        assert!((s.lr_at(25.0) - 2e-5).abs() < 1e-18);
        assert!((s.lr_at(35.0) - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn schedule_without_warmup_starts_at_base() {
        let s = Schedule {
            warmup_epochs: 0.0,
            ..Schedule::default()
        };
        assert_eq!(s.lr_at(0.0), 2e-4);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = scalar_param("fusion.w", 0.7, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(cfg, &[&p]);
        adamw_step(&mut [&mut p], &mut st, 0.1).unwrap();
        assert_eq!(p.value.data()[0], 0.7);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = scalar_param("fusion.w", 2.0, 0.0);
        let cfg = AdamWConfig {
            weight_decay: 1.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(cfg, &[&p]);
        let d = adamw_step(&mut [&mut p], &mut st, 0.1).unwrap();
        assert!((d[0][0] + 0.2).abs() < 1e-15);
        assert_eq!(p.value.data()[0], 1.8);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_param("fusion.w", 1.0, f32::NAN);
        let mut st = OptimState::new(AdamWConfig::default(), &[&p]);
        let err = adamw_step(&mut [&mut p], &mut st, 0.1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(st.t, 0);
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn groups_assign_multipliers() {
        let mut a = scalar_param("queries.block0", 1.0, 0.0);
        let mut b = scalar_param("fusion.w_res", 1.0, 0.0);
        let mults = BTreeMap::from([("queries".to_string(), 0.2)]);
        let groups = default_groups(&mults).unwrap();
        param_groups(&mut [&mut a, &mut b], &groups).unwrap();
        assert_eq!(a.lr_multiplier, 0.2);
        assert_eq!(b.lr_multiplier, 1.0);
    }

    #[test]
    fn unassigned_parameter_is_config_error() {
        let mut a = scalar_param("mystery.w", 1.0, 0.0);
        let groups = default_groups(&BTreeMap::new()).unwrap();
        assert!(matches!(param_groups(&mut [&mut a], &groups), Err(Error::Config(_))));
        let bad = BTreeMap::from([("backbone".to_string(), 0.2)]);
        assert!(default_groups(&bad).is_err());
    }

    #[test]
    fn zero_multiplier_freezes() {
        let mut p = scalar_param("queries.block0", 1.5, 3.0);
        p.lr_multiplier = 0.0;
        let mut st = OptimState::new(AdamWConfig::default(), &[&p]);
        adamw_step(&mut [&mut p], &mut st, 0.1).unwrap();
        assert_eq!(p.value.data()[0], 1.5);
    }
}
