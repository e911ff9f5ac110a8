//! Adam optimizer over named parameter subsets.
//!
//! A training run holds one `AdamState` per loss: each instance owns a fixed
//! set of parameter names and touches nothing else, which is how the task
//! loss and the confidence loss stay isolated while sharing one parameter
//! set. Moment buffers live here so checkpoints can serialize them.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tape::GradientMap;
use crate::tensor::ParameterSet;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("gradient for `{name}` has {got} elements, parameter has {want}")]
    LengthMismatch { name: String, got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bias-corrected Adam state over an owned subset of parameter names.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    /// Fresh state with zero moments for `names`, shaped after `params`.
    pub fn new<'a>(
        cfg: AdamConfig,
        params: &ParameterSet,
        names: impl IntoIterator<Item = &'a String>,
    ) -> Result<Self, OptimError> {
        let mut moments = BTreeMap::new();
        for name in names {
            let len = params.get(name)?.len();
            moments.insert(
                name.clone(),
                Moments { m: vec![0.0; len], v: vec![0.0; len] },
            );
        }
        Ok(AdamState { cfg, t: 0, moments })
    }

    /// Rebuild from checkpointed moments.
    pub fn from_parts(cfg: AdamConfig, t: u64, moments: BTreeMap<String, Moments>) -> Self {
        AdamState { cfg, t, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn owned_names(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    pub fn moments_mut(&mut self, name: &str) -> Option<&mut Moments> {
        self.moments.get_mut(name)
    }

    /// One update over every owned parameter. Each owned name must have a
    /// gradient of matching length; anything extra in `grads` is ignored.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &GradientMap,
    ) -> Result<(), OptimError> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, mo) in self.moments.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
            let p = params.get_mut(name)?.data_mut();
            if g.len() != p.len() {
                return Err(OptimError::LengthMismatch {
                    name: name.clone(),
                    got: g.len(),
                    want: p.len(),
                });
            }
            for i in 0..p.len() {
                mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g[i];
                mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = mo.m[i] / bc1;
                let vh = mo.v[i] / bc2;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Elementwise `into += from` for every key in `from`; new keys are inserted.
pub fn accumulate_grads(into: &mut GradientMap, from: &GradientMap) {
    for (name, g) in from {
        match into.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

/// Scale every gradient in place (e.g. 1/batch for mean reduction).
pub fn scale_grads(grads: &mut GradientMap, k: f64) {
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v *= k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(x: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::param(vec![1], vec![x]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = x^2, grad = 2x, from x = 5 with lr 0.1. The first step is
        // lr * g / (|g| + eps), i.e. almost exactly lr in magnitude.
        let mut ps = single_param(5.0);
        let names = vec!["x".to_string()];
        let mut adam = AdamState::new(
            AdamConfig { lr: 0.1, ..Default::default() },
            &ps,
            &names,
        )
        .unwrap();

        let mut xs = vec![5.0];
        for _ in 0..2 {
            let x = ps.get("x").unwrap().data()[0];
            let mut grads = GradientMap::new();
            grads.insert("x".into(), vec![2.0 * x]);
            adam.step(&mut ps, &grads).unwrap();
            xs.push(ps.get("x").unwrap().data()[0]);
        }
        assert!((xs[1] - 4.9).abs() < 1e-6, "first step: {}", xs[1]);
        assert!(xs[2] < xs[1] && xs[1] < xs[0]);
    }

    #[test]
    fn converges_near_zero_on_longer_run() {
        let mut ps = single_param(5.0);
        let names = vec!["x".to_string()];
        let mut adam = AdamState::new(
            AdamConfig { lr: 0.1, ..Default::default() },
            &ps,
            &names,
        )
        .unwrap();
        for _ in 0..300 {
            let x = ps.get("x").unwrap().data()[0];
            let mut grads = GradientMap::new();
            grads.insert("x".into(), vec![2.0 * x]);
            adam.step(&mut ps, &grads).unwrap();
        }
        assert!(ps.get("x").unwrap().data()[0].abs() < 0.05);
    }

    #[test]
    fn zero_gradient_on_fresh_state_is_a_no_op() {
        let mut ps = single_param(1.25);
        let names = vec!["x".to_string()];
        let mut adam = AdamState::new(AdamConfig::default(), &ps, &names).unwrap();
        let mut grads = GradientMap::new();
        grads.insert("x".into(), vec![0.0]);
        adam.step(&mut ps, &grads).unwrap();
        assert_eq!(ps.get("x").unwrap().data()[0], 1.25);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut ps = single_param(1.0);
        let names = vec!["x".to_string()];
        let mut adam = AdamState::new(AdamConfig::default(), &ps, &names).unwrap();
        let err = adam.step(&mut ps, &GradientMap::new()).unwrap_err();
        assert!(err.to_string().contains("`x`"), "error was: {err}");
    }

    #[test]
    fn gradient_length_mismatch_is_rejected() {
        let mut ps = single_param(1.0);
        let names = vec!["x".to_string()];
        let mut adam = AdamState::new(AdamConfig::default(), &ps, &names).unwrap();
        let mut grads = GradientMap::new();
        grads.insert("x".into(), vec![1.0, 2.0]);
        assert!(matches!(
            adam.step(&mut ps, &grads),
            Err(OptimError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn untracked_parameters_are_left_alone() {
        let mut ps = single_param(1.0);
        ps.insert("y", Tensor::param(vec![1], vec![3.0]).unwrap()).unwrap();
        let names = vec!["x".to_string()];
        let mut adam = AdamState::new(AdamConfig::default(), &ps, &names).unwrap();
        let mut grads = GradientMap::new();
        grads.insert("x".into(), vec![1.0]);
        grads.insert("y".into(), vec![100.0]); // present but not owned
        adam.step(&mut ps, &grads).unwrap();
        assert_eq!(ps.get("y").unwrap().data()[0], 3.0);
    }

    #[test]
    fn grad_accumulation_and_scaling() {
        let mut a = GradientMap::new();
        a.insert("p".into(), vec![1.0, 2.0]);
        let mut b = GradientMap::new();
        b.insert("p".into(), vec![0.5, -1.0]);
        b.insert("q".into(), vec![4.0]);
        accumulate_grads(&mut a, &b);
        assert_eq!(a["p"], vec![1.5, 1.0]);
        assert_eq!(a["q"], vec![4.0]);
        scale_grads(&mut a, 0.5);
        assert_eq!(a["p"], vec![0.75, 0.5]);
    }
}
