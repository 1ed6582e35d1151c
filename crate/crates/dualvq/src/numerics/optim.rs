use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("gradient for `{0}` is not finite; step rejected")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has {got} elements, parameter has {want}")]
    GradShape { name: String, got: usize, want: usize },
    #[error("gradient count {got} does not match parameter count {want}")]
    GradCount { got: usize, want: usize },
}

/// Ordered, named parameter tensors with per-parameter freeze flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            frozen: false,
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> bool {
        if let Some(e) = self.entries.iter_mut().find(|e| e.name == name) {
            e.value = value;
            true
        } else {
            false
        }
    }

    /// Freeze every parameter whose name starts with one of the prefixes.
    pub fn freeze_matching(&mut self, prefixes: &[&str]) {
        for e in &mut self.entries {
            if prefixes.iter().any(|p| e.name.starts_with(p)) {
                e.frozen = true;
            }
        }
    }

    pub fn set_frozen(&mut self, idx: usize, frozen: bool) {
        self.entries[idx].frozen = frozen;
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = false;
        }
    }

    pub fn frozen(&self, idx: usize) -> bool {
        self.entries[idx].frozen
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD / Adam over a [`ParamSet`]. Moment buffers are lazily allocated to
/// parameter shapes; frozen parameters are never touched.
pub struct Optimizer {
    pub lr: f64,
    pub kind: OptimizerKind,
    state: Vec<Option<Moments>>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self {
            lr,
            kind: OptimizerKind::Sgd,
            state: Vec::new(),
            steps: 0,
        }
    }

    /// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            state: Vec::new(),
            steps: 0,
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            lr,
            kind,
            state: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Apply one update. `grads[i]` pairs with parameter `i`; gradients of
    /// frozen parameters are ignored. Any non-finite gradient on an
    /// unfrozen parameter rejects the whole step before mutating anything.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::GradCount {
                got: grads.len(),
                want: params.len(),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if params.frozen(i) {
                continue;
            }
            let want = params.value(i).numel();
            if g.len() != want {
                return Err(OptimError::GradShape {
                    name: params.entry(i).name.clone(),
                    got: g.len(),
                    want,
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient(params.entry(i).name.clone()));
            }
        }
        self.state.resize(params.len(), None);
        self.steps += 1;
        for (i, g) in grads.iter().enumerate() {
            if params.frozen(i) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let p = params.value_mut(i).data_mut();
                    for (pj, gj) in p.iter_mut().zip(g) {
                        *pj -= self.lr * gj;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let n = g.len();
                    let mom = self.state[i].get_or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    let t = self.steps as f64;
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    let p = params.value_mut(i).data_mut();
                    for j in 0..n {
                        mom.m[j] = beta1 * mom.m[j] + (1.0 - beta1) * g[j];
                        mom.v[j] = beta2 * mom.v[j] + (1.0 - beta2) * g[j] * g[j];
                        let mhat = mom.m[j] / bc1;
                        let vhat = mom.v[j] / bc2;
                        p[j] -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("p", Tensor::scalar(v));
        p
    }

    #[test]
    fn sgd_update_is_exact() {
        let mut params = one_param(1.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut params, &[vec![2.0]]).unwrap();
        assert_eq!(params.value(0).as_scalar(), Some(0.8));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = one_param(1.5);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut params, &[vec![0.0]]).unwrap();
        assert_eq!(params.value(0).as_scalar(), Some(1.5));
    }

    #[test]
    fn frozen_parameter_never_moves() {
        let mut params = one_param(1.0);
        params.freeze_matching(&["p"]);
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut params, &[vec![7.0]]).unwrap();
        assert_eq!(params.value(0).as_scalar(), Some(1.0));
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut params = one_param(1.0);
        let mut opt = Optimizer::sgd(0.1);
        let err = opt.step(&mut params, &[vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient(_)));
        assert_eq!(params.value(0).as_scalar(), Some(1.0));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = one_param(1.0);
        let mut opt = Optimizer::adam(0.01);
        opt.step(&mut params, &[vec![3.0]]).unwrap();
        let v = params.value(0).as_scalar().unwrap();
        assert!(v < 1.0 && v > 0.98);
    }
}
