//! Parameter storage and the Adam optimizer with decoupled weight decay.
//!
//! Gradients are clipped by their global norm *before* the moment updates, and
//! weight decay touches only parameters that actually received a gradient, so
//! unused parameters keep their exact bit pattern across steps.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    value: Tensor,
}

/// Named, long-lived parameter tensors shared across compute graphs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter under a unique name.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "register" });
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidArgument(format!(
                "parameter {name:?} is already registered"
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Copies every parameter value, positionally aligned with [`Self::ids`].
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restores a snapshot taken from the same store layout.
    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "snapshot has {} parameters, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (entry, saved) in self.entries.iter_mut().zip(snapshot) {
            if entry.value.shape() != saved.shape() {
                return Err(Error::shape(
                    "restore",
                    format!("{} is {:?}, snapshot has {:?}", entry.name, entry.value.shape(), saved.shape()),
                ));
            }
            entry.value = saved.clone();
        }
        Ok(())
    }
}

/// Adam hyperparameters plus decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            grad_clip: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSettings {
    pub fn new(learning_rate: f64, weight_decay: f64, grad_clip: Option<f64>) -> Self {
        OptimizerSettings {
            learning_rate,
            weight_decay,
            grad_clip,
            ..Default::default()
        }
    }
}

/// Adam moment estimates, positionally aligned with a [`ParamStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub settings: OptimizerSettings,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(settings: OptimizerSettings) -> Self {
        OptimizerState {
            settings,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<f64> {
        for (pid, g) in grads {
            if g.shape() != store.value(*pid).shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "gradient for {} is {:?}, parameter is {:?}",
                        store.name(*pid),
                        g.shape(),
                        store.value(*pid).shape()
                    ),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(*pid).to_string()));
            }
        }
        // moments for parameters registered since the last step
        while self.m.len() < store.len() {
            let shape = store.value(ParamId(self.m.len())).shape().to_vec();
            self.m.push(Tensor::zeros(shape.clone()));
            self.v.push(Tensor::zeros(shape));
        }

        let norm = global_grad_norm(grads);
        let scale = match self.settings.grad_clip {
            Some(threshold) if norm > threshold => threshold / norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let s = self.settings;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        for (pid, g) in grads {
            let m = self.m[pid.0].data_mut();
            let v = self.v[pid.0].data_mut();
            let p = store.value_mut(*pid).data_mut();
            for ((pi, mi), (vi, gi)) in p.iter_mut().zip(m).zip(v.iter_mut().zip(g.data())) {
                let gc = gi * scale;
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gc;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gc * gc;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= s.learning_rate * m_hat / (v_hat.sqrt() + s.eps);
                *pi -= s.learning_rate * s.weight_decay * *pi;
            }
        }
        Ok(norm)
    }
}

/// Euclidean norm over all gradient elements together.
pub fn global_grad_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: Tensor) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", value).unwrap();
        (store, id)
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0)).unwrap();
        assert!(store.register("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let (mut store, id) = one_param(Tensor::from_vec(vec![2], vec![0.1, 0.2]).unwrap());
        let snap = store.snapshot();
        store.value_mut(id).data_mut()[0] = 9.0;
        store.restore(&snap).unwrap();
        assert_eq!(store.value(id).data(), &[0.1, 0.2]);
    }

    #[test]
    fn store_json_roundtrip_is_bit_exact() {
        let (mut store, _) = one_param(Tensor::from_vec(vec![3], vec![0.1 + 0.2, -1e-300, 4.0 / 3.0]).unwrap());
        store.register("b", Tensor::scalar(0.437_219_843_712)).unwrap();
        let json = serde_json::to_string(&store).unwrap();
        let back: ParamStore = serde_json::from_str(&json).unwrap();
        for id in store.ids() {
            let (a, b) = (store.value(id).data(), back.value(id).data());
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut store, id) = one_param(Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap());
        let mut opt = OptimizerState::new(OptimizerSettings::new(0.1, 0.0, None));
        opt.step(&mut store, &[(id, Tensor::zeros(vec![2]))]).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -0.7]);
    }

    #[test]
    fn first_step_moves_by_roughly_learning_rate() {
        let (mut store, id) = one_param(Tensor::scalar(1.0));
        let mut opt = OptimizerState::new(OptimizerSettings::new(0.1, 0.0, None));
        opt.step(&mut store, &[(id, Tensor::scalar(2.0))]).unwrap();
        assert!((store.value(id).item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn quadratic_descent_converges() {
        let (mut store, id) = one_param(Tensor::scalar(3.0));
        let mut opt = OptimizerState::new(OptimizerSettings::new(0.05, 0.0, None));
        for _ in 0..400 {
            let w = store.value(id).item();
            opt.step(&mut store, &[(id, Tensor::scalar(2.0 * w))]).unwrap();
        }
        assert!(store.value(id).item().abs() < 1e-2);
    }

    #[test]
    fn clip_reports_preclip_norm_and_scales() {
        let (mut store, id) = one_param(Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let mut opt = OptimizerState::new(OptimizerSettings::new(0.1, 0.0, Some(0.25)));
        // gradient (6, 8) has norm 10; clip to 0.25 scales both by 0.025
        let norm = opt
            .step(&mut store, &[(id, Tensor::from_vec(vec![2], vec![6.0, 8.0]).unwrap())])
            .unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        // Adam's first-step update is lr * g/|g| elementwise regardless of the
        // clip scale, so verify the scale through the stored first moment.
        let expected_m = [0.1 * 6.0 * 0.025, 0.1 * 8.0 * 0.025];
        assert!((opt.m[0].data()[0] - expected_m[0]).abs() < 1e-12);
        assert!((opt.m[0].data()[1] - expected_m[1]).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let (mut store, id) = one_param(Tensor::scalar(1.0));
        let mut opt = OptimizerState::new(OptimizerSettings::default());
        let g = Tensor::from_vec(vec![], vec![f64::NAN]).unwrap();
        assert!(matches!(
            opt.step(&mut store, &[(id, g)]),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn weight_decay_skips_parameters_without_gradients() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(0.5)).unwrap();
        let b = store.register("b", Tensor::scalar(0.25)).unwrap();
        let before = store.value(b).item().to_bits();
        let mut opt = OptimizerState::new(OptimizerSettings::new(0.1, 0.1, None));
        opt.step(&mut store, &[(a, Tensor::scalar(1.0))]).unwrap();
        assert_eq!(store.value(b).item().to_bits(), before);
        assert_ne!(store.value(a).item(), 0.5);
    }

    #[test]
    fn decay_applies_after_adam_update() {
        let (mut store, id) = one_param(Tensor::scalar(1.0));
        let mut opt = OptimizerState::new(OptimizerSettings::new(0.1, 0.5, None));
        opt.step(&mut store, &[(id, Tensor::scalar(2.0))]).unwrap();
        // Adam moves 1.0 to ~0.9, then decay multiplies by (1 - lr*wd) = 0.95
        assert!((store.value(id).item() - 0.9 * 0.95).abs() < 1e-6);
    }
}
