//! Named parameters, AdamW, and the JSON parameter checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Ordered collection of parameters. Insertion order is the iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradient of every parameter bound on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for &(var, id) in tape.param_bindings() {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[id.0];
                if g.shape() != p.grad.shape() {
                    return Err(Error::shape("accumulate", p.grad.shape(), g.shape()));
                }
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint(
            self.params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        TensorRecord {
                            shape: p.value.shape().to_vec(),
                            data: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        )
    }

    /// Overwrites values from `ckpt`. Every parameter must be present with a matching shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in &mut self.params {
            let rec = ckpt
                .0
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {}", p.name)))?;
            let t = rec.to_tensor()?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_checkpoint", p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    /// One update of every parameter from its populated `grad`.
    ///
    /// Decoupled decay `θ ← θ − lr·λ·θ` is applied first, then the
    /// bias-corrected moment step. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
        for p in &mut store.params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let (value, grad, m, v) = (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameter values, bias-corrected like
/// Adam's moments so the zero start carries no weight.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Tensor>,
    updates: i32,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        Self {
            decay,
            shadow: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            updates: 0,
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        let d = self.decay;
        self.updates = self.updates.saturating_add(1);
        for (s, p) in self.shadow.iter_mut().zip(&store.params) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.value.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }

    /// Overwrites the values in `store` with the averages; a no-op before
    /// the first update.
    pub fn copy_to(&self, store: &mut ParamStore) {
        if self.updates == 0 {
            return;
        }
        let c = 1.0 / (1.0 - self.decay.powi(self.updates));
        for (s, p) in self.shadow.iter().zip(&mut store.params) {
            p.value = s.scale(c);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.shape.clone(), self.data.clone())
    }
}

/// `{name → {shape, data}}`, serialized as one JSON document with sorted keys.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Checkpoint(pub BTreeMap<String, TensorRecord>);

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        for (name, rec) in &ckpt.0 {
            let n: usize = rec.shape.iter().product();
            if n != rec.data.len() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?} needs {n} values, got {}",
                    rec.shape,
                    rec.data.len()
                )));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_of_constant_is_constant_and_tracks_mean() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0, -1.0]));
        let mut ema = Ema::new(&store, 0.9);
        for _ in 0..5 {
            ema.update(&store);
        }
        let mut out = store.clone();
        ema.copy_to(&mut out);
        assert!(out.value(id).max_abs_diff(store.value(id)) < 1e-12);

        // alternating values average out to their mean
        let mut ema = Ema::new(&store, 0.99);
        for i in 0..4000 {
            *store.value_mut(id) = Tensor::vector(vec![if i % 2 == 0 { 1.0 } else { 3.0 }; 2]);
            ema.update(&store);
        }
        ema.copy_to(&mut out);
        assert!(out.value(id).data().iter().all(|v| (v - 2.0).abs() < 0.02));
    }

    fn single(theta: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![theta]));
        store.params[id.0].grad = Tensor::vector(vec![grad]);
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = single(1.0, 1.0);
        let opt = AdamW {
            lr: 0.1,
            ..AdamW::default()
        };
        opt.step(&mut store).unwrap();
        let theta = store.params[0].value.item();
        assert!((theta - 0.9).abs() < 1e-8, "{theta}");
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut store = single(1.0, 0.0);
        AdamW::default().step(&mut store).unwrap();
        assert_eq!(store.params[0].value.item(), 1.0);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut store = single(1.0, 0.0);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamW::default()
        };
        opt.step(&mut store).unwrap();
        assert!((store.params[0].value.item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = single(1.0, f64::NAN);
        let err = AdamW::default().step(&mut store).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(store.params[0].value.item(), 1.0);
    }

    #[test]
    fn checkpoint_rejects_bad_shape() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let mut ckpt = store.to_checkpoint();
        ckpt.0.get_mut("w").unwrap().shape = vec![4, 1];
        assert!(store.load_checkpoint(&ckpt).is_err());
        let text = r#"{"w":{"shape":[2,2],"data":[1,2,3]}}"#;
        assert!(Checkpoint::from_json(text).is_err());
    }
}
