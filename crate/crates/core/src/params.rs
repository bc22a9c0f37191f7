//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use ndarray::Array2;

use crate::autograd::{Gradients, Mat, Tape, Var};
use crate::error::{FaceError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable matrices. Each entry carries a
/// version counter bumped on every mutation so derived caches can detect
/// staleness.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    versions: Vec<u64>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.versions.push(0);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn version(&self, id: ParamId) -> u64 {
        self.versions[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn set(&mut self, id: ParamId, value: Mat) -> Result<()> {
        if value.dim() != self.values[id.0].dim() {
            return Err(FaceError::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].dim(),
                value.dim()
            )));
        }
        self.values[id.0] = value;
        self.versions[id.0] += 1;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    fn apply_update(&mut self, id: ParamId, f: impl FnOnce(&mut Mat)) {
        f(&mut self.values[id.0]);
        self.versions[id.0] += 1;
    }
}

/// Tape handles for every parameter of a store, in store order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects per-parameter gradients; parameters off the loss path get `None`.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Mat>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |v: &Mat| Array2::zeros(v.dim());
        Self {
            config,
            step: 0,
            first: store.values.iter().map(zeros).collect(),
            second: store.values.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&Mat, &Mat) {
        (&self.first[id.0], &self.second[id.0])
    }

    pub fn restore(&mut self, step: u64, first: Vec<Mat>, second: Vec<Mat>) -> Result<()> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(FaceError::Checkpoint("optimizer moment count mismatch".into()));
        }
        for (a, b) in first.iter().zip(&self.first).chain(second.iter().zip(&self.second)) {
            if a.dim() != b.dim() {
                return Err(FaceError::Checkpoint("optimizer moment shape mismatch".into()));
            }
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update for every parameter with a gradient for which `trainable`
    /// holds. Parameters without a gradient keep their moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Mat>],
        trainable: impl Fn(ParamId, &str) -> bool,
    ) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let id = ParamId(i);
            let Some(g) = grad else { continue };
            if !trainable(id, &store.names[i]) {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                });
            let (m, v) = (&self.first[i], &self.second[i]);
            store.apply_update(id, |p| {
                ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                    *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                })
            });
        }
    }
}
