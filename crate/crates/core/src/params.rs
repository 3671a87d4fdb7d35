//! Named parameter collections, gradient accumulation and AdamW.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Param {
    name: String,
    value: Arc<Array2<f64>>,
}

/// Ordered set of trainable matrices. Models hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape variables bound to every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform Glorot initialisation.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let value = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std);
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn shared(&self, id: ParamId) -> Arc<Array2<f64>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(Arc::clone(&p.value))).collect(),
        }
    }

    /// Registers every parameter as a constant (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant((*p.value).clone())).collect(),
        }
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Mismatch(format!(
                "parameter count {} != expected {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.dim() != theirs.value.dim() {
                return Err(Error::Mismatch(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    theirs.name,
                    theirs.value.dim(),
                    mine.name,
                    mine.value.dim()
                )));
            }
            mine.value = Arc::clone(&theirs.value);
        }
        Ok(())
    }

    /// Content hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            let (r, c) = p.value.dim();
            h.update((r as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Summed gradients for one [`ParamSet`] across several tapes.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Array2<f64>>>,
    count: usize,
}

impl GradBuffer {
    pub fn new(set: &ParamSet) -> Self {
        Self {
            grads: vec![None; set.len()],
            count: 0,
        }
    }

    /// Adds the gradients that reached `bound` in one backward pass.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (slot, var) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*var) {
                match slot {
                    Some(acc) => *acc += g,
                    None => *slot = Some(g.clone()),
                }
            }
        }
        self.count += 1;
    }

    pub fn add(&mut self, id: ParamId, g: &Array2<f64>) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn mark_example(&mut self) {
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| *v == 0.0))
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * k);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. State is serialisable for resumption.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, set: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; set.len()],
            v: vec![None; set.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the mean gradient of `buffer` to `set`. Parameters without a
    /// gradient in this step are left untouched (no decay either).
    pub fn step(&mut self, set: &mut ParamSet, buffer: &GradBuffer) {
        if buffer.count == 0 {
            return;
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let inv_n = 1.0 / buffer.count as f64;
        for id in set.ids().collect::<Vec<_>>() {
            let Some(g) = buffer.grads[id.0].as_ref() else {
                continue;
            };
            let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            let p = set.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * inv_n;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.learning_rate * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut set = ParamSet::new();
        let id = set.add("w", array![[3.0, -2.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &set,
        );
        for _ in 0..500 {
            let mut tape = Tape::new();
            let bound = set.bind(&mut tape);
            let w = bound.var(id);
            let sq = tape.mul(w, w);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss);
            let mut buf = GradBuffer::new(&set);
            buf.accumulate(&bound, &grads);
            opt.step(&mut set, &buf);
        }
        assert!(set.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut a = ParamSet::new();
        let id = a.add("w", array![[1.0]]);
        let before = a.fingerprint();
        a.get_mut(id)[[0, 0]] = 1.0 + f64::EPSILON;
        assert_ne!(before, a.fingerprint());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut a = ParamSet::new();
        a.add("w", Array2::zeros((2, 2)));
        let mut b = ParamSet::new();
        b.add("w", Array2::zeros((2, 3)));
        assert!(a.load_from(&b).is_err());
    }
}
