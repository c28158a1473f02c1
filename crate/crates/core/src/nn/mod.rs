//! Neural-network plumbing: the autodiff tape, named parameter storage,
//! weight initialization, the Adam optimizer, and layer builders.

pub mod checkpoint;
pub mod layers;
pub mod tape;

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use tape::{Tape, TensorId};

/// Index of a parameter inside a `ParamSet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

/// Ordered, named collection of trainable arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Result<ParamRef> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamRef(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn value(&self, r: ParamRef) -> &ArrayD<f64> {
        &self.values[r.0]
    }

    pub fn value_mut(&mut self, r: ParamRef) -> &mut ArrayD<f64> {
        &mut self.values[r.0]
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamRef> {
        self.index.get(name).copied().map(ParamRef)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Register every parameter on a fresh tape, in order. The returned
    /// binding maps `ParamRef(i)` to `ids[i]`.
    pub fn inject(&self, tape: &mut Tape) -> ParamBinding {
        let ids = self.values.iter().map(|v| tape.param(v.clone())).collect();
        ParamBinding { ids }
    }

    /// Same, but as non-differentiable constants (frozen inference).
    pub fn inject_frozen(&self, tape: &mut Tape) -> ParamBinding {
        let ids = self.values.iter().map(|v| tape.constant(v.clone())).collect();
        ParamBinding { ids }
    }

    /// Replace values from a name->array map (checkpoint loading).
    pub fn load_values(&mut self, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
        for (name, arr) in tensors {
            let Some(&i) = self.index.get(name) else {
                return Err(Error::data(format!("checkpoint tensor '{name}' unknown to model")));
            };
            if self.values[i].shape() != arr.shape() {
                return Err(Error::data(format!(
                    "checkpoint tensor '{name}' shape {:?} != expected {:?}",
                    arr.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = arr.clone();
        }
        Ok(())
    }
}

/// Tape ids for one injection of a `ParamSet`.
pub struct ParamBinding {
    ids: Vec<TensorId>,
}

impl ParamBinding {
    pub fn id(&self, r: ParamRef) -> TensorId {
        self.ids[r.0]
    }
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

pub mod init {
    use super::*;

    /// He-normal initialization for ReLU stacks.
    pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
        let std = (2.0 / fan_in as f64).sqrt();
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            // Box-Muller from two uniforms keeps us independent of
            // rand_distr version details.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }
}

/// Adam with bias correction; the training schedule uses a fixed learning
/// rate with no decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let m = params.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let v = params.values.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    /// One update. `grads[i]` pairs with parameter `i`; `None` leaves the
    /// parameter untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<ArrayD<f64>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient for parameter '{}'",
                    params.names[i]
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = &mut params.values[i];
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let p = ps.add("x", ArrayD::from_elem(IxDyn(&[2]), 5.0)).unwrap();
        let mut adam = Adam::new(0.1, &ps);
        for _ in 0..200 {
            let g = ps.value(p).clone() * 2.0; // d/dx x^2
            adam.step(&mut ps, &[Some(g)]).unwrap();
        }
        assert!(ps.value(p).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add("w", init::zeros(&[2])).unwrap();
        assert!(ps.add("w", init::zeros(&[2])).is_err());
    }

    #[test]
    fn he_normal_is_seeded_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(init::he_normal(&mut a, &[4, 4], 16), init::he_normal(&mut b, &[4, 4], 16));
    }
}
