use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one learnable array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Named learnable tensors with gradient buffers and Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), step: 0 }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let zeros = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform initialisation on `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)));
        self.add(name, t)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
            return shape_err(format!("moments for {} have wrong shape", e.name));
        }
        e.m = m;
        e.v = v;
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `g` into the gradient buffer of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.entries[id.0].grad.add_assign(g)
    }

    /// One Adam update with bias correction; clears the gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for e in &mut self.entries {
            let Entry { value, grad, m, v, .. } = e;
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / c1;
                let vhat = vi / c2;
                value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.zero_grad();
        Ok(())
    }
}
