//! Equivariant and invariant layers built on the autodiff tape.
//!
//! All layers take a leading batch axis: an `N`-dimensional equivariant
//! input has shape `[B, M₁, …, M_N, D]`, and 1-based dimension `n` lives on
//! axis `n`.

mod hoe;
mod mde;
mod pattern;
mod pma;

pub use hoe::{enumerate_partitions, hoe_feature_map, HoeLayer, SetPartition};
pub use mde::MdeLayer;
pub use pattern::{pattern_subsets, Pattern};
pub use pma::{MdiModule, PmaLayer};

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Glorot-uniform bound for a `d_in × d_out` matrix.
pub fn glorot_bound(d_in: usize, d_out: usize) -> f64 {
    (6.0 / (d_in + d_out) as f64).sqrt()
}

/// Fully connected map on the trailing dimension.
#[derive(Debug, Clone)]
pub struct Ffc {
    pub d_in: usize,
    pub d_out: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Ffc {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], glorot_bound(d_in, d_out), rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { d_in, d_out, w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// Layer normalisation over the trailing dimension with affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub d: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[d]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { d, gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }

    pub fn num_params(&self) -> usize {
        2 * self.d
    }
}

/// `FFC → L × [MDE → ReLU → LN]`, the shared front of both networks.
#[derive(Debug, Clone)]
pub struct MdeStack {
    pub input: Ffc,
    pub layers: Vec<MdeLayer>,
    pub norms: Vec<LayerNorm>,
}

impl MdeStack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_x: usize,
        d_h: usize,
        subsets: &[Vec<crate::tensor::DimSubset>],
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Ffc::new(store, &format!("{name}.ffc_in"), d_x, d_h, rng);
        let mut layers = Vec::with_capacity(subsets.len());
        let mut norms = Vec::with_capacity(subsets.len());
        for (l, s) in subsets.iter().enumerate() {
            layers.push(MdeLayer::new(store, &format!("{name}.mde{l}"), n, d_h, d_h, s.clone(), rng)?);
            norms.push(LayerNorm::new(store, &format!("{name}.ln{l}"), d_h));
        }
        Ok(Self { input, layers, norms })
    }

    pub fn num_params(&self) -> usize {
        self.input.num_params()
            + self.layers.iter().map(MdeLayer::num_params).sum::<usize>()
            + self.norms.iter().map(LayerNorm::num_params).sum::<usize>()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.input.forward(g, x)?;
        for (layer, ln) in self.layers.iter().zip(&self.norms) {
            let y = layer.forward(g, h)?;
            let y = g.relu(y);
            h = ln.forward(g, y)?;
        }
        Ok(h)
    }
}
