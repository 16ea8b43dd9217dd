use rand::Rng;

use super::glorot_bound;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{DimSubset, Tensor};

/// Multidimensional equivariant linear layer.
///
/// `y = Σ_P mean_P(x) W_P + b` over the active subsets `P`.
#[derive(Debug, Clone)]
pub struct MdeLayer {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub subsets: Vec<DimSubset>,
    pub weights: Vec<ParamId>,
    pub bias: ParamId,
}

impl MdeLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n: usize,
        d_in: usize,
        d_out: usize,
        mut subsets: Vec<DimSubset>,
        rng: &mut R,
    ) -> Result<Self> {
        subsets.sort();
        subsets.dedup();
        if subsets.first() != Some(&DimSubset::empty()) {
            return shape_err("MDE layer requires the identity subset");
        }
        if subsets.iter().any(|s| s.max_dim().is_some_and(|d| d > n)) {
            return shape_err(format!("subset exceeds N = {n}"));
        }
        let bound = glorot_bound(d_in, d_out) / subsets.len() as f64;
        let weights = subsets
            .iter()
            .map(|s| store.add_uniform(format!("{name}.w{s}"), &[d_in, d_out], bound, rng))
            .collect();
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Ok(Self { n, d_in, d_out, subsets, weights, bias })
    }

    pub fn num_params(&self) -> usize {
        self.subsets.len() * self.d_in * self.d_out + self.d_out
    }

    /// `x`: `[B, M₁, …, M_N, D_I]` → `[B, M₁, …, M_N, D_O]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != self.n + 2 || shape[self.n + 1] != self.d_in {
            return shape_err(format!(
                "MDE layer expects [B, M1..M{}, {}], got {shape:?}",
                self.n, self.d_in
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[self.n + 1] = self.d_out;
        let mut acc: Option<Var> = None;
        for (s, &w) in self.subsets.iter().zip(&self.weights) {
            let wv = g.param(w);
            let term = if s.is_empty() {
                let b = g.param(self.bias);
                g.linear(x, wv, Some(b))?
            } else {
                // average first, then project the reduced tensor
                let axes: Vec<usize> = s.iter().collect();
                let m = g.reduce_mean(x, &axes)?;
                let p = g.linear(m, wv, None)?;
                g.broadcast_to(p, &out_shape)?
            };
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        Ok(acc.expect("identity subset always present"))
    }
}
