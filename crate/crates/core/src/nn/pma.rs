use rand::Rng;

use super::{glorot_bound, Ffc, LayerNorm};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Pooling by multihead attention with a single learnable seed.
///
/// `PMA(X) = MAB(S, FFC(X))`, `MAB(X', Y') = M' + ReLU(FFC(M'))`,
/// `M' = LN(X' + MultiHead(X', Y', Y'))`.
#[derive(Debug, Clone)]
pub struct PmaLayer {
    pub d: usize,
    pub n_heads: usize,
    pub seed: ParamId,
    pub pre: Ffc,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ff: Ffc,
    pub ln: LayerNorm,
}

impl PmaLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Invalid(format!("feature length {d} not divisible by {n_heads} heads")));
        }
        let bound = glorot_bound(d, d);
        let seed = store.add_uniform(format!("{name}.seed"), &[1, d], bound, rng);
        let pre = Ffc::new(store, &format!("{name}.pre"), d, d, rng);
        let wq = store.add_uniform(format!("{name}.wq"), &[d, d], bound, rng);
        let wk = store.add_uniform(format!("{name}.wk"), &[d, d], bound, rng);
        let wv = store.add_uniform(format!("{name}.wv"), &[d, d], bound, rng);
        let wo = store.add_uniform(format!("{name}.wo"), &[d, d], bound, rng);
        let ff = Ffc::new(store, &format!("{name}.ff"), d, d, rng);
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d);
        Ok(Self { d, n_heads, seed, pre, wq, wk, wv, wo, ff, ln })
    }

    pub fn num_params(&self) -> usize {
        self.d + 4 * self.d * self.d + self.pre.num_params() + self.ff.num_params() + self.ln.num_params()
    }

    /// `x`: `[R, M, D]` → `[R, 1, D]`, invariant to permutations of axis 1.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return shape_err(format!("PMA expects [R, M, {}], got {shape:?}", self.d));
        }
        let r = shape[0];
        let d = self.d;
        let dh = d / self.n_heads;
        let y = self.pre.forward(g, x)?;

        let s = g.param(self.seed);
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.linear(s, wq, None)?;
        let q = g.reshape(q, &[1, 1, d])?;
        let q = g.broadcast_to(q, &[r, 1, d])?;
        let k = g.linear(y, wk, None)?;
        let v = g.linear(y, wv, None)?;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice(q, 2, h * dh, dh)?;
            let kh = g.slice(k, 2, h * dh, dh)?;
            let vh = g.slice(v, 2, h * dh, dh)?;
            let scores = g.bmm(qh, kh, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_last(scores)?;
            heads.push(g.bmm(attn, vh, false)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
        let mh = g.linear(cat, wo, None)?;

        let s3 = g.reshape(s, &[1, 1, d])?;
        let s3 = g.broadcast_to(s3, &[r, 1, d])?;
        let res = g.add(s3, mh)?;
        let m = self.ln.forward(g, res)?;
        let f = self.ff.forward(g, m)?;
        let f = g.relu(f);
        g.add(m, f)
    }
}

/// Sequential PMA pooling over a set of 1-based dimensions.
#[derive(Debug, Clone)]
pub struct MdiModule {
    /// Pooled dimensions in descending order, one PMA each.
    pub dims: Vec<usize>,
    pub pmas: Vec<PmaLayer>,
}

impl MdiModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        d: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = dims.to_vec();
        dims.sort_unstable_by(|a, b| b.cmp(a));
        dims.dedup();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Invalid("MDI needs at least one 1-based dimension".into()));
        }
        let pmas = dims
            .iter()
            .map(|dim| PmaLayer::new(store, &format!("{name}.pma{dim}"), d, n_heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, pmas })
    }

    pub fn from_parts(dims: Vec<usize>, pmas: Vec<PmaLayer>) -> Result<Self> {
        if dims.len() != pmas.len() {
            return Err(Error::Invalid(format!("{} dimensions but {} PMA layers", dims.len(), pmas.len())));
        }
        Ok(Self { dims, pmas })
    }

    pub fn num_params(&self) -> usize {
        self.pmas.iter().map(PmaLayer::num_params).sum()
    }

    /// `x`: `[B, M₁, …, M_N, D]`; each pooled dimension is removed.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = x;
        for (&dim, pma) in self.dims.iter().zip(&self.pmas) {
            let shape = g.value(x).shape().to_vec();
            let rank = shape.len();
            if dim + 1 >= rank {
                return shape_err(format!("cannot pool dimension {dim} of {shape:?}"));
            }
            let mut perm: Vec<usize> = (0..rank).filter(|&a| a != dim && a != rank - 1).collect();
            perm.push(dim);
            perm.push(rank - 1);
            let moved = g.permute_axes(x, &perm)?;
            let rest: Vec<usize> = perm[..rank - 2].iter().map(|&a| shape[a]).collect();
            let rows: usize = rest.iter().product();
            let flat = g.reshape(moved, &[rows, shape[dim], shape[rank - 1]])?;
            let pooled = pma.forward(g, flat)?;
            let mut out_shape = rest;
            out_shape.push(shape[rank - 1]);
            x = g.reshape(pooled, &out_shape)?;
        }
        Ok(x)
    }
}
