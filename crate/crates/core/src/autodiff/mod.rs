//! Reverse-mode differentiation on a flat tape.
//!
//! Every operation appends a node holding its primal value; [`Graph::backward`]
//! walks the tape in reverse. Complex matrices live on the tape as real
//! tensors of shape `[rows, cols, 2]`. Their gradient slot holds
//! `(∂L/∂Re, ∂L/∂Im)` for the real loss `L`, so the adjoint of `C = AB` is
//! `Ḡ_A = Ḡ_C Bᴴ`, of `C = A⁻¹` is `-Cᴴ Ḡ_C Cᴴ`, and of `logdet A` is `A⁻¹`.

mod params;

use std::collections::HashMap;
use std::sync::Arc;

pub use params::{AdamConfig, ParamId, ParamStore};

use crate::complex::ComplexMatrix;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Fixed sparse linear map applied along the middle axis of a `[B, n_in, D]`
/// tensor: `y[b, o, d] = Σ w · x[b, i, d]` over the `(o, i, w)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub entries: Vec<(usize, usize, T)>,
}

impl<T: Scalar> SparseMap<T> {
    fn apply(&self, x: &Tensor<T>, transpose: bool) -> Tensor<T> {
        let s = x.shape();
        let (b, d) = (s[0], s[2]);
        let (n_src, n_dst) = if transpose { (self.n_out, self.n_in) } else { (self.n_in, self.n_out) };
        debug_assert_eq!(s[1], n_src);
        let mut out = Tensor::zeros(&[b, n_dst, d]);
        let xd = x.data();
        let od = out.data_mut();
        for bi in 0..b {
            for &(o, i, w) in &self.entries {
                let (src, dst) = if transpose { (o, i) } else { (i, o) };
                let sb = (bi * n_src + src) * d;
                let db = (bi * n_dst + dst) * d;
                for k in 0..d {
                    od[db + k] += w * xd[sb + k];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Powf(Var, T),
    Log(Var),
    Clamp(Var, T, T),
    Sum(Var),
    ReduceSum(Var),
    ReduceMean(Var, T),
    BroadcastTo(Var),
    Linear(Var, Var, Option<Var>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SoftmaxLast(Var),
    PermuteAxes(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    IndexSelect(Var, usize, Vec<usize>),
    Stack(Vec<Var>, usize),
    Bmm(Var, Var, bool),
    Sparse(Var, Arc<SparseMap<T>>),
    CMatMul(Var, Var),
    CHerm(Var),
    CInverse(Var),
    CLogdet(Var, ComplexMatrix<T>),
    CTrace(Var),
    CBlockDiag(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node (zeros are reported as `None`).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    /// Accumulates (`+=`) the parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate(id, g)?;
        }
        Ok(())
    }
}

/// A single-threaded tape, optionally reading parameters from a store.
pub struct Graph<'a, T> {
    nodes: Vec<Node<T>>,
    store: Option<&'a ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn complex_shape(t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 2 {
        return shape_err(format!("expected complex [r, c, 2] tensor, got {s:?}"));
    }
    Ok((s[0], s[1]))
}

/// `c = a[m×k] · b[n×k]ᵀ`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c = a[k×m]ᵀ · b[k×n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &x) in arow.iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &y) in crow.iter_mut().zip(brow) {
                *cv += x * y;
            }
        }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter of the attached store (one node per id).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store attached");
        let value = store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Param, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err(format!("scale_by needs a scalar, got {:?}", self.value(s).shape()));
        }
        let c = self.value(s).item();
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.powf(a, T::of(0.5))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over 0-based `axes`, kept with extent 1.
    pub fn reduce_sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).reduce_sum_keep(axes)?;
        Ok(self.push(v, Op::ReduceSum(a), &[a]))
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape();
        let count: usize = axes.iter().map(|&x| shape.get(x).copied().unwrap_or(1)).product();
        let inv = T::one() / T::from_usize(count).unwrap();
        let v = self.value(a).reduce_sum_keep(axes)?.scale(inv);
        Ok(self.push(v, Op::ReduceMean(a, inv), &[a]))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).broadcast_to(shape)?;
        Ok(self.push(v, Op::BroadcastTo(a), &[a]))
    }

    /// Averages over 0-based `axes` and repeats back to the input shape.
    pub fn mean_broadcast(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        if axes.is_empty() {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let m = self.reduce_mean(a, axes)?;
        self.broadcast_to(m, &shape)
    }

    /// `x W (+ b)` over the trailing dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = self.value(x).last_dim_linear(self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear(x, w, b), &inputs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Layer normalisation over the trailing dimension, `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| Error::Shape("rank-0 layer_norm".into()))?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return shape_err("layer_norm affine parameters must match the feature width");
        }
        let eps = T::of(1e-5);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        for fiber in xhat.data_mut().chunks_mut(d) {
            let mean = fiber.iter().copied().sum::<T>() / dn;
            let var = fiber.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            for v in fiber.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for fiber in out.data_mut().chunks_mut(d) {
            for ((v, &gg), &bb) in fiber.iter_mut().zip(g).zip(b) {
                *v = *v * gg + bb;
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Max-subtracted softmax over the trailing dimension.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = *av.shape().last().ok_or_else(|| Error::Shape("rank-0 softmax".into()))?;
        let mut out = av.clone();
        for fiber in out.data_mut().chunks_mut(d) {
            let m = fiber.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in fiber.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in fiber.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(out, Op::SoftmaxLast(a), &[a]))
    }

    pub fn permute_axes(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute_axes(perm)?;
        Ok(self.push(v, Op::PermuteAxes(a, perm.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::concat(&vals, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::stack(&vals, axis)?;
        Ok(self.push(v, Op::Stack(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push(v, Op::Slice(a, axis, start), &[a]))
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).index_select(axis, indices)?;
        Ok(self.push(v, Op::IndexSelect(a, axis, indices.to_vec()), &[a]))
    }

    /// Batched matrix product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]`
    /// transposed when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm {sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(format!("bmm inner mismatch {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = Tensor::zeros(&[batch, m, n]);
        for i in 0..batch {
            let ab = &av.data()[i * m * k..(i + 1) * m * k];
            let bb = &bv.data()[i * k * n..(i + 1) * k * n];
            let cb = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
            if trans_b {
                matmul_nt(ab, bb, cb, m, k, n);
            } else {
                matmul_into(ab, bb, cb, m, k, n);
            }
        }
        Ok(self.push(out, Op::Bmm(a, b, trans_b), &[a, b]))
    }

    /// Applies a fixed [`SparseMap`] along axis 1 of a `[B, n_in, D]` tensor.
    pub fn sparse_map(&mut self, a: Var, map: Arc<SparseMap<T>>) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 3 || s[1] != map.n_in {
            return shape_err(format!("sparse map expects [B, {}, D], got {s:?}", map.n_in));
        }
        let v = map.apply(self.value(a), false);
        Ok(self.push(v, Op::Sparse(a, map), &[a]))
    }

    // ---- complex matrices stored as [rows, cols, 2] ----

    fn cmat(&self, v: Var) -> Result<ComplexMatrix<T>> {
        ComplexMatrix::from_tensor(self.value(v))
    }

    /// Complex matrix from real and imaginary parts of equal shape `[r, c]`.
    pub fn complex_from_parts(&mut self, re: Var, im: Var) -> Result<Var> {
        if self.value(re).rank() != 2 {
            return shape_err("complex_from_parts expects matrices");
        }
        self.stack(&[re, im], 2)
    }

    pub fn cmatmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.cmat(a)?.matmul(&self.cmat(b)?)?.to_tensor();
        Ok(self.push(v, Op::CMatMul(a, b), &[a, b]))
    }

    pub fn cadd(&mut self, a: Var, b: Var) -> Result<Var> {
        complex_shape(self.value(a))?;
        self.add(a, b)
    }

    pub fn chermitian(&mut self, a: Var) -> Result<Var> {
        let v = self.cmat(a)?.hermitian().to_tensor();
        Ok(self.push(v, Op::CHerm(a), &[a]))
    }

    pub fn cinverse(&mut self, a: Var) -> Result<Var> {
        let v = self.cmat(a)?.inverse()?.to_tensor();
        Ok(self.push(v, Op::CInverse(a), &[a]))
    }

    /// Natural-log determinant of a Hermitian positive-definite matrix
    /// (Hermitian part taken first); rank-0 output.
    pub fn logdet_hpd(&mut self, a: Var) -> Result<Var> {
        let m = self.cmat(a)?;
        let sym = m.hermitian_part();
        let ld = sym.logdet_hpd()?;
        let inv = sym.inverse()?;
        Ok(self.push(Tensor::scalar(ld), Op::CLogdet(a, inv), &[a]))
    }

    /// Complex trace as a `[1, 1, 2]` tensor.
    pub fn ctrace(&mut self, a: Var) -> Result<Var> {
        let t = self.cmat(a)?.trace();
        let v = Tensor::new(vec![1, 1, 2], vec![t.re, t.im])?;
        Ok(self.push(v, Op::CTrace(a), &[a]))
    }

    /// `Re Tr(A)` as a rank-0 tensor.
    pub fn trace_real(&mut self, a: Var) -> Result<Var> {
        let t = self.ctrace(a)?;
        let re = self.slice(t, 2, 0, 1)?;
        self.reshape(re, &[])
    }

    pub fn scale_by_real(&mut self, a: Var, s: Var) -> Result<Var> {
        complex_shape(self.value(a))?;
        self.scale_by(a, s)
    }

    pub fn sqrt_real(&mut self, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("sqrt_real expects a scalar");
        }
        Ok(self.sqrt(s))
    }

    /// Concatenates complex matrices along rows (`axis = 0`) or columns (`1`).
    pub fn cconcat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if axis > 1 {
            return Err(Error::Invalid("complex concat axis must be 0 or 1".into()));
        }
        self.concat(parts, axis)
    }

    /// Submatrix `[r0..r0+rows, c0..c0+cols]`.
    pub fn cslice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (r, c) = complex_shape(self.value(a))?;
        let a = if r0 == 0 && rows == r { a } else { self.slice(a, 0, r0, rows)? };
        if c0 == 0 && cols == c {
            Ok(a)
        } else {
            self.slice(a, 1, c0, cols)
        }
    }

    /// Block-diagonal matrix from a stack `[K, n, m, 2]` of complex blocks.
    pub fn cblock_diag(&mut self, stack: Var) -> Result<Var> {
        let s = self.value(stack).shape().to_vec();
        if s.len() != 4 || s[3] != 2 {
            return shape_err(format!("block stack must be [K, n, m, 2], got {s:?}"));
        }
        let (k, n, m) = (s[0], s[1], s[2]);
        let src = self.value(stack);
        let mut out = Tensor::zeros(&[k * n, k * m, 2]);
        for b in 0..k {
            for i in 0..n {
                for j in 0..m {
                    for c in 0..2 {
                        let v = src.get(&[b, i, j, c]);
                        out.set(&[b * n + i, b * m + j, c], v);
                    }
                }
            }
        }
        Ok(self.push(out, Op::CBlockDiag(stack), &[stack]))
    }

    /// `s · I_n` for a complex scalar `s` of shape `[1, 1, 2]`.
    pub fn cscalar_identity(&mut self, s: Var, n: usize) -> Result<Var> {
        if self.value(s).shape() != [1, 1, 2] {
            return shape_err("cscalar_identity expects a [1, 1, 2] scalar");
        }
        let b = self.broadcast_to(s, &[n, n, 2])?;
        let mask = self.constant(Tensor::from_fn(&[n, n, 2], |i| {
            if i[0] == i[1] {
                T::one()
            } else {
                T::zero()
            }
        }));
        self.mul(b, mask)
    }

    pub fn cidentity(&mut self, n: usize) -> Var {
        self.constant(ComplexMatrix::<T>::identity(n).to_tensor())
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.item())));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?)?;
                acc(*b, g.mul(self.value(*a))?)?;
            }
            Op::Neg(a) => acc(*a, g.map(|x| -x))?,
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                acc(*a, g.scale(c))?;
                let ds = g.mul(self.value(*a))?.sum();
                acc(*s, Tensor::full(self.value(*s).shape(), ds))?;
            }
            Op::Powf(a, p) => {
                let p = *p;
                let d = self.value(*a).map(|x| p * x.powf(p - T::one()));
                acc(*a, g.mul(&d)?)?;
            }
            Op::Log(a) => acc(*a, g.zip_with(self.value(*a), |gg, x| gg / x)?)?,
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    g.zip_with(self.value(*a), |gg, x| if x >= lo && x <= hi { gg } else { T::zero() })?,
                )?;
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.item()))?,
            Op::ReduceSum(a) => acc(*a, g.broadcast_to(self.value(*a).shape())?)?,
            Op::ReduceMean(a, inv) => acc(*a, g.broadcast_to(self.value(*a).shape())?.scale(*inv))?,
            Op::BroadcastTo(a) => {
                let src = self.value(*a).shape();
                let axes: Vec<usize> = (0..src.len()).filter(|&i| src[i] == 1 && g.shape()[i] != 1).collect();
                acc(*a, g.reduce_sum_keep(&axes)?)?;
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / d_in;
                let mut gx = Tensor::zeros(xv.shape());
                matmul_nt(g.data(), wv.data(), gx.data_mut(), rows, d_out, d_in);
                acc(*x, gx)?;
                let mut gw = Tensor::zeros(wv.shape());
                matmul_tn(xv.data(), g.data(), gw.data_mut(), d_in, rows, d_out);
                acc(*w, gw)?;
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(&[d_out]);
                    for row in g.data().chunks(d_out) {
                        for (acc_b, &v) in gb.data_mut().iter_mut().zip(row) {
                            *acc_b += v;
                        }
                    }
                    acc(*b, gb)?;
                }
            }
            Op::Relu(a) => {
                acc(*a, g.zip_with(self.value(*a), |gg, x| if x > T::zero() { gg } else { T::zero() })?)?
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *xhat.shape().last().unwrap();
                let dn = T::from_usize(d).unwrap();
                let gam = self.value(*gamma).data();
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut gx = Tensor::zeros(xhat.shape());
                for (r, ((gf, xf), out)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..d {
                        gg[j] += gf[j] * xf[j];
                        gb[j] += gf[j];
                        let gh = gf[j] * gam[j];
                        mean_g += gh;
                        mean_gx += gh * xf[j];
                    }
                    mean_g /= dn;
                    mean_gx /= dn;
                    for j in 0..d {
                        out[j] = inv_std[r] * (gf[j] * gam[j] - mean_g - xf[j] * mean_gx);
                    }
                }
                acc(*x, gx)?;
                acc(*gamma, Tensor::from_vec(gg))?;
                acc(*beta, Tensor::from_vec(gb))?;
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(y.shape());
                for ((gf, yf), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.data_mut().chunks_mut(d)) {
                    let dot: T = gf.iter().zip(yf).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yf[j] * (gf[j] - dot);
                    }
                }
                acc(*a, gx)?;
            }
            Op::PermuteAxes(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, g.permute_axes(&inv)?)?;
            }
            Op::Reshape(a) => acc(*a, g.reshape(self.value(*a).shape())?)?,
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    acc(p, g.slice_axis(*axis, start, len)?)?;
                    start += len;
                }
            }
            Op::Stack(parts, axis) => {
                for (i, &p) in parts.iter().enumerate() {
                    let piece = g.slice_axis(*axis, i, 1)?.reshape(self.value(p).shape())?;
                    acc(p, piece)?;
                }
            }
            Op::Slice(a, axis, start) => {
                let len = g.shape()[*axis];
                let idx: Vec<usize> = (*start..*start + len).collect();
                acc(*a, Tensor::index_scatter_add(self.value(*a).shape(), *axis, &idx, g))?;
            }
            Op::IndexSelect(a, axis, idx) => {
                acc(*a, Tensor::index_scatter_add(self.value(*a).shape(), *axis, idx, g))?;
            }
            Op::Bmm(a, b, trans_b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..batch {
                    let gs = &g.data()[i * m * n..(i + 1) * m * n];
                    let asl = &av.data()[i * m * k..(i + 1) * m * k];
                    let bsl = &bv.data()[i * k * n..(i + 1) * k * n];
                    let gas = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // c = a bᵀ, b: [n×k]
                        matmul_into(gs, bsl, gas, m, n, k);
                        let gbs = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                        matmul_tn(gs, asl, gbs, n, m, k);
                    } else {
                        matmul_nt(gs, bsl, gas, m, n, k);
                        let gbs = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                        matmul_tn(asl, gs, gbs, k, m, n);
                    }
                }
                acc(*a, ga)?;
                acc(*b, gb)?;
            }
            Op::Sparse(a, map) => acc(*a, map.apply(g, true))?,
            Op::CMatMul(a, b) => {
                let gc = ComplexMatrix::from_tensor(g)?;
                let (am, bm) = (self.cmat(*a)?, self.cmat(*b)?);
                acc(*a, gc.matmul(&bm.hermitian())?.to_tensor())?;
                acc(*b, am.hermitian().matmul(&gc)?.to_tensor())?;
            }
            Op::CHerm(a) => acc(*a, ComplexMatrix::from_tensor(g)?.hermitian().to_tensor())?,
            Op::CInverse(a) => {
                let c = ComplexMatrix::from_tensor(&node.value)?.hermitian();
                let gc = ComplexMatrix::from_tensor(g)?;
                let ga = c.matmul(&gc)?.matmul(&c)?.scale_real(-T::one());
                acc(*a, ga.to_tensor())?;
            }
            Op::CLogdet(a, inv) => acc(*a, inv.scale_real(g.item()).to_tensor())?,
            Op::CTrace(a) => {
                let (n, m) = complex_shape(self.value(*a))?;
                let (gr, gi) = (g.data()[0], g.data()[1]);
                let mut ga = Tensor::zeros(&[n, m, 2]);
                for i in 0..n.min(m) {
                    ga.set(&[i, i, 0], gr);
                    ga.set(&[i, i, 1], gi);
                }
                acc(*a, ga)?;
            }
            Op::CBlockDiag(stack) => {
                let s = self.value(*stack).shape().to_vec();
                let (k, n, m) = (s[0], s[1], s[2]);
                let gs = Tensor::from_fn(&s, |i| g.get(&[i[0] * n + i[1], i[0] * m + i[2], i[3]]));
                let _ = k;
                acc(*stack, gs)?;
            }
        }
        Ok(())
    }
}
