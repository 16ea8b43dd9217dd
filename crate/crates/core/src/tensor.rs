//! Dense row-major real tensors and the index-permutation primitives the
//! equivariant layers are assembled from.
//!
//! Dimension arguments typed as [`DimSubset`] and the `dim` of
//! [`Tensor::permute_dim`] are 1-based. Raw `axis` arguments on the lower-level
//! helpers are 0-based.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Advances a row-major multi-index; returns false after the last position.
fn next_index(idx: &mut [usize], shape: &[usize]) -> bool {
    for a in (0..shape.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return true;
        }
        idx[a] = 0;
    }
    false
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        if numel(&shape) != data.len() {
            return shape_err(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut out = Self::zeros(shape);
        let mut idx = vec![0; shape.len()];
        for v in out.data.iter_mut() {
            *v = f(&idx);
            next_index(&mut idx, shape);
        }
        out
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (a, (&i, &e)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {i} out of bounds for axis {a} of extent {e}");
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} += {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    /// `max|a-b| / max(max|a|, max|b|, tiny)`.
    pub fn max_rel_diff(&self, other: &Self) -> Result<T> {
        let scale = self.max_abs().max(other.max_abs()).max(T::min_positive_value());
        Ok(self.max_abs_diff(other)? / scale)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::DimOutOfRange {
                dim: axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// General axis transpose: output axis `i` is input axis `perm[i]` (0-based).
    pub fn permute_axes(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Permutation(format!("{perm:?} is not an axis permutation of rank {r}")));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0; r];
        loop {
            let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            if !next_index(&mut idx, &out_shape) {
                break;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Gathers positions `indices` along `axis` (0-based).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        self.check_axis(axis)?;
        let extent = self.shape[axis];
        if indices.is_empty() || indices.iter().any(|&i| i >= extent) {
            return shape_err(format!("indices {indices:?} invalid for extent {extent}"));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self { shape, data })
    }

    /// Adjoint of [`Tensor::index_select`]: scatter-adds `src` into a zero
    /// tensor of `shape`.
    pub fn index_scatter_add(shape: &[usize], axis: usize, indices: &[usize], src: &Self) -> Self {
        let mut out = Self::zeros(shape);
        let extent = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let dst = (o * extent + i) * inner;
                let s = (o * indices.len() + j) * inner;
                for t in 0..inner {
                    out.data[dst + t] += src.data[s + t];
                }
            }
        }
        out
    }

    /// Applies `p` along 1-based dimension `dim`: `out[.., i, ..] = x[.., p(i), ..]`.
    pub fn permute_dim(&self, dim: usize, p: &Permutation) -> Result<Self> {
        if dim == 0 || dim > self.rank() {
            return Err(Error::DimOutOfRange { dim, rank: self.rank() });
        }
        if p.len() != self.shape[dim - 1] {
            return Err(Error::Permutation(format!(
                "length {} does not match extent {} of dim {dim}",
                p.len(),
                self.shape[dim - 1]
            )));
        }
        self.index_select(dim - 1, &p.zero_based())
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis)?;
        if len == 0 || start + len > self.shape[axis] {
            return shape_err(format!(
                "slice {start}..{} out of extent {}",
                start + len,
                self.shape[axis]
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Concatenates along an existing axis (0-based).
    pub fn concat(tensors: &[Self], axis: usize) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        first.check_axis(axis)?;
        for t in tensors {
            if t.rank() != first.rank()
                || t.shape.iter().enumerate().any(|(a, &e)| a != axis && e != first.shape[a])
            {
                return shape_err(format!("concat {:?} with {:?} on axis {axis}", first.shape, t.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = tensors.iter().map(|t| t.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Concatenation along the trailing feature dimension.
    pub fn concat_feature(tensors: &[Self]) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        Self::concat(tensors, first.rank() - 1)
    }

    /// Stacks equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(tensors: &[Self], axis: usize) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        if axis > first.rank() {
            return Err(Error::DimOutOfRange { dim: axis, rank: first.rank() });
        }
        if tensors.iter().any(|t| t.shape != first.shape) {
            return shape_err("stack requires equal shapes");
        }
        let mut expanded = first.shape.clone();
        expanded.insert(axis, 1);
        let parts: Vec<Self> = tensors
            .iter()
            .map(|t| t.reshape(&expanded))
            .collect::<Result<_>>()?;
        Self::concat(&parts, axis)
    }

    /// Sums over `axes` (0-based), keeping them with extent 1.
    pub fn reduce_sum_keep(&self, axes: &[usize]) -> Result<Self> {
        for &a in axes {
            self.check_axis(a)?;
        }
        let mut out_shape = self.shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let out_strides = strides(&out_shape);
        let mapped: Vec<usize> = (0..self.rank())
            .map(|a| if out_shape[a] == 1 { 0 } else { out_strides[a] })
            .collect();
        let mut out = Self::zeros(&out_shape);
        let mut idx = vec![0; self.rank()];
        for &v in &self.data {
            let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
            out.data[off] += v;
            next_index(&mut idx, &self.shape);
        }
        Ok(out)
    }

    pub fn reduce_mean_keep(&self, axes: &[usize]) -> Result<Self> {
        let count: usize = axes.iter().map(|&a| self.shape.get(a).copied().unwrap_or(1)).product();
        let s = self.reduce_sum_keep(axes)?;
        Ok(s.scale(T::one() / T::from_usize(count).unwrap()))
    }

    /// Expands extent-1 axes to `shape` (same rank required).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if shape.len() != self.rank()
            || self.shape.iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return shape_err(format!("cannot broadcast {:?} to {shape:?}", self.shape));
        }
        let in_strides = strides(&self.shape);
        let mapped: Vec<usize> = (0..self.rank())
            .map(|a| if self.shape[a] == 1 { 0 } else { in_strides[a] })
            .collect();
        let mut data = Vec::with_capacity(numel(shape));
        let mut idx = vec![0; shape.len()];
        loop {
            let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            if !next_index(&mut idx, shape) {
                break;
            }
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Averages over the dimensions in `dims` and repeats the result back to
    /// the original shape. `mean_broadcast(x, {}) == x`.
    pub fn mean_broadcast(&self, dims: &DimSubset) -> Result<Self> {
        if dims.is_empty() {
            return Ok(self.clone());
        }
        let axes = dims.axes(self.rank())?;
        self.reduce_mean_keep(&axes)?.broadcast_to(&self.shape)
    }

    /// `y = x W + b` applied to every fiber of the trailing dimension.
    pub fn last_dim_linear(&self, w: &Self, b: Option<&Self>) -> Result<Self> {
        let d_in = *self.shape.last().ok_or_else(|| Error::Shape("rank-0 input".into()))?;
        if w.rank() != 2 || w.shape[0] != d_in {
            return shape_err(format!("weight {:?} for input {:?}", w.shape, self.shape));
        }
        let d_out = w.shape[1];
        if let Some(b) = b {
            if b.shape != [d_out] {
                return shape_err(format!("bias {:?} for output width {d_out}", b.shape));
            }
        }
        let rows = self.len() / d_in;
        let mut data = vec![T::zero(); rows * d_out];
        matmul_into(&self.data, &w.data, &mut data, rows, d_in, d_out);
        if let Some(b) = b {
            for row in data.chunks_mut(d_out) {
                for (y, &bb) in row.iter_mut().zip(&b.data) {
                    *y += bb;
                }
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = d_out;
        Ok(Self { shape, data })
    }
}

/// `c += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Bijection on `{1..M}` stored in 1-based form; `(p ∘ x)[i] = x[p(i)]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let m = map.len();
        let mut seen = vec![false; m];
        for &v in &map {
            if v == 0 || v > m || std::mem::replace(&mut seen[v - 1], true) {
                return Err(Error::Permutation(format!("{map:?} is not a bijection on 1..={m}")));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(m: usize) -> Self {
        Self { map: (1..=m).collect() }
    }

    pub fn random<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (1..=m).collect();
        map.shuffle(rng);
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `p(i)` for 1-based `i`.
    pub fn apply(&self, i: usize) -> usize {
        self.map[i - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn zero_based(&self) -> Vec<usize> {
        self.map.iter().map(|&v| v - 1).collect()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v - 1] = i + 1;
        }
        Self { map: inv }
    }
}

/// Set of 1-based dimension indices, ordered canonically by cardinality and
/// then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DimSubset {
    dims: BTreeSet<usize>,
}

impl DimSubset {
    pub fn new(dims: impl IntoIterator<Item = usize>) -> Result<Self> {
        let dims: BTreeSet<usize> = dims.into_iter().collect();
        if dims.contains(&0) {
            return Err(Error::Invalid("dimension indices are 1-based".into()));
        }
        Ok(Self { dims })
    }

    pub fn empty() -> Self {
        Self { dims: BTreeSet::new() }
    }

    pub fn singleton(d: usize) -> Self {
        assert!(d >= 1, "dimension indices are 1-based");
        Self { dims: [d].into_iter().collect() }
    }

    /// `{1..=n}`.
    pub fn all(n: usize) -> Self {
        Self { dims: (1..=n).collect() }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn contains(&self, d: usize) -> bool {
        self.dims.contains(&d)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.dims.iter().copied()
    }

    pub fn max_dim(&self) -> Option<usize> {
        self.dims.iter().next_back().copied()
    }

    /// 0-based axes, validated against `rank`.
    pub fn axes(&self, rank: usize) -> Result<Vec<usize>> {
        self.iter()
            .map(|d| {
                if d > rank {
                    Err(Error::DimOutOfRange { dim: d, rank })
                } else {
                    Ok(d - 1)
                }
            })
            .collect()
    }

    /// All `2^n` subsets of `{1..=n}` in canonical order.
    pub fn power_set(n: usize) -> Vec<Self> {
        let mut out: Vec<Self> = (0u32..(1 << n))
            .map(|mask| Self {
                dims: (0..n).filter(|b| mask & (1 << b) != 0).map(|b| b + 1).collect(),
            })
            .collect();
        out.sort();
        out
    }
}

impl Ord for DimSubset {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| self.dims.iter().cmp(other.dims.iter()))
    }
}

impl PartialOrd for DimSubset {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for DimSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Applies `f` to every slice obtained by fixing the (1-based) `batch_dims`,
/// in parallel, and reassembles the results.
///
/// When `f` preserves the slice shape the batch dimensions are put back in
/// their original positions; otherwise they lead the output.
pub fn batch_apply<T, F>(x: &Tensor<T>, batch_dims: &DimSubset, f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    if batch_dims.is_empty() {
        return f(x);
    }
    let batch_axes = batch_dims.axes(x.rank())?;
    if batch_axes.len() == x.rank() {
        return shape_err("batch_apply needs at least one non-batch dimension");
    }
    let rest_axes: Vec<usize> = (0..x.rank()).filter(|a| !batch_axes.contains(a)).collect();
    let perm: Vec<usize> = batch_axes.iter().chain(&rest_axes).copied().collect();
    let moved = x.permute_axes(&perm)?;
    let batch_shape: Vec<usize> = batch_axes.iter().map(|&a| x.shape[a]).collect();
    let rest_shape: Vec<usize> = rest_axes.iter().map(|&a| x.shape[a]).collect();
    let nb = numel(&batch_shape);
    let slice_len = numel(&rest_shape);
    let outputs: Vec<Tensor<T>> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let slice = Tensor {
                shape: rest_shape.clone(),
                data: moved.data[b * slice_len..(b + 1) * slice_len].to_vec(),
            };
            f(&slice)
        })
        .collect::<Result<_>>()?;
    let out_shape = outputs[0].shape.clone();
    if outputs.iter().any(|o| o.shape != out_shape) {
        return shape_err("batch_apply: slices produced different shapes");
    }
    let mut data = Vec::with_capacity(nb * numel(&out_shape));
    for o in outputs {
        data.extend(o.data);
    }
    let mut full_shape = batch_shape;
    full_shape.extend_from_slice(&out_shape);
    let stacked = Tensor { shape: full_shape, data };
    if out_shape == rest_shape {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        stacked.permute_axes(&inv)
    } else {
        Ok(stacked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn permute_dim_swaps_rows() {
        let x = t(&[2, 2], &[1., 3., 5., 7.]);
        let p = Permutation::new(vec![2, 1]).unwrap();
        assert_eq!(x.permute_dim(1, &p).unwrap(), t(&[2, 2], &[5., 7., 1., 3.]));
        assert_eq!(x.permute_dim(1, &Permutation::identity(2)).unwrap(), x);
    }

    #[test]
    fn permute_dim_follows_cycle_convention() {
        // pi o [x1,x2,x3] = [x2,x3,x1] with pi(1)=2, pi(2)=3, pi(3)=1
        let x = t(&[3], &[10., 20., 30.]);
        let p = Permutation::new(vec![2, 3, 1]).unwrap();
        assert_eq!(x.permute_dim(1, &p).unwrap(), t(&[3], &[20., 30., 10.]));
    }

    #[test]
    fn permute_dim_errors() {
        let x = t(&[2, 3], &[0.; 6]);
        assert!(matches!(
            x.permute_dim(3, &Permutation::identity(2)),
            Err(Error::DimOutOfRange { .. })
        ));
        assert!(matches!(
            x.permute_dim(1, &Permutation::identity(3)),
            Err(Error::Permutation(_))
        ));
        assert!(Permutation::new(vec![1, 1]).is_err());
        assert!(Permutation::new(vec![0, 1]).is_err());
    }

    #[test]
    fn mean_broadcast_examples() {
        let x = t(&[2, 2], &[1., 3., 5., 7.]);
        assert_eq!(
            x.mean_broadcast(&DimSubset::singleton(1)).unwrap(),
            t(&[2, 2], &[3., 5., 3., 5.])
        );
        assert_eq!(
            x.mean_broadcast(&DimSubset::all(2)).unwrap(),
            t(&[2, 2], &[4.; 4])
        );
        assert_eq!(x.mean_broadcast(&DimSubset::empty()).unwrap(), x);
        assert!(x.mean_broadcast(&DimSubset::singleton(3)).is_err());
    }

    #[test]
    fn last_dim_linear_examples() {
        let x = t(&[1, 2], &[1., 2.]);
        let w = t(&[2, 1], &[1., 1.]);
        let b = t(&[1], &[3.]);
        assert_eq!(x.last_dim_linear(&w, Some(&b)).unwrap(), t(&[1, 1], &[6.]));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4], &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        assert_eq!(x.last_dim_linear(&eye, Some(&Tensor::zeros(&[4]))).unwrap(), x);
        assert!(x.last_dim_linear(&t(&[3, 1], &[0.; 3]), None).is_err());
    }

    #[test]
    fn linear_commutes_with_leading_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4, 2], &mut rng);
        let w = random(&[2, 5], &mut rng);
        let b = random(&[5], &mut rng);
        let p = Permutation::random(4, &mut rng);
        let a = x.permute_dim(2, &p).unwrap().last_dim_linear(&w, Some(&b)).unwrap();
        let c = x.last_dim_linear(&w, Some(&b)).unwrap().permute_dim(2, &p).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn stack_and_concat() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        let s = Tensor::stack(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.slice_axis(0, 0, 1).unwrap().reshape(&[2, 2]).unwrap(), a);
        assert_eq!(s.slice_axis(0, 1, 1).unwrap().reshape(&[2, 2]).unwrap(), b);

        let x = Tensor::<f64>::zeros(&[2, 3, 3]);
        let y = Tensor::<f64>::ones(&[2, 3, 1]);
        let c = Tensor::concat_feature(&[x, y]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4]);
        assert_eq!(c.get(&[1, 2, 3]), 1.0);
        assert!(Tensor::concat_feature(&[Tensor::<f64>::zeros(&[2, 3]), Tensor::zeros(&[3, 3])]).is_err());
    }

    #[test]
    fn batch_apply_identity_and_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 4, 2], &mut rng);
        let batch = DimSubset::singleton(1);
        assert_eq!(batch_apply(&x, &batch, |s| Ok(s.clone())).unwrap(), x);

        // per-slice mean over the second dim equals global mean_broadcast over dim 2
        let per = batch_apply(&x, &batch, |s| s.mean_broadcast(&DimSubset::singleton(1))).unwrap();
        let global = x.mean_broadcast(&DimSubset::singleton(2)).unwrap();
        assert!(per.max_abs_diff(&global).unwrap() < 1e-15);

        let mut y = x.clone();
        y.set(&[1, 0, 0], 100.0);
        let fx = batch_apply(&x, &batch, |s| s.mean_broadcast(&DimSubset::all(2))).unwrap();
        let fy = batch_apply(&y, &batch, |s| s.mean_broadcast(&DimSubset::all(2))).unwrap();
        for b in 0..3 {
            let same = fx.slice_axis(0, b, 1).unwrap() == fy.slice_axis(0, b, 1).unwrap();
            assert_eq!(same, b != 1);
        }
    }

    #[test]
    fn batch_apply_middle_dim_restores_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4], &mut rng);
        let out = batch_apply(&x, &DimSubset::singleton(2), |s| Ok(s.scale(2.0))).unwrap();
        assert_eq!(out, x.scale(2.0));
    }

    #[test]
    fn power_set_canonical_order() {
        let names: Vec<String> = DimSubset::power_set(3).iter().map(|s| s.to_string()).collect();
        assert_eq!(
            names,
            ["{}", "{1}", "{2}", "{3}", "{1,2}", "{1,3}", "{2,3}", "{1,2,3}"]
        );
    }

    #[test]
    fn reduce_and_broadcast_roundtrip() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = x.reduce_sum_keep(&[1]).unwrap();
        assert_eq!(s, t(&[2, 1], &[6., 15.]));
        assert_eq!(s.broadcast_to(&[2, 3]).unwrap(), t(&[2, 3], &[6., 6., 6., 15., 15., 15.]));
        assert!(s.broadcast_to(&[3, 3]).is_err());
    }
}
