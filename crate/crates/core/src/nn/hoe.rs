use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;

use super::glorot_bound;
use crate::autodiff::{Graph, ParamId, ParamStore, SparseMap, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A set partition of `{0, …, n-1}`, stored as its restricted-growth string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetPartition {
    rgs: Vec<usize>,
}

impl SetPartition {
    pub fn from_rgs(rgs: Vec<usize>) -> Result<Self> {
        let mut max = None::<usize>;
        for &r in &rgs {
            let limit = max.map_or(0, |m| m + 1);
            if r > limit {
                return Err(Error::Invalid(format!("not a restricted-growth string: {rgs:?}")));
            }
            max = Some(max.map_or(r, |m| m.max(r)));
        }
        Ok(Self { rgs })
    }

    pub fn len(&self) -> usize {
        self.rgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgs.is_empty()
    }

    pub fn rgs(&self) -> &[usize] {
        &self.rgs
    }

    pub fn num_blocks(&self) -> usize {
        self.rgs.iter().max().map_or(0, |m| m + 1)
    }

    /// Block of each element.
    pub fn block_of(&self, e: usize) -> usize {
        self.rgs[e]
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut b = vec![Vec::new(); self.num_blocks()];
        for (e, &r) in self.rgs.iter().enumerate() {
            b[r].push(e);
        }
        b
    }
}

impl fmt::Display for SetPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .blocks()
            .iter()
            .map(|b| {
                let items: Vec<String> = b.iter().map(|e| e.to_string()).collect();
                format!("{{{}}}", items.join(","))
            })
            .collect();
        write!(f, "{}", parts.join(""))
    }
}

/// All set partitions of an `n`-element set, `1 ≤ n ≤ 6`, in lexicographic
/// order of their restricted-growth strings.
pub fn enumerate_partitions(n: usize) -> Result<Vec<SetPartition>> {
    if !(1..=6).contains(&n) {
        return Err(Error::Invalid(format!("partition size {n} outside 1..=6")));
    }
    fn rec(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<SetPartition>) {
        if prefix.len() == n {
            out.push(SetPartition { rgs: prefix.clone() });
            return;
        }
        for r in 0..=max + 1 {
            prefix.push(r);
            rec(prefix, max.max(r), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    let mut prefix = vec![0];
    rec(&mut prefix, 0, n, &mut out);
    Ok(out)
}

fn tuples(m: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = m.pow(len as u32);
    (0..total).map(move |mut c| {
        let mut t = vec![0; len];
        for slot in t.iter_mut().rev() {
            *slot = c % m;
            c /= m;
        }
        t
    })
}

fn flat(t: &[usize], m: usize) -> usize {
    t.iter().fold(0, |acc, &i| acc * m + i)
}

/// Position map of one partition for a `p`-order input and `q`-order output
/// with extent `m`. Elements `0..q` are the outputs, `q..q+p` the inputs.
///
/// An output tuple is nonzero iff outputs sharing a block share an index.
/// Inputs in a block with an output copy that index; blocks made only of
/// inputs are averaged over their common index.
pub fn hoe_feature_map<T: Scalar>(part: &SetPartition, p: usize, q: usize, m: usize) -> Result<SparseMap<T>> {
    if part.len() != p + q {
        return Err(Error::Invalid(format!("partition of {} elements for order {p}-{q}", part.len())));
    }
    let blocks = part.num_blocks();
    let input_only: Vec<usize> = (0..blocks)
        .filter(|&b| (0..q).all(|o| part.block_of(o) != b))
        .collect();
    let w = T::one() / T::from_usize(m.pow(input_only.len() as u32)).unwrap();
    let mut entries = Vec::new();
    for out in tuples(m, q) {
        let mut value: Vec<Option<usize>> = vec![None; blocks];
        let consistent = (0..q).all(|o| {
            let b = part.block_of(o);
            match value[b] {
                None => {
                    value[b] = Some(out[o]);
                    true
                }
                Some(v) => v == out[o],
            }
        });
        if !consistent {
            continue;
        }
        let o_pos = flat(&out, m);
        for free in tuples(m, input_only.len()) {
            for (&b, &v) in input_only.iter().zip(&free) {
                value[b] = Some(v);
            }
            let inp: Vec<usize> = (0..p).map(|i| value[part.block_of(q + i)].unwrap()).collect();
            entries.push((o_pos, flat(&inp, m), w));
        }
    }
    Ok(SparseMap { n_in: m.pow(p as u32), n_out: m.pow(q as u32), entries })
}

/// Indicator of output tuples whose same-block outputs share an index.
fn bias_pattern(part: &SetPartition, q: usize, m: usize) -> Vec<bool> {
    tuples(m, q)
        .map(|t| (0..q).all(|a| (0..q).all(|b| part.block_of(a) != part.block_of(b) || t[a] == t[b])))
        .collect()
}

type MapCache<T> = Arc<Mutex<HashMap<usize, Arc<Vec<Arc<SparseMap<T>>>>>>>;

/// High-order (`p`-`q`) equivariant linear layer over one shared extent.
#[derive(Debug, Clone)]
pub struct HoeLayer<T> {
    pub p: usize,
    pub q: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub partitions: Vec<SetPartition>,
    pub weights: Vec<ParamId>,
    pub bias_partitions: Vec<SetPartition>,
    pub biases: Vec<ParamId>,
    cache: MapCache<T>,
}

impl<T: Scalar> HoeLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        p: usize,
        q: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if p == 0 || q == 0 || p + q > 6 {
            return Err(Error::Invalid(format!("unsupported order {p}-{q}")));
        }
        let partitions = enumerate_partitions(p + q)?;
        let bias_partitions = enumerate_partitions(q)?;
        let bound = glorot_bound(d_in, d_out) / partitions.len() as f64;
        let weights = partitions
            .iter()
            .map(|pt| store.add_uniform(format!("{name}.w{pt}"), &[d_in, d_out], bound, rng))
            .collect();
        let biases = bias_partitions
            .iter()
            .map(|pt| store.add(format!("{name}.b{pt}"), Tensor::zeros(&[d_out])))
            .collect();
        Ok(Self {
            p,
            q,
            d_in,
            d_out,
            partitions,
            weights,
            bias_partitions,
            biases,
            cache: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    pub fn num_params(&self) -> usize {
        self.partitions.len() * self.d_in * self.d_out + self.bias_partitions.len() * self.d_out
    }

    fn maps(&self, m: usize) -> Result<Arc<Vec<Arc<SparseMap<T>>>>> {
        let mut cache = self.cache.lock().expect("map cache poisoned");
        if let Some(v) = cache.get(&m) {
            return Ok(v.clone());
        }
        let maps = self
            .partitions
            .iter()
            .map(|pt| hoe_feature_map(pt, self.p, self.q, m).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let maps = Arc::new(maps);
        cache.insert(m, maps.clone());
        Ok(maps)
    }

    /// `x`: `[B, M (p times), D_I]` → `[B, M (q times), D_O]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != self.p + 2 || shape[self.p + 1] != self.d_in {
            return shape_err(format!("HOE {}-{} layer got {shape:?}", self.p, self.q));
        }
        let (b, m) = (shape[0], shape[1]);
        if shape[1..=self.p].iter().any(|&e| e != m) {
            return shape_err(format!("HOE input extents must agree, got {shape:?}"));
        }
        let flat_in = g.reshape(x, &[b, m.pow(self.p as u32), self.d_in])?;
        let feats = self
            .maps(m)?
            .iter()
            .map(|map| g.sparse_map(flat_in, map.clone()))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&feats, 2)?;
        let ws: Vec<Var> = self.weights.iter().map(|&w| g.param(w)).collect();
        let w = g.concat(&ws, 0)?;
        let y = g.linear(stacked, w, None)?;

        let n_out = m.pow(self.q as u32);
        let patterns: Vec<Vec<bool>> = self.bias_partitions.iter().map(|pt| bias_pattern(pt, self.q, m)).collect();
        let nb = patterns.len();
        let mask = g.constant(Tensor::from_fn(&[1, n_out, nb], |i| {
            if patterns[i[2]][i[1]] {
                T::one()
            } else {
                T::zero()
            }
        }));
        let bs = self
            .biases
            .iter()
            .map(|&id| {
                let v = g.param(id);
                g.reshape(v, &[1, self.d_out])
            })
            .collect::<Result<Vec<_>>>()?;
        let bmat = g.concat(&bs, 0)?;
        let bias = g.linear(mask, bmat, None)?;
        let bias = g.broadcast_to(bias, &[b, n_out, self.d_out])?;
        let y = g.add(y, bias)?;

        let mut out_shape = vec![b];
        out_shape.extend(std::iter::repeat_n(m, self.q));
        out_shape.push(self.d_out);
        g.reshape(y, &out_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bell_numbers() {
        let counts: Vec<usize> = (1..=6).map(|n| enumerate_partitions(n).unwrap().len()).collect();
        assert_eq!(counts, vec![1, 2, 5, 15, 52, 203]);
        assert!(enumerate_partitions(0).is_err());
        assert!(enumerate_partitions(7).is_err());
    }

    #[test]
    fn brute_force_count_of_four() {
        // every map {0..4} -> {0..4} canonicalised to its restricted-growth form
        let mut seen = std::collections::BTreeSet::new();
        for code in 0..4usize.pow(4) {
            let labels: Vec<usize> = (0..4).map(|i| (code / 4usize.pow(i)) % 4).collect();
            let mut relabel = HashMap::new();
            let rgs: Vec<usize> = labels
                .iter()
                .map(|l| {
                    let next = relabel.len();
                    *relabel.entry(*l).or_insert(next)
                })
                .collect();
            seen.insert(rgs);
        }
        assert_eq!(seen.len(), 15);
    }

    #[test]
    fn rgs_validation() {
        assert!(SetPartition::from_rgs(vec![0, 1, 0, 2]).is_ok());
        assert!(SetPartition::from_rgs(vec![0, 2]).is_err());
        assert!(SetPartition::from_rgs(vec![1]).is_err());
    }

    fn apply(part: &[usize], x: &[f64]) -> Vec<f64> {
        let m = x.len();
        let map = hoe_feature_map::<f64>(&SetPartition::from_rgs(part.to_vec()).unwrap(), 1, 2, m).unwrap();
        let t = Tensor::new(vec![1, m, 1], x.to_vec()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = g.sparse_map(v, Arc::new(map)).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn one_two_patterns() {
        let (a, b) = (2.0, 6.0);
        // {o1,o2,i1}: diagonal copy
        assert_eq!(apply(&[0, 0, 0], &[a, b]), vec![a, 0.0, 0.0, b]);
        // {o1}{o2}{i1}: constant mean
        assert_eq!(apply(&[0, 1, 2], &[a, b]), vec![4.0; 4]);
        // {o1}{o2,i1}: entry (o1, t) = x[t]
        assert_eq!(apply(&[0, 1, 1], &[a, b]), vec![a, b, a, b]);
        // {o1,i1}{o2}: entry (t, o2) = x[t]
        assert_eq!(apply(&[0, 1, 0], &[a, b]), vec![a, a, b, b]);
        // {o1,o2}{i1}: diagonal mean
        assert_eq!(apply(&[0, 0, 1], &[a, b]), vec![4.0, 0.0, 0.0, 4.0]);
    }
}
