//! User-scheduling network: scores per candidate user, top-`K` selection,
//! and supervision by greedy labels.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::complex::ComplexMatrix;
use crate::error::{shape_err, Error, Result};
use crate::mimo::{greedy_schedule, ChannelSample};
use crate::nn::{pattern_subsets, Ffc, MdeStack, MdiModule, Pattern};
use crate::scalar::Scalar;
use crate::tensor::{DimSubset, Tensor};

pub use crate::tepn::build_input;

#[derive(Debug, Clone, PartialEq)]
pub struct TeusnConfig {
    pub layers: usize,
    pub d_h: usize,
    pub pattern: Pattern,
    pub n_heads: usize,
    /// Users to select.
    pub k: usize,
    pub schedule: Option<Vec<Vec<DimSubset>>>,
}

impl Default for TeusnConfig {
    fn default() -> Self {
        Self { layers: 3, d_h: 8, pattern: Pattern::Full, n_heads: 2, k: 4, schedule: None }
    }
}

#[derive(Debug, Clone)]
pub struct TeusnModel {
    pub cfg: TeusnConfig,
    pub trunk: MdeStack,
    pub mdi: MdiModule,
    pub output: Ffc,
}

impl TeusnModel {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: TeusnConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 || cfg.d_h == 0 || cfg.k == 0 {
            return Err(Error::Invalid("TEUSN needs L ≥ 1, D_H ≥ 1 and K ≥ 1".into()));
        }
        let subsets = pattern_subsets(cfg.pattern, 3, cfg.layers, cfg.schedule.as_deref())?;
        let trunk = MdeStack::new(store, "teusn", 3, cfg.d_h, &subsets, 3, rng)?;
        let mdi = MdiModule::new(store, "teusn.mdi", &[2, 3], cfg.d_h, cfg.n_heads, rng)?;
        let output = Ffc::new(store, "teusn.ffc_out", cfg.d_h, 1, rng);
        Ok(Self { cfg, trunk, mdi, output })
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.mdi.num_params() + self.output.num_params()
    }

    /// `[B, K̃, N_R, N_T, 3]` → scores `[B, K̃]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 5 || shape[4] != 3 {
            return shape_err(format!("TEUSN input must be [B, K̃, N_R, N_T, 3], got {shape:?}"));
        }
        let h = self.trunk.forward(g, x)?;
        let h = self.mdi.forward(g, h)?;
        let y = self.output.forward(g, h)?;
        g.reshape(y, &shape[..2])
    }

    /// Mean binary cross-entropy of the user softmax against the labels.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, samples: &[ChannelSample<T>], labels: &[Vec<bool>]) -> Result<Var> {
        if samples.len() != labels.len() {
            return shape_err("one label per sample required");
        }
        let x = g.constant(build_input(samples)?);
        let y = self.forward(g, x)?;
        let p = g.softmax_last(y)?;
        let k_tilde = g.value(y).shape()[1];
        if labels.iter().any(|l| l.len() != k_tilde) {
            return shape_err("label length differs from K̃");
        }
        let target = Tensor::new(
            vec![samples.len(), k_tilde],
            labels.iter().flatten().map(|&e| if e { T::one() } else { T::zero() }).collect(),
        )?;
        let target = g.constant(target);
        bce_loss(g, p, target)
    }

    /// Scores for each sample.
    pub fn scores<T: Scalar>(&self, store: &ParamStore<T>, samples: &[ChannelSample<T>]) -> Result<Vec<Vec<T>>> {
        let chunks: Vec<Result<Vec<Vec<T>>>> = samples
            .par_chunks(64)
            .map(|chunk| {
                let mut g = Graph::with_params(store);
                let x = g.constant(build_input(chunk)?);
                let y = self.forward(&mut g, x)?;
                let k_tilde = g.value(y).shape()[1];
                Ok(g.value(y).data().chunks(k_tilde).map(<[T]>::to_vec).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Binary selections `η̂` with exactly `K` ones per sample.
    pub fn schedule<T: Scalar>(&self, store: &ParamStore<T>, samples: &[ChannelSample<T>]) -> Result<Vec<Vec<bool>>> {
        self.scores(store, samples)?
            .iter()
            .map(|y| softmax_topk(y, self.cfg.k).map(|(eta, _)| eta))
            .collect()
    }
}

/// Softmax probabilities and the indicator of the `K` largest, ties toward
/// the lower index.
pub fn softmax_topk<T: Scalar>(y: &[T], k: usize) -> Result<(Vec<bool>, Vec<T>)> {
    if k == 0 || k > y.len() {
        return Err(Error::Invalid(format!("cannot select {k} of {}", y.len())));
    }
    let m = y.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = y.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    let p: Vec<T> = e.iter().map(|&v| v / s).collect();
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut eta = vec![false; y.len()];
    for &i in &order[..k] {
        eta[i] = true;
    }
    Ok((eta, p))
}

/// `−mean(η* log p + (1 − η*) log(1 − p))` with `p` clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<'_, T>, p: Var, target: Var) -> Result<Var> {
    let eps = T::of(1e-12);
    let p = g.clamp(p, eps, T::one() - eps);
    let shape = g.value(p).shape().to_vec();
    let ones = g.constant(Tensor::ones(&shape));
    let lp = g.log(p);
    let q = g.sub(ones, p)?;
    let lq = g.log(q);
    let t1 = g.mul(target, lp)?;
    let not_t = g.sub(ones, target)?;
    let t2 = g.mul(not_t, lq)?;
    let s = g.add(t1, t2)?;
    let m = g.mean(s);
    Ok(g.neg(m))
}

/// Greedy labels for every sample under the given precoder.
pub fn gen_labels<T, F>(samples: &[ChannelSample<T>], k: usize, precoder: F) -> Result<Vec<Vec<bool>>>
where
    T: Scalar,
    F: Fn(&ChannelSample<T>) -> Result<Vec<ComplexMatrix<T>>> + Sync,
{
    samples.par_iter().map(|s| greedy_schedule(s, k, &precoder)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let (eta, p) = softmax_topk(&[3.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(eta, vec![true, false, true]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (eta, _) = softmax_topk(&[0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(eta, vec![true, true, false]);
        let (a, _) = softmax_topk(&[0.3, -1.0, 2.0, 0.1], 2).unwrap();
        let (b, _) = softmax_topk(&[100.3, 99.0, 102.0, 100.1], 2).unwrap();
        assert_eq!(a, b);
    }

    fn bce(p: Vec<f64>, t: Vec<f64>) -> f64 {
        let mut g = Graph::<f64>::new();
        let n = p.len();
        let p = g.constant(Tensor::new(vec![1, n], p).unwrap());
        let t = g.constant(Tensor::new(vec![1, n], t).unwrap());
        let l = bce_loss(&mut g, p, t).unwrap();
        g.value(l).item()
    }

    #[test]
    fn bce_values() {
        assert!((bce(vec![0.5; 4], vec![1.0, 0.0, 1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0]) < 1e-11);
        assert!(bce(vec![0.0, 1.0], vec![1.0, 0.0]).is_finite());
    }
}
