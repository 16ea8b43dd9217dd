//! Precoding network: channel tensor in, auxiliary tensors `(A, U)` out, and
//! the closed-form precoder on top.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::complex::ComplexMatrix;
use crate::error::{shape_err, Error, Result};
use crate::mimo::{cfp, cfp_graph, sum_rate_graph, AuxTensors, ChannelSample, PrecodingSolution};
use crate::nn::{pattern_subsets, Ffc, HoeLayer, LayerNorm, MdeStack, MdiModule, Pattern};
use crate::scalar::Scalar;
use crate::tensor::{DimSubset, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TepnConfig {
    pub layers: usize,
    pub d_h: usize,
    pub pattern: Pattern,
    pub n_heads: usize,
    /// Replace `A_k` by its Hermitian part before the closed form.
    pub hermitian_a: bool,
    /// Explicit per-layer MDE subsets overriding the pattern default.
    pub schedule: Option<Vec<Vec<DimSubset>>>,
}

impl Default for TepnConfig {
    fn default() -> Self {
        Self { layers: 3, d_h: 8, pattern: Pattern::Full, n_heads: 2, hermitian_a: false, schedule: None }
    }
}

/// Feature channels `[Re H, Im H, σ²]` for a batch: `[B, K, N_R, N_T, 3]`.
pub fn build_input<T: Scalar>(samples: &[ChannelSample<T>]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (k, n_r, n_t) = (first.k(), first.n_r(), first.n_t());
    let mut data = Vec::with_capacity(samples.len() * k * n_r * n_t * 3);
    for s in samples {
        if (s.k(), s.n_r(), s.n_t()) != (k, n_r, n_t) {
            return shape_err("batch mixes system sizes");
        }
        for hk in &s.h {
            for z in hk.data() {
                data.extend([z.re, z.im, s.sigma2]);
            }
        }
    }
    Tensor::new(vec![samples.len(), k, n_r, n_t, 3], data)
}

/// Splits a `[K, N_R, N_R, 4]` output into `A = ch0 + j·ch1`, `U = ch2 + j·ch3`.
pub fn output_to_aux<T: Scalar>(y: &Tensor<T>) -> Result<AuxTensors<T>> {
    let s = y.shape();
    if s.len() != 4 || s[3] != 4 || s[1] != s[2] {
        return shape_err(format!("output must be [K, N_R, N_R, 4], got {s:?}"));
    }
    let split = |c: usize| -> Result<Vec<ComplexMatrix<T>>> {
        (0..s[0])
            .map(|k| {
                let block = y.slice_axis(0, k, 1)?.slice_axis(3, c, 2)?.reshape(&[s[1], s[2], 2])?;
                ComplexMatrix::from_tensor(&block)
            })
            .collect()
    };
    Ok(AuxTensors { a: split(0)?, u: split(2)? })
}

#[derive(Debug, Clone)]
pub struct TepnModel<T> {
    pub cfg: TepnConfig,
    pub trunk: MdeStack,
    pub mdi: MdiModule,
    pub hoe: HoeLayer<T>,
    pub hoe_norm: LayerNorm,
    pub output: Ffc,
}

impl<T: Scalar> TepnModel<T> {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: TepnConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 || cfg.d_h == 0 {
            return Err(Error::Invalid("TEPN needs L ≥ 1 and D_H ≥ 1".into()));
        }
        let subsets = pattern_subsets(cfg.pattern, 3, cfg.layers, cfg.schedule.as_deref())?;
        let trunk = MdeStack::new(store, "tepn", 3, cfg.d_h, &subsets, 3, rng)?;
        let mdi = MdiModule::new(store, "tepn.mdi", &[3], cfg.d_h, cfg.n_heads, rng)?;
        let hoe = HoeLayer::new(store, "tepn.hoe", 1, 2, cfg.d_h, cfg.d_h, rng)?;
        let hoe_norm = LayerNorm::new(store, "tepn.hoe_ln", cfg.d_h);
        let output = Ffc::new(store, "tepn.ffc_out", cfg.d_h, 4, rng);
        Ok(Self { cfg, trunk, mdi, hoe, hoe_norm, output })
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params()
            + self.mdi.num_params()
            + self.hoe.num_params()
            + self.hoe_norm.num_params()
            + self.output.num_params()
    }

    /// `[B, K, N_R, N_T, 3]` → `[B, K, N_R, N_R, 4]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 5 || shape[4] != 3 {
            return shape_err(format!("TEPN input must be [B, K, N_R, N_T, 3], got {shape:?}"));
        }
        let (b, k, n_r) = (shape[0], shape[1], shape[2]);
        let h = self.trunk.forward(g, x)?;
        let h = self.mdi.forward(g, h)?;
        let h = g.reshape(h, &[b * k, n_r, self.cfg.d_h])?;
        let h = self.hoe.forward(g, h)?;
        let h = g.relu(h);
        let h = self.hoe_norm.forward(g, h)?;
        let y = self.output.forward(g, h)?;
        g.reshape(y, &[b, k, n_r, n_r, 4])
    }

    /// Per-sample `A`, `U` stacks `[K, N_R, N_R, 2]` from the network output.
    fn aux_vars(&self, g: &mut Graph<'_, T>, y: Var, b: usize) -> Result<(Var, Var)> {
        let s = g.value(y).shape().to_vec();
        let one = g.slice(y, 0, b, 1)?;
        let one = g.reshape(one, &s[1..])?;
        let mut a = g.slice(one, 3, 0, 2)?;
        let u = g.slice(one, 3, 2, 2)?;
        if self.cfg.hermitian_a {
            let t = g.permute_axes(a, &[0, 2, 1, 3])?;
            let conj = g.constant(Tensor::from_fn(&[s[1], s[2], s[3], 2], |i| {
                if i[3] == 0 {
                    T::one()
                } else {
                    -T::one()
                }
            }));
            let ah = g.mul(t, conj)?;
            let sum = g.add(a, ah)?;
            a = g.scale(sum, T::of(0.5));
        }
        Ok((a, u))
    }

    /// Negative mean sum-rate of the batch.
    pub fn loss(&self, g: &mut Graph<'_, T>, samples: &[ChannelSample<T>]) -> Result<Var> {
        let x = g.constant(build_input(samples)?);
        let y = self.forward(g, x)?;
        let mut total: Option<Var> = None;
        for (b, s) in samples.iter().enumerate() {
            let (a, u) = self.aux_vars(g, y, b)?;
            let hs = g.constant(s.stacked().to_tensor());
            let v = cfp_graph(g, hs, a, u, s.sigma2, s.p_t)?;
            let r = sum_rate_graph(g, hs, v, s.sigma2, s.k(), s.n_r())?;
            total = Some(match total {
                None => r,
                Some(t) => g.add(t, r)?,
            });
        }
        let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
        Ok(g.scale(total, -T::one() / T::of(samples.len() as f64)))
    }

    /// Auxiliary tensors for each sample, as fed to the closed form.
    pub fn predict_aux(&self, store: &ParamStore<T>, samples: &[ChannelSample<T>]) -> Result<Vec<AuxTensors<T>>> {
        let mut g = Graph::with_params(store);
        let x = g.constant(build_input(samples)?);
        let y = self.forward(&mut g, x)?;
        (0..samples.len())
            .map(|b| {
                let (a, u) = self.aux_vars(&mut g, y, b)?;
                let (a, u) = (g.value(a).clone(), g.value(u).clone());
                let y = Tensor::concat(&[a, u], 3)?;
                output_to_aux(&y)
            })
            .collect()
    }

    /// Network-driven closed-form precoders, evaluated in parallel chunks.
    pub fn precode(&self, store: &ParamStore<T>, samples: &[ChannelSample<T>]) -> Result<Vec<PrecodingSolution<T>>> {
        let chunks: Vec<Result<Vec<PrecodingSolution<T>>>> = samples
            .par_chunks(32)
            .map(|chunk| {
                let aux = self.predict_aux(store, chunk)?;
                chunk.iter().zip(&aux).map(|(s, a)| cfp(s, a)).collect()
            })
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}
