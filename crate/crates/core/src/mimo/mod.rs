//! MU-MIMO downlink substrate: channels, sum-rate, closed-form and iterative
//! precoders, and user scheduling.
//!
//! Precoders are returned per user as `W_k ∈ ℂ^{N_R×N_T}`; the transmitted
//! signal is `Σ_k W_kᴴ s_k`.

mod precode;
mod rate;
mod schedule;

pub use precode::{
    cfp, cfp_graph, mmse_precoder, precoder_from_columns, random_precoder, wmmse, zf_precoder, AuxTensors,
    PrecodingSolution, WmmseInit, WmmseOptions, WmmseResult,
};
pub use rate::{sum_rate, sum_rate_graph};
pub use schedule::{eval_schedule, greedy_schedule, random_schedule, BaselinePrecoder};

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::complex::ComplexMatrix;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Permutation, Tensor};

/// System dimensions and power budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemConfig {
    /// Served users.
    pub k: usize,
    /// Candidate users (scheduling only; equals `k` otherwise).
    pub k_tilde: usize,
    pub n_r: usize,
    pub n_t: usize,
    pub p_t: f64,
    pub sigma2: f64,
}

impl SystemConfig {
    pub fn new(k: usize, n_r: usize, n_t: usize) -> Self {
        Self { k, k_tilde: k, n_r, n_t, p_t: 1.0, sigma2: 1.0 }
    }

    /// Sets `σ²` so that `P_T/σ²` equals `snr_db`.
    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.sigma2 = self.p_t / db_to_linear(snr_db);
        self
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * (self.p_t / self.sigma2).log10()
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Channel state of one sample: `H_k ∈ ℂ^{N_R×N_T}` for each user.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample<T> {
    pub h: Vec<ComplexMatrix<T>>,
    pub sigma2: T,
    pub p_t: T,
}

impl<T: Scalar> ChannelSample<T> {
    pub fn new(h: Vec<ComplexMatrix<T>>, sigma2: T, p_t: T) -> Result<Self> {
        let first = h.first().ok_or_else(|| crate::Error::Shape("no users".into()))?;
        let (r, c) = (first.rows(), first.cols());
        if h.iter().any(|m| m.rows() != r || m.cols() != c) {
            return shape_err("user channels differ in shape");
        }
        Ok(Self { h, sigma2, p_t })
    }

    pub fn k(&self) -> usize {
        self.h.len()
    }

    pub fn n_r(&self) -> usize {
        self.h[0].rows()
    }

    pub fn n_t(&self) -> usize {
        self.h[0].cols()
    }

    pub fn with_sigma2(&self, sigma2: T) -> Self {
        Self { sigma2, ..self.clone() }
    }

    /// `Σ_k ‖H_k‖²_F`.
    pub fn energy(&self) -> T {
        self.h.iter().map(ComplexMatrix::frobenius_sq).sum()
    }

    /// Rows of all users stacked: `[K·N_R, N_T]`.
    pub fn stacked(&self) -> ComplexMatrix<T> {
        ComplexMatrix::vstack(&self.h).expect("equal shapes")
    }

    /// `[K, N_R, N_T, 2]` real layout.
    pub fn to_tensor(&self) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = self.h.iter().map(ComplexMatrix::to_tensor).collect();
        Tensor::stack(&parts, 0).expect("equal shapes")
    }

    pub fn from_tensor(t: &Tensor<T>, sigma2: T, p_t: T) -> Result<Self> {
        if t.rank() != 4 || t.shape()[3] != 2 {
            return shape_err(format!("channel tensor must be [K, N_R, N_T, 2], got {:?}", t.shape()));
        }
        let h = (0..t.shape()[0])
            .map(|k| {
                let s = t.slice_axis(0, k, 1)?;
                let s = s.reshape(&t.shape()[1..])?;
                ComplexMatrix::from_tensor(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, sigma2, p_t)
    }

    /// Keeps the listed users in the given order.
    pub fn select_users(&self, users: &[usize]) -> Self {
        Self {
            h: users.iter().map(|&u| self.h[u].clone()).collect(),
            ..self.clone()
        }
    }

    /// `(π ∘₁ H)[k] = H[π(k)]`.
    pub fn permute_users(&self, p: &Permutation) -> Self {
        let idx: Vec<usize> = p.zero_based();
        self.select_users(&idx)
    }

    pub fn permute_rx(&self, p: &Permutation) -> Self {
        Self {
            h: self.h.iter().map(|m| m.permute_rows(p)).collect(),
            ..self.clone()
        }
    }

    pub fn permute_tx(&self, p: &Permutation) -> Self {
        Self {
            h: self.h.iter().map(|m| m.permute_cols(p)).collect(),
            ..self.clone()
        }
    }
}

/// One step of the splitmix64 generator.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for item `i` of a seeded collection.
pub fn stream_seed(seed: u64, i: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Seed for a named purpose (data, init, snr, shuffle, ...).
pub fn purpose_seed(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(splitmix64(seed), |h, b| splitmix64(h ^ u64::from(b)))
}

pub fn stream_rng(seed: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, i))
}

/// Draws one CN(0,1) channel and rescales it so `Σ_k ‖H_k‖²_F = K·N_R·N_T`.
pub fn gen_channel<T: Scalar>(cfg: &SystemConfig, k: usize, rng: &mut ChaCha8Rng) -> ChannelSample<T> {
    let h: Vec<ComplexMatrix<f64>> = (0..k).map(|_| ComplexMatrix::random_cn(cfg.n_r, cfg.n_t, rng)).collect();
    let energy: f64 = h.iter().map(ComplexMatrix::frobenius_sq).sum();
    let scale = ((k * cfg.n_r * cfg.n_t) as f64 / energy).sqrt();
    let h = h
        .into_iter()
        .map(|m| {
            let data = m.data().iter().map(|z| Complex::new(T::of(z.re * scale), T::of(z.im * scale))).collect();
            ComplexMatrix::new(m.rows(), m.cols(), data).expect("same shape")
        })
        .collect();
    ChannelSample { h, sigma2: T::of(cfg.sigma2), p_t: T::of(cfg.p_t) }
}

/// `count` normalised samples with `cfg.k_tilde` users; sample `i` uses its
/// own stream derived from `(seed, i)`.
pub fn gen_channels<T: Scalar>(cfg: &SystemConfig, count: usize, seed: u64) -> Vec<ChannelSample<T>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| gen_channel(cfg, cfg.k_tilde, &mut stream_rng(seed, i as u64)))
        .collect()
}
