//! Analytic real-multiplication counts for the inference path of every method.
//!
//! A complex multiplication costs three real ones; additions, copies and
//! comparisons are free. Network layers are counted per sample at the sizes
//! they are evaluated on, MDE terms in their unreduced form
//! `mean_broadcast(x, P) × W_P` so that pattern ratios are combinatorial.

use crate::error::Result;
use crate::mimo::SystemConfig;
use crate::nn::{pattern_subsets, Pattern};
use crate::tensor::DimSubset;
use crate::tepn::TepnConfig;
use crate::teusn::TeusnConfig;

const CMUL: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Zf,
    Mmse,
    /// Weighted MMSE run for the given number of iterations.
    Wmmse { iterations: f64 },
    Tecfp(TepnConfig),
    Teus(TeusnConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Zf => "zf",
            Method::Mmse => "mmse",
            Method::Wmmse { .. } => "wmmse",
            Method::Tecfp(_) => "tecfp",
            Method::Teus(_) => "teus",
        }
    }
}

/// Real multiplications for one inference of `method` on `sys`.
pub fn count_mults(method: &Method, sys: &SystemConfig) -> Result<f64> {
    let (k, n_r, n_t) = (sys.k as u64, sys.n_r as u64, sys.n_t as u64);
    Ok(match method {
        Method::Zf | Method::Mmse => regularized_inverse(k, n_r, n_t) as f64,
        Method::Wmmse { iterations } => {
            regularized_inverse(k, n_r, n_t) as f64 + iterations * wmmse_iteration(k, n_r, n_t) as f64
        }
        Method::Tecfp(cfg) => (tepn_network(cfg, k, n_r, n_t)? + cfp(k, n_r, n_t)) as f64,
        Method::Teus(cfg) => teusn_network(cfg, sys.k_tilde as u64, n_r, n_t)? as f64,
    })
}

/// `Hᴴ(HHᴴ + αI)⁻¹` with `H` stacked to `KN_R × N_T`.
fn regularized_inverse(k: u64, n_r: u64, n_t: u64) -> u64 {
    let n = k * n_r;
    (2 * n_t * n * n + n * n * n) * CMUL
}

/// Closed form from `(H, A, U)` including the power normalization.
pub fn cfp(k: u64, n_r: u64, n_t: u64) -> u64 {
    let n = k * n_r;
    let complex = k * n_r * n_r * n_t // A·H
        + n * n * n_t // (AH)(AH)ᴴ
        + n * n * n_r // ·U
        + k * (n_r * n_r * n_r + n_r * n_r) // Tr(UAAᴴ)
        + n * n * n // inverse
        + n_t * n * n_r // (AH)ᴴU
        + n_t * n * n; // ·inverse
    complex * CMUL + 4 * n_t * n
}

/// Receive filters, MSE weights, rate and closed form for one WMMSE step.
fn wmmse_iteration(k: u64, n_r: u64, n_t: u64) -> u64 {
    let n = k * n_r;
    let aux = n * n * n_t + k * (n_r * n_r * n + 4 * n_r * n_r * n_r);
    aux * CMUL + cfp(k, n_r, n_t)
}

fn ffc(rows: u64, d_in: u64, d_out: u64) -> u64 {
    rows * d_in * d_out
}

fn layer_norm(rows: u64, d: u64) -> u64 {
    3 * rows * d
}

/// One PMA applied to `rows` independent sets of `m` elements.
pub fn pma(rows: u64, m: u64, d: u64, heads: u64) -> u64 {
    let proj = 3 * rows * m * d * d; // pre-FFC, keys, values
    let query = d * d;
    let attention = 2 * rows * m * d + 2 * rows * m * heads;
    let tail = 2 * rows * d * d + layer_norm(rows, d);
    proj + query + attention + tail
}

/// MDE weight multiplications of one layer over `extents`.
pub fn mde_layer(subsets: &[DimSubset], extents: &[u64], d_in: u64, d_out: u64) -> u64 {
    subsets.len() as u64 * extents.iter().product::<u64>() * d_in * d_out
}

fn trunk(subsets: &[Vec<DimSubset>], extents: &[u64], d_h: u64) -> u64 {
    let m: u64 = extents.iter().product();
    ffc(m, 3, d_h)
        + subsets
            .iter()
            .map(|s| mde_layer(s, extents, d_h, d_h) + layer_norm(m, d_h))
            .sum::<u64>()
}

pub fn tepn_network(cfg: &TepnConfig, k: u64, n_r: u64, n_t: u64) -> Result<u64> {
    let subsets = pattern_subsets(cfg.pattern, 3, cfg.layers, cfg.schedule.as_deref())?;
    let d = cfg.d_h as u64;
    let heads = cfg.n_heads as u64;
    let hoe = k * n_r * n_r * 5 * d * d + 2 * k * d + layer_norm(k * n_r * n_r, d);
    Ok(trunk(&subsets, &[k, n_r, n_t], d) + pma(k * n_r, n_t, d, heads) + hoe + ffc(k * n_r * n_r, d, 4))
}

pub fn teusn_network(cfg: &TeusnConfig, k_tilde: u64, n_r: u64, n_t: u64) -> Result<u64> {
    let subsets = pattern_subsets(cfg.pattern, 3, cfg.layers, cfg.schedule.as_deref())?;
    let d = cfg.d_h as u64;
    let heads = cfg.n_heads as u64;
    let mdi = pma(k_tilde * n_r, n_t, d, heads) + pma(k_tilde, n_r, d, heads);
    Ok(trunk(&subsets, &[k_tilde, n_r, n_t], d) + mdi + ffc(k_tilde, d, 1) + k_tilde)
}

/// MDE-module cost of a pattern relative to the full power set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternCost {
    pub weights: u64,
    pub mults: u64,
    pub weight_ratio: f64,
    pub mult_ratio: f64,
}

/// Weight-matrix entries and multiplications of an `L`-layer MDE stack.
pub fn pattern_cost(pattern: Pattern, n: usize, layers: usize, d: usize, extents: &[usize]) -> Result<PatternCost> {
    let ext: Vec<u64> = extents.iter().map(|&e| e as u64).collect();
    let cost = |p: Pattern| -> Result<(u64, u64)> {
        let subsets = pattern_subsets(p, n, layers, None)?;
        let weights = subsets.iter().map(|s| s.len() as u64).sum::<u64>() * (d * d) as u64;
        let mults = subsets.iter().map(|s| mde_layer(s, &ext, d as u64, d as u64)).sum();
        Ok((weights, mults))
    };
    let (weights, mults) = cost(pattern)?;
    let (full_w, full_m) = cost(Pattern::Full)?;
    Ok(PatternCost {
        weights,
        mults,
        weight_ratio: weights as f64 / full_w as f64,
        mult_ratio: mults as f64 / full_m as f64,
    })
}
