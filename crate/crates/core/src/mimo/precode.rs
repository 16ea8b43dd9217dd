use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::complex::ComplexMatrix;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::{stream_rng, sum_rate, ChannelSample};

/// Per-user auxiliary matrices `A_k`, `U_k ∈ ℂ^{N_R×N_R}` of the closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxTensors<T> {
    pub a: Vec<ComplexMatrix<T>>,
    pub u: Vec<ComplexMatrix<T>>,
}

impl<T: Scalar> AuxTensors<T> {
    pub fn identity(k: usize, n_r: usize) -> Self {
        Self {
            a: vec![ComplexMatrix::identity(n_r); k],
            u: vec![ComplexMatrix::identity(n_r); k],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingSolution<T> {
    /// `W_k ∈ ℂ^{N_R×N_T}` per user.
    pub w: Vec<ComplexMatrix<T>>,
    pub rates: Vec<T>,
    pub sum_rate: T,
    /// Outer iterations (0 for closed forms).
    pub iterations: usize,
}

impl<T: Scalar> PrecodingSolution<T> {
    pub fn evaluate(sample: &ChannelSample<T>, w: Vec<ComplexMatrix<T>>, iterations: usize) -> Result<Self> {
        let (rates, sum_rate) = sum_rate(sample, &w)?;
        Ok(Self { w, rates, sum_rate, iterations })
    }

    pub fn power(&self) -> T {
        self.w.iter().map(ComplexMatrix::frobenius_sq).sum()
    }
}

/// Splits `V ∈ ℂ^{N_T×K·N_R}` into `W_k = V_kᴴ`.
pub fn precoder_from_columns<T: Scalar>(v: &ComplexMatrix<T>, k: usize, n_r: usize) -> Vec<ComplexMatrix<T>> {
    (0..k).map(|u| v.block(0, u * n_r, v.rows(), n_r).hermitian()).collect()
}

fn columns<T: Scalar>(w: &[ComplexMatrix<T>]) -> ComplexMatrix<T> {
    let hs: Vec<ComplexMatrix<T>> = w.iter().map(ComplexMatrix::clone).collect();
    ComplexMatrix::vstack(&hs).expect("equal shapes").hermitian()
}

fn normalise<T: Scalar>(v: &ComplexMatrix<T>, p_t: T) -> Result<ComplexMatrix<T>> {
    let power = v.frobenius_sq();
    if !(power > T::zero()) || !power.is_finite() {
        return Err(Error::NonFinite(format!("precoder power {power}")));
    }
    Ok(v.scale_real((p_t / power).sqrt()))
}

fn cfp_columns<T: Scalar>(sample: &ChannelSample<T>, aux: &AuxTensors<T>) -> Result<ComplexMatrix<T>> {
    let k = sample.k();
    if aux.a.len() != k || aux.u.len() != k {
        return shape_err("auxiliary tensors do not match the user count");
    }
    let a = ComplexMatrix::block_diag(&aux.a)?;
    let u = ComplexMatrix::block_diag(&aux.u)?;
    let ah = a.matmul(&sample.stacked())?;
    let ahh = ah.hermitian();
    let mu = u.matmul(&a.matmul(&a.hermitian())?)?.trace() * (sample.sigma2 / sample.p_t);
    let n = ah.rows();
    let m = ComplexMatrix::identity(n).scale(mu).add(&ah.matmul(&ahh)?.matmul(&u)?)?;
    let wt = ahh.matmul(&u)?.matmul(&m.inverse()?)?;
    normalise(&wt, sample.p_t)
}

/// Closed-form precoder `W̃ = HᴴAᴴU(μI + AHHᴴAᴴU)⁻¹`, `μ = Tr(UAAᴴ)σ²/P_T`,
/// scaled to full power.
pub fn cfp<T: Scalar>(sample: &ChannelSample<T>, aux: &AuxTensors<T>) -> Result<PrecodingSolution<T>> {
    let v = cfp_columns(sample, aux)?;
    PrecodingSolution::evaluate(sample, precoder_from_columns(&v, sample.k(), sample.n_r()), 0)
}

/// Differentiable closed form. `hs`: `[K·N_R, N_T, 2]` constant;
/// `a`, `u`: `[K, N_R, N_R, 2]`. Returns `V = [W_1ᴴ … W_Kᴴ]` as `[N_T, K·N_R, 2]`.
pub fn cfp_graph<T: Scalar>(g: &mut Graph<'_, T>, hs: Var, a: Var, u: Var, sigma2: T, p_t: T) -> Result<Var> {
    let a = g.cblock_diag(a)?;
    let u = g.cblock_diag(u)?;
    let n = g.value(a).shape()[0];
    let ah = g.cmatmul(a, hs)?;
    let ahh = g.chermitian(ah)?;
    let ahahh = g.cmatmul(ah, ahh)?;
    let gu = g.cmatmul(ahahh, u)?;
    let a_h = g.chermitian(a)?;
    let aa = g.cmatmul(a, a_h)?;
    let uaa = g.cmatmul(u, aa)?;
    let tr = g.ctrace(uaa)?;
    let mu = g.scale(tr, sigma2 / p_t);
    let mu_i = g.cscalar_identity(mu, n)?;
    let m = g.cadd(mu_i, gu)?;
    let minv = g.cinverse(m)?;
    let hu = g.cmatmul(ahh, u)?;
    let wt = g.cmatmul(hu, minv)?;
    let sq = g.mul(wt, wt)?;
    let power = g.sum(sq);
    let inv_norm = g.powf(power, -T::of(0.5));
    let gamma = g.scale(inv_norm, p_t.sqrt());
    g.scale_by(wt, gamma)
}

/// Zero forcing `V ∝ Hᴴ(HHᴴ)⁻¹`; needs `K·N_R ≤ N_T`.
pub fn zf_precoder<T: Scalar>(sample: &ChannelSample<T>) -> Result<PrecodingSolution<T>> {
    let (k, n_r) = (sample.k(), sample.n_r());
    if k * n_r > sample.n_t() {
        return Err(Error::Invalid(format!("ZF needs K·N_R ≤ N_T, got {} > {}", k * n_r, sample.n_t())));
    }
    let h = sample.stacked();
    let hh = h.hermitian();
    let v = hh.matmul(&h.matmul(&hh)?.inverse()?)?;
    let v = normalise(&v, sample.p_t)?;
    PrecodingSolution::evaluate(sample, precoder_from_columns(&v, k, n_r), 0)
}

/// Regularised zero forcing `V ∝ Hᴴ(HHᴴ + K·N_R·σ²/P_T·I)⁻¹`, the closed
/// form with `A = U = I`.
pub fn mmse_precoder<T: Scalar>(sample: &ChannelSample<T>) -> Result<PrecodingSolution<T>> {
    cfp(sample, &AuxTensors::identity(sample.k(), sample.n_r()))
}

/// i.i.d. CN(0,1) precoder scaled to full power.
pub fn random_precoder<T: Scalar, R: Rng + ?Sized>(sample: &ChannelSample<T>, rng: &mut R) -> Result<Vec<ComplexMatrix<T>>> {
    let v = ComplexMatrix::random_cn(sample.n_t(), sample.k() * sample.n_r(), rng);
    Ok(precoder_from_columns(&normalise(&v, sample.p_t)?, sample.k(), sample.n_r()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WmmseInit {
    /// Random precoder from the given stream seed.
    Random(u64),
    Mmse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmmseOptions {
    pub init: WmmseInit,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self { init: WmmseInit::Mmse, max_iter: 300, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmmseResult<T> {
    pub solution: PrecodingSolution<T>,
    pub aux: AuxTensors<T>,
    /// Sum-rate of the initial point followed by one entry per iteration.
    pub trace: Vec<T>,
}

/// Receive filters and MSE weights for the current precoder, as `A_k = R_kᴴ`
/// and `U_k = E_k⁻¹`.
fn wmmse_aux<T: Scalar>(sample: &ChannelSample<T>, v: &ComplexMatrix<T>) -> Result<AuxTensors<T>> {
    let (k, n_r) = (sample.k(), sample.n_r());
    let eye = ComplexMatrix::identity(n_r);
    let mut a = Vec::with_capacity(k);
    let mut u = Vec::with_capacity(k);
    for (kk, hk) in sample.h.iter().enumerate() {
        let hv = hk.matmul(v)?;
        let j = hv.matmul(&hv.hermitian())?.add(&eye.scale_real(sample.sigma2))?;
        let hvk = hv.block(0, kk * n_r, n_r, n_r);
        let r = j.hermitian_part().inverse()?.matmul(&hvk)?;
        let e = eye.sub(&r.hermitian().matmul(&hvk)?)?;
        u.push(e.hermitian_part().inverse()?.hermitian_part());
        a.push(r.hermitian());
    }
    Ok(AuxTensors { a, u })
}

/// Alternating weighted-MMSE; each iteration ends with the closed form.
pub fn wmmse<T: Scalar>(sample: &ChannelSample<T>, opts: &WmmseOptions) -> Result<WmmseResult<T>> {
    let (k, n_r) = (sample.k(), sample.n_r());
    let w0 = match opts.init {
        WmmseInit::Mmse => mmse_precoder(sample)?.w,
        WmmseInit::Random(seed) => random_precoder(sample, &mut stream_rng(seed, 0))?,
    };
    let mut v = columns(&w0);
    let mut rate = sum_rate(sample, &w0)?.1;
    let mut trace = vec![rate];
    let mut aux = wmmse_aux(sample, &v)?;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        v = cfp_columns(sample, &aux)?;
        iterations += 1;
        let w = precoder_from_columns(&v, k, n_r);
        let new_rate = sum_rate(sample, &w)?.1;
        trace.push(new_rate);
        let delta = (new_rate - rate).abs().as_f64();
        rate = new_rate;
        aux = wmmse_aux(sample, &v)?;
        if delta < opts.tol {
            break;
        }
    }
    let solution = PrecodingSolution::evaluate(sample, precoder_from_columns(&v, k, n_r), iterations)?;
    Ok(WmmseResult { solution, aux, trace })
}

#[cfg(test)]
mod tests {
    use super::super::{gen_channels, SystemConfig};
    use super::*;

    #[test]
    fn closed_forms_use_full_power() {
        let cfg = SystemConfig::new(3, 2, 8).with_snr_db(10.0);
        for s in gen_channels::<f64>(&cfg, 3, 5) {
            for sol in [zf_precoder(&s).unwrap(), mmse_precoder(&s).unwrap()] {
                assert!((sol.power() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_precoder_has_zero_rate() {
        let cfg = SystemConfig::new(2, 2, 4);
        let s = gen_channels::<f64>(&cfg, 1, 1).remove(0);
        let w = vec![ComplexMatrix::zeros(2, 4); 2];
        let (rates, total) = sum_rate(&s, &w).unwrap();
        assert!(rates.iter().all(|&r| r.abs() < 1e-15));
        assert!(total.abs() < 1e-15);
    }

    #[test]
    fn wmmse_improves_on_mmse() {
        let cfg = SystemConfig::new(4, 2, 8).with_snr_db(20.0);
        for s in gen_channels::<f64>(&cfg, 3, 2) {
            let m = mmse_precoder(&s).unwrap().sum_rate;
            let w = wmmse(&s, &WmmseOptions::default()).unwrap();
            assert!(w.solution.sum_rate >= m - 1e-9);
            assert_eq!(w.trace.len(), w.solution.iterations + 1);
        }
    }

    #[test]
    fn column_round_trip() {
        let cfg = SystemConfig::new(3, 2, 5);
        let s = gen_channels::<f64>(&cfg, 1, 9).remove(0);
        let w = mmse_precoder(&s).unwrap().w;
        assert_eq!(precoder_from_columns(&columns(&w), 3, 2), w);
    }
}
