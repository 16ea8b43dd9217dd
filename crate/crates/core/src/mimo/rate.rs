use crate::autodiff::{Graph, Var};
use crate::complex::ComplexMatrix;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::ChannelSample;

/// Per-user rates `R_k = log₂ det(I + W_k H_kᴴ Ω_k⁻¹ H_k W_kᴴ)` and their sum.
pub fn sum_rate<T: Scalar>(sample: &ChannelSample<T>, w: &[ComplexMatrix<T>]) -> Result<(Vec<T>, T)> {
    let k = sample.k();
    if w.len() != k {
        return shape_err(format!("{} precoders for {k} users", w.len()));
    }
    let n_r = sample.n_r();
    let eye = ComplexMatrix::identity(n_r);
    let inv_ln2 = T::one() / T::of(std::f64::consts::LN_2);
    // H_k W_iᴴ for all (k, i)
    let hw: Vec<Vec<ComplexMatrix<T>>> = sample
        .h
        .iter()
        .map(|hk| w.iter().map(|wi| hk.matmul(&wi.hermitian())).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut rates = Vec::with_capacity(k);
    for kk in 0..k {
        let mut omega = eye.scale_real(sample.sigma2);
        for (i, m) in hw[kk].iter().enumerate() {
            if i != kk {
                omega = omega.add(&m.matmul(&m.hermitian())?)?;
            }
        }
        let oinv = omega.hermitian_part().inverse()?;
        let a = &hw[kk][kk];
        let inner = eye.add(&a.hermitian().matmul(&oinv)?.matmul(a)?)?;
        rates.push(inner.logdet_hpd()? * inv_ln2);
    }
    let total = rates.iter().copied().sum();
    Ok((rates, total))
}

/// Differentiable sum-rate in bits.
///
/// `hs` is the constant stacked channel `[K·N_R, N_T, 2]` and `v` the
/// precoder columns `[N_T, K·N_R, 2]`, column block `k` being `W_kᴴ`.
/// Uses `R_k = logdet(σ²I + Σ_i H_k V_i V_iᴴ H_kᴴ) − logdet(Ω_k)`.
pub fn sum_rate_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    hs: Var,
    v: Var,
    sigma2: T,
    k: usize,
    n_r: usize,
) -> Result<Var> {
    let e = g.cmatmul(hs, v)?;
    let noise = g.constant(ComplexMatrix::<T>::identity(n_r).scale_real(sigma2).to_tensor());
    let kn = k * n_r;
    let mut total: Option<Var> = None;
    for kk in 0..k {
        let ek = g.cslice(e, kk * n_r, n_r, 0, kn)?;
        let ekh = g.chermitian(ek)?;
        let full = g.cmatmul(ek, ekh)?;
        let s = g.cadd(full, noise)?;
        let ekk = g.cslice(ek, 0, n_r, kk * n_r, n_r)?;
        let ekkh = g.chermitian(ekk)?;
        let own = g.cmatmul(ekk, ekkh)?;
        let omega = g.sub(s, own)?;
        let ls = g.logdet_hpd(s)?;
        let lo = g.logdet_hpd(omega)?;
        let r = g.sub(ls, lo)?;
        total = Some(match total {
            None => r,
            Some(t) => g.add(t, r)?,
        });
    }
    let total = total.ok_or_else(|| crate::Error::Shape("no users".into()))?;
    Ok(g.scale(total, T::one() / T::of(std::f64::consts::LN_2)))
}
