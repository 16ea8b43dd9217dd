use rand::seq::index::sample as sample_indices;

use crate::complex::ComplexMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{mmse_precoder, stream_rng, sum_rate, wmmse, zf_precoder, ChannelSample, WmmseOptions};

/// Conventional precoders usable inside scheduling and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselinePrecoder {
    Zf,
    Mmse,
    Wmmse(WmmseOptions),
}

impl BaselinePrecoder {
    pub fn apply<T: Scalar>(&self, sample: &ChannelSample<T>) -> Result<Vec<ComplexMatrix<T>>> {
        Ok(match self {
            Self::Zf => zf_precoder(sample)?.w,
            Self::Mmse => mmse_precoder(sample)?.w,
            Self::Wmmse(opts) => wmmse(sample, opts)?.solution.w,
        })
    }
}

fn check_k(k_tilde: usize, k: usize) -> Result<()> {
    if k == 0 || k > k_tilde {
        return Err(Error::Invalid(format!("cannot select {k} of {k_tilde} users")));
    }
    Ok(())
}

fn selected(eta: &[bool]) -> Vec<usize> {
    eta.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
}

/// Adds users one at a time, each time the one maximising the sum-rate of
/// the enlarged set; ties go to the lower index.
pub fn greedy_schedule<T, F>(sample: &ChannelSample<T>, k: usize, precoder: F) -> Result<Vec<bool>>
where
    T: Scalar,
    F: Fn(&ChannelSample<T>) -> Result<Vec<ComplexMatrix<T>>>,
{
    let k_tilde = sample.k();
    check_k(k_tilde, k)?;
    let mut eta = vec![false; k_tilde];
    for _ in 0..k {
        let mut best: Option<(usize, T)> = None;
        for c in 0..k_tilde {
            if eta[c] {
                continue;
            }
            eta[c] = true;
            let sub = sample.select_users(&selected(&eta));
            eta[c] = false;
            let rate = sum_rate(&sub, &precoder(&sub)?)?.1;
            if best.is_none_or(|(_, r)| rate > r) {
                best = Some((c, rate));
            }
        }
        let (c, _) = best.expect("a candidate remains while fewer than K are chosen");
        eta[c] = true;
    }
    Ok(eta)
}

/// Uniformly random `K`-subset of `K̃` users.
pub fn random_schedule(k_tilde: usize, k: usize, seed: u64) -> Result<Vec<bool>> {
    check_k(k_tilde, k)?;
    let mut eta = vec![false; k_tilde];
    for i in sample_indices(&mut stream_rng(seed, 0), k_tilde, k) {
        eta[i] = true;
    }
    Ok(eta)
}

/// Sum-rate of the scheduled users under `precoder`.
pub fn eval_schedule<T, F>(sample: &ChannelSample<T>, eta: &[bool], precoder: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&ChannelSample<T>) -> Result<Vec<ComplexMatrix<T>>>,
{
    if eta.len() != sample.k() {
        return Err(Error::Shape(format!("{} indicators for {} users", eta.len(), sample.k())));
    }
    let users = selected(eta);
    if users.is_empty() {
        return Err(Error::Invalid("no user scheduled".into()));
    }
    let sub = sample.select_users(&users);
    Ok(sum_rate(&sub, &precoder(&sub)?)?.1)
}

#[cfg(test)]
mod tests {
    use super::super::{gen_channels, SystemConfig};
    use super::*;

    fn mmse(s: &ChannelSample<f64>) -> Result<Vec<ComplexMatrix<f64>>> {
        BaselinePrecoder::Mmse.apply(s)
    }

    /// Independent restatement of the greedy loop.
    fn greedy_reference(s: &ChannelSample<f64>, k: usize) -> Vec<bool> {
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < k {
            let mut best_rate = f64::NEG_INFINITY;
            let mut best_user = usize::MAX;
            for c in 0..s.k() {
                if chosen.contains(&c) {
                    continue;
                }
                let mut set = chosen.clone();
                set.push(c);
                set.sort_unstable();
                let sub = s.select_users(&set);
                let r = sum_rate(&sub, &mmse(&sub).unwrap()).unwrap().1;
                if r > best_rate {
                    best_rate = r;
                    best_user = c;
                }
            }
            chosen.push(best_user);
        }
        (0..s.k()).map(|u| chosen.contains(&u)).collect()
    }

    #[test]
    fn greedy_matches_reference() {
        let mut cfg = SystemConfig::new(2, 2, 8).with_snr_db(10.0);
        cfg.k_tilde = 4;
        for s in gen_channels::<f64>(&cfg, 5, 17) {
            let eta = greedy_schedule(&s, 2, mmse).unwrap();
            assert_eq!(eta.iter().filter(|&&e| e).count(), 2);
            assert_eq!(eta, greedy_reference(&s, 2));
        }
    }

    #[test]
    fn single_pick_takes_stronger_user() {
        let mut cfg = SystemConfig::new(1, 1, 4).with_snr_db(10.0);
        cfg.k_tilde = 2;
        let s = gen_channels::<f64>(&cfg, 1, 3).remove(0);
        let eta = greedy_schedule(&s, 1, mmse).unwrap();
        let stronger = if s.h[0].frobenius_sq() >= s.h[1].frobenius_sq() { 0 } else { 1 };
        assert!(eta[stronger]);
    }

    #[test]
    fn random_schedule_has_k_ones() {
        for seed in 0..20 {
            let eta = random_schedule(6, 4, seed).unwrap();
            assert_eq!(eta.iter().filter(|&&e| e).count(), 4);
        }
        assert!(random_schedule(3, 4, 0).is_err());
    }
}
