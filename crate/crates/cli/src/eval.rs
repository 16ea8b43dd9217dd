//! Per-SNR evaluation of baselines and trained networks on one code path.

use std::path::Path;

use anyhow::{bail, ensure, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tenn_core::complexity::{count_mults, Method};
use tenn_core::mimo::{
    eval_schedule, greedy_schedule, mmse_precoder, purpose_seed, random_schedule, stream_seed, wmmse, zf_precoder,
    BaselinePrecoder, ChannelSample, SystemConfig, WmmseInit, WmmseOptions,
};
use tenn_core::ParamStore64;

use crate::config::RunConfig;
use crate::train::{sigma2_for, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub snr_db: f64,
    pub method: String,
    pub mean_sum_rate: f64,
    pub samples: usize,
    pub multiplications: f64,
    pub parameters: usize,
}

pub const PRECODING_BASELINES: [&str; 4] = ["zf", "mmse", "wmmse-rand", "wmmse-mmseinit"];
pub const SCHEDULING_BASELINES: [&str; 2] = ["random-sched", "greedy-sched"];

/// Something that maps a test set at one SNR to per-sample sum-rates.
pub enum Evaluator<'a> {
    Baseline(&'a str),
    Network { name: &'a str, model: &'a Model, store: &'a ParamStore64 },
}

impl Evaluator<'_> {
    pub fn name(&self) -> &str {
        match self {
            Evaluator::Baseline(n) => n,
            Evaluator::Network { name, .. } => name,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn collect<T>(parts: Vec<tenn_core::Result<T>>) -> Result<Vec<T>> {
    Ok(parts.into_iter().collect::<tenn_core::Result<Vec<T>>>()?)
}

/// Sum-rates and mean WMMSE iteration count (zero for non-iterative methods).
fn rates(cfg: &RunConfig, ev: &Evaluator<'_>, test: &[ChannelSample<f64>]) -> Result<(Vec<f64>, f64)> {
    let k = cfg.system.k;
    let sched_precoder = cfg.label_precoder()?;
    let apply = |s: &ChannelSample<f64>| sched_precoder.apply(s);
    let wmmse_seed = purpose_seed(cfg.seed, "wmmse-init");
    let sched_seed = purpose_seed(cfg.seed, "random-sched");
    let wmmse_run = |init: &(dyn Fn(usize) -> WmmseInit + Sync)| -> Result<(Vec<f64>, f64)> {
        let out = collect(
            test.par_iter()
                .enumerate()
                .map(|(i, s)| wmmse(s, &WmmseOptions { init: init(i), ..Default::default() }))
                .collect(),
        )?;
        let iters = mean(&out.iter().map(|r| r.solution.iterations as f64).collect::<Vec<_>>());
        Ok((out.into_iter().map(|r| r.solution.sum_rate).collect(), iters))
    };
    Ok(match ev {
        Evaluator::Baseline("zf") => (collect(test.par_iter().map(|s| zf_precoder(s).map(|p| p.sum_rate)).collect())?, 0.0),
        Evaluator::Baseline("mmse") => (collect(test.par_iter().map(|s| mmse_precoder(s).map(|p| p.sum_rate)).collect())?, 0.0),
        Evaluator::Baseline("wmmse-rand") => wmmse_run(&|i| WmmseInit::Random(stream_seed(wmmse_seed, i as u64)))?,
        Evaluator::Baseline("wmmse-mmseinit") => wmmse_run(&|_| WmmseInit::Mmse)?,
        Evaluator::Baseline("random-sched") => (
            collect(
                test.par_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let eta = random_schedule(s.k(), k, stream_seed(sched_seed, i as u64))?;
                        eval_schedule(s, &eta, apply)
                    })
                    .collect(),
            )?,
            0.0,
        ),
        Evaluator::Baseline("greedy-sched") => (
            collect(
                test.par_iter()
                    .map(|s| {
                        let eta = greedy_schedule(s, k, apply)?;
                        eval_schedule(s, &eta, apply)
                    })
                    .collect(),
            )?,
            0.0,
        ),
        Evaluator::Baseline(other) => bail!("unknown method {other:?}"),
        Evaluator::Network { model: Model::Tepn(m), store, .. } => {
            (m.precode(store, test)?.into_iter().map(|p| p.sum_rate).collect(), 0.0)
        }
        Evaluator::Network { model: Model::Teusn(m), store, .. } => {
            let etas = m.schedule(store, test)?;
            ensure!(etas.iter().all(|e| e.iter().filter(|&&b| b).count() == k), "selection violates Σ η = K");
            (collect(test.par_iter().zip(&etas).map(|(s, e)| eval_schedule(s, e, apply)).collect())?, 0.0)
        }
    })
}

/// Inference cost of an evaluator at the test-set size.
fn multiplications(cfg: &RunConfig, ev: &Evaluator<'_>, test: &ChannelSample<f64>, wmmse_iters: f64) -> Result<f64> {
    let mut sys = SystemConfig::new(test.k(), test.n_r(), test.n_t());
    sys.k_tilde = test.k();
    let served = SystemConfig::new(cfg.system.k.min(test.k()), test.n_r(), test.n_t());
    let final_precoder = count_mults(&label_method(cfg)?, &served)?;
    Ok(match ev {
        Evaluator::Baseline("zf") => count_mults(&Method::Zf, &sys)?,
        Evaluator::Baseline("mmse") => count_mults(&Method::Mmse, &sys)?,
        Evaluator::Baseline("wmmse-rand" | "wmmse-mmseinit") => count_mults(&Method::Wmmse { iterations: wmmse_iters }, &sys)?,
        Evaluator::Baseline("random-sched") => final_precoder,
        Evaluator::Baseline("greedy-sched") => {
            let mut total = 0.0;
            for j in 1..=served.k {
                let partial = SystemConfig::new(j, test.n_r(), test.n_t());
                total += (test.k() - j + 1) as f64 * count_mults(&label_method(cfg)?, &partial)?;
            }
            total + final_precoder
        }
        Evaluator::Baseline(other) => bail!("unknown method {other:?}"),
        Evaluator::Network { model: Model::Tepn(m), .. } => count_mults(&Method::Tecfp(m.cfg.clone()), &sys)?,
        Evaluator::Network { model: Model::Teusn(m), .. } => count_mults(&Method::Teus(m.cfg.clone()), &sys)? + final_precoder,
    })
}

fn label_method(cfg: &RunConfig) -> Result<Method> {
    Ok(match cfg.label_precoder()? {
        BaselinePrecoder::Zf => Method::Zf,
        BaselinePrecoder::Mmse => Method::Mmse,
        BaselinePrecoder::Wmmse(_) => Method::Wmmse { iterations: 1.0 },
    })
}

/// One record per `(SNR, evaluator)`, SNR-major.
pub fn evaluate(cfg: &RunConfig, evaluators: &[Evaluator<'_>], test: &[ChannelSample<f64>], snrs: &[f64]) -> Result<Vec<EvalRecord>> {
    ensure!(!test.is_empty(), "empty test set");
    let mut out = Vec::with_capacity(snrs.len() * evaluators.len());
    for &snr in snrs {
        let at_snr: Vec<_> = test.iter().map(|s| s.with_sigma2(sigma2_for(s.p_t, snr))).collect();
        for ev in evaluators {
            let (r, iters) = rates(cfg, ev, &at_snr)?;
            let parameters = match ev {
                Evaluator::Network { model, .. } => model.num_params(),
                Evaluator::Baseline(_) => 0,
            };
            out.push(EvalRecord {
                snr_db: snr,
                method: ev.name().to_owned(),
                mean_sum_rate: mean(&r),
                samples: r.len(),
                multiplications: multiplications(cfg, ev, &at_snr[0], iters)?,
                parameters,
            });
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<EvalRecord>, _>>()?)
}

/// Looks up the mean sum-rate of `method` at `snr`.
pub fn lookup(records: &[EvalRecord], method: &str, snr: f64) -> Option<f64> {
    records.iter().find(|r| r.method == method && r.snr_db == snr).map(|r| r.mean_sum_rate)
}
