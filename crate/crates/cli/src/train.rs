//! Deterministic, resumable mini-batch training for both networks.
//!
//! Step `t` draws its batch from a stream seeded by `(seed, "batch", t)`, so a
//! run resumed from a checkpoint replays exactly the batches an uninterrupted
//! run would have used. Gradients are summed over a fixed number of chunks in
//! index order, which keeps results independent of the thread count.

use std::path::Path;

use anyhow::{bail, ensure, Result};
use rand::Rng;
use rayon::prelude::*;
use tenn_core::mimo::{db_to_linear, purpose_seed, stream_rng, ChannelSample};
use tenn_core::tepn::TepnModel;
use tenn_core::teusn::TeusnModel;
use tenn_core::{AdamConfig, Graph, ParamId, ParamStore64, Tensor64};

use crate::config::{RunConfig, Task};
use crate::formats::{Checkpoint, Labels};

#[derive(Debug, Clone)]
pub enum Model {
    Tepn(TepnModel<f64>),
    Teusn(TeusnModel),
}

impl Model {
    pub fn num_params(&self) -> usize {
        match self {
            Model::Tepn(m) => m.num_params(),
            Model::Teusn(m) => m.num_params(),
        }
    }
}

/// Fresh parameters for the configured task, initialized from `(seed, "init")`.
pub fn build_model(cfg: &RunConfig) -> Result<(ParamStore64, Model)> {
    let mut store = ParamStore64::new();
    let mut rng = stream_rng(purpose_seed(cfg.seed, "init"), 0);
    let model = match cfg.task {
        Task::Precode => Model::Tepn(TepnModel::new(&mut store, cfg.tepn()?, &mut rng)?),
        Task::Schedule => Model::Teusn(TeusnModel::new(&mut store, cfg.teusn()?, &mut rng)?),
    };
    Ok((store, model))
}

/// Rebuilds the model a checkpoint was trained with and loads its parameters.
pub fn load_model(ck: &Checkpoint) -> Result<(ParamStore64, Model)> {
    let (mut store, model) = build_model(&ck.config)?;
    ck.restore_into(&mut store)?;
    Ok((store, model))
}

/// Base rate for the first half of the run, a tenth of it afterwards.
pub fn learning_rate(cfg: &RunConfig, step: usize) -> f64 {
    if step < cfg.train.iterations / 2 {
        cfg.train.lr
    } else {
        cfg.train.lr / 10.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based iteration number.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Noise power for a given SNR in dB.
pub fn sigma2_for(p_t: f64, snr_db: f64) -> f64 {
    p_t / db_to_linear(snr_db)
}

struct Batch {
    samples: Vec<ChannelSample<f64>>,
    labels: Vec<Vec<bool>>,
}

fn draw_batch(cfg: &RunConfig, step: usize, data: &[ChannelSample<f64>], labels: Option<&Labels>) -> Batch {
    let mut rng = stream_rng(purpose_seed(cfg.seed, "batch"), step as u64);
    let mut snr_rng = stream_rng(purpose_seed(cfg.seed, "snr"), step as u64);
    let mut batch = Batch { samples: Vec::with_capacity(cfg.train.batch), labels: Vec::new() };
    for _ in 0..cfg.train.batch {
        let i = rng.random_range(0..data.len());
        let snr = match labels {
            Some(l) => {
                batch.labels.push(l.eta[i].clone());
                l.snr_db[i]
            }
            None => cfg.train.snr_db[snr_rng.random_range(0..cfg.train.snr_db.len())],
        };
        batch.samples.push(data[i].with_sigma2(sigma2_for(data[i].p_t, snr)));
    }
    batch
}

type ChunkGrad = (f64, Vec<(ParamId, Tensor64)>);

fn chunk_gradient(model: &Model, store: &ParamStore64, samples: &[ChannelSample<f64>], labels: &[Vec<bool>], weight: f64) -> Result<ChunkGrad> {
    let mut g = Graph::with_params(store);
    let loss = match model {
        Model::Tepn(m) => m.loss(&mut g, samples)?,
        Model::Teusn(m) => m.loss(&mut g, samples, labels)?,
    };
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value * weight, grads.param_grads().map(|(id, t)| (id, t.scale(weight))).collect()))
}

/// One optimizer step on the batch for `step`; returns the batch loss.
pub fn train_step(
    cfg: &RunConfig,
    model: &Model,
    store: &mut ParamStore64,
    step: usize,
    data: &[ChannelSample<f64>],
    labels: Option<&Labels>,
) -> Result<f64> {
    let batch = draw_batch(cfg, step, data, labels);
    let n = batch.samples.len();
    let size = n.div_ceil(cfg.train.chunks);
    let bounds: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    let frozen = &*store;
    let parts: Vec<Result<ChunkGrad>> = bounds
        .par_iter()
        .map(|&(a, b)| {
            let labels = if batch.labels.is_empty() { &[][..] } else { &batch.labels[a..b] };
            chunk_gradient(model, frozen, &batch.samples[a..b], labels, (b - a) as f64 / n as f64)
        })
        .collect();
    let mut loss = 0.0;
    for part in parts {
        let (value, grads) = part?;
        loss += value;
        for (id, g) in grads {
            store.accumulate(id, &g)?;
        }
    }
    store.adam_step(&AdamConfig::with_lr(learning_rate(cfg, step)))?;
    Ok(loss)
}

/// Runs from the store's current step up to `cfg.train.iterations`.
pub fn train(
    cfg: &RunConfig,
    model: &Model,
    store: &mut ParamStore64,
    data: &[ChannelSample<f64>],
    labels: Option<&Labels>,
    mut on_step: impl FnMut(&StepLog, &ParamStore64) -> Result<()>,
) -> Result<Vec<StepLog>> {
    ensure!(!data.is_empty(), "empty training set");
    match (model, labels) {
        (Model::Teusn(_), None) => bail!("scheduling training needs labels"),
        (Model::Teusn(_), Some(l)) => ensure!(l.len() == data.len(), "{} labels for {} samples", l.len(), data.len()),
        (Model::Tepn(_), _) => {}
    }
    let users = match model {
        Model::Tepn(_) => cfg.system.k,
        Model::Teusn(_) => cfg.system.k_tilde,
    };
    let first = &data[0];
    ensure!(
        (first.k(), first.n_r(), first.n_t()) == (users, cfg.system.n_r, cfg.system.n_t),
        "dataset is {}x{}x{}, config expects {users}x{}x{}",
        first.k(),
        first.n_r(),
        first.n_t(),
        cfg.system.n_r,
        cfg.system.n_t
    );
    let start = store.step() as usize;
    let mut log = Vec::with_capacity(cfg.train.iterations.saturating_sub(start));
    for step in start..cfg.train.iterations {
        let loss = train_step(cfg, model, store, step, data, labels)?;
        let entry = StepLog { step: step + 1, lr: learning_rate(cfg, step), loss };
        on_step(&entry, store)?;
        log.push(entry);
    }
    Ok(log)
}

/// Appends log rows as training runs; on resume, rows past the checkpoint are dropped.
pub struct LogWriter {
    w: csv::Writer<std::fs::File>,
}

impl LogWriter {
    pub fn create(path: &Path, keep_until: usize) -> Result<Self> {
        let kept: Vec<StepLog> = if keep_until > 0 && path.exists() {
            read_log(path)?.into_iter().filter(|e| e.step <= keep_until).collect()
        } else {
            Vec::new()
        };
        let mut log = Self { w: csv::Writer::from_path(path)? };
        log.w.write_record(["step", "lr", "loss"])?;
        for e in &kept {
            log.push(e)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, e: &StepLog) -> Result<()> {
        self.w.write_record([e.step.to_string(), e.lr.to_string(), e.loss.to_string()])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.w.flush()?)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| anyhow::anyhow!("short log row"));
            Ok(StepLog { step: field(0)?.parse()?, lr: field(1)?.parse()?, loss: field(2)?.parse()? })
        })
        .collect()
}

/// Mean of the first and last `window` losses.
pub fn loss_progress(log: &[StepLog], window: usize) -> Option<(f64, f64)> {
    if log.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[StepLog]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scale;

    #[test]
    fn rate_drops_at_half() {
        let mut cfg = RunConfig::preset(Task::Precode, Scale::Desk);
        cfg.train.iterations = 10;
        cfg.train.lr = 5e-4;
        assert_eq!(learning_rate(&cfg, 4), 5e-4);
        // iteration floor(T/2)+1 is 0-based step floor(T/2)
        assert_eq!(learning_rate(&cfg, 5), 5e-5);
        cfg.train.iterations = 11;
        assert_eq!(learning_rate(&cfg, 5), 5e-5);
        assert_eq!(learning_rate(&cfg, 4), 5e-4);
    }

    #[test]
    fn progress_windows() {
        let log: Vec<StepLog> = (0..6).map(|i| StepLog { step: i + 1, lr: 1.0, loss: i as f64 }).collect();
        assert_eq!(loss_progress(&log, 2), Some((0.5, 4.5)));
        assert_eq!(loss_progress(&log, 7), None);
    }
}
