//! Subcommand bodies, callable without the argument parser.
//!
//! A data directory holds `train.teds`, `test.teds` and, for scheduling,
//! `labels.teds`. A run directory holds `checkpoint.teds` and `train_log.csv`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tenn_core::complexity::{count_mults, pattern_cost, Method};
use tenn_core::mimo::{gen_channels, purpose_seed, wmmse, ChannelSample, SystemConfig, WmmseOptions};
use tenn_core::nn::Pattern;
use tenn_core::teusn::gen_labels;

use crate::config::{RunConfig, Task};
use crate::eval::{evaluate, EvalRecord, Evaluator};
use crate::formats::{load_channels, save_channels, Checkpoint, Labels};
use crate::train::{build_model, load_model, sigma2_for, train, LogWriter, Model, StepLog};
use tenn_core::ParamStore64;

pub const TRAIN_FILE: &str = "train.teds";
pub const TEST_FILE: &str = "test.teds";
pub const LABEL_FILE: &str = "labels.teds";
pub const CHECKPOINT_FILE: &str = "checkpoint.teds";
pub const LOG_FILE: &str = "train_log.csv";

/// Channel samples with `users` users each, split train/test.
pub fn generate(cfg: &RunConfig) -> (Vec<ChannelSample<f64>>, Vec<ChannelSample<f64>>) {
    let mut sys = SystemConfig::new(cfg.users(), cfg.system.n_r, cfg.system.n_t);
    sys.k_tilde = cfg.users();
    sys.p_t = cfg.system.p_t;
    let mut all = gen_channels::<f64>(&sys, cfg.data.samples, purpose_seed(cfg.seed, "data"));
    let test = all.split_off(cfg.split_counts().0);
    (all, test)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out)?;
    let (train, test) = generate(cfg);
    let paths = (out.join(TRAIN_FILE), out.join(TEST_FILE));
    save_channels(&paths.0, &train)?;
    save_channels(&paths.1, &test)?;
    Ok(paths)
}

/// Greedy labels; sample `i` is labeled at `snr_db[i mod len]`.
pub fn make_labels(cfg: &RunConfig, samples: &[ChannelSample<f64>], snr_db: &[f64]) -> Result<Labels> {
    let precoder = cfg.label_precoder()?;
    let snrs: Vec<f64> = (0..samples.len()).map(|i| snr_db[i % snr_db.len()]).collect();
    let at_snr: Vec<_> = samples.iter().zip(&snrs).map(|(s, &d)| s.with_sigma2(sigma2_for(s.p_t, d))).collect();
    let eta = gen_labels(&at_snr, cfg.system.k, |s| precoder.apply(s))?;
    Ok(Labels { eta, snr_db: snrs })
}

pub fn gen_labels_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let samples = load_channels(data, cfg.system.p_t)?;
    make_labels(cfg, &samples, &cfg.train.snr_db)?.save(out)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Trains from scratch or continues `resume`; the resumed config must match.
pub fn train_run(
    cfg: &RunConfig,
    data: &[ChannelSample<f64>],
    labels: Option<&Labels>,
    resume: Option<Checkpoint>,
    on_step: impl FnMut(&StepLog, &ParamStore64) -> Result<()>,
) -> Result<TrainOutcome> {
    let (mut store, model) = match resume {
        Some(ck) => {
            if ck.config != *cfg {
                bail!("checkpoint was trained with a different configuration");
            }
            load_model(&ck)?
        }
        None => build_model(cfg)?,
    };
    let log = train(cfg, &model, &mut store, data, labels, on_step)?;
    Ok(TrainOutcome { checkpoint: Checkpoint { config: cfg.clone(), seed: cfg.seed, store }, model, log })
}

/// Trains with periodic checkpoints so an interrupted run can be resumed.
pub fn train_cmd(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: Option<&Path>, verbose: bool) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out)?;
    let data = load_channels(&data_dir.join(TRAIN_FILE), cfg.system.p_t)?;
    let labels = match cfg.task {
        Task::Schedule => Some(Labels::load(&data_dir.join(LABEL_FILE)).context("scheduling needs gen-labels first")?),
        Task::Precode => None,
    };
    let resume = resume.map(Checkpoint::load).transpose()?;
    let start = resume.as_ref().map_or(0, |ck| ck.store.step() as usize);
    let mut log = LogWriter::create(&out.join(LOG_FILE), start)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let every = cfg.train.log_every.max(1);
    let mut window = Vec::new();
    let outcome = train_run(cfg, &data, labels.as_ref(), resume, |e, store| {
        log.push(e)?;
        window.push(e.loss);
        if e.step % every == 0 {
            if verbose {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                eprintln!("step {:>7}  lr {:.1e}  loss {:.5}", e.step, e.lr, mean);
            }
            window.clear();
        }
        if e.step % cfg.train.checkpoint_every.max(1) == 0 {
            log.flush()?;
            Checkpoint { config: cfg.clone(), seed: cfg.seed, store: store.clone() }.save(&ck_path)?;
        }
        Ok(())
    })?;
    log.flush()?;
    outcome.checkpoint.save(&ck_path)?;
    Ok(outcome)
}

/// Evaluates the configured baselines plus an optional checkpoint on `test`.
pub fn eval_run(
    cfg: &RunConfig,
    methods: &[String],
    network: Option<(&Model, &ParamStore64)>,
    test: &[ChannelSample<f64>],
    snrs: &[f64],
) -> Result<Vec<EvalRecord>> {
    let mut evaluators: Vec<Evaluator<'_>> = methods.iter().map(|m| Evaluator::Baseline(m.as_str())).collect();
    if let Some((model, store)) = network {
        let name = match model {
            Model::Tepn(_) => "tecfp",
            Model::Teusn(_) => "teus",
        };
        evaluators.push(Evaluator::Network { name, model, store });
    }
    evaluate(cfg, &evaluators, test, snrs)
}

/// Multiplications of `method`; WMMSE uses the mean iteration count recorded
/// on a fresh test batch at the first configured SNR unless `iterations` is given.
pub fn count_mults_cmd(cfg: &RunConfig, method: &str, iterations: Option<f64>) -> Result<(Method, f64)> {
    let m = match method {
        "zf" => Method::Zf,
        "mmse" => Method::Mmse,
        "wmmse" => {
            let iterations = match iterations {
                Some(t) => t,
                None => recorded_wmmse_iterations(cfg, 50)?,
            };
            Method::Wmmse { iterations }
        }
        "tecfp" => Method::Tecfp(cfg.tepn()?),
        "teus" => Method::Teus(cfg.teusn()?),
        other => bail!("unknown method {other:?}; expected zf, mmse, wmmse, tecfp or teus"),
    };
    let count = count_mults(&m, &cfg.system())?;
    Ok((m, count))
}

pub fn recorded_wmmse_iterations(cfg: &RunConfig, count: usize) -> Result<f64> {
    let sys = SystemConfig::new(cfg.system.k, cfg.system.n_r, cfg.system.n_t);
    let snr = cfg.eval.snr_db[0];
    let mut total = 0usize;
    for s in gen_channels::<f64>(&sys, count, purpose_seed(cfg.seed, "count-mults")) {
        let s = s.with_sigma2(sigma2_for(s.p_t, snr));
        total += wmmse(&s, &WmmseOptions::default())?.solution.iterations;
    }
    Ok(total as f64 / count as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AblationRecord {
    pub pattern: String,
    pub mde_weights: u64,
    pub weight_ratio: f64,
    pub mde_multiplications: u64,
    pub mult_ratio: f64,
    pub parameters: usize,
    pub snr_db: f64,
    pub mean_sum_rate: f64,
}

/// Trains one TEPN per pattern with the same budget and reports costs and rates.
pub fn ablate_patterns(cfg: &RunConfig, verbose: bool) -> Result<Vec<AblationRecord>> {
    if cfg.task != Task::Precode {
        bail!("pattern ablation runs on the precoding task");
    }
    let (train_set, test) = generate(cfg);
    let extents = [cfg.system.k, cfg.system.n_r, cfg.system.n_t];
    let mut out = Vec::new();
    for pattern in Pattern::ALL {
        let mut run = cfg.clone();
        run.model.pattern = pattern.to_string();
        run.model.schedule.clear();
        let cost = pattern_cost(pattern, 3, run.model.layers, run.model.d_h, &extents)?;
        let outcome = train_run(&run, &train_set, None, None, |_, _| Ok(()))?;
        let records = eval_run(&run, &[], Some((&outcome.model, &outcome.checkpoint.store)), &test, &run.eval.snr_db)?;
        for r in records {
            if verbose {
                eprintln!("{pattern}: {:.0} dB  {:.4}", r.snr_db, r.mean_sum_rate);
            }
            out.push(AblationRecord {
                pattern: pattern.to_string(),
                mde_weights: cost.weights,
                weight_ratio: cost.weight_ratio,
                mde_multiplications: cost.mults,
                mult_ratio: cost.mult_ratio,
                parameters: outcome.model.num_params(),
                snr_db: r.snr_db,
                mean_sum_rate: r.mean_sum_rate,
            });
        }
    }
    Ok(out)
}
