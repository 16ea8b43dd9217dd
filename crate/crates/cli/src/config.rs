//! Run configuration: TOML sections layered over a desk- or paper-scale preset.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tenn_core::mimo::{BaselinePrecoder, SystemConfig, WmmseOptions};
use tenn_core::nn::{pattern_subsets, Pattern};
use tenn_core::tepn::TepnConfig;
use tenn_core::teusn::TeusnConfig;
use tenn_core::DimSubset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Precode,
    Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Served users.
    pub k: usize,
    /// Candidate users for scheduling.
    pub k_tilde: usize,
    pub n_r: usize,
    pub n_t: usize,
    pub p_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d_h: usize,
    pub pattern: String,
    pub n_heads: usize,
    pub hermitian_a: bool,
    /// Per-layer MDE subsets as lists of 1-based dims; empty means the pattern default.
    pub schedule: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub snr_db: Vec<f64>,
    /// Precoder inside the greedy labeler: "mmse" or "wmmse".
    pub label_precoder: String,
    /// Worker chunks per gradient step; fixed so results do not depend on thread count.
    pub chunks: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub samples: usize,
    /// Train : test ratio.
    pub split: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub snr_db: Vec<f64>,
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub scale: Scale,
    pub seed: u64,
    pub system: SystemSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn preset(task: Task, scale: Scale) -> Self {
        let desk = scale == Scale::Desk;
        let (layers, d_h) = match (task, desk) {
            (Task::Precode, _) => (3, 8),
            (Task::Schedule, true) => (3, 8),
            (Task::Schedule, false) => (4, 32),
        };
        let snr_db: Vec<f64> = if desk { vec![0.0, 10.0, 20.0, 30.0] } else { (0..=8).map(|i| 5.0 * i as f64).collect() };
        let methods: &[&str] = match task {
            Task::Precode => &["zf", "mmse", "wmmse-rand", "wmmse-mmseinit"],
            Task::Schedule => &["random-sched", "greedy-sched"],
        };
        Self {
            task,
            scale,
            seed: 1,
            system: SystemSection { k: 4, k_tilde: 6, n_r: 2, n_t: 8, p_t: 1.0 },
            model: ModelSection {
                layers,
                d_h,
                pattern: "full".into(),
                n_heads: 2,
                hermitian_a: false,
                schedule: Vec::new(),
            },
            train: TrainSection {
                iterations: match (task, desk) {
                    (_, false) => 200_000,
                    (Task::Precode, true) => 4000,
                    (Task::Schedule, true) => 2000,
                },
                batch: if desk { 128 } else { 2000 },
                lr: match (task, desk) {
                    (_, false) => 5e-4,
                    (Task::Precode, true) => 1e-3,
                    (Task::Schedule, true) => 3e-3,
                },
                snr_db: snr_db.clone(),
                label_precoder: "mmse".into(),
                chunks: 8,
                log_every: if desk { 50 } else { 1000 },
                checkpoint_every: if desk { 500 } else { 10_000 },
            },
            data: DataSection { samples: if desk { 6000 } else { 60_000 }, split: [11, 1] },
            eval: EvalSection { snr_db, methods: methods.iter().map(|s| s.to_string()).collect() },
        }
    }

    /// Parses TOML text; missing keys fall back to the preset named by its
    /// `task` and `scale` keys, or the given ones when absent.
    pub fn from_toml(text: &str, task: Option<Task>, scale: Option<Scale>) -> Result<Self> {
        let user: toml::Table = text.parse().context("parsing config")?;
        let pick = |key: &str| user.get(key).and_then(|v| v.as_str()).map(str::to_owned);
        let task = match (task, pick("task")) {
            (Some(t), _) => t,
            (None, Some(s)) => <Task as clap::ValueEnum>::from_str(&s, true).map_err(anyhow::Error::msg)?,
            (None, None) => Task::Precode,
        };
        let scale = match (scale, pick("scale")) {
            (Some(s), _) => s,
            (None, Some(s)) => <Scale as clap::ValueEnum>::from_str(&s, true).map_err(anyhow::Error::msg)?,
            (None, None) => Scale::Desk,
        };
        let mut base = toml::Table::try_from(Self::preset(task, scale))?;
        merge(&mut base, user);
        base.insert("task".into(), toml::Value::try_from(task)?);
        base.insert("scale".into(), toml::Value::try_from(scale)?);
        let cfg: Self = base.try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, task: Option<Task>, scale: Option<Scale>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text, task, scale)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.k == 0 || s.n_r == 0 || s.n_t == 0 || s.p_t <= 0.0 {
            bail!("system sizes and power must be positive");
        }
        if self.task == Task::Schedule && s.k_tilde < s.k {
            bail!("k_tilde ({}) must be at least k ({})", s.k_tilde, s.k);
        }
        if self.train.iterations == 0 || self.train.batch == 0 || self.train.chunks == 0 {
            bail!("iterations, batch and chunks must be at least 1");
        }
        if self.train.lr <= 0.0 {
            bail!("learning rate must be positive");
        }
        if self.train.snr_db.is_empty() || self.eval.snr_db.is_empty() {
            bail!("SNR lists must be nonempty");
        }
        if self.data.split.contains(&0) {
            bail!("split ratio entries must be positive");
        }
        let (train, test) = self.split_counts();
        if train == 0 || test == 0 {
            bail!("{} samples cannot be split {}:{}", self.data.samples, self.data.split[0], self.data.split[1]);
        }
        if self.model.layers == 0 || self.model.d_h == 0 || !self.model.d_h.is_multiple_of(self.model.n_heads.max(1)) {
            bail!("model needs L ≥ 1 and D_H divisible by the head count");
        }
        pattern_subsets(self.pattern()?, 3, self.model.layers, self.subset_schedule()?.as_deref())?;
        self.label_precoder()?;
        Ok(())
    }

    pub fn pattern(&self) -> Result<Pattern> {
        Pattern::from_str(&self.model.pattern).map_err(|e| anyhow::anyhow!("{e}"))
    }

    fn subset_schedule(&self) -> Result<Option<Vec<Vec<DimSubset>>>> {
        if self.model.schedule.is_empty() {
            return Ok(None);
        }
        let layers = self
            .model
            .schedule
            .iter()
            .map(|layer| layer.iter().map(|dims| DimSubset::new(dims.iter().copied())).collect())
            .collect::<Result<Vec<Vec<DimSubset>>, _>>()?;
        Ok(Some(layers))
    }

    pub fn system(&self) -> SystemConfig {
        let mut sys = SystemConfig::new(self.system.k, self.system.n_r, self.system.n_t);
        sys.k_tilde = self.system.k_tilde;
        sys.p_t = self.system.p_t;
        sys
    }

    /// Users per stored channel sample.
    pub fn users(&self) -> usize {
        match self.task {
            Task::Precode => self.system.k,
            Task::Schedule => self.system.k_tilde,
        }
    }

    pub fn tepn(&self) -> Result<TepnConfig> {
        Ok(TepnConfig {
            layers: self.model.layers,
            d_h: self.model.d_h,
            pattern: self.pattern()?,
            n_heads: self.model.n_heads,
            hermitian_a: self.model.hermitian_a,
            schedule: self.subset_schedule()?,
        })
    }

    pub fn teusn(&self) -> Result<TeusnConfig> {
        Ok(TeusnConfig {
            layers: self.model.layers,
            d_h: self.model.d_h,
            pattern: self.pattern()?,
            n_heads: self.model.n_heads,
            k: self.system.k,
            schedule: self.subset_schedule()?,
        })
    }

    pub fn label_precoder(&self) -> Result<BaselinePrecoder> {
        match self.train.label_precoder.as_str() {
            "mmse" => Ok(BaselinePrecoder::Mmse),
            "wmmse" => Ok(BaselinePrecoder::Wmmse(WmmseOptions::default())),
            "zf" => Ok(BaselinePrecoder::Zf),
            other => bail!("unknown label precoder {other:?}"),
        }
    }

    /// Train and test sample counts from the split ratio.
    pub fn split_counts(&self) -> (usize, usize) {
        let [a, b] = self.data.split;
        let train = self.data.samples * a / (a + b);
        (train, self.data.samples - train)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses `"0,10,20"` into dB values.
pub fn parse_snr_list(s: &str) -> Result<Vec<f64>> {
    let list = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad SNR value {x:?}")))
        .collect::<Result<Vec<_>>>()?;
    if list.is_empty() {
        bail!("empty SNR list");
    }
    Ok(list)
}
