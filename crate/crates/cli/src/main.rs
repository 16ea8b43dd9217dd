use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tenn_cli::commands::{self, CHECKPOINT_FILE, LABEL_FILE, TEST_FILE, TRAIN_FILE};
use tenn_cli::config::{parse_snr_list, RunConfig, Scale, Task};
use tenn_cli::eval::write_records;
use tenn_cli::formats::{load_channels, Checkpoint};
use tenn_cli::train::load_model;

#[derive(Parser)]
#[command(name = "tenn", version, about = "Tensor-equivariant precoding and scheduling experiments")]
struct Cli {
    /// TOML run configuration; missing keys come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// SNR list in dB, e.g. "0,10,20,30"; overrides training and evaluation SNRs.
    #[arg(long, global = true)]
    snr: Option<String>,
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
    #[arg(long, global = true, value_enum)]
    task: Option<Task>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test channel datasets into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Total sample count before the split.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Greedy scheduling labels for a training set.
    GenLabels {
        /// Data directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Label file; defaults to labels.teds in the data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network; writes checkpoint.teds and train_log.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Mean sum-rate per SNR and method as CSV.
    Eval {
        /// Test channel file, or a data directory containing test.teds.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file or run directory; its config supplies system and model settings.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated baselines; defaults to the config's list.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic multiplication count of one inference.
    CountMults {
        /// zf, mmse, wmmse, tecfp or teus.
        #[arg(long)]
        method: String,
        /// WMMSE iteration count; measured when omitted.
        #[arg(long)]
        iters: Option<f64>,
    },
    /// Train every MDE pattern with one budget and report costs and rates.
    AblatePatterns {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

fn resolve(dir_or_file: &Path, file: &str) -> PathBuf {
    if dir_or_file.is_dir() {
        dir_or_file.join(file)
    } else {
        dir_or_file.to_path_buf()
    }
}

fn load_config(cli: &Cli, task: Option<Task>) -> Result<RunConfig> {
    let task = cli.task.or(task);
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, task, cli.scale)?,
        None => RunConfig::preset(task.unwrap_or(Task::Precode), cli.scale.unwrap_or(Scale::Desk)),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(snr) = &cli.snr {
        let list = parse_snr_list(snr)?;
        cfg.train.snr_db = list.clone();
        cfg.eval.snr_db = list;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { out, count } => {
            let mut cfg = load_config(&cli, None)?;
            if let Some(c) = count {
                cfg.data.samples = *c;
                cfg.validate()?;
            }
            let (train, test) = commands::gen_data(&cfg, out)?;
            println!("{}\n{}", train.display(), test.display());
        }
        Command::GenLabels { data, out } => {
            let cfg = load_config(&cli, Some(Task::Schedule))?;
            let out = out.clone().unwrap_or_else(|| data.join(LABEL_FILE));
            commands::gen_labels_cmd(&cfg, &resolve(data, TRAIN_FILE), &out)?;
            println!("{}", out.display());
        }
        Command::Train { data, out, resume, iterations, quiet } => {
            let mut cfg = match resume {
                Some(path) if cli.config.is_none() => Checkpoint::load(path)?.config,
                _ => load_config(&cli, None)?,
            };
            if let Some(t) = iterations {
                cfg.train.iterations = *t;
                cfg.validate()?;
            }
            let outcome = commands::train_cmd(&cfg, data, out, resume.as_deref(), !quiet)?;
            let last = outcome.log.last().map_or(f64::NAN, |e| e.loss);
            println!("{} steps, final loss {last:.5}, {}", outcome.log.len(), out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { data, checkpoint, methods, out } => {
            let loaded = checkpoint.as_ref().map(|p| Checkpoint::load(&resolve(p, CHECKPOINT_FILE))).transpose()?;
            let mut cfg = match (&loaded, &cli.config) {
                (Some(ck), None) => ck.config.clone(),
                _ => load_config(&cli, None)?,
            };
            if let Some(snr) = &cli.snr {
                cfg.eval.snr_db = parse_snr_list(snr)?;
            }
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let test = load_channels(&resolve(data, TEST_FILE), cfg.system.p_t)?;
            let methods: Vec<String> = match methods {
                Some(m) => m.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect(),
                None => cfg.eval.methods.clone(),
            };
            let network = loaded.as_ref().map(load_model).transpose()?;
            let records = commands::eval_run(
                &cfg,
                &methods,
                network.as_ref().map(|(store, model)| (model, store)),
                &test,
                &cfg.eval.snr_db,
            )?;
            write_records(out, &records)?;
            for r in &records {
                println!("{:>5.1} dB  {:<16} {:.4}", r.snr_db, r.method, r.mean_sum_rate);
            }
        }
        Command::CountMults { method, iters } => {
            let cfg = load_config(&cli, None)?;
            let (m, count) = commands::count_mults_cmd(&cfg, method, *iters)?;
            match m {
                tenn_core::complexity::Method::Wmmse { iterations } => {
                    println!("{} {count:.0} (iterations {iterations:.2})", m.name())
                }
                _ => println!("{} {count:.0}", m.name()),
            }
        }
        Command::AblatePatterns { out, quiet } => {
            let cfg = load_config(&cli, Some(Task::Precode))?;
            let records = commands::ablate_patterns(&cfg, !quiet)?;
            let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
            for r in &records {
                w.serialize(r)?;
            }
            w.flush()?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
