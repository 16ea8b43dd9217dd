use std::path::Path;
use std::process::Command;

use tenn_cli::commands::{self, eval_run, make_labels, train_run};
use tenn_cli::eval::{lookup, read_records};
use tenn_cli::formats::{load_channels, load_tensor, Checkpoint, Labels};
use tenn_cli::train::{build_model, load_model, sigma2_for, train_step, Model};
use tenn_cli::{RunConfig, Scale, Task};
use tenn_core::mimo::{stream_rng, ChannelSample};
use tenn_core::Permutation;

fn tenn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tenn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tenn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn tiny(task: Task) -> RunConfig {
    let mut cfg = RunConfig::preset(task, Scale::Desk);
    cfg.data.samples = 48;
    cfg.train.iterations = 4;
    cfg.train.batch = 6;
    cfg.train.chunks = 3;
    cfg.model.d_h = 4;
    cfg.model.layers = 2;
    cfg
}

const TINY: &str = "[data]\nsamples = 36\n[train]\niterations = 3\nbatch = 4\n[model]\nd_h = 4\nlayers = 1\n";

#[test]
fn gen_data_is_deterministic_with_expected_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--config", &cfg, "--seed", "7", "gen-data", "--out", a.to_str().unwrap()]);
    ok(&["--config", &cfg, "--seed", "7", "gen-data", "--out", b.to_str().unwrap()]);
    for f in ["train.teds", "test.teds"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    assert_eq!(load_tensor(&a.join("train.teds")).unwrap().shape(), &[33, 4, 2, 8, 2]);
    assert_eq!(load_tensor(&a.join("test.teds")).unwrap().shape(), &[3, 4, 2, 8, 2]);
    let c = dir.path().join("c");
    ok(&["--config", &cfg, "--seed", "8", "gen-data", "--out", c.to_str().unwrap()]);
    assert_ne!(std::fs::read(a.join("train.teds")).unwrap(), std::fs::read(c.join("train.teds")).unwrap());
}

#[test]
fn rewritten_dataset_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("d");
    ok(&["--config", &cfg, "gen-data", "--out", data.to_str().unwrap()]);
    let path = data.join("train.teds");
    let samples = load_channels(&path, 1.0).unwrap();
    let again = dir.path().join("again.teds");
    tenn_cli::formats::save_channels(&again, &samples).unwrap();
    assert_eq!(std::fs::read(path).unwrap(), std::fs::read(again).unwrap());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("d");
    ok(&["--config", &cfg, "gen-data", "--out", data.to_str().unwrap()]);
    for run in ["r1", "r2"] {
        ok(&["--config", &cfg, "train", "--quiet", "--data", data.to_str().unwrap(), "--out", dir.path().join(run).to_str().unwrap()]);
    }
    let a = std::fs::read(dir.path().join("r1/checkpoint.teds")).unwrap();
    let b = std::fs::read(dir.path().join("r2/checkpoint.teds")).unwrap();
    assert_eq!(a, b);
    let log = std::fs::read_to_string(dir.path().join("r1/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,lr,loss"));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let cfg = tiny(Task::Precode);
    let (data, _) = commands::generate(&cfg);
    let full = train_run(&cfg, &data, None, None, |_, _| Ok(())).unwrap();

    let (mut store, model) = build_model(&cfg).unwrap();
    for step in 0..2 {
        train_step(&cfg, &model, &mut store, step, &data, None).unwrap();
    }
    let partial = Checkpoint { config: cfg.clone(), seed: cfg.seed, store };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.teds");
    partial.save(&path).unwrap();
    let resumed = train_run(&cfg, &data, None, Some(Checkpoint::load(&path).unwrap()), |_, _| Ok(())).unwrap();
    assert_eq!(resumed.log.len(), 2);
    assert_eq!(resumed.log[..], full.log[2..]);

    let (mut a, mut b) = (Vec::new(), Vec::new());
    full.checkpoint.write(&mut a).unwrap();
    resumed.checkpoint.write(&mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_with_other_config_is_refused() {
    let cfg = tiny(Task::Precode);
    let (data, _) = commands::generate(&cfg);
    let run = train_run(&cfg, &data, None, None, |_, _| Ok(())).unwrap();
    let mut other = cfg.clone();
    other.model.d_h = 8;
    assert!(train_run(&other, &data, None, Some(run.checkpoint), |_, _| Ok(())).is_err());
}

#[test]
fn thread_count_does_not_change_training() {
    let cfg = tiny(Task::Precode);
    let (data, _) = commands::generate(&cfg);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = train_run(&cfg, &data, None, None, |_, _| Ok(())).unwrap();
            let mut bytes = Vec::new();
            out.checkpoint.write(&mut bytes).unwrap();
            bytes
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let cfg = tiny(Task::Precode);
    let (data, test) = commands::generate(&cfg);
    let run = train_run(&cfg, &data, None, None, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.teds");
    run.checkpoint.save(&path).unwrap();
    let (store, model) = load_model(&Checkpoint::load(&path).unwrap()).unwrap();
    let (Model::Tepn(before), Model::Tepn(after)) = (&run.model, &model) else { panic!("precoding model expected") };
    let test: Vec<_> = test.iter().map(|s| s.with_sigma2(0.1)).collect();
    let x = before.precode(&run.checkpoint.store, &test).unwrap();
    let y = after.precode(&store, &test).unwrap();
    for (a, b) in x.iter().zip(&y) {
        assert_eq!(a.sum_rate.to_bits(), b.sum_rate.to_bits());
        for (wa, wb) in a.w.iter().zip(&b.w) {
            assert_eq!(wa, wb);
        }
    }
}

fn permute_sample(s: &ChannelSample<f64>, seed: u64) -> ChannelSample<f64> {
    let mut rng = stream_rng(seed, 0);
    s.permute_users(&Permutation::random(s.k(), &mut rng))
        .permute_rx(&Permutation::random(s.n_r(), &mut rng))
        .permute_tx(&Permutation::random(s.n_t(), &mut rng))
}

#[test]
fn permuted_test_sets_give_identical_means() {
    for task in [Task::Precode, Task::Schedule] {
        let cfg = tiny(task);
        let (_, test) = commands::generate(&cfg);
        let (store, model) = build_model(&cfg).unwrap();
        let permuted: Vec<_> = test.iter().enumerate().map(|(i, s)| permute_sample(s, i as u64)).collect();
        let a = eval_run(&cfg, &[], Some((&model, &store)), &test, &[10.0]).unwrap();
        let b = eval_run(&cfg, &[], Some((&model, &store)), &permuted, &[10.0]).unwrap();
        let (x, y) = (a[0].mean_sum_rate, b[0].mean_sum_rate);
        assert!((x - y).abs() <= 1e-9 * x.abs(), "{task:?}: {x} vs {y}");
    }
}

#[test]
fn eval_writes_one_row_per_snr_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("d");
    ok(&["--config", &cfg, "gen-data", "--out", data.to_str().unwrap()]);
    let csv = dir.path().join("eval.csv");
    ok(&["--config", &cfg, "--snr", "0,15", "eval", "--data", data.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    let records = read_records(&csv).unwrap();
    assert_eq!(records.len(), 8);
    for snr in [0.0, 15.0] {
        for m in ["zf", "mmse", "wmmse-rand", "wmmse-mmseinit"] {
            assert_eq!(records.iter().filter(|r| r.snr_db == snr && r.method == m).count(), 1);
        }
    }
    assert!(records.iter().all(|r| r.samples == 3 && r.multiplications > 0.0));
}

#[test]
fn checkpoint_trained_at_four_users_evaluates_at_six() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let small = dir.path().join("small");
    ok(&["--config", &cfg, "gen-data", "--out", small.to_str().unwrap()]);
    let run = dir.path().join("run");
    ok(&["--config", &cfg, "train", "--quiet", "--data", small.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    let big_cfg = dir.path().join("big.toml");
    std::fs::write(&big_cfg, format!("{TINY}[system]\nk = 6\nn_t = 12\n")).unwrap();
    let big = dir.path().join("big");
    ok(&["--config", big_cfg.to_str().unwrap(), "gen-data", "--out", big.to_str().unwrap()]);
    let csv = dir.path().join("eval.csv");
    ok(&["eval", "--data", big.to_str().unwrap(), "--checkpoint", run.to_str().unwrap(), "--methods", "mmse", "--out", csv.to_str().unwrap()]);
    let records = read_records(&csv).unwrap();
    let te: Vec<_> = records.iter().filter(|r| r.method == "tecfp").collect();
    assert_eq!(te.len(), 4);
    assert!(te.iter().all(|r| r.mean_sum_rate.is_finite() && r.parameters > 0));
}

#[test]
fn schedule_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("task = \"schedule\"\n{TINY}"));
    let data = dir.path().join("d");
    ok(&["--config", &cfg, "gen-data", "--out", data.to_str().unwrap()]);
    ok(&["--config", &cfg, "gen-labels", "--data", data.to_str().unwrap()]);
    let labels = Labels::load(&data.join("labels.teds")).unwrap();
    assert_eq!(labels.len(), 33);
    assert!(labels.eta.iter().all(|e| e.len() == 6 && e.iter().filter(|&&b| b).count() == 4));
    assert_eq!(&labels.snr_db[..5], &[0.0, 10.0, 20.0, 30.0, 0.0]);
    let run = dir.path().join("run");
    ok(&["--config", &cfg, "train", "--quiet", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    let csv = dir.path().join("eval.csv");
    ok(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", run.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    let records = read_records(&csv).unwrap();
    assert!(lookup(&records, "teus", 10.0).is_some());
    assert!(lookup(&records, "greedy-sched", 10.0).unwrap() >= lookup(&records, "random-sched", 10.0).unwrap() * 0.5);
}

#[test]
fn labels_follow_channel_symmetries() {
    let cfg = tiny(Task::Schedule);
    let (data, _) = commands::generate(&cfg);
    let data = &data[..6];
    let base = make_labels(&cfg, data, &[10.0]).unwrap();
    let mut rng = stream_rng(3, 0);
    let rx: Vec<_> = data.iter().map(|s| s.permute_rx(&Permutation::random(s.n_r(), &mut rng))).collect();
    assert_eq!(make_labels(&cfg, &rx, &[10.0]).unwrap(), base);
    let tx: Vec<_> = data.iter().map(|s| s.permute_tx(&Permutation::random(s.n_t(), &mut rng))).collect();
    assert_eq!(make_labels(&cfg, &tx, &[10.0]).unwrap(), base);
}

#[test]
fn wmmse_with_mmse_init_beats_mmse_on_average() {
    let mut cfg = RunConfig::preset(Task::Precode, Scale::Desk);
    cfg.data.samples = 600;
    let (_, test) = commands::generate(&cfg);
    assert!(test.len() >= 50);
    let methods = vec!["mmse".to_string(), "wmmse-mmseinit".to_string()];
    let records = eval_run(&cfg, &methods, None, &test, &[0.0, 10.0, 20.0, 30.0]).unwrap();
    for snr in [0.0, 10.0, 20.0, 30.0] {
        assert!(lookup(&records, "wmmse-mmseinit", snr).unwrap() >= lookup(&records, "mmse", snr).unwrap());
    }
}

#[test]
fn count_mults_prints_table_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[system]\nk = 8\nn_r = 2\nn_t = 32\n");
    let out = ok(&["--config", &cfg, "count-mults", "--method", "mmse"]);
    assert_eq!(out.trim(), "mmse 61440");
    let out = ok(&["--config", &cfg, "count-mults", "--method", "wmmse", "--iters", "10"]);
    assert!(out.starts_with("wmmse "));
    assert!(!tenn(&["count-mults", "--method", "cnn"]).status.success());
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let out = tenn(&["eval", "--data", "/nonexistent/test.teds", "--out", "/tmp/never.csv"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));
}

#[test]
fn snr_override_sets_noise_power() {
    assert!((sigma2_for(1.0, 10.0) - 0.1).abs() < 1e-15);
    assert!((sigma2_for(2.0, 0.0) - 2.0).abs() < 1e-15);
}
