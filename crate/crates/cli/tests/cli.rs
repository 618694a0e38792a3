use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use caumax_cli::store::ArtifactStore;
use caumax_core::config::RunConfig;
use caumax_core::estimator::PreparedNetwork;
use caumax_core::eval::{generate, train_stage};
use caumax_core::scm::TreatmentVector;

const SMALL: &str = r#"
seeds = [1, 2]
budgets = [1, 2]
lambdas = [0.0, 0.5]
methods = ["caumax-d", "caumax-g", "degree", "im", "random", "oracle-greedy"]
samples = 60
pool_size = 5

[dataset]
kind = "synthetic"
nodes = 80
attachment = 2

[estimator]
gcn_hidden = 4
mlp_hidden = [4]
epochs = 3
mc_passes = 3

[gumbel]
iterations = 5

[im]
simulations = 5
"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, config).unwrap();
        Run { dir, config: path }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn caumax(&self, stage: &str, extra: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_caumax"));
        cmd.arg(stage).arg("--config").arg(&self.config).arg("--out").arg(self.out()).args(extra);
        cmd.env_remove("CAUMAX_THREADS");
        cmd.output().unwrap()
    }

    fn ok(&self, stage: &str, extra: &[&str]) -> String {
        let o = self.caumax(stage, extra);
        assert!(o.status.success(), "{stage} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn cfg(&self) -> RunConfig {
        let mut cfg = RunConfig::load(&self.config).unwrap();
        cfg.out_dir = self.out();
        cfg
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_is_deterministic_and_reports_the_split() {
    let run = Run::new(&SMALL.replace("nodes = 80", "nodes = 300"));
    let out = run.ok("gen", &["--seed", "1"]);
    assert!(out.contains("|V_A| = 45"), "{out}");
    let store = ArtifactStore::new(run.out());
    let first = (read(&store.split_path(1)), read(&store.data_path(1)));
    run.ok("gen", &["--seed", "1"]);
    assert_eq!(first, (read(&store.split_path(1)), read(&store.data_path(1))));
}

#[test]
fn full_split_is_a_user_error() {
    let run = Run::new(&format!("split_percent = 100.0\n{SMALL}"));
    let o = run.caumax("gen", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("split error"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifacts_exit_2() {
    let run = Run::new(SMALL);
    let o = run.caumax("train", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("caumax gen"), "{}", stderr(&o));

    run.ok("gen", &[]);
    let o = run.caumax("evaluate", &["--method", "degree"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("selections-seed-1.csv"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_environment_exit_2() {
    let run = Run::new(SMALL);
    assert_eq!(code(&run.caumax("gen", &["--method", "greedy"])), 2);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_caumax"));
    let o = cmd.args(["gen", "--config"]).arg(&run.config).env("CAUMAX_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
    let bad = Run::new("sedes = [1]");
    assert_eq!(code(&bad.caumax("gen", &[])), 2);
}

#[test]
fn model_free_selection_needs_no_checkpoint() {
    let run = Run::new(SMALL);
    run.ok("gen", &[]);
    let out = run.ok("select", &["--method", "degree", "--method", "random"]);
    assert!(out.contains("seed 2: 8 selections"), "{out}");
    run.ok("evaluate", &["--method", "degree", "--method", "random"]);
    let report = fs::read_to_string(ArtifactStore::new(run.out()).report_path()).unwrap();
    let nan_rmse = report.lines().skip(2).all(|l| l.split(',').nth(6) == Some("NaN"));
    assert!(nan_rmse, "{report}");
}

#[test]
fn checkpoint_matches_in_memory_training_bit_exactly() {
    let run = Run::new(SMALL);
    run.ok("gen", &["--seed", "2"]);
    run.ok("train", &["--seed", "2"]);
    let cfg = run.cfg();
    let store = ArtifactStore::new(run.out());
    let loaded = store.load_model(&cfg, 2).unwrap();
    assert!(fs::read_to_string(store.trace_path(2)).unwrap().lines().count() > 2);

    let data = generate(&cfg, 2).unwrap();
    let prepared = PreparedNetwork::new(&data.net);
    let (fresh, _) = train_stage(&cfg, &data, &prepared).unwrap();
    let t = TreatmentVector::new((0..data.net.source_count()).map(|i| (i % 3) as f64 / 2.0).collect()).unwrap();
    let a = fresh.forward(&prepared, &t, None).unwrap();
    let b = loaded.forward(&prepared, &t, None).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn early_stopping_is_recorded() {
    let cfg = SMALL.replace("epochs = 3", "epochs = 50\npatience = 2\nlr = 5.0");
    let run = Run::new(&cfg);
    run.ok("gen", &["--seed", "1"]);
    let out = run.ok("train", &["--seed", "1"]);
    let epochs: usize = out.split("seed 1: ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(epochs < 50, "{out}");
}

#[test]
fn corrupted_checkpoint_names_the_magic() {
    let run = Run::new(SMALL);
    run.ok("gen", &["--seed", "1"]);
    run.ok("train", &["--seed", "1"]);
    let path = ArtifactStore::new(run.out()).model_path(1);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("CAUMAX-MODEL v1", "CAUMAX-MODEL v0", 1)).unwrap();
    let o = run.caumax("select", &["--seed", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("CAUMAX-MODEL v1"), "{}", stderr(&o));
}

#[test]
fn pipeline_report_counts_and_stale_artifacts() {
    let run = Run::new(SMALL);
    for stage in ["gen", "train", "select", "evaluate"] {
        run.ok(stage, &[]);
    }
    let out = run.ok("report", &[]);
    assert!(out.contains("24 aggregate rows"), "{out}");
    let store = ArtifactStore::new(run.out());
    let agg = fs::read_to_string(store.aggregate_path()).unwrap();
    assert!(agg.starts_with("# config_hash="));
    assert_eq!(agg.lines().count(), 2 + 6 * 2 * 2);
    for m in ["caumax-d", "caumax-g"] {
        let sweep = fs::read_to_string(store.sweep_path(m)).unwrap();
        assert_eq!(sweep.lines().count(), 2 + 2 * 2, "{sweep}");
    }

    // a different budget list changes the selection hash
    let o = run.caumax("evaluate", &["--budget", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("config hash"), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let o = Command::new(env!("CARGO_BIN_EXE_caumax")).arg("selftest").output().unwrap();
    assert!(o.status.success(), "{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("[PASS]")).count(), 5, "{out}");
}
