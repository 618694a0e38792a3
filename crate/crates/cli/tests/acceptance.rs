//! Acceptance criteria 1–9. Each test writes one `criterion N: PASS|FAIL`
//! line to stdout (bypassing capture) and then asserts it.
//!
//! Criteria 4–6 train five desk-scale estimators and take several minutes on
//! one core, so they are ignored in the default run:
//!
//! ```text
//! cargo test -p caumax-cli --test acceptance -- --include-ignored --test-threads=1
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use caumax_cli::selftest::{algorithmic_contracts, gradient_fidelity, identification, mc_dropout_contracts, oracle_correctness, CheckOutcome};
use caumax_core::config::RunConfig;
use caumax_core::eval::{prepare_seed, run_experiment, run_prepared, ExperimentReport, PreparedSeed};
use caumax_core::selectors::Method;

fn report(n: u32, passed: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(passed, "criterion {n} failed: {detail}");
}

fn report_check(n: u32, c: CheckOutcome, elapsed: Duration, limit: Option<Duration>) {
    let in_time = limit.map_or(true, |l| elapsed < l);
    let budget = limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
    report(n, c.passed && in_time, &format!("{}; {:.1}s{budget}", c.detail, elapsed.as_secs_f64()));
}

#[test]
fn criterion_1_gradient_fidelity() {
    let t0 = Instant::now();
    let c = gradient_fidelity(100, 1e-4, 1e-4).unwrap();
    report_check(1, c, t0.elapsed(), Some(Duration::from_secs(60)));
}

#[test]
fn criterion_2_ground_truth_oracle() {
    let t0 = Instant::now();
    let c = oracle_correctness(20).unwrap();
    report_check(2, c, t0.elapsed(), None);
}

#[test]
fn criterion_3_identification() {
    let t0 = Instant::now();
    let c = identification(20, 50_000, 19).unwrap();
    report_check(3, c, t0.elapsed(), Some(Duration::from_secs(120)));
}

/// Five desk-scale seeds with trained estimators, shared by criteria 4–6.
struct Desk {
    seeds: Vec<PreparedSeed>,
    prepare: Duration,
}

fn desk_config() -> RunConfig {
    RunConfig::default()
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = desk_config();
        let t0 = Instant::now();
        let seeds = cfg.seeds.iter().map(|&s| prepare_seed(&cfg, s).unwrap()).collect();
        Desk { seeds, prepare: t0.elapsed() }
    })
}

#[test]
#[ignore = "trains five desk-scale estimators"]
fn criterion_4_estimator_quality() {
    let d = desk();
    let ratios: Vec<f64> = d
        .seeds
        .iter()
        .map(|p| {
            let r = &p.model.as_ref().unwrap().1;
            r.best_val_mse / r.baseline_val_mse
        })
        .collect();
    let good = ratios.iter().filter(|&&r| r < 0.5).count();
    let n = &d.seeds[0].data.net;
    let in_time = d.prepare < Duration::from_secs(600);
    report(
        4,
        good >= 4 && in_time,
        &format!(
            "validation MSE / constant-predictor MSE per seed {:?}; {good}/5 below 0.5 (need 4); |V_A| = {}, |V_B| = {}; {:.0}s (limit 600s)",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            n.source_count(),
            n.target_count(),
            d.prepare.as_secs_f64()
        ),
    );
}

fn run_on_desk(cfg: &RunConfig) -> (ExperimentReport, Duration) {
    let d = desk();
    let t0 = Instant::now();
    let outcomes = d.seeds.iter().map(|p| run_prepared(cfg, p).unwrap()).collect();
    (ExperimentReport::from_outcomes(outcomes), t0.elapsed())
}

#[test]
#[ignore = "trains five desk-scale estimators"]
fn criterion_5_table_ordering() {
    let mut cfg = desk_config();
    cfg.budgets = vec![5, 10, 20];
    cfg.lambdas = vec![0.5];
    cfg.methods = vec![Method::CaumaxD, Method::CaumaxG, Method::Degree, Method::Im, Method::Random, Method::OracleGreedy];
    let (rep, select) = run_on_desk(&cfg);
    let total = desk().prepare + select;
    let mut ok = total < Duration::from_secs(1800);
    let mut parts = Vec::new();
    for k in [5, 10, 20] {
        let m = |method| rep.find(method, k, 0.5).unwrap().regret_mean;
        let (d, g, deg, im, rnd) = (m(Method::CaumaxD), m(Method::CaumaxG), m(Method::Degree), m(Method::Im), m(Method::Random));
        let checks = [
            ("D<=G", d <= g),
            ("G<=min(Deg,IM)", g <= deg.min(im)),
            ("min(Deg,IM)<=Rand", deg.min(im) <= rnd),
            ("D<=Rand/3", d <= rnd / 3.0),
            ("G<=Rand/3", g <= rnd / 3.0),
        ];
        let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        ok &= failed.is_empty();
        parts.push(format!(
            "K={k}: D {d:.4} G {g:.4} Degree {deg:.4} IM {im:.4} Random {rnd:.4}{}",
            if failed.is_empty() { String::new() } else { format!(" [violated: {}]", failed.join(", ")) }
        ));
    }
    parts.push(format!("{:.0}s incl. training (limit 1800s)", total.as_secs_f64()));
    report(5, ok, &parts.join("; "));
}

#[test]
#[ignore = "trains five desk-scale estimators"]
fn criterion_6_lambda_trend() {
    let mut cfg = desk_config();
    cfg.budgets = vec![10];
    cfg.lambdas = vec![0.0, 0.5, 2.0];
    cfg.methods = vec![Method::CaumaxD];
    let (rep, select) = run_on_desk(&cfg);
    let a = |l| rep.find(Method::CaumaxD, 10, l).unwrap();
    let (l0, l05, l2) = (a(0.0), a(0.5), a(2.0));
    let first = l05.regret_mean <= l0.regret_mean + l0.regret_se;
    let second = l2.regret_mean >= l05.regret_mean - l05.regret_se;
    report(
        6,
        first && second,
        &format!(
            "CauMax-D Regret@10 mean ± se: λ=0 {:.4} ± {:.4}, λ=0.5 {:.4} ± {:.4}, λ=2 {:.4} ± {:.4}; \
             λ=0.5 ≤ λ=0 + se: {first}; λ=2 ≥ λ=0.5 − se: {second}; selection {:.0}s",
            l0.regret_mean,
            l0.regret_se,
            l05.regret_mean,
            l05.regret_se,
            l2.regret_mean,
            l2.regret_se,
            select.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_algorithmic_contracts() {
    let t0 = Instant::now();
    let c = algorithmic_contracts().unwrap();
    report_check(7, c, t0.elapsed(), None);
}

const PIPELINE: &str = r#"
seeds = [1, 2, 3]
budgets = [1, 3]
lambdas = [0.0, 0.5]
samples = 80
pool_size = 10

[dataset]
kind = "synthetic"
nodes = 120
attachment = 2

[estimator]
gcn_hidden = 4
mlp_hidden = [4]
epochs = 4
mc_passes = 4

[gumbel]
iterations = 10

[im]
simulations = 10
"#;

fn pipeline(config: &Path, out: &Path, threads: &str) {
    for stage in ["gen", "train", "select", "evaluate", "report"] {
        let o = Command::new(env!("CARGO_BIN_EXE_caumax"))
            .arg(stage)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .env("CAUMAX_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// File contents with the trailing timing column removed from result CSVs.
fn comparable(root: &Path, rel: &Path) -> String {
    let text = fs::read_to_string(root.join(rel)).unwrap();
    let timed = text.lines().nth(1).is_some_and(|h| h.ends_with("wall_ms") || h.ends_with("wall_ms_mean"));
    if !timed {
        return text;
    }
    text.lines().map(|l| if l.starts_with('#') { l } else { l.rsplit_once(',').unwrap().0 }).collect::<Vec<_>>().join("\n")
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, PIPELINE).unwrap();
    let runs = [("sequential", "1"), ("sequential rerun", "1"), ("parallel", "4")];
    let outs: Vec<PathBuf> = runs
        .iter()
        .enumerate()
        .map(|(i, (_, threads))| {
            let out = dir.path().join(format!("out{i}"));
            pipeline(&config, &out, threads);
            out
        })
        .collect();
    let reference = files(&outs[0]);
    let mut mismatches = Vec::new();
    for (out, (name, _)) in outs.iter().zip(runs).skip(1) {
        if files(out) != reference {
            mismatches.push(format!("{name}: different file set"));
            continue;
        }
        for rel in &reference {
            if comparable(out, rel) != comparable(&outs[0], rel) {
                mismatches.push(format!("{name}: {}", rel.display()));
            }
        }
    }

    // the staged pipeline reproduces the in-memory experiment
    let mut cfg = RunConfig::from_toml(PIPELINE).unwrap();
    cfg.out_dir = outs[0].clone();
    let strip = |s: &str| s.lines().skip_while(|l| l.starts_with('#')).map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    let memory = run_experiment(&cfg).unwrap().report_csv();
    let staged = fs::read_to_string(outs[0].join("results/report.csv")).unwrap();
    if strip(&memory) != strip(&staged) {
        mismatches.push("staged report differs from in-memory run".into());
    }
    report(
        8,
        mismatches.is_empty(),
        &if mismatches.is_empty() {
            format!(
                "{} artifacts identical (timing columns excluded) across rerun and CAUMAX_THREADS=4; staged report equals in-memory run",
                reference.len()
            )
        } else {
            mismatches.join("; ")
        },
    );
}

#[test]
fn criterion_9_mc_dropout_contracts() {
    let t0 = Instant::now();
    let c = mc_dropout_contracts().unwrap();
    report_check(9, c, t0.elapsed(), None);
}
