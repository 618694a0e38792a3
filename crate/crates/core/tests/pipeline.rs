use caumax_core::config::RunConfig;
use caumax_core::eval::{aggregate, run_experiment, ReportRow, REPORT_HEADER};
use caumax_core::selectors::Method;

const TINY: &str = r#"
seeds = [4, 9]
budgets = [1, 3]
lambdas = [0.0, 1.0]
samples = 50
pool_size = 6

[dataset]
kind = "synthetic"
nodes = 70
attachment = 2

[estimator]
gcn_hidden = 4
mlp_hidden = [4]
epochs = 3
mc_passes = 3

[gumbel]
iterations = 8

[im]
simulations = 8
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

#[test]
fn config_survives_a_file_round_trip() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.evaluation_hash(), cfg.evaluation_hash());
}

#[test]
fn stage_hashes_only_move_downstream() {
    let base = tiny();
    let hashes = |c: &RunConfig| [c.data_hash(), c.model_hash(), c.selection_hash(), c.evaluation_hash()];
    let changed = |c: &RunConfig| {
        let (a, b) = (hashes(&base), hashes(c));
        a.iter().zip(&b).map(|(x, y)| x != y).collect::<Vec<_>>()
    };

    let mut c = base.clone();
    c.samples += 1;
    assert_eq!(changed(&c), [true, true, true, true]);

    let mut c = base.clone();
    c.estimator.epochs += 1;
    assert_eq!(changed(&c), [false, true, true, true]);

    let mut c = base.clone();
    c.gumbel.iterations += 1;
    assert_eq!(changed(&c), [false, false, true, true]);

    let mut c = base.clone();
    c.pool_size += 1;
    assert_eq!(changed(&c), [false, false, false, true]);
}

#[test]
fn tiny_experiment_is_complete_and_deterministic() {
    let cfg = tiny();
    let a = run_experiment(&cfg).unwrap();
    let rows: Vec<&ReportRow> = a.rows().collect();
    assert_eq!(rows.len(), Method::ALL.len() * 2 * 2 * 2);
    for r in &rows {
        assert!(r.regret.is_finite(), "{r:?}");
        assert!(r.rmse.is_finite() && r.rmse >= 0.0, "{r:?}");
        if r.method == Method::OracleGreedy {
            assert_eq!(r.regret, 0.0);
        }
    }

    // the CSV round-trips and aggregates to one row per (method, K, λ)
    let csv = a.report_csv();
    assert_eq!(csv.lines().next(), Some(REPORT_HEADER));
    let parsed: Vec<ReportRow> = csv.lines().skip(1).map(|l| ReportRow::from_csv_row(l).unwrap()).collect();
    assert_eq!(aggregate(&parsed).len(), Method::ALL.len() * 2 * 2);

    let b = run_experiment(&cfg).unwrap();
    for (x, y) in a.rows().zip(b.rows()) {
        assert_eq!((x.regret.to_bits(), x.rmse.to_bits()), (y.regret.to_bits(), y.rmse.to_bits()));
    }
}

#[test]
fn greedy_budgets_share_a_prefix() {
    let cfg = tiny();
    let report = run_experiment(&cfg).unwrap();
    for outcome in &report.outcomes {
        for method in [Method::CaumaxG, Method::OracleGreedy, Method::Im] {
            for lambda in [0.0, 1.0] {
                let at = |k| {
                    outcome
                        .selections
                        .iter()
                        .find(|s| s.method == method && s.budget == k && s.lambda == lambda)
                        .unwrap()
                        .subset
                        .clone()
                };
                let (small, large) = (at(1), at(3));
                assert!(large.starts_with(&small), "{method:?} λ={lambda}: {small:?} vs {large:?}");
            }
        }
    }
}

#[test]
fn oversized_budget_is_a_user_error() {
    let mut cfg = tiny();
    cfg.budgets = vec![500];
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.is_user_error(), "{err}");
}
