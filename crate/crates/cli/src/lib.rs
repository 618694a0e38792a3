//! The `caumax` command line: a `gen → train → select → evaluate → report`
//! pipeline over an artifact directory, plus an invariant self-test.

pub mod selftest;
pub mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use caumax_core::config::RunConfig;
use caumax_core::estimator::{Estimator, PreparedNetwork};
use caumax_core::eval::{aggregate, aggregate_csv, evaluate_stage, generate, lambda_sweeps, report_csv, select_stage, train_stage};
use caumax_core::selectors::Method;
use caumax_core::{Error, Result};

use store::ArtifactStore;

#[derive(Debug, Parser)]
#[command(name = "caumax", version, about = "Cross-group causal influence maximization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the graph split and observational data for each seed.
    Gen(Common),
    /// Fit the effect estimator for each seed.
    Train(Common),
    /// Run the selection methods against the trained estimators.
    Select(Common),
    /// Score selections by regret and estimator RMSE.
    Evaluate(Common),
    /// Aggregate the evaluation report over seeds.
    Report(Common),
    /// Run the invariant suite.
    Selftest,
}

/// Flags shared by the pipeline stages. Each overrides the config key of
/// the same name.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace the configured methods (repeatable)
    #[arg(long = "method")]
    pub methods: Vec<Method>,
    /// Replace the configured budgets K (repeatable)
    #[arg(long = "budget")]
    pub budgets: Vec<usize>,
    /// Replace the configured risk weights (repeatable)
    #[arg(long = "lambda")]
    pub lambdas: Vec<f64>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if !self.methods.is_empty() {
            cfg.methods = self.methods.clone();
        }
        if !self.budgets.is_empty() {
            cfg.budgets = self.budgets.clone();
        }
        if !self.lambdas.is_empty() {
            cfg.lambdas = self.lambdas.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn needs_model(cfg: &RunConfig) -> bool {
    cfg.methods.iter().any(|m| m.uses_model())
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<String>> {
    let store = ArtifactStore::new(&cfg.out_dir);
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let data = generate(cfg, seed)?;
            store.save_seed_data(cfg, &data)?;
            let net = &data.net;
            Ok(format!(
                "seed {seed}: |V_A| = {}, |V_B| = {}, |E_AB| = {}, samples = {}",
                net.source_count(),
                net.target_count(),
                net.edges_ab().len(),
                data.dataset.samples.len()
            ))
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<String>> {
    let store = ArtifactStore::new(&cfg.out_dir);
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let data = store.load_seed_data(cfg, seed)?;
            let prepared = PreparedNetwork::new(&data.net);
            let (model, report) = train_stage(cfg, &data, &prepared)?;
            store.save_model(cfg, seed, &model, &report)?;
            Ok(format!(
                "seed {seed}: {} epochs, best epoch {}, validation MSE {:.4e} (constant predictor {:.4e})",
                report.epochs_run, report.best_epoch, report.best_val_mse, report.baseline_val_mse
            ))
        })
        .collect()
}

pub fn cmd_select(cfg: &RunConfig) -> Result<Vec<String>> {
    let store = ArtifactStore::new(&cfg.out_dir);
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let data = store.load_seed_data(cfg, seed)?;
            let prepared = PreparedNetwork::new(&data.net);
            let model = if needs_model(cfg) { Some(store.load_model(cfg, seed)?) } else { None };
            let est = model.as_ref().map(|m| Estimator::new(m, &prepared)).transpose()?;
            let rows = select_stage(cfg, &data, est.as_ref())?;
            store.save_selections(cfg, seed, &rows)?;
            Ok(format!("seed {seed}: {} selections", rows.len()))
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<String>> {
    let store = ArtifactStore::new(&cfg.out_dir);
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let selections = store.load_selections(cfg, seed)?;
            let data = store.load_seed_data(cfg, seed)?;
            let prepared = PreparedNetwork::new(&data.net);
            let model = if needs_model(cfg) { Some(store.load_model(cfg, seed)?) } else { None };
            let est = model.as_ref().map(|m| Estimator::new(m, &prepared)).transpose()?;
            evaluate_stage(cfg, &data, est.as_ref(), &selections)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<_> = per_seed.into_iter().flatten().collect();
    store.write_csv(&store.report_path(), &cfg.evaluation_hash(), &report_csv(&rows))?;
    Ok(vec![format!("{} report rows -> {}", rows.len(), store.report_path().display())])
}

pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<String>> {
    let store = ArtifactStore::new(&cfg.out_dir);
    let rows = store.load_report(cfg)?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} has no rows", store.report_path().display())));
    }
    let agg = aggregate(&rows);
    let hash = cfg.evaluation_hash();
    store.write_csv(&store.aggregate_path(), &hash, &aggregate_csv(&agg))?;
    let mut lines = vec![format!("{} aggregate rows -> {}", agg.len(), store.aggregate_path().display())];
    for (method, body) in lambda_sweeps(&agg) {
        let path = store.sweep_path(method.as_str());
        store.write_csv(&path, &hash, &body)?;
        lines.push(format!("λ sweep for {method} -> {}", path.display()));
    }
    lines.push(String::new());
    lines.push(format!("{:<14} {:>4} {:>7} {:>12} {:>12} {:>12}", "method", "K", "lambda", "regret", "± se", "rmse"));
    for a in &agg {
        lines.push(format!(
            "{:<14} {:>4} {:>7} {:>12.5} {:>12.5} {:>12.5}",
            a.method.as_str(),
            a.budget,
            a.lambda,
            a.regret_mean,
            a.regret_se,
            a.rmse_mean
        ));
    }
    Ok(lines)
}

/// Caps the global rayon pool when `CAUMAX_THREADS` is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CAUMAX_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("CAUMAX_THREADS must be a positive integer, got `{raw}`")))?;
    // Fails only if the pool was already built, which leaves it usable.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Exit status for an error: 2 for bad inputs, 1 for internal faults.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_user_error() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<Vec<String>> {
    configure_threads()?;
    match cli.command {
        Command::Gen(c) => cmd_gen(&c.resolve()?),
        Command::Train(c) => cmd_train(&c.resolve()?),
        Command::Select(c) => cmd_select(&c.resolve()?),
        Command::Evaluate(c) => cmd_evaluate(&c.resolve()?),
        Command::Report(c) => cmd_report(&c.resolve()?),
        Command::Selftest => selftest::run_all(),
    }
}
