//! Evaluation metrics and the multi-seed experiment pipeline.
//!
//! A seed's run has four stages: generate (graph, split, SCM, observational
//! data), train, select, evaluate. Each stage is a plain function so the
//! command line can persist artifacts between them and reproduce the same
//! rows as an in-memory run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{DatasetSpec, RunConfig};
use crate::error::{Error, Result};
use crate::estimator::{train, Co2gModel, EffectModel, Estimator, PreparedNetwork, TrainReport};
use crate::graph::{core_periphery_split, load_edge_list, synthesize_graph, TwoGroupNetwork};
use crate::rng::{derive_seed, stream};
use crate::scm::{make_treatment_vector, Dataset, ScmEvaluator, ScmParams};
use crate::selectors::{
    caumax_d, caumax_g, oracle_greedy, select_degree, select_im, select_random, Method, SelectionResult,
};

/// true_co2g(S*) − true_co2g(S).
pub fn regret_at_k(net: &TwoGroupNetwork, params: &ScmParams, subset: &[usize], oracle: &[usize]) -> Result<f64> {
    let eval = ScmEvaluator::new(net, params)?;
    Ok(eval.co2g(oracle)? - eval.co2g(subset)?)
}

/// Random subsets used to measure estimator error.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPool {
    pub subsets: Vec<Vec<usize>>,
    pub seed: u64,
}

/// `count` subsets with sizes uniform in `1..=k_max` and members drawn
/// without replacement.
pub fn build_pool(n_a: usize, k_max: usize, count: usize, seed: u64) -> Result<SubsetPool> {
    if count == 0 {
        return Err(Error::Parameter("pool size must be at least 1".into()));
    }
    if k_max == 0 || k_max > n_a {
        return Err(Error::Parameter(format!("pool size bound {k_max} outside 1..={n_a}")));
    }
    let mut rng = stream(seed, "pool", &[]);
    let subsets = (0..count)
        .map(|_| {
            let k = rng.gen_range(1..=k_max);
            let mut s = sample(&mut rng, n_a, k).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    Ok(SubsetPool { subsets, seed })
}

fn squared_errors(model: &dyn Co2gModel, eval: &ScmEvaluator<'_>, subsets: &[Vec<usize>]) -> Result<Vec<f64>> {
    let n_a = model.source_count();
    subsets
        .iter()
        .map(|s| {
            let est = model.co2g_point(&make_treatment_vector(s, 1.0, n_a)?)?;
            Ok((est - eval.co2g(s)?).powi(2))
        })
        .collect()
}

/// Root mean squared error of the model's point Co2G estimate against the
/// SCM truth over the pool.
pub fn rmse_over_pool(model: &dyn Co2gModel, net: &TwoGroupNetwork, params: &ScmParams, pool: &SubsetPool) -> Result<f64> {
    if pool.subsets.is_empty() {
        return Err(Error::Empty("evaluation pool has no subsets".into()));
    }
    let eval = ScmEvaluator::new(net, params)?;
    let se = squared_errors(model, &eval, &pool.subsets)?;
    Ok((se.iter().sum::<f64>() / se.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentificationResult {
    /// Mean of Ȳ_B over observational draws whose treatment equals T(S, t).
    pub adjustment_estimate: f64,
    pub simulated_truth: f64,
    pub z_score: f64,
    pub matches: usize,
}

/// Compares the exact-match adjustment estimate of μ_B(t; S) from `n_obs`
/// observational draws with the closed-form interventional mean.
///
/// Covariates are fixed for a network, so conditioning on X is vacuous and
/// the adjustment sum reduces to conditioning on the treatment vector.
pub fn identification_check(
    net: &TwoGroupNetwork,
    params: &ScmParams,
    subset: &[usize],
    t: f64,
    n_obs: usize,
    seed: u64,
) -> Result<IdentificationResult> {
    let n_a = net.source_count();
    let target = make_treatment_vector(subset, t, n_a)?;
    let eval = ScmEvaluator::new(net, params)?;
    let simulated_truth = eval.interventional_mean(&target)?;
    let (mut n, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
    for i in 0..n_obs as u64 {
        let s = eval.sample(seed, i);
        if s.treatment.as_slice() == target.as_slice() {
            n += 1;
            sum += s.y_bar;
            sum_sq += s.y_bar * s.y_bar;
        }
    }
    if n == 0 {
        return Err(Error::Support(format!(
            "no observational sample among {n_obs} has treatment T(S={subset:?}, t={t})"
        )));
    }
    let mean = sum / n as f64;
    let var = if n > 1 { ((sum_sq - n as f64 * mean * mean) / (n - 1) as f64).max(0.0) } else { 0.0 };
    let se = (var / n as f64).sqrt();
    let diff = (mean - simulated_truth).abs();
    // Noise-free outcomes give se = 0; differences at rounding level then
    // count as agreement.
    let z_score = if se > 0.0 {
        diff / se
    } else if diff <= 1e-12 * (1.0 + simulated_truth.abs()) {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(IdentificationResult { adjustment_estimate: mean, simulated_truth, z_score, matches: n })
}

/// Best subset of size at most `k` by enumeration. Ties keep the
/// lexicographically first subset.
pub fn exhaustive_optimum(net: &TwoGroupNetwork, params: &ScmParams, k: usize) -> Result<(Vec<usize>, f64)> {
    let n_a = net.source_count();
    if n_a > 20 {
        return Err(Error::Parameter(format!("exhaustive search over {n_a} sources is infeasible")));
    }
    let eval = ScmEvaluator::new(net, params)?;
    let mut best = (Vec::new(), 0.0);
    for bits in 1u32..(1 << n_a) {
        if bits.count_ones() as usize > k {
            continue;
        }
        let s: Vec<usize> = (0..n_a).filter(|i| bits >> i & 1 == 1).collect();
        let v = eval.co2g(&s)?;
        if v > best.1 || (v == best.1 && s < best.0) {
            best = (s, v);
        }
    }
    Ok(best)
}

/// Network and observational data for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub net: TwoGroupNetwork,
    pub dataset: Dataset,
}

pub fn generate(cfg: &RunConfig, seed: u64) -> Result<SeedData> {
    let ctx = |e: Error| e.context(format!("seed {seed}: generate"));
    let raw = match &cfg.dataset {
        DatasetSpec::Synthetic { nodes, attachment } => {
            synthesize_graph(*nodes, *attachment, derive_seed(seed, "graph", &[])).map_err(ctx)?
        }
        DatasetSpec::File { edges, features } => load_edge_list(edges, features.as_deref()).map_err(ctx)?,
    };
    let mut net = core_periphery_split(&raw, cfg.split_percent).map_err(ctx)?;
    if net.covariate_dim() == 0 {
        net = crate::scm::synthesize_features(net, cfg.covariate_dim, derive_seed(seed, "features", &[])).map_err(ctx)?;
    }
    if cfg.max_budget() > net.source_count() {
        return Err(ctx(Error::Usage(format!(
            "budget {} exceeds the {} source nodes",
            cfg.max_budget(),
            net.source_count()
        ))));
    }
    let params = ScmParams::draw(net.covariate_dim(), cfg.scm, derive_seed(seed, "scm", &[])).map_err(ctx)?;
    let sample_seed = derive_seed(seed, "observations", &[]);
    let samples = crate::scm::sample_observational(&net, &params, cfg.samples, sample_seed).map_err(ctx)?;
    Ok(SeedData { seed, net, dataset: Dataset { params, sample_seed, samples } })
}

/// Trains a fresh estimator on the seed's observational data and freezes it.
pub fn train_stage(cfg: &RunConfig, data: &SeedData, prepared: &PreparedNetwork) -> Result<(EffectModel, TrainReport)> {
    let seed = data.seed;
    let ctx = |e: Error| e.context(format!("seed {seed}: train"));
    let mut model =
        EffectModel::new(cfg.estimator.clone(), data.net.covariate_dim(), derive_seed(seed, "model-init", &[])).map_err(ctx)?;
    let report = train(&mut model, prepared, &data.dataset.samples, derive_seed(seed, "train", &[])).map_err(ctx)?;
    model.freeze();
    Ok((model, report))
}

fn with_lambda(r: &SelectionResult, seed: u64, lambda: f64) -> SelectionResult {
    SelectionResult { seed, lambda, ..r.clone() }
}

/// Runs every configured method at every budget and λ. Greedy methods run
/// once at the largest budget and are truncated, which gives the same
/// subsets as separate runs. Model-free methods ignore λ and their rows are
/// repeated for each λ. Rows are ordered method, λ, budget as configured.
pub fn select_stage(
    cfg: &RunConfig,
    data: &SeedData,
    estimator: Option<&Estimator<'_>>,
) -> Result<Vec<SelectionResult>> {
    let seed = data.seed;
    let net = &data.net;
    let n_a = net.source_count();
    let k_max = cfg.max_budget();
    let passes = cfg.estimator.mc_passes;
    let mut out = Vec::new();
    for &method in &cfg.methods {
        let ctx = |e: Error| e.context(format!("seed {seed}: select {method}"));
        let model = || -> Result<&Estimator<'_>> {
            estimator.ok_or_else(|| Error::Usage(format!("{method} needs a trained model")))
        };
        match method {
            Method::CaumaxG => {
                for &lambda in &cfg.lambdas {
                    let mc = derive_seed(seed, "caumax-g", &[]);
                    let full = caumax_g(model().map_err(ctx)?, k_max, lambda, passes, mc).map_err(ctx)?;
                    out.extend(cfg.budgets.iter().map(|&k| with_lambda(&full.truncated(k), seed, lambda)));
                }
            }
            Method::CaumaxD => {
                for &lambda in &cfg.lambdas {
                    for &k in &cfg.budgets {
                        let s = derive_seed(seed, "caumax-d", &[k as u64]);
                        let r = caumax_d(model().map_err(ctx)?, k, &cfg.gumbel, lambda, passes, s).map_err(ctx)?;
                        out.push(with_lambda(&r, seed, lambda));
                    }
                }
            }
            Method::Random | Method::Degree => {
                let per_k = cfg
                    .budgets
                    .iter()
                    .map(|&k| match method {
                        Method::Random => select_random(n_a, k, derive_seed(seed, "random", &[k as u64])),
                        _ => select_degree(net, k),
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(ctx)?;
                for &lambda in &cfg.lambdas {
                    out.extend(per_k.iter().map(|r| with_lambda(r, seed, lambda)));
                }
            }
            Method::Im | Method::OracleGreedy => {
                let full = match method {
                    Method::Im => select_im(net, k_max, cfg.im.simulations, cfg.im.p_ic, derive_seed(seed, "im", &[])),
                    _ => oracle_greedy(net, &data.dataset.params, k_max),
                }
                .map_err(ctx)?;
                for &lambda in &cfg.lambdas {
                    out.extend(cfg.budgets.iter().map(|&k| with_lambda(&full.truncated(k), seed, lambda)));
                }
            }
        }
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "method,dataset,K,lambda,seed,regret,rmse,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub dataset: String,
    pub budget: usize,
    pub lambda: f64,
    pub seed: u64,
    pub regret: f64,
    /// NaN when no trained model was available.
    pub rmse: f64,
    pub wall_ms: f64,
}

impl ReportRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:?},{},{:?},{:?},{:.3}",
            self.method, self.dataset, self.budget, self.lambda, self.seed, self.regret, self.rmse, self.wall_ms
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse { line: 0, message: format!("report row needs 8 fields, got {}", f.len()) });
        }
        let bad = |what: &str| Error::Parse { line: 0, message: format!("bad {what} in report row") };
        Ok(ReportRow {
            method: f[0].parse()?,
            dataset: f[1].to_string(),
            budget: f[2].parse().map_err(|_| bad("K"))?,
            lambda: f[3].parse().map_err(|_| bad("lambda"))?,
            seed: f[4].parse().map_err(|_| bad("seed"))?,
            regret: f[5].parse().map_err(|_| bad("regret"))?,
            rmse: f[6].parse().map_err(|_| bad("rmse"))?,
            wall_ms: f[7].parse().map_err(|_| bad("wall_ms"))?,
        })
    }
}

/// Regret against Oracle-Greedy at the same budget, and estimator RMSE over
/// the budget's pool plus the selected subset.
pub fn evaluate_stage(
    cfg: &RunConfig,
    data: &SeedData,
    estimator: Option<&Estimator<'_>>,
    selections: &[SelectionResult],
) -> Result<Vec<ReportRow>> {
    let seed = data.seed;
    let ctx = |e: Error| e.context(format!("seed {seed}: evaluate"));
    if selections.is_empty() {
        return Err(ctx(Error::Empty("no selections to evaluate".into())));
    }
    let net = &data.net;
    let params = &data.dataset.params;
    let eval = ScmEvaluator::new(net, params).map_err(ctx)?;
    let n_a = net.source_count();
    for s in selections {
        s.validate(n_a).map_err(ctx)?;
    }
    let k_max = selections.iter().map(|s| s.budget).max().unwrap_or(0);
    let oracle = oracle_greedy(net, params, k_max).map_err(ctx)?;
    let mut pool_sse: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    if let Some(est) = estimator {
        for k in selections.iter().map(|s| s.budget) {
            if pool_sse.contains_key(&k) {
                continue;
            }
            let pool = build_pool(n_a, k, cfg.pool_size, derive_seed(seed, "pool", &[k as u64])).map_err(ctx)?;
            let se = squared_errors(est, &eval, &pool.subsets).map_err(ctx)?;
            pool_sse.insert(k, (se.iter().sum(), se.len()));
        }
    }
    let dataset = cfg.dataset.label();
    selections
        .iter()
        .map(|s| {
            let best = eval.co2g(&oracle.truncated(s.budget).subset)?;
            let regret = best - eval.co2g(&s.subset)?;
            if regret < 0.0 {
                log::warn!("seed {seed}: {} at K={} beats the approximate oracle by {:.3e}", s.method, s.budget, -regret);
            }
            let rmse = match (estimator, pool_sse.get(&s.budget)) {
                (Some(est), Some(&(sse, n))) => {
                    let own = squared_errors(est, &eval, std::slice::from_ref(&s.subset))?[0];
                    ((sse + own) / (n + 1) as f64).sqrt()
                }
                _ => f64::NAN,
            };
            Ok(ReportRow {
                method: s.method,
                dataset: dataset.clone(),
                budget: s.budget,
                lambda: s.lambda,
                seed,
                regret,
                rmse,
                wall_ms: s.wall_ms,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(ctx)
}

/// Everything produced for one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub train_report: Option<TrainReport>,
    pub selections: Vec<SelectionResult>,
    pub rows: Vec<ReportRow>,
}

/// Generated data and (if any configured method needs one) a trained model.
#[derive(Debug)]
pub struct PreparedSeed {
    pub data: SeedData,
    pub prepared: PreparedNetwork,
    pub model: Option<(EffectModel, TrainReport)>,
}

pub fn prepare_seed(cfg: &RunConfig, seed: u64) -> Result<PreparedSeed> {
    let data = generate(cfg, seed)?;
    let prepared = PreparedNetwork::new(&data.net);
    let model = if cfg.methods.iter().any(|m| m.uses_model()) {
        Some(train_stage(cfg, &data, &prepared)?)
    } else {
        None
    };
    Ok(PreparedSeed { data, prepared, model })
}

/// Selection and evaluation for a prepared seed. The config may differ from
/// the one used to prepare it in its selection and evaluation settings.
pub fn run_prepared(cfg: &RunConfig, p: &PreparedSeed) -> Result<SeedOutcome> {
    let est = match &p.model {
        Some((m, _)) => Some(Estimator::new(m, &p.prepared)?),
        None => None,
    };
    let selections = select_stage(cfg, &p.data, est.as_ref())?;
    let rows = evaluate_stage(cfg, &p.data, est.as_ref(), &selections)?;
    Ok(SeedOutcome {
        seed: p.data.seed,
        train_report: p.model.as_ref().map(|(_, r)| r.clone()),
        selections,
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<SeedOutcome>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn from_outcomes(outcomes: Vec<SeedOutcome>) -> Self {
        let rows: Vec<ReportRow> = outcomes.iter().flat_map(|o| o.rows.iter().cloned()).collect();
        let aggregates = aggregate(&rows);
        ExperimentReport { outcomes, aggregates }
    }

    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.outcomes.iter().flat_map(|o| o.rows.iter())
    }

    pub fn report_csv(&self) -> String {
        report_csv(self.rows())
    }

    pub fn find(&self, method: Method, budget: usize, lambda: f64) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.method == method && a.budget == budget && a.lambda == lambda)
    }
}

/// Seeds run in parallel; outcomes keep the configured seed order.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let outcomes = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_prepared(cfg, &prepare_seed(cfg, seed)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_outcomes(outcomes))
}

pub fn report_csv<'a>(rows: impl IntoIterator<Item = &'a ReportRow>) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

pub const AGGREGATE_HEADER: &str =
    "method,dataset,K,lambda,seeds,regret_mean,regret_std,regret_se,rmse_mean,rmse_std,wall_ms_mean";

/// Per (method, K, λ) statistics across seeds. `std` is the sample
/// standard deviation and `se` is std/√n.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub dataset: String,
    pub budget: usize,
    pub lambda: f64,
    pub seeds: usize,
    pub regret_mean: f64,
    pub regret_std: f64,
    pub regret_se: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub wall_ms_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// Groups rows by (method, dataset, K, λ) in order of first appearance.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(Method, String, usize, u64)> = Vec::new();
    let mut groups: BTreeMap<(Method, String, usize, u64), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.method, r.dataset.clone(), r.budget, r.lambda.to_bits());
        let g = groups.entry(key.clone()).or_default();
        if g.is_empty() {
            order.push(key);
        }
        g.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col = |f: fn(&ReportRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (regret_mean, regret_std) = mean_std(&col(|r| r.regret));
            let (rmse_mean, rmse_std) = mean_std(&col(|r| r.rmse));
            let (wall_ms_mean, _) = mean_std(&col(|r| r.wall_ms));
            AggregateRow {
                method: key.0,
                dataset: key.1.clone(),
                budget: key.2,
                lambda: f64::from_bits(key.3),
                seeds: g.len(),
                regret_mean,
                regret_std,
                regret_se: regret_std / (g.len() as f64).sqrt(),
                rmse_mean,
                rmse_std,
                wall_ms_mean,
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for a in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{},{:?},{:?},{:?},{:?},{:?},{:.3}",
            a.method,
            a.dataset,
            a.budget,
            a.lambda,
            a.seeds,
            a.regret_mean,
            a.regret_std,
            a.regret_se,
            a.rmse_mean,
            a.rmse_std,
            a.wall_ms_mean
        );
    }
    s
}

pub const SWEEP_HEADER: &str = "K,lambda,regret_mean,regret_se";

/// One plot-data CSV per λ-dependent method: bars grouped by K, one bar per
/// λ. Methods with a single λ are skipped.
pub fn lambda_sweeps(rows: &[AggregateRow]) -> Vec<(Method, String)> {
    let mut out = Vec::new();
    for method in Method::ALL.into_iter().filter(|m| m.uses_lambda()) {
        let mine: Vec<&AggregateRow> = rows.iter().filter(|a| a.method == method).collect();
        let mut lambdas: Vec<f64> = mine.iter().map(|a| a.lambda).collect();
        lambdas.sort_by(f64::total_cmp);
        lambdas.dedup();
        if lambdas.len() < 2 {
            continue;
        }
        let mut sorted = mine.clone();
        sorted.sort_by(|a, b| a.budget.cmp(&b.budget).then(a.lambda.total_cmp(&b.lambda)));
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for a in sorted {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", a.budget, a.lambda, a.regret_mean, a.regret_se);
        }
        out.push((method, s));
    }
    out
}
