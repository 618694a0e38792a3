//! Subset-selection strategies.
//!
//! Model-based: uncertainty-aware greedy search (`caumax_g`) and the
//! Gumbel-sigmoid relaxation (`caumax_d`). Baselines: uniform random,
//! highest degree, independent-cascade influence maximisation and greedy
//! search on the true effect. Ties are always broken by smallest id.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::distributions::Open01;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Matrix};
use crate::error::{Error, Result};
use crate::estimator::{lcb_objective, Co2gModel, Co2gStats};
use crate::graph::TwoGroupNetwork;
use crate::rng;
use crate::scm::{sigmoid, make_treatment_vector, ScmEvaluator, ScmParams, TreatmentVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CaumaxG,
    CaumaxD,
    Random,
    Degree,
    Im,
    OracleGreedy,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::CaumaxD, Method::CaumaxG, Method::Degree, Method::Im, Method::Random, Method::OracleGreedy];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::CaumaxG => "caumax-g",
            Method::CaumaxD => "caumax-d",
            Method::Random => "random",
            Method::Degree => "degree",
            Method::Im => "im",
            Method::OracleGreedy => "oracle-greedy",
        }
    }

    /// Needs a trained estimator.
    pub fn uses_model(self) -> bool {
        matches!(self, Method::CaumaxG | Method::CaumaxD)
    }

    /// Result depends on the uncertainty penalty.
    pub fn uses_lambda(self) -> bool {
        self.uses_model()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}` (expected one of caumax-g, caumax-d, random, degree, im, oracle-greedy)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub method: Method,
    pub budget: usize,
    pub lambda: f64,
    pub seed: u64,
    /// In selection order.
    pub subset: Vec<usize>,
    /// Greedy methods: objective of the empty set, then after each accepted
    /// step. Relaxation: J at every iteration.
    pub trace: Vec<f64>,
    /// Greedy methods: elapsed milliseconds at each `trace` entry.
    pub step_ms: Vec<f64>,
    /// The method's own objective for the returned subset.
    pub objective: f64,
    pub wall_ms: f64,
}

pub const SELECTION_HEADER: &str = "method,K,lambda,seed,subset,J,wall_ms";

impl SelectionResult {
    pub fn to_csv_row(&self) -> String {
        let subset: Vec<String> = self.subset.iter().map(usize::to_string).collect();
        format!(
            "{},{},{:?},{},{},{:?},{:.3}",
            self.method,
            self.budget,
            self.lambda,
            self.seed,
            subset.join(";"),
            self.objective,
            self.wall_ms
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |what: &str| Error::Parse { line: 0, message: format!("bad {what} in selection row `{line}`") };
        if f.len() != 7 {
            return Err(bad("field count"));
        }
        let subset = if f[4].is_empty() {
            Vec::new()
        } else {
            f[4].split(';').map(|s| s.parse().map_err(|_| bad("subset"))).collect::<Result<Vec<usize>>>()?
        };
        Ok(SelectionResult {
            method: f[0].parse()?,
            budget: f[1].parse().map_err(|_| bad("K"))?,
            lambda: f[2].parse().map_err(|_| bad("lambda"))?,
            seed: f[3].parse().map_err(|_| bad("seed"))?,
            subset,
            trace: Vec::new(),
            step_ms: Vec::new(),
            objective: f[5].parse().map_err(|_| bad("J"))?,
            wall_ms: f[6].parse().map_err(|_| bad("wall_ms"))?,
        })
    }

    /// The result the same greedy run would have returned with budget `k`.
    /// Only meaningful for the prefix-consistent greedy methods.
    pub fn truncated(&self, k: usize) -> SelectionResult {
        assert!(k <= self.budget && self.trace.len() == self.subset.len() + 1, "greedy result needed");
        let steps = k.min(self.subset.len());
        SelectionResult {
            budget: k,
            subset: self.subset[..steps].to_vec(),
            trace: self.trace[..=steps].to_vec(),
            step_ms: self.step_ms[..=steps].to_vec(),
            objective: self.trace[steps],
            wall_ms: self.step_ms[steps],
            ..self.clone()
        }
    }

    /// Checks size, range and uniqueness against a source group of `n_a`.
    pub fn validate(&self, n_a: usize) -> Result<()> {
        if self.subset.len() > self.budget {
            return Err(Error::Index(format!("{} ids exceed budget {}", self.subset.len(), self.budget)));
        }
        let mut seen = vec![false; n_a];
        for &i in &self.subset {
            if i >= n_a || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Index(format!("subset id {i} out of range or repeated")));
            }
        }
        Ok(())
    }
}

fn check_budget(k: usize, n_a: usize) -> Result<()> {
    if k > n_a {
        return Err(Error::Parameter(format!("budget {k} exceeds the {n_a} source nodes")));
    }
    Ok(())
}

/// Indices of the `k` largest values, ties by smallest index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// First index holding the strict maximum, scanning in id order.
fn argmax_first(gains: &[(usize, f64)]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &(v, g) in gains {
        if best.map_or(true, |(_, bg)| g > bg) {
            best = Some((v, g));
        }
    }
    best
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Uncertainty-aware greedy search on J = μ̂ − λσ̂. Every evaluation uses
/// the same `passes` dropout masks drawn from `seed`. Stops early when no
/// candidate improves J.
pub fn caumax_g(model: &dyn Co2gModel, k: usize, lambda: f64, passes: usize, seed: u64) -> Result<SelectionResult> {
    let start = Instant::now();
    let n_a = model.source_count();
    check_budget(k, n_a)?;
    let score = |subset: &[usize]| -> Result<f64> {
        let mask = make_treatment_vector(subset, 1.0, n_a)?;
        Ok(lcb_objective(&model.co2g_stats(&mask, passes, seed)?, lambda))
    };
    let mut subset: Vec<usize> = Vec::with_capacity(k);
    let mut in_set = vec![false; n_a];
    let mut current = score(&subset)?;
    let mut trace = vec![current];
    let mut step_ms = vec![elapsed_ms(start)];
    for _ in 0..k {
        let gains: Vec<(usize, f64)> = (0..n_a)
            .into_par_iter()
            .filter(|&v| !in_set[v])
            .map(|v| {
                let mut s = subset.clone();
                s.push(v);
                Ok((v, score(&s)? - current))
            })
            .collect::<Result<_>>()?;
        match argmax_first(&gains) {
            Some((v, gain)) if gain > 0.0 => {
                subset.push(v);
                in_set[v] = true;
                current += gain;
                trace.push(current);
                step_ms.push(elapsed_ms(start));
            }
            _ => break,
        }
    }
    Ok(SelectionResult {
        method: Method::CaumaxG,
        budget: k,
        lambda,
        seed,
        subset,
        trace,
        step_ms,
        objective: current,
        wall_ms: elapsed_ms(start),
    })
}

/// Update rule for the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitOptimizer {
    /// ψ ← ψ − η∇L
    Sgd,
    /// Adam with step size η and default moments.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GumbelConfig {
    pub tau: f64,
    /// Standard deviation of the initial logits; 0.1 is covariance 0.01·I.
    pub init_std: f64,
    pub optimizer: LogitOptimizer,
    /// Geometric annealing from `tau` to this value over the run.
    pub tau_final: Option<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub iterations: usize,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau: 0.5,
            init_std: 0.1,
            optimizer: LogitOptimizer::Sgd,
            tau_final: None,
            gamma: 10.0,
            eta: 0.01,
            iterations: 500,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.tau_final.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Parameter("temperature must be positive".into()));
        }
        if !(self.gamma >= 0.0) || !(self.eta > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Parameter("gamma must be non-negative and eta positive".into()));
        }
        Ok(())
    }

    /// Temperature at iteration `m` (0-based).
    pub fn tau_at(&self, m: usize) -> f64 {
        match self.tau_final {
            Some(end) if self.iterations > 1 => {
                self.tau * (end / self.tau).powf(m as f64 / (self.iterations - 1) as f64)
            }
            _ => self.tau,
        }
    }
}

/// g = −ln(−ln u).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Budget penalty γ(‖T̃‖₁ − K)².
pub fn budget_penalty(mask: &[f64], k: usize, gamma: f64) -> f64 {
    gamma * (mask.iter().sum::<f64>() - k as f64).powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelState {
    pub psi: Vec<f64>,
    pub config: GumbelConfig,
    adam: Option<AdamState>,
}

impl GumbelState {
    /// ψ ~ N(0, init_std²·I).
    pub fn init(n_a: usize, config: GumbelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std).expect("validated");
        let mut rng = rng::stream(seed, "psi-init", &[]);
        let adam = (config.optimizer == LogitOptimizer::Adam)
            .then(|| AdamState::new(AdamConfig { lr: config.eta, ..AdamConfig::default() }, &[(1, n_a)]));
        Ok(GumbelState { psi: (0..n_a).map(|_| normal.sample(&mut rng)).collect(), config, adam })
    }

    /// T̃ = σ((ψ + g)/τ).
    pub fn relaxed(&self, noise: &[f64], tau: f64) -> Vec<f64> {
        self.psi.iter().zip(noise).map(|(p, g)| sigmoid((p + g) / tau)).collect()
    }

    /// One descent step on L = −J + γ(‖T̃‖₁ − K)² given ∂J/∂T̃.
    /// Returns the soft mask the step was taken at.
    pub fn step(&mut self, noise: &[f64], tau: f64, k: usize, grad_j: &[f64]) -> Vec<f64> {
        let mask = self.relaxed(noise, tau);
        let excess = mask.iter().sum::<f64>() - k as f64;
        let gamma = self.config.gamma;
        let grad: Vec<f64> = mask
            .iter()
            .zip(grad_j)
            .map(|(&t, &gj)| (-gj + 2.0 * gamma * excess) * t * (1.0 - t) / tau)
            .collect();
        match &mut self.adam {
            None => {
                for (p, g) in self.psi.iter_mut().zip(&grad) {
                    *p -= self.config.eta * g;
                }
            }
            Some(adam) => {
                let n = self.psi.len();
                let mut psi = Matrix::from_shape_vec((1, n), std::mem::take(&mut self.psi)).expect("row");
                let g = Matrix::from_shape_vec((1, n), grad).expect("row");
                adam.step(&mut [&mut psi], &[&g]).expect("shapes fixed at init");
                self.psi = psi.into_raw_vec_and_offset().0;
            }
        }
        mask
    }

    pub fn project(&self, k: usize) -> Vec<usize> {
        top_k(&self.psi, k)
    }
}

/// Differentiable search over Gumbel-sigmoid soft masks, then top-K of ψ.
/// The dropout masks of the M passes are drawn once from `seed` and reused
/// at every iteration.
pub fn caumax_d(
    model: &dyn Co2gModel,
    k: usize,
    config: &GumbelConfig,
    lambda: f64,
    passes: usize,
    seed: u64,
) -> Result<SelectionResult> {
    let start = Instant::now();
    let n_a = model.source_count();
    check_budget(k, n_a)?;
    let mut state = GumbelState::init(n_a, config.clone(), seed)?;
    let mut trace = Vec::with_capacity(config.iterations);
    let mc_seed = rng::derive_seed(seed, "caumax-d-mc", &[]);
    for m in 0..config.iterations {
        let mut rng = rng::stream(seed, "gumbel", &[m as u64]);
        let noise: Vec<f64> = (0..n_a).map(|_| gumbel_from_uniform(rng.sample(Open01))).collect();
        let tau = config.tau_at(m);
        let mask = TreatmentVector::new(state.relaxed(&noise, tau))?;
        let (j, grad) = model.lcb_with_gradient(&mask, lambda, passes, mc_seed)?;
        state.step(&noise, tau, k, &grad);
        trace.push(j);
    }
    let subset = state.project(k);
    let stats = model.co2g_stats(&make_treatment_vector(&subset, 1.0, n_a)?, passes, mc_seed)?;
    Ok(SelectionResult {
        method: Method::CaumaxD,
        budget: k,
        lambda,
        seed,
        subset,
        trace,
        step_ms: Vec::new(),
        objective: lcb_objective(&stats, lambda),
        wall_ms: elapsed_ms(start),
    })
}

pub fn select_random(n_a: usize, k: usize, seed: u64) -> Result<SelectionResult> {
    let start = Instant::now();
    check_budget(k, n_a)?;
    let subset = rand::seq::index::sample(&mut rng::stream(seed, "random", &[]), n_a, k).into_vec();
    Ok(SelectionResult {
        method: Method::Random,
        budget: k,
        lambda: 0.0,
        seed,
        subset,
        trace: Vec::new(),
        step_ms: Vec::new(),
        objective: f64::NAN,
        wall_ms: elapsed_ms(start),
    })
}

/// Top-K source nodes by within-source plus cross-group degree.
pub fn select_degree(net: &TwoGroupNetwork, k: usize) -> Result<SelectionResult> {
    let start = Instant::now();
    check_budget(k, net.source_count())?;
    let deg: Vec<f64> = net.source_degrees().into_iter().map(|d| d as f64).collect();
    let subset = top_k(&deg, k);
    let objective = subset.iter().map(|&i| deg[i]).sum();
    Ok(SelectionResult {
        method: Method::Degree,
        budget: k,
        lambda: 0.0,
        seed: 0,
        subset,
        trace: Vec::new(),
        step_ms: Vec::new(),
        objective,
        wall_ms: elapsed_ms(start),
    })
}

/// Live-edge samples of the independent-cascade model on the whole
/// two-group graph. Node `i < n_A` is source `i`; node `n_A + j` is target `j`.
#[derive(Debug, Clone)]
pub struct CascadeWorlds {
    nodes: usize,
    /// Per world, CSR adjacency of live arcs.
    worlds: Vec<(Vec<usize>, Vec<usize>)>,
}

impl CascadeWorlds {
    pub fn sample(net: &TwoGroupNetwork, p_ic: f64, simulations: usize, seed: u64) -> Result<Self> {
        if !(p_ic > 0.0 && p_ic <= 1.0) {
            return Err(Error::Parameter(format!("propagation probability {p_ic} outside (0, 1]")));
        }
        if simulations == 0 {
            return Err(Error::Parameter("need at least one cascade simulation".into()));
        }
        let n_a = net.source_count();
        let nodes = n_a + net.target_count();
        let mut arcs: Vec<(usize, usize)> = Vec::new();
        let mut push = |u: usize, v: usize| {
            arcs.push((u, v));
            arcs.push((v, u));
        };
        net.edges_a().iter().for_each(|&(u, v)| push(u, v));
        net.edges_b().iter().for_each(|&(u, v)| push(n_a + u, n_a + v));
        net.edges_ab().iter().for_each(|e| push(e.source, n_a + e.target));
        arcs.sort_unstable();
        let worlds = (0..simulations)
            .map(|w| {
                let mut rng = rng::stream(seed, "cascade", &[w as u64]);
                let mut indptr = vec![0usize; nodes + 1];
                let mut heads = Vec::new();
                for &(u, v) in &arcs {
                    if rng.gen::<f64>() < p_ic {
                        heads.push(v);
                        indptr[u + 1] += 1;
                    }
                }
                for i in 0..nodes {
                    indptr[i + 1] += indptr[i];
                }
                (indptr, heads)
            })
            .collect();
        Ok(CascadeWorlds { nodes, worlds })
    }

    /// Marks everything reachable from `seed_node` that is not yet active;
    /// returns how many nodes were newly activated.
    fn spread_into(&self, world: usize, seed_node: usize, active: &mut [bool], scratch: &mut Vec<usize>) -> usize {
        if active[seed_node] {
            return 0;
        }
        let (indptr, heads) = &self.worlds[world];
        scratch.clear();
        scratch.push(seed_node);
        active[seed_node] = true;
        let mut count = 1;
        while let Some(u) = scratch.pop() {
            for &v in &heads[indptr[u]..indptr[u + 1]] {
                if !active[v] {
                    active[v] = true;
                    count += 1;
                    scratch.push(v);
                }
            }
        }
        count
    }

    /// Mean number of activated nodes when `seeds` start active.
    pub fn spread(&self, seeds: &[usize]) -> f64 {
        let mut scratch = Vec::new();
        let total: usize = (0..self.worlds.len())
            .map(|w| {
                let mut active = vec![false; self.nodes];
                seeds.iter().map(|&s| self.spread_into(w, s, &mut active, &mut scratch)).sum::<usize>()
            })
            .sum();
        total as f64 / self.worlds.len() as f64
    }
}

/// Greedy influence maximisation under independent cascade, with the same
/// `simulations` live-edge worlds used for every candidate.
pub fn select_im(net: &TwoGroupNetwork, k: usize, simulations: usize, p_ic: f64, seed: u64) -> Result<SelectionResult> {
    let start = Instant::now();
    let n_a = net.source_count();
    check_budget(k, n_a)?;
    let worlds = CascadeWorlds::sample(net, p_ic, simulations, seed)?;
    let r = worlds.worlds.len();
    let mut active: Vec<Vec<bool>> = vec![vec![false; worlds.nodes]; r];
    let mut subset = Vec::with_capacity(k);
    let mut spread = 0.0;
    let mut trace = vec![0.0];
    let mut step_ms = vec![elapsed_ms(start)];
    for _ in 0..k {
        let gains: Vec<(usize, f64)> = (0..n_a)
            .into_par_iter()
            .filter(|v| !subset.contains(v))
            .map(|v| {
                let mut scratch = Vec::new();
                let mut total = 0usize;
                for (w, act) in active.iter().enumerate() {
                    let mut act = act.clone();
                    total += worlds.spread_into(w, v, &mut act, &mut scratch);
                }
                (v, total as f64 / r as f64)
            })
            .collect();
        let Some((v, gain)) = argmax_first(&gains) else { break };
        let mut scratch = Vec::new();
        for (w, act) in active.iter_mut().enumerate() {
            worlds.spread_into(w, v, act, &mut scratch);
        }
        subset.push(v);
        spread += gain;
        trace.push(spread);
        step_ms.push(elapsed_ms(start));
    }
    Ok(SelectionResult {
        method: Method::Im,
        budget: k,
        lambda: 0.0,
        seed,
        subset,
        trace,
        step_ms,
        objective: spread,
        wall_ms: elapsed_ms(start),
    })
}

/// Greedy on the true Co2G; always fills the budget.
pub fn oracle_greedy(net: &TwoGroupNetwork, params: &ScmParams, k: usize) -> Result<SelectionResult> {
    let start = Instant::now();
    let n_a = net.source_count();
    check_budget(k, n_a)?;
    let eval = ScmEvaluator::new(net, params)?;
    let mut subset: Vec<usize> = Vec::with_capacity(k);
    let mut current = 0.0;
    let mut trace = vec![0.0];
    let mut step_ms = vec![elapsed_ms(start)];
    for _ in 0..k {
        let gains: Vec<(usize, f64)> = (0..n_a)
            .into_par_iter()
            .filter(|v| !subset.contains(v))
            .map(|v| {
                let mut s = subset.clone();
                s.push(v);
                Ok((v, eval.co2g(&s)? - current))
            })
            .collect::<Result<_>>()?;
        let Some((v, gain)) = argmax_first(&gains) else { break };
        subset.push(v);
        current += gain;
        trace.push(current);
        step_ms.push(elapsed_ms(start));
    }
    let objective = eval.co2g(&subset)?;
    Ok(SelectionResult {
        method: Method::OracleGreedy,
        budget: k,
        lambda: 0.0,
        seed: 0,
        subset,
        trace,
        step_ms,
        objective,
        wall_ms: elapsed_ms(start),
    })
}

/// A deterministic model whose Co2G is `Σ_i gain_i·T_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableModel {
    pub gains: Vec<f64>,
}

impl Co2gModel for SeparableModel {
    fn source_count(&self) -> usize {
        self.gains.len()
    }

    fn co2g_stats(&self, mask: &TreatmentVector, passes: usize, _seed: u64) -> Result<Co2gStats> {
        let value = self.gains.iter().zip(mask.as_slice()).map(|(g, t)| g * t).sum();
        Ok(Co2gStats::from_samples(vec![value; passes.max(1)]))
    }

    fn co2g_point(&self, mask: &TreatmentVector) -> Result<f64> {
        Ok(self.gains.iter().zip(mask.as_slice()).map(|(g, t)| g * t).sum())
    }

    fn lcb_with_gradient(&self, mask: &TreatmentVector, _lambda: f64, _passes: usize, _seed: u64) -> Result<(f64, Vec<f64>)> {
        Ok((self.co2g_point(mask)?, self.gains.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CrossEdge;
    use crate::scm::tests::{tiny_net, tiny_params};
    use ndarray::Array2;

    fn stub(n: usize, pairs: &[(usize, f64)]) -> SeparableModel {
        let mut gains = vec![0.0; n];
        for &(i, g) in pairs {
            gains[i] = g;
        }
        SeparableModel { gains }
    }

    #[test]
    fn greedy_on_separable_stub() {
        let m = stub(6, &[(3, 0.5), (1, 0.2)]);
        assert_eq!(caumax_g(&m, 2, 0.0, 1, 0).unwrap().subset, vec![3, 1]);
        assert!(caumax_g(&m, 0, 0.0, 1, 0).unwrap().subset.is_empty());
        // only two positive gains: the third round breaks
        let long = caumax_g(&m, 4, 0.0, 1, 0).unwrap();
        assert_eq!(long.subset, vec![3, 1]);
        let short = long.truncated(1);
        assert_eq!((short.subset.clone(), short.objective), (vec![3], 0.5));
        let direct = caumax_g(&m, 1, 0.0, 1, 0).unwrap();
        assert_eq!((direct.subset, direct.trace), (short.subset, short.trace));
        let neg = SeparableModel { gains: vec![-0.1, -0.3, 0.0] };
        assert!(caumax_g(&neg, 2, 0.0, 1, 0).unwrap().subset.is_empty());
    }

    #[test]
    fn top_k_projection_and_ties() {
        assert_eq!(top_k(&[0.3, -1.0, 2.0, 0.5], 2), vec![2, 3]);
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 1.0], 3), vec![1, 2, 0]);
    }

    #[test]
    fn gumbel_fixed_point_and_penalty() {
        assert_eq!(gumbel_from_uniform((-1.0f64).exp()), 0.0);
        assert_eq!(budget_penalty(&[0.5, 0.25, 0.25, 1.0], 2, 10.0), 0.0);
        assert_eq!(budget_penalty(&[1.0, 1.0, 1.0], 2, 10.0), 10.0);
    }

    #[test]
    fn penalty_drives_mass_to_budget_without_noise() {
        let cfg = GumbelConfig { eta: 0.002, ..GumbelConfig::default() };
        let mut st = GumbelState::init(30, cfg, 3).unwrap();
        let zero = vec![0.0; 30];
        let mut gap = f64::INFINITY;
        for _ in 0..300 {
            let mask = st.step(&zero, 0.5, 4, &zero);
            let now = (mask.iter().sum::<f64>() - 4.0).abs();
            assert!(now <= gap + 1e-12);
            gap = now;
        }
        assert!(gap < 0.05, "gap {gap}");
    }

    #[test]
    fn relaxation_finds_separable_optimum() {
        let m = stub(12, &[(7, 1.0), (2, 0.8), (9, 0.6)]);
        let cfg = GumbelConfig { eta: 0.05, gamma: 0.0, ..GumbelConfig::default() };
        let mut got = caumax_d(&m, 3, &cfg, 0.0, 1, 4).unwrap().subset;
        got.sort();
        assert_eq!(got, vec![2, 7, 9]);
        assert!(matches!(caumax_d(&m, 13, &cfg, 0.0, 1, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn random_contracts() {
        let a = select_random(20, 5, 9).unwrap();
        assert_eq!(a.subset, select_random(20, 5, 9).unwrap().subset);
        a.validate(20).unwrap();
        let mut all = select_random(7, 7, 1).unwrap().subset;
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(select_random(7, 0, 1).unwrap().subset.is_empty());
        assert!(select_random(7, 8, 1).is_err());
    }

    fn net_from(n_a: usize, n_b: usize, edges_a: Vec<(usize, usize)>, edges_b: Vec<(usize, usize)>, ab: &[(usize, usize)]) -> TwoGroupNetwork {
        TwoGroupNetwork::new(
            (0..n_a).collect(),
            (n_a..n_a + n_b).collect(),
            edges_a,
            edges_b,
            ab.iter().map(|&(s, t)| CrossEdge { source: s, target: t, weight: 1.0 }).collect(),
            Array2::zeros((n_a, 0)),
            Array2::zeros((n_b, 0)),
        )
        .unwrap()
    }

    #[test]
    fn degree_ranking() {
        // total degrees [5, 2, 9, 9]
        let ab: Vec<(usize, usize)> = [(0, 5), (1, 2), (2, 9), (3, 9)]
            .iter()
            .flat_map(|&(s, d)| (0..d).map(move |t| (s, t)))
            .collect();
        let net = net_from(4, 9, vec![], vec![], &ab);
        assert_eq!(net.source_degrees(), vec![5, 2, 9, 9]);
        assert_eq!(select_degree(&net, 2).unwrap().subset, vec![2, 3]);
        assert_eq!(select_degree(&net, 1).unwrap().subset, vec![2]);
        // star: source 0 is the centre
        let star = net_from(4, 1, vec![(0, 1), (0, 2), (0, 3)], vec![], &[(0, 0)]);
        assert_eq!(select_degree(&star, 1).unwrap().subset, vec![0]);
    }

    #[test]
    fn im_examples() {
        let net = net_from(3, 2, vec![(0, 1), (1, 2)], vec![(0, 1)], &[(2, 0), (0, 1)]);
        let r = select_im(&net, 1, 5, 1.0, 0).unwrap();
        assert_eq!(r.subset, vec![0]);
        assert_eq!(r.objective, 5.0);
        let tiny = select_im(&net, 2, 50, 1e-12, 0).unwrap();
        assert_eq!(tiny.objective, 2.0);
        // two components: {0,1,t0} and {2,3,t1}
        let split = net_from(4, 2, vec![(0, 1), (2, 3)], vec![], &[(0, 0), (1, 0), (3, 1)]);
        let mut got = select_im(&split, 2, 3, 1.0, 0).unwrap().subset;
        got.sort();
        assert_eq!(got, vec![0, 2]);
        assert!(select_im(&split, 1, 0, 0.5, 0).is_err());
        assert!(select_im(&split, 1, 3, 0.0, 0).is_err());
    }

    #[test]
    fn spread_is_monotone_under_common_worlds() {
        let g = crate::graph::synthesize_graph(60, 2, 5).unwrap();
        let net = crate::graph::core_periphery_split(&g, 20.0).unwrap();
        let worlds = CascadeWorlds::sample(&net, 0.3, 20, 1).unwrap();
        let mut s = Vec::new();
        let mut last = 0.0;
        for v in [3, 0, 7, 5] {
            s.push(v);
            let now = worlds.spread(&s);
            assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn oracle_greedy_examples() {
        let net = tiny_net();
        let params = tiny_params(0.0, 0.0, 0.0);
        let eval = ScmEvaluator::new(&net, &params).unwrap();
        let best = if eval.co2g(&[0]).unwrap() >= eval.co2g(&[1]).unwrap() { 0 } else { 1 };
        assert_eq!(oracle_greedy(&net, &params, 1).unwrap().subset, vec![best]);
        let full = oracle_greedy(&net, &params, 2).unwrap();
        assert_eq!(full.subset.len(), 2);
        assert!((full.objective - eval.co2g(&[0, 1]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let r = SelectionResult {
            method: Method::CaumaxD,
            budget: 3,
            lambda: 0.5,
            seed: 7,
            subset: vec![4, 0, 2],
            trace: vec![],
            step_ms: vec![],
            objective: 0.125,
            wall_ms: 12.5,
        };
        let row = r.to_csv_row();
        assert_eq!(row, "caumax-d,3,0.5,7,4;0;2,0.125,12.500");
        assert_eq!(SelectionResult::from_csv_row(&row).unwrap(), r);
        assert!("nope".parse::<Method>().is_err());
    }
}
