//! Invariant checks shared by `caumax selftest` and the acceptance suite.

use ndarray::Array2;
use rand::Rng;

use caumax_core::estimator::{
    gradient_check, lcb_objective, Co2gModel, Co2gStats, DropoutPlan, EffectModel, Estimator, EstimatorConfig,
    PreparedNetwork,
};
use caumax_core::eval::{exhaustive_optimum, identification_check};
use caumax_core::graph::{core_periphery_split, synthesize_graph, CrossEdge, TwoGroupNetwork};
use caumax_core::rng::stream;
use caumax_core::scm::{make_treatment_vector, softplus, synthesize_features, true_co2g, ScmEvaluator, ScmParams, ScmSettings, TreatmentVector};
use caumax_core::selectors::{budget_penalty, caumax_g, gumbel_from_uniform, oracle_greedy, top_k, SeparableModel};
use caumax_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Reverse-mode gradients of μ̂_B against central differences with step
/// `h` on `instances` random small estimators with every parameter drawn
/// uniformly. Half the instances run with a fixed dropout mask.
pub fn gradient_fidelity(instances: u64, h: f64, tol: f64) -> Result<CheckOutcome> {
    let (mut worst, mut entries, mut kinked, mut kinked_fine, mut one_sided, mut unresolved) = (0.0f64, 0, 0, 0.0f64, 0, 0);
    for i in 0..instances {
        let mut rng = stream(i, "gradient-check", &[]);
        let nodes = rng.gen_range(30..60);
        let d = rng.gen_range(1..5);
        let g = synthesize_graph(nodes, 2, i)?;
        let net = synthesize_features(core_periphery_split(&g, 20.0)?, d, i)?;
        let prepared = PreparedNetwork::new(&net);
        let cfg = EstimatorConfig {
            gcn_hidden: rng.gen_range(2..9),
            gcn_layers: rng.gen_range(1..3),
            mlp_hidden: vec![rng.gen_range(2..9); rng.gen_range(0..3)],
            ..EstimatorConfig::default()
        };
        let mut model = EffectModel::new(cfg, d, i)?;
        for p in model.params_mut() {
            p.mapv_inplace(|_| rng.gen_range(-0.8..0.8));
        }
        // interior levels so t ± h stays inside [0, 1]
        let t = TreatmentVector::new((0..net.source_count()).map(|_| rng.gen_range(0.1..0.9)).collect())?;
        let plan = (i % 2 == 0).then_some(DropoutPlan { seed: i, first_pass: 0 });
        let c = gradient_check(&model, &prepared, &t, plan, h, 1e-8)?;
        worst = worst.max(c.worst());
        entries += c.entries;
        kinked += c.kinked;
        kinked_fine = kinked_fine.max(c.kinked_fine);
        one_sided += c.one_sided;
        unresolved += c.unresolved;
    }
    Ok(CheckOutcome {
        name: "gradient fidelity",
        passed: worst < tol && kinked_fine < tol && unresolved == 0,
        detail: format!(
            "{instances} instances, {entries} entries; max rel err {worst:.2e} at h={h:e}; \
             {kinked} entries straddle a ReLU kink at h and were checked at h/100 (max rel err {kinked_fine:.2e}, {one_sided} one-sided, {unresolved} unresolved)"
        ),
    })
}

/// Two sources, one target, both cross edges with unit weight.
pub fn two_source_instance() -> Result<(TwoGroupNetwork, ScmParams)> {
    let net = TwoGroupNetwork::new(
        vec![0, 1],
        vec![2],
        vec![],
        vec![],
        vec![CrossEdge { source: 0, target: 0, weight: 1.0 }, CrossEdge { source: 1, target: 0, weight: 1.0 }],
        Array2::from_shape_vec((2, 1), vec![0.3, -0.7]).expect("2×1"),
        Array2::from_shape_vec((1, 1), vec![1.2]).expect("1×1"),
    )?;
    let params = ScmParams {
        w: ndarray::arr1(&[0.5]),
        b_scale: 0.1,
        w_y: ndarray::arr1(&[0.4]),
        w_x: ndarray::arr1(&[0.8]),
        beta: 1.0,
        alpha: 0.5,
        noise_sigma: 0.1,
        seed: 0,
    };
    Ok((net, params))
}

/// Closed-form Co2G on the two-source instance and exhaustive monotonicity
/// on `instances` random small networks.
pub fn oracle_correctness(instances: u64) -> Result<CheckOutcome> {
    let (net, params) = two_source_instance()?;
    let single = true_co2g(&net, &params, &[0])?;
    let full = true_co2g(&net, &params, &[0, 1])?;
    let empty = true_co2g(&net, &params, &[])?;
    let ln2 = std::f64::consts::LN_2;
    let single_ok = (single - (softplus(1.0 / 2f64.sqrt()) - ln2)).abs() < 1e-9 && (single - 0.4148).abs() < 5e-5;
    let full_ok = (full - (softplus(2f64.sqrt()) - ln2)).abs() < 1e-9;
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut sizes = Vec::new();
    for i in 0..instances {
        let mut rng = stream(i, "monotonicity", &[]);
        let nodes = rng.gen_range(12..=24);
        let g = synthesize_graph(nodes, 2, i)?;
        let want = rng.gen_range(2..=6);
        // ⌈p·n/100⌉ = want
        let p = (want as f64 - 0.5) * 100.0 / nodes as f64;
        let net = synthesize_features(core_periphery_split(&g, p)?, 3, i)?;
        let n_a = net.source_count();
        if n_a > 6 {
            return Err(Error::Parameter(format!("instance {i} has {n_a} sources")));
        }
        sizes.push(n_a);
        let settings = ScmSettings { beta: rng.gen_range(0.2..2.0), alpha: rng.gen_range(0.0..1.0), ..ScmSettings::default() };
        let params = ScmParams::draw(3, settings, i)?;
        let eval = ScmEvaluator::new(&net, &params)?;
        for bits in 0u32..(1 << n_a) {
            let s: Vec<usize> = (0..n_a).filter(|b| bits >> b & 1 == 1).collect();
            let base = eval.co2g(&s)?;
            for v in (0..n_a).filter(|b| bits >> b & 1 == 0) {
                let mut sv = s.clone();
                sv.push(v);
                checked += 1;
                if eval.co2g(&sv)? < base {
                    violations += 1;
                }
            }
        }
    }
    Ok(CheckOutcome {
        name: "ground-truth oracle",
        passed: single_ok && full_ok && empty == 0.0 && violations == 0 && checked > 0,
        detail: format!(
            "co2g({{a1}}) = {single:.10}, co2g(V_A) = {full:.10}, co2g(∅) = {empty}; \
             {checked} (S, v) pairs on {instances} instances with |V_A| in {:?}..={:?}, {violations} monotonicity violations",
            sizes.iter().min().unwrap_or(&0),
            sizes.iter().max().unwrap_or(&0)
        ),
    })
}

/// Exact-match adjustment estimate against the closed-form interventional
/// mean on the two-source instance, over `reps` observational datasets.
pub fn identification(reps: u64, n_obs: usize, need: u64) -> Result<CheckOutcome> {
    let (net, params) = two_source_instance()?;
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    let mut min_matches = usize::MAX;
    for rep in 0..reps {
        let r = identification_check(&net, &params, &[0], 1.0, n_obs, rep)?;
        if r.z_score.abs() < 3.0 {
            ok += 1;
        }
        worst = worst.max(r.z_score.abs());
        min_matches = min_matches.min(r.matches);
    }
    Ok(CheckOutcome {
        name: "identification",
        passed: ok >= need,
        detail: format!(
            "|z| < 3 in {ok}/{reps} repetitions of n_obs = {n_obs} (need {need}); max |z| {worst:.2}, fewest matches {min_matches}"
        ),
    })
}

/// Each source owns a private star of targets, so the true Co2G is additive
/// over sources and greedy is exact.
fn separable_instance(n_a: usize, seed: u64) -> Result<(TwoGroupNetwork, ScmParams)> {
    let mut rng = stream(seed, "separable", &[]);
    let mut edges = Vec::new();
    let mut n_b = 0;
    for i in 0..n_a {
        for _ in 0..rng.gen_range(1..=3) {
            edges.push(CrossEdge { source: i, target: n_b, weight: rng.gen_range(0.2..2.0) });
            n_b += 1;
        }
    }
    let mut draw = |rows: usize| Array2::from_shape_fn((rows, 2), |_| rng.gen_range(-1.0..1.0));
    let (fa, fb) = (draw(n_a), draw(n_b));
    let net = TwoGroupNetwork::new((0..n_a).collect(), (n_a..n_a + n_b).collect(), vec![], vec![], edges, fa, fb)?;
    Ok((net, ScmParams::draw(2, ScmSettings::default(), seed)?))
}

pub fn algorithmic_contracts() -> Result<CheckOutcome> {
    let mut failures = Vec::new();
    let negative = SeparableModel { gains: vec![-0.3, -0.1, -0.5, -0.2] };
    let g = caumax_g(&negative, 3, 0.5, 1, 0)?;
    if !g.subset.is_empty() {
        failures.push(format!("early break returned {:?}", g.subset));
    }
    if top_k(&[0.3, -1.0, 2.0, 0.5], 2) != vec![2, 3] {
        failures.push("top-K projection".to_string());
    }
    if gumbel_from_uniform((-1f64).exp()).abs() > 1e-15 {
        failures.push("Gumbel fixed point".to_string());
    }
    if budget_penalty(&[0.5, 0.25, 0.25, 1.0], 2, 10.0) != 0.0 {
        failures.push("budget penalty at ‖T̃‖₁ = K".to_string());
    }
    let mut cases = 0;
    for seed in 0..30u64 {
        let n_a = 2 + (seed as usize % 9);
        let (net, params) = separable_instance(n_a, seed)?;
        let eval = ScmEvaluator::new(&net, &params)?;
        for k in 1..=3.min(n_a) {
            cases += 1;
            let og = oracle_greedy(&net, &params, k)?;
            let (best, value) = exhaustive_optimum(&net, &params, k)?;
            let got = eval.co2g(&og.subset)?;
            if (got - value).abs() > 1e-12 {
                failures.push(format!("oracle greedy {:?} = {got} vs optimum {best:?} = {value} (n_a {n_a}, K {k})", og.subset));
            }
        }
        // the same greedy driven by the separable stub
        let mut rng = stream(seed, "stub-gains", &[]);
        let stub = SeparableModel { gains: (0..n_a).map(|_| rng.gen_range(0.0..1.0)).collect() };
        for k in 1..=3.min(n_a) {
            cases += 1;
            let greedy = caumax_g(&stub, k, 0.0, 1, 0)?;
            let mut by_gain: Vec<f64> = stub.gains.clone();
            by_gain.sort_by(|a, b| b.total_cmp(a));
            let optimum: f64 = by_gain[..k].iter().sum();
            let got = stub.co2g_point(&make_treatment_vector(&greedy.subset, 1.0, n_a)?)?;
            if (got - optimum).abs() > 1e-12 {
                failures.push(format!("stub greedy {got} vs optimum {optimum}"));
            }
        }
    }
    Ok(CheckOutcome {
        name: "algorithmic contracts",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("early break, top-K, Gumbel fixed point, zero penalty, greedy = exhaustive on {cases} separable cases")
        } else {
            failures.join("; ")
        },
    })
}

pub fn mc_dropout_contracts() -> Result<CheckOutcome> {
    let g = synthesize_graph(60, 2, 4)?;
    let net = synthesize_features(core_periphery_split(&g, 20.0)?, 3, 4)?;
    let prepared = PreparedNetwork::new(&net);
    let n_a = net.source_count();
    let mut failures = Vec::new();

    let no_drop = EffectModel::new(EstimatorConfig { dropout_rate: 0.0, ..EstimatorConfig::default() }, 3, 1)?;
    let est = Estimator::new(&no_drop, &prepared)?;
    let mut rng = stream(4, "mc-subsets", &[]);
    for _ in 0..20 {
        let s: Vec<usize> = (0..n_a).filter(|_| rng.gen_bool(0.3)).collect();
        let stats = est.estimate_co2g(&s, 20, rng.gen())?;
        if stats.std != 0.0 {
            failures.push(format!("rate 0 gave σ̂ = {} for {s:?}", stats.std));
        }
    }

    let dropping = EffectModel::new(EstimatorConfig { dropout_rate: 0.3, share_masks: true, ..EstimatorConfig::default() }, 3, 1)?;
    let est = Estimator::new(&dropping, &prepared)?;
    for seed in 0..5 {
        let stats = est.estimate_co2g(&[], 20, seed)?;
        if stats.mean != 0.0 || stats.std != 0.0 {
            failures.push(format!("S = ∅ gave μ̂ = {}, σ̂ = {}", stats.mean, stats.std));
        }
    }
    let nonempty = est.estimate_co2g(&[0, 1], 20, 0)?;

    let pair = Co2gStats::from_samples(vec![0.1, 0.3]);
    if (pair.std - 0.1).abs() > 1e-15 || (pair.mean - 0.2).abs() > 1e-15 {
        failures.push(format!("{{0.1, 0.3}} gave μ̂ = {}, σ̂ = {}", pair.mean, pair.std));
    }
    if (lcb_objective(&Co2gStats { mean: 0.5, std: 0.2, samples: vec![] }, 0.5) - 0.4).abs() > 1e-15 {
        failures.push("LCB arithmetic".to_string());
    }
    Ok(CheckOutcome {
        name: "MC-dropout contracts",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "rate 0 ⇒ σ̂ = 0 on 20 subsets; S = ∅ ⇒ μ̂ = σ̂ = 0 under shared masks; {{0.1, 0.3}} ⇒ σ̂ = {}; \
                 active dropout spread on a non-empty subset σ̂ = {:.3e}",
                pair.std, nonempty.std
            )
        } else {
            failures.join("; ")
        },
    })
}

/// The fast invariant suite. Fails with an internal error if any check fails.
pub fn run_all() -> Result<Vec<String>> {
    let checks = vec![
        gradient_fidelity(10, 1e-4, 1e-4)?,
        oracle_correctness(20)?,
        identification(5, 20_000, 5)?,
        algorithmic_contracts()?,
        mc_dropout_contracts()?,
    ];
    let lines: Vec<String> = checks.iter().map(CheckOutcome::line).collect();
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Invariant(format!("{failed} self-test check(s) failed:\n{}", lines.join("\n"))));
    }
    Ok(lines)
}
