//! Graph neural estimator of the target-group mean outcome μ̂_B(T).
//!
//! Architecture, per treatment vector `T`:
//!
//! 1. Source encoder: GCN layers over the within-source graph with
//!    symmetric normalisation and self-loops. Node `i` enters as
//!    `[X_i ∥ T_i]`; each layer is `ReLU(Â·H·W + b)` followed by dropout.
//! 2. Cross-group aggregation: `m_j` is the mean of the encoder outputs
//!    of the source neighbours of target `j`.
//! 3. Target predictor: an MLP on `[X_j ∥ m_j]` with ReLU and dropout in
//!    the hidden layers and a scalar output `Ŷ_j`.
//!
//! The returned value is the mean of `Ŷ_j` over the target group. Several
//! treatment vectors are evaluated at once by stacking them as row blocks.
//!
//! Co2G estimates contrast `T(S,1)` against the all-zero vector under
//! Monte-Carlo dropout; pass `m` of both arms draws its masks from the same
//! stream, so the two arms of a pass see identical masks.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Csr, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::TwoGroupNetwork;
use crate::rng;
use crate::scm::{make_treatment_vector, ObservationalSample, TreatmentVector};
use crate::textfmt::Document;

pub const MODEL_MAGIC: &str = "CAUMAX-MODEL v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub gcn_hidden: usize,
    pub gcn_layers: usize,
    pub mlp_hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    /// Monte-Carlo dropout passes M.
    pub mc_passes: usize,
    /// Uncertainty penalty λ.
    pub lambda: f64,
    /// Reuse the treated arm's dropout masks for the control arm of a pass.
    pub share_masks: bool,
    /// Use the MC mean instead of the dropout-free forward for point estimates.
    pub mc_point_estimate: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            gcn_hidden: 16,
            gcn_layers: 2,
            mlp_hidden: vec![16, 8],
            dropout_rate: 0.3,
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 40,
            batch_size: 32,
            patience: 20,
            holdout_fraction: 0.1,
            mc_passes: 20,
            lambda: 0.5,
            share_masks: true,
            mc_point_estimate: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.mc_passes == 0 {
            return bad("mc_passes must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.gcn_layers == 0 || self.gcn_hidden == 0 || self.mlp_hidden.iter().any(|&h| h == 0) {
            return bad("layer sizes and counts must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug)]
struct BlockOps {
    a_hat: Arc<Csr>,
    pool: Arc<Csr>,
    mean: Arc<Csr>,
}

/// Precomputed sparse operators and covariates of one network.
#[derive(Debug)]
pub struct PreparedNetwork {
    n_a: usize,
    n_b: usize,
    /// D^{-1/2}(A + I)D^{-1/2} over the source group.
    a_hat: Csr,
    /// Row j averages the source neighbours of target j.
    pool: Csr,
    /// 1×n_B row of 1/n_B.
    target_mean: Csr,
    xa: Matrix,
    xb: Matrix,
    /// Block-diagonal operators by batch size.
    blocks: Mutex<HashMap<usize, Arc<BlockOps>>>,
}

impl PreparedNetwork {
    pub fn new(net: &TwoGroupNetwork) -> Self {
        let n_a = net.source_count();
        let n_b = net.target_count();
        let mut deg = vec![1.0f64; n_a];
        for &(u, v) in net.edges_a() {
            deg[u] += 1.0;
            deg[v] += 1.0;
        }
        let mut trip: Vec<(usize, usize, f64)> = (0..n_a).map(|i| (i, i, 1.0 / deg[i])).collect();
        for &(u, v) in net.edges_a() {
            let w = 1.0 / (deg[u] * deg[v]).sqrt();
            trip.push((u, v, w));
            trip.push((v, u, w));
        }
        let a_hat = Csr::from_triplets(n_a, n_a, trip);
        let mut pool_trip = Vec::new();
        for j in 0..n_b {
            let nbrs = net.source_neighbors(j);
            let w = 1.0 / nbrs.len() as f64;
            pool_trip.extend(nbrs.iter().map(|&(i, _)| (j, i, w)));
        }
        let pool = Csr::from_triplets(n_b, n_a, pool_trip);
        let target_mean = Csr::from_triplets(1, n_b, (0..n_b).map(|j| (0, j, 1.0 / n_b as f64)).collect());
        PreparedNetwork {
            n_a,
            n_b,
            a_hat,
            pool,
            target_mean,
            xa: net.features_a().clone(),
            xb: net.features_b().clone(),
            blocks: Mutex::new(HashMap::new()),
        }
    }

    fn block_ops(&self, blocks: usize) -> Arc<BlockOps> {
        let mut cache = self.blocks.lock().expect("cache lock");
        cache
            .entry(blocks)
            .or_insert_with(|| {
                Arc::new(BlockOps {
                    a_hat: Arc::new(self.a_hat.block_diag(blocks)),
                    pool: Arc::new(self.pool.block_diag(blocks)),
                    mean: Arc::new(self.target_mean.block_diag(blocks)),
                })
            })
            .clone()
    }

    pub fn source_count(&self) -> usize {
        self.n_a
    }

    pub fn target_count(&self) -> usize {
        self.n_b
    }

    pub fn covariate_dim(&self) -> usize {
        self.xa.ncols()
    }
}

/// Named parameter blocks, in a fixed order.
fn layout(cfg: &EstimatorConfig, d_in: usize) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut width = d_in + 1;
    for l in 0..cfg.gcn_layers {
        out.push((format!("gcn{l}.weight"), (width, cfg.gcn_hidden)));
        out.push((format!("gcn{l}.bias"), (1, cfg.gcn_hidden)));
        width = cfg.gcn_hidden;
    }
    let mut dims = cfg.mlp_hidden.clone();
    dims.push(1);
    // first predictor layer acts on [X_j ∥ m_j]; stored as its two row blocks
    out.push(("mlp0.weight_x".into(), (d_in, dims[0])));
    out.push(("mlp0.weight_m".into(), (cfg.gcn_hidden, dims[0])));
    out.push(("mlp0.bias".into(), (1, dims[0])));
    for k in 1..dims.len() {
        out.push((format!("mlp{k}.weight"), (dims[k - 1], dims[k])));
        out.push((format!("mlp{k}.bias"), (1, dims[k])));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectModel {
    config: EstimatorConfig,
    d_in: usize,
    names: Vec<String>,
    params: Vec<Matrix>,
    /// Outputs are `y_shift + y_scale·raw`; fitted to the training targets.
    y_shift: f64,
    y_scale: f64,
    frozen: bool,
}

/// Which dropout masks a forward pass uses: block `b` of the batch draws
/// from stream `(seed, "dropout", [first_pass + b, layer])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutPlan {
    pub seed: u64,
    pub first_pass: u64,
}

impl EffectModel {
    /// Glorot-uniform weights and zero biases.
    pub fn new(config: EstimatorConfig, d_in: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_in == 0 {
            return Err(Error::Parameter("covariate dimension must be at least 1".into()));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (k, (name, (r, c))) in layout(&config, d_in).into_iter().enumerate() {
            let m = if name.ends_with("bias") {
                Matrix::zeros((r, c))
            } else {
                let mut rng = rng::stream(seed, "init", &[k as u64]);
                let a = (6.0 / (r + c) as f64).sqrt();
                Matrix::from_shape_simple_fn((r, c), || rng.gen_range(-a..a))
            };
            names.push(name);
            params.push(m);
        }
        Ok(EffectModel { config, d_in, names, params, y_shift: 0.0, y_scale: 1.0, frozen: false })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn covariate_dim(&self) -> usize {
        self.d_in
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    fn param_index(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).expect("layout name")
    }

    /// Records the forward pass for `blocks` stacked treatment vectors and
    /// returns the `blocks×1` vector of predicted target-group means.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        net: &PreparedNetwork,
        treatments: Var,
        blocks: usize,
        dropout: Option<DropoutPlan>,
    ) -> Result<Var> {
        if net.covariate_dim() != self.d_in {
            return Err(Error::Dimension(format!(
                "model expects {} covariates, network has {}",
                self.d_in,
                net.covariate_dim()
            )));
        }
        if tape.shape(treatments) != (blocks * net.n_a, 1) {
            return Err(Error::Dimension(format!(
                "treatment column {:?} does not match {blocks} blocks of {} sources",
                tape.shape(treatments),
                net.n_a
            )));
        }
        let rate = self.config.dropout_rate;
        let mut layer_id = 0u64;
        let mut drop = |tape: &mut Tape, x: Var, rows_per_block: usize| -> Var {
            layer_id += 1;
            match dropout {
                Some(plan) if rate > 0.0 => {
                    let cols = tape.shape(x).1;
                    let keep = 1.0 / (1.0 - rate);
                    // drop when a uniform 32-bit draw falls below rate·2³²
                    let cut = (rate * 4294967296.0) as u64;
                    let mut mask = Vec::with_capacity(blocks * rows_per_block * cols);
                    for b in 0..blocks {
                        let mut rng = rng::stream(plan.seed, "dropout", &[plan.first_pass + b as u64, layer_id]);
                        mask.extend(
                            (0..rows_per_block * cols).map(|_| if (rng.next_u32() as u64) < cut { 0.0 } else { keep }),
                        );
                    }
                    let mask = Matrix::from_shape_vec((blocks * rows_per_block, cols), mask).expect("sized above");
                    tape.dropout_with_mask(x, mask)
                }
                _ => x,
            }
        };
        let ops = net.block_ops(blocks);
        let (a_hat, pool, mean) = (ops.a_hat.clone(), ops.pool.clone(), ops.mean.clone());

        let xa = tape.constant(net.xa.clone());
        let xa = tape.tile_rows(xa, blocks)?;
        let mut h = tape.concat_cols(xa, treatments)?;
        for l in 0..self.config.gcn_layers {
            let w = params[self.param_index(&format!("gcn{l}.weight"))];
            let b = params[self.param_index(&format!("gcn{l}.bias"))];
            let z = tape.matmul(h, w)?;
            let z = tape.spmm(a_hat.clone(), z)?;
            let z = tape.add_row(z, b)?;
            let z = tape.relu(z);
            h = drop(tape, z, net.n_a);
        }
        // [X_j ∥ m_j]·W = X_j·W_x + (P·H)_j·W_m = X_j·W_x + (P·(H·W_m))_j
        let wx = params[self.param_index("mlp0.weight_x")];
        let wm = params[self.param_index("mlp0.weight_m")];
        let b0 = params[self.param_index("mlp0.bias")];
        let hm = tape.matmul(h, wm)?;
        let pooled = tape.spmm(pool, hm)?;
        let xb = tape.constant(net.xb.clone());
        let own = tape.matmul(xb, wx)?;
        let own = tape.add_row(own, b0)?;
        let mut z = tape.add_tiled(pooled, own)?;
        let depth = self.config.mlp_hidden.len() + 1;
        for k in 0..depth {
            if k > 0 {
                let w = params[self.param_index(&format!("mlp{k}.weight"))];
                let b = params[self.param_index(&format!("mlp{k}.bias"))];
                z = tape.matmul(z, w)?;
                z = tape.add_row(z, b)?;
            }
            if k + 1 < depth {
                z = tape.relu(z);
                z = drop(tape, z, net.n_b);
            }
        }
        let raw = tape.spmm(mean, z)?;
        let scaled = tape.scale(raw, self.y_scale);
        let shift = tape.constant(Matrix::from_elem((blocks, 1), self.y_shift));
        tape.add(scaled, shift)
    }

    fn treatment_column(&self, net: &PreparedNetwork, treatments: &[&TreatmentVector]) -> Result<Matrix> {
        let mut col = Matrix::zeros((treatments.len() * net.n_a, 1));
        for (b, t) in treatments.iter().enumerate() {
            if t.len() != net.n_a {
                return Err(Error::Dimension(format!("treatment of length {} for {} sources", t.len(), net.n_a)));
            }
            for (i, &v) in t.as_slice().iter().enumerate() {
                col[[b * net.n_a + i, 0]] = v;
            }
        }
        Ok(col)
    }

    /// μ̂_B for each treatment vector, without recording gradients.
    pub fn predict(
        &self,
        net: &PreparedNetwork,
        treatments: &[&TreatmentVector],
        dropout: Option<DropoutPlan>,
    ) -> Result<Vec<f64>> {
        if treatments.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let col = self.treatment_column(net, treatments)?;
        let t = tape.constant(col);
        let out = self.record_forward(&mut tape, &params, net, t, treatments.len(), dropout)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    /// μ̂_B(T) with its gradients with respect to every parameter (in
    /// layout order) and to the treatment vector.
    pub fn output_gradients(
        &self,
        net: &PreparedNetwork,
        t: &TreatmentVector,
        dropout: Option<DropoutPlan>,
    ) -> Result<(f64, Vec<Matrix>, Vec<f64>)> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let col = tape.param(self.treatment_column(net, &[t])?);
        let out = self.record_forward(&mut tape, &params, net, col, 1, dropout)?;
        let mut grads = tape.backward(out)?;
        let pg = params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Matrix::zeros(p.dim())))
            .collect();
        let tg = grads.take(col).map(|g| g.iter().copied().collect()).unwrap_or_else(|| vec![0.0; t.len()]);
        Ok((tape.scalar(out), pg, tg))
    }

    /// μ̂_B(T); `dropout_seed` switches MC dropout on with pass 0 of that seed.
    pub fn forward(&self, net: &PreparedNetwork, t: &TreatmentVector, dropout_seed: Option<u64>) -> Result<f64> {
        let plan = dropout_seed.map(|seed| DropoutPlan { seed, first_pass: 0 });
        Ok(self.predict(net, &[t], plan)?[0])
    }

    pub fn to_document(&self) -> Document {
        let mut doc = Document::new(MODEL_MAGIC);
        let c = &self.config;
        doc.set("d_in", self.d_in);
        doc.set("frozen", self.frozen);
        doc.set("y_shift", format!("{:?}", self.y_shift));
        doc.set("y_scale", format!("{:?}", self.y_scale));
        doc.set("gcn_hidden", c.gcn_hidden);
        doc.set("gcn_layers", c.gcn_layers);
        doc.set("mlp_hidden", c.mlp_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","));
        doc.set("dropout_rate", format!("{:?}", c.dropout_rate));
        doc.set("lr", format!("{:?}", c.lr));
        doc.set("weight_decay", format!("{:?}", c.weight_decay));
        doc.set("epochs", c.epochs);
        doc.set("batch_size", c.batch_size);
        doc.set("patience", c.patience);
        doc.set("holdout_fraction", format!("{:?}", c.holdout_fraction));
        doc.set("mc_passes", c.mc_passes);
        doc.set("lambda", format!("{:?}", c.lambda));
        doc.set("share_masks", c.share_masks);
        doc.set("mc_point_estimate", c.mc_point_estimate);
        for (name, p) in self.names.iter().zip(&self.params) {
            doc.push_matrix(name, p);
        }
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let mlp_raw = doc.require("mlp_hidden")?;
        let mlp_hidden = if mlp_raw.is_empty() {
            Vec::new()
        } else {
            mlp_raw
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Parse { line: 0, message: format!("bad mlp_hidden `{mlp_raw}`") }))
                .collect::<Result<Vec<usize>>>()?
        };
        let config = EstimatorConfig {
            gcn_hidden: doc.parse_key("gcn_hidden")?,
            gcn_layers: doc.parse_key("gcn_layers")?,
            mlp_hidden,
            dropout_rate: doc.parse_key("dropout_rate")?,
            lr: doc.parse_key("lr")?,
            weight_decay: doc.parse_key("weight_decay")?,
            epochs: doc.parse_key("epochs")?,
            batch_size: doc.parse_key("batch_size")?,
            patience: doc.parse_key("patience")?,
            holdout_fraction: doc.parse_key("holdout_fraction")?,
            mc_passes: doc.parse_key("mc_passes")?,
            lambda: doc.parse_key("lambda")?,
            share_masks: doc.parse_key("share_masks")?,
            mc_point_estimate: doc.parse_key("mc_point_estimate")?,
        };
        config.validate()?;
        let d_in: usize = doc.parse_key("d_in")?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in layout(&config, d_in) {
            let m = doc.matrix(&name)?;
            if m.dim() != shape {
                return Err(Error::Dimension(format!("block `{name}` has shape {:?}, expected {shape:?}", m.dim())));
            }
            names.push(name);
            params.push(m);
        }
        Ok(EffectModel {
            config,
            d_in,
            names,
            params,
            y_shift: doc.parse_key("y_shift")?,
            y_scale: doc.parse_key("y_scale")?,
            frozen: doc.parse_key("frozen")?,
        })
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
///
/// An entry whose ±h interval crosses a ReLU kink (the activation pattern at
/// θ ± h differs from the one at θ) has no valid central difference at that
/// step. Such entries are counted in `kinked` and compared again at h/100;
/// `unresolved` counts those still crossing a kink at the finer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest relative error over smooth parameter entries.
    pub params: f64,
    /// Largest relative error over smooth treatment entries.
    pub treatment: f64,
    pub entries: usize,
    pub kinked: usize,
    /// Largest relative error of kinked entries at the finer step.
    pub kinked_fine: f64,
    /// Kinked entries that needed a one-sided difference at the finer step.
    pub one_sided: usize,
    pub unresolved: usize,
}

impl GradientCheck {
    pub fn worst(&self) -> f64 {
        self.params.max(self.treatment)
    }
}

impl EffectModel {
    fn probe(&self, net: &PreparedNetwork, t: &TreatmentVector, dropout: Option<DropoutPlan>) -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let col = tape.constant(self.treatment_column(net, &[t])?);
        let out = self.record_forward(&mut tape, &params, net, col, 1, dropout)?;
        Ok((tape.scalar(out), tape.relu_pattern()))
    }
}

/// Relative error of each entry is |a − n| / max(|a|, |n|, `floor`).
pub fn gradient_check(
    model: &EffectModel,
    net: &PreparedNetwork,
    t: &TreatmentVector,
    dropout: Option<DropoutPlan>,
    h: f64,
    floor: f64,
) -> Result<GradientCheck> {
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let (_, pg, tg) = model.output_gradients(net, t, dropout)?;
    let (_, base) = model.probe(net, t, dropout)?;
    let mut check =
        GradientCheck { params: 0.0, treatment: 0.0, entries: 0, kinked: 0, kinked_fine: 0.0, one_sided: 0, unresolved: 0 };
    // Central difference of `eval(step)`; None when a kink is crossed.
    let central = |eval: &mut dyn FnMut(f64) -> Result<(f64, Vec<bool>)>, step: f64| -> Result<Option<f64>> {
        let (up, pu) = eval(step)?;
        let (down, pd) = eval(-step)?;
        Ok((pu == base && pd == base).then(|| (up - down) / (2.0 * step)))
    };
    let record = |check: &mut GradientCheck,
                      analytic: f64,
                      is_param: bool,
                      eval: &mut dyn FnMut(f64) -> Result<(f64, Vec<bool>)>|
     -> Result<()> {
        check.entries += 1;
        match central(eval, h)? {
            Some(n) if is_param => check.params = check.params.max(rel(analytic, n)),
            Some(n) => check.treatment = check.treatment.max(rel(analytic, n)),
            None => {
                check.kinked += 1;
                let fine = h / 100.0;
                let n = match central(eval, fine)? {
                    Some(n) => Some(n),
                    // still straddling: take the side that keeps the pattern
                    None => {
                        let (mid, _) = eval(0.0)?;
                        let (up, pu) = eval(fine)?;
                        let (down, pd) = eval(-fine)?;
                        if pu == base {
                            check.one_sided += 1;
                            Some((up - mid) / fine)
                        } else if pd == base {
                            check.one_sided += 1;
                            Some((mid - down) / fine)
                        } else {
                            None
                        }
                    }
                };
                match n {
                    Some(n) => check.kinked_fine = check.kinked_fine.max(rel(analytic, n)),
                    None => check.unresolved += 1,
                }
            }
        }
        Ok(())
    };
    let mut probe = model.clone();
    for (k, g) in pg.iter().enumerate() {
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = probe.params[k][[r, c]];
            let mut eval = |step: f64| {
                probe.params[k][[r, c]] = orig + step;
                let out = probe.probe(net, t, dropout);
                probe.params[k][[r, c]] = orig;
                out
            };
            record(&mut check, g[[r, c]], true, &mut eval)?;
        }
    }
    let mut shifted = t.as_slice().to_vec();
    for (i, &analytic) in tg.iter().enumerate() {
        let orig = shifted[i];
        let mut eval = |step: f64| {
            shifted[i] = orig + step;
            let out = TreatmentVector::new(shifted.clone()).and_then(|tv| model.probe(net, &tv, dropout));
            shifted[i] = orig;
            out
        };
        record(&mut check, analytic, false, &mut eval)?;
    }
    Ok(check)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Validation MSE of predicting the mean training outcome.
    pub baseline_val_mse: f64,
    pub epochs_run: usize,
    pub train_size: usize,
    pub val_size: usize,
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len().max(1) as f64
}

/// Fits the model to observed `(T_n, Ȳ_B,n)` pairs by mini-batch Adam on
/// mean squared error, with early stopping on a held-out split. The
/// best-validation weights are restored at the end.
pub fn train(
    model: &mut EffectModel,
    net: &PreparedNetwork,
    data: &[ObservationalSample],
    seed: u64,
) -> Result<TrainReport> {
    if model.frozen {
        return Err(Error::Frozen);
    }
    if data.is_empty() {
        return Err(Error::Empty("no observational samples to train on".into()));
    }
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, "holdout", &[]));
    let n_val = if data.len() < 2 {
        0
    } else {
        ((data.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, data.len() - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    // a single sample validates on itself
    let val_idx: Vec<usize> = if val_idx.is_empty() { train_idx.to_vec() } else { val_idx.to_vec() };
    let mut train_idx = train_idx.to_vec();

    let train_mean = train_idx.iter().map(|&i| data[i].y_bar).sum::<f64>() / train_idx.len() as f64;
    let val_targets: Vec<f64> = val_idx.iter().map(|&i| data[i].y_bar).collect();
    let baseline_val_mse = mse(&vec![train_mean; val_targets.len()], &val_targets);

    let train_var = train_idx.iter().map(|&i| (data[i].y_bar - train_mean).powi(2)).sum::<f64>() / train_idx.len() as f64;
    model.y_shift = train_mean;
    model.y_scale = if train_var > 0.0 { train_var.sqrt() } else { 1.0 };

    let shapes: Vec<(usize, usize)> = model.params.iter().map(|p| p.dim()).collect();
    let adam_cfg = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_cfg, &shapes);

    let validate = |model: &EffectModel| -> Result<f64> {
        let mut preds = Vec::with_capacity(val_idx.len());
        for chunk in val_idx.chunks(64) {
            let ts: Vec<&TreatmentVector> = chunk.iter().map(|&i| &data[i].treatment).collect();
            preds.extend(model.predict(net, &ts, None)?);
        }
        Ok(mse(&preds, &val_targets))
    };

    let mut best_val = validate(model)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut trace = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        train_idx.shuffle(&mut rng::stream(seed, "epoch", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (bi, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let params: Vec<Var> = model.params.iter().map(|p| tape.param(p.clone())).collect();
            let ts: Vec<&TreatmentVector> = batch.iter().map(|&i| &data[i].treatment).collect();
            let t = tape.constant(model.treatment_column(net, &ts)?);
            let plan = DropoutPlan { seed: rng::derive_seed(seed, "train-dropout", &[epoch as u64, bi as u64]), first_pass: 0 };
            let pred = model.record_forward(&mut tape, &params, net, t, batch.len(), Some(plan))?;
            let target = tape.constant(Array2::from_shape_fn((batch.len(), 1), |(r, _)| data[batch[r]].y_bar));
            let diff = tape.sub(pred, target)?;
            // squared error in units of the training-target spread
            let diff = tape.scale(diff, 1.0 / model.y_scale);
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            loss_sum += tape.scalar(loss) * model.y_scale.powi(2) * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Matrix> = params.iter().map(|&p| grads.take(p).expect("parameter gradient")).collect();
            let mut refs: Vec<&mut Matrix> = model.params.iter_mut().collect();
            let grefs: Vec<&Matrix> = g.iter().collect();
            adam.step(&mut refs, &grefs)?;
        }
        let val_loss = validate(model)?;
        if val_loss < best_val {
            best_val = val_loss;
            best_params = model.params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        trace.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_loss,
            best_val_loss: best_val,
        });
        log::debug!("epoch {epoch}: train {:.3e} val {val_loss:.3e} best {best_val:.3e}", loss_sum / train_idx.len() as f64);
        if since_best >= cfg.patience {
            break;
        }
    }
    model.params = best_params;
    Ok(TrainReport {
        trace,
        best_epoch,
        best_val_mse: best_val,
        baseline_val_mse,
        epochs_run,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
    })
}

/// MC-dropout statistics of a Co2G estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Co2gStats {
    pub mean: f64,
    /// Population (1/M) standard deviation.
    pub std: f64,
    pub samples: Vec<f64>,
}

impl Co2gStats {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let first = samples.first().copied().unwrap_or(0.0);
        if samples.iter().all(|&s| s == first) {
            return Co2gStats { mean: first, std: 0.0, samples };
        }
        let m = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / m;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / m;
        Co2gStats { mean, std: var.sqrt(), samples }
    }
}

/// J = μ̂ − λ·σ̂.
pub fn lcb_objective(stats: &Co2gStats, lambda: f64) -> f64 {
    stats.mean - lambda * stats.std
}

/// Anything that can score intervention masks by estimated Co2G.
pub trait Co2gModel: Sync {
    fn source_count(&self) -> usize;

    /// MC statistics over `passes` dropout passes drawn from `seed`.
    fn co2g_stats(&self, mask: &TreatmentVector, passes: usize, seed: u64) -> Result<Co2gStats>;

    /// Deterministic point estimate used for error metrics.
    fn co2g_point(&self, mask: &TreatmentVector) -> Result<f64>;

    /// J(mask) = μ̂ − λσ̂ and its gradient with respect to the mask.
    fn lcb_with_gradient(&self, mask: &TreatmentVector, lambda: f64, passes: usize, seed: u64) -> Result<(f64, Vec<f64>)>;
}

/// A model bound to the network it scores, with a cache of control-arm
/// passes (the all-zero arm does not depend on the subset).
#[derive(Debug)]
pub struct Estimator<'a> {
    model: &'a EffectModel,
    net: &'a PreparedNetwork,
    control: Mutex<HashMap<(u64, usize), Arc<Vec<f64>>>>,
}

impl<'a> Estimator<'a> {
    pub fn new(model: &'a EffectModel, net: &'a PreparedNetwork) -> Result<Self> {
        if model.covariate_dim() != net.covariate_dim() {
            return Err(Error::Dimension(format!(
                "model expects {} covariates, network has {}",
                model.covariate_dim(),
                net.covariate_dim()
            )));
        }
        Ok(Estimator { model, net, control: Mutex::new(HashMap::new()) })
    }

    pub fn model(&self) -> &EffectModel {
        self.model
    }

    fn mc_active(&self) -> bool {
        self.model.config.dropout_rate > 0.0
    }

    fn control_plan(&self, seed: u64, passes: usize) -> DropoutPlan {
        let first_pass = if self.model.config.share_masks { 0 } else { passes as u64 };
        DropoutPlan { seed, first_pass }
    }

    fn control_arm(&self, passes: usize, seed: u64) -> Result<Arc<Vec<f64>>> {
        if let Some(hit) = self.control.lock().expect("cache lock").get(&(seed, passes)) {
            return Ok(hit.clone());
        }
        let zero = TreatmentVector::zeros(self.net.n_a);
        let ts = vec![&zero; passes];
        let vals = Arc::new(self.model.predict(self.net, &ts, Some(self.control_plan(seed, passes)))?);
        self.control.lock().expect("cache lock").insert((seed, passes), vals.clone());
        Ok(vals)
    }

    /// Co2G statistics for subset `subset` (treated at level 1).
    pub fn estimate_co2g(&self, subset: &[usize], passes: usize, seed: u64) -> Result<Co2gStats> {
        self.co2g_stats(&make_treatment_vector(subset, 1.0, self.net.n_a)?, passes, seed)
    }
}

impl Co2gModel for Estimator<'_> {
    fn source_count(&self) -> usize {
        self.net.n_a
    }

    fn co2g_stats(&self, mask: &TreatmentVector, passes: usize, seed: u64) -> Result<Co2gStats> {
        if passes == 0 {
            return Err(Error::Parameter("need at least one MC pass".into()));
        }
        if !self.mc_active() {
            let zero = TreatmentVector::zeros(self.net.n_a);
            let v = self.model.predict(self.net, &[mask, &zero], None)?;
            return Ok(Co2gStats::from_samples(vec![v[0] - v[1]; passes]));
        }
        let ts = vec![mask; passes];
        let treated = self.model.predict(self.net, &ts, Some(DropoutPlan { seed, first_pass: 0 }))?;
        let control = self.control_arm(passes, seed)?;
        Ok(Co2gStats::from_samples(treated.iter().zip(control.iter()).map(|(a, b)| a - b).collect()))
    }

    fn co2g_point(&self, mask: &TreatmentVector) -> Result<f64> {
        if self.model.config.mc_point_estimate {
            return Ok(self.co2g_stats(mask, self.model.config.mc_passes, 0)?.mean);
        }
        let zero = TreatmentVector::zeros(self.net.n_a);
        let v = self.model.predict(self.net, &[mask, &zero], None)?;
        Ok(v[0] - v[1])
    }

    fn lcb_with_gradient(&self, mask: &TreatmentVector, lambda: f64, passes: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
        let n_a = self.net.n_a;
        if mask.len() != n_a {
            return Err(Error::Dimension(format!("mask of length {} for {n_a} sources", mask.len())));
        }
        let passes = if self.mc_active() { passes.max(1) } else { 1 };
        let control: Vec<f64> = if self.mc_active() {
            self.control_arm(passes, seed)?.to_vec()
        } else {
            let zero = TreatmentVector::zeros(n_a);
            self.model.predict(self.net, &[&zero], None)?
        };
        let mut tape = Tape::new();
        let params: Vec<Var> = self.model.params.iter().map(|p| tape.constant(p.clone())).collect();
        let t = tape.param(Matrix::from_shape_vec((n_a, 1), mask.as_slice().to_vec()).expect("column"));
        let tiled = tape.tile_rows(t, passes)?;
        let plan = self.mc_active().then_some(DropoutPlan { seed, first_pass: 0 });
        let treated = self.model.record_forward(&mut tape, &params, self.net, tiled, passes, plan)?;
        let ctrl = tape.constant(Matrix::from_shape_vec((passes, 1), control).expect("column"));
        let samples = tape.sub(treated, ctrl)?;
        let mu = tape.mean(samples);
        let sample_vals: Vec<f64> = tape.value(samples).iter().copied().collect();
        let stats = Co2gStats::from_samples(sample_vals);
        let objective = if lambda > 0.0 && stats.std > 0.0 {
            let mu_col = tape.tile_rows(mu, passes)?;
            let dev = tape.sub(samples, mu_col)?;
            let sq = tape.square(dev);
            let var = tape.mean(sq);
            let sd = tape.sqrt(var);
            let pen = tape.scale(sd, lambda);
            tape.sub(mu, pen)?
        } else {
            mu
        };
        let grads = tape.backward(objective)?;
        let g = grads.get(t).map(|g| g.iter().copied().collect()).unwrap_or_else(|| vec![0.0; n_a]);
        Ok((lcb_objective(&stats, lambda), g))
    }
}
