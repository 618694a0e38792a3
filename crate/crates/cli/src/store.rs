//! On-disk layout of a run: `data/`, `models/` and `results/` under the
//! output directory. Every artifact records the hash of the config stage
//! that produced it and loading checks it against the current config.

use std::fs;
use std::path::{Path, PathBuf};

use caumax_core::config::RunConfig;
use caumax_core::estimator::{EffectModel, TrainReport, MODEL_MAGIC};
use caumax_core::eval::{ReportRow, SeedData, REPORT_HEADER};
use caumax_core::graph::{TwoGroupNetwork, SPLIT_MAGIC};
use caumax_core::scm::{Dataset, DATA_MAGIC};
use caumax_core::selectors::{SelectionResult, SELECTION_HEADER};
use caumax_core::textfmt::{write_atomic, Document};
use caumax_core::{Error, Result};

const HASH_KEY: &str = "config_hash";
const CSV_HASH_PREFIX: &str = "# config_hash=";

pub struct ArtifactStore {
    root: PathBuf,
}

fn check_hash(path: &Path, found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(Error::Artifact {
            path: path.to_path_buf(),
            message: format!("built with config hash {h}, current config has {expected}; rerun the upstream stage"),
        }),
        None => Err(Error::Artifact { path: path.to_path_buf(), message: "missing config hash".into() }),
    }
}

fn missing(path: &Path, upstream: &str) -> Error {
    Error::Artifact { path: path.to_path_buf(), message: format!("not found; run `caumax {upstream}` first") }
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split_path(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed-{seed}.split"))
    }

    pub fn data_path(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("seed-{seed}.data"))
    }

    pub fn model_path(&self, seed: u64) -> PathBuf {
        self.root.join("models").join(format!("seed-{seed}.model"))
    }

    pub fn trace_path(&self, seed: u64) -> PathBuf {
        self.root.join("models").join(format!("seed-{seed}.trace.csv"))
    }

    pub fn selections_path(&self, seed: u64) -> PathBuf {
        self.root.join("results").join(format!("selections-seed-{seed}.csv"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("results").join("report.csv")
    }

    pub fn aggregate_path(&self) -> PathBuf {
        self.root.join("results").join("aggregate.csv")
    }

    pub fn sweep_path(&self, method: &str) -> PathBuf {
        self.root.join("results").join(format!("lambda-sweep-{method}.csv"))
    }

    fn write_doc(&self, mut doc: Document, hash: &str, path: &Path) -> Result<()> {
        doc.set(HASH_KEY, hash);
        doc.write_atomic(path)
    }

    fn read_doc(&self, path: &Path, magic: &str, hash: &str, upstream: &str) -> Result<Document> {
        if !path.exists() {
            return Err(missing(path, upstream));
        }
        let doc = Document::read(path, magic)?;
        check_hash(path, doc.get(HASH_KEY), hash)?;
        Ok(doc)
    }

    /// Writes `body` (header first) with the hash as a leading comment line.
    pub fn write_csv(&self, path: &Path, hash: &str, body: &str) -> Result<()> {
        write_atomic(path, format!("{CSV_HASH_PREFIX}{hash}\n{body}").as_bytes())
    }

    /// Returns the data lines after checking the hash comment and header.
    pub fn read_csv(&self, path: &Path, hash: &str, header: &str, upstream: &str) -> Result<Vec<String>> {
        if !path.exists() {
            return Err(missing(path, upstream));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut lines = text.lines();
        check_hash(path, lines.next().and_then(|l| l.strip_prefix(CSV_HASH_PREFIX)), hash)?;
        if lines.next() != Some(header) {
            return Err(Error::Artifact { path: path.to_path_buf(), message: format!("expected header `{header}`") });
        }
        Ok(lines.map(str::to_string).collect())
    }

    pub fn save_seed_data(&self, cfg: &RunConfig, data: &SeedData) -> Result<()> {
        let hash = cfg.data_hash();
        let mut split = data.net.to_document();
        split.set("seed", data.seed);
        self.write_doc(split, &hash, &self.split_path(data.seed))?;
        let mut ds = data.dataset.to_document();
        ds.set("seed", data.seed);
        self.write_doc(ds, &hash, &self.data_path(data.seed))
    }

    pub fn load_seed_data(&self, cfg: &RunConfig, seed: u64) -> Result<SeedData> {
        let hash = cfg.data_hash();
        let split = self.read_doc(&self.split_path(seed), SPLIT_MAGIC, &hash, "gen")?;
        let data = self.read_doc(&self.data_path(seed), DATA_MAGIC, &hash, "gen")?;
        let net = TwoGroupNetwork::from_document(&split)?;
        let dataset = Dataset::from_document(&data)?;
        Ok(SeedData { seed, net, dataset })
    }

    pub fn save_model(&self, cfg: &RunConfig, seed: u64, model: &EffectModel, report: &TrainReport) -> Result<()> {
        let hash = cfg.model_hash();
        let mut trace = String::from("epoch,train_loss,val_loss,best_val_loss\n");
        for e in &report.trace {
            trace.push_str(&format!("{},{:?},{:?},{:?}\n", e.epoch, e.train_loss, e.val_loss, e.best_val_loss));
        }
        self.write_csv(&self.trace_path(seed), &hash, &trace)?;
        let mut doc = model.to_document();
        doc.set("seed", seed);
        doc.set("best_epoch", report.best_epoch);
        doc.set("epochs_run", report.epochs_run);
        doc.set("best_val_mse", format!("{:?}", report.best_val_mse));
        doc.set("baseline_val_mse", format!("{:?}", report.baseline_val_mse));
        self.write_doc(doc, &hash, &self.model_path(seed))
    }

    pub fn load_model(&self, cfg: &RunConfig, seed: u64) -> Result<EffectModel> {
        let doc = self.read_doc(&self.model_path(seed), MODEL_MAGIC, &cfg.model_hash(), "train")?;
        EffectModel::from_document(&doc).map_err(|e| Error::Artifact {
            path: self.model_path(seed),
            message: e.to_string(),
        })
    }

    pub fn save_selections(&self, cfg: &RunConfig, seed: u64, rows: &[SelectionResult]) -> Result<()> {
        let mut body = format!("{SELECTION_HEADER}\n");
        for r in rows {
            body.push_str(&r.to_csv_row());
            body.push('\n');
        }
        self.write_csv(&self.selections_path(seed), &cfg.selection_hash(), &body)
    }

    pub fn load_selections(&self, cfg: &RunConfig, seed: u64) -> Result<Vec<SelectionResult>> {
        let path = self.selections_path(seed);
        let lines = self.read_csv(&path, &cfg.selection_hash(), SELECTION_HEADER, "select")?;
        lines
            .iter()
            .map(|l| SelectionResult::from_csv_row(l).map_err(|e| Error::Artifact { path: path.clone(), message: e.to_string() }))
            .collect()
    }

    pub fn load_report(&self, cfg: &RunConfig) -> Result<Vec<ReportRow>> {
        let path = self.report_path();
        let lines = self.read_csv(&path, &cfg.evaluation_hash(), REPORT_HEADER, "evaluate")?;
        lines
            .iter()
            .map(|l| ReportRow::from_csv_row(l).map_err(|e| Error::Artifact { path: path.clone(), message: e.to_string() }))
            .collect()
    }
}
