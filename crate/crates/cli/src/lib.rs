//! Pipeline behind the `hawkes-causal` binary.
//!
//! A run is driven by one TOML file. Relative paths inside it resolve
//! against the file's directory, and every command snapshots the effective
//! configuration into the run directory as `config.toml`.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml                  effective configuration
//! <model>.checkpoint.json      trained parameters
//! <model>.train.json           per-epoch losses, best epoch
//! <model>.timing.json          wall-clock seconds (not reproducible)
//! <model>.eval.json            AUC, tau, accuracy
//! <model>.attribution.json     instance scores and type-level means
//! <model>.synergy.json         pattern synergy ratio
//! report.txt, report.json      combined tables
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hawkes_causal::causality::{CausalityError, SynergyReport};
use hawkes_causal::eventseq::DataError;
use hawkes_causal::graddiff::{GradError, ParamCheckpoint};
use hawkes_causal::isahp::IsahpCheckpoint;
use hawkes_causal::metrics::{self, EvalOptions, EvalReport, MetricError};
use hawkes_causal::simulate::SimError;
use hawkes_causal::trainer::{EpochRecord, TrainError};
use hawkes_causal::{
    attribute, hexp_attribution, load_jsonl, save_jsonl, simulate_mhp, simulate_pgem, split, synergy_ratio,
    AttributionResult, CausalMatrix, Dataset, HexpConfig, HexpModel, IsahpConfig, IsahpModel, ModelError,
    MhpParams, ParamStore, PgemSpec, SimConfig, TrainConfig, TrainReport,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "HAWKES_CAUSAL_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("missing artifact {0}; run the producing command first")]
    Missing(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Causality(#[from] CausalityError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for everything at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives simulation, splitting, initialization and shuffling.
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    pub sim: Option<SimSection>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    pub attribute: Option<AttributeConfig>,
    pub report: Option<ReportConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Pgem,
    Mhp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub kind: SimKind,
    pub num_sequences: usize,
    pub t_end: f64,
    pub max_events: Option<usize>,
    /// Defaults to the synergy specification.
    pub pgem: Option<PgemSpec>,
    pub mhp: Option<MhpParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Isahp,
    Hexp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Isahp => "isahp",
            ModelKind::Hexp => "hexp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub isahp: IsahpConfig,
    #[serde(default)]
    pub hexp: HexpConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Isahp,
            isahp: IsahpConfig::default(),
            hexp: HexpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    pub pattern: String,
    pub synergy_wildcard: usize,
    pub target_type: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Run directories whose ISAHP evaluations form the ablation rows.
    pub with_tlr: Option<PathBuf>,
    pub without_tlr: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and resolves relative paths against `path`'s directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.paths.dataset);
        join(&mut self.paths.run_dir);
        if let Some(r) = &mut self.report {
            r.with_tlr.iter_mut().for_each(join);
            r.without_tlr.iter_mut().for_each(join);
        }
    }

    /// The single seed replaces the training seed so one number fixes a run.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.paths.run_dir = o;
        }
        self.train.seed = self.seed;
        self
    }

    fn invalid(&self, msg: impl Into<String>) -> CliError {
        CliError::Config {
            path: self.paths.run_dir.join("config.toml"),
            msg: msg.into(),
        }
    }

    pub fn snapshot(&self) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| self.invalid(e.to_string()))?;
        write_bytes(&self.paths.run_dir.join("config.toml"), text.as_bytes())
    }

    fn artifact(&self, model: ModelKind, what: &str) -> PathBuf {
        self.paths.run_dir.join(format!("{}.{what}.json", model.name()))
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Data(DataError::Parse {
            line: e.line(),
            msg: format!("{}: {e}", path.display()),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexpCheckpoint {
    pub config: HexpConfig,
    pub num_types: usize,
    pub params: ParamCheckpoint,
}

/// Either trained model, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Checkpoint {
    Isahp(IsahpCheckpoint),
    Hexp(HexpCheckpoint),
}

pub enum Trained {
    Isahp(IsahpModel),
    Hexp(HexpModel),
}

impl Trained {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(match ck {
            Checkpoint::Isahp(c) => Trained::Isahp(IsahpModel::from_checkpoint(c)?),
            Checkpoint::Hexp(c) => {
                let store = ParamStore::from_checkpoint(&c.params)?;
                Trained::Hexp(HexpModel::from_store(c.num_types, c.config, store)?)
            }
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Trained::Isahp(m) => Checkpoint::Isahp(m.to_checkpoint()),
            Trained::Hexp(m) => Checkpoint::Hexp(HexpCheckpoint {
                config: *m.config(),
                num_types: m.num_types(),
                params: m.store().to_checkpoint(),
            }),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Trained::Isahp(_) => ModelKind::Isahp,
            Trained::Hexp(_) => ModelKind::Hexp,
        }
    }

    pub fn attribution(&self, ds: &Dataset) -> Result<AttributionResult> {
        Ok(match self {
            Trained::Isahp(m) => attribute(m, ds)?,
            Trained::Hexp(m) => hexp_attribution(m, ds),
        })
    }

    /// Type-level scores: aggregated attributions for ISAHP, branching
    /// ratios for the baseline. Never-observed pairs score 0.
    pub fn causality(&self, ds: &Dataset) -> Result<CausalMatrix> {
        Ok(match self {
            Trained::Isahp(m) => attribute(m, ds)?.aggregate.to_matrix(0.0),
            Trained::Hexp(m) => m.params().branching_matrix(),
        })
    }
}

pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if !cfg.paths.dataset.exists() {
        return Err(CliError::Missing(cfg.paths.dataset.clone()));
    }
    Ok(load_jsonl(&cfg.paths.dataset)?)
}

pub fn splits(cfg: &RunConfig, ds: &Dataset) -> Result<Splits> {
    let sp = split(ds, cfg.split.fractions, cfg.seed)?;
    Ok(Splits {
        train: ds.subset(&sp.train),
        validation: ds.subset(&sp.validation),
        test: ds.subset(&sp.test),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub sequences: usize,
    pub num_types: usize,
    pub total_events: usize,
}

/// Writes the dataset and its ground-truth sidecar.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimSummary> {
    let sim = cfg
        .sim
        .as_ref()
        .ok_or_else(|| CliError::Usage("simulate needs a [sim] section".into()))?;
    let mut sc = SimConfig::new(sim.num_sequences, sim.t_end, cfg.seed);
    if let Some(m) = sim.max_events {
        sc.max_events = m;
    }
    let ds = match sim.kind {
        SimKind::Pgem => simulate_pgem(sim.pgem.as_ref().unwrap_or(&PgemSpec::synergy()), &sc)?,
        SimKind::Mhp => {
            let p = sim.mhp.as_ref().ok_or_else(|| cfg.invalid("sim.kind = \"mhp\" needs [sim.mhp]"))?;
            simulate_mhp(p, &sc)?
        }
    };
    cfg.snapshot()?;
    if let Some(dir) = cfg.paths.dataset.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    save_jsonl(&ds, &cfg.paths.dataset)?;
    let summary = SimSummary {
        sequences: ds.len(),
        num_types: ds.num_types(),
        total_events: ds.total_events(),
    };
    println!(
        "S={} K={} events={}",
        summary.sequences, summary.num_types, summary.total_events
    );
    Ok(summary)
}

/// Fits the configured model on the train split with early stopping on the
/// validation split.
pub fn cmd_train(cfg: &RunConfig) -> Result<(Trained, TrainReport)> {
    let ds = load_dataset(cfg)?;
    let sp = splits(cfg, &ds)?;
    cfg.snapshot()?;
    let kind = cfg.model.kind;
    let progress = |r: &EpochRecord| {
        println!(
            "{} epoch {:>4} train {:.4} val {:.4}",
            kind.name(),
            r.epoch,
            r.train_loss,
            r.val_loss
        )
    };
    let start = Instant::now();
    let (model, mut report) = match kind {
        ModelKind::Isahp => {
            let mut m = IsahpModel::init(&sp.train, cfg.model.isahp.clone(), cfg.seed)?;
            let rep = hawkes_causal::train(&mut m, &sp.train, &sp.validation, &cfg.train, progress)?;
            (Trained::Isahp(m), rep)
        }
        ModelKind::Hexp => {
            let (m, rep) =
                hawkes_causal::mhp::fit_hexp(&sp.train, &sp.validation, cfg.model.hexp, &cfg.train, progress)?;
            (Trained::Hexp(m), rep)
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    let ck_path = cfg.artifact(kind, "checkpoint");
    report.checkpoint = ck_path.file_name().map(|n| n.to_string_lossy().into_owned());
    write_json(&ck_path, &model.to_checkpoint())?;
    write_json(&cfg.artifact(kind, "train"), &report)?;
    write_json(
        &cfg.artifact(kind, "timing"),
        &serde_json::json!({ "total_secs": elapsed, "epoch_secs": report.wall_secs }),
    )?;
    println!(
        "{} best epoch {} val {:.4} ({:.1}s)",
        kind.name(),
        report.best_epoch,
        report.best_val_loss,
        elapsed
    );
    Ok((model, report))
}

/// Hash of the experiment settings; paths are left out so relocated runs
/// keep their fingerprint.
pub fn fingerprint(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.paths = PathsConfig {
        dataset: PathBuf::new(),
        run_dir: PathBuf::new(),
    };
    c.report = None;
    metrics::fingerprint(&c)
}

pub fn load_trained(cfg: &RunConfig, kind: ModelKind) -> Result<Trained> {
    Trained::from_checkpoint(&read_json(&cfg.artifact(kind, "checkpoint"))?)
}

/// Matrix metrics over the whole dataset, accuracy on the test split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ds = load_dataset(cfg)?;
    let truth = ds
        .ground_truth()
        .ok_or_else(|| CliError::Missing(hawkes_causal::eventseq::sidecar_path(&cfg.paths.dataset)))?
        .clone();
    let sp = splits(cfg, &ds)?;
    let model = load_trained(cfg, cfg.model.kind)?;
    cfg.snapshot()?;
    let scores = model.causality(&ds)?;
    let fp = fingerprint(cfg);
    let name = model.kind().name();
    let report = match &model {
        Trained::Isahp(m) => metrics::evaluate(name, m, &scores, &truth, &sp.train, &sp.test, cfg.eval, fp)?,
        Trained::Hexp(m) => metrics::evaluate(name, m, &scores, &truth, &sp.train, &sp.test, cfg.eval, fp)?,
    };
    write_json(&cfg.artifact(model.kind(), "eval"), &report)?;
    print!("{}", metrics::format_table(std::slice::from_ref(&report)));
    Ok(report)
}

/// Instance attributions over the whole dataset plus the optional synergy
/// analysis.
pub fn cmd_attribute(cfg: &RunConfig) -> Result<(AttributionResult, Option<SynergyReport>)> {
    let ds = load_dataset(cfg)?;
    let model = load_trained(cfg, cfg.model.kind)?;
    cfg.snapshot()?;
    let ar = model.attribution(&ds)?;
    ar.write_json(&cfg.artifact(model.kind(), "attribution"))?;
    let syn = match &cfg.attribute {
        Some(a) => {
            let r = synergy_ratio(&ar, &ds, &a.pattern, a.synergy_wildcard, a.target_type)?;
            write_json(&cfg.artifact(model.kind(), "synergy"), &r)?;
            println!(
                "{} synergy {} ratio {} ({} synergistic, {} other)",
                model.kind().name(),
                r.pattern,
                r.ratio.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}")),
                r.synergistic_matches,
                r.other_matches
            );
            Some(r)
        }
        None => None,
    };
    Ok((ar, syn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub auc: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub accuracy: Option<f64>,
    pub majority_accuracy: Option<f64>,
    pub synergy_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub causality: Vec<ReportRow>,
    pub ablation: Vec<ReportRow>,
}

fn row(label: &str, e: &EvalReport, syn: Option<f64>) -> ReportRow {
    ReportRow {
        label: label.to_string(),
        auc: e.auc,
        kendall_tau: e.kendall_tau,
        accuracy: Some(e.accuracy),
        majority_accuracy: Some(e.majority_accuracy),
        synergy_ratio: syn,
    }
}

fn optional<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Ground truth scored against itself, then every model with an evaluation
/// in the run directory, then the regularization ablation pair if given.
pub fn cmd_report(cfg: &RunConfig) -> Result<Report> {
    let ds = load_dataset(cfg)?;
    let truth = ds
        .ground_truth()
        .ok_or_else(|| CliError::Missing(hawkes_causal::eventseq::sidecar_path(&cfg.paths.dataset)))?;
    let tau = |r: std::result::Result<f64, MetricError>| r.ok();
    let mut causality = vec![ReportRow {
        label: "ground_truth".into(),
        auc: tau(metrics::auc(truth, truth, cfg.eval.include_diagonal)),
        kendall_tau: tau(metrics::kendall_tau(truth, truth, cfg.eval.include_diagonal)),
        accuracy: None,
        majority_accuracy: None,
        synergy_ratio: None,
    }];
    for kind in [ModelKind::Isahp, ModelKind::Hexp] {
        if let Some(e) = optional::<EvalReport>(&cfg.artifact(kind, "eval"))? {
            let syn = optional::<SynergyReport>(&cfg.artifact(kind, "synergy"))?.and_then(|s| s.ratio);
            causality.push(row(kind.name(), &e, syn));
        }
    }
    if causality.len() == 1 {
        return Err(CliError::Missing(cfg.artifact(cfg.model.kind, "eval")));
    }
    let mut ablation = Vec::new();
    if let Some(r) = &cfg.report {
        for (label, dir) in [("isahp+tlr", &r.with_tlr), ("isahp-tlr", &r.without_tlr)] {
            if let Some(dir) = dir {
                let e: EvalReport = read_json(&dir.join("isahp.eval.json"))?;
                ablation.push(row(label, &e, None));
            }
        }
    }
    cfg.snapshot()?;
    let report = Report { causality, ablation };
    let text = format_report(&report);
    write_bytes(&cfg.paths.run_dir.join("report.txt"), text.as_bytes())?;
    write_json(&cfg.paths.run_dir.join("report.json"), &report)?;
    print!("{text}");
    Ok(report)
}

pub fn format_report(r: &Report) -> String {
    let mut out = table(&r.causality);
    if !r.ablation.is_empty() {
        out.push('\n');
        out.push_str(&table(&r.ablation));
    }
    out
}

fn table(rows: &[ReportRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<w$}  {:>7}  {:>7}  {:>7}  {:>8}  {:>7}\n",
        "model", "AUC", "tau", "acc", "majority", "synergy"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>7}  {:>7}  {:>7}  {:>8}  {:>7}\n",
            r.label,
            f(r.auc),
            f(r.kendall_tau),
            f(r.accuracy),
            f(r.majority_accuracy),
            f(r.synergy_ratio)
        ));
    }
    out
}

/// Applies the thread override, if set, to the global pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
