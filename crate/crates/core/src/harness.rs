//! Experiment orchestration: shot sampling, repeated ensemble runs,
//! ablations, cross-dataset transfer, hyperparameter sweeps and reliability
//! reports, with deterministic on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::categorizer::{categorize_all, oracle_categorize, CategorizeError, Category, CategoryAssignment};
use crate::data::{load_registry, DataError, RegionTable, Registry};
use crate::ensemble::{
    build_ensemble, CategorySource, EnsembleConfig, EnsembleError, EnsembleOutcome, LlmContext, Variant,
    DEFAULT_ENSEMBLE_SIZE, DEFAULT_LAMBDA, DEFAULT_POOL,
};
use crate::features::{augment, evaluate_expr, Augmentation, DiscoveryContext, FeatureError, DEFAULT_K_PERCENT};
use crate::gateway::{
    record_store_merge, Gateway, GatewayError, GenerationParams, LiveConfig, LiveProvider, MockProvider,
    ReplayProvider, ReplayStore, DEFAULT_TEMPERATURE, DEFAULT_TOP_P,
};
use crate::metrics::{
    default_bins, eval_cells_csv, jaccard_reliability, mi_difference_mean, pearson, rmse, win_matrix, EvalCell,
    JaccardScores, MetricError, ModelScore, ReliabilityTable, WinMatrix, WinMetric,
};
use crate::prompts::{IndicatorMeta, PromptError, PromptTemplates};
use crate::solver::{render_weights_report, weights_report, ConstrainedFit, SolverError};
use crate::synth::{make_synthetic, SyntheticSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Session offset for transfer runs so they never share replay keys with
/// few-shot runs.
pub const TRANSFER_SESSION_BASE: u32 = 1 << 24;
pub const RELIABILITY_SESSION_BASE: u32 = 1 << 25;
pub const DEFAULT_ORACLE_TAU: f64 = 0.1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("dataset {dataset:?} lacks columns required by the source schema: {}", missing.join(", "))]
    Schema { dataset: String, missing: Vec<String> },
    #[error("cannot sample {shots} shots from {rows} rows")]
    Sampling { shots: usize, rows: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Categorize(#[from] CategorizeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn io_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        registry: Option<PathBuf>,
    },
    Synthetic {
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub source: DataSource,
    /// Label column name (CSV) and indicator name in prompts.
    pub indicator: String,
    #[serde(default)]
    pub indicator_description: String,
    #[serde(default)]
    pub country: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CategorizationMode {
    /// Five-vote LLM categorization.
    Llm,
    /// Pearson-threshold categories computed on the full labeled table.
    Oracle {
        #[serde(default = "default_tau")]
        tau: f64,
    },
    /// Ground-truth categories of a synthetic dataset.
    Truth,
}

fn default_tau() -> f64 {
    DEFAULT_ORACLE_TAU
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Live,
    Replay,
    #[default]
    Mock,
}

impl FromStr for ProviderKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ProviderKind::Live),
            "replay" => Ok(ProviderKind::Replay),
            "mock" => Ok(ProviderKind::Mock),
            other => Err(HarnessError::Config(format!("unknown provider {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub live: Option<LiveConfig>,
    /// Transcript files merged into the replay store.
    pub replay: Vec<PathBuf>,
    /// JSON rules file for the mock provider.
    pub mock_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetConfig>,
    pub shots: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub k_percent: f64,
    pub lambda: f64,
    pub ensemble_size: usize,
    pub pool: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub provider: ProviderConfig,
    pub variant: Variant,
    pub flip_signs: bool,
    pub share_categorization: bool,
    pub categorization: CategorizationMode,
    /// With oracle or truth categories, still ask the LLM for interactions.
    pub discovery: bool,
    /// 0 uses all cores.
    pub workers: usize,
    pub model_name: String,
    pub templates_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            datasets: Vec::new(),
            shots: vec![3, 5],
            runs: 3,
            seed: 0,
            k_percent: DEFAULT_K_PERCENT,
            lambda: DEFAULT_LAMBDA,
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
            pool: DEFAULT_POOL,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            provider: ProviderConfig::default(),
            variant: Variant::Full,
            flip_signs: false,
            share_categorization: false,
            categorization: CategorizationMode::Llm,
            discovery: true,
            workers: 0,
            model_name: "signreg".into(),
            templates_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::Config("runs must be >= 1".into()));
        }
        if self.shots.is_empty() {
            return Err(HarnessError::Config("no shot settings given".into()));
        }
        if let Some(s) = self.shots.iter().find(|&&s| s < 3) {
            return Err(HarnessError::Config(format!("shot setting {s} is below 3")));
        }
        if let CategorizationMode::Oracle { tau } = self.categorization {
            if tau.is_nan() || tau < 0.0 {
                return Err(HarnessError::Config(format!("oracle tau {tau} must be >= 0")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(HarnessError::Config(format!("bad temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(HarnessError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        self.ensemble_config().validate()?;
        Ok(())
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            pool: self.pool,
            size: self.ensemble_size,
            lambda: self.lambda,
            k_percent: self.k_percent,
            variant: self.variant,
            flip_signs: self.flip_signs,
            share_categorization: self.share_categorization,
        }
    }

    pub fn generation_params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.temperature,
            top_p: self.top_p,
        }
    }

    pub fn templates(&self) -> Result<PromptTemplates, HarnessError> {
        match &self.templates_dir {
            Some(dir) => Ok(PromptTemplates::load_dir(dir)?),
            None => Ok(PromptTemplates::default()),
        }
    }

    /// Hash of every setting that can change results; `workers` is excluded.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            workers: 0,
            ..self.clone()
        };
        sha256_hex(&serde_json::to_string(&canonical).expect("config serializes"))
    }

    pub fn load_datasets(&self, base_dir: &Path) -> Result<Vec<Dataset>, HarnessError> {
        self.datasets.iter().map(|d| Dataset::load(d, base_dir)).collect()
    }
}

/// Builds the gateway described by the provider config. Live traffic is
/// appended to `record_to` as it arrives when given.
pub fn build_gateway(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    record_to: Option<&Path>,
) -> Result<Gateway, HarnessError> {
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
    let gw = match cfg.provider.kind {
        ProviderKind::Live => {
            let live = cfg
                .provider
                .live
                .as_ref()
                .ok_or_else(|| HarnessError::Config("live provider needs a `live` section".into()))?;
            let mut gw = Gateway::new(Box::new(LiveProvider::from_config(live)?));
            if let Some(path) = record_to {
                gw = gw.recording_to(ReplayStore::open_append(path)?);
            }
            gw
        }
        ProviderKind::Replay => {
            let paths: Vec<PathBuf> = cfg.provider.replay.iter().map(resolve).collect();
            if paths.is_empty() {
                return Err(HarnessError::Config("replay provider needs transcript files".into()));
            }
            Gateway::new(Box::new(ReplayProvider::new(record_store_merge(&paths)?)))
        }
        ProviderKind::Mock => match &cfg.provider.mock_rules {
            Some(p) => Gateway::new(Box::new(MockProvider::load(&resolve(p))?)),
            None => Gateway::new(Box::new(MockProvider::new(Vec::new()))),
        },
    };
    Ok(gw.with_params(cfg.generation_params()))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub table: RegionTable,
    pub registry: Registry,
    pub indicator: IndicatorMeta,
    pub country: String,
    pub truth: Option<Vec<CategoryAssignment>>,
}

fn indicator_meta(name: &str, description: &str) -> IndicatorMeta {
    let description = if description.trim().is_empty() {
        format!("the value of {name} for a region")
    } else {
        description.to_owned()
    };
    IndicatorMeta::new(name, description)
}

impl Dataset {
    pub fn load(cfg: &DatasetConfig, base_dir: &Path) -> Result<Self, HarnessError> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        let country = if cfg.country.is_empty() {
            cfg.name.clone()
        } else {
            cfg.country.clone()
        };
        match &cfg.source {
            DataSource::Csv { path, registry } => {
                let registry = match registry {
                    Some(r) => load_registry(&resolve(r))?,
                    None => Registry::default_modules(),
                };
                let table = RegionTable::load_csv(&resolve(path), &registry, Some(&cfg.indicator))?;
                table.require_labels()?;
                Ok(Dataset {
                    name: cfg.name.clone(),
                    table,
                    registry,
                    indicator: indicator_meta(&cfg.indicator, &cfg.indicator_description),
                    country,
                    truth: None,
                })
            }
            DataSource::Synthetic { spec } => {
                let mut spec = spec.clone();
                spec.indicator = cfg.indicator.clone();
                let data = make_synthetic(&spec)?;
                Ok(Dataset {
                    name: cfg.name.clone(),
                    table: data.table,
                    registry: data.registry,
                    indicator: indicator_meta(&cfg.indicator, &cfg.indicator_description),
                    country,
                    truth: Some(data.truth),
                })
            }
        }
    }

    pub fn synthetic(name: &str, spec: &SyntheticSpec) -> Result<Self, HarnessError> {
        let cfg = DatasetConfig {
            name: name.into(),
            source: DataSource::Synthetic { spec: spec.clone() },
            indicator: spec.indicator.clone(),
            indicator_description: String::new(),
            country: String::new(),
        };
        Self::load(&cfg, Path::new("."))
    }
}

// ---------------------------------------------------------------------------
// Sampling and seeds

fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Per-run seed derived from the master seed, shot setting and run index.
pub fn run_seed(master: u64, setting: usize, run: usize) -> u64 {
    let digest = Sha256::digest(format!("{master}:{setting}:{run}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniform sample of `shot_count` distinct rows, sorted ascending.
pub fn sample_shots(n_rows: usize, shot_count: usize, seed: u64) -> Result<Vec<usize>, HarnessError> {
    if shot_count == 0 || shot_count >= n_rows {
        return Err(HarnessError::Sampling {
            shots: shot_count,
            rows: n_rows,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n_rows, shot_count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn test_rows(n_rows: usize, shots: &[usize]) -> Vec<usize> {
    (0..n_rows).filter(|i| !shots.contains(i)).collect()
}

// ---------------------------------------------------------------------------
// Artifacts

/// Serialized writer for one experiment directory.
pub struct ArtifactWriter {
    root: PathBuf,
    lock: Mutex<()>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(ArtifactWriter {
            root: root.to_path_buf(),
            lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<(), HarnessError> {
        let _guard = self.lock.lock().expect("writer poisoned");
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write_text(rel, &text)
    }

    pub fn sub(&self, rel: &str) -> Result<ArtifactWriter, HarnessError> {
        ArtifactWriter::new(&self.root.join(rel))
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub shots: usize,
    pub run: usize,
    pub seed: u64,
    pub shot_rows: Vec<usize>,
    pub pearson: f64,
    pub rmse: f64,
    /// Design-matrix width of each ensemble member.
    pub design_columns: Vec<usize>,
    pub selected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub dataset: String,
    pub shots: usize,
    pub run: usize,
    pub seed: u64,
    pub ensemble: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub prompt_hash: String,
    pub registry_hashes: BTreeMap<String, String>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub provider: String,
    pub runs: Vec<RunEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub cells: Vec<EvalCell>,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<EvalCell>,
    pub runs: Vec<RunRecord>,
    pub manifest: ExperimentManifest,
    /// Ensemble outcome of each run, in `runs` order.
    pub outcomes: Vec<EnsembleOutcome>,
}

fn setting_label(shots: usize) -> String {
    format!("{shots}-shot")
}

fn run_stem(dataset: &str, shots: usize, run: usize) -> String {
    format!("{dataset}_{shots}shot_run{run}")
}

/// Assignments for oracle or truth modes; `None` means LLM categorization.
fn fixed_assignments(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Option<Vec<CategoryAssignment>>, HarnessError> {
    match cfg.categorization {
        CategorizationMode::Llm => Ok(None),
        CategorizationMode::Oracle { tau } => Ok(Some(oracle_categorize(&ds.table, tau)?)),
        CategorizationMode::Truth => ds
            .truth
            .clone()
            .map(Some)
            .ok_or_else(|| HarnessError::Config(format!("dataset {:?} has no ground-truth categories", ds.name))),
    }
}

fn ensemble_for(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    shots: &[usize],
    gateway: &Gateway,
    templates: &PromptTemplates,
    session_base: u32,
) -> Result<EnsembleOutcome, HarnessError> {
    let ctx = LlmContext {
        registry: &ds.registry,
        indicator: &ds.indicator,
        country: &ds.country,
        gateway,
        templates,
    };
    let discovery_ctx = (cfg.discovery && cfg.variant.expands()).then_some(&ctx);
    let source = match fixed_assignments(cfg, ds)? {
        None => CategorySource::Llm(&ctx),
        Some(a) => CategorySource::Given(a, discovery_ctx),
    };
    Ok(build_ensemble(
        &ds.table,
        shots,
        &source,
        &cfg.ensemble_config(),
        session_base,
    )?)
}

fn predict_scores(
    outcome: &EnsembleOutcome,
    table: &RegionTable,
    rows: &[usize],
) -> Result<(f64, f64, Vec<String>), HarnessError> {
    let y = table.require_labels()?;
    let pred = outcome.model.predict(table)?;
    let p: Vec<f64> = rows.iter().map(|&i| pred[i]).collect();
    let t: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let mut warnings = Vec::new();
    let r = match pearson(&p, &t) {
        Ok(r) => r,
        Err(e) => {
            warnings.push(format!("pearson undefined ({e}); recorded as 0"));
            0.0
        }
    };
    Ok((r, rmse(&p, &t)?, warnings))
}

/// Runs every (dataset, shot setting, run) combination and aggregates
/// Pearson and RMSE per setting. Artifacts go to `writer` when given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    gateway: &Gateway,
    writer: Option<&ArtifactWriter>,
) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(HarnessError::Config("no datasets".into()));
    }
    let templates = cfg.templates()?;
    let mut keys = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        for (s, &shots) in cfg.shots.iter().enumerate() {
            for run in 0..cfg.runs {
                let session_base = (((d * cfg.shots.len() + s) * cfg.runs + run) * cfg.pool) as u32;
                keys.push((ds, shots, run, session_base));
            }
        }
    }

    let results: Result<Vec<(RunRecord, EnsembleOutcome)>, HarnessError> = with_workers(cfg.workers, || {
        keys.par_iter()
            .map(|&(ds, shots, run, session_base)| {
                let seed = run_seed(cfg.seed, shots, run);
                let shot_rows = sample_shots(ds.table.n_rows(), shots, seed)?;
                let outcome = ensemble_for(cfg, ds, &shot_rows, gateway, &templates, session_base)?;
                let test = test_rows(ds.table.n_rows(), &shot_rows);
                let (r, e, mut warnings) = predict_scores(&outcome, &ds.table, &test)?;
                for c in &outcome.candidates {
                    warnings.extend(c.warnings.iter().map(|w| format!("candidate {}: {w}", c.index)));
                }
                let record = RunRecord {
                    dataset: ds.name.clone(),
                    shots,
                    run,
                    seed,
                    shot_rows,
                    pearson: r,
                    rmse: e,
                    design_columns: outcome.model.members.iter().map(|m| m.recipe.len()).collect(),
                    selected: outcome.model.members.iter().map(|m| m.candidate).collect(),
                    warnings,
                };
                if let Some(w) = writer {
                    write_run_artifacts(w, &record, &outcome)?;
                }
                Ok((record, outcome))
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    });
    if let Some(w) = writer {
        crate::gateway::write_jsonl(&w.root().join("transcripts.jsonl"), &gateway.transcripts())?;
    }
    let results = results?;

    let (runs, outcomes): (Vec<RunRecord>, Vec<EnsembleOutcome>) = results.into_iter().unzip();
    let cells = aggregate_cells(cfg, datasets, &runs, &cfg.model_name);
    let manifest = ExperimentManifest {
        version: VERSION.into(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        prompt_hash: templates.fingerprint(),
        registry_hashes: datasets
            .iter()
            .map(|d| (d.name.clone(), sha256_hex(&d.registry.to_json())))
            .collect(),
        dataset_hashes: datasets
            .iter()
            .map(|d| (d.name.clone(), sha256_hex(&d.table.to_csv_string())))
            .collect(),
        provider: gateway.provider_name().to_owned(),
        runs: runs
            .iter()
            .map(|r| RunEntry {
                dataset: r.dataset.clone(),
                shots: r.shots,
                run: r.run,
                seed: r.seed,
                ensemble: format!("ensembles/{}.json", run_stem(&r.dataset, r.shots, r.run)),
            })
            .collect(),
    };
    if let Some(w) = writer {
        w.write_json("manifest.json", &manifest)?;
        w.write_json(
            "metrics.json",
            &MetricsFile {
                cells: cells.clone(),
                runs: runs.clone(),
            },
        )?;
        w.write_text("metrics.csv", &eval_cells_csv(&cells))?;
    }
    Ok(ExperimentReport {
        cells,
        runs,
        manifest,
        outcomes,
    })
}

fn write_run_artifacts(w: &ArtifactWriter, record: &RunRecord, outcome: &EnsembleOutcome) -> Result<(), HarnessError> {
    let stem = run_stem(&record.dataset, record.shots, record.run);
    let mut fit_files = Vec::new();
    for (i, m) in outcome.model.members.iter().enumerate() {
        let rel = format!("fits/{stem}_member{i}.json");
        w.write_json(&rel, &m.record())?;
        fit_files.push(rel);
    }
    w.write_json(&format!("ensembles/{stem}.json"), &outcome.manifest(fit_files))
}

fn aggregate_cells(cfg: &ExperimentConfig, datasets: &[Dataset], runs: &[RunRecord], model: &str) -> Vec<EvalCell> {
    let mut cells = Vec::new();
    for ds in datasets {
        for &shots in &cfg.shots {
            let rs: Vec<&RunRecord> = runs
                .iter()
                .filter(|r| r.dataset == ds.name && r.shots == shots)
                .collect();
            let p: Vec<f64> = rs.iter().map(|r| r.pearson).collect();
            let e: Vec<f64> = rs.iter().map(|r| r.rmse).collect();
            cells.push(EvalCell {
                setting: setting_label(shots),
                indicator: ds.indicator.name.clone(),
                dataset: ds.name.clone(),
                scores: BTreeMap::from([(model.to_owned(), ModelScore::from_runs(&p, &e))]),
            });
        }
    }
    cells
}

/// Merges per-model cells that share (dataset, indicator, setting).
pub fn merge_cells(groups: &[Vec<EvalCell>]) -> Vec<EvalCell> {
    let mut merged: BTreeMap<(String, String, String), EvalCell> = BTreeMap::new();
    let mut order = Vec::new();
    for cells in groups {
        for c in cells {
            let key = (c.dataset.clone(), c.indicator.clone(), c.setting.clone());
            let entry = merged.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                EvalCell {
                    scores: BTreeMap::new(),
                    ..c.clone()
                }
            });
            entry.scores.extend(c.scores.clone());
        }
    }
    order.into_iter().filter_map(|k| merged.remove(&k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub cells: Vec<EvalCell>,
    pub reports: Vec<(Variant, ExperimentReport)>,
    pub win_pearson: WinMatrix,
    pub win_rmse: WinMatrix,
}

/// Runs each variant on identical seeds; cells carry one score per variant.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    gateway: &Gateway,
    variants: &[Variant],
    writer: Option<&ArtifactWriter>,
) -> Result<AblationReport, HarnessError> {
    if variants.is_empty() {
        return Err(HarnessError::Config("no ablation variants given".into()));
    }
    let mut reports = Vec::new();
    for &v in variants {
        let vcfg = ExperimentConfig {
            variant: v,
            model_name: v.as_str().into(),
            ..cfg.clone()
        };
        let sub = writer.map(|w| w.sub(v.as_str())).transpose()?;
        reports.push((v, run_experiment(&vcfg, datasets, gateway, sub.as_ref())?));
    }
    let cells = merge_cells(&reports.iter().map(|(_, r)| r.cells.clone()).collect::<Vec<_>>());
    let names: Vec<String> = variants.iter().map(|v| v.as_str().to_owned()).collect();
    let win_pearson = win_matrix(&cells, &names, WinMetric::Pearson)?;
    let win_rmse = win_matrix(&cells, &names, WinMetric::Rmse)?;
    if let Some(w) = writer {
        w.write_text("ablation_metrics.csv", &eval_cells_csv(&cells))?;
        w.write_text("win_pearson.csv", &win_pearson.to_csv())?;
        w.write_text("win_pearson.svg", &win_pearson.to_svg())?;
        w.write_text("win_rmse.csv", &win_rmse.to_csv())?;
        w.write_text("win_rmse.svg", &win_rmse.to_svg())?;
    }
    Ok(AblationReport {
        cells,
        reports,
        win_pearson,
        win_rmse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub datasets: Vec<String>,
    /// `pearson[source][target]`
    pub pearson: Vec<Vec<f64>>,
    pub rmse: Vec<Vec<f64>>,
}

impl TransferReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("source\\target,{}\n", self.datasets.join(","));
        for (i, row) in self.pearson.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!("{},{}\n", self.datasets[i], vals.join(",")));
        }
        out
    }
}

pub fn check_schema(source: &RegionTable, target: &RegionTable, target_name: &str) -> Result<(), HarnessError> {
    let missing: Vec<String> = source
        .feature_names()
        .iter()
        .filter(|n| target.feature_index(n).is_none())
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Schema {
            dataset: target_name.to_owned(),
            missing,
        })
    }
}

/// Trains on every labeled row of each source and evaluates on every
/// target, giving a source × target Pearson matrix.
pub fn run_transfer(
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    gateway: &Gateway,
    writer: Option<&ArtifactWriter>,
) -> Result<TransferReport, HarnessError> {
    cfg.validate()?;
    let templates = cfg.templates()?;
    for src in datasets {
        for tgt in datasets {
            check_schema(&src.table, &tgt.table, &tgt.name)?;
        }
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = with_workers(cfg.workers, || {
        datasets
            .par_iter()
            .enumerate()
            .map(|(i, src)| {
                let shots: Vec<usize> = (0..src.table.n_rows()).collect();
                let base = TRANSFER_SESSION_BASE + (i * cfg.pool) as u32;
                let outcome = ensemble_for(cfg, src, &shots, gateway, &templates, base)?;
                if let Some(w) = writer {
                    let record = RunRecord {
                        dataset: format!("transfer_{}", src.name),
                        shots: shots.len(),
                        run: 0,
                        seed: cfg.seed,
                        shot_rows: Vec::new(),
                        pearson: f64::NAN,
                        rmse: f64::NAN,
                        design_columns: Vec::new(),
                        selected: Vec::new(),
                        warnings: Vec::new(),
                    };
                    write_run_artifacts(w, &record, &outcome)?;
                }
                let mut p = Vec::new();
                let mut e = Vec::new();
                for tgt in datasets {
                    let all: Vec<usize> = (0..tgt.table.n_rows()).collect();
                    let (r, err, _) = predict_scores(&outcome, &tgt.table, &all)?;
                    p.push(r);
                    e.push(err);
                }
                Ok((p, e))
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    let report = TransferReport {
        datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        pearson: rows.iter().map(|r| r.0.clone()).collect(),
        rmse: rows.iter().map(|r| r.1.clone()).collect(),
    };
    if let Some(w) = writer {
        w.write_json("transfer.json", &report)?;
        w.write_text("transfer.csv", &report.to_csv())?;
        crate::gateway::write_jsonl(&w.root().join("transcripts.jsonl"), &gateway.transcripts())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KPercent,
    EnsembleSize,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::KPercent => "k_percent",
            SweepAxis::EnsembleSize => "ensemble_size",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k_percent" | "k" => Ok(SweepAxis::KPercent),
            "ensemble_size" | "ensemble" => Ok(SweepAxis::EnsembleSize),
            other => Err(HarnessError::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub cells: Vec<EvalCell>,
    pub mean_design_columns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},dataset,setting,pearson,pearson_se,rmse,rmse_se,mean_design_columns\n",
            self.axis.as_str()
        );
        for row in &self.rows {
            for c in &row.cells {
                for s in c.scores.values() {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        row.value,
                        c.dataset,
                        c.setting,
                        s.pearson,
                        s.pearson_se,
                        s.rmse,
                        s.rmse_se,
                        row.mean_design_columns
                    ));
                }
            }
        }
        out
    }
}

/// Repeats the experiment for each value of one hyperparameter. Shot
/// samples and LLM sessions do not depend on the swept value, so rows are
/// paired.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    gateway: &Gateway,
    axis: SweepAxis,
    values: &[f64],
    writer: Option<&ArtifactWriter>,
) -> Result<SweepReport, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("no sweep values given".into()));
    }
    let mut rows = Vec::new();
    for &v in values {
        let mut vcfg = cfg.clone();
        match axis {
            SweepAxis::KPercent => vcfg.k_percent = v,
            SweepAxis::EnsembleSize => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(HarnessError::Config(format!(
                        "ensemble size {v} is not a positive integer"
                    )));
                }
                vcfg.ensemble_size = v as usize;
            }
        }
        let sub = writer.map(|w| w.sub(&format!("{}_{v}", axis.as_str()))).transpose()?;
        let rep = run_experiment(&vcfg, datasets, gateway, sub.as_ref())?;
        let cols: Vec<usize> = rep.runs.iter().flat_map(|r| r.design_columns.clone()).collect();
        let mean_design_columns = if cols.is_empty() {
            0.0
        } else {
            cols.iter().sum::<usize>() as f64 / cols.len() as f64
        };
        rows.push(SweepRow {
            value: v,
            cells: rep.cells,
            mean_design_columns,
        });
    }
    let report = SweepReport { axis, rows };
    if let Some(w) = writer {
        w.write_json("sweep.json", &report)?;
        w.write_text("sweep.csv", &report.to_csv())?;
    }
    Ok(report)
}

/// Rows used for the MI analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MiRows {
    #[default]
    All,
    /// A seeded few-shot sample of this size.
    Shots(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSummary {
    pub dataset: String,
    pub mean_percent: Option<f64>,
    pub se_percent: Option<f64>,
    pub discovered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub taus: Vec<f64>,
    pub mi_rows: MiRows,
    pub jaccard: ReliabilityTable,
    pub mi: Vec<MiSummary>,
    pub assignments: BTreeMap<String, Vec<CategoryAssignment>>,
}

/// Categorization agreement with Pearson-threshold categories and the MI
/// gain of discovered interactions, per dataset.
pub fn reliability_report(
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    gateway: &Gateway,
    taus: &[f64],
    mi_rows: MiRows,
    writer: Option<&ArtifactWriter>,
) -> Result<ReliabilityReport, HarnessError> {
    let templates = cfg.templates()?;
    let mut rows = Vec::new();
    let mut mi = Vec::new();
    let mut assignments = BTreeMap::new();
    for (i, ds) in datasets.iter().enumerate() {
        let session = RELIABILITY_SESSION_BASE + i as u32;
        let assigned = match fixed_assignments(cfg, ds)? {
            Some(a) => a,
            None => categorize_all(&ds.registry, &ds.indicator, &ds.country, gateway, session, &templates)?.assignments,
        };
        rows.push((ds.name.clone(), jaccard_reliability(&assigned, &ds.table, taus)?));

        let summary = if cfg.discovery {
            let ctx = DiscoveryContext {
                registry: &ds.registry,
                indicator: &ds.indicator,
                country: &ds.country,
                gateway,
                session,
                templates: &templates,
            };
            let aug = augment(
                &ds.table,
                &assigned,
                Some(&ctx),
                &Variant::Full.augment_options(cfg.k_percent),
            )?;
            let rows: Vec<usize> = match mi_rows {
                MiRows::All => (0..ds.table.n_rows()).collect(),
                MiRows::Shots(k) => sample_shots(ds.table.n_rows(), k, run_seed(cfg.seed, k, 0))?,
            };
            let pick = |v: Vec<f64>| rows.iter().map(|&r| v[r]).collect::<Vec<f64>>();
            let labels = ds.table.require_labels()?;
            let y = pick(labels.to_vec());
            let disc: Vec<Vec<f64>> = aug
                .discovered
                .iter()
                .filter(|d| d.kept)
                .map(|d| evaluate_expr(&d.expr(), &ds.table).map(pick))
                .collect::<Result<_, _>>()?;
            let orig: Vec<Vec<f64>> = (0..ds.table.n_features()).map(|j| pick(ds.table.column(j))).collect();
            match mi_difference_mean(&disc, &orig, &y, default_bins(y.len())) {
                Ok((m, se)) => MiSummary {
                    dataset: ds.name.clone(),
                    mean_percent: Some(m),
                    se_percent: Some(se),
                    discovered: disc.len(),
                },
                Err(_) => MiSummary {
                    dataset: ds.name.clone(),
                    mean_percent: None,
                    se_percent: None,
                    discovered: disc.len(),
                },
            }
        } else {
            MiSummary {
                dataset: ds.name.clone(),
                mean_percent: None,
                se_percent: None,
                discovered: 0,
            }
        };
        mi.push(summary);
        assignments.insert(ds.name.clone(), assigned);
    }
    let report = ReliabilityReport {
        taus: taus.to_vec(),
        mi_rows,
        jaccard: ReliabilityTable { rows },
        mi,
        assignments,
    };
    if let Some(w) = writer {
        w.write_json("reliability.json", &report)?;
        w.write_text("reliability.csv", &report.jaccard.to_csv())?;
        w.write_text("reliability.md", &report.jaccard.to_markdown())?;
    }
    Ok(report)
}

/// Jaccard scores of one dataset, for callers that already hold assignments.
pub fn dataset_reliability(
    assigned: &[CategoryAssignment],
    table: &RegionTable,
    taus: &[f64],
) -> Result<JaccardScores, HarnessError> {
    Ok(jaccard_reliability(assigned, table, taus)?)
}

/// Categories from the configured source, or LLM votes in `session`.
pub fn resolve_assignments(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    gateway: &Gateway,
    session: u32,
) -> Result<(Vec<CategoryAssignment>, Vec<String>), HarnessError> {
    match fixed_assignments(cfg, ds)? {
        Some(a) => Ok((a, Vec::new())),
        None => {
            let templates = cfg.templates()?;
            let out = categorize_all(&ds.registry, &ds.indicator, &ds.country, gateway, session, &templates)?;
            Ok((out.assignments, out.warnings))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullFit {
    pub assignments: Vec<CategoryAssignment>,
    pub augmentation: Augmentation,
    pub fit: ConstrainedFit,
    pub names: Vec<String>,
    pub categories: Vec<Category>,
}

impl FullFit {
    pub fn report(&self, top_n: usize) -> String {
        render_weights_report(&weights_report(&self.fit, &self.names, &self.categories, top_n))
    }
}

/// Single model on every labeled row with the configured variant.
pub fn fit_full(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    gateway: &Gateway,
    assignments: Vec<CategoryAssignment>,
    session: u32,
) -> Result<FullFit, HarnessError> {
    let templates = cfg.templates()?;
    let ctx = DiscoveryContext {
        registry: &ds.registry,
        indicator: &ds.indicator,
        country: &ds.country,
        gateway,
        session,
        templates: &templates,
    };
    let use_llm = cfg.variant.expands() && (cfg.discovery || cfg.categorization == CategorizationMode::Llm);
    let augmentation = augment(
        &ds.table,
        &assignments,
        use_llm.then_some(&ctx),
        &cfg.variant.augment_options(cfg.k_percent),
    )?;
    let aug = augmentation.recipe.evaluate(&ds.table)?;
    let constraints = cfg.ensemble_config().constraints(&augmentation.recipe);
    let fit = crate::solver::fit(&aug.values, ds.table.require_labels()?, &constraints, cfg.lambda)?;
    Ok(FullFit {
        assignments,
        names: aug.names(),
        categories: aug.categories(),
        augmentation,
        fit,
    })
}
