//! Experiment orchestration. A run config expands into the
//! (dataset × corpus kind × retriever × backend) matrix; each cell is
//! executed with caching and can be resumed after an interruption.
//!
//! Output tree:
//!
//! ```text
//! <output_dir>/<run_id>/
//!   manifest.json            run id, config hash, per-cell status
//!   config.json              the config the run was planned from
//!   records.jsonl            records of all done cells, in plan order
//!   corrections.jsonl
//!   metrics.json
//!   report.md  report.csv
//!   cells/<cell>/            records.jsonl metrics.json corrections.jsonl
//!                            timings.jsonl [perturbation.jsonl]
//!   cache/                   generation and embedding cache (default)
//! ```
//!
//! Relative paths in the config resolve against the config file's directory.

mod report;

pub use report::{
    metric_rows, render_csv, render_markdown, report, CellMetrics, RunReport, FAKE_RATE_COLUMN, TRUE_RATE_COLUMN,
    UNDEFINED,
};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::correct::{correct_corpus, CorrectionLog, JudgeTemplates, OracleJudge, RetrievalCorrector};
use crate::corpus::{load_corpus, Corpus, CorpusKind, Instructions, TaskKind};
use crate::error::{Error, Result};
use crate::generate::{
    Backend, BackendRegistry, BackendSpec, ExampleTransform, GenerationRecord, Generator, NegativityMapping,
    NegativityMode, Pipeline, PipelineOptions,
};
use crate::metrics::score;
use crate::perturb::{corrupt, make_negative_corpus, merge_diverse, strip_labels, Manifest};
use crate::retrieve::embedding::resolve;
use crate::retrieve::{BuildContext, EmbedOptions, ProviderRegistry, Retrieval, RetrieverRegistry, RetrieverSpec};
use crate::util::{jsonl_bytes, sha256_hex, write_atomic, write_if_changed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub task: TaskKind,
    pub train: String,
    pub test: String,
}

/// Retrieval corpus to derive from a dataset's training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSpec {
    Labeled,
    Unlabeled,
    Counterfactual {
        rate: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Training splits of every other dataset in the config.
    Diverse,
    /// Fully counterfactual corpus for negative-awareness runs.
    Negative {
        #[serde(default)]
        seed: u64,
    },
    None,
}

impl CorpusSpec {
    pub fn label(&self) -> String {
        let seeded = |base: String, seed: u64| if seed == 0 { base } else { format!("{base}-s{seed}") };
        match *self {
            CorpusSpec::Labeled => "labeled".into(),
            CorpusSpec::Unlabeled => "unlabeled".into(),
            CorpusSpec::Counterfactual { rate, seed } => seeded(format!("counterfactual@{rate}"), seed),
            CorpusSpec::Diverse => "diverse".into(),
            CorpusSpec::Negative { seed } => seeded("negative".into(), seed),
            CorpusSpec::None => "none".into(),
        }
    }

    pub fn kind(&self) -> CorpusKind {
        match *self {
            CorpusSpec::Labeled => CorpusKind::Labeled,
            CorpusSpec::Unlabeled => CorpusKind::Unlabeled,
            CorpusSpec::Counterfactual { rate, .. } => CorpusKind::Counterfactual { rate },
            CorpusSpec::Diverse => CorpusKind::Diverse,
            CorpusSpec::Negative { .. } => CorpusKind::Counterfactual { rate: 1.0 },
            CorpusSpec::None => CorpusKind::None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionMode {
    #[default]
    Off,
    /// Judge each retrieved example before it enters the prompt.
    RetrievalTime,
    /// Rewrite the whole retrieval corpus once before indexing.
    CorpusRewrite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Defaults to `<run dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub ask_negativity: bool,
    #[serde(default)]
    pub negativity_mapping: NegativityMapping,
    #[serde(default)]
    pub negativity_mode: NegativityMode,
    #[serde(default)]
    pub correction: CorrectionMode,
    /// Judge backend for corrections. An `oracle` judge without parameters
    /// reads the true labels from each dataset's training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<BackendSpec>,
    #[serde(default)]
    pub instructions: Instructions,
    #[serde(default)]
    pub judge_templates: JudgeTemplates,
    pub datasets: Vec<DatasetSpec>,
    pub corpora: Vec<CorpusSpec>,
    pub retrievers: Vec<RetrieverSpec>,
    pub backends: Vec<BackendSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> String {
    "runs".into()
}

fn default_k() -> usize {
    1
}

fn default_concurrency() -> usize {
    4
}

fn unique<'a>(what: &str, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Config(format!("duplicate {what} `{n}`")));
        }
    }
    Ok(())
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\'])
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the canonical JSON form; the base directory is not part of it.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn path(&self, p: &str) -> PathBuf {
        resolve(&self.base_dir, p)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.path(&self.output_dir).join(&self.run_id)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.cache_dir {
            Some(c) => self.path(c),
            None => self.run_dir().join("cache"),
        }
    }

    pub fn validate(&self, reg: &Registries) -> Result<()> {
        if !safe_name(&self.run_id) {
            return Err(Error::Config(format!("bad run id `{}`", self.run_id)));
        }
        for (axis, n) in [
            ("datasets", self.datasets.len()),
            ("corpora", self.corpora.len()),
            ("retrievers", self.retrievers.len()),
            ("backends", self.backends.len()),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("`{axis}` is empty")));
            }
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        unique("dataset", self.datasets.iter().map(|d| d.name.as_str()))?;
        unique("retriever", self.retrievers.iter().map(|r| r.name.as_str()))?;
        unique("backend", self.backends.iter().map(|b| b.name.as_str()))?;
        let labels: Vec<String> = self.corpora.iter().map(CorpusSpec::label).collect();
        unique("corpus", labels.iter().map(String::as_str))?;
        for c in &self.corpora {
            if let CorpusSpec::Counterfactual { rate, .. } = c {
                if !(0.0..=1.0).contains(rate) {
                    return Err(Error::Config(format!("counterfactual rate {rate} outside [0, 1]")));
                }
            }
        }
        for d in &self.datasets {
            if !safe_name(&d.name) {
                return Err(Error::Config(format!("bad dataset name `{}`", d.name)));
            }
            for p in [&d.train, &d.test] {
                let path = self.path(p);
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset `{}`: missing file {}", d.name, path.display())));
                }
            }
        }
        for r in &self.retrievers {
            reg.retrievers
                .validate(r, &self.base_dir)
                .map_err(|e| Error::Config(format!("retriever `{}`: {e}", r.name)))?;
        }
        for b in self.backends.iter().chain(&self.judge) {
            if !reg.backends.contains(&b.kind) {
                return Err(Error::Unknown {
                    registry: "backend",
                    name: b.kind.clone(),
                });
            }
        }
        if self.correction != CorrectionMode::Off && self.judge.is_none() {
            return Err(Error::Config("correction needs a `judge` backend".into()));
        }
        Ok(())
    }
}

/// Name lookups for every pluggable component.
#[derive(Clone, Default)]
pub struct Registries {
    pub retrievers: RetrieverRegistry,
    pub backends: BackendRegistry,
    pub providers: ProviderRegistry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub dataset: String,
    pub task: TaskKind,
    pub corpus: CorpusSpec,
    pub retriever: RetrieverSpec,
    pub backend: BackendSpec,
}

fn cell_id(parts: &[&str]) -> String {
    parts
        .iter()
        .map(|p| {
            p.chars()
                .map(|c| if c.is_ascii_alphanumeric() || "-_.@".contains(c) { c } else { '_' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("__")
}

pub struct Plan {
    pub config: RunConfig,
    pub config_hash: String,
    pub cells: Vec<Cell>,
    pub registries: Registries,
}

pub fn plan(config: &RunConfig) -> Result<Plan> {
    plan_with(config, Registries::default())
}

/// Expand the config in (dataset, corpus, retriever, backend) order. A
/// `none` corpus or retriever collapses into a single no-retrieval cell
/// per dataset and backend.
pub fn plan_with(config: &RunConfig, registries: Registries) -> Result<Plan> {
    config.validate(&registries)?;
    let none_retriever = config
        .retrievers
        .iter()
        .find(|r| r.is_none())
        .cloned()
        .unwrap_or_else(|| RetrieverSpec::new("none", "none", json!({})));
    let mut cells = Vec::new();
    let mut seen = HashSet::new();
    for d in &config.datasets {
        for c in &config.corpora {
            for r in &config.retrievers {
                for b in &config.backends {
                    let (corpus, retriever) = if *c == CorpusSpec::None || r.is_none() {
                        (CorpusSpec::None, none_retriever.clone())
                    } else {
                        (*c, r.clone())
                    };
                    let id = cell_id(&[&d.name, &corpus.label(), &retriever.name, &b.name]);
                    if !seen.insert(id.clone()) {
                        continue;
                    }
                    cells.push(Cell {
                        id,
                        dataset: d.name.clone(),
                        task: d.task,
                        corpus,
                        retriever,
                        backend: b.clone(),
                    });
                }
            }
        }
    }
    Ok(Plan {
        config: config.clone(),
        config_hash: config.hash(),
        cells,
        registries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Pending,
    Done,
    Failed,
}

/// Artifact paths, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellArtifacts {
    pub records: String,
    pub metrics: String,
    pub corrections: String,
    pub timings: String,
}

impl CellArtifacts {
    fn new(id: &str) -> Self {
        let f = |name: &str| format!("cells/{id}/{name}");
        CellArtifacts {
            records: f("records.jsonl"),
            metrics: f("metrics.json"),
            corrections: f("corrections.jsonl"),
            timings: f("timings.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub id: String,
    pub dataset: String,
    pub task: TaskKind,
    pub corpus: String,
    pub corpus_kind: CorpusKind,
    pub retriever: String,
    pub backend: String,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_space: Option<BTreeSet<String>>,
    pub artifacts: CellArtifacts,
}

impl CellEntry {
    fn pending(c: &Cell) -> Self {
        CellEntry {
            id: c.id.clone(),
            dataset: c.dataset.clone(),
            task: c.task,
            corpus: c.corpus.label(),
            corpus_kind: c.corpus.kind(),
            retriever: c.retriever.name.clone(),
            backend: c.backend.name.clone(),
            status: CellStatus::Pending,
            error: None,
            records: None,
            label_space: None,
            artifacts: CellArtifacts::new(&c.id),
        }
    }

    /// `corpus / retriever / backend`.
    pub fn approach(&self) -> String {
        format!("{} / {} / {}", self.corpus, self.retriever, self.backend)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub cells: Vec<CellEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    /// Writes only when the content changed.
    pub fn save(&self, path: &Path) -> Result<bool> {
        let mut body = serde_json::to_vec_pretty(self)?;
        body.push(b'\n');
        write_if_changed(path, &body)
    }

    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|c| c.status == status).count()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecuteOptions {
    /// Skip cells already marked done in an existing manifest.
    pub resume: bool,
    /// Stop with [`Error::Interrupted`] after this many pipeline instances,
    /// as if the process had been killed.
    pub budget: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub executed: usize,
    pub skipped: usize,
    /// Calls that reached task backends (cache misses).
    pub backend_calls: usize,
    pub judge_calls: usize,
}

struct Dataset {
    train: Corpus,
    test: Corpus,
}

fn load_dataset(config: &RunConfig, d: &DatasetSpec) -> Result<Dataset> {
    let mut train = load_corpus(&config.path(&d.train), d.task)?;
    train.name = d.name.clone();
    let test = load_corpus(&config.path(&d.test), d.task)?;
    Ok(Dataset { train, test })
}

fn union_space(a: Option<&BTreeSet<String>>, b: Option<&BTreeSet<String>>) -> Option<BTreeSet<String>> {
    match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.into_iter().chain(b).flatten().cloned().collect()),
    }
}

#[derive(Serialize)]
struct TimingRow<'a> {
    instance_id: &'a str,
    latency_ms: u64,
    cache_hit: bool,
}

struct CellRun {
    records: Vec<GenerationRecord>,
    label_space: Option<BTreeSet<String>>,
    backend_calls: usize,
    judge_calls: usize,
}

struct Executor<'a> {
    plan: &'a Plan,
    run_dir: PathBuf,
    cache_dir: PathBuf,
    data: HashMap<String, std::result::Result<Dataset, String>>,
    budget: Option<AtomicUsize>,
}

impl Executor<'_> {
    fn dataset(&self, name: &str) -> Result<&Dataset> {
        match self.data.get(name) {
            Some(Ok(d)) => Ok(d),
            Some(Err(e)) => Err(Error::InvalidCorpus(e.clone())),
            None => Err(Error::Config(format!("unknown dataset `{name}`"))),
        }
    }

    fn retrieval_corpus(&self, cell: &Cell, ds: &Dataset) -> Result<(Corpus, Manifest)> {
        let train = &ds.train;
        Ok(match cell.corpus {
            CorpusSpec::Labeled => (train.clone(), Manifest::default()),
            CorpusSpec::Unlabeled => (strip_labels(train)?, Manifest::default()),
            CorpusSpec::Counterfactual { rate, seed } => {
                let p = corrupt(train, rate, seed)?;
                (p.corpus, p.manifest)
            }
            CorpusSpec::Negative { seed } => {
                let p = make_negative_corpus(train, seed)?;
                (p.corpus, p.manifest)
            }
            CorpusSpec::Diverse => {
                let others: Vec<&Corpus> = self
                    .plan
                    .config
                    .datasets
                    .iter()
                    .filter(|d| d.name != cell.dataset)
                    .map(|d| self.dataset(&d.name).map(|x| &x.train))
                    .collect::<Result<_>>()?;
                (merge_diverse(train, &others)?, Manifest::default())
            }
            CorpusSpec::None => (
                Corpus {
                    name: "none".into(),
                    task: train.task,
                    kind: CorpusKind::None,
                    entries: Vec::new(),
                    label_space: None,
                },
                Manifest::default(),
            ),
        })
    }

    fn judge(&self, ds: &Dataset) -> Result<Option<Arc<Generator>>> {
        let config = &self.plan.config;
        let Some(spec) = config.judge.as_ref().filter(|_| config.correction != CorrectionMode::Off) else {
            return Ok(None);
        };
        let backend: Arc<dyn Backend> = if spec.kind == "oracle" && spec.params.is_empty() {
            Arc::new(OracleJudge::from_corpus(&ds.train))
        } else {
            self.plan.registries.backends.build(spec, &config.base_dir)?
        };
        Ok(Some(Arc::new(Generator::new(backend, Some(&self.cache_dir)))))
    }

    fn run_cell(&self, cell: &Cell, entry: &CellEntry) -> Result<CellRun> {
        let config = &self.plan.config;
        let reg = &self.plan.registries;
        let cell_dir = self.run_dir.join("cells").join(&cell.id);
        let ds = self.dataset(&cell.dataset)?;
        let label_space = union_space(ds.train.label_space.as_ref(), ds.test.label_space.as_ref());

        let (mut corpus, perturbation) = self.retrieval_corpus(cell, ds)?;
        if !perturbation.entries.is_empty() {
            perturbation.save(&cell_dir.join("perturbation.jsonl"))?;
        }
        let backend = reg.backends.build(&cell.backend, &config.base_dir)?;
        let generator = Generator::new(backend, Some(&self.cache_dir));
        let judge = match cell.corpus {
            CorpusSpec::None => None,
            _ => self.judge(ds)?,
        };

        let mut corrections: Vec<CorrectionLog> = Vec::new();
        if let (Some(j), CorrectionMode::CorpusRewrite) = (&judge, config.correction) {
            let (c, log) = correct_corpus(&corpus, j.clone(), label_space.clone(), config.judge_templates.clone())?;
            corpus = c;
            corrections = log;
        }
        let retrieval = if cell.corpus == CorpusSpec::None {
            Retrieval::disabled(Arc::new(corpus))
        } else {
            let ctx = BuildContext {
                providers: reg.providers.clone(),
                base_dir: config.base_dir.clone(),
                embed: EmbedOptions {
                    cache_dir: Some(self.cache_dir.clone()),
                    ..EmbedOptions::default()
                },
            };
            let retriever = reg.retrievers.build(&cell.retriever, &corpus, &ctx)?;
            Retrieval::new(Arc::new(corpus), retriever)
        };
        let corrector = match (&judge, config.correction) {
            (Some(j), CorrectionMode::RetrievalTime) => Some(RetrievalCorrector::new(
                j.clone(),
                cell.task,
                label_space.clone(),
                config.judge_templates.clone(),
            )),
            _ => None,
        };

        let options = PipelineOptions {
            k: config.k,
            ask_negativity: config.ask_negativity,
            negativity_mapping: config.negativity_mapping,
            negativity_mode: config.negativity_mode,
            concurrency: config.concurrency,
            instructions: config.instructions.clone(),
            label_space: label_space.clone(),
        };
        let mut pipeline = Pipeline::new(&retrieval, &generator, options);
        pipeline.transform = corrector.as_ref().map(|c| c as &dyn ExampleTransform);
        pipeline.budget = self.budget.as_ref();
        let records = pipeline.run(&ds.test)?;
        if let Some(c) = &corrector {
            corrections = c.log();
        }

        let timings: Vec<TimingRow> = records
            .iter()
            .map(|r| TimingRow {
                instance_id: &r.instance_id,
                latency_ms: r.timing.latency_ms,
                cache_hit: r.timing.cache_hit,
            })
            .collect();
        let metrics = score(cell.task, &records, label_space.as_ref())?;
        let a = &entry.artifacts;
        write_atomic(&self.run_dir.join(&a.timings), &jsonl_bytes(&timings)?)?;
        write_atomic(&self.run_dir.join(&a.corrections), &jsonl_bytes(&corrections)?)?;
        let mut m = serde_json::to_vec_pretty(&metrics)?;
        m.push(b'\n');
        write_atomic(&self.run_dir.join(&a.metrics), &m)?;
        // records last: their presence marks a finished cell on disk
        write_atomic(&self.run_dir.join(&a.records), &jsonl_bytes(&records)?)?;
        Ok(CellRun {
            records,
            label_space,
            backend_calls: generator.backend_calls(),
            judge_calls: judge.map_or(0, |j| j.backend_calls()),
        })
    }
}

/// Run every cell that is not done yet. Failures stay inside their cell;
/// run-level outputs are regenerated whenever at least one cell is done.
pub fn execute(plan: &Plan, opts: ExecuteOptions) -> Result<RunSummary> {
    let config = &plan.config;
    let run_dir = config.run_dir();
    let manifest_path = run_dir.join("manifest.json");
    let fresh = RunManifest {
        run_id: config.run_id.clone(),
        config_hash: plan.config_hash.clone(),
        cells: plan.cells.iter().map(CellEntry::pending).collect(),
    };
    let mut manifest = if opts.resume && manifest_path.is_file() {
        let m = RunManifest::load(&manifest_path)?;
        if m.config_hash != plan.config_hash {
            return Err(Error::Config(format!(
                "run `{}` was started with a different config; use a new run id",
                config.run_id
            )));
        }
        m
    } else {
        fresh
    };
    for e in &mut manifest.cells {
        if e.status == CellStatus::Done && !run_dir.join(&e.artifacts.records).is_file() {
            e.status = CellStatus::Pending;
        }
    }
    let mut config_json = serde_json::to_vec_pretty(config)?;
    config_json.push(b'\n');
    write_if_changed(&run_dir.join("config.json"), &config_json)?;
    manifest.save(&manifest_path)?;

    let todo: Vec<usize> = (0..plan.cells.len())
        .filter(|&i| manifest.cells[i].status != CellStatus::Done)
        .collect();
    let mut summary = RunSummary {
        manifest: manifest.clone(),
        executed: 0,
        skipped: plan.cells.len() - todo.len(),
        backend_calls: 0,
        judge_calls: 0,
    };
    if !todo.is_empty() {
        let data = config
            .datasets
            .iter()
            .map(|d| (d.name.clone(), load_dataset(config, d).map_err(|e| e.to_string())))
            .collect();
        let exec = Executor {
            plan,
            run_dir: run_dir.clone(),
            cache_dir: config.cache_dir(),
            data,
            budget: opts.budget.map(AtomicUsize::new),
        };
        for i in todo {
            let cell = &plan.cells[i];
            log::info!("cell {}", cell.id);
            let outcome = exec.run_cell(cell, &manifest.cells[i]);
            let entry = &mut manifest.cells[i];
            match outcome {
                Err(Error::Interrupted(n)) => {
                    entry.status = CellStatus::Pending;
                    manifest.save(&manifest_path)?;
                    return Err(Error::Interrupted(n));
                }
                Err(e) => {
                    log::warn!("cell {} failed: {e}", cell.id);
                    entry.status = CellStatus::Failed;
                    entry.error = Some(e.to_string());
                    entry.records = None;
                }
                Ok(run) => {
                    summary.backend_calls += run.backend_calls;
                    summary.judge_calls += run.judge_calls;
                    let failed = run.records.iter().filter(|r| r.error.is_some()).count();
                    entry.records = Some(run.records.len());
                    entry.label_space = run.label_space;
                    if failed > 0 {
                        entry.status = CellStatus::Failed;
                        entry.error = Some(format!("{failed} of {} records failed", run.records.len()));
                    } else {
                        entry.status = CellStatus::Done;
                        entry.error = None;
                    }
                }
            }
            summary.executed += 1;
            manifest.save(&manifest_path)?;
        }
    }
    if manifest.count(CellStatus::Done) > 0 {
        report(&run_dir)?;
    }
    summary.manifest = manifest;
    Ok(summary)
}
