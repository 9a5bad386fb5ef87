//! Run configuration, run directory layout and the end-to-end pipeline
//! steps (ingest, optimize, evaluate, report).
//!
//! A run directory is self-contained: the inputs it depends on (lexicon,
//! mock script, template overrides) are copied under `inputs/` and the
//! stored `config.json` points at those copies with run-relative paths.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apo_engine::{
    self, Apo, ApoError, Chaining, FinalSelection, GenerationSettings, OptimizationTrace, OptimizerConfig,
    PromptState, UpdateInput,
};
use crate::corpus::{
    load_dataset, section_seed, split_section, CorpusError, DialogueRecord, SectionDataset, SectionId, SectionSplit, SplitManifest,
    SplitOptions, DEFAULT_MIN_SECTION_SIZE, DEFAULT_TRAIN_SAMPLE_SIZE,
};
use crate::experiment_runner::{
    emit_report, run_group, save_results, PromptGroup, PromptSetFile, RunnerError, ScoreTable, SetOrigin,
};
use crate::llm_gateway::{
    BackendConfig, BackendKind, Gateway, GatewayError, LlmRole, ResponseCache, DEFAULT_SELF_CONSISTENCY_RUNS,
    DEFAULT_TEMPERATURE,
};
use crate::metrics::{ConceptLexicon, MetricSuite, MetricsError};
use crate::prompt_kit::{ParseMode, TemplateError, TemplateSet};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(
        ".{name}.tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::SeqCst)
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("config file {path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Apo(#[from] ApoError),
    #[error(transparent)]
    Runner(#[from] RunnerError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("run directory {path}: {message}")]
    Run { path: String, message: String },
    #[error("unknown section {0}")]
    UnknownSection(String),
    #[error("{} section(s) failed: {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Sections(Vec<ApoError>),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn cfg_err(key: &str, message: impl Into<String>) -> RunError {
    RunError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn default_iterations() -> usize {
    apo_engine::DEFAULT_ITERATIONS
}
fn default_epochs() -> usize {
    apo_engine::DEFAULT_EPOCHS
}
fn default_train_sample_size() -> usize {
    DEFAULT_TRAIN_SAMPLE_SIZE
}
fn default_min_section_size() -> usize {
    DEFAULT_MIN_SECTION_SIZE
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_runs() -> usize {
    DEFAULT_SELF_CONSISTENCY_RUNS
}
fn default_true() -> bool {
    true
}
fn default_baseline_label() -> String {
    "Gen".into()
}
fn default_apo_label() -> String {
    "APO".into()
}

/// Everything a run needs. Relative paths resolve against the directory of
/// the config file they were read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub lexicon: PathBuf,
    pub mentee_model: String,
    pub critic_model: String,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_train_sample_size")]
    pub train_sample_size: usize,
    #[serde(default = "default_min_section_size")]
    pub min_section_size: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_runs")]
    pub self_consistency_runs: usize,
    #[serde(default)]
    pub train_self_consistency: bool,
    #[serde(default)]
    pub final_selection: FinalSelection,
    #[serde(default)]
    pub chaining: Chaining,
    #[serde(default)]
    pub update_input: UpdateInput,
    #[serde(default)]
    pub parse_mode: ParseMode,
    #[serde(default = "default_true")]
    pub eval_excludes_training: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default = "default_baseline_label")]
    pub baseline_label: String,
    #[serde(default = "default_apo_label")]
    pub apo_label: String,
    pub backend: BackendConfig,
}

impl RunConfig {
    /// Parses TOML or JSON, chosen by the file extension (`.json` is JSON,
    /// anything else TOML).
    pub fn parse(text: &str, json: bool) -> Result<Self, String> {
        if json {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, RunError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let config = Self::parse(&text, json).map_err(|message| RunError::ConfigFile {
            path: path.display().to_string(),
            message,
        })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedConfig { config, base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            iterations: self.iterations,
            epochs: self.epochs,
            mentee: LlmRole::mentee(self.mentee_model.clone()),
            critic: LlmRole::critic(self.critic_model.clone()),
            final_selection: self.final_selection,
            chaining: self.chaining,
            update_input: self.update_input,
            selection_metric: crate::metrics::MetricName::R1,
        }
    }

    pub fn generation(&self) -> GenerationSettings {
        GenerationSettings {
            temperature: self.temperature,
            self_consistency_runs: self.self_consistency_runs,
            train_self_consistency: self.train_self_consistency,
            parse_mode: self.parse_mode,
        }
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            train_sample_size: self.train_sample_size,
            seed: self.seed,
            eval_excludes_training: self.eval_excludes_training,
        }
    }
}

/// A config together with the directory its relative paths resolve in.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Checks values and that every referenced file exists. Errors name the
    /// offending key.
    pub fn validate(&self) -> Result<(), RunError> {
        let c = &self.config;
        let must_exist = |key: &str, p: &Path, dir: bool| {
            let full = self.resolve(p);
            let ok = if dir { full.is_dir() } else { full.is_file() };
            if ok {
                Ok(())
            } else {
                Err(cfg_err(key, format!("{} not found", full.display())))
            }
        };
        must_exist("dataset", &c.dataset, false)?;
        must_exist("lexicon", &c.lexicon, false)?;
        if let Some(t) = &c.templates_dir {
            must_exist("templates_dir", t, true)?;
        }
        for (key, v) in [
            ("iterations", c.iterations),
            ("epochs", c.epochs),
            ("train_sample_size", c.train_sample_size),
            ("self_consistency_runs", c.self_consistency_runs),
        ] {
            if v == 0 {
                return Err(cfg_err(key, "must be at least 1"));
            }
        }
        if c.chaining == Chaining::PerInstance && c.iterations > c.train_sample_size {
            return Err(cfg_err(
                "iterations",
                format!(
                    "{} exceeds train_sample_size {} under per-instance chaining",
                    c.iterations, c.train_sample_size
                ),
            ));
        }
        if c.min_section_size <= c.train_sample_size {
            return Err(cfg_err(
                "min_section_size",
                format!(
                    "must exceed train_sample_size ({}) so every retained section can be split",
                    c.train_sample_size
                ),
            ));
        }
        if !c.temperature.is_finite() || c.temperature < 0.0 {
            return Err(cfg_err("temperature", "must be a finite non-negative number"));
        }
        for (key, v) in [
            ("mentee_model", &c.mentee_model),
            ("critic_model", &c.critic_model),
            ("baseline_label", &c.baseline_label),
            ("apo_label", &c.apo_label),
        ] {
            if v.trim().is_empty() {
                return Err(cfg_err(key, "must not be empty"));
            }
        }
        if c.baseline_label == c.apo_label {
            return Err(cfg_err("apo_label", "must differ from baseline_label"));
        }
        c.backend.validate().map_err(|e| cfg_err("backend", e.to_string()))?;
        if let Some(script) = &c.backend.script_path {
            must_exist("backend.script_path", script, false)?;
        }
        Ok(())
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.json")
    }
    pub fn splits(&self) -> PathBuf {
        self.root.join("splits")
    }
    pub fn split(&self, s: &SectionId) -> PathBuf {
        self.splits().join(format!("{}.json", s.slug()))
    }
    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts")
    }
    pub fn inputs(&self) -> PathBuf {
        self.root.join("inputs")
    }
    pub fn review(&self) -> PathBuf {
        self.root.join("review")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))
}

/// Loads the CSV and writes `dataset.json` into `out`. Re-ingesting the same
/// file is a no-op; a different file is refused.
pub fn ingest(csv: &Path, out: &Path, min_section_size: usize) -> Result<SectionDataset, RunError> {
    let dataset = load_dataset(csv, min_section_size)?;
    let run = RunDir::new(out);
    let path = run.dataset();
    if path.exists() {
        let existing: SectionDataset = read_json(&path)?;
        if existing != dataset {
            return Err(RunError::Run {
                path: out.display().to_string(),
                message: "dataset.json was ingested from different data or settings".into(),
            });
        }
        return Ok(existing);
    }
    write_json(&path, &dataset)?;
    Ok(dataset)
}

fn copy_input(src: &Path, dst: &Path) -> Result<(), RunError> {
    let bytes = fs::read(src).map_err(|e| io_err(src, e))?;
    if dst.exists() {
        let old = fs::read(dst).map_err(|e| io_err(dst, e))?;
        if old != bytes {
            return Err(RunError::Run {
                path: dst.display().to_string(),
                message: format!("differs from {}; use a fresh run directory", src.display()),
            });
        }
        return Ok(());
    }
    write_atomic(dst, &bytes).map_err(|e| io_err(dst, e))
}

const TEMPLATE_FILES: [&str; 4] = ["forward_wrapper.txt", "gradient.txt", "update.txt", "p0_default.txt"];

/// An opened run: config, dataset and the services built from them.
pub struct Pipeline {
    pub run: RunDir,
    /// Stored form of the config; paths are relative to the run directory.
    pub config: RunConfig,
    pub dataset: SectionDataset,
    pub templates: TemplateSet,
    pub metrics: MetricSuite,
    pub gateway: Gateway,
}

impl Pipeline {
    /// Creates or resumes the run named by a user config: copies inputs,
    /// writes `config.json`, and ingests the dataset unless already present.
    pub fn prepare(loaded: &LoadedConfig) -> Result<Self, RunError> {
        loaded.validate()?;
        let c = &loaded.config;
        let run = RunDir::new(loaded.resolve(&c.run_dir));
        fs::create_dir_all(&run.root).map_err(|e| io_err(&run.root, e))?;
        ingest(&loaded.resolve(&c.dataset), &run.root, c.min_section_size)?;

        let mut stored = c.clone();
        stored.dataset = PathBuf::from("dataset.json");
        stored.run_dir = PathBuf::from(".");
        stored.lexicon = PathBuf::from("inputs/lexicon.tsv");
        copy_input(&loaded.resolve(&c.lexicon), &run.root.join(&stored.lexicon))?;
        if let Some(script) = &c.backend.script_path {
            stored.backend.script_path = Some(PathBuf::from("inputs/mock_script.json"));
            copy_input(&loaded.resolve(script), &run.root.join("inputs/mock_script.json"))?;
        }
        if let Some(t) = &c.templates_dir {
            stored.templates_dir = Some(PathBuf::from("inputs/templates"));
            for f in TEMPLATE_FILES {
                let src = loaded.resolve(t).join(f);
                if src.exists() {
                    copy_input(&src, &run.inputs().join("templates").join(f))?;
                }
            }
        }
        let config_path = run.config();
        if config_path.exists() {
            let existing: RunConfig = read_json(&config_path)?;
            if existing != stored {
                return Err(RunError::Run {
                    path: run.root.display().to_string(),
                    message: "config.json differs from the given config; use a fresh run directory".into(),
                });
            }
        } else {
            write_json(&config_path, &stored)?;
        }
        Self::open(&run.root)
    }

    /// Opens an existing run from its stored `config.json`.
    pub fn open(root: &Path) -> Result<Self, RunError> {
        Self::open_with(root, None)
    }

    /// As [`Pipeline::open`], optionally overriding the backend's parallel
    /// call bound.
    pub fn open_with(root: &Path, max_parallel: Option<usize>) -> Result<Self, RunError> {
        let run = RunDir::new(root);
        if !run.config().is_file() {
            return Err(RunError::Run {
                path: root.display().to_string(),
                message: "no config.json; run `optimize` first".into(),
            });
        }
        let mut config: RunConfig = read_json(&run.config())?;
        if let Some(n) = max_parallel {
            config.backend.max_parallel = n.max(1);
        }
        let dataset: SectionDataset = read_json(&run.dataset())?;
        let templates = match &config.templates_dir {
            Some(d) => TemplateSet::load_dir(&run.root.join(d))?,
            None => TemplateSet::bundled(),
        };
        let metrics = MetricSuite::new(ConceptLexicon::load(&run.root.join(&config.lexicon))?);
        let backend = config.backend.build(&run.root)?;
        let gateway = Gateway::new(backend, ResponseCache::dir(run.cache())?);
        Ok(Self {
            run,
            config,
            dataset,
            templates,
            metrics,
            gateway,
        })
    }

    pub fn apo(&self) -> Apo<'_> {
        Apo::new(&self.gateway, &self.templates, &self.metrics).with_settings(self.config.generation())
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.gateway.backend_kind()
    }

    pub fn sections(&self) -> Vec<SectionId> {
        self.dataset.sections.keys().cloned().collect()
    }

    /// Parses a comma-separated section filter against the dataset.
    pub fn select_sections(&self, filter: Option<&str>) -> Result<Vec<SectionId>, RunError> {
        let Some(filter) = filter else {
            return Ok(self.sections());
        };
        let mut out = Vec::new();
        for raw in filter.split(',').filter(|s| !s.trim().is_empty()) {
            let id = SectionId::parse(raw).ok_or_else(|| RunError::UnknownSection(raw.to_string()))?;
            if !self.dataset.sections.contains_key(&id) {
                return Err(RunError::UnknownSection(id.to_string()));
            }
            if !out.contains(&id) {
                out.push(id);
            }
        }
        out.sort();
        Ok(out)
    }

    /// The section's split, drawn with the section seed and checked against
    /// (or saved as) `splits/<section>.json`.
    pub fn split(&self, section: &SectionId) -> Result<SectionSplit, RunError> {
        let mut opts = self.config.split_options();
        opts.seed = section_seed(opts.seed, section);
        let split = split_section(&self.dataset, section, &opts)?;
        let manifest = SplitManifest::from(&split);
        let path = self.run.split(section);
        if path.exists() {
            let stored: SplitManifest = read_json(&path)?;
            if stored != manifest {
                return Err(RunError::Run {
                    path: path.display().to_string(),
                    message: "stored split differs from the one drawn with this config".into(),
                });
            }
        } else {
            write_json(&path, &manifest)?;
        }
        Ok(split)
    }

    /// Evaluation records per section.
    pub fn eval_sets(&self) -> Result<BTreeMap<SectionId, Vec<DialogueRecord>>, RunError> {
        self.sections()
            .into_iter()
            .map(|s| self.split(&s).map(|sp| (s, sp.evaluation)))
            .collect()
    }

    pub fn p0(&self, section: &SectionId) -> PromptState {
        PromptState::generic(section.clone(), self.templates.default_instruction.clone())
    }

    /// Traces present in `traces/`, keyed by section.
    pub fn traces(&self) -> Result<BTreeMap<SectionId, OptimizationTrace>, RunError> {
        let mut out = BTreeMap::new();
        for s in self.sections() {
            let path = apo_engine::trace_path(&self.run.traces(), &s);
            if path.exists() {
                out.insert(s, OptimizationTrace::load(&path)?);
            }
        }
        Ok(out)
    }

    /// Optimizes the given sections, `parallel` at a time, writing splits,
    /// traces and the baseline/optimized prompt-set files. Sections that
    /// succeed are persisted even when others fail.
    pub fn optimize(&self, sections: &[SectionId], parallel: usize) -> Result<Vec<OptimizationTrace>, RunError> {
        for s in self.sections() {
            self.split(&s)?;
        }
        self.write_prompt_sets()?;
        let apo = self.apo();
        let cfg = self.config.optimizer();
        let traces_dir = self.run.traces();
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<OptimizationTrace, ApoError>>>> =
            Mutex::new((0..sections.len()).map(|_| None).collect());
        let workers = parallel.clamp(1, sections.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(section) = sections.get(i) else { break };
                    log::info!("optimizing {section}");
                    let result = self
                        .split(section)
                        .map_err(|e| ApoError::Precondition(e.to_string()))
                        .and_then(|split| apo.optimize_section(&split, &self.p0(section), &cfg, Some(&traces_dir)));
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(result);
                });
            }
        });
        self.write_prompt_sets()?;
        let mut traces = Vec::new();
        let mut errors = Vec::new();
        for r in slots.into_inner().unwrap_or_else(|e| e.into_inner()) {
            match r.expect("every section ran") {
                Ok(t) => traces.push(t),
                Err(e) => errors.push(e),
            }
        }
        if errors.is_empty() {
            Ok(traces)
        } else {
            Err(RunError::Sections(errors))
        }
    }

    /// `prompts/gen.json` (baseline) and `prompts/apo.json` (finals of the
    /// traces present).
    pub fn write_prompt_sets(&self) -> Result<(), RunError> {
        let gen = PromptSetFile {
            label: self.config.baseline_label.clone(),
            origin: SetOrigin::Generic,
            prompts: self
                .sections()
                .into_iter()
                .map(|s| (s, self.templates.default_instruction.clone()))
                .collect(),
        };
        gen.save(&self.run.prompts().join("gen.json"))?;
        let traces = self.traces()?;
        if !traces.is_empty() {
            let apo = PromptSetFile {
                label: self.config.apo_label.clone(),
                origin: SetOrigin::Mentor,
                prompts: traces.into_iter().map(|(s, t)| (s, t.final_prompt.text)).collect(),
            };
            apo.save(&self.run.prompts().join("apo.json"))?;
        }
        Ok(())
    }

    /// Scores a prompt-set file under `mentee` and saves the results.
    pub fn evaluate(&self, group_file: &Path, mentee: &str) -> Result<(ScoreTable, PathBuf), RunError> {
        let set = PromptSetFile::load(group_file)?;
        let group = PromptGroup::from_set(&set);
        let eval = self.eval_sets()?;
        let table = run_group(&self.apo(), &group, &LlmRole::mentee(mentee), &eval)?;
        let csv = save_results(&self.run.root, &table)?;
        Ok((table, csv))
    }

    pub fn report(&self) -> Result<Vec<PathBuf>, RunError> {
        Ok(emit_report(&self.run.root, &self.config.baseline_label)?)
    }
}

/// SHA-256 over every file under `root` (relative path and contents, in
/// sorted order). Two runs are byte-identical iff their digests match.
pub fn tree_digest(root: &Path) -> io::Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(root.join(&rel))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(rel.join("/"));
        }
    }
    Ok(())
}
