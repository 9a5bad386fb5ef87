//! Per-section prompt optimization.
//!
//! Each training record drives one iteration: the mentee summarizes it under
//! the current prompt (forward), the critic explains the gap to the
//! reference and proposes suggestions (gradient), and the critic rewrites
//! the prompt from those suggestions (update). `j` iterations make an epoch;
//! `k` epochs make a run. Every prompt produced along the way is kept in the
//! lineage.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DialogueRecord, SectionId, SectionSplit};
use crate::llm_gateway::{
    ChatMessage, ChatRequest, Gateway, GatewayError, LlmRole, DEFAULT_SELF_CONSISTENCY_RUNS, DEFAULT_TEMPERATURE,
};
use crate::metrics::{aggregate, MetricName, MetricSuite, MetricsError, ScoreCard};
use crate::prompt_kit::{parse_structured, ParseError, ParseMode, RenderError, ReplyKind, TemplateSet, REPAIR_NUDGE};
use crate::run::write_atomic;

pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_EPOCHS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    Generic,
    HumanMentor,
    ApoIteration,
    HumanPostApo,
}

/// One prompt version. `parent` holds the id of the state it was derived
/// from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptState {
    pub id: String,
    pub section: SectionId,
    pub text: String,
    pub origin: PromptOrigin,
    pub parent: Option<String>,
    pub epoch: u32,
    pub iteration: u32,
    pub mentor_label: Option<String>,
}

impl PromptState {
    /// The generic starting prompt for a section.
    pub fn generic(section: SectionId, text: impl Into<String>) -> Self {
        Self {
            id: format!("{}:0:0", section.slug()),
            section,
            text: text.into(),
            origin: PromptOrigin::Generic,
            parent: None,
            epoch: 0,
            iteration: 0,
            mentor_label: None,
        }
    }

    /// A prompt written by a human mentor before any optimization.
    pub fn human_mentor(section: SectionId, text: impl Into<String>, label: &str) -> Self {
        Self {
            id: format!("{}:mentor:{label}", section.slug()),
            section,
            text: text.into(),
            origin: PromptOrigin::HumanMentor,
            parent: None,
            epoch: 0,
            iteration: 0,
            mentor_label: Some(label.to_string()),
        }
    }

    /// Version `version` of a human edit of an optimized prompt.
    pub fn human_post_apo(parent: &PromptState, text: impl Into<String>, version: u32, label: Option<String>) -> Self {
        Self {
            id: format!("{}:human:v{version}", parent.section.slug()),
            section: parent.section.clone(),
            text: text.into(),
            origin: PromptOrigin::HumanPostApo,
            parent: Some(parent.id.clone()),
            epoch: parent.epoch,
            iteration: parent.iteration + version,
            mentor_label: label,
        }
    }

    fn apo_child(parent: &PromptState, text: String, epoch: u32) -> Self {
        let iteration = parent.iteration + 1;
        Self {
            id: format!("{}:{epoch}:{iteration}", parent.section.slug()),
            section: parent.section.clone(),
            text,
            origin: PromptOrigin::ApoIteration,
            parent: Some(parent.id.clone()),
            epoch,
            iteration,
            mentor_label: None,
        }
    }
}

/// Checks the structural laws of a lineage chain: a parentless root, then
/// optimizer states each derived from its predecessor with strictly
/// increasing `(epoch, iteration)`.
pub fn check_lineage(lineage: &[PromptState]) -> Result<(), String> {
    let root = lineage.first().ok_or("empty lineage")?;
    if root.parent.is_some() {
        return Err(format!("root {} has a parent", root.id));
    }
    if !matches!(root.origin, PromptOrigin::Generic | PromptOrigin::HumanMentor) {
        return Err(format!("root {} has origin {:?}", root.id, root.origin));
    }
    for pair in lineage.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.origin != PromptOrigin::ApoIteration {
            return Err(format!("{} is not an optimizer state", next.id));
        }
        if next.parent.as_deref() != Some(prev.id.as_str()) {
            return Err(format!("{} does not point at {}", next.id, prev.id));
        }
        if next.iteration != prev.iteration + 1 || next.epoch < prev.epoch {
            return Err(format!("{} does not advance past {}", next.id, prev.id));
        }
        if next.section != root.section {
            return Err(format!("{} changes section", next.id));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientFeedback {
    pub reasons: String,
    pub suggestions: String,
    pub source_record: String,
    /// Id of the lineage state that was critiqued.
    pub prompt_before: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSelection {
    /// The prompt after the last epoch.
    #[default]
    Last,
    /// The end-of-epoch prompt with the best validation score.
    BestValidation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chaining {
    /// Iteration `c` critiques training record `c` and updates from it.
    #[default]
    PerInstance,
    /// Each iteration critiques the whole batch, then updates once.
    AggregateThenUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateInput {
    /// Only the suggestions gathered in the current iteration.
    #[default]
    Newest,
    /// Every suggestion gathered so far in the current epoch.
    Accumulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub epochs: usize,
    pub mentee: LlmRole,
    pub critic: LlmRole,
    #[serde(default)]
    pub final_selection: FinalSelection,
    #[serde(default)]
    pub chaining: Chaining,
    #[serde(default)]
    pub update_input: UpdateInput,
    /// Metric used to rank epochs under [`FinalSelection::BestValidation`].
    #[serde(default = "default_selection_metric")]
    pub selection_metric: MetricName,
}

fn default_selection_metric() -> MetricName {
    MetricName::R1
}

impl OptimizerConfig {
    pub fn new(mentee: LlmRole, critic: LlmRole) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            epochs: DEFAULT_EPOCHS,
            mentee,
            critic,
            final_selection: FinalSelection::default(),
            chaining: Chaining::default(),
            update_input: UpdateInput::default(),
            selection_metric: default_selection_metric(),
        }
    }

    pub fn validate(&self, batch_len: usize) -> Result<(), ApoError> {
        if self.iterations == 0 {
            return Err(ApoError::Config("iterations must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(ApoError::Config("epochs must be at least 1".into()));
        }
        if batch_len == 0 {
            return Err(ApoError::Config("training batch is empty".into()));
        }
        if self.chaining == Chaining::PerInstance && self.iterations > batch_len {
            return Err(ApoError::Config(format!(
                "iterations ({}) exceed the training batch ({batch_len}) under per-instance chaining",
                self.iterations
            )));
        }
        Ok(())
    }
}

/// Sampling and parsing knobs shared by every call the engine makes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub self_consistency_runs: usize,
    /// Also use self-consistency for training-time summaries.
    pub train_self_consistency: bool,
    pub parse_mode: ParseMode,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            self_consistency_runs: DEFAULT_SELF_CONSISTENCY_RUNS,
            train_self_consistency: false,
            parse_mode: ParseMode::Lenient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forward,
    Gradient,
    Update,
    Validation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Forward => "forward",
            Stage::Gradient => "gradient",
            Stage::Update => "update",
            Stage::Validation => "validation",
        })
    }
}

/// A reply that needed the repair turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairEvent {
    pub stage: Stage,
    pub prompt_id: String,
    pub record_id: Option<String>,
    pub error: String,
}

fn on_record(r: &Option<String>) -> String {
    r.as_ref().map(|id| format!(" on record {id}")).unwrap_or_default()
}

#[derive(Debug, Error)]
pub enum ApoError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("optimizer config: {0}")]
    Config(String),
    #[error("rendering the {stage} prompt: {source}")]
    Render { stage: Stage, source: RenderError },
    #[error("{stage} call{} failed: {source}", on_record(.record))]
    Gateway {
        stage: Stage,
        record: Option<String>,
        #[source]
        source: GatewayError,
    },
    #[error("{stage} reply{} unusable after repair: {source}", on_record(.record))]
    Parse {
        stage: Stage,
        record: Option<String>,
        raw: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("section {section} aborted at epoch {epoch}, iteration {iteration}{}: {source}",
        .partial.as_ref().map(|p| format!(" (partial trace {})", p.display())).unwrap_or_default())]
    Aborted {
        section: SectionId,
        epoch: u32,
        iteration: u32,
        partial: Option<PathBuf>,
        #[source]
        source: Box<ApoError>,
    },
}

impl ApoError {
    /// Raw model output attached to a parse failure, if any.
    pub fn raw_output(&self) -> Option<&str> {
        match self {
            ApoError::Parse { raw, .. } => Some(raw),
            ApoError::Aborted { source, .. } => source.raw_output(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochValidation {
    pub epoch: u32,
    pub prompt_id: String,
    pub score: ScoreCard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub section: SectionId,
    pub config: OptimizerConfig,
    pub generation: GenerationSettings,
    pub template_checksums: BTreeMap<String, String>,
    pub train_ids: Vec<String>,
    pub eval_ids: Vec<String>,
    pub lineage: Vec<PromptState>,
    pub gradients: Vec<GradientFeedback>,
    /// Batch score after each iteration, aligned with `lineage[1..]`.
    pub per_iteration_scores: Vec<ScoreCard>,
    pub epoch_validations: Vec<EpochValidation>,
    pub repairs: Vec<RepairEvent>,
    pub final_prompt: PromptState,
    pub validation: ScoreCard,
}

impl OptimizationTrace {
    /// Checks the trace-level invariants.
    pub fn check(&self) -> Result<(), String> {
        check_lineage(&self.lineage)?;
        let expected = 1 + self.config.epochs * self.config.iterations;
        if self.lineage.len() != expected {
            return Err(format!("lineage has {} states, expected {expected}", self.lineage.len()));
        }
        if !self.lineage.contains(&self.final_prompt) {
            return Err(format!("final prompt {} is not in the lineage", self.final_prompt.id));
        }
        let ids: HashSet<&str> = self.lineage.iter().map(|p| p.id.as_str()).collect();
        if let Some(g) = self.gradients.iter().find(|g| !ids.contains(g.prompt_before.as_str())) {
            return Err(format!("gradient refers to unknown prompt {}", g.prompt_before));
        }
        if self.per_iteration_scores.len() + 1 != self.lineage.len() {
            return Err("per-iteration scores do not match the lineage".into());
        }
        let train: HashSet<&str> = self.train_ids.iter().map(String::as_str).collect();
        if self.eval_ids.iter().any(|id| train.contains(id.as_str())) {
            return Err("evaluation overlaps the training batch".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ApoError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))
    }
}

/// What is left on disk when an optimization aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialTrace {
    pub section: SectionId,
    pub epoch: u32,
    pub iteration: u32,
    pub error: String,
    pub raw_output: Option<String>,
    pub lineage: Vec<PromptState>,
    pub gradients: Vec<GradientFeedback>,
    pub per_iteration_scores: Vec<ScoreCard>,
    pub epoch_validations: Vec<EpochValidation>,
    pub repairs: Vec<RepairEvent>,
}

pub fn trace_path(dir: &Path, section: &SectionId) -> PathBuf {
    dir.join(format!("{}.json", section.slug()))
}

pub fn partial_trace_path(dir: &Path, section: &SectionId) -> PathBuf {
    dir.join(format!("{}.partial.json", section.slug()))
}

fn io_err(path: &Path, e: impl fmt::Display) -> ApoError {
    ApoError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ApoError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("trace serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

#[derive(Default)]
struct Progress {
    lineage: Vec<PromptState>,
    gradients: Vec<GradientFeedback>,
    scores: Vec<ScoreCard>,
    epoch_validations: Vec<EpochValidation>,
    repairs: Vec<RepairEvent>,
    epoch: u32,
    iteration: u32,
}

/// The optimizer, bound to a gateway, templates and metrics.
pub struct Apo<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub metrics: &'a MetricSuite,
    pub settings: GenerationSettings,
}

impl<'a> Apo<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, metrics: &'a MetricSuite) -> Self {
        Self {
            gateway,
            templates,
            metrics,
            settings: GenerationSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: GenerationSettings) -> Self {
        self.settings = settings;
        self
    }

    fn request(&self, model: &str, prompt: String) -> ChatRequest {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: self.settings.temperature,
            sample_index: 0,
        }
    }

    /// Sends `request` (self-consistently when `runs > 1`) and parses the
    /// reply, spending one repair turn if the first reply does not parse.
    #[allow(clippy::too_many_arguments)]
    fn call_structured(
        &self,
        request: ChatRequest,
        runs: usize,
        kind: ReplyKind,
        stage: Stage,
        prompt_id: &str,
        record: Option<&str>,
        repairs: &mut Vec<RepairEvent>,
    ) -> Result<crate::prompt_kit::StructuredReply, ApoError> {
        let gw_err = |source| ApoError::Gateway {
            stage,
            record: record.map(str::to_string),
            source,
        };
        let first = if runs > 1 {
            self.gateway.complete_self_consistent(&request, runs).map_err(gw_err)?.0
        } else {
            self.gateway.complete(&request).map_err(gw_err)?
        };
        let err = match parse_structured(&first.content, kind, self.settings.parse_mode) {
            Ok(reply) => return Ok(reply),
            Err(e) => e,
        };
        log::warn!(
            "{stage} reply for {prompt_id}{} did not parse ({err}); sending repair turn",
            record.map(|r| format!(" / {r}")).unwrap_or_default()
        );
        repairs.push(RepairEvent {
            stage,
            prompt_id: prompt_id.to_string(),
            record_id: record.map(str::to_string),
            error: err.to_string(),
        });
        let mut repair = request;
        repair.messages.push(ChatMessage::assistant(first.content));
        repair.messages.push(ChatMessage::user(REPAIR_NUDGE));
        let second = self.gateway.complete(&repair).map_err(gw_err)?;
        parse_structured(&second.content, kind, self.settings.parse_mode).map_err(|source| ApoError::Parse {
            stage,
            record: record.map(str::to_string),
            raw: second.content,
            source,
        })
    }

    fn summarize(
        &self,
        prompt: &PromptState,
        record: &DialogueRecord,
        model: &str,
        runs: usize,
        stage: Stage,
        repairs: &mut Vec<RepairEvent>,
    ) -> Result<String, ApoError> {
        if record.section != prompt.section {
            return Err(ApoError::Precondition(format!(
                "record {} belongs to {}, prompt {} to {}",
                record.id, record.section, prompt.id, prompt.section
            )));
        }
        let text = self
            .templates
            .render_forward(&prompt.text, &prompt.section, &record.dialogue)
            .map_err(|source| ApoError::Render { stage, source })?;
        let reply = self.call_structured(
            self.request(model, text),
            runs,
            ReplyKind::Summary,
            stage,
            &prompt.id,
            Some(&record.id),
            repairs,
        )?;
        Ok(reply.field("summary").to_string())
    }

    /// The mentee's summary of `record` under `prompt` (single draw).
    pub fn forward(&self, prompt: &PromptState, record: &DialogueRecord, mentee: &LlmRole) -> Result<String, ApoError> {
        self.summarize(prompt, record, &mentee.model, 1, Stage::Forward, &mut Vec::new())
    }

    fn train_runs(&self) -> usize {
        if self.settings.train_self_consistency {
            self.settings.self_consistency_runs
        } else {
            1
        }
    }

    /// Critiques one generated summary against the record's reference.
    pub fn gradient(
        &self,
        prompt: &PromptState,
        record: &DialogueRecord,
        generated: &str,
        critic: &LlmRole,
        repairs: &mut Vec<RepairEvent>,
    ) -> Result<GradientFeedback, ApoError> {
        if generated.trim().is_empty() {
            return Err(ApoError::Precondition(format!(
                "empty generated summary for record {}",
                record.id
            )));
        }
        let text = self
            .templates
            .render_gradient(
                &prompt.text,
                &prompt.section,
                &record.dialogue,
                generated,
                &record.reference_summary,
            )
            .map_err(|source| ApoError::Render {
                stage: Stage::Gradient,
                source,
            })?;
        let reply = self.call_structured(
            self.request(&critic.model, text),
            1,
            ReplyKind::Gradient,
            Stage::Gradient,
            &prompt.id,
            Some(&record.id),
            repairs,
        )?;
        Ok(GradientFeedback {
            reasons: reply.field("reasons").to_string(),
            suggestions: reply.field("suggestions").to_string(),
            source_record: record.id.clone(),
            prompt_before: prompt.id.clone(),
        })
    }

    /// Rewrites `prompt` from `suggestions` into its child state.
    pub fn update<S: AsRef<str>>(
        &self,
        prompt: &PromptState,
        suggestions: &[S],
        epoch: u32,
        critic: &LlmRole,
        repairs: &mut Vec<RepairEvent>,
    ) -> Result<PromptState, ApoError> {
        let text = self
            .templates
            .render_update(&prompt.text, suggestions)
            .map_err(|source| ApoError::Render {
                stage: Stage::Update,
                source,
            })?;
        let reply = self.call_structured(
            self.request(&critic.model, text),
            1,
            ReplyKind::Update,
            Stage::Update,
            &prompt.id,
            None,
            repairs,
        )?;
        Ok(PromptState::apo_child(
            prompt,
            reply.field("new instruction").to_string(),
            epoch.max(prompt.epoch),
        ))
    }

    /// Gradient then update from that single suggestion. The child stays in
    /// the parent's epoch (epoch 1 for a root prompt).
    pub fn backward(
        &self,
        prompt: &PromptState,
        record: &DialogueRecord,
        generated: &str,
        critic: &LlmRole,
    ) -> Result<(GradientFeedback, PromptState), ApoError> {
        let mut repairs = Vec::new();
        let g = self.gradient(prompt, record, generated, critic, &mut repairs)?;
        let child = self.update(prompt, &[g.suggestions.as_str()], prompt.epoch.max(1), critic, &mut repairs)?;
        Ok((g, child))
    }

    /// Scores `prompt` on `evaluation` using self-consistent generation.
    pub fn validate(
        &self,
        prompt: &PromptState,
        evaluation: &[DialogueRecord],
        mentee: &LlmRole,
    ) -> Result<ScoreCard, ApoError> {
        self.validate_logged(prompt, evaluation, mentee, &mut Vec::new()).map(|(card, _)| card)
    }

    /// As [`Apo::validate`], also returning each record's summary and
    /// appending repair events in record order.
    pub fn validate_logged(
        &self,
        prompt: &PromptState,
        evaluation: &[DialogueRecord],
        mentee: &LlmRole,
        repairs: &mut Vec<RepairEvent>,
    ) -> Result<(ScoreCard, Vec<String>), ApoError> {
        if evaluation.is_empty() {
            return Err(ApoError::Metrics(MetricsError::EmptyAggregate));
        }
        if let Some(r) = evaluation.iter().find(|r| r.section != prompt.section) {
            return Err(ApoError::Precondition(format!(
                "record {} belongs to {}, prompt {} to {}",
                r.id, r.section, prompt.id, prompt.section
            )));
        }
        let runs = self.settings.self_consistency_runs.max(1);
        let outcomes = self.gateway.exec().try_map(evaluation, |record| {
            let mut local = Vec::new();
            let summary = self.summarize(prompt, record, &mentee.model, runs, Stage::Validation, &mut local)?;
            let card = self.metrics.score(&summary, &record.reference_summary);
            Ok::<_, ApoError>((summary, card, local))
        })?;
        let mut cards = Vec::with_capacity(outcomes.len());
        let mut summaries = Vec::with_capacity(outcomes.len());
        for (summary, card, local) in outcomes {
            cards.push(card);
            summaries.push(summary);
            repairs.extend(local);
        }
        Ok((aggregate(&cards, None)?, summaries))
    }

    fn score_batch(
        &self,
        prompt: &PromptState,
        batch: &[DialogueRecord],
        mentee: &LlmRole,
        repairs: &mut Vec<RepairEvent>,
    ) -> Result<ScoreCard, ApoError> {
        let mut cards = Vec::with_capacity(batch.len());
        for record in batch {
            let summary = self.summarize(prompt, record, &mentee.model, self.train_runs(), Stage::Forward, repairs)?;
            cards.push(self.metrics.score(&summary, &record.reference_summary));
        }
        Ok(aggregate(&cards, None)?)
    }

    /// Runs the full loop for one section.
    ///
    /// With `trace_dir` set, the finished trace is written to
    /// `<dir>/<section>.json`; on failure whatever was produced goes to
    /// `<dir>/<section>.partial.json` before the error is returned.
    pub fn optimize_section(
        &self,
        split: &SectionSplit,
        p0: &PromptState,
        cfg: &OptimizerConfig,
        trace_dir: Option<&Path>,
    ) -> Result<OptimizationTrace, ApoError> {
        if p0.section != split.section {
            return Err(ApoError::Precondition(format!(
                "prompt {} is for {}, split is for {}",
                p0.id, p0.section, split.section
            )));
        }
        cfg.validate(split.training.len())?;

        let train_ids: HashSet<&str> = split.training.iter().map(|r| r.id.as_str()).collect();
        let evaluation: Vec<DialogueRecord> = split
            .evaluation
            .iter()
            .filter(|r| !train_ids.contains(r.id.as_str()))
            .cloned()
            .collect();

        let mut progress = Progress {
            lineage: vec![p0.clone()],
            ..Progress::default()
        };
        match self.run_loop(split, &evaluation, cfg, &mut progress) {
            Ok((final_prompt, validation)) => {
                let trace = OptimizationTrace {
                    section: split.section.clone(),
                    config: cfg.clone(),
                    generation: self.settings,
                    template_checksums: self.templates.checksums(),
                    train_ids: split.training.iter().map(|r| r.id.clone()).collect(),
                    eval_ids: evaluation.iter().map(|r| r.id.clone()).collect(),
                    lineage: progress.lineage,
                    gradients: progress.gradients,
                    per_iteration_scores: progress.scores,
                    epoch_validations: progress.epoch_validations,
                    repairs: progress.repairs,
                    final_prompt,
                    validation,
                };
                if let Some(dir) = trace_dir {
                    write_json(&trace_path(dir, &split.section), &trace)?;
                    let stale = partial_trace_path(dir, &split.section);
                    if stale.exists() {
                        fs::remove_file(&stale).map_err(|e| io_err(&stale, e))?;
                    }
                }
                Ok(trace)
            }
            Err(err) => {
                let partial = match trace_dir {
                    Some(dir) => {
                        let path = partial_trace_path(dir, &split.section);
                        let doc = PartialTrace {
                            section: split.section.clone(),
                            epoch: progress.epoch,
                            iteration: progress.iteration,
                            error: err.to_string(),
                            raw_output: err.raw_output().map(str::to_string),
                            lineage: progress.lineage,
                            gradients: progress.gradients,
                            per_iteration_scores: progress.scores,
                            epoch_validations: progress.epoch_validations,
                            repairs: progress.repairs,
                        };
                        write_json(&path, &doc)?;
                        Some(path)
                    }
                    None => None,
                };
                Err(ApoError::Aborted {
                    section: split.section.clone(),
                    epoch: progress.epoch,
                    iteration: progress.iteration,
                    partial,
                    source: Box::new(err),
                })
            }
        }
    }

    fn run_loop(
        &self,
        split: &SectionSplit,
        evaluation: &[DialogueRecord],
        cfg: &OptimizerConfig,
        p: &mut Progress,
    ) -> Result<(PromptState, ScoreCard), ApoError> {
        let batch = &split.training;
        let mut epoch_ends = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs as u32 {
            p.epoch = epoch;
            let mut epoch_suggestions: Vec<String> = Vec::new();
            for c in 0..cfg.iterations {
                p.iteration = (epoch - 1) * cfg.iterations as u32 + c as u32 + 1;
                let current = p.lineage.last().expect("lineage has a root").clone();
                let records: &[DialogueRecord] = match cfg.chaining {
                    Chaining::PerInstance => std::slice::from_ref(&batch[c % batch.len()]),
                    Chaining::AggregateThenUpdate => batch,
                };
                let mut newest = Vec::with_capacity(records.len());
                for record in records {
                    let generated = self.summarize(
                        &current,
                        record,
                        &cfg.mentee.model,
                        self.train_runs(),
                        Stage::Forward,
                        &mut p.repairs,
                    )?;
                    let g = self.gradient(&current, record, &generated, &cfg.critic, &mut p.repairs)?;
                    newest.push(g.suggestions.clone());
                    p.gradients.push(g);
                }
                epoch_suggestions.extend(newest.iter().cloned());
                let suggestions = match cfg.update_input {
                    UpdateInput::Newest => &newest,
                    UpdateInput::Accumulated => &epoch_suggestions,
                };
                let child = self.update(&current, suggestions, epoch, &cfg.critic, &mut p.repairs)?;
                log::debug!("{}: {} -> {}", split.section, current.id, child.id);
                p.lineage.push(child);
                let child = p.lineage.last().expect("just pushed").clone();
                let card = self.score_batch(&child, batch, &cfg.mentee, &mut p.repairs)?;
                p.scores.push(card);
            }
            epoch_ends.push(p.lineage.last().expect("lineage has a root").clone());
        }

        match cfg.final_selection {
            FinalSelection::Last => {
                let last = epoch_ends.pop().expect("at least one epoch");
                let (card, _) = self.validate_logged(&last, evaluation, &cfg.mentee, &mut p.repairs)?;
                Ok((last, card))
            }
            FinalSelection::BestValidation => {
                let mut best: Option<(usize, f64)> = None;
                for (i, prompt) in epoch_ends.iter().enumerate() {
                    let (card, _) = self.validate_logged(prompt, evaluation, &cfg.mentee, &mut p.repairs)?;
                    let value = card.get(cfg.selection_metric);
                    if best.is_none_or(|(_, b)| value > b) {
                        best = Some((i, value));
                    }
                    p.epoch_validations.push(EpochValidation {
                        epoch: prompt.epoch,
                        prompt_id: prompt.id.clone(),
                        score: card,
                    });
                }
                let (i, _) = best.expect("at least one epoch");
                Ok((epoch_ends[i].clone(), p.epoch_validations[i].score))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{MockBackend, MockScript, ResponseCache};
    use crate::metrics::ConceptLexicon;
    use std::sync::Arc;

    fn sec() -> SectionId {
        SectionId::parse("CC").unwrap()
    }

    fn rec(id: &str, dialogue: &str, reference: &str) -> DialogueRecord {
        DialogueRecord {
            id: id.into(),
            section: sec(),
            dialogue: dialogue.into(),
            reference_summary: reference.into(),
        }
    }

    fn happy_script() -> MockScript {
        MockScript::default()
            .with_rule(&["Current AI summary:"], r#"{"reasons":"too verbose","suggestions":"be concise"}"#)
            .with_rule(
                &["Suggestions from summary [1]"],
                r#"{"final suggestion":"be concise","new instruction":"Summarize concisely. v{{digest8}}"}"#,
            )
            .with_rule(&["Output your summary"], r#"{"summary":"chest pain"}"#)
    }

    fn fixture(script: MockScript) -> (Arc<MockBackend>, Gateway, TemplateSet, MetricSuite) {
        let backend = Arc::new(MockBackend::new(script));
        let gw = Gateway::new(backend.clone(), ResponseCache::memory());
        (backend, gw, TemplateSet::bundled(), MetricSuite::new(ConceptLexicon::from_pairs([("C1", "chest pain")]).unwrap()))
    }

    fn split(n_train: usize, n_eval: usize) -> SectionSplit {
        SectionSplit {
            section: sec(),
            training: (0..n_train).map(|i| rec(&format!("t{i}"), &format!("dialogue t{i}"), "chest pain")).collect(),
            evaluation: (0..n_eval).map(|i| rec(&format!("e{i}"), &format!("dialogue e{i}"), "chest pain")).collect(),
            seed: 1,
        }
    }

    fn cfg(j: usize, k: usize) -> OptimizerConfig {
        let mut c = OptimizerConfig::new(LlmRole::mentee("mentee"), LlmRole::critic("critic"));
        c.iterations = j;
        c.epochs = k;
        c
    }

    #[test]
    fn forward_returns_summary_and_checks_section() {
        let (_, gw, t, m) = fixture(happy_script());
        let apo = Apo::new(&gw, &t, &m);
        let p0 = PromptState::generic(sec(), "Summarize.");
        let r = rec("1", "Doctor: hi", "x");
        assert_eq!(apo.forward(&p0, &r, &LlmRole::mentee("m")).unwrap(), "chest pain");
        let mut other = r.clone();
        other.section = SectionId::parse("GENHX").unwrap();
        assert!(matches!(apo.forward(&p0, &other, &LlmRole::mentee("m")), Err(ApoError::Precondition(_))));
    }

    #[test]
    fn repair_turn_recovers() {
        let script = MockScript::default()
            .with_rule(&[REPAIR_NUDGE], r#"{"summary":"S2"}"#)
            .with_rule(&["Output your summary"], "I cannot comply.");
        let (backend, gw, t, m) = fixture(script);
        let apo = Apo::new(&gw, &t, &m);
        let p0 = PromptState::generic(sec(), "Summarize.");
        let mut repairs = Vec::new();
        let s = apo
            .summarize(&p0, &rec("1", "d", "x"), "m", 1, Stage::Forward, &mut repairs)
            .unwrap();
        assert_eq!(s, "S2");
        assert_eq!(repairs.len(), 1);
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn unrepairable_reply_carries_raw_output() {
        let script = MockScript::default().with_rule(&["Output your summary"], "still prose");
        let (_, gw, t, m) = fixture(script);
        let apo = Apo::new(&gw, &t, &m);
        let p0 = PromptState::generic(sec(), "Summarize.");
        let err = apo.forward(&p0, &rec("1", "d", "x"), &LlmRole::mentee("m")).unwrap_err();
        assert_eq!(err.raw_output(), Some("still prose"));
    }

    #[test]
    fn backward_builds_child() {
        let script = MockScript::default()
            .with_rule(&["Current AI summary:"], r#"{"reasons":"too verbose","suggestions":"be concise"}"#)
            .with_rule(
                &["Suggestions from summary [1]"],
                r#"{"final suggestion":"be concise","new instruction":"Summarize concisely."}"#,
            );
        let (_, gw, t, m) = fixture(script);
        let apo = Apo::new(&gw, &t, &m);
        let p0 = PromptState::generic(sec(), "Summarize.");
        let (g, child) = apo.backward(&p0, &rec("r1", "d", "x"), "long text", &LlmRole::critic("c")).unwrap();
        assert_eq!((g.reasons.as_str(), g.suggestions.as_str()), ("too verbose", "be concise"));
        assert_eq!(g.prompt_before, p0.id);
        assert_eq!(child.text, "Summarize concisely.");
        assert_eq!(child.parent.as_deref(), Some(p0.id.as_str()));
        assert_eq!(child.iteration, p0.iteration + 1);
        assert_eq!(child.origin, PromptOrigin::ApoIteration);
    }

    #[test]
    fn gradient_missing_key_is_schema_error() {
        let script = MockScript::default().with_rule(&["Current AI summary:"], r#"{"reasons":"r"}"#);
        let (_, gw, t, m) = fixture(script);
        let apo = Apo::new(&gw, &t, &m);
        let p0 = PromptState::generic(sec(), "Summarize.");
        match apo.backward(&p0, &rec("r1", "d", "x"), "gen", &LlmRole::critic("c")) {
            Err(ApoError::Parse {
                source: ParseError::MissingKey(k),
                ..
            }) => assert_eq!(k, "suggestions"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lineage_lengths() {
        for (j, k) in [(2, 1), (5, 3)] {
            let (_, gw, t, m) = fixture(happy_script());
            let apo = Apo::new(&gw, &t, &m);
            let p0 = PromptState::generic(sec(), "Summarize.");
            let trace = apo.optimize_section(&split(5, 3), &p0, &cfg(j, k), None).unwrap();
            assert_eq!(trace.lineage.len(), 1 + j * k);
            trace.check().unwrap();
        }
    }

    #[test]
    fn per_instance_requires_enough_records() {
        let (_, gw, t, m) = fixture(happy_script());
        let apo = Apo::new(&gw, &t, &m);
        let p0 = PromptState::generic(sec(), "Summarize.");
        assert!(matches!(
            apo.optimize_section(&split(2, 3), &p0, &cfg(3, 1), None),
            Err(ApoError::Config(_))
        ));
        let mut agg = cfg(3, 1);
        agg.chaining = Chaining::AggregateThenUpdate;
        let trace = apo.optimize_section(&split(2, 3), &p0, &agg, None).unwrap();
        assert_eq!(trace.gradients.len(), 6);
        trace.check().unwrap();
    }

    #[test]
    fn validate_mean_and_empty() {
        let script = MockScript::default()
            .with_rule(&["dialogue one"], r#"{"summary":"a b c d e"}"#)
            .with_rule(&["dialogue two"], r#"{"summary":"a b c d e"}"#);
        let (_, gw, t, m) = fixture(script);
        let apo = Apo::new(&gw, &t, &m);
        let p = PromptState::generic(sec(), "Summarize.");
        // R1 = 0.2 and 0.4 against five-token candidates.
        let eval = vec![rec("1", "dialogue one", "a x y z w"), rec("2", "dialogue two", "a b x y z")];
        let card = apo.validate(&p, &eval, &LlmRole::mentee("m")).unwrap();
        assert!((card.rouge1.f1 - 0.3).abs() < 1e-12);
        assert!(apo.validate(&p, &[], &LlmRole::mentee("m")).is_err());
        let same = vec![rec("3", "dialogue one", "a b c d e")];
        let card = apo.validate(&p, &same, &LlmRole::mentee("m")).unwrap();
        assert_eq!((card.rouge1.f1, card.rouge2.f1, card.rouge_l.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn training_records_never_validated() {
        let (_, gw, t, m) = fixture(happy_script());
        let apo = Apo::new(&gw, &t, &m);
        let mut s = split(5, 3);
        s.evaluation.extend(s.training.clone());
        let p0 = PromptState::generic(sec(), "Summarize.");
        let trace = apo.optimize_section(&s, &p0, &cfg(2, 1), None).unwrap();
        assert_eq!(trace.eval_ids, vec!["e0", "e1", "e2"]);
        assert_eq!(trace.validation.n_examples, 3);
    }

    #[test]
    fn check_lineage_rejects_broken_chains() {
        let p0 = PromptState::generic(sec(), "a");
        let c1 = PromptState::apo_child(&p0, "b".into(), 1);
        let c2 = PromptState::apo_child(&c1, "c".into(), 1);
        assert!(check_lineage(&[p0.clone(), c1.clone(), c2.clone()]).is_ok());
        assert!(check_lineage(&[p0.clone(), c2.clone()]).is_err());
        assert!(check_lineage(std::slice::from_ref(&c1)).is_err());
        assert!(check_lineage(&[]).is_err());
    }
}
