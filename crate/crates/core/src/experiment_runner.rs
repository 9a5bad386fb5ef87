//! Group-level scoring, delta tables and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apo_engine::{Apo, ApoError, PromptState};
use crate::corpus::{DialogueRecord, SectionId};
use crate::llm_gateway::LlmRole;
use crate::metrics::{aggregate_by_examples, format_delta, format_points, MetricName, MetricsError, ScoreCard};
use crate::run::write_atomic;

pub const OVERALL: &str = "Overall";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("prompt group {group:?} has no prompt for section {section}")]
    MissingPrompt { group: String, section: SectionId },
    #[error("section sets differ between {left:?} and {right:?}")]
    SectionMismatch { left: String, right: String },
    #[error("{0}")]
    Apo(#[from] ApoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("run is incomplete; missing: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error("duplicate group label {0:?}")]
    DuplicateLabel(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetOrigin {
    /// Baseline prompts nobody tuned.
    Generic,
    /// Prompts from any mentor, human or optimizer.
    #[default]
    Mentor,
}

/// On-disk prompt set: a label plus one instruction per section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSetFile {
    pub label: String,
    #[serde(default)]
    pub origin: SetOrigin,
    pub prompts: BTreeMap<SectionId, String>,
}

impl PromptSetFile {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let set: PromptSetFile = serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))?;
        if set.label.trim().is_empty() {
            return Err(io_err(path, "empty label"));
        }
        if let Some((s, _)) = set.prompts.iter().find(|(_, t)| t.trim().is_empty()) {
            return Err(io_err(path, format!("empty prompt for {s}")));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), RunnerError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("prompt set serializes");
        bytes.push(b'\n');
        write_atomic(path, &bytes).map_err(|e| io_err(path, e))
    }
}

/// A labelled set of prompts, one per section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptGroup {
    pub label: String,
    pub prompts: BTreeMap<SectionId, PromptState>,
}

impl PromptGroup {
    pub fn from_set(set: &PromptSetFile) -> Self {
        let prompts = set
            .prompts
            .iter()
            .map(|(s, text)| {
                let state = match set.origin {
                    SetOrigin::Generic => {
                        let mut p = PromptState::generic(s.clone(), text.clone());
                        p.mentor_label = Some(set.label.clone());
                        p
                    }
                    SetOrigin::Mentor => PromptState::human_mentor(s.clone(), text.clone(), &set.label),
                };
                (s.clone(), state)
            })
            .collect();
        Self {
            label: set.label.clone(),
            prompts,
        }
    }

    pub fn to_set(&self, origin: SetOrigin) -> PromptSetFile {
        PromptSetFile {
            label: self.label.clone(),
            origin,
            prompts: self.prompts.iter().map(|(s, p)| (s.clone(), p.text.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub group: String,
    pub mentee: String,
    pub per_section: BTreeMap<SectionId, ScoreCard>,
    pub overall: ScoreCard,
}

impl ScoreTable {
    /// Builds a table whose overall row is the example-weighted aggregate.
    pub fn new(group: String, mentee: String, per_section: BTreeMap<SectionId, ScoreCard>) -> Result<Self, RunnerError> {
        let cards: Vec<ScoreCard> = per_section.values().copied().collect();
        let overall = aggregate_by_examples(&cards)?;
        Ok(Self {
            group,
            mentee,
            per_section,
            overall,
        })
    }

    /// `section,R1,R2,RL,M,U-f` rows in ×100 points, then the overall row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section");
        for m in MetricName::ALL {
            out.push(',');
            out.push_str(m.label());
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, card: &ScoreCard| {
            out.push_str(&csv_field(name));
            for m in MetricName::ALL {
                out.push(',');
                out.push_str(&format_points(card.get(m)));
            }
            out.push('\n');
        };
        for (s, card) in &self.per_section {
            row(&mut out, s.as_str(), card);
        }
        row(&mut out, OVERALL, &self.overall);
        out
    }

    pub fn sections(&self) -> BTreeSet<&SectionId> {
        self.per_section.keys().collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Scores `group` on each section's evaluation records under `mentee`.
pub fn run_group(
    apo: &Apo<'_>,
    group: &PromptGroup,
    mentee: &LlmRole,
    eval: &BTreeMap<SectionId, Vec<DialogueRecord>>,
) -> Result<ScoreTable, RunnerError> {
    if let Some(section) = eval.keys().find(|s| !group.prompts.contains_key(*s)) {
        return Err(RunnerError::MissingPrompt {
            group: group.label.clone(),
            section: section.clone(),
        });
    }
    let sections: Vec<(&SectionId, &Vec<DialogueRecord>)> = eval.iter().collect();
    let cards = apo.gateway.exec().try_map(&sections, |(s, records)| {
        apo.validate(&group.prompts[*s], records, mentee).map(|c| ((*s).clone(), c))
    })?;
    ScoreTable::new(group.label.clone(), mentee.model.clone(), cards.into_iter().collect())
}

/// Signed increments over a baseline, in ×100 points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub baseline: String,
    pub metric: MetricName,
    /// Labels of the compared tables, in input order.
    pub labels: Vec<String>,
    /// Baseline score per section, in points.
    pub baseline_points: BTreeMap<SectionId, f64>,
    pub baseline_overall: f64,
    pub rows: BTreeMap<SectionId, BTreeMap<String, f64>>,
    pub overall: BTreeMap<String, f64>,
}

pub fn delta_table(baseline: &ScoreTable, others: &[ScoreTable], metric: MetricName) -> Result<DeltaTable, RunnerError> {
    let mut labels = Vec::with_capacity(others.len());
    for o in others {
        if o.sections() != baseline.sections() {
            return Err(RunnerError::SectionMismatch {
                left: baseline.group.clone(),
                right: o.group.clone(),
            });
        }
        if labels.contains(&o.group) {
            return Err(RunnerError::DuplicateLabel(o.group.clone()));
        }
        labels.push(o.group.clone());
    }
    let points = |v: f64| v * 100.0;
    let mut rows = BTreeMap::new();
    for (s, base) in &baseline.per_section {
        let row = others
            .iter()
            .map(|o| (o.group.clone(), points(o.per_section[s].get(metric) - base.get(metric))))
            .collect();
        rows.insert(s.clone(), row);
    }
    let overall = others
        .iter()
        .map(|o| (o.group.clone(), points(o.overall.get(metric) - baseline.overall.get(metric))))
        .collect();
    Ok(DeltaTable {
        baseline: baseline.group.clone(),
        metric,
        labels,
        baseline_points: baseline.per_section.iter().map(|(s, c)| (s.clone(), points(c.get(metric)))).collect(),
        baseline_overall: points(baseline.overall.get(metric)),
        rows,
        overall,
    })
}

impl DeltaTable {
    /// `section,<baseline>,<label>...` with the baseline in points and the
    /// other columns as signed deltas.
    pub fn to_csv(&self) -> String {
        let mut out = format!("section,{}", csv_field(&self.baseline));
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        let mut line = |name: &str, base: f64, deltas: &BTreeMap<String, f64>| {
            out.push_str(&csv_field(name));
            out.push(',');
            out.push_str(&format_points(base / 100.0));
            for l in &self.labels {
                out.push(',');
                out.push_str(&format_delta(deltas[l]));
            }
            out.push('\n');
        };
        for (s, deltas) in &self.rows {
            line(s.as_str(), self.baseline_points[s], deltas);
        }
        line(OVERALL, self.baseline_overall, &self.overall);
        out
    }
}

/// Filename-safe form of a group label or model id.
pub fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_') { c } else { '_' })
        .collect()
}

pub fn results_stem(group: &str, mentee: &str) -> String {
    format!("scores_{}_{}", file_token(group), file_token(mentee))
}

/// Writes `results/<stem>.json` (full precision) and `results/<stem>.csv`.
pub fn save_results(run_dir: &Path, table: &ScoreTable) -> Result<PathBuf, RunnerError> {
    let dir = run_dir.join("results");
    let stem = results_stem(&table.group, &table.mentee);
    let json = dir.join(format!("{stem}.json"));
    let mut bytes = serde_json::to_vec_pretty(table).expect("score table serializes");
    bytes.push(b'\n');
    write_atomic(&json, &bytes).map_err(|e| io_err(&json, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    write_atomic(&csv, table.to_csv().as_bytes()).map_err(|e| io_err(&csv, e))?;
    Ok(csv)
}

pub fn load_results(run_dir: &Path) -> Result<Vec<ScoreTable>, RunnerError> {
    let dir = run_dir.join("results");
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| io_err(p, e))
        })
        .collect()
}

/// Artifacts a run needs before a report can be written.
pub fn missing_artifacts(run_dir: &Path, baseline_label: &str) -> Vec<String> {
    let mut missing = Vec::new();
    for f in ["config.json", "dataset.json"] {
        if !run_dir.join(f).is_file() {
            missing.push(f.to_string());
        }
    }
    let nonempty = |d: &str| {
        fs::read_dir(run_dir.join(d))
            .map(|mut rd| rd.next().is_some())
            .unwrap_or(false)
    };
    for d in ["splits", "traces"] {
        if !nonempty(d) {
            missing.push(format!("{d}/"));
        }
    }
    let results = load_results(run_dir).unwrap_or_default();
    if results.is_empty() {
        missing.push("results/".into());
    } else if !results.iter().any(|t| t.group == baseline_label) {
        missing.push(format!("results/{}", results_stem(baseline_label, "<mentee>")));
    }
    missing
}

/// Writes score tables, delta tables, mentor-impact numbers and a Markdown
/// summary under `<run>/report/`. Output depends only on the saved results,
/// so re-emission is byte-identical.
pub fn emit_report(run_dir: &Path, baseline_label: &str) -> Result<Vec<PathBuf>, RunnerError> {
    let missing = missing_artifacts(run_dir, baseline_label);
    if !missing.is_empty() {
        return Err(RunnerError::MissingArtifacts(missing));
    }
    let tables = load_results(run_dir)?;
    let report = run_dir.join("report");
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), RunnerError> {
        let path = report.join(name);
        write_atomic(&path, body.as_bytes()).map_err(|e| io_err(&path, e))?;
        written.push(path);
        Ok(())
    };

    for t in &tables {
        put(format!("{}.csv", results_stem(&t.group, &t.mentee)), t.to_csv())?;
    }

    // mentee -> (baseline, others sorted by label)
    let mut by_mentee: BTreeMap<&str, (Option<&ScoreTable>, Vec<ScoreTable>)> = BTreeMap::new();
    for t in &tables {
        let entry = by_mentee.entry(&t.mentee).or_default();
        if t.group == baseline_label {
            entry.0 = Some(t);
        } else {
            entry.1.push(t.clone());
        }
    }
    for (_, others) in by_mentee.values_mut() {
        others.sort_by(|a, b| a.group.cmp(&b.group));
    }
    let all_labels: BTreeSet<String> = tables
        .iter()
        .filter(|t| t.group != baseline_label)
        .map(|t| t.group.clone())
        .collect();

    let mut deltas: BTreeMap<(&str, MetricName), DeltaTable> = BTreeMap::new();
    for (mentee, (base, others)) in &by_mentee {
        if let Some(base) = base {
            for m in MetricName::ALL {
                deltas.insert((mentee, m), delta_table(base, others, m)?);
            }
        }
    }

    for m in MetricName::ALL {
        let mut out = format!("mentee,section,{}", csv_field(baseline_label));
        for l in &all_labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for ((mentee, metric), table) in &deltas {
            if *metric != m {
                continue;
            }
            let mut row = |name: &str, base: f64, cells: &BTreeMap<String, f64>| {
                out.push_str(&format!("{},{},{}", csv_field(mentee), csv_field(name), format_points(base / 100.0)));
                for l in &all_labels {
                    out.push(',');
                    if let Some(d) = cells.get(l) {
                        out.push_str(&format_delta(*d));
                    }
                }
                out.push('\n');
            };
            for (s, cells) in &table.rows {
                row(s.as_str(), table.baseline_points[s], cells);
            }
            row(OVERALL, table.baseline_overall, &table.overall);
        }
        put(format!("deltas_{}.csv", file_token(m.label())), out)?;
    }

    let mut impact = String::from("mentee,mentor");
    for m in MetricName::ALL {
        impact.push(',');
        impact.push_str(m.label());
    }
    impact.push('\n');
    for (mentee, (base, others)) in &by_mentee {
        if base.is_none() {
            continue;
        }
        for o in others {
            impact.push_str(&format!("{},{}", csv_field(mentee), csv_field(&o.group)));
            for m in MetricName::ALL {
                impact.push(',');
                impact.push_str(&format_delta(deltas[&(*mentee, m)].overall[&o.group]));
            }
            impact.push('\n');
        }
    }
    put("mentor_impact.csv".into(), impact)?;

    put("summary.md".into(), summary_markdown(baseline_label, &tables, &by_mentee, &deltas))?;
    Ok(written)
}

type ByMentee<'a> = BTreeMap<&'a str, (Option<&'a ScoreTable>, Vec<ScoreTable>)>;

fn summary_markdown(
    baseline_label: &str,
    tables: &[ScoreTable],
    by_mentee: &ByMentee<'_>,
    deltas: &BTreeMap<(&str, MetricName), DeltaTable>,
) -> String {
    let mut md = String::from("# Run report\n\n");
    let sections: BTreeSet<&SectionId> = tables.iter().flat_map(|t| t.per_section.keys()).collect();
    let n = tables.first().map(|t| t.overall.n_examples).unwrap_or(0);
    let _ = writeln!(
        md,
        "{} section(s), {n} evaluation record(s) per group. Scores are ×100; overall rows are weighted by record count.\n",
        sections.len()
    );
    md.push_str("## Overall scores\n\n| Mentee | Group |");
    for m in MetricName::ALL {
        let _ = write!(md, " {} |", m.label());
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---:|".repeat(MetricName::ALL.len()));
    md.push('\n');
    for t in tables {
        let _ = write!(md, "| {} | {} |", t.mentee, t.group);
        for m in MetricName::ALL {
            let _ = write!(md, " {} |", format_points(t.overall.get(m)));
        }
        md.push('\n');
    }
    let _ = writeln!(md, "\n## Mentor impact (overall change vs {baseline_label})\n");
    md.push_str("| Mentee | Mentor |");
    for m in MetricName::ALL {
        let _ = write!(md, " {} |", m.label());
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---:|".repeat(MetricName::ALL.len()));
    md.push('\n');
    let mut any = false;
    for (mentee, (base, others)) in by_mentee {
        if base.is_none() {
            continue;
        }
        for o in others {
            any = true;
            let _ = write!(md, "| {mentee} | {} |", o.group);
            for m in MetricName::ALL {
                let _ = write!(md, " {} |", format_delta(deltas[&(*mentee, m)].overall[&o.group]));
            }
            md.push('\n');
        }
    }
    if !any {
        md.push_str("| - | - |");
        md.push_str(&" - |".repeat(MetricName::ALL.len()));
        md.push('\n');
    }
    md.push_str("\nPer-section tables: `scores_<group>_<mentee>.csv`; per-metric deltas: `deltas_<metric>.csv`; bar-chart data: `mentor_impact.csv`.\n");
    md
}
