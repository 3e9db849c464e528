//! Experiment orchestration: the TOML config, resumable pipeline stages,
//! per-run metrics, significance testing and reports.
//!
//! A run directory holds everything needed to rebuild the report:
//!
//! ```text
//! runs/<name>/
//!   config.json  manifest.json  report.json  report.txt
//!   corpus/samples.jsonl
//!   augment/clean.jsonl  augment/run_<r>.jsonl  augment/composed/<C>_run<r>.jsonl
//!   models/<C>_run<r>.smgm
//!   predictions/<C>_run<r>.jsonl  predictions/zero_shot.jsonl
//!   metrics/<C>_run<r>.json  metrics/zero_shot.json
//! ```
//!
//! Every artifact is written atomically, and a stage unit whose artifact
//! already exists is skipped, so an interrupted run resumes where it
//! stopped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{
    augment_run, compose_input, best_caption, AugmentError, AugmentSettings, AugmentationRecord, CleanMap,
    ComposeSettings, ComposedInput, Condition, RefusalDetector, Strategy, ValidityTable,
};
use crate::classifier::{
    featurize, parse_zero_shot, train, FeatureSpec, FeatureVector, Model, PredictionSet, TrainConfig, TrainExample,
};
use crate::datasets::{holdout_dev, label_space as dataset_label_space, read_jsonl, DatasetId, Sample, Split};
use crate::label::{Label, LabelSet};
use crate::llm_client::{
    Cache, ClientStats, CompletionRequest, HttpProvider, LlmClient, LlmError, MockProvider, Provider, RetryPolicy,
    Scenario, TemplateId,
};
use crate::metrics::{aggregate_runs, flat_f1, hierarchical_f1, macro_roc_auc, RunAggregate};
use crate::stats::{bh_correct, t_one_sample, wilcoxon_signed_rank, TestMethod};
use crate::taxonomy::Taxonomy;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("provider failure during {stage}: {message}")]
    Provider { stage: Stage, message: String },
    #[error("incomplete run directory {}: {message}", path.display())]
    Incomplete { path: PathBuf, message: String },
}

impl RunnerError {
    /// Process exit code: 1 validation, 2 stage failure, 3 provider failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 1,
            RunnerError::Stage { .. } | RunnerError::Incomplete { .. } => 2,
            RunnerError::Provider { .. } => 3,
        }
    }

    fn stage(stage: Stage, e: impl fmt::Display) -> Self {
        RunnerError::Stage { stage, message: e.to_string() }
    }

    fn llm(stage: Stage, e: LlmError) -> Self {
        match e {
            LlmError::Provider { .. } => RunnerError::Provider { stage, message: e.to_string() },
            other => RunnerError::stage(stage, other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Clean,
    Augment,
    Compose,
    Train,
    Predict,
    Evaluate,
    ZeroShot,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Prepare,
        Stage::Clean,
        Stage::Augment,
        Stage::Compose,
        Stage::Train,
        Stage::Predict,
        Stage::Evaluate,
        Stage::ZeroShot,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Clean => "clean",
            Stage::Augment => "augment",
            Stage::Compose => "compose",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::ZeroShot => "zero_shot",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = RunnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == key)
            .ok_or_else(|| RunnerError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HF1,
    MicroF1,
    MacroF1,
    MacroAuc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::HF1 => "h_f1",
            Metric::MicroF1 => "micro_f1",
            Metric::MacroF1 => "macro_f1",
            Metric::MacroAuc => "macro_auc",
        }
    }

    fn header(self) -> &'static str {
        match self {
            Metric::HF1 => "H-F1",
            Metric::MicroF1 => "micro-F1",
            Metric::MacroF1 => "macro-F1",
            Metric::MacroAuc => "AUC",
        }
    }

    pub fn default_for(dataset: DatasetId) -> Metric {
        if dataset.is_hierarchical() {
            Metric::HF1
        } else {
            Metric::MacroF1
        }
    }

    fn reported(dataset: DatasetId) -> &'static [Metric] {
        if dataset.is_hierarchical() {
            &[Metric::HF1, Metric::MicroF1, Metric::MacroF1, Metric::MacroAuc]
        } else {
            &[Metric::MicroF1, Metric::MacroF1, Metric::MacroAuc]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpaceMode {
    /// Taxonomy leaves (SemEval) or the dataset's flat classes.
    #[default]
    Leaves,
    /// Every non-root taxonomy node; gold sets are ancestor-closed for
    /// training.
    AllNodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    pub features: FeatureSpec,
    pub training: TrainConfig,
    pub threshold: f64,
    pub tune_thresholds: bool,
    pub hierarchy_closure: bool,
    pub label_space: LabelSpaceMode,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            features: FeatureSpec::default(),
            training: TrainConfig::default(),
            threshold: 0.5,
            tune_thresholds: false,
            hierarchy_closure: false,
            label_space: LabelSpaceMode::Leaves,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Scenario file for the mock provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_delay")]
    pub base_delay_ms: u64,
    #[serde(default = "default_max_delay")]
    pub max_delay_ms: u64,
}

fn default_timeout() -> u64 {
    120
}
fn default_attempts() -> u32 {
    5
}
fn default_base_delay() -> u64 {
    500
}
fn default_max_delay() -> u64 {
    30_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Temperatures {
    #[serde(default)]
    pub clean: f64,
    #[serde(default = "default_explain_temperature")]
    pub explain: f64,
    #[serde(default)]
    pub zero_shot: f64,
}

fn default_explain_temperature() -> f64 {
    0.7
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures { clean: 0.0, explain: 0.7, zero_shot: 0.0 }
    }
}

/// A significance comparison: `condition` against either another
/// condition's runs or a fixed baseline score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_value: Option<f64>,
}

impl Comparison {
    pub fn name(&self) -> String {
        match (self.baseline, self.baseline_value) {
            (Some(b), _) => format!("{} vs {}", self.condition.label(), b.label()),
            (None, Some(v)) => format!("{} vs {v}", self.condition.label()),
            (None, None) => self.condition.label().to_string(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}
fn default_runs() -> u32 {
    5
}
fn default_seed() -> u64 {
    13
}
fn default_captioner() -> String {
    "blip".to_string()
}
fn default_alpha() -> f64 {
    0.05
}
fn default_eval_split() -> Split {
    Split::Test
}
fn default_parallelism() -> usize {
    4
}
fn default_dev_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub dataset: DatasetId,
    /// Canonical JSONL corpus written by `semaug ingest`.
    pub corpus: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    pub conditions: Vec<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default = "default_runs")]
    pub runs_per_condition: u32,
    pub model_id: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_captioner")]
    pub captioner: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    #[serde(default)]
    pub zero_shot: bool,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub allow_empty_marker: bool,
    /// Share of train samples held out as dev when thresholds are tuned and
    /// the corpus has no dev split.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_metric: Option<Metric>,
    #[serde(default)]
    pub temperatures: Temperatures,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub classifier: ClassifierSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_lexicon: Option<Vec<String>>,
    /// Defaults to T+E vs T and T+C+E vs T+C for the conditions present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparisons: Option<Vec<Comparison>>,
}

impl ExperimentConfig {
    /// Parses a TOML config and resolves relative paths against the
    /// config file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<ExperimentConfig, RunnerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, base: &Path) -> Result<ExperimentConfig, RunnerError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        fix(&mut self.cache_dir);
        if let Some(t) = &mut self.taxonomy {
            fix(t);
        }
        if let Some(s) = &mut self.provider.scenario {
            fix(s);
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy.unwrap_or_else(|| Strategy::default_for(self.dataset))
    }

    pub fn primary_metric(&self) -> Metric {
        self.primary_metric.unwrap_or_else(|| Metric::default_for(self.dataset))
    }

    pub fn comparisons(&self) -> Vec<Comparison> {
        if let Some(c) = &self.comparisons {
            return c.clone();
        }
        [(Condition::TE, Condition::T), (Condition::TCE, Condition::TC)]
            .into_iter()
            .filter(|(c, b)| self.conditions.contains(c) && self.conditions.contains(b))
            .map(|(condition, baseline)| Comparison { condition, baseline: Some(baseline), baseline_value: None })
            .collect()
    }

    /// Number of runs a condition gets: the LLM-dependent ones repeat,
    /// deterministic ones run once.
    pub fn runs_for(&self, condition: Condition) -> u32 {
        if condition.uses_explanation() {
            self.runs_per_condition
        } else {
            1
        }
    }

    pub fn units(&self) -> Vec<(Condition, u32)> {
        self.conditions.iter().flat_map(|&c| (0..self.runs_for(c)).map(move |r| (c, r))).collect()
    }

    fn needs_clean(&self) -> bool {
        self.zero_shot || self.conditions.iter().any(|c| c.uses_caption() || c.uses_explanation())
    }

    fn needs_augment(&self) -> bool {
        self.conditions.iter().any(|c| c.uses_explanation())
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name {:?} is not a valid directory name", self.name));
        }
        if self.runs_per_condition == 0 {
            return bad("runs_per_condition must be at least 1".into());
        }
        if self.conditions.is_empty() {
            return bad("conditions must not be empty".into());
        }
        let unique: BTreeSet<Condition> = self.conditions.iter().copied().collect();
        if unique.len() != self.conditions.len() {
            return bad("conditions contain duplicates".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} is outside (0, 1)", self.alpha));
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad(format!("dev_fraction {} is outside [0, 1)", self.dev_fraction));
        }
        for t in [self.temperatures.clean, self.temperatures.explain, self.temperatures.zero_shot] {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("temperature {t} must be a non-negative number"));
            }
        }
        if self.zero_shot && self.dataset != DatasetId::SemevalMemes {
            return bad("zero_shot is only available for the semeval dataset".into());
        }
        if self.classifier.label_space == LabelSpaceMode::AllNodes && !self.dataset.is_hierarchical() {
            return bad("label_space = \"all_nodes\" needs a hierarchical dataset".into());
        }
        if self.primary_metric == Some(Metric::HF1) && !self.dataset.is_hierarchical() {
            return bad("h_f1 needs a hierarchical dataset".into());
        }
        let comparisons = self.comparisons();
        for c in &comparisons {
            if !self.conditions.contains(&c.condition) {
                return bad(format!("comparison names condition {} which is not run", c.condition));
            }
            match (c.baseline, c.baseline_value) {
                (Some(b), None) if !self.conditions.contains(&b) => {
                    return bad(format!("comparison baseline {b} is not run"));
                }
                (Some(_), None) | (None, Some(_)) => {}
                _ => return bad(format!("comparison {} needs exactly one of baseline, baseline_value", c.name())),
            }
            if self.runs_for(c.condition) < 2 {
                return bad(format!(
                    "comparison {} needs at least 2 runs of {}; set runs_per_condition >= 2 or drop the comparison",
                    c.name(),
                    c.condition
                ));
            }
        }
        if !self.corpus.is_file() {
            return bad(format!("corpus {} does not exist", self.corpus.display()));
        }
        if let Some(t) = &self.taxonomy {
            if !t.is_file() {
                return bad(format!("taxonomy {} does not exist", t.display()));
            }
        }
        if self.provider.kind == ProviderKind::Mock {
            match &self.provider.scenario {
                Some(s) if s.is_file() => {}
                Some(s) => return bad(format!("scenario {} does not exist", s.display())),
                None => return bad("the mock provider needs a scenario file".into()),
            }
        }
        if self.provider.max_attempts == 0 {
            return bad("provider.max_attempts must be at least 1".into());
        }
        Ok(())
    }

    /// Digest of everything that determines results: the config without
    /// its filesystem locations, plus the corpus, scenario and taxonomy
    /// contents.
    pub fn digest(&self) -> Result<String, RunnerError> {
        let mut c = self.clone();
        c.corpus = PathBuf::new();
        c.output_dir = PathBuf::new();
        c.cache_dir = PathBuf::new();
        c.taxonomy = c.taxonomy.map(|_| PathBuf::from("custom"));
        c.provider.scenario = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&c).map_err(|e| RunnerError::Config(e.to_string()))?);
        let mut add = |p: &Path| -> Result<(), RunnerError> {
            let bytes = fs::read(p).map_err(|e| RunnerError::Config(format!("{}: {e}", p.display())))?;
            h.update(Sha256::digest(&bytes));
            Ok(())
        };
        add(&self.corpus)?;
        if let Some(s) = &self.provider.scenario {
            add(s)?;
        }
        if let Some(t) = &self.taxonomy {
            add(t)?;
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub config_digest: String,
    pub completed: Vec<Stage>,
    pub counts: SplitCounts,
    /// Unit (`E_run2`) → samples excluded because they had no usable input.
    pub unusable: BTreeMap<String, Vec<String>>,
    pub refusals: BTreeMap<u32, usize>,
    pub parse_errors: BTreeMap<u32, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot_dropped_labels: Option<usize>,
    /// Relative artifact path → SHA-256, filled when the report is built.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    pub run_index: u32,
    pub n_eval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_f1: Option<f64>,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub macro_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_labels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_responses: Option<usize>,
}

impl UnitMetrics {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::HF1 => self.h_f1,
            Metric::MicroF1 => Some(self.micro_f1),
            Metric::MacroF1 => Some(self.macro_f1),
            Metric::MacroAuc => self.macro_auc,
        }
    }
}

/// Scores predictions against gold. AUC is skipped when `with_auc` is
/// false (hard 0/1 predictions).
pub fn evaluate_predictions(
    dataset: DatasetId,
    taxonomy: &Taxonomy,
    label_space: &[Label],
    gold: &[LabelSet],
    preds: &[PredictionSet],
    with_auc: bool,
) -> Result<UnitMetrics, crate::metrics::MetricsError> {
    let labels: Vec<LabelSet> = preds.iter().map(|p| p.labels.clone()).collect();
    let (hp, hr, hf) = if dataset.is_hierarchical() {
        let h = hierarchical_f1(gold, &labels, taxonomy)?;
        (Some(h.h_precision), Some(h.h_recall), Some(h.h_f1))
    } else {
        (None, None, None)
    };
    let flat = flat_f1(gold, &labels, label_space)?;
    let macro_auc = if with_auc {
        let scores: Vec<BTreeMap<Label, f64>> = preds.iter().map(|p| p.scores.clone()).collect();
        macro_roc_auc(gold, &scores, label_space)?.macro_auc
    } else {
        None
    };
    Ok(UnitMetrics {
        condition: None,
        run_index: 0,
        n_eval: gold.len(),
        h_precision: hp,
        h_recall: hr,
        h_f1: hf,
        micro_f1: flat.micro_f1,
        macro_f1: flat.macro_f1,
        macro_auc,
        dropped_labels: None,
        invalid_responses: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub runs: usize,
    pub aggregates: BTreeMap<String, RunAggregate>,
    /// Primary metric as `avg (std) / best` in percentage points.
    pub cell: String,
    pub degraded: usize,
    pub unusable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub comparison: String,
    pub test: Option<TestMethod>,
    pub n: usize,
    pub condition_mean: f64,
    pub baseline: f64,
    pub statistic: Option<f64>,
    pub raw_p: Option<f64>,
    pub adjusted_p: Option<f64>,
    pub significant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub dataset: DatasetId,
    pub strategy: Strategy,
    pub primary_metric: Metric,
    pub runs_per_condition: u32,
    pub alpha: f64,
    pub conditions: Vec<ConditionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<ConditionSummary>,
    pub significance: Vec<SignificanceRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<ValidityTable>,
    pub refusals: BTreeMap<u32, usize>,
    pub parse_errors: BTreeMap<u32, usize>,
    pub manifest_digest: String,
}

#[derive(Default)]
pub struct RunOptions {
    /// Stop (successfully) once this stage has completed.
    pub stop_after: Option<Stage>,
    /// Use this provider instead of the configured one.
    pub provider: Option<Arc<dyn Provider>>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub stopped_after: Option<Stage>,
    pub report: Option<RunReport>,
    pub llm_stats: ClientStats,
}

/// One line of `augment/clean.jsonl`: a sample's cleaned captions by
/// captioner, with the request digests that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanLine {
    pub id: String,
    pub clean: CleanMap,
    pub digests: BTreeMap<String, String>,
}

fn unit_name(condition: Condition, run: u32) -> String {
    format!("{condition}_run{run}")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("artifact paths have a parent");
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    crate::datasets::write_jsonl_to(&mut buf, items).expect("in-memory write");
    buf
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut buf = serde_json::to_vec_pretty(value).expect("serializable");
    buf.push(b'\n');
    buf
}

fn load_taxonomy(cfg: &ExperimentConfig) -> Result<Taxonomy, RunnerError> {
    match &cfg.taxonomy {
        Some(p) => Taxonomy::from_path(p).map_err(|e| RunnerError::Config(e.to_string())),
        None => Ok(Taxonomy::semeval()),
    }
}

fn label_space_for(cfg: &ExperimentConfig, taxonomy: &Taxonomy) -> Vec<Label> {
    match cfg.classifier.label_space {
        LabelSpaceMode::Leaves => dataset_label_space(cfg.dataset, taxonomy),
        LabelSpaceMode::AllNodes => taxonomy.nodes().cloned().collect(),
    }
}

struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    taxonomy: Taxonomy,
    label_space: Vec<Label>,
    manifest: Manifest,
    provider_override: Option<Arc<dyn Provider>>,
    llm: Option<LlmClient>,
    samples: Vec<Sample>,
    clean: Vec<CleanLine>,
}

impl<'a> Pipeline<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save_manifest(&self) -> Result<(), RunnerError> {
        write_atomic(&self.path("manifest.json"), &json_bytes(&self.manifest))
            .map_err(|e| RunnerError::stage(Stage::Prepare, format!("manifest: {e}")))
    }

    fn complete(&mut self, stage: Stage) -> Result<(), RunnerError> {
        if !self.manifest.completed.contains(&stage) {
            self.manifest.completed.push(stage);
        }
        self.save_manifest()
    }

    fn llm(&mut self, stage: Stage) -> Result<&LlmClient, RunnerError> {
        if self.llm.is_none() {
            let p = &self.cfg.provider;
            let provider: Arc<dyn Provider> = match (&self.provider_override, p.kind) {
                (Some(o), _) => o.clone(),
                (None, ProviderKind::Mock) => {
                    let path = p.scenario.as_ref().ok_or_else(|| RunnerError::Config("mock provider needs a scenario".into()))?;
                    let scenario = Scenario::from_path(path).map_err(|e| RunnerError::Config(e.to_string()))?;
                    Arc::new(MockProvider::new(scenario).map_err(|e| RunnerError::Config(e.to_string()))?)
                }
                (None, ProviderKind::Http) => Arc::new(
                    HttpProvider::from_env(Duration::from_secs(p.timeout_secs))
                        .map_err(|e| RunnerError::Config(e.to_string()))?,
                ),
            };
            let retry = RetryPolicy {
                max_attempts: p.max_attempts,
                base_delay: Duration::from_millis(p.base_delay_ms),
                max_delay: Duration::from_millis(p.max_delay_ms),
            };
            log::info!("{stage}: using {:?} provider, cache {}", p.kind, self.cfg.cache_dir.display());
            self.llm = Some(LlmClient::new(provider).with_cache(Cache::new(&self.cfg.cache_dir)).with_retry(retry));
        }
        Ok(self.llm.as_ref().expect("initialized above"))
    }

    fn augment_settings(&self) -> AugmentSettings {
        let mut s = AugmentSettings::new(&self.cfg.model_id, self.cfg.strategy());
        s.clean_temperature = self.cfg.temperatures.clean;
        s.explain_temperature = self.cfg.temperatures.explain;
        s.captioner = self.cfg.captioner.clone();
        s.parallelism = self.cfg.parallelism;
        if let Some(lex) = &self.cfg.refusal_lexicon {
            s.refusal = RefusalDetector::new(lex);
        }
        s
    }

    fn prepare(&mut self) -> Result<(), RunnerError> {
        let path = self.path("corpus/samples.jsonl");
        let samples: Vec<Sample> = if path.is_file() {
            read_jsonl(&path).map_err(|e| RunnerError::stage(Stage::Prepare, e))?
        } else {
            let mut samples: Vec<Sample> =
                read_jsonl(&self.cfg.corpus).map_err(|e| RunnerError::Config(format!("corpus: {e}")))?;
            if let Some(s) = samples.iter().find(|s| s.dataset != self.cfg.dataset) {
                return Err(RunnerError::Config(format!("sample {} belongs to {}, not {}", s.id, s.dataset, self.cfg.dataset)));
            }
            let mut seen = BTreeSet::new();
            if let Some(s) = samples.iter().find(|s| !seen.insert(s.id.clone())) {
                return Err(RunnerError::Config(format!("duplicate sample id {}", s.id)));
            }
            if self.cfg.classifier.tune_thresholds && !samples.iter().any(|s| s.split == Split::Dev) {
                holdout_dev(&mut samples, self.cfg.dev_fraction, self.cfg.seed);
            }
            write_atomic(&path, &jsonl_bytes(&samples)).map_err(|e| RunnerError::stage(Stage::Prepare, e))?;
            samples
        };
        let space: BTreeSet<&str> = self.label_space.iter().map(Label::as_str).collect();
        for s in &samples {
            let targets = self.targets(&s.gold).map_err(|e| RunnerError::Config(format!("sample {}: {e}", s.id)))?;
            if let Some(l) = targets.iter().find(|l| !space.contains(l.as_str())).cloned() {
                return Err(RunnerError::Config(format!("sample {}: label {l} is outside the label space", s.id)));
            };
        }
        let count = |split: Split| samples.iter().filter(|s| s.split == split).count();
        self.manifest.counts = SplitCounts {
            total: samples.len(),
            train: count(Split::Train),
            dev: count(Split::Dev),
            eval: count(self.cfg.eval_split),
        };
        if self.manifest.counts.train == 0 {
            return Err(RunnerError::Config("corpus has no train samples".into()));
        }
        if self.manifest.counts.eval == 0 {
            return Err(RunnerError::Config(format!("corpus has no {} samples", self.cfg.eval_split)));
        }
        if self.cfg.eval_split == Split::Train {
            log::warn!("evaluating on the training split");
        }
        self.samples = samples;
        Ok(())
    }

    fn targets(&self, gold: &LabelSet) -> Result<LabelSet, crate::taxonomy::TaxonomyError> {
        match self.cfg.classifier.label_space {
            LabelSpaceMode::Leaves => Ok(gold.clone()),
            LabelSpaceMode::AllNodes => self.taxonomy.expand(gold),
        }
    }

    fn clean_stage(&mut self) -> Result<(), RunnerError> {
        let path = self.path("augment/clean.jsonl");
        if path.is_file() {
            self.clean = read_jsonl(&path).map_err(|e| RunnerError::stage(Stage::Clean, e))?;
            return Ok(());
        }
        if !self.cfg.needs_clean() {
            self.clean = self.samples.iter().map(|s| CleanLine { id: s.id.clone(), clean: CleanMap::new(), digests: BTreeMap::new() }).collect();
            return Ok(());
        }
        let settings = self.augment_settings();
        let samples = std::mem::take(&mut self.samples);
        let result = crate::augment::clean_corpus(&samples, self.llm(Stage::Clean)?, &settings);
        self.samples = samples;
        let cleaned = result.map_err(|e| augment_error(Stage::Clean, e))?;
        self.clean = self
            .samples
            .iter()
            .zip(cleaned)
            .map(|(s, (clean, digests))| CleanLine { id: s.id.clone(), clean, digests })
            .collect();
        write_atomic(&path, &jsonl_bytes(&self.clean)).map_err(|e| RunnerError::stage(Stage::Clean, e))
    }

    fn run_records_path(&self, run: u32) -> PathBuf {
        self.path(&format!("augment/run_{run}.jsonl"))
    }

    fn augment_stage(&mut self) -> Result<(), RunnerError> {
        if !self.cfg.needs_augment() {
            return Ok(());
        }
        let settings = self.augment_settings();
        let cleaned: Vec<(CleanMap, BTreeMap<String, String>)> =
            self.clean.iter().map(|c| (c.clean.clone(), c.digests.clone())).collect();
        for run in 0..self.cfg.runs_per_condition {
            let path = self.run_records_path(run);
            let records: Vec<AugmentationRecord> = if path.is_file() {
                read_jsonl(&path).map_err(|e| RunnerError::stage(Stage::Augment, e))?
            } else {
                let samples = std::mem::take(&mut self.samples);
                let result = augment_run(&samples, &cleaned, self.llm(Stage::Augment)?, &settings, run);
                self.samples = samples;
                let records = result.map_err(|e| augment_error(Stage::Augment, e))?;
                write_atomic(&path, &jsonl_bytes(&records)).map_err(|e| RunnerError::stage(Stage::Augment, e))?;
                records
            };
            self.manifest.refusals.insert(run, records.iter().filter(|r| r.refusal).count());
            self.manifest.parse_errors.insert(run, records.iter().filter(|r| r.parse_error.is_some()).count());
        }
        Ok(())
    }

    fn composed_path(&self, condition: Condition, run: u32) -> PathBuf {
        self.path(&format!("augment/composed/{}.jsonl", unit_name(condition, run)))
    }

    fn compose_stage(&mut self) -> Result<(), RunnerError> {
        let settings = ComposeSettings {
            allow_empty_marker: self.cfg.allow_empty_marker,
            ..ComposeSettings::new(self.cfg.strategy(), &self.cfg.captioner)
        };
        let clean_only: HashMap<&str, AugmentationRecord> = self
            .clean
            .iter()
            .map(|c| {
                (
                    c.id.as_str(),
                    AugmentationRecord {
                        sample_id: c.id.clone(),
                        run_index: 0,
                        explanation: None,
                        triggers: None,
                        clean: c.clean.clone(),
                        refusal: false,
                        parse_error: None,
                        raw_completions: c.digests.clone(),
                    },
                )
            })
            .collect();
        for (condition, run) in self.cfg.units() {
            let path = self.composed_path(condition, run);
            let unit = unit_name(condition, run);
            if path.is_file() {
                let composed: Vec<ComposedInput> = read_jsonl(&path).map_err(|e| RunnerError::stage(Stage::Compose, e))?;
                let have: BTreeSet<&str> = composed.iter().map(|c| c.sample_id.as_str()).collect();
                let missing: Vec<String> =
                    self.samples.iter().filter(|s| !have.contains(s.id.as_str())).map(|s| s.id.clone()).collect();
                if !missing.is_empty() {
                    self.manifest.unusable.insert(unit, missing);
                }
                continue;
            }
            let run_records: Option<HashMap<String, AugmentationRecord>> = if condition.uses_explanation() {
                let records: Vec<AugmentationRecord> =
                    read_jsonl(self.run_records_path(run)).map_err(|e| RunnerError::stage(Stage::Compose, e))?;
                Some(records.into_iter().map(|r| (r.sample_id.clone(), r)).collect())
            } else {
                None
            };
            let mut composed = Vec::with_capacity(self.samples.len());
            let mut unusable = Vec::new();
            for s in &self.samples {
                let record = match &run_records {
                    Some(m) => m.get(&s.id),
                    None => clean_only.get(s.id.as_str()),
                };
                match compose_input(s, record, condition, &settings) {
                    Ok(c) => composed.push(c),
                    Err(u) => unusable.push(u.sample_id),
                }
            }
            if !unusable.is_empty() {
                log::warn!("{unit}: {} sample(s) have no usable input", unusable.len());
                self.manifest.unusable.insert(unit, unusable);
            }
            write_atomic(&path, &jsonl_bytes(&composed)).map_err(|e| RunnerError::stage(Stage::Compose, e))?;
        }
        Ok(())
    }

    fn load_composed(&self, stage: Stage, condition: Condition, run: u32) -> Result<Vec<ComposedInput>, RunnerError> {
        read_jsonl(self.composed_path(condition, run)).map_err(|e| RunnerError::stage(stage, e))
    }

    fn model_path(&self, condition: Condition, run: u32) -> PathBuf {
        self.path(&format!("models/{}.smgm", unit_name(condition, run)))
    }

    fn train_stage(&mut self) -> Result<(), RunnerError> {
        let by_id: HashMap<&str, &Sample> = self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let spec = &self.cfg.classifier.features;
        let train_cfg = TrainConfig { seed: self.cfg.seed, ..self.cfg.classifier.training.clone() };
        for (condition, run) in self.cfg.units() {
            let path = self.model_path(condition, run);
            if path.is_file() {
                continue;
            }
            let composed = self.load_composed(Stage::Train, condition, run)?;
            let mut examples = Vec::new();
            let mut dev: Vec<(FeatureVector, LabelSet)> = Vec::new();
            for c in &composed {
                let s = by_id[c.sample_id.as_str()];
                let labels = self.targets(&s.gold).map_err(|e| RunnerError::stage(Stage::Train, e))?;
                match s.split {
                    Split::Train => examples.push(TrainExample { id: s.id.clone(), features: featurize(&c.text, spec), labels }),
                    Split::Dev => dev.push((featurize(&c.text, spec), labels)),
                    Split::Test => {}
                }
            }
            let (mut model, report) =
                train(&examples, &self.label_space, spec, &train_cfg).map_err(|e| RunnerError::stage(Stage::Train, e))?;
            model.thresholds.global = self.cfg.classifier.threshold;
            if self.cfg.classifier.tune_thresholds && !dev.is_empty() {
                model.tune_thresholds(&dev).map_err(|e| RunnerError::stage(Stage::Train, e))?;
            }
            log::info!(
                "{}: trained on {} samples, final objective {:.5}",
                unit_name(condition, run),
                examples.len(),
                report.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
            let mut bytes = Vec::new();
            model.write_to(&mut bytes).map_err(|e| RunnerError::stage(Stage::Train, e))?;
            write_atomic(&path, &bytes).map_err(|e| RunnerError::stage(Stage::Train, e))?;
        }
        Ok(())
    }

    fn closure(&self) -> Option<&Taxonomy> {
        (self.cfg.classifier.hierarchy_closure && self.cfg.dataset.is_hierarchical()).then_some(&self.taxonomy)
    }

    fn predictions_path(&self, unit: &str) -> PathBuf {
        self.path(&format!("predictions/{unit}.jsonl"))
    }

    fn predict_stage(&mut self) -> Result<(), RunnerError> {
        let eval: BTreeSet<&str> =
            self.samples.iter().filter(|s| s.split == self.cfg.eval_split).map(|s| s.id.as_str()).collect();
        for (condition, run) in self.cfg.units() {
            let path = self.predictions_path(&unit_name(condition, run));
            if path.is_file() {
                continue;
            }
            let model = Model::load(self.model_path(condition, run)).map_err(|e| RunnerError::stage(Stage::Predict, e))?;
            let composed = self.load_composed(Stage::Predict, condition, run)?;
            let preds: Vec<PredictionSet> = composed
                .iter()
                .filter(|c| eval.contains(c.sample_id.as_str()))
                .map(|c| model.predict(&c.sample_id, &c.text, self.closure()))
                .collect::<Result<_, _>>()
                .map_err(|e| RunnerError::stage(Stage::Predict, e))?;
            write_atomic(&path, &jsonl_bytes(&preds)).map_err(|e| RunnerError::stage(Stage::Predict, e))?;
        }
        Ok(())
    }

    fn metrics_path(&self, unit: &str) -> PathBuf {
        self.path(&format!("metrics/{unit}.json"))
    }

    fn score(&self, stage: Stage, preds: &[PredictionSet], with_auc: bool) -> Result<UnitMetrics, RunnerError> {
        let gold_by_id: HashMap<&str, &LabelSet> = self.samples.iter().map(|s| (s.id.as_str(), &s.gold)).collect();
        let gold: Vec<LabelSet> = preds
            .iter()
            .map(|p| {
                gold_by_id
                    .get(p.sample_id.as_str())
                    .map(|g| (*g).clone())
                    .ok_or_else(|| RunnerError::stage(stage, format!("prediction for unknown sample {}", p.sample_id)))
            })
            .collect::<Result<_, _>>()?;
        evaluate_predictions(self.cfg.dataset, &self.taxonomy, &self.label_space, &gold, preds, with_auc)
            .map_err(|e| RunnerError::stage(stage, e))
    }

    fn evaluate_stage(&mut self) -> Result<(), RunnerError> {
        for (condition, run) in self.cfg.units() {
            let unit = unit_name(condition, run);
            let path = self.metrics_path(&unit);
            if path.is_file() {
                continue;
            }
            let preds: Vec<PredictionSet> =
                read_jsonl(self.predictions_path(&unit)).map_err(|e| RunnerError::stage(Stage::Evaluate, e))?;
            let mut m = self.score(Stage::Evaluate, &preds, true)?;
            m.condition = Some(condition);
            m.run_index = run;
            write_atomic(&path, &json_bytes(&m)).map_err(|e| RunnerError::stage(Stage::Evaluate, e))?;
        }
        Ok(())
    }

    fn zero_shot_stage(&mut self) -> Result<(), RunnerError> {
        if !self.cfg.zero_shot {
            return Ok(());
        }
        let metrics_path = self.metrics_path("zero_shot");
        if metrics_path.is_file() {
            let m: UnitMetrics = serde_json::from_slice(&fs::read(&metrics_path).map_err(|e| RunnerError::stage(Stage::ZeroShot, e))?)
                .map_err(|e| RunnerError::stage(Stage::ZeroShot, e))?;
            self.manifest.zero_shot_dropped_labels = m.dropped_labels;
            return Ok(());
        }
        self.llm(Stage::ZeroShot)?;
        let clean: HashMap<&str, &CleanMap> = self.clean.iter().map(|c| (c.id.as_str(), &c.clean)).collect();
        let eval: Vec<&Sample> = self.samples.iter().filter(|s| s.split == self.cfg.eval_split).collect();
        let requests: Vec<CompletionRequest> = eval
            .iter()
            .map(|s| {
                let img = clean.get(s.id.as_str()).map_or("", |c| best_caption(c, &self.cfg.captioner));
                CompletionRequest::new(TemplateId::ZeroShotClassify, &self.cfg.model_id, 0)
                    .field("text", &s.text)
                    .field("img", img)
                    .temperature(self.cfg.temperatures.zero_shot)
            })
            .collect();
        let parallelism = self.cfg.parallelism;
        let results = self.llm.as_ref().expect("initialized above").complete_all(&requests, parallelism);
        let mut preds = Vec::with_capacity(eval.len());
        let (mut dropped, mut invalid) = (0, 0);
        for (s, result) in eval.iter().zip(results) {
            let c = result.map_err(|e| RunnerError::llm(Stage::ZeroShot, e))?;
            let labels = match parse_zero_shot(&c.raw_text, &self.taxonomy, &self.label_space) {
                Ok(p) => {
                    dropped += p.dropped.len();
                    p.labels
                }
                Err(e) => {
                    log::warn!("zero-shot response for {} unusable: {e}", s.id);
                    invalid += 1;
                    LabelSet::new()
                }
            };
            let scores = self
                .label_space
                .iter()
                .map(|l| (l.clone(), if labels.contains(l) { 1.0 } else { 0.0 }))
                .collect();
            preds.push(PredictionSet { sample_id: s.id.clone(), scores, labels });
        }
        write_atomic(&self.predictions_path("zero_shot"), &jsonl_bytes(&preds))
            .map_err(|e| RunnerError::stage(Stage::ZeroShot, e))?;
        let mut m = self.score(Stage::ZeroShot, &preds, false)?;
        m.dropped_labels = Some(dropped);
        m.invalid_responses = Some(invalid);
        self.manifest.zero_shot_dropped_labels = Some(dropped);
        write_atomic(&metrics_path, &json_bytes(&m)).map_err(|e| RunnerError::stage(Stage::ZeroShot, e))
    }
}

fn augment_error(stage: Stage, e: AugmentError) -> RunnerError {
    match e {
        AugmentError::Llm { sample_id, source: source @ LlmError::Provider { .. } } => {
            RunnerError::Provider { stage, message: format!("sample {sample_id}: {source}") }
        }
        other => RunnerError::stage(stage, other),
    }
}

/// Runs (or resumes) the experiment described by `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig, options: RunOptions) -> Result<RunOutcome, RunnerError> {
    cfg.validate()?;
    let digest = cfg.digest()?;
    let dir = cfg.run_dir();
    let manifest_path = dir.join("manifest.json");
    let mut manifest = Manifest { version: CONFIG_VERSION, name: cfg.name.clone(), config_digest: digest.clone(), ..Manifest::default() };
    if manifest_path.is_file() {
        let existing: Manifest = serde_json::from_slice(
            &fs::read(&manifest_path).map_err(|e| RunnerError::Config(format!("{}: {e}", manifest_path.display())))?,
        )
        .map_err(|e| RunnerError::Config(format!("{}: {e}", manifest_path.display())))?;
        if existing.config_digest != digest {
            return Err(RunnerError::Config(format!(
                "{} holds a run with a different configuration; choose another name or remove it",
                dir.display()
            )));
        }
        log::info!("resuming {} (completed: {:?})", dir.display(), existing.completed);
        manifest.completed = existing.completed;
    }
    let taxonomy = load_taxonomy(cfg)?;
    let label_space = label_space_for(cfg, &taxonomy);
    fs::create_dir_all(&dir).map_err(|e| RunnerError::Config(format!("{}: {e}", dir.display())))?;
    write_atomic(&dir.join("config.json"), &json_bytes(cfg)).map_err(|e| RunnerError::stage(Stage::Prepare, e))?;

    let mut p = Pipeline {
        cfg,
        dir: dir.clone(),
        taxonomy,
        label_space,
        manifest,
        provider_override: options.provider,
        llm: None,
        samples: Vec::new(),
        clean: Vec::new(),
    };

    let mut report = None;
    for stage in Stage::ALL {
        log::info!("stage {stage}");
        match stage {
            Stage::Prepare => p.prepare()?,
            Stage::Clean => p.clean_stage()?,
            Stage::Augment => p.augment_stage()?,
            Stage::Compose => p.compose_stage()?,
            Stage::Train => p.train_stage()?,
            Stage::Predict => p.predict_stage()?,
            Stage::Evaluate => p.evaluate_stage()?,
            Stage::ZeroShot => p.zero_shot_stage()?,
            Stage::Report => {
                p.save_manifest()?;
                let (r, artifacts) = build_report(&dir)?;
                p.manifest.artifacts = artifacts;
                write_report(&dir, &r)?;
                report = Some(r);
            }
        }
        p.complete(stage)?;
        if options.stop_after == Some(stage) && stage != Stage::Report {
            log::info!("stopping after {stage} as requested");
            return Ok(RunOutcome {
                run_dir: dir,
                stopped_after: Some(stage),
                report: None,
                llm_stats: p.llm.as_ref().map(LlmClient::stats).unwrap_or_default(),
            });
        }
    }
    let llm_stats = p.llm.as_ref().map(LlmClient::stats).unwrap_or_default();
    log::info!("provider calls: {}, cache hits: {}", llm_stats.provider_calls, llm_stats.cache_hits);
    Ok(RunOutcome { run_dir: dir, stopped_after: None, report, llm_stats })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunnerError> {
    let bytes = fs::read(path)
        .map_err(|e| RunnerError::Incomplete { path: path.to_path_buf(), message: e.to_string() })?;
    serde_json::from_slice(&bytes).map_err(|e| RunnerError::Incomplete { path: path.to_path_buf(), message: e.to_string() })
}

fn artifact_digests(dir: &Path) -> Result<BTreeMap<String, String>, RunnerError> {
    let mut out = BTreeMap::new();
    for sub in ["corpus", "augment", "models", "predictions", "metrics"] {
        let mut stack = vec![dir.join(sub)];
        while let Some(d) = stack.pop() {
            let Ok(entries) = fs::read_dir(&d) else { continue };
            for entry in entries {
                let path = entry.map_err(|e| RunnerError::stage(Stage::Report, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).expect("under run dir").to_string_lossy().replace('\\', "/");
                    let bytes = fs::read(&path).map_err(|e| RunnerError::stage(Stage::Report, e))?;
                    out.insert(rel, hex::encode(Sha256::digest(&bytes)));
                }
            }
        }
    }
    Ok(out)
}

fn summarize(
    name: String,
    metrics: &[UnitMetrics],
    dataset: DatasetId,
    primary: Metric,
    degraded: usize,
    unusable: usize,
) -> Result<ConditionSummary, RunnerError> {
    let mut aggregates = BTreeMap::new();
    for &m in Metric::reported(dataset) {
        let values: Option<Vec<f64>> = metrics.iter().map(|u| u.get(m)).collect();
        if let Some(values) = values.filter(|v| !v.is_empty()) {
            aggregates.insert(m.name().to_string(), aggregate_runs(&values).map_err(|e| RunnerError::stage(Stage::Report, e))?);
        }
    }
    let cell = aggregates.get(primary.name()).map_or_else(|| "--".to_string(), |a| a.scaled(100.0).cell());
    Ok(ConditionSummary { condition: name, runs: metrics.len(), aggregates, cell, degraded, unusable })
}

fn significance(cfg: &ExperimentConfig, per_condition: &BTreeMap<Condition, Vec<UnitMetrics>>) -> Vec<SignificanceRow> {
    let metric = cfg.primary_metric();
    let values = |c: Condition| -> Option<Vec<f64>> { per_condition.get(&c)?.iter().map(|u| u.get(metric)).collect() };
    let mut rows = Vec::new();
    for cmp in cfg.comparisons() {
        let mut row = SignificanceRow {
            comparison: cmp.name(),
            test: None,
            n: 0,
            condition_mean: f64::NAN,
            baseline: f64::NAN,
            statistic: None,
            raw_p: None,
            adjusted_p: None,
            significant: false,
            note: None,
        };
        let Some(x) = values(cmp.condition) else {
            row.note = Some(format!("{} unavailable", metric.name()));
            rows.push(row);
            continue;
        };
        row.n = x.len();
        row.condition_mean = x.iter().sum::<f64>() / x.len() as f64;
        let baseline_runs = match (cmp.baseline_value, cmp.baseline) {
            (Some(v), _) => Some(vec![v]),
            (None, Some(b)) => values(b),
            (None, None) => None,
        };
        let Some(base) = baseline_runs else {
            row.note = Some(format!("baseline {} unavailable", metric.name()));
            rows.push(row);
            continue;
        };
        row.baseline = base.iter().sum::<f64>() / base.len() as f64;
        let result = if base.len() == 1 { t_one_sample(&x, base[0]) } else { wilcoxon_signed_rank(&x, &base) };
        match result {
            Ok(t) => {
                row.test = Some(t.method);
                row.statistic = Some(t.statistic);
                row.raw_p = Some(t.p_value);
            }
            Err(e) => {
                row.test = Some(if base.len() == 1 { TestMethod::TOneSample } else { TestMethod::WilcoxonExact });
                row.note = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    let defined: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.raw_p.is_some()).map(|(i, _)| i).collect();
    let ps: Vec<f64> = defined.iter().map(|&i| rows[i].raw_p.expect("filtered")).collect();
    if let Ok(bh) = bh_correct(&ps, cfg.alpha) {
        for (k, &i) in defined.iter().enumerate() {
            rows[i].adjusted_p = Some(bh.adjusted_p[k]);
            rows[i].significant = bh.significant[k];
        }
    }
    rows
}

/// Rebuilds the report of a run directory from its persisted artifacts.
/// Returns the report and the artifact digests it was computed from.
pub fn build_report(dir: &Path) -> Result<(RunReport, BTreeMap<String, String>), RunnerError> {
    let cfg: ExperimentConfig = read_json(&dir.join("config.json"))?;
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let metrics_dir = dir.join("metrics");
    if fs::read_dir(&metrics_dir).map(|mut d| d.next().is_none()).unwrap_or(true) {
        return Err(RunnerError::Incomplete { path: dir.to_path_buf(), message: "no metrics have been written".into() });
    }
    let samples: Vec<Sample> = read_jsonl(dir.join("corpus/samples.jsonl"))
        .map_err(|e| RunnerError::Incomplete { path: dir.to_path_buf(), message: e.to_string() })?;
    let primary = cfg.primary_metric();

    let mut per_condition: BTreeMap<Condition, Vec<UnitMetrics>> = BTreeMap::new();
    let mut summaries = Vec::new();
    for &condition in &cfg.conditions {
        let mut unit_metrics = Vec::new();
        let (mut degraded, mut unusable) = (0, 0);
        for run in 0..cfg.runs_for(condition) {
            let unit = unit_name(condition, run);
            unit_metrics.push(read_json::<UnitMetrics>(&metrics_dir.join(format!("{unit}.json")))?);
            let composed: Vec<ComposedInput> = read_jsonl(dir.join(format!("augment/composed/{unit}.jsonl")))
                .map_err(|e| RunnerError::Incomplete { path: dir.to_path_buf(), message: e.to_string() })?;
            degraded += composed.iter().filter(|c| c.effective != c.condition).count();
            unusable += samples.len() - composed.len();
        }
        summaries.push(summarize(condition.label().to_string(), &unit_metrics, cfg.dataset, primary, degraded, unusable)?);
        per_condition.insert(condition, unit_metrics);
    }
    let zero_shot = if cfg.zero_shot {
        let m: UnitMetrics = read_json(&metrics_dir.join("zero_shot.json"))?;
        Some(summarize("zero-shot".into(), &[m], cfg.dataset, primary, 0, 0)?)
    } else {
        None
    };

    let clean_path = dir.join("augment/clean.jsonl");
    let validity = if clean_path.is_file() {
        let clean: Vec<CleanLine> = read_jsonl(&clean_path).map_err(|e| RunnerError::stage(Stage::Report, e))?;
        let split_of: HashMap<&str, Split> = samples.iter().map(|s| (s.id.as_str(), s.split)).collect();
        let items = clean.iter().flat_map(|c| {
            let split = split_of.get(c.id.as_str()).copied().unwrap_or(Split::Train);
            c.clean.iter().map(move |(captioner, r)| (split, captioner.as_str(), r))
        });
        ValidityTable::from_results(items).ok()
    } else {
        None
    };

    let mut refusals = BTreeMap::new();
    let mut parse_errors = BTreeMap::new();
    if cfg.needs_augment() {
        for run in 0..cfg.runs_per_condition {
            let records: Vec<AugmentationRecord> = read_jsonl(dir.join(format!("augment/run_{run}.jsonl")))
                .map_err(|e| RunnerError::Incomplete { path: dir.to_path_buf(), message: e.to_string() })?;
            refusals.insert(run, records.iter().filter(|r| r.refusal).count());
            parse_errors.insert(run, records.iter().filter(|r| r.parse_error.is_some()).count());
        }
    }

    let artifacts = artifact_digests(dir)?;
    let manifest_digest = hex::encode(Sha256::digest(
        serde_json::to_vec(&(&manifest.config_digest, &artifacts)).expect("serializable"),
    ));
    let report = RunReport {
        name: cfg.name.clone(),
        dataset: cfg.dataset,
        strategy: cfg.strategy(),
        primary_metric: primary,
        runs_per_condition: cfg.runs_per_condition,
        alpha: cfg.alpha,
        conditions: summaries,
        zero_shot,
        significance: significance(&cfg, &per_condition),
        validity,
        refusals,
        parse_errors,
        manifest_digest,
    };
    Ok((report, artifacts))
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.filter(|x| x.is_finite()).map_or_else(|| "--".to_string(), |x| format!("{x:.decimals$}"))
}

pub fn render_report(r: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Run {}  dataset {}  strategy {:?}  primary metric {}  runs {}\n\n",
        r.name,
        r.dataset,
        r.strategy,
        r.primary_metric.name(),
        r.runs_per_condition
    ));
    let metrics = Metric::reported(r.dataset);
    out.push_str("Ablation (avg (std) / best, x100)\n");
    let mut header = format!("{:<10}", "Condition");
    for m in metrics {
        header.push_str(&format!("  {:<22}", m.header()));
    }
    out.push_str(header.trim_end());
    out.push('\n');
    for s in r.conditions.iter().chain(r.zero_shot.iter()) {
        let mut line = format!("{:<10}", s.condition);
        for m in metrics {
            let cell = s.aggregates.get(m.name()).map_or_else(|| "--".to_string(), |a| a.scaled(100.0).cell());
            line.push_str(&format!("  {cell:<22}"));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    let notes: Vec<String> = r
        .conditions
        .iter()
        .filter(|s| s.degraded > 0 || s.unusable > 0)
        .map(|s| format!("{}: {} degraded, {} unusable inputs across runs", s.condition, s.degraded, s.unusable))
        .collect();
    for n in notes {
        out.push_str(&format!("  {n}\n"));
    }

    if !r.significance.is_empty() {
        out.push_str(&format!("\nSignificance ({}, BH-adjusted, alpha = {})\n", r.primary_metric.name(), r.alpha));
        out.push_str(&format!(
            "{:<18}  {:<22}  {:>8}  {:>8}  {:>8}  {:>8}  {}\n",
            "Comparison", "Test", "Mean", "Baseline", "p", "p (BH)", "Significant"
        ));
        for row in &r.significance {
            let test = row.test.map_or("--".to_string(), |t| serde_json::to_value(t).expect("enum").as_str().unwrap_or("").to_string());
            let mut line = format!(
                "{:<18}  {:<22}  {:>8}  {:>8}  {:>8}  {:>8}  {}",
                row.comparison,
                test,
                fmt_opt(Some(100.0 * row.condition_mean), 1),
                fmt_opt(Some(100.0 * row.baseline), 1),
                fmt_opt(row.raw_p, 4),
                fmt_opt(row.adjusted_p, 4),
                if row.significant { "Yes" } else { "No" }
            );
            if let Some(n) = &row.note {
                line.push_str(&format!("  ({n})"));
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    if let Some(v) = &r.validity {
        out.push_str("\nValid captions (%)\n");
        out.push_str(&v.render());
    }
    if !r.refusals.is_empty() {
        let counts: Vec<String> = r.refusals.iter().map(|(run, n)| format!("run {run}: {n}")).collect();
        out.push_str(&format!("\nRefusals  {}\n", counts.join(", ")));
        let parse: usize = r.parse_errors.values().sum();
        if parse > 0 {
            out.push_str(&format!("Unparseable trigger outputs: {parse}\n"));
        }
    }
    out.push_str(&format!("\nManifest digest {}\n", r.manifest_digest));
    out
}

fn write_report(dir: &Path, r: &RunReport) -> Result<(), RunnerError> {
    write_atomic(&dir.join("report.json"), &json_bytes(r)).map_err(|e| RunnerError::stage(Stage::Report, e))?;
    write_atomic(&dir.join("report.txt"), render_report(r).as_bytes()).map_err(|e| RunnerError::stage(Stage::Report, e))
}

/// Rebuilds and rewrites `report.json` / `report.txt` for a finished run.
pub fn report(dir: &Path) -> Result<RunReport, RunnerError> {
    let (r, _) = build_report(dir)?;
    write_report(dir, &r)?;
    Ok(r)
}
