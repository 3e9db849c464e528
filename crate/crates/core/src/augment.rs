//! Caption cleaning, explanation and trigger generation, and composition of
//! per-condition classifier inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{normalize_text, DatasetId, Sample, Split};
use crate::llm_client::{CachePolicy, CompletionRequest, LlmClient, LlmError, TemplateId};

pub const SEPARATOR: &str = " [SEP] ";
pub const INVALID_SENTINEL: &str = "invalid description";
pub const REFUSAL_WINDOW_CHARS: usize = 200;
pub const DEFAULT_REFUSAL_LEXICON: [&str; 4] =
    ["I apologize", "I cannot", "I'm not able to", "do not feel comfortable"];
/// Stand-in explanation for condition E when a sample has none and empty
/// markers are allowed.
pub const EMPTY_MARKER: &str = "[NONE]";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("sample {sample_id}: {source}")]
    Llm {
        sample_id: String,
        #[source]
        source: LlmError,
    },
    #[error("unknown condition {0:?} (expected T, TC, TE, TCE or E)")]
    UnknownCondition(String),
    #[error("unknown strategy {0:?} (expected explanation or triggers)")]
    UnknownStrategy(String),
    #[error("no clean results to tabulate")]
    EmptyValidity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    T,
    TC,
    TE,
    TCE,
    E,
}

impl Condition {
    pub const ALL: [Condition; 5] = [Condition::T, Condition::TC, Condition::TE, Condition::TCE, Condition::E];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::T => "T",
            Condition::TC => "TC",
            Condition::TE => "TE",
            Condition::TCE => "TCE",
            Condition::E => "E",
        }
    }

    /// Display form used in tables (`T+C+E`).
    pub fn label(self) -> &'static str {
        match self {
            Condition::T => "T",
            Condition::TC => "T+C",
            Condition::TE => "T+E",
            Condition::TCE => "T+C+E",
            Condition::E => "E",
        }
    }

    pub fn uses_text(self) -> bool {
        self != Condition::E
    }

    pub fn uses_caption(self) -> bool {
        matches!(self, Condition::TC | Condition::TCE)
    }

    /// Conditions whose input contains LLM-generated explanation text and so
    /// vary across runs.
    pub fn uses_explanation(self) -> bool {
        matches!(self, Condition::TE | Condition::TCE | Condition::E)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| *c != '+').collect::<String>().to_ascii_uppercase();
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| AugmentError::UnknownCondition(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Explanation,
    Triggers,
}

impl Strategy {
    pub fn default_for(dataset: DatasetId) -> Strategy {
        match dataset {
            DatasetId::SemevalMemes => Strategy::Explanation,
            DatasetId::JigsawToxic | DatasetId::HatefulMemes => Strategy::Triggers,
        }
    }
}

impl FromStr for Strategy {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explanation" => Ok(Strategy::Explanation),
            "triggers" => Ok(Strategy::Triggers),
            other => Err(AugmentError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanStatus {
    Valid,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanResult {
    pub status: CleanStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleaned_caption: Option<String>,
}

impl CleanResult {
    pub fn invalid() -> Self {
        CleanResult { status: CleanStatus::Invalid, cleaned_caption: None }
    }

    pub fn is_valid(&self) -> bool {
        self.status == CleanStatus::Valid
    }

    pub fn caption(&self) -> Option<&str> {
        self.cleaned_caption.as_deref()
    }
}

/// Interprets a cleaning completion. Any response containing the sentinel
/// (case-insensitive), or nothing at all, is invalid.
pub fn interpret_clean(raw: &str) -> CleanResult {
    let cleaned = normalize_text(raw);
    if cleaned.is_empty() || cleaned.to_lowercase().contains(INVALID_SENTINEL) {
        CleanResult::invalid()
    } else {
        CleanResult { status: CleanStatus::Valid, cleaned_caption: Some(cleaned) }
    }
}

#[derive(Debug, Clone)]
pub struct RefusalDetector {
    lexicon: Vec<String>,
}

impl Default for RefusalDetector {
    fn default() -> Self {
        RefusalDetector::new(DEFAULT_REFUSAL_LEXICON)
    }
}

fn fold(text: &str) -> String {
    text.replace(['\u{2019}', '\u{2018}'], "'").to_lowercase()
}

impl RefusalDetector {
    pub fn new<S: AsRef<str>>(lexicon: impl IntoIterator<Item = S>) -> Self {
        RefusalDetector { lexicon: lexicon.into_iter().map(|s| fold(s.as_ref())).collect() }
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    /// True iff a lexicon phrase occurs within the first
    /// [`REFUSAL_WINDOW_CHARS`] characters, ignoring case.
    pub fn detect(&self, text: &str) -> bool {
        let head: String = text.trim_start().chars().take(REFUSAL_WINDOW_CHARS).collect();
        let head = fold(&head);
        self.lexicon.iter().any(|p| head.contains(p.as_str()))
    }
}

pub fn detect_refusal(text: &str) -> bool {
    RefusalDetector::default().detect(text)
}

fn is_na(raw: &str) -> bool {
    let t = raw.trim().trim_end_matches('.').trim();
    t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("n/a")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerOutput {
    pub explanation: String,
    pub triggers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no TRIGGERS line in completion")]
pub struct NoTriggerLine;

fn trigger_line_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*triggers\s*:").expect("static regex"))
}

/// Splits a completion at its last `TRIGGERS:` line (any casing). Lines
/// after it continue the list. Items are comma separated; commas inside
/// straight or curly double quotes do not split. A trailing full stop
/// after the last item is dropped.
pub fn parse_trigger_output(raw: &str) -> Result<TriggerOutput, NoTriggerLine> {
    let lines: Vec<&str> = raw.lines().collect();
    let re = trigger_line_regex();
    let at = lines.iter().rposition(|l| re.is_match(l)).ok_or(NoTriggerLine)?;
    let explanation = lines[..at].join("\n").trim().to_string();
    let first = re.replace(lines[at], "");
    let list = std::iter::once(first.trim())
        .chain(lines[at + 1..].iter().map(|l| l.trim()))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let mut triggers = split_items(&list);
    if let Some(last) = triggers.last_mut() {
        let end = last.trim_end_matches('.').trim_end().len();
        last.truncate(end);
    }
    triggers.retain(|t| !t.is_empty());
    if let [only] = triggers.as_slice() {
        let t = only.trim_end_matches('.').to_ascii_lowercase();
        if t == "none" || t == "n/a" {
            triggers.clear();
        }
    }
    Ok(TriggerOutput { explanation, triggers })
}

fn split_items(list: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut current = String::new();
    let mut straight = false;
    let mut curly = 0usize;
    for c in list.chars() {
        match c {
            '"' => straight = !straight,
            '\u{201c}' => curly += 1,
            '\u{201d}' => curly = curly.saturating_sub(1),
            ',' if !straight && curly == 0 => {
                items.push(std::mem::take(&mut current));
                continue;
            }
            _ => {}
        }
        current.push(c);
    }
    items.push(current);
    items.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Renders a parsed pair back into the prompt's output format.
pub fn format_trigger_output(out: &TriggerOutput) -> String {
    let list = if out.triggers.is_empty() { "none".to_string() } else { out.triggers.join(", ") };
    if out.explanation.is_empty() {
        format!("TRIGGERS: {list}")
    } else {
        format!("{}\nTRIGGERS: {list}", out.explanation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub sample_id: String,
    pub run_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triggers: Option<Vec<String>>,
    #[serde(default)]
    pub clean: BTreeMap<String, CleanResult>,
    pub refusal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    /// Template key (`explain`, `explain_triggers#1`, `clean_caption:blip`)
    /// to request digest.
    #[serde(default)]
    pub raw_completions: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct AugmentSettings {
    pub model_id: String,
    pub clean_temperature: f64,
    pub explain_temperature: f64,
    pub strategy: Strategy,
    pub captioner: String,
    pub refusal: RefusalDetector,
    pub cache_policy: CachePolicy,
    pub parallelism: usize,
}

impl AugmentSettings {
    pub fn new(model_id: impl Into<String>, strategy: Strategy) -> Self {
        AugmentSettings {
            model_id: model_id.into(),
            clean_temperature: TemplateId::CleanCaption.default_temperature(),
            explain_temperature: TemplateId::Explain.default_temperature(),
            strategy,
            captioner: "blip".to_string(),
            refusal: RefusalDetector::default(),
            cache_policy: CachePolicy::Use,
            parallelism: 4,
        }
    }

    fn clean_request(&self, caption: &str) -> CompletionRequest {
        CompletionRequest::new(TemplateId::CleanCaption, &self.model_id, 0)
            .field("caption", caption)
            .temperature(self.clean_temperature)
            .policy(self.cache_policy)
    }

    fn explain_request(&self, sample: &Sample, img: &str, run_index: u32, attempt: u32) -> CompletionRequest {
        let template = match self.strategy {
            Strategy::Explanation => TemplateId::Explain,
            Strategy::Triggers => TemplateId::ExplainTriggers,
        };
        CompletionRequest::new(template, &self.model_id, run_index)
            .field("text", &sample.text)
            .field("img", img)
            .temperature(self.explain_temperature)
            .attempt(attempt)
            .policy(self.cache_policy)
    }
}

/// Cleans one caption. Cleaning is deterministic and runs once
/// (`run_index` 0) regardless of the augmentation run.
pub fn clean_caption(caption: &str, llm: &LlmClient, settings: &AugmentSettings) -> Result<(CleanResult, String), LlmError> {
    let c = llm.complete(&settings.clean_request(caption))?;
    Ok((interpret_clean(&c.raw_text), c.request_digest))
}

/// Caption fed to `{img}`: the cleaned caption of the configured captioner
/// when valid, otherwise empty.
pub fn best_caption<'a>(clean: &'a BTreeMap<String, CleanResult>, captioner: &str) -> &'a str {
    clean.get(captioner).and_then(CleanResult::caption).unwrap_or("")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationOutcome {
    pub explanation: Option<String>,
    pub refusal: bool,
    pub digest: String,
}

fn interpret_explanation(raw: &str, refusal: &RefusalDetector, sample_id: &str) -> (Option<String>, bool) {
    if refusal.detect(raw) {
        log::info!("sample {sample_id}: explanation classified as refusal");
        return (None, true);
    }
    let text = normalize_text(raw);
    if text.is_empty() || is_na(&text) {
        (None, false)
    } else {
        (Some(text), false)
    }
}

pub fn gen_explanation(
    sample: &Sample,
    img: &str,
    llm: &LlmClient,
    settings: &AugmentSettings,
    run_index: u32,
) -> Result<ExplanationOutcome, LlmError> {
    let settings = AugmentSettings { strategy: Strategy::Explanation, ..settings.clone() };
    let c = llm.complete(&settings.explain_request(sample, img, run_index, 0))?;
    let (explanation, refusal) = interpret_explanation(&c.raw_text, &settings.refusal, &sample.id);
    Ok(ExplanationOutcome { explanation, refusal, digest: c.request_digest })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerOutcome {
    pub explanation: Option<String>,
    pub triggers: Vec<String>,
    pub refusal: bool,
    pub parse_error: Option<String>,
    pub digests: Vec<String>,
}

enum TriggerAttempt {
    Parsed(TriggerOutput),
    Refused,
    Unparseable(String),
}

fn interpret_triggers(raw: &str, refusal: &RefusalDetector, sample_id: &str) -> TriggerAttempt {
    if refusal.detect(raw) {
        log::info!("sample {sample_id}: trigger completion classified as refusal");
        return TriggerAttempt::Refused;
    }
    match parse_trigger_output(raw) {
        Ok(out) => TriggerAttempt::Parsed(out),
        Err(e) => TriggerAttempt::Unparseable(e.to_string()),
    }
}

fn finish_triggers(attempt: TriggerAttempt, digests: Vec<String>) -> TriggerOutcome {
    match attempt {
        TriggerAttempt::Parsed(out) => TriggerOutcome {
            explanation: Some(normalize_text(&out.explanation)).filter(|e| !e.is_empty() && !is_na(e)),
            triggers: out.triggers,
            refusal: false,
            parse_error: None,
            digests,
        },
        TriggerAttempt::Refused => {
            TriggerOutcome { explanation: None, triggers: Vec::new(), refusal: true, parse_error: None, digests }
        }
        TriggerAttempt::Unparseable(e) => {
            TriggerOutcome { explanation: None, triggers: Vec::new(), refusal: false, parse_error: Some(e), digests }
        }
    }
}

/// Explanation plus triggers. A refusal or unparseable completion is
/// retried once with the same settings (`attempt` 1).
pub fn gen_triggers(
    sample: &Sample,
    img: &str,
    llm: &LlmClient,
    settings: &AugmentSettings,
    run_index: u32,
) -> Result<TriggerOutcome, LlmError> {
    let settings = AugmentSettings { strategy: Strategy::Triggers, ..settings.clone() };
    let first = llm.complete(&settings.explain_request(sample, img, run_index, 0))?;
    let mut digests = vec![first.request_digest];
    let mut attempt = interpret_triggers(&first.raw_text, &settings.refusal, &sample.id);
    if !matches!(attempt, TriggerAttempt::Parsed(_)) {
        let second = llm.complete(&settings.explain_request(sample, img, run_index, 1))?;
        digests.push(second.request_digest);
        attempt = interpret_triggers(&second.raw_text, &settings.refusal, &sample.id);
    }
    Ok(finish_triggers(attempt, digests))
}

/// Cleans every caption once, then generates explanations (or triggers)
/// for `runs` independent runs. Records come back ordered by run, then by
/// input sample order. Any provider failure aborts the stage; completed
/// calls stay cached, so a rerun resumes where it stopped.
pub fn augment_corpus(
    samples: &[Sample],
    llm: &LlmClient,
    settings: &AugmentSettings,
    runs: u32,
) -> Result<Vec<AugmentationRecord>, AugmentError> {
    let cleaned = clean_corpus(samples, llm, settings)?;
    let mut records = Vec::with_capacity(samples.len() * runs as usize);
    for run in 0..runs {
        records.extend(augment_run(samples, &cleaned, llm, settings, run)?);
    }
    Ok(records)
}

pub type CleanMap = BTreeMap<String, CleanResult>;

/// Per-sample clean results and their digests, in input order.
pub fn clean_corpus(
    samples: &[Sample],
    llm: &LlmClient,
    settings: &AugmentSettings,
) -> Result<Vec<(CleanMap, BTreeMap<String, String>)>, AugmentError> {
    let mut jobs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for (captioner, caption) in &s.captions {
            if !caption.trim().is_empty() {
                jobs.push((i, captioner.clone(), settings.clean_request(caption)));
            }
        }
    }
    let requests: Vec<CompletionRequest> = jobs.iter().map(|(_, _, r)| r.clone()).collect();
    let results = llm.complete_all(&requests, settings.parallelism);
    let mut out = vec![(CleanMap::new(), BTreeMap::new()); samples.len()];
    for ((i, captioner, _), result) in jobs.into_iter().zip(results) {
        let c = result.map_err(|source| AugmentError::Llm { sample_id: samples[i].id.clone(), source })?;
        out[i].1.insert(format!("clean_caption:{captioner}"), c.request_digest.clone());
        out[i].0.insert(captioner, interpret_clean(&c.raw_text));
    }
    Ok(out)
}

/// One augmentation run over the corpus, given its clean results.
pub fn augment_run(
    samples: &[Sample],
    cleaned: &[(CleanMap, BTreeMap<String, String>)],
    llm: &LlmClient,
    settings: &AugmentSettings,
    run: u32,
) -> Result<Vec<AugmentationRecord>, AugmentError> {
    let key = match settings.strategy {
        Strategy::Explanation => TemplateId::Explain,
        Strategy::Triggers => TemplateId::ExplainTriggers,
    };
    let imgs: Vec<&str> = cleaned.iter().map(|(c, _)| best_caption(c, &settings.captioner)).collect();
    let first: Vec<CompletionRequest> =
        samples.iter().zip(&imgs).map(|(s, img)| settings.explain_request(s, img, run, 0)).collect();
    let first_results = llm.complete_all(&first, settings.parallelism);

    let mut records = Vec::with_capacity(samples.len());
    let mut retry_idx = Vec::new();
    let mut attempts = Vec::with_capacity(samples.len());
    for (i, result) in first_results.into_iter().enumerate() {
        let s = &samples[i];
        let c = result.map_err(|source| AugmentError::Llm { sample_id: s.id.clone(), source })?;
        let mut raw_completions = cleaned[i].1.clone();
        raw_completions.insert(key.as_str().to_string(), c.request_digest.clone());
        let mut record = AugmentationRecord {
            sample_id: s.id.clone(),
            run_index: run,
            explanation: None,
            triggers: None,
            clean: cleaned[i].0.clone(),
            refusal: false,
            parse_error: None,
            raw_completions,
        };
        match settings.strategy {
            Strategy::Explanation => {
                let (explanation, refusal) = interpret_explanation(&c.raw_text, &settings.refusal, &s.id);
                record.explanation = explanation;
                record.refusal = refusal;
                attempts.push(None);
            }
            Strategy::Triggers => {
                let a = interpret_triggers(&c.raw_text, &settings.refusal, &s.id);
                if !matches!(a, TriggerAttempt::Parsed(_)) {
                    retry_idx.push(i);
                }
                attempts.push(Some(a));
            }
        }
        records.push(record);
    }

    if !retry_idx.is_empty() {
        let retries: Vec<CompletionRequest> =
            retry_idx.iter().map(|&i| settings.explain_request(&samples[i], imgs[i], run, 1)).collect();
        for (&i, result) in retry_idx.iter().zip(llm.complete_all(&retries, settings.parallelism)) {
            let c = result.map_err(|source| AugmentError::Llm { sample_id: samples[i].id.clone(), source })?;
            records[i].raw_completions.insert(format!("{}#1", key.as_str()), c.request_digest.clone());
            attempts[i] = Some(interpret_triggers(&c.raw_text, &settings.refusal, &samples[i].id));
        }
    }

    for (record, attempt) in records.iter_mut().zip(attempts) {
        if let Some(a) = attempt {
            let outcome = finish_triggers(a, Vec::new());
            record.explanation = outcome.explanation;
            record.triggers = Some(outcome.triggers).filter(|t| !t.is_empty());
            record.refusal = outcome.refusal;
            record.parse_error = outcome.parse_error;
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartRole {
    MemeText,
    Caption,
    Explanation,
    Triggers,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub role: PartRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedInput {
    pub sample_id: String,
    pub condition: Condition,
    /// Condition actually realized after fallbacks (e.g. TCE → TC when the
    /// explanation is missing).
    pub effective: Condition,
    pub text: String,
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone)]
pub struct ComposeSettings {
    pub strategy: Strategy,
    pub captioner: String,
    pub separator: String,
    /// Compose E with [`EMPTY_MARKER`] instead of marking the sample
    /// unusable.
    pub allow_empty_marker: bool,
}

impl ComposeSettings {
    pub fn new(strategy: Strategy, captioner: impl Into<String>) -> Self {
        ComposeSettings {
            strategy,
            captioner: captioner.into(),
            separator: SEPARATOR.to_string(),
            allow_empty_marker: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("sample {sample_id} has no explanation for condition {condition}")]
pub struct Unusable {
    pub sample_id: String,
    pub condition: Condition,
}

/// The caption part for a sample, if its cleaned caption is valid. Invalid
/// or missing captions fall back to text only.
pub fn fallback_compose<'a>(record: Option<&'a AugmentationRecord>, captioner: &str) -> Option<&'a str> {
    record.and_then(|r| r.clean.get(captioner)).and_then(CleanResult::caption)
}

pub fn compose_input(
    sample: &Sample,
    record: Option<&AugmentationRecord>,
    condition: Condition,
    settings: &ComposeSettings,
) -> Result<ComposedInput, Unusable> {
    let mut parts = Vec::new();
    if condition.uses_text() {
        parts.push(Part { role: PartRole::MemeText, content: sample.text.clone() });
    }
    let caption = if condition.uses_caption() { fallback_compose(record, &settings.captioner) } else { None };
    if let Some(c) = caption {
        parts.push(Part { role: PartRole::Caption, content: c.to_string() });
    }
    let mut has_expl = false;
    if condition.uses_explanation() {
        let explanation = record.and_then(|r| r.explanation.as_deref());
        let triggers = match settings.strategy {
            Strategy::Triggers => record.and_then(|r| r.triggers.as_ref()),
            Strategy::Explanation => None,
        };
        match explanation {
            Some(e) => parts.push(Part { role: PartRole::Explanation, content: e.to_string() }),
            None if condition == Condition::E && triggers.is_none() => {
                if !settings.allow_empty_marker {
                    return Err(Unusable { sample_id: sample.id.clone(), condition });
                }
                parts.push(Part { role: PartRole::Explanation, content: EMPTY_MARKER.to_string() });
            }
            None => {}
        }
        if let Some(t) = triggers {
            parts.push(Part { role: PartRole::Triggers, content: format!("TRIGGERS: {}", t.join(", ")) });
        }
        has_expl = explanation.is_some() || triggers.is_some();
    }
    let effective = match condition {
        Condition::E => Condition::E,
        _ => match (caption.is_some(), has_expl) {
            (false, false) => Condition::T,
            (true, false) => Condition::TC,
            (false, true) => Condition::TE,
            (true, true) => Condition::TCE,
        },
    };
    let text = parts.iter().map(|p| p.content.as_str()).collect::<Vec<_>>().join(&settings.separator);
    Ok(ComposedInput { sample_id: sample.id.clone(), condition, effective, text, parts })
}

/// Validity of cleaned captions per captioner and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityTable {
    /// captioner → split → (valid, total)
    pub cells: BTreeMap<String, BTreeMap<Split, (usize, usize)>>,
}

impl ValidityTable {
    pub fn from_results<'a>(
        items: impl IntoIterator<Item = (Split, &'a str, &'a CleanResult)>,
    ) -> Result<ValidityTable, AugmentError> {
        let mut cells: BTreeMap<String, BTreeMap<Split, (usize, usize)>> = BTreeMap::new();
        for (split, captioner, result) in items {
            let cell = cells.entry(captioner.to_string()).or_default().entry(split).or_default();
            cell.1 += 1;
            if result.is_valid() {
                cell.0 += 1;
            }
        }
        if cells.is_empty() {
            return Err(AugmentError::EmptyValidity);
        }
        Ok(ValidityTable { cells })
    }

    pub fn rate(&self, captioner: &str, split: Split) -> Option<f64> {
        let &(valid, total) = self.cells.get(captioner)?.get(&split)?;
        (total > 0).then(|| 100.0 * valid as f64 / total as f64)
    }

    pub fn cell(&self, captioner: &str, split: Split) -> String {
        self.rate(captioner, split).map_or_else(|| "--".to_string(), |r| format!("{r:.1}"))
    }

    /// Rate pooled over all splits.
    pub fn overall(&self, captioner: &str) -> Option<f64> {
        let (valid, total) = self
            .cells
            .get(captioner)?
            .values()
            .fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
        (total > 0).then(|| 100.0 * valid as f64 / total as f64)
    }

    pub fn overall_cell(&self, captioner: &str) -> String {
        self.overall(captioner).map_or_else(|| "--".to_string(), |r| format!("{r:.1}"))
    }

    pub fn render(&self) -> String {
        let width = self.cells.keys().map(|k| k.len()).max().unwrap_or(0).max(9);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "Captioner", "Train", "Dev", "Test", "All");
        for captioner in self.cells.keys() {
            out.push_str(&format!(
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n",
                captioner,
                self.cell(captioner, Split::Train),
                self.cell(captioner, Split::Dev),
                self.cell(captioner, Split::Test),
                self.overall_cell(captioner)
            ));
        }
        out
    }
}

/// Tabulates the clean results of run-0 records against their samples'
/// splits.
pub fn validity_rate(samples: &[Sample], records: &[AugmentationRecord]) -> Result<ValidityTable, AugmentError> {
    let split_of: BTreeMap<&str, Split> = samples.iter().map(|s| (s.id.as_str(), s.split)).collect();
    let items = records
        .iter()
        .filter(|r| r.run_index == 0)
        .filter_map(|r| split_of.get(r.sample_id.as_str()).map(|s| (*s, r)))
        .flat_map(|(split, r)| r.clean.iter().map(move |(c, res)| (split, c.as_str(), res)));
    ValidityTable::from_results(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::LabelSet;
    use crate::llm_client::{MockProvider, Scenario};
    use std::sync::Arc;

    const MUSLIM_DOLL: &str = "This meme is harmful because it perpetuates the stereotype that Muslims \nare inherently threatening or intimidating, implying that people are afraid to interact \nwith the doll because of its Muslim identity. This reinforces negative attitudes towards \nMuslims and contributes to a culture of Islamophobia. The meme's use of profanity and \nmocking tone further exacerbates the harm. \n\nTriggers: Islamophobia, xenophobia, \n\"nobody knows what the fuck its says, because no one has the guts to pull the string\"";

    const HOMELESS: &str = "This statement promotes harmful beliefs by implying that undocumented \nimmigrants are less deserving of support and resources than American citizens.\n\nTriggers: xenophobia, dehumanization, \"illegal aliens\"";

    const REFUSAL: &str = "I apologize, but I do not feel comfortable creating content that promotes harmful stereotypes.";

    fn sample(id: &str, text: &str, caption: Option<&str>) -> Sample {
        Sample {
            id: id.into(),
            dataset: DatasetId::SemevalMemes,
            split: Split::Train,
            text: text.into(),
            captions: caption.map(|c| [("blip".to_string(), c.to_string())].into_iter().collect()).unwrap_or_default(),
            image_ref: None,
            gold: LabelSet::new(),
            human_explanation: None,
        }
    }

    fn client(scenario: &str) -> LlmClient {
        let s: Scenario = serde_json::from_str(scenario).unwrap();
        LlmClient::new(Arc::new(MockProvider::new(s).unwrap()))
    }

    #[test]
    fn clean_interpretation() {
        assert_eq!(
            interpret_clean("a man holding a sign at a rally"),
            CleanResult { status: CleanStatus::Valid, cleaned_caption: Some("a man holding a sign at a rally".into()) }
        );
        assert!(!interpret_clean("INVALID DESCRIPTION").is_valid());
        assert!(!interpret_clean("invalid description.").is_valid());
        assert!(!interpret_clean("  The answer is: Invalid Description  ").is_valid());
        assert!(!interpret_clean("   ").is_valid());
    }

    #[test]
    fn clean_caption_uses_run_zero_and_deterministic_temperature() {
        let llm = client(r#"{"strict":true,"rules":[{"template":"clean_caption","field":"caption","equals":"man man sign","responses":["a man with a sign","never"]}]}"#);
        let settings = AugmentSettings::new("m", Strategy::Explanation);
        let (r, digest) = clean_caption("man man sign", &llm, &settings).unwrap();
        assert_eq!(r.caption(), Some("a man with a sign"));
        assert_eq!(digest, settings.clean_request("man man sign").digest());
        assert_eq!(settings.clean_request("x").temperature, 0.0);
    }

    #[test]
    fn trigger_parsing_fixtures() {
        let p = parse_trigger_output("Harmful stereotype.\nTRIGGERS: racism, \"slur\"").unwrap();
        assert_eq!(p.explanation, "Harmful stereotype.");
        assert_eq!(p.triggers, vec!["racism", "\"slur\""]);

        let p = parse_trigger_output(MUSLIM_DOLL).unwrap();
        assert_eq!(
            p.triggers,
            vec![
                "Islamophobia",
                "xenophobia",
                "\"nobody knows what the fuck its says, because no one has the guts to pull the string\""
            ]
        );
        assert!(p.explanation.ends_with("further exacerbates the harm."));

        let p = parse_trigger_output(HOMELESS).unwrap();
        assert_eq!(p.triggers, vec!["xenophobia", "dehumanization", "\"illegal aliens\""]);

        assert!(parse_trigger_output("A harmless joke.\nTRIGGERS: none").unwrap().triggers.is_empty());
        assert!(parse_trigger_output("x\n  triggers :  N/A").unwrap().triggers.is_empty());
        assert_eq!(parse_trigger_output("I cannot help with that."), Err(NoTriggerLine));
    }

    #[test]
    fn trigger_parsing_edge_cases() {
        let p = parse_trigger_output("Mentions TRIGGERS: early\nTriggers: a\nmore text\nTRIGGERS: b, , c,").unwrap();
        assert_eq!(p.explanation, "Mentions TRIGGERS: early\nTriggers: a\nmore text");
        assert_eq!(p.triggers, vec!["b", "c"]);
        let p = parse_trigger_output("E.\nTriggers: \u{201c}go back, now\u{201d}, hate").unwrap();
        assert_eq!(p.triggers, vec!["\u{201c}go back, now\u{201d}", "hate"]);
    }

    #[test]
    fn refusal_detection() {
        assert!(detect_refusal(REFUSAL));
        assert!(detect_refusal("I\u{2019}m not able to help with this request."));
        assert!(!detect_refusal("The meme mocks politicians for broken promises."));
        assert!(detect_refusal("I apologize for the typo in the meme text, which says..."));
        let late = format!("{} I cannot", "x".repeat(REFUSAL_WINDOW_CHARS));
        assert!(!detect_refusal(&late));
        assert!(RefusalDetector::new(["sorry"]).detect("Sorry, no."));
    }

    #[test]
    fn explanation_outcomes() {
        let llm = client(&format!(
            r#"{{"rules":[
                {{"template":"explain","field":"text","equals":"gibberish","responses":["NA"]}},
                {{"template":"explain","field":"text","equals":"hateful","responses":[{}]}},
                {{"template":"explain","responses":["The meme urges distrust of officials."]}}
            ]}}"#,
            serde_json::to_string(REFUSAL).unwrap()
        ));
        let settings = AugmentSettings::new("m", Strategy::Explanation);
        let go = |t: &str| gen_explanation(&sample("1", t, None), "", &llm, &settings, 0).unwrap();
        assert_eq!(go("vote").explanation.as_deref(), Some("The meme urges distrust of officials."));
        assert_eq!((go("gibberish").explanation, go("gibberish").refusal), (None, false));
        assert_eq!((go("hateful").explanation, go("hateful").refusal), (None, true));
    }

    #[test]
    fn triggers_retry_once_then_record() {
        let llm = client(&format!(
            r#"{{"rules":[
                {{"template":"explain_triggers","field":"text","equals":"recover","attempt":0,"responses":[{r}]}},
                {{"template":"explain_triggers","field":"text","equals":"recover","attempt":1,"responses":["Stereotype.\nTriggers: racism"]}},
                {{"template":"explain_triggers","field":"text","equals":"refuse","responses":[{r}]}},
                {{"template":"explain_triggers","field":"text","equals":"garbled","responses":["no list here"]}},
                {{"template":"explain_triggers","responses":["Benign.\nTRIGGERS: none"]}}
            ]}}"#,
            r = serde_json::to_string(REFUSAL).unwrap()
        ));
        let settings = AugmentSettings::new("m", Strategy::Triggers);
        let go = |t: &str| gen_triggers(&sample("1", t, None), "", &llm, &settings, 2).unwrap();
        let r = go("recover");
        assert_eq!((r.triggers, r.refusal, r.digests.len()), (vec!["racism".to_string()], false, 2));
        let r = go("refuse");
        assert!(r.refusal && r.explanation.is_none() && r.digests.len() == 2);
        let r = go("garbled");
        assert!(!r.refusal && r.parse_error.is_some());
        let r = go("benign");
        assert_eq!((r.explanation.as_deref(), r.triggers.len(), r.digests.len()), (Some("Benign."), 0, 1));
    }

    fn record(expl: Option<&str>, triggers: Option<Vec<&str>>, caption: Option<CleanResult>) -> AugmentationRecord {
        AugmentationRecord {
            sample_id: "s".into(),
            run_index: 0,
            explanation: expl.map(str::to_string),
            triggers: triggers.map(|t| t.into_iter().map(str::to_string).collect()),
            clean: caption.map(|c| [("blip".to_string(), c)].into_iter().collect()).unwrap_or_default(),
            refusal: expl.is_none(),
            parse_error: None,
            raw_completions: BTreeMap::new(),
        }
    }

    fn valid(c: &str) -> CleanResult {
        CleanResult { status: CleanStatus::Valid, cleaned_caption: Some(c.into()) }
    }

    #[test]
    fn composition() {
        let s = sample("s", "vote for X", Some("raw"));
        let cs = ComposeSettings::new(Strategy::Explanation, "blip");
        let full = record(Some("It urges votes."), None, Some(valid("a crowd")));

        let t = compose_input(&s, Some(&full), Condition::T, &cs).unwrap();
        assert_eq!(t.text, "vote for X");
        assert_eq!(t.parts.len(), 1);

        let tce = compose_input(&s, Some(&full), Condition::TCE, &cs).unwrap();
        assert_eq!(tce.text, "vote for X [SEP] a crowd [SEP] It urges votes.");
        assert_eq!(tce.effective, Condition::TCE);

        let invalid = record(Some("It urges votes."), None, Some(CleanResult::invalid()));
        let tc = compose_input(&s, Some(&invalid), Condition::TC, &cs).unwrap();
        assert_eq!((tc.text.as_str(), tc.effective), ("vote for X", Condition::T));

        let refused = record(None, None, Some(valid("a crowd")));
        assert_eq!(compose_input(&s, Some(&refused), Condition::TCE, &cs).unwrap().effective, Condition::TC);
        assert_eq!(compose_input(&s, Some(&refused), Condition::TE, &cs).unwrap().text, "vote for X");
        assert!(compose_input(&s, Some(&refused), Condition::E, &cs).is_err());
        let lenient = ComposeSettings { allow_empty_marker: true, ..cs.clone() };
        assert_eq!(compose_input(&s, Some(&refused), Condition::E, &lenient).unwrap().text, EMPTY_MARKER);

        let e = compose_input(&s, Some(&full), Condition::E, &cs).unwrap();
        assert_eq!(e.text, "It urges votes.");
    }

    #[test]
    fn trigger_composition() {
        let s = sample("s", "meme text", None);
        let cs = ComposeSettings::new(Strategy::Triggers, "blip");
        let r = record(Some("Stereotyping."), Some(vec!["Islamophobia", "\"Muslim doll\""]), None);
        let te = compose_input(&s, Some(&r), Condition::TE, &cs).unwrap();
        assert_eq!(te.text, "meme text [SEP] Stereotyping. [SEP] TRIGGERS: Islamophobia, \"Muslim doll\"");
        assert_eq!(te.parts.last().unwrap().role, PartRole::Triggers);
        let e = compose_input(&s, Some(&r), Condition::E, &cs).unwrap();
        assert_eq!(e.parts.len(), 2);
        let sep_count = te.text.matches(SEPARATOR).count();
        assert_eq!(sep_count, te.parts.len() - 1);
    }

    #[test]
    fn corpus_augmentation_never_drops() {
        let samples: Vec<Sample> = (0..20)
            .map(|i| sample(&format!("{i:02}"), &format!("text {i}"), (i % 5 != 4).then_some(if i % 3 == 0 { "bad" } else { "fine" })))
            .collect();
        let llm = client(
            r#"{"rules":[
                {"template":"clean_caption","field":"caption","equals":"bad","responses":["INVALID DESCRIPTION"]},
                {"template":"clean_caption","responses":["a clean caption"]},
                {"template":"explain","responses":["run zero","run one"]}
            ]}"#,
        );
        let settings = AugmentSettings::new("m", Strategy::Explanation);
        let records = augment_corpus(&samples, &llm, &settings, 2).unwrap();
        assert_eq!(records.len(), 40);
        assert_eq!(records[20].explanation.as_deref(), Some("run one"));
        let cs = ComposeSettings::new(Strategy::Explanation, "blip");
        for cond in [Condition::T, Condition::TC, Condition::TE, Condition::TCE] {
            let n = samples.iter().zip(&records).filter(|(s, r)| compose_input(s, Some(r), cond, &cs).is_ok()).count();
            assert_eq!(n, samples.len());
        }
        let table = validity_rate(&samples, &records).unwrap();
        let (valid, total) = table.cells["blip"][&Split::Train];
        assert_eq!(total, 16);
        assert_eq!(valid, 16 - samples.iter().filter(|s| s.captions.get("blip").is_some_and(|c| c == "bad")).count());
        assert_eq!(table.cell("blip", Split::Test), "--");
    }

    #[test]
    fn validity_formatting() {
        let v = valid("c");
        let inv = CleanResult::invalid();
        let items: Vec<(Split, &str, &CleanResult)> = (0..1000).map(|i| (Split::Train, "blip", if i < 899 { &v } else { &inv })).collect();
        let t = ValidityTable::from_results(items).unwrap();
        assert_eq!(t.cell("blip", Split::Train), "89.9");
        assert_eq!(t.cell("blip", Split::Dev), "--");
        assert!(t.render().contains("89.9"));
        assert!(matches!(ValidityTable::from_results(Vec::new()), Err(AugmentError::EmptyValidity)));
    }

    #[test]
    fn condition_names() {
        assert_eq!("T+C+E".parse::<Condition>().unwrap(), Condition::TCE);
        assert_eq!("tc".parse::<Condition>().unwrap(), Condition::TC);
        assert!("TX".parse::<Condition>().is_err());
        assert_eq!(serde_json::to_string(&Condition::TCE).unwrap(), "\"TCE\"");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn format_parse_round_trip(
                explanation in "[A-Za-z .,']{0,40}",
                triggers in proptest::collection::vec("[A-Za-z ]{1,12}|\"[a-z ,]{1,12}\"", 0..5),
            ) {
                let explanation = explanation.trim().to_string();
                let triggers: Vec<String> = triggers.into_iter().map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty() && !t.eq_ignore_ascii_case("none") && !t.eq_ignore_ascii_case("n/a"))
                    .collect();
                prop_assume!(!explanation.to_ascii_lowercase().trim_start().starts_with("triggers"));
                let parsed = TriggerOutput { explanation, triggers };
                let again = parse_trigger_output(&format_trigger_output(&parsed)).unwrap();
                prop_assert_eq!(again, parsed);
            }
        }
    }
}
