//! Chat-completion client: prompt templates, on-disk completion cache,
//! retry with backoff, a scriptable mock provider and an HTTP provider for
//! OpenAI-compatible endpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_API_BASE: &str = "SEMAUG_API_BASE";
pub const ENV_API_KEY: &str = "SEMAUG_API_KEY";

pub const DEFAULT_MAX_RESPONSE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    CleanCaption,
    Explain,
    ExplainTriggers,
    ZeroShotClassify,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::CleanCaption,
        TemplateId::Explain,
        TemplateId::ExplainTriggers,
        TemplateId::ZeroShotClassify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::CleanCaption => "clean_caption",
            TemplateId::Explain => "explain",
            TemplateId::ExplainTriggers => "explain_triggers",
            TemplateId::ZeroShotClassify => "zero_shot_classify",
        }
    }

    pub fn template(self) -> &'static PromptTemplate {
        match self {
            TemplateId::CleanCaption => &CLEAN_CAPTION,
            TemplateId::Explain => &EXPLAIN,
            TemplateId::ExplainTriggers => &EXPLAIN_TRIGGERS,
            TemplateId::ZeroShotClassify => &ZERO_SHOT_CLASSIFY,
        }
    }

    pub fn default_temperature(self) -> f64 {
        match self {
            TemplateId::CleanCaption | TemplateId::ZeroShotClassify => 0.0,
            TemplateId::Explain | TemplateId::ExplainTriggers => 0.7,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| LlmError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
    pub placeholders: &'static [&'static str],
    pub max_response_tokens: u32,
}

pub static CLEAN_CAPTION: PromptTemplate = PromptTemplate {
    id: TemplateId::CleanCaption,
    body: concat!(
        "You are an AI assistant that cleans and corrects image descriptions. \n",
        "Improve the following description by fixing grammatical errors, \n",
        "removing repetitive phrases, and ensuring it is clear and coherent. \n",
        "Provide only the cleaned description without any additional notes \n",
        "or explanations. If the description is too corrupted to fix, respond with \n",
        "\"INVALID DESCRIPTION\".",
        "\n\nDescription: {caption}",
    ),
    placeholders: &["caption"],
    max_response_tokens: 256,
};

pub static EXPLAIN: PromptTemplate = PromptTemplate {
    id: TemplateId::Explain,
    body: concat!(
        "Analyze this meme text: '{text}' and image: '{img}'\n",
        "Your task: Explain what idea or message this meme is trying to convey.\n",
        "Rules:\n",
        "1. Response must be ONE clear, concise sentence (max 50 tokens)\n",
        "2. Focus on the main message or emotional impact\n",
        "3. Be specific and direct\n",
        "4. Only respond 'NA' if the text is completely incomprehensible",
    ),
    placeholders: &["text", "img"],
    max_response_tokens: 128,
};

pub static EXPLAIN_TRIGGERS: PromptTemplate = PromptTemplate {
    id: TemplateId::ExplainTriggers,
    body: concat!(
        "\n",
        "                    You are analyzing memes to train a hateful content classifier.\n",
        "                    It is crucial that you reproduce all text exactly as provided, \n",
        "                    including any profanity, slurs, or offensive terms. \n",
        "                    Do not mask, omit, or alter them. \n",
        "\n",
        "                    Provide:\n",
        "                    1) A brief explanation (max 50 tokens) of the meme's implied meaning \n",
        "                    and cultural context.\n",
        "                    2) A combined TRIGGERS list (max 20 tokens), which must include:\n",
        "                       - Themes or categories (e.g., racism, islamophobia, etc.)\n",
        "                       - Any hateful or offensive words/phrases directly quoted from the \n",
        "                       meme text.\n",
        "                    Use the following plain-text format (no extra commentary):\n",
        "                    [Explanation]\n",
        "                    TRIGGERS: [themes and words]\n",
        "                    Meme text: {text}\n\n",
        "                    Meme image: {img}\n\n\n",
        "    Response:",
    ),
    placeholders: &["text", "img"],
    max_response_tokens: 192,
};

pub static ZERO_SHOT_CLASSIFY: PromptTemplate = PromptTemplate {
    id: TemplateId::ZeroShotClassify,
    body: concat!(
        "You are an expert in identifying propaganda techniques in images. \n",
        "You have a hierarchy of propaganda techniques with the following nodes \n",
        "(each bullet is a node):\n",
        "- ROOT\n",
        "  - Logos\n",
        "    - Repetition\n",
        "    - Obfuscation, Intentional vagueness, Confusion\n",
        "    - Reasoning\n",
        "      - Simplification\n",
        "        - Causal Oversimplification\n",
        "        - Black-and-white Fallacy/Dictatorship\n",
        "        - Thought-terminating clich\u{e9}\n",
        "      - Distraction\n",
        "        - Misrepresentation of Someone's Position (Straw Man)\n",
        "        - Presenting Irrelevant Data (Red Herring)\n",
        "        - Whataboutism\n",
        "    - Justification\n",
        "      - Slogans\n",
        "      - Bandwagon\n",
        "      - Appeal to authority\n",
        "      - Flag-waving\n",
        "      - Appeal to fear/prejudice\n",
        "  - Ethos\n",
        "    - Appeal to authority\n",
        "    - Glittering generalities (Virtue)\n",
        "    - Bandwagon\n",
        "    - Ad Hominem\n",
        "      - Doubt\n",
        "      - Name calling/Labeling\n",
        "      - Smears\n",
        "      - Reductio ad hitlerum\n",
        "      - Whataboutism\n",
        "    - Transfer\n",
        "  - Pathos\n",
        "    - Exaggeration/Minimisation\n",
        "    - Loaded Language\n",
        "    - Appeal to (Strong) Emotions\n",
        "    - Appeal to fear/prejudice\n",
        "    - Flag-waving\n",
        "    - Transfer\n",
        "\n",
        "Instructions:\n",
        "- Return only a JSON object with:\n",
        "  {\n",
        "    \"labels\": [\"<label1>\", \"<label2>\", ...]\n",
        "  }\n",
        "- Do not include explanations, reasoning, or any text outside of the JSON object.\n",
        "- Do not include code blocks, markdown formatting, or backticks.\n",
        "- The labels must be chosen from the provided hierarchy.\n",
        "- Multiple labels are allowed if applicable. If none apply, \n",
        "return an empty list for \"labels\".\n",
        "- The final answer must be a valid JSON object without extra formatting.\n",
        "\nMeme text: {text}\nMeme image: {img}\n",
    ),
    placeholders: &["text", "img"],
    max_response_tokens: 256,
};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transient provider failure: {message}")]
    Transient { message: String, retry_after: Option<Duration> },
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("response of {bytes} bytes exceeds the {limit}-byte bound")]
    TooLarge { bytes: usize, limit: usize },
    #[error("no scenario rule matches {template} request {digest}")]
    Unmatched { template: TemplateId, digest: String },
    #[error("provider error: {0}")]
    Fatal(String),
}

impl ProviderError {
    fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transient { .. } | ProviderError::RateLimited { .. })
    }

    fn retry_after(&self) -> Option<Duration> {
        match self {
            ProviderError::Transient { retry_after, .. } | ProviderError::RateLimited { retry_after } => *retry_after,
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template}: placeholder {{{placeholder}}} is not bound")]
    MissingBinding { template: TemplateId, placeholder: String },
    #[error("template {template} has no placeholder {{{placeholder}}}")]
    UnexpectedBinding { template: TemplateId, placeholder: String },
    #[error("provider failed after {attempts} attempt(s): {source}")]
    Provider {
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("digest collision on {digest}: cached request differs from the current one")]
    DigestCollision { digest: String },
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

/// Substitutes `{name}` for each declared placeholder in a single pass, so
/// field values are inserted verbatim and never re-expanded. Braces that do
/// not spell a declared placeholder are literal text.
pub fn render_prompt(template: TemplateId, fields: &BTreeMap<String, String>) -> Result<String, LlmError> {
    let t = template.template();
    for key in fields.keys() {
        if !t.placeholders.contains(&key.as_str()) {
            return Err(LlmError::UnexpectedBinding { template, placeholder: key.clone() });
        }
    }
    for p in t.placeholders {
        if !fields.contains_key(*p) {
            return Err(LlmError::MissingBinding { template, placeholder: p.to_string() });
        }
    }
    let mut out = String::with_capacity(t.body.len() + fields.values().map(String::len).sum::<usize>());
    let mut rest = t.body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = t
            .placeholders
            .iter()
            .find(|p| after.starts_with(**p) && after[p.len()..].starts_with('}'));
        match hit {
            Some(p) => {
                out.push_str(&fields[*p]);
                rest = &after[p.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    #[default]
    Use,
    Bypass,
    RecordOnly,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template_id: TemplateId,
    pub field_values: BTreeMap<String, String>,
    pub model_id: String,
    pub temperature: f64,
    pub run_index: u32,
    /// Retry ordinal for parse or refusal retries; omitted from the digest
    /// key when zero.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub attempt: u32,
    #[serde(skip)]
    pub cache_policy: CachePolicy,
}

impl CompletionRequest {
    pub fn new(template_id: TemplateId, model_id: impl Into<String>, run_index: u32) -> Self {
        CompletionRequest {
            template_id,
            field_values: BTreeMap::new(),
            model_id: model_id.into(),
            temperature: template_id.default_temperature(),
            run_index,
            attempt: 0,
            cache_policy: CachePolicy::Use,
        }
    }

    pub fn field(mut self, name: &str, value: impl Into<String>) -> Self {
        self.field_values.insert(name.to_string(), value.into());
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }

    pub fn policy(mut self, policy: CachePolicy) -> Self {
        self.cache_policy = policy;
        self
    }

    /// Hex SHA-256 of the request's canonical JSON (sorted field map,
    /// cache policy excluded).
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn render(&self) -> Result<String, LlmError> {
        render_prompt(self.template_id, &self.field_values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, Value>,
    #[serde(default)]
    pub cached: bool,
    pub request_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderResponse {
    pub text: String,
    pub meta: BTreeMap<String, Value>,
}

pub trait Provider: Send + Sync {
    fn complete(&self, prompt: &str, request: &CompletionRequest) -> Result<ProviderResponse, ProviderError>;
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    request: CompletionRequest,
    raw_text: String,
    provider_meta: BTreeMap<String, Value>,
    timestamp: u64,
}

/// Directory of `<model>/<digest>.json` completion records.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

fn sanitize_model(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Cache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, model_id: &str, digest: &str) -> PathBuf {
        self.root.join(sanitize_model(model_id)).join(format!("{digest}.json"))
    }

    pub fn load(&self, request: &CompletionRequest, digest: &str) -> Result<Option<Completion>, LlmError> {
        let path = self.path_for(&request.model_id, digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(LlmError::Cache { path, message: e.to_string() }),
        };
        let record: CacheRecord =
            serde_json::from_slice(&bytes).map_err(|e| LlmError::Cache { path, message: e.to_string() })?;
        if record.request != *request {
            return Err(LlmError::DigestCollision { digest: digest.to_string() });
        }
        Ok(Some(Completion {
            raw_text: record.raw_text,
            provider_meta: record.provider_meta,
            cached: true,
            request_digest: digest.to_string(),
        }))
    }

    /// Writes through a temporary file in the target directory and renames
    /// it into place, so concurrent writers never expose partial records.
    pub fn store(&self, request: &CompletionRequest, completion: &Completion) -> Result<(), LlmError> {
        let path = self.path_for(&request.model_id, &completion.request_digest);
        let dir = path.parent().expect("cache path has a parent");
        let err = |e: &dyn fmt::Display| LlmError::Cache { path: path.clone(), message: e.to_string() };
        fs::create_dir_all(dir).map_err(|e| err(&e))?;
        let record = CacheRecord {
            request: request.clone(),
            raw_text: completion.raw_text.clone(),
            provider_meta: completion.provider_meta.clone(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(&e))?;
        serde_json::to_writer_pretty(&mut tmp, &record).map_err(|e| err(&e))?;
        tmp.write_all(b"\n").map_err(|e| err(&e))?;
        tmp.persist(&path).map_err(|e| err(&e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(30) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_attempts: 1, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    /// Delay before retry number `retry` (0-based). A provider-supplied
    /// hint wins over the exponential schedule; both are capped.
    pub fn delay(&self, retry: u32, hint: Option<Duration>) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX));
        hint.unwrap_or(exp).min(self.max_delay)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub provider_calls: u64,
    pub cache_hits: u64,
}

pub struct LlmClient {
    provider: Arc<dyn Provider>,
    cache: Option<Cache>,
    retry: RetryPolicy,
    max_response_bytes: usize,
    provider_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        LlmClient {
            provider,
            cache: None,
            retry: RetryPolicy::default(),
            max_response_bytes: DEFAULT_MAX_RESPONSE_BYTES,
            provider_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Cache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_response_bytes(mut self, limit: usize) -> Self {
        self.max_response_bytes = limit;
        self
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            provider_calls: self.provider_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let prompt = request.render()?;
        let digest = request.digest();
        if let (Some(cache), CachePolicy::Use) = (&self.cache, request.cache_policy) {
            if let Some(hit) = cache.load(request, &digest)? {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
        }
        let response = self.call_with_retry(&prompt, request)?;
        let completion = Completion {
            raw_text: response.text,
            provider_meta: response.meta,
            cached: false,
            request_digest: digest,
        };
        if let (Some(cache), CachePolicy::Use | CachePolicy::RecordOnly) = (&self.cache, request.cache_policy) {
            cache.store(request, &completion)?;
        }
        Ok(completion)
    }

    fn call_with_retry(&self, prompt: &str, request: &CompletionRequest) -> Result<ProviderResponse, LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.provider_calls.fetch_add(1, Ordering::Relaxed);
            let outcome = self.provider.complete(prompt, request).and_then(|r| {
                if r.text.len() > self.max_response_bytes {
                    Err(ProviderError::TooLarge { bytes: r.text.len(), limit: self.max_response_bytes })
                } else {
                    Ok(r)
                }
            });
            match outcome {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let wait = self.retry.delay(attempt - 1, e.retry_after());
                    log::warn!("{} attempt {attempt} failed ({e}); retrying in {wait:?}", request.template_id);
                    std::thread::sleep(wait);
                }
                Err(source) => return Err(LlmError::Provider { attempts: attempt, source }),
            }
        }
    }

    /// Completes every request on a pool of `parallelism` threads. Results
    /// keep the input order.
    pub fn complete_all(&self, requests: &[CompletionRequest], parallelism: usize) -> Vec<Result<Completion, LlmError>> {
        match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
            Ok(pool) => pool.install(|| requests.par_iter().map(|r| self.complete(r)).collect()),
            Err(e) => {
                log::warn!("falling back to sequential completion: {e}");
                requests.iter().map(|r| self.complete(r)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedError {
    Transient,
    RateLimited,
    Auth,
    Fatal,
}

/// One scenario rule. Every present condition must hold; `responses` is
/// indexed by `run_index` modulo its length.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedError>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub strict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default)]
    pub rules: Vec<ScenarioRule>,
}

impl Scenario {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Scenario, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LlmError::Scenario(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::Scenario(format!("{}: {e}", path.display())))
    }
}

/// Deterministic provider answering from a [`Scenario`]; first matching
/// rule wins.
pub struct MockProvider {
    rules: Vec<(ScenarioRule, Option<Regex>)>,
    strict: bool,
    default: Option<String>,
}

impl MockProvider {
    pub fn new(scenario: Scenario) -> Result<Self, LlmError> {
        let mut rules = Vec::with_capacity(scenario.rules.len());
        for (i, rule) in scenario.rules.into_iter().enumerate() {
            if rule.responses.is_empty() && rule.error.is_none() {
                return Err(LlmError::Scenario(format!("rule {i} has neither responses nor error")));
            }
            if (rule.equals.is_some() || rule.contains.is_some() || rule.regex.is_some()) && rule.field.is_none() {
                return Err(LlmError::Scenario(format!("rule {i} matches on a value but names no field")));
            }
            let re = match &rule.regex {
                Some(p) => Some(Regex::new(p).map_err(|e| LlmError::Scenario(format!("rule {i}: {e}")))?),
                None => None,
            };
            rules.push((rule, re));
        }
        Ok(MockProvider { rules, strict: scenario.strict, default: scenario.default })
    }

    fn matches(rule: &ScenarioRule, re: Option<&Regex>, request: &CompletionRequest, digest: &str) -> bool {
        if rule.template.is_some_and(|t| t != request.template_id)
            || rule.digest.as_deref().is_some_and(|d| d != digest)
            || rule.attempt.is_some_and(|a| a != request.attempt)
        {
            return false;
        }
        let Some(field) = &rule.field else { return true };
        let Some(value) = request.field_values.get(field) else { return false };
        rule.equals.as_ref().map_or(true, |e| e == value)
            && rule.contains.as_ref().map_or(true, |c| value.contains(c.as_str()))
            && re.map_or(true, |r| r.is_match(value))
    }
}

impl Provider for MockProvider {
    fn complete(&self, _prompt: &str, request: &CompletionRequest) -> Result<ProviderResponse, ProviderError> {
        let digest = request.digest();
        let hit = self.rules.iter().find(|(rule, re)| Self::matches(rule, re.as_ref(), request, &digest));
        let text = match hit {
            Some((rule, _)) => {
                if let Some(err) = rule.error {
                    return Err(match err {
                        ScriptedError::Transient => {
                            ProviderError::Transient { message: "scripted".into(), retry_after: Some(Duration::ZERO) }
                        }
                        ScriptedError::RateLimited => ProviderError::RateLimited { retry_after: Some(Duration::ZERO) },
                        ScriptedError::Auth => ProviderError::Auth("scripted".into()),
                        ScriptedError::Fatal => ProviderError::Fatal("scripted".into()),
                    });
                }
                rule.responses[request.run_index as usize % rule.responses.len()].clone()
            }
            None => match (&self.default, self.strict) {
                (Some(d), false) => d.clone(),
                _ => return Err(ProviderError::Unmatched { template: request.template_id, digest }),
            },
        };
        let mut meta = BTreeMap::new();
        meta.insert("provider".to_string(), Value::from("mock"));
        Ok(ProviderResponse { text, meta })
    }
}

/// Single-turn chat completions against an OpenAI-compatible endpoint.
pub struct HttpProvider {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    max_response_bytes: usize,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpProvider {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
            max_response_bytes: DEFAULT_MAX_RESPONSE_BYTES,
        })
    }

    /// Reads the endpoint from `SEMAUG_API_BASE` and the key from
    /// `SEMAUG_API_KEY`.
    pub fn from_env(timeout: Duration) -> Result<Self, LlmError> {
        let base = std::env::var(ENV_API_BASE).map_err(|_| LlmError::Config(format!("{ENV_API_BASE} is not set")))?;
        HttpProvider::new(base, std::env::var(ENV_API_KEY).ok(), timeout)
    }

    pub fn with_max_response_bytes(mut self, limit: usize) -> Self {
        self.max_response_bytes = limit;
        self
    }
}

fn parse_retry_after(headers: &reqwest::header::HeaderMap) -> Option<Duration> {
    headers
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

impl Provider for HttpProvider {
    fn complete(&self, prompt: &str, request: &CompletionRequest) -> Result<ProviderResponse, ProviderError> {
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "max_tokens": request.template_id.template().max_response_tokens,
        });
        let mut call = self.client.post(format!("{}/chat/completions", self.base_url)).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| ProviderError::Transient { message: e.to_string(), retry_after: None })?;
        let status = resp.status();
        let retry_after = parse_retry_after(resp.headers());
        if let Some(len) = resp.content_length() {
            if len as usize > self.max_response_bytes {
                return Err(ProviderError::TooLarge { bytes: len as usize, limit: self.max_response_bytes });
            }
        }
        let mut bytes = Vec::new();
        resp.take(self.max_response_bytes as u64 + 1)
            .read_to_end(&mut bytes)
            .map_err(|e| ProviderError::Transient { message: e.to_string(), retry_after: None })?;
        if bytes.len() > self.max_response_bytes {
            return Err(ProviderError::TooLarge { bytes: bytes.len(), limit: self.max_response_bytes });
        }
        let text = String::from_utf8_lossy(&bytes);
        match status.as_u16() {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Auth(format!("HTTP {status}"))),
            429 => return Err(ProviderError::RateLimited { retry_after }),
            500..=599 => return Err(ProviderError::Transient { message: format!("HTTP {status}"), retry_after }),
            _ => return Err(ProviderError::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()))),
        }
        let json: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Fatal(format!("bad JSON body: {e}")))?;
        let content = json
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Fatal("response has no choices[0].message.content".into()))?;
        let mut meta = BTreeMap::new();
        for key in ["model", "usage"] {
            if let Some(v) = json.get(key) {
                meta.insert(key.to_string(), v.clone());
            }
        }
        if let Some(v) = json.pointer("/choices/0/finish_reason") {
            meta.insert("finish_reason".to_string(), v.clone());
        }
        Ok(ProviderResponse { text: content.to_string(), meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader};
    use std::net::TcpListener;
    use std::sync::Mutex;

    fn fields(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn templates_declare_exactly_their_placeholders() {
        for id in TemplateId::ALL {
            let t = id.template();
            for p in t.placeholders {
                assert!(t.body.contains(&format!("{{{p}}}")), "{id} lacks {p}");
            }
            let bound: BTreeMap<String, String> = t.placeholders.iter().map(|p| (p.to_string(), "\u{1}".into())).collect();
            let rendered = render_prompt(id, &bound).unwrap();
            assert!(!rendered.contains("{text}") && !rendered.contains("{img}") && !rendered.contains("{caption}"));
        }
    }

    #[test]
    fn render_examples() {
        let p = render_prompt(TemplateId::CleanCaption, &fields(&[("caption", "a man a man holding sign")])).unwrap();
        assert!(p.contains("respond with \n\"INVALID DESCRIPTION\"."));
        assert!(p.ends_with("Description: a man a man holding sign"));

        let p = render_prompt(TemplateId::Explain, &fields(&[("text", "x"), ("img", "y")])).unwrap();
        assert!(p.starts_with("Analyze this meme text: 'x' and image: 'y'\n"));
        assert_eq!((p.matches("'x'").count(), p.matches("'y'").count()), (1, 1));

        assert!(matches!(
            render_prompt(TemplateId::Explain, &fields(&[("text", "x")])),
            Err(LlmError::MissingBinding { placeholder, .. }) if placeholder == "img"
        ));
        assert!(matches!(
            render_prompt(TemplateId::CleanCaption, &fields(&[("caption", "c"), ("text", "t")])),
            Err(LlmError::UnexpectedBinding { .. })
        ));
        assert!(matches!("summarize".parse::<TemplateId>(), Err(LlmError::UnknownTemplate(_))));
    }

    #[test]
    fn render_is_verbatim_and_single_pass() {
        let p = render_prompt(TemplateId::ZeroShotClassify, &fields(&[("text", "  {img} \"q\"  "), ("img", "")])).unwrap();
        assert!(p.contains("Meme text:   {img} \"q\"  \nMeme image: \n"));
        assert!(p.contains("  {\n    \"labels\""));

        let p = render_prompt(TemplateId::ExplainTriggers, &fields(&[("text", "T"), ("img", "I")])).unwrap();
        assert!(p.contains("Meme text: T\n\n                    Meme image: I\n\n\n    Response:"));
        assert!(p.contains("reproduce all text exactly as provided, \n"));
    }

    #[test]
    fn digest_depends_on_run_index_and_attempt_only_when_nonzero() {
        let base = CompletionRequest::new(TemplateId::Explain, "m", 0).field("text", "a").field("img", "b");
        let d0 = base.digest();
        assert_eq!(d0, base.clone().policy(CachePolicy::Bypass).digest());
        assert_ne!(d0, CompletionRequest { run_index: 1, ..base.clone() }.digest());
        assert_ne!(d0, base.clone().attempt(1).digest());
        assert_eq!(d0, base.clone().attempt(0).digest());
        assert_ne!(d0, base.clone().temperature(0.2).digest());
        let json = serde_json::to_string(&base).unwrap();
        assert!(!json.contains("attempt") && !json.contains("cache_policy"));
    }

    fn mock(json: &str) -> Arc<dyn Provider> {
        Arc::new(MockProvider::new(serde_json::from_str(json).unwrap()).unwrap())
    }

    #[test]
    fn cache_round_trip_across_clients() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = r#"{"rules":[{"template":"explain","responses":["first","second"]}]}"#;
        let req = CompletionRequest::new(TemplateId::Explain, "org/model:v1", 0).field("text", "t").field("img", "i");

        let client = LlmClient::new(mock(scenario)).with_cache(Cache::new(dir.path()));
        let a = client.complete(&req).unwrap();
        let b = client.complete(&req).unwrap();
        assert!(!a.cached && b.cached);
        assert_eq!(a.raw_text, b.raw_text);
        assert_eq!(client.stats(), ClientStats { provider_calls: 1, cache_hits: 1 });

        let r1 = CompletionRequest { run_index: 1, ..req.clone() };
        assert_eq!(client.complete(&r1).unwrap().raw_text, "second");
        assert!(dir.path().join("org_model_v1").join(format!("{}.json", r1.digest())).exists());

        let refuse = mock(r#"{"strict":true,"rules":[]}"#);
        let restarted = LlmClient::new(refuse).with_cache(Cache::new(dir.path()));
        let c = restarted.complete(&req).unwrap();
        assert_eq!((c.raw_text.as_str(), c.cached), ("first", true));
        assert_eq!(restarted.stats().provider_calls, 0);
        assert!(restarted.complete(&req.clone().policy(CachePolicy::Bypass)).is_err());
    }

    #[test]
    fn cache_detects_collisions() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let req = CompletionRequest::new(TemplateId::CleanCaption, "m", 0).field("caption", "c");
        let other = CompletionRequest::new(TemplateId::CleanCaption, "m", 0).field("caption", "d");
        let forged = Completion {
            raw_text: "x".into(),
            provider_meta: BTreeMap::new(),
            cached: false,
            request_digest: req.digest(),
        };
        cache.store(&other, &forged).unwrap();
        assert!(matches!(cache.load(&req, &req.digest()), Err(LlmError::DigestCollision { .. })));
    }

    #[test]
    fn mock_rules() {
        let provider = MockProvider::new(
            serde_json::from_str(
                r#"{"strict":true,"rules":[
                    {"template":"clean_caption","responses":["INVALID DESCRIPTION"]},
                    {"template":"explain","field":"text","regex":"(?i)muslim","responses":["I apologize, but I do not feel comfortable creating content that promotes harmful stereotypes."]},
                    {"template":"explain_triggers","attempt":1,"responses":["Stereotype.\nTriggers: a"]},
                    {"template":"explain_triggers","field":"text","contains":"doll","responses":["Harmful.\nTRIGGERS: x"]}
                ]}"#,
            )
            .unwrap(),
        )
        .unwrap();
        let client = LlmClient::new(Arc::new(provider));
        let clean = CompletionRequest::new(TemplateId::CleanCaption, "m", 3).field("caption", "anything");
        assert_eq!(client.complete(&clean).unwrap().raw_text, "INVALID DESCRIPTION");

        let ex = CompletionRequest::new(TemplateId::Explain, "m", 0).field("text", "a MUSLIM doll").field("img", "");
        assert!(client.complete(&ex).unwrap().raw_text.starts_with("I apologize, but I do not feel comfortable"));

        let tr = CompletionRequest::new(TemplateId::ExplainTriggers, "m", 0).field("text", "doll").field("img", "");
        assert_eq!(client.complete(&tr).unwrap().raw_text, "Harmful.\nTRIGGERS: x");
        assert_eq!(client.complete(&tr.clone().attempt(1)).unwrap().raw_text, "Stereotype.\nTriggers: a");

        let unmatched = CompletionRequest::new(TemplateId::Explain, "m", 0).field("text", "b").field("img", "");
        assert!(matches!(
            client.complete(&unmatched),
            Err(LlmError::Provider { attempts: 1, source: ProviderError::Unmatched { .. } })
        ));
    }

    #[test]
    fn bad_scenarios_rejected() {
        let no_resp: Scenario = serde_json::from_str(r#"{"rules":[{"template":"explain"}]}"#).unwrap();
        assert!(MockProvider::new(no_resp).is_err());
        let bad_re: Scenario = serde_json::from_str(r#"{"rules":[{"field":"text","regex":"(","responses":["x"]}]}"#).unwrap();
        assert!(MockProvider::new(bad_re).is_err());
        assert!(serde_json::from_str::<Scenario>(r#"{"rules":[{"templat":"explain"}]}"#).is_err());
    }

    struct Flaky {
        failures: Mutex<u32>,
    }

    impl Provider for Flaky {
        fn complete(&self, _p: &str, _r: &CompletionRequest) -> Result<ProviderResponse, ProviderError> {
            let mut left = self.failures.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(ProviderError::RateLimited { retry_after: Some(Duration::from_millis(1)) });
            }
            Ok(ProviderResponse { text: "ok".into(), meta: BTreeMap::new() })
        }
    }

    #[test]
    fn retries_are_bounded() {
        let fast = RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(5) };
        let req = CompletionRequest::new(TemplateId::CleanCaption, "m", 0).field("caption", "c");

        let client = LlmClient::new(Arc::new(Flaky { failures: Mutex::new(2) })).with_retry(fast);
        assert_eq!(client.complete(&req).unwrap().raw_text, "ok");
        assert_eq!(client.stats().provider_calls, 3);

        let client = LlmClient::new(Arc::new(Flaky { failures: Mutex::new(3) })).with_retry(fast);
        assert!(matches!(client.complete(&req), Err(LlmError::Provider { attempts: 3, .. })));

        let auth = LlmClient::new(mock(r#"{"rules":[{"error":"auth"}]}"#)).with_retry(fast);
        assert!(matches!(auth.complete(&req), Err(LlmError::Provider { attempts: 1, source: ProviderError::Auth(_) })));

        let big = LlmClient::new(mock(r#"{"rules":[{"responses":["0123456789"]}]}"#)).with_max_response_bytes(4);
        assert!(matches!(big.complete(&req), Err(LlmError::Provider { source: ProviderError::TooLarge { .. }, .. })));
    }

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy { max_attempts: 5, base_delay: Duration::from_millis(100), max_delay: Duration::from_secs(1) };
        assert_eq!(p.delay(0, None), Duration::from_millis(100));
        assert_eq!(p.delay(2, None), Duration::from_millis(400));
        assert_eq!(p.delay(10, None), Duration::from_secs(1));
        assert_eq!(p.delay(0, Some(Duration::from_millis(250))), Duration::from_millis(250));
        assert_eq!(p.delay(40, None), Duration::from_secs(1));
    }

    #[test]
    fn complete_all_preserves_order() {
        let client = LlmClient::new(mock(r#"{"rules":[{"responses":["r0","r1","r2","r3"]}]}"#));
        let reqs: Vec<_> = (0..16)
            .map(|i| CompletionRequest::new(TemplateId::CleanCaption, "m", i).field("caption", "c"))
            .collect();
        let out = client.complete_all(&reqs, 4);
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap().raw_text, format!("r{}", i % 4));
        }
    }

    /// Serves the given raw HTTP responses, one per connection, and records
    /// each request head and body.
    fn fake_server(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for response in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut content_length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; content_length];
                reader.read_exact(&mut body).unwrap();
                seen.push(head + &String::from_utf8(body).unwrap());
                stream.write_all(response.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn http_response(status: &str, extra: &str, body: &str) -> String {
        format!("HTTP/1.1 {status}\r\nContent-Type: application/json\r\n{extra}Content-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len())
    }

    #[test]
    fn http_provider_retries_rate_limits() {
        let ok = r#"{"model":"m","choices":[{"message":{"role":"assistant","content":"a clean caption"},"finish_reason":"stop"}]}"#;
        let (base, server) = fake_server(vec![
            http_response("429 Too Many Requests", "Retry-After: 0\r\n", "{}"),
            http_response("503 Service Unavailable", "", "{}"),
            http_response("200 OK", "", ok),
        ]);
        let provider = HttpProvider::new(base, Some("sk-test".into()), Duration::from_secs(5)).unwrap();
        let fast = RetryPolicy { max_attempts: 4, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(10) };
        let client = LlmClient::new(Arc::new(provider)).with_retry(fast);
        let req = CompletionRequest::new(TemplateId::CleanCaption, "m", 0).field("caption", "c");
        let c = client.complete(&req).unwrap();
        assert_eq!(c.raw_text, "a clean caption");
        assert_eq!(c.provider_meta["finish_reason"], "stop");
        assert_eq!(client.stats().provider_calls, 3);
        let seen = server.join().unwrap();
        assert!(seen[0].starts_with("POST /v1/chat/completions"));
        assert!(seen[0].to_ascii_lowercase().contains("authorization: bearer sk-test"));
        assert!(seen[0].contains("Description: c"));
    }

    #[test]
    fn http_provider_fails_fast_on_auth_and_size() {
        let (base, server) = fake_server(vec![
            http_response("401 Unauthorized", "", "{}"),
            http_response("200 OK", "", &format!("{{\"pad\":\"{}\"}}", "x".repeat(200))),
        ]);
        let provider = HttpProvider::new(base, None, Duration::from_secs(5)).unwrap().with_max_response_bytes(100);
        let client = LlmClient::new(Arc::new(provider))
            .with_retry(RetryPolicy { max_attempts: 3, base_delay: Duration::ZERO, max_delay: Duration::ZERO });
        let req = CompletionRequest::new(TemplateId::CleanCaption, "m", 0).field("caption", "c");
        assert!(matches!(client.complete(&req), Err(LlmError::Provider { attempts: 1, source: ProviderError::Auth(_) })));
        assert!(matches!(client.complete(&req), Err(LlmError::Provider { source: ProviderError::TooLarge { .. }, .. })));
        server.join().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn render_injective_without_delimiters(
                a in "[a-z {}\\n]{0,12}", b in "[a-z {}\\n]{0,12}",
                c in "[a-z {}\\n]{0,12}", d in "[a-z {}\\n]{0,12}",
            ) {
                for id in [TemplateId::Explain, TemplateId::ExplainTriggers, TemplateId::ZeroShotClassify] {
                    let p1 = render_prompt(id, &fields(&[("text", &a), ("img", &b)])).unwrap();
                    let p2 = render_prompt(id, &fields(&[("text", &c), ("img", &d)])).unwrap();
                    prop_assert_eq!(p1 == p2, a == c && b == d);
                }
                let p1 = render_prompt(TemplateId::CleanCaption, &fields(&[("caption", &a)])).unwrap();
                let p2 = render_prompt(TemplateId::CleanCaption, &fields(&[("caption", &c)])).unwrap();
                prop_assert_eq!(p1 == p2, a == c);
            }
        }
    }
}
