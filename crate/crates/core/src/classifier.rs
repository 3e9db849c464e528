//! Hashed n-gram features, one-vs-rest logistic regression, thresholding
//! with optional hierarchy closure, the zero-shot LLM path and the
//! external-trainer exchange format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::augment::ComposedInput;
use crate::label::{Label, LabelSet};
use crate::llm_client::{CompletionRequest, LlmClient, LlmError, TemplateId};
use crate::taxonomy::{Taxonomy, TaxonomyError};

pub const MODEL_MAGIC: &[u8; 4] = b"SMGM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("feature dimension {got} does not match the model's {expected}")]
    FeatureMismatch { expected: u32, got: u32 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("zero-shot completion is not a JSON object: {0}")]
    ZeroShotNotJson(String),
    #[error("zero-shot completion has no \"labels\" array")]
    ZeroShotMissingLabels,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("id mismatch: {0}")]
    IdMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub dim: u32,
    pub word_min: usize,
    pub word_max: usize,
    pub char_min: usize,
    pub char_max: usize,
    pub lowercase: bool,
    /// Characters kept before featurization.
    pub max_chars: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { dim: 1 << 18, word_min: 1, word_max: 2, char_min: 3, char_max: 5, lowercase: true, max_chars: 4096 }
    }
}

/// Sparse, L2-normalized feature vector with sorted unique indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub dim: u32,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn is_zero(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.indices.iter().zip(&self.values).map(|(&i, &v)| w[i as usize] * v).sum()
    }
}

fn word_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]+").expect("static regex"))
}

fn hash_gram(namespace: u8, order: usize, gram: &str, dim: u32) -> u32 {
    let mut h = FnvHasher::default();
    h.write(&[namespace, order as u8]);
    h.write(gram.as_bytes());
    (h.finish() % dim as u64) as u32
}

/// Hashed word and character n-gram term frequencies, L2-normalized.
/// Tokens are featurized verbatim: nothing is masked or stemmed.
pub fn featurize(text: &str, spec: &FeatureSpec) -> FeatureVector {
    let truncated: String = text.chars().take(spec.max_chars).collect();
    let text = if spec.lowercase { truncated.to_lowercase() } else { truncated };
    let mut counts: HashMap<u32, f64> = HashMap::new();

    let words: Vec<&str> = word_regex().find_iter(&text).map(|m| m.as_str()).collect();
    for n in spec.word_min.max(1)..=spec.word_max {
        for gram in words.windows(n) {
            *counts.entry(hash_gram(b'w', n, &gram.join(" "), spec.dim)).or_default() += 1.0;
        }
    }
    if spec.char_max > 0 && !words.is_empty() {
        let chars: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
        let mut buf = String::new();
        for n in spec.char_min.max(1)..=spec.char_max {
            for gram in chars.windows(n) {
                buf.clear();
                buf.extend(gram);
                *counts.entry(hash_gram(b'c', n, &buf, spec.dim)).or_default() += 1.0;
            }
        }
    }

    let mut entries: Vec<(u32, f64)> = counts.into_iter().collect();
    entries.sort_unstable_by_key(|e| e.0);
    let norm = entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
    FeatureVector {
        dim: spec.dim,
        indices: entries.iter().map(|e| e.0).collect(),
        values: entries.iter().map(|e| e.1 / norm).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate at epoch e is `learning_rate / (1 + decay * e)`.
    pub decay: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, learning_rate: 8.0, decay: 0.02, l2: 1e-5, batch_size: 8, seed: 13 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0 && self.learning_rate * self.l2 < 1.0) {
            return bad("l2 must be non-negative with learning_rate * l2 < 1");
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return bad("decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub global: f64,
    #[serde(default)]
    pub per_label: BTreeMap<Label, f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { global: 0.5, per_label: BTreeMap::new() }
    }
}

impl Thresholds {
    pub fn for_label(&self, label: &Label) -> f64 {
        self.per_label.get(label).copied().unwrap_or(self.global)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: FeatureSpec,
    pub config: TrainConfig,
    pub labels: Vec<Label>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub features: FeatureVector,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean regularized objective across labels after each epoch.
    pub epoch_loss: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log loss of a logit against a 0/1 target, computed stably.
fn log_loss(z: f64, y: bool) -> f64 {
    let z = if y { z } else { -z };
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Mean log loss plus `l2 / 2 * |w|^2`, with its gradient in `w` (dense)
/// and in the unregularized bias.
pub fn logistic_objective(
    xs: &[&FeatureVector],
    targets: &[bool],
    w: &[f64],
    b: f64,
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut grad: Vec<f64> = w.iter().map(|wi| l2 * wi).collect();
    let mut grad_b = 0.0;
    let mut loss = 0.5 * l2 * w.iter().map(|wi| wi * wi).sum::<f64>();
    for (x, &y) in xs.iter().zip(targets) {
        let z = x.dot(w) + b;
        loss += log_loss(z, y) / n;
        let r = (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n;
        grad_b += r;
        for (&i, &v) in x.indices.iter().zip(&x.values) {
            grad[i as usize] += r * v;
        }
    }
    (loss, grad, grad_b)
}

/// Weights stored as `scale * v` so the L2 shrinkage of every step costs
/// O(1) instead of O(dim).
struct ScaledWeights {
    v: Vec<f64>,
    scale: f64,
    sq_norm: f64,
}

impl ScaledWeights {
    fn new(dim: usize) -> Self {
        ScaledWeights { v: vec![0.0; dim], scale: 1.0, sq_norm: 0.0 }
    }

    fn dot(&self, x: &FeatureVector) -> f64 {
        self.scale * x.dot(&self.v)
    }

    fn shrink(&mut self, factor: f64) {
        self.scale *= factor;
        self.sq_norm *= factor * factor;
        if self.scale < 1e-9 {
            let s = self.scale;
            self.v.iter_mut().for_each(|x| *x *= s);
            self.scale = 1.0;
        }
    }

    fn add(&mut self, x: &FeatureVector, coef: f64) {
        for (&i, &val) in x.indices.iter().zip(&x.values) {
            let slot = &mut self.v[i as usize];
            let old = self.scale * *slot;
            let new = old + coef * val;
            *slot = new / self.scale;
            self.sq_norm += new * new - old * old;
        }
    }

    fn into_dense(self) -> Vec<f64> {
        let s = self.scale;
        self.v.into_iter().map(|x| x * s).collect()
    }
}

fn train_one(
    xs: &[&FeatureVector],
    targets: &[bool],
    schedule: &[Vec<usize>],
    config: &TrainConfig,
    dim: usize,
) -> (Vec<f64>, f64, Vec<f64>) {
    let n = xs.len() as f64;
    let mut w = ScaledWeights::new(dim);
    let mut b = 0.0;
    let mut losses = Vec::with_capacity(config.epochs);
    for (epoch, order) in schedule.iter().enumerate() {
        let lr = config.learning_rate / (1.0 + config.decay * epoch as f64);
        for batch in order.chunks(config.batch_size) {
            let residuals: Vec<f64> = batch
                .iter()
                .map(|&i| sigmoid(w.dot(xs[i]) + b) - if targets[i] { 1.0 } else { 0.0 })
                .collect();
            let step = lr / batch.len() as f64;
            w.shrink(1.0 - lr * config.l2);
            for (&i, r) in batch.iter().zip(&residuals) {
                w.add(xs[i], -step * r);
            }
            b -= step * residuals.iter().sum::<f64>();
        }
        let data: f64 = xs.iter().zip(targets).map(|(x, &y)| log_loss(w.dot(x) + b, y)).sum::<f64>() / n;
        losses.push(data + 0.5 * config.l2 * w.sq_norm);
    }
    (w.into_dense(), b, losses)
}

/// Trains one logistic regression per label. Examples are put in id order
/// and each epoch visits them in a seeded permutation, so the result does
/// not depend on input order and is bit-reproducible for a fixed seed.
pub fn train(
    corpus: &[TrainExample],
    label_space: &[Label],
    spec: &FeatureSpec,
    config: &TrainConfig,
) -> Result<(Model, TrainReport), ClassifierError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(ClassifierError::EmptyCorpus);
    }
    let space: HashSet<&Label> = label_space.iter().collect();
    for ex in corpus {
        if ex.features.dim != spec.dim {
            return Err(ClassifierError::FeatureMismatch { expected: spec.dim, got: ex.features.dim });
        }
        if let Some(l) = ex.labels.iter().find(|l| !space.contains(l)) {
            return Err(ClassifierError::UnknownLabel(l.to_string()));
        }
    }
    let mut ordered: Vec<&TrainExample> = corpus.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let xs: Vec<&FeatureVector> = ordered.iter().map(|e| &e.features).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule: Vec<Vec<usize>> = (0..config.epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect();

    let per_label: Vec<(Vec<f64>, f64, Vec<f64>)> = label_space
        .par_iter()
        .map(|label| {
            let targets: Vec<bool> = ordered.iter().map(|e| e.labels.contains(label)).collect();
            train_one(&xs, &targets, &schedule, config, spec.dim as usize)
        })
        .collect();

    let mut epoch_loss = vec![0.0; config.epochs];
    let mut weights = Vec::with_capacity(label_space.len());
    let mut biases = Vec::with_capacity(label_space.len());
    for (w, b, losses) in per_label {
        for (acc, l) in epoch_loss.iter_mut().zip(&losses) {
            *acc += l / label_space.len().max(1) as f64;
        }
        weights.push(w);
        biases.push(b);
    }
    for (e, l) in epoch_loss.iter().enumerate() {
        log::debug!("epoch {}: mean objective {l:.6}", e + 1);
    }
    let model = Model {
        spec: spec.clone(),
        config: config.clone(),
        labels: label_space.to_vec(),
        weights,
        biases,
        thresholds: Thresholds::default(),
    };
    Ok((model, TrainReport { epoch_loss }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub sample_id: String,
    pub scores: BTreeMap<Label, f64>,
    pub labels: LabelSet,
}

/// Thresholds scores into a label set, then optionally closes it under
/// ancestors restricted to the label space.
pub fn decide(
    scores: &BTreeMap<Label, f64>,
    thresholds: &Thresholds,
    closure: Option<&Taxonomy>,
    label_space: &[Label],
) -> Result<LabelSet, ClassifierError> {
    let mut labels: LabelSet = scores
        .iter()
        .filter(|(l, &s)| s >= thresholds.for_label(l))
        .map(|(l, _)| l.clone())
        .collect();
    if let Some(tax) = closure {
        let space: HashSet<&Label> = label_space.iter().collect();
        labels = tax.expand(&labels)?;
        labels.retain(|l| space.contains(l));
    }
    Ok(labels)
}

impl Model {
    pub fn dim(&self) -> u32 {
        self.spec.dim
    }

    pub fn scores(&self, x: &FeatureVector) -> Result<BTreeMap<Label, f64>, ClassifierError> {
        if x.dim != self.spec.dim {
            return Err(ClassifierError::FeatureMismatch { expected: self.spec.dim, got: x.dim });
        }
        Ok(self
            .labels
            .iter()
            .zip(self.weights.iter().zip(&self.biases))
            .map(|(l, (w, b))| (l.clone(), sigmoid(x.dot(w) + b)))
            .collect())
    }

    pub fn predict_vector(
        &self,
        sample_id: &str,
        x: &FeatureVector,
        closure: Option<&Taxonomy>,
    ) -> Result<PredictionSet, ClassifierError> {
        let scores = self.scores(x)?;
        let labels = decide(&scores, &self.thresholds, closure, &self.labels)?;
        Ok(PredictionSet { sample_id: sample_id.to_string(), scores, labels })
    }

    pub fn predict(&self, sample_id: &str, text: &str, closure: Option<&Taxonomy>) -> Result<PredictionSet, ClassifierError> {
        self.predict_vector(sample_id, &featurize(text, &self.spec), closure)
    }

    /// Per-label threshold maximizing dev F1 over midpoints between
    /// consecutive distinct scores. Labels without dev positives keep the
    /// global threshold. Ties go to the candidate nearest the global value.
    pub fn tune_thresholds(&mut self, dev: &[(FeatureVector, LabelSet)]) -> Result<(), ClassifierError> {
        let scored: Vec<BTreeMap<Label, f64>> = dev.iter().map(|(x, _)| self.scores(x)).collect::<Result<_, _>>()?;
        let global = self.thresholds.global;
        let mut per_label = BTreeMap::new();
        for label in &self.labels {
            let mut pairs: Vec<(f64, bool)> = scored.iter().zip(dev).map(|(s, (_, g))| (s[label], g.contains(label))).collect();
            if !pairs.iter().any(|p| p.1) {
                continue;
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut distinct: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            distinct.dedup();
            let mut candidates = vec![global];
            candidates.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            candidates.push(distinct[0] * 0.5);
            let f1 = |tau: f64| {
                let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
                for &(s, y) in &pairs {
                    match (s >= tau, y) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 }
            };
            let best = candidates
                .into_iter()
                .map(|t| (f1(t), t))
                .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| (b.1 - global).abs().total_cmp(&(a.1 - global).abs())))
                .expect("at least one candidate");
            per_label.insert(label.clone(), best.1);
        }
        self.thresholds.per_label = per_label;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model, ClassifierError> {
        Model::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// `SMGM`, version, JSON header, then per label the bias and the
    /// non-zero weights as (index, value) pairs, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ClassifierError> {
        let header = serde_json::json!({
            "spec": self.spec,
            "config": self.config,
            "labels": self.labels,
            "thresholds": self.thresholds,
        });
        let header = serde_json::to_vec(&header).map_err(|e| ClassifierError::ModelFormat(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(MODEL_VERSION)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        for (weights, &bias) in self.weights.iter().zip(&self.biases) {
            w.write_f64::<LittleEndian>(bias)?;
            let nz: Vec<(usize, f64)> = weights.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
            w.write_u32::<LittleEndian>(nz.len() as u32)?;
            for (i, v) in nz {
                w.write_u32::<LittleEndian>(i as u32)?;
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Model, ClassifierError> {
        let bad = |m: String| ClassifierError::ModelFormat(m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a model file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != MODEL_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        #[derive(Deserialize)]
        struct Header {
            spec: FeatureSpec,
            config: TrainConfig,
            labels: Vec<Label>,
            thresholds: Thresholds,
        }
        let h: Header = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
        let dim = h.spec.dim as usize;
        let mut weights = Vec::with_capacity(h.labels.len());
        let mut biases = Vec::with_capacity(h.labels.len());
        for _ in &h.labels {
            biases.push(r.read_f64::<LittleEndian>()?);
            let nnz = r.read_u32::<LittleEndian>()? as usize;
            let mut dense = vec![0.0; dim];
            for _ in 0..nnz {
                let i = r.read_u32::<LittleEndian>()? as usize;
                if i >= dim {
                    return Err(bad(format!("weight index {i} outside dimension {dim}")));
                }
                dense[i] = r.read_f64::<LittleEndian>()?;
            }
            weights.push(dense);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Model { spec: h.spec, config: h.config, labels: h.labels, weights, biases, thresholds: h.thresholds })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotParse {
    pub labels: LabelSet,
    pub dropped: Vec<String>,
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let t = t.strip_prefix("```").map_or(t, |rest| rest.split_once('\n').map_or("", |(_, body)| body));
    t.trim_end().strip_suffix("```").unwrap_or(t).trim()
}

/// Parses a zero-shot completion: a JSON object with a `labels` array,
/// retried once with Markdown code fences stripped. Labels that do not
/// canonicalize into `label_space` are dropped and reported.
pub fn parse_zero_shot(raw: &str, taxonomy: &Taxonomy, label_space: &[Label]) -> Result<ZeroShotParse, ClassifierError> {
    let value: Value = match serde_json::from_str(raw.trim()) {
        Ok(v) => v,
        Err(_) => serde_json::from_str(strip_fences(raw)).map_err(|e| ClassifierError::ZeroShotNotJson(e.to_string()))?,
    };
    let obj = value.as_object().ok_or_else(|| ClassifierError::ZeroShotNotJson("top level is not an object".into()))?;
    let items = obj.get("labels").and_then(Value::as_array).ok_or(ClassifierError::ZeroShotMissingLabels)?;
    let space: HashSet<&Label> = label_space.iter().collect();
    let mut labels = LabelSet::new();
    let mut dropped = Vec::new();
    for item in items {
        let raw_label = match item.as_str() {
            Some(s) => s.to_string(),
            None => item.to_string(),
        };
        match taxonomy.canonicalize(&raw_label) {
            Ok(l) if space.contains(&l) => {
                labels.insert(l);
            }
            _ => dropped.push(raw_label),
        }
    }
    Ok(ZeroShotParse { labels, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotOutcome {
    pub prediction: PredictionSet,
    pub dropped: Vec<String>,
    pub digest: String,
}

/// Labels one sample with the taxonomy-bearing classification prompt. The
/// image is represented by `img` (a caption or empty). Scores are 1.0 for
/// predicted labels and 0.0 otherwise.
pub fn zero_shot_classify(
    sample_id: &str,
    text: &str,
    img: &str,
    llm: &LlmClient,
    model_id: &str,
    taxonomy: &Taxonomy,
    label_space: &[Label],
) -> Result<ZeroShotOutcome, ClassifierError> {
    let req = CompletionRequest::new(TemplateId::ZeroShotClassify, model_id, 0).field("text", text).field("img", img);
    let c = llm.complete(&req)?;
    let parsed = parse_zero_shot(&c.raw_text, taxonomy, label_space)?;
    let scores = label_space
        .iter()
        .map(|l| (l.clone(), if parsed.labels.contains(l) { 1.0 } else { 0.0 }))
        .collect();
    Ok(ZeroShotOutcome {
        prediction: PredictionSet { sample_id: sample_id.to_string(), scores, labels: parsed.labels },
        dropped: parsed.dropped,
        digest: c.request_digest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub id: String,
    pub input_text: String,
    pub gold_labels: Vec<String>,
}

/// Writes `{id, input_text, gold_labels}` lines for an external trainer.
pub fn export_external(
    path: impl AsRef<Path>,
    inputs: &[ComposedInput],
    gold: &BTreeMap<String, LabelSet>,
) -> Result<(), ClassifierError> {
    let mut w = BufWriter::new(File::create(path)?);
    for input in inputs {
        let g = gold
            .get(&input.sample_id)
            .ok_or_else(|| ClassifierError::IdMismatch(format!("no gold labels for {}", input.sample_id)))?;
        let rec = ExportRecord { id: input.sample_id.clone(), input_text: input.text.clone(), gold_labels: g.names() };
        serde_json::to_writer(&mut w, &rec).map_err(|e| ClassifierError::ModelFormat(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportRecord {
    id: String,
    #[serde(default)]
    scores: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

/// Reads external predictions (`{id, scores?, labels?}` per line) in the
/// order of `expected_ids`. Score-only lines are thresholded.
pub fn import_external(
    path: impl AsRef<Path>,
    expected_ids: &[String],
    label_space: &[Label],
    thresholds: &Thresholds,
    closure: Option<&Taxonomy>,
) -> Result<Vec<PredictionSet>, ClassifierError> {
    let space: HashSet<&str> = label_space.iter().map(Label::as_str).collect();
    let expected: HashSet<&str> = expected_ids.iter().map(String::as_str).collect();
    let mut by_id: HashMap<String, PredictionSet> = HashMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| ClassifierError::Malformed { line: i + 1, message };
        let rec: ImportRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if !expected.contains(rec.id.as_str()) {
            return Err(ClassifierError::IdMismatch(format!("unexpected id {}", rec.id)));
        }
        if by_id.contains_key(&rec.id) {
            return Err(malformed(format!("duplicate id {}", rec.id)));
        }
        let check = |name: &str| {
            if space.contains(name) {
                Ok(Label::new(name))
            } else {
                Err(malformed(format!("label {name:?} outside the label space")))
            }
        };
        let mut scores = BTreeMap::new();
        for (name, s) in rec.scores.iter().flatten() {
            if !s.is_finite() {
                return Err(malformed(format!("non-finite score for {name}")));
            }
            scores.insert(check(name)?, *s);
        }
        let labels = match (&rec.labels, rec.scores.is_some()) {
            (Some(names), _) => names.iter().map(|n| check(n)).collect::<Result<LabelSet, _>>()?,
            (None, true) => decide(&scores, thresholds, closure, label_space)?,
            (None, false) => return Err(malformed("line has neither scores nor labels".into())),
        };
        by_id.insert(rec.id.clone(), PredictionSet { sample_id: rec.id, scores, labels });
    }
    expected_ids
        .iter()
        .map(|id| by_id.remove(id).ok_or_else(|| ClassifierError::IdMismatch(format!("missing prediction for {id}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Condition;
    use crate::metrics::{flat_f1, hierarchical_f1};
    use rand::Rng;

    fn small_spec() -> FeatureSpec {
        FeatureSpec { dim: 1 << 12, ..FeatureSpec::default() }
    }

    #[test]
    fn featurize_basics() {
        let spec = FeatureSpec::default();
        assert!(featurize("", &spec).is_zero());
        assert!(featurize("   ", &spec).is_zero());
        let a = featurize("You are a FUCKING disgrace", &spec);
        assert_eq!(a, featurize("You are a FUCKING disgrace", &spec));
        assert_eq!(a, featurize("you are a fucking disgrace", &spec));
        assert_ne!(a, featurize("you are a f***ing disgrace", &spec));
        let norm: f64 = a.values.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(a.indices.iter().all(|&i| i < spec.dim));
        let cased = FeatureSpec { lowercase: false, ..spec.clone() };
        assert_ne!(featurize("ABC def", &cased), featurize("abc def", &cased));
    }

    fn lbl(s: &str) -> Label {
        Label::from(s)
    }

    /// Two labels, each switched on by its own token.
    fn separable(n: usize, offset: usize) -> Vec<(String, String, LabelSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(offset as u64);
        (0..n)
            .map(|i| {
                let a = rng.gen_bool(0.5);
                let b = rng.gen_bool(0.4);
                let mut words = vec![format!("filler{}", rng.gen_range(0..30)), format!("noise{}", rng.gen_range(0..30))];
                let mut gold = LabelSet::new();
                if a {
                    words.push("alphatoken".into());
                    gold.insert(lbl("alpha"));
                }
                if b {
                    words.push("betatoken".into());
                    gold.insert(lbl("beta"));
                }
                words.shuffle(&mut rng);
                (format!("s{:04}", i + offset), words.join(" "), gold)
            })
            .collect()
    }

    fn examples(rows: &[(String, String, LabelSet)], spec: &FeatureSpec) -> Vec<TrainExample> {
        rows.iter()
            .map(|(id, t, g)| TrainExample { id: id.clone(), features: featurize(t, spec), labels: g.clone() })
            .collect()
    }

    #[test]
    fn separable_fixture_is_learned() {
        let spec = small_spec();
        let space = vec![lbl("alpha"), lbl("beta")];
        let train_rows = separable(200, 0);
        let (model, report) = train(&examples(&train_rows, &spec), &space, &spec, &TrainConfig::default()).unwrap();
        assert!(report.epoch_loss.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", report.epoch_loss);
        let f1_on = |rows: &[(String, String, LabelSet)]| {
            let gold: Vec<LabelSet> = rows.iter().map(|r| r.2.clone()).collect();
            let pred: Vec<LabelSet> = rows.iter().map(|r| model.predict(&r.0, &r.1, None).unwrap().labels).collect();
            flat_f1(&gold, &pred, &space).unwrap().micro_f1
        };
        assert!(f1_on(&train_rows) >= 0.99);
        assert!(f1_on(&separable(100, 5000)) >= 0.95);
    }

    #[test]
    fn single_sample_capacity() {
        let spec = small_spec();
        let space = vec![lbl("alpha"), lbl("beta")];
        let ex = vec![TrainExample { id: "x".into(), features: featurize("lonely sample", &spec), labels: [lbl("beta")].into_iter().collect() }];
        let (model, _) = train(&ex, &space, &spec, &TrainConfig::default()).unwrap();
        assert_eq!(model.predict("x", "lonely sample", None).unwrap().labels, [lbl("beta")].into_iter().collect());
    }

    #[test]
    fn training_is_order_invariant_and_reproducible() {
        let spec = small_spec();
        let space = vec![lbl("alpha"), lbl("beta")];
        let mut ex = examples(&separable(60, 0), &spec);
        let (a, _) = train(&ex, &space, &spec, &TrainConfig::default()).unwrap();
        ex.reverse();
        let (b, _) = train(&ex, &space, &spec, &TrainConfig::default()).unwrap();
        assert_eq!(a, b);
        let (c, _) = train(&ex, &space, &spec, &TrainConfig { seed: 99, ..TrainConfig::default() }).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn training_errors() {
        let spec = small_spec();
        let space = vec![lbl("alpha")];
        assert!(matches!(train(&[], &space, &spec, &TrainConfig::default()), Err(ClassifierError::EmptyCorpus)));
        let ex = examples(&separable(10, 0), &spec);
        assert!(matches!(train(&ex, &space, &spec, &TrainConfig::default()), Err(ClassifierError::UnknownLabel(_))));
        assert!(matches!(
            train(&ex, &[lbl("alpha"), lbl("beta")], &spec, &TrainConfig { epochs: 0, ..TrainConfig::default() }),
            Err(ClassifierError::Config(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = FeatureSpec { dim: 1 << 10, ..FeatureSpec::default() };
        let rows = separable(40, 7);
        let xs_owned: Vec<FeatureVector> = rows.iter().map(|r| featurize(&r.1, &spec)).collect();
        let xs: Vec<&FeatureVector> = xs_owned.iter().collect();
        let targets: Vec<bool> = rows.iter().map(|r| r.2.contains(&lbl("alpha"))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = 0.3;
        let l2 = 0.01;
        let (_, grad, grad_b) = logistic_objective(&xs, &targets, &w, b, l2);
        let h = 1e-6;
        let mut coords: Vec<usize> = xs_owned.iter().flat_map(|x| x.indices.iter().map(|&i| i as usize)).collect();
        coords.sort_unstable();
        coords.dedup();
        coords.shuffle(&mut rng);
        coords.truncate(100);
        for &i in &coords {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let numeric = (logistic_objective(&xs, &targets, &wp, b, l2).0 - logistic_objective(&xs, &targets, &wm, b, l2).0) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel <= 1e-4, "coordinate {i}: {numeric} vs {}", grad[i]);
        }
        let numeric_b = (logistic_objective(&xs, &targets, &w, b + h, l2).0 - logistic_objective(&xs, &targets, &w, b - h, l2).0) / (2.0 * h);
        assert!((numeric_b - grad_b).abs() / grad_b.abs().max(1e-8) <= 1e-4);
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let spec = small_spec();
        let space = vec![lbl("alpha"), lbl("beta")];
        let (mut model, _) = train(&examples(&separable(50, 0), &spec), &space, &spec, &TrainConfig::default()).unwrap();
        model.thresholds.per_label.insert(lbl("beta"), 0.123456789);
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = Model::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
        for (a, b) in back.weights.iter().flatten().zip(model.weights.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(Model::read_from(&mut corrupt.as_slice()).is_err());
        buf.push(0);
        assert!(Model::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn prediction_rules() {
        let scores: BTreeMap<Label, f64> = [(lbl("toxic"), 0.9), (lbl("insult"), 0.2)].into_iter().collect();
        let space = vec![lbl("toxic"), lbl("insult")];
        assert_eq!(decide(&scores, &Thresholds::default(), None, &space).unwrap(), [lbl("toxic")].into_iter().collect());
        let low: BTreeMap<Label, f64> = [(lbl("toxic"), 0.1)].into_iter().collect();
        assert!(decide(&low, &Thresholds::default(), None, &space).unwrap().is_empty());

        let tax = Taxonomy::semeval();
        let all: Vec<Label> = tax.nodes().cloned().collect();
        let smears: BTreeMap<Label, f64> = [(lbl("Smears"), 0.7)].into_iter().collect();
        let closed = decide(&smears, &Thresholds::default(), Some(&tax), &all).unwrap();
        assert_eq!(closed, ["Smears", "Ad Hominem", "Ethos"].into_iter().collect());
        let leaves = tax.leaves();
        assert_eq!(decide(&smears, &Thresholds::default(), Some(&tax), &leaves).unwrap(), [lbl("Smears")].into_iter().collect());

        let spec = small_spec();
        let (model, _) = train(&examples(&separable(20, 0), &spec), &[lbl("alpha"), lbl("beta")], &spec, &TrainConfig::default()).unwrap();
        let wrong = featurize("x", &FeatureSpec::default());
        assert!(matches!(model.predict_vector("x", &wrong, None), Err(ClassifierError::FeatureMismatch { .. })));
    }

    #[test]
    fn threshold_tuning_improves_dev_f1() {
        let spec = small_spec();
        let space = vec![lbl("alpha"), lbl("beta")];
        let cfg = TrainConfig { epochs: 2, learning_rate: 0.05, ..TrainConfig::default() };
        let (mut model, _) = train(&examples(&separable(80, 0), &spec), &space, &spec, &cfg).unwrap();
        let dev: Vec<(FeatureVector, LabelSet)> = separable(60, 900).into_iter().map(|r| (featurize(&r.1, &spec), r.2)).collect();
        let f1 = |m: &Model| {
            let gold: Vec<LabelSet> = dev.iter().map(|d| d.1.clone()).collect();
            let pred: Vec<LabelSet> = dev.iter().map(|d| m.predict_vector("d", &d.0, None).unwrap().labels).collect();
            flat_f1(&gold, &pred, &space).unwrap().micro_f1
        };
        let before = f1(&model);
        model.tune_thresholds(&dev).unwrap();
        assert_eq!(model.thresholds.per_label.len(), 2);
        assert!(f1(&model) >= before);
    }

    #[test]
    fn zero_shot_parsing() {
        let tax = Taxonomy::semeval();
        let space = tax.leaves();
        let p = parse_zero_shot(r#"{"labels": ["Smears","Loaded Language"]}"#, &tax, &space).unwrap();
        assert_eq!(p.labels, ["Smears", "Loaded Language"].into_iter().collect());
        let p = parse_zero_shot("```json\n{\"labels\": []}\n```", &tax, &space).unwrap();
        assert!(p.labels.is_empty() && p.dropped.is_empty());
        let p = parse_zero_shot(r#"{"labels": ["Sarcasm"]}"#, &tax, &space).unwrap();
        assert_eq!((p.labels.len(), p.dropped), (0, vec!["Sarcasm".to_string()]));
        let p = parse_zero_shot(r#"{"labels": ["straw man", "Ethos"]}"#, &tax, &space).unwrap();
        assert_eq!(p.labels.len(), 1);
        assert_eq!(p.dropped, vec!["Ethos".to_string()]);
        assert!(matches!(parse_zero_shot("Smears, Doubt", &tax, &space), Err(ClassifierError::ZeroShotNotJson(_))));
        assert!(matches!(parse_zero_shot(r#"{"label": []}"#, &tax, &space), Err(ClassifierError::ZeroShotMissingLabels)));
        assert!(matches!(parse_zero_shot("```\n[1]\n```", &tax, &space), Err(ClassifierError::ZeroShotNotJson(_))));
    }

    fn composed(id: &str, text: &str) -> ComposedInput {
        ComposedInput { sample_id: id.into(), condition: Condition::T, effective: Condition::T, text: text.into(), parts: Vec::new() }
    }

    #[test]
    fn external_identity_loop() {
        let dir = tempfile::tempdir().unwrap();
        let tax = Taxonomy::semeval();
        let space = tax.leaves();
        let gold: BTreeMap<String, LabelSet> = [
            ("a".to_string(), ["Smears", "Doubt"].into_iter().collect::<LabelSet>()),
            ("b".to_string(), LabelSet::new()),
            ("c".to_string(), ["Slogans"].into_iter().collect()),
        ]
        .into_iter()
        .collect();
        let inputs: Vec<ComposedInput> = gold.keys().map(|id| composed(id, "text")).collect();
        let out = dir.path().join("export.jsonl");
        export_external(&out, &inputs, &gold).unwrap();

        let preds_path = dir.path().join("preds.jsonl");
        let mut f = File::create(&preds_path).unwrap();
        for line in std::fs::read_to_string(&out).unwrap().lines() {
            let rec: ExportRecord = serde_json::from_str(line).unwrap();
            writeln!(f, "{}", serde_json::json!({"id": rec.id, "labels": rec.gold_labels})).unwrap();
        }
        drop(f);
        let ids: Vec<String> = gold.keys().cloned().collect();
        let preds = import_external(&preds_path, &ids, &space, &Thresholds::default(), None).unwrap();
        let g: Vec<LabelSet> = gold.values().cloned().collect();
        let p: Vec<LabelSet> = preds.into_iter().map(|p| p.labels).collect();
        assert_eq!(hierarchical_f1(&g, &p, &tax).unwrap().h_f1, 1.0);

        let mut more = ids.clone();
        more.push("d".into());
        match import_external(&preds_path, &more, &space, &Thresholds::default(), None) {
            Err(ClassifierError::IdMismatch(m)) => assert!(m.contains('d')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn external_scores_are_thresholded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, "{\"id\":\"x\",\"scores\":{\"toxic\":0.8,\"insult\":0.3}}\n").unwrap();
        let space = vec![lbl("toxic"), lbl("insult")];
        let p = import_external(&path, &["x".into()], &space, &Thresholds::default(), None).unwrap();
        assert_eq!(p[0].labels, [lbl("toxic")].into_iter().collect());
        std::fs::write(&path, "{\"id\":\"x\"}\n").unwrap();
        assert!(matches!(
            import_external(&path, &["x".into()], &space, &Thresholds::default(), None),
            Err(ClassifierError::Malformed { line: 1, .. })
        ));
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            import_external(&path, &["x".into()], &space, &Thresholds::default(), None),
            Err(ClassifierError::Malformed { line: 1, .. })
        ));
    }
}
