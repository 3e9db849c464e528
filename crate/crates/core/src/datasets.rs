//! Corpus adapters and the canonical `Sample` schema.
//!
//! Each adapter reads one release format (SemEval JSON array, Jigsaw CSV,
//! Hateful Memes JSONL) and produces normalized [`Sample`]s. Downstream
//! stages only ever read the canonical JSONL written by [`write_jsonl`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::label::{Label, LabelSet};
use crate::taxonomy::Taxonomy;

/// Jigsaw toxicity columns, in release order.
pub const JIGSAW_LABELS: [&str; 6] =
    ["toxic", "severe_toxic", "obscene", "threat", "insult", "identity_hate"];

pub const HATEFUL_LABEL: &str = "hateful";
/// Row name used for hateful-memes samples with an empty gold set.
pub const NON_HATEFUL_ROW: &str = "non-hateful";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("record {position}: {reason}")]
    BadRecord { position: usize, reason: String },
    #[error("no samples")]
    Empty,
    #[error("unknown dataset {0:?} (expected semeval, jigsaw or hateful)")]
    UnknownDataset(String),
    #[error("unknown split {0:?} (expected train, dev or test)")]
    UnknownSplit(String),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    #[serde(alias = "semeval")]
    SemevalMemes,
    #[serde(alias = "jigsaw")]
    JigsawToxic,
    #[serde(alias = "hateful")]
    HatefulMemes,
}

impl DatasetId {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, DatasetId::SemevalMemes)
    }
}

impl FromStr for DatasetId {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semeval" | "semeval_memes" => Ok(DatasetId::SemevalMemes),
            "jigsaw" | "jigsaw_toxic" => Ok(DatasetId::JigsawToxic),
            "hateful" | "hateful_memes" => Ok(DatasetId::HatefulMemes),
            other => Err(DatasetError::UnknownDataset(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::SemevalMemes => "semeval_memes",
            DatasetId::JigsawToxic => "jigsaw_toxic",
            DatasetId::HatefulMemes => "hateful_memes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One normalized data point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub dataset: DatasetId,
    pub split: Split,
    pub text: String,
    /// Captioner id (`blip`, `git`, `human`, ...) → caption text.
    #[serde(default)]
    pub captions: BTreeMap<String, String>,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub gold: LabelSet,
    #[serde(default)]
    pub human_explanation: Option<String>,
}

/// NFC, whitespace runs collapsed to one space, ends trimmed. Casing and
/// every other character are left alone.
pub fn normalize_text(raw: &str) -> String {
    let nfc: String = raw.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub split: Split,
    /// Skip unparseable records (they are still reported) instead of
    /// aborting the load.
    pub skip_bad: bool,
}

impl LoadOptions {
    pub fn new(split: Split) -> Self {
        LoadOptions { split, skip_bad: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadRecord {
    /// 1-based record index (JSON array, CSV row) or line number (JSONL).
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub samples: Vec<Sample>,
    pub skipped: Vec<BadRecord>,
}

impl Loaded {
    fn accept(
        &mut self,
        opts: &LoadOptions,
        seen: &mut HashSet<String>,
        position: usize,
        outcome: Result<Sample, String>,
    ) -> Result<(), DatasetError> {
        let outcome = outcome.and_then(|s| {
            if seen.insert(s.id.clone()) {
                Ok(s)
            } else {
                Err(format!("duplicate id {:?}", s.id))
            }
        });
        match outcome {
            Ok(sample) => self.samples.push(sample),
            Err(reason) if opts.skip_bad => {
                log::warn!("skipping record {position}: {reason}");
                self.skipped.push(BadRecord { position, reason });
            }
            Err(reason) => return Err(DatasetError::BadRecord { position, reason }),
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<String, DatasetError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| DatasetError::io(path, e))?;
    Ok(text)
}

fn id_of(value: Option<&Value>) -> Result<String, String> {
    match value {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err("missing or invalid \"id\"".to_string()),
    }
}

fn text_of(value: Option<&Value>) -> Result<String, String> {
    let raw = value.and_then(Value::as_str).ok_or("missing \"text\"")?;
    let text = normalize_text(raw);
    if text.is_empty() {
        Err("text is empty after normalization".into())
    } else {
        Ok(text)
    }
}

fn opt_string(value: Option<&Value>) -> Option<String> {
    value.and_then(Value::as_str).map(normalize_text).filter(|s| !s.is_empty())
}

/// Loads a SemEval persuasion-meme release file: a JSON array of
/// `{id, text, labels, image?}` records. Optional extensions per record:
/// `captions` (object captioner → caption), `human_caption`,
/// `human_explanation`.
pub fn load_semeval(path: impl AsRef<Path>, taxonomy: &Taxonomy, opts: LoadOptions) -> Result<Loaded, DatasetError> {
    parse_semeval(&read_file(path.as_ref())?, taxonomy, opts)
}

pub fn parse_semeval(text: &str, taxonomy: &Taxonomy, opts: LoadOptions) -> Result<Loaded, DatasetError> {
    let records: Vec<Value> = serde_json::from_str(text)?;
    let mut out = Loaded::default();
    let mut seen = HashSet::new();
    for (i, record) in records.iter().enumerate() {
        let outcome = semeval_record(record, taxonomy, opts.split);
        out.accept(&opts, &mut seen, i + 1, outcome)?;
    }
    Ok(out)
}

fn semeval_record(record: &Value, taxonomy: &Taxonomy, split: Split) -> Result<Sample, String> {
    let obj = record.as_object().ok_or("record is not an object")?;
    let id = id_of(obj.get("id"))?;
    let text = text_of(obj.get("text"))?;
    let labels = obj.get("labels").and_then(Value::as_array).ok_or("missing \"labels\" array")?;
    let mut gold = LabelSet::new();
    for raw in labels {
        let raw = raw.as_str().ok_or("label is not a string")?;
        gold.insert(taxonomy.canonicalize(raw).map_err(|e| e.to_string())?);
    }
    let mut captions = BTreeMap::new();
    if let Some(map) = obj.get("captions").and_then(Value::as_object) {
        for (captioner, caption) in map {
            if let Some(c) = opt_string(Some(caption)) {
                captions.insert(captioner.clone(), c);
            }
        }
    }
    if let Some(c) = opt_string(obj.get("human_caption")) {
        captions.insert("human".to_string(), c);
    }
    Ok(Sample {
        id,
        dataset: DatasetId::SemevalMemes,
        split,
        text,
        captions,
        image_ref: obj.get("image").and_then(Value::as_str).map(str::to_string),
        gold,
        human_explanation: opt_string(obj.get("human_explanation")),
    })
}

/// Loads the Jigsaw toxic-comment CSV (`id,comment_text,<six 0/1 columns>`).
pub fn load_jigsaw(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Loaded, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    parse_jigsaw(file, opts)
}

pub fn parse_jigsaw(reader: impl Read, opts: LoadOptions) -> Result<Loaded, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let id_col = column("id")?;
    let text_col = column("comment_text")?;
    let label_cols: Vec<(usize, &str)> =
        JIGSAW_LABELS.iter().map(|&l| column(l).map(|c| (c, l))).collect::<Result<_, _>>()?;

    let mut out = Loaded::default();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let outcome = row.map_err(|e| e.to_string()).and_then(|row| {
            let id = row.get(id_col).map(str::trim).filter(|s| !s.is_empty()).ok_or("missing id")?;
            let text = normalize_text(row.get(text_col).unwrap_or(""));
            if text.is_empty() {
                return Err("comment_text is empty after normalization".to_string());
            }
            let mut gold = LabelSet::new();
            for &(col, label) in &label_cols {
                match row.get(col).map(str::trim) {
                    Some("1") => {
                        gold.insert(Label::from(label));
                    }
                    Some("0") => {}
                    other => return Err(format!("column {label}: expected 0 or 1, got {other:?}")),
                }
            }
            Ok(Sample {
                id: id.to_string(),
                dataset: DatasetId::JigsawToxic,
                split: opts.split,
                text,
                captions: BTreeMap::new(),
                image_ref: None,
                gold,
                human_explanation: None,
            })
        });
        out.accept(&opts, &mut seen, i + 1, outcome)?;
    }
    Ok(out)
}

/// Loads a Hateful Memes JSONL file (`{id, img, label, text}` per line).
pub fn load_hateful(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Loaded, DatasetError> {
    parse_hateful(&read_file(path.as_ref())?, opts)
}

pub fn parse_hateful(text: &str, opts: LoadOptions) -> Result<Loaded, DatasetError> {
    let mut out = Loaded::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str::<Value>(line)
            .map_err(|e| format!("malformed JSON: {e}"))
            .and_then(|v| hateful_record(&v, opts.split));
        out.accept(&opts, &mut seen, i + 1, outcome)?;
    }
    Ok(out)
}

fn hateful_record(record: &Value, split: Split) -> Result<Sample, String> {
    let obj = record.as_object().ok_or("record is not an object")?;
    let id = id_of(obj.get("id"))?;
    let text = text_of(obj.get("text"))?;
    let gold = match obj.get("label").and_then(Value::as_i64) {
        Some(1) => [HATEFUL_LABEL].into_iter().collect(),
        Some(0) => LabelSet::new(),
        Some(other) => return Err(format!("label {other} outside {{0, 1}}")),
        None => return Err("missing or non-integer \"label\"".into()),
    };
    Ok(Sample {
        id,
        dataset: DatasetId::HatefulMemes,
        split,
        text,
        captions: BTreeMap::new(),
        image_ref: obj.get("img").and_then(Value::as_str).map(str::to_string),
        gold,
        human_explanation: None,
    })
}

/// Labels a classifier for `dataset` predicts.
pub fn label_space(dataset: DatasetId, taxonomy: &Taxonomy) -> Vec<Label> {
    match dataset {
        DatasetId::SemevalMemes => taxonomy.leaves(),
        DatasetId::JigsawToxic => JIGSAW_LABELS.iter().map(|&l| Label::from(l)).collect(),
        DatasetId::HatefulMemes => vec![Label::from(HATEFUL_LABEL)],
    }
}

/// Reassigns a seeded `fraction` of the train samples to the dev split.
/// Selection depends only on the sorted train ids and the seed.
pub fn holdout_dev(samples: &mut [Sample], fraction: f64, seed: u64) {
    let mut train_ids: Vec<String> =
        samples.iter().filter(|s| s.split == Split::Train).map(|s| s.id.clone()).collect();
    train_ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_ids.shuffle(&mut rng);
    let take = (train_ids.len() as f64 * fraction).round() as usize;
    let chosen: HashSet<String> = train_ids.into_iter().take(take).collect();
    for s in samples.iter_mut().filter(|s| s.split == Split::Train && chosen.contains(&s.id)) {
        s.split = Split::Dev;
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(&mut w, items).map_err(|e| DatasetError::io(path, e))?;
    w.flush().map_err(|e| DatasetError::io(path, e))
}

pub fn write_jsonl_to<T: Serialize>(w: &mut impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSONL records; malformed lines are reported with their line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| DatasetError::BadRecord { position: i + 1, reason: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Total label occurrences (multi-label technique counts).
    Occurrences,
    /// Number of samples.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub rows: Vec<DistributionRow>,
    /// Number of samples the table was computed from.
    pub total: usize,
    pub denominator: Denominator,
}

impl DistributionTable {
    fn base(&self) -> usize {
        match self.denominator {
            Denominator::Samples => self.total,
            Denominator::Occurrences => self.rows.iter().map(|r| r.count).sum(),
        }
    }

    pub fn percentage(&self, row: &DistributionRow) -> f64 {
        let base = self.base();
        if base == 0 {
            0.0
        } else {
            100.0 * row.count as f64 / base as f64
        }
    }

    pub fn row(&self, label: &str) -> Option<&DistributionRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self, decimals: usize) -> String {
        let width = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>8}  {:>10}\n", "Label", "Count", "Percentage");
        for row in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>10.decimals$}\n",
                row.label,
                row.count,
                self.percentage(row)
            ));
        }
        let unit = match self.denominator {
            Denominator::Occurrences => "label occurrences",
            Denominator::Samples => "samples",
        };
        out.push_str(&format!("Total: {} samples ({} {unit})\n", self.total, self.base()));
        out
    }
}

/// Per-label occurrence counts over gold sets. SemEval percentages are
/// relative to all technique occurrences, the flat corpora to the number
/// of samples. Hateful memes also get a `non-hateful` row.
pub fn label_distribution(samples: &[Sample]) -> Result<DistributionTable, DatasetError> {
    let first = samples.first().ok_or(DatasetError::Empty)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in samples {
        for l in &s.gold {
            *counts.entry(l.to_string()).or_default() += 1;
        }
    }
    if first.dataset == DatasetId::HatefulMemes {
        counts.entry(HATEFUL_LABEL.to_string()).or_default();
        counts.insert(
            NON_HATEFUL_ROW.to_string(),
            samples.iter().filter(|s| s.gold.is_empty()).count(),
        );
    }
    let mut rows: Vec<DistributionRow> =
        counts.into_iter().map(|(label, count)| DistributionRow { label, count }).collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    Ok(DistributionTable {
        rows,
        total: samples.len(),
        denominator: if first.dataset.is_hierarchical() {
            Denominator::Occurrences
        } else {
            Denominator::Samples
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn semeval_fixture() -> String {
        let mut records = Vec::new();
        for i in 0..9 {
            records.push(serde_json::json!({
                "id": format!("{}", 100 + i),
                "text": format!("  Meme   text {i}\n second line "),
                "labels": ["Smears", "Loaded Language"],
                "image": format!("prop_meme_{i}.png"),
            }));
        }
        records.push(serde_json::json!({
            "id": 200, "text": "they lie about everything", "labels": ["Straw Man"],
            "captions": {"blip": "a man  holding a sign"},
        }));
        serde_json::to_string(&records).unwrap()
    }

    #[test]
    fn semeval_fixture_loads_and_canonicalizes() {
        let tax = Taxonomy::semeval();
        let loaded = parse_semeval(&semeval_fixture(), &tax, LoadOptions::new(Split::Train)).unwrap();
        assert_eq!(loaded.samples.len(), 10);
        let last = &loaded.samples[9];
        assert_eq!(last.id, "200");
        assert!(last.gold.contains(&Label::from("Misrepresentation of Someone's Position (Straw Man)")));
        assert_eq!(last.captions["blip"], "a man holding a sign");
        assert_eq!(loaded.samples[0].text, "Meme text 0 second line");
        assert_eq!(loaded.samples[0].image_ref.as_deref(), Some("prop_meme_0.png"));
    }

    #[test]
    fn semeval_empty_labels_and_unknown_label() {
        let tax = Taxonomy::semeval();
        let ok = r#"[{"id":"1","text":"hello","labels":[]}]"#;
        let loaded = parse_semeval(ok, &tax, LoadOptions::new(Split::Dev)).unwrap();
        assert!(loaded.samples[0].gold.is_empty());
        assert_eq!(loaded.samples[0].split, Split::Dev);

        let bad = r#"[{"id":"1","text":"hello","labels":["Propaganda"]},{"id":"2","text":"x","labels":[]}]"#;
        match parse_semeval(bad, &tax, LoadOptions::new(Split::Train)) {
            Err(DatasetError::BadRecord { position: 1, reason }) => assert!(reason.contains("Propaganda")),
            other => panic!("unexpected {other:?}"),
        }
        let skipped = parse_semeval(bad, &tax, LoadOptions { split: Split::Train, skip_bad: true }).unwrap();
        assert_eq!(skipped.samples.len(), 1);
        assert_eq!(skipped.skipped[0].position, 1);

        assert!(matches!(parse_semeval("[{", &tax, LoadOptions::new(Split::Train)), Err(DatasetError::Json(_))));
    }

    #[test]
    fn semeval_duplicate_id_is_bad_record() {
        let tax = Taxonomy::semeval();
        let dup = r#"[{"id":"1","text":"a","labels":[]},{"id":"1","text":"b","labels":[]}]"#;
        assert!(matches!(
            parse_semeval(dup, &tax, LoadOptions::new(Split::Train)),
            Err(DatasetError::BadRecord { position: 2, .. })
        ));
    }

    const JIGSAW_HEADER: &str = "id,comment_text,toxic,severe_toxic,obscene,threat,insult,identity_hate\n";

    #[test]
    fn jigsaw_rows() {
        let csv = format!(
            "{JIGSAW_HEADER}a1,\"plain comment\",0,0,0,0,0,0\na2,\"you are, \"\"quoted\"\"\nand multi-line\",1,0,0,0,1,0\n"
        );
        let loaded = parse_jigsaw(csv.as_bytes(), LoadOptions::new(Split::Train)).unwrap();
        assert_eq!(loaded.samples.len(), 2);
        assert!(loaded.samples[0].gold.is_empty());
        assert_eq!(loaded.samples[1].gold, ["toxic", "insult"].into_iter().collect());
        assert_eq!(loaded.samples[1].text, "you are, \"quoted\" and multi-line");
    }

    #[test]
    fn jigsaw_errors() {
        let missing = "id,comment_text,toxic\n1,x,0\n";
        assert!(matches!(
            parse_jigsaw(missing.as_bytes(), LoadOptions::new(Split::Train)),
            Err(DatasetError::MissingColumn(c)) if c == "severe_toxic"
        ));
        let nonbinary = format!("{JIGSAW_HEADER}a1,x,2,0,0,0,0,0\n");
        assert!(matches!(
            parse_jigsaw(nonbinary.as_bytes(), LoadOptions::new(Split::Train)),
            Err(DatasetError::BadRecord { position: 1, .. })
        ));
    }

    #[test]
    fn hateful_lines() {
        let text = "{\"id\":\"1\",\"img\":\"img/1.png\",\"label\":1,\"text\":\"...\"}\n{\"id\":42953,\"img\":\"img/42953.png\",\"label\":0,\"text\":\"its their character not their color that matters\"}\n";
        let loaded = parse_hateful(text, LoadOptions::new(Split::Train)).unwrap();
        assert_eq!(loaded.samples[0].gold, [HATEFUL_LABEL].into_iter().collect());
        assert_eq!(loaded.samples[0].image_ref.as_deref(), Some("img/1.png"));
        assert_eq!(loaded.samples[1].id, "42953");
        assert!(loaded.samples[1].gold.is_empty());

        let bad = "{\"id\":\"1\",\"img\":\"a\",\"label\":0,\"text\":\"x\"}\n{\"id\":\"2\",\"img\":\"b\",\"label\":2,\"text\":\"y\"}\n";
        match parse_hateful(bad, LoadOptions::new(Split::Train)) {
            Err(DatasetError::BadRecord { position, reason }) => {
                assert_eq!(position, 2);
                assert!(reason.contains("label 2"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_hateful("{not json\n", LoadOptions::new(Split::Train)),
            Err(DatasetError::BadRecord { position: 1, .. })
        ));
    }

    fn sample(id: &str, dataset: DatasetId, gold: &[&str]) -> Sample {
        Sample {
            id: id.into(),
            dataset,
            split: Split::Train,
            text: "t".into(),
            captions: BTreeMap::new(),
            image_ref: None,
            gold: gold.iter().copied().collect(),
            human_explanation: None,
        }
    }

    #[test]
    fn distribution_occurrence_denominator() {
        let s = vec![
            sample("1", DatasetId::SemevalMemes, &["Smears"]),
            sample("2", DatasetId::SemevalMemes, &["Smears", "Transfer"]),
        ];
        let t = label_distribution(&s).unwrap();
        assert_eq!(t.rows[0], DistributionRow { label: "Smears".into(), count: 2 });
        assert_eq!(format!("{:.1}", t.percentage(&t.rows[0])), "66.7");
        assert_eq!(format!("{:.1}", t.percentage(&t.rows[1])), "33.3");
        assert_eq!(t.total, 2);
    }

    #[test]
    fn distribution_edge_cases() {
        let t = label_distribution(&[sample("1", DatasetId::SemevalMemes, &[])]).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.total, 1);
        assert!(matches!(label_distribution(&[]), Err(DatasetError::Empty)));

        let h = label_distribution(&[
            sample("1", DatasetId::HatefulMemes, &["hateful"]),
            sample("2", DatasetId::HatefulMemes, &[]),
        ])
        .unwrap();
        assert_eq!(h.percentage(h.row("hateful").unwrap()), 50.0);
        assert_eq!(h.percentage(h.row(NON_HATEFUL_ROW).unwrap()), 50.0);
        assert!(h.render(1).contains("50.0"));
    }

    #[test]
    fn holdout_is_seeded_and_sized() {
        let mut a: Vec<Sample> = (0..50).map(|i| sample(&format!("{i:03}"), DatasetId::SemevalMemes, &[])).collect();
        let mut b = a.clone();
        b.reverse();
        holdout_dev(&mut a, 0.1, 9);
        holdout_dev(&mut b, 0.1, 9);
        let dev_a: HashSet<_> = a.iter().filter(|s| s.split == Split::Dev).map(|s| s.id.clone()).collect();
        let dev_b: HashSet<_> = b.iter().filter(|s| s.split == Split::Dev).map(|s| s.id.clone()).collect();
        assert_eq!(dev_a.len(), 5);
        assert_eq!(dev_a, dev_b);
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_text("  A\t\tB \n C  "), "A B C");
        // Decomposed e + combining acute becomes the precomposed form.
        assert_eq!(normalize_text("cliche\u{301}"), "clich\u{e9}");
        assert_eq!(normalize_text("F*** YOU"), "F*** YOU");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn jsonl_round_trip(
                texts in proptest::collection::vec("[a-zA-Z0-9 ,.!?'\"\u{e9}\u{4e2d}]{1,40}", 1..8),
                with_caption in any::<bool>(),
            ) {
                let tax = Taxonomy::semeval();
                let records: Vec<Value> = texts.iter().enumerate().map(|(i, t)| {
                    let mut r = serde_json::json!({"id": i.to_string(), "text": format!("x {t}"), "labels": ["Doubt"]});
                    if with_caption {
                        r["captions"] = serde_json::json!({"blip": t});
                    }
                    r
                }).collect();
                let loaded = parse_semeval(&serde_json::to_string(&records).unwrap(), &tax, LoadOptions::new(Split::Train)).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("samples.jsonl");
                write_jsonl(&path, &loaded.samples).unwrap();
                let back: Vec<Sample> = read_jsonl(&path).unwrap();
                prop_assert_eq!(back, loaded.samples);
            }
        }
    }
}
