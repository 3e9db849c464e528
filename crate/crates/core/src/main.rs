use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use semaug::augment::{
    augment_run, clean_corpus, compose_input, AugmentSettings, AugmentationRecord, AugmentError, ComposeSettings,
    ComposedInput, Condition, Strategy,
};
use semaug::classifier::{
    export_external, featurize, import_external, parse_zero_shot, train, ClassifierError, FeatureSpec, Model,
    PredictionSet, Thresholds, TrainConfig, TrainExample,
};
use semaug::datasets::{
    label_distribution, label_space, load_hateful, load_jigsaw, load_semeval, read_jsonl, write_jsonl, DatasetError,
    DatasetId, LoadOptions, Sample, Split,
};
use semaug::llm_client::{
    Cache, CompletionRequest, HttpProvider, LlmClient, LlmError, MockProvider, Provider, RetryPolicy, Scenario,
    TemplateId,
};
use semaug::metrics::MetricsError;
use semaug::runner::{self, evaluate_predictions, render_report, CleanLine, ExperimentConfig, RunOptions, RunnerError, Stage};
use semaug::stats::{bh_correct, t_one_sample, wilcoxon_signed_rank, StatsError, TestMethod};
use semaug::synthetic::{generate, SyntheticSpec};
use semaug::{Label, LabelSet, Taxonomy};

#[derive(Parser)]
#[command(name = "semaug", version, about = "LLM-based semantic augmentation and evaluation for multi-label classification")]
struct Cli {
    /// Taxonomy file (defaults to the built-in SemEval persuasion taxonomy).
    #[arg(long, global = true)]
    taxonomy: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw dataset file into canonical JSONL.
    Ingest(IngestArgs),
    /// Print the label distribution of a canonical corpus.
    Distribution(DistributionArgs),
    /// Clean every caption of a corpus with the LLM.
    Clean(CleanArgs),
    /// Generate explanations (or explanations with triggers) for R runs.
    Augment(AugmentArgs),
    /// Compose classifier inputs for one condition.
    Compose(ComposeArgs),
    /// Train the bag-of-words classifier on composed inputs.
    Train(TrainArgs),
    /// Predict labels with a trained model or import external predictions.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Classify with the LLM directly from the taxonomy prompt.
    ZeroShot(ZeroShotArgs),
    /// Significance tests with Benjamini-Hochberg correction.
    Stats(StatsArgs),
    /// Write composed inputs in the external-trainer exchange format.
    Export(ExportArgs),
    /// Run (or resume) a full experiment from a config file.
    Run(RunArgs),
    /// Rebuild the report of a run directory.
    Report(ReportArgs),
    /// Write a synthetic corpus, mock scenario and config for a demo run.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    dataset: DatasetId,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    /// Append to an existing corpus instead of replacing it.
    #[arg(long)]
    append: bool,
    /// Report and skip unparseable records instead of aborting.
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Args)]
struct DistributionArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long, default_value_t = 2)]
    decimals: usize,
}

#[derive(Args)]
struct LlmArgs {
    #[arg(long)]
    model: String,
    /// Overrides the template's default temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value = "cache")]
    cache_dir: PathBuf,
    /// Mock scenario file; without it requests go to the HTTP endpoint
    /// configured by SEMAUG_API_BASE / SEMAUG_API_KEY.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 5)]
    max_attempts: u32,
}

impl LlmArgs {
    fn client(&self) -> Result<LlmClient, CliError> {
        if self.parallelism == 0 {
            return Err(CliError::validation("--parallelism must be at least 1"));
        }
        let provider: Arc<dyn Provider> = match &self.scenario {
            Some(p) => Arc::new(MockProvider::new(Scenario::from_path(p)?)?),
            None => Arc::new(HttpProvider::from_env(Duration::from_secs(self.timeout_secs))?),
        };
        let retry = RetryPolicy { max_attempts: self.max_attempts, ..RetryPolicy::default() };
        Ok(LlmClient::new(provider).with_cache(Cache::new(&self.cache_dir)).with_retry(retry))
    }

    fn settings(&self, strategy: Strategy, captioner: &str) -> AugmentSettings {
        let mut s = AugmentSettings::new(&self.model, strategy);
        if let Some(t) = self.temperature {
            s.clean_temperature = t;
            s.explain_temperature = t;
        }
        s.captioner = captioner.to_string();
        s.parallelism = self.parallelism;
        s
    }
}

#[derive(Args)]
struct CleanArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output of `clean`; captions are cleaned first when omitted.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    runs: u32,
    /// `explanation` or `triggers` (defaults by dataset).
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, default_value = "blip")]
    captioner: String,
    /// Directory receiving run_<r>.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    condition: Condition,
    /// Augmentation records of one run (needed by conditions with E).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Output of `clean` (needed by T+C when no records are given).
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, default_value = "blip")]
    captioner: String,
    #[arg(long)]
    allow_empty_marker: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    composed: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train on every taxonomy node with ancestor-closed targets.
    #[arg(long)]
    all_nodes: bool,
    #[arg(long)]
    dim: Option<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Tune per-label thresholds on the corpus dev split.
    #[arg(long)]
    tune_thresholds: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, required_unless_present = "external")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "external")]
    composed: Option<PathBuf>,
    /// External-trainer predictions (`{id, scores?, labels?}` lines).
    #[arg(long, conflicts_with = "model")]
    external: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Add the ancestors of every predicted label.
    #[arg(long)]
    closure: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Gold JSONL: canonical samples, or `{id, labels}` lines.
    #[arg(long)]
    gold: PathBuf,
    /// Predictions JSONL: `{id, labels, scores?}` lines.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "semeval")]
    dataset: DatasetId,
    /// Write the metrics as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroShotArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Output of `clean`, used to describe the image.
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long, default_value = "blip")]
    captioner: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
}

#[derive(Args)]
struct StatsArgs {
    /// JSON: `{"comparisons": [{"name", "p"} | {"name", "x", "y"} | {"name", "values", "mu0"}]}`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    composed: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stop_after: Option<Stage>,
}

#[derive(Args)]
struct ReportArgs {
    run_dir: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "semeval")]
    dataset: DatasetId,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    runs: u32,
    #[arg(long, default_value_t = 0.0)]
    invalid_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    refusal_fraction: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    fn stage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        CliError { code: e.exit_code() as u8, message: e.to_string() }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        let code = match e {
            LlmError::Provider { .. } => 3,
            LlmError::Scenario(_) | LlmError::Config(_) => 1,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Llm { sample_id, source } => {
                let inner = CliError::from(source);
                CliError { code: inner.code, message: format!("sample {sample_id}: {}", inner.message) }
            }
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::stage(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Llm(inner) => CliError::from(inner),
            ClassifierError::Io(_) => CliError::stage(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::stage(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn taxonomy(path: &Option<PathBuf>) -> Result<Taxonomy, CliError> {
    match path {
        Some(p) => Taxonomy::from_path(p).map_err(|e| CliError::validation(e.to_string())),
        None => Ok(Taxonomy::semeval()),
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let tax = taxonomy(&cli.taxonomy)?;
    match cli.command {
        Command::Ingest(a) => ingest(a, &tax),
        Command::Distribution(a) => distribution(a),
        Command::Clean(a) => clean(a),
        Command::Augment(a) => augment(a),
        Command::Compose(a) => compose(a),
        Command::Train(a) => train_cmd(a, &tax),
        Command::Predict(a) => predict(a, &tax),
        Command::Evaluate(a) => evaluate(a, &tax),
        Command::ZeroShot(a) => zero_shot(a, &tax),
        Command::Stats(a) => stats(a),
        Command::Export(a) => export(a),
        Command::Run(a) => run(a, cli.taxonomy),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    }
}

fn ingest(a: IngestArgs, tax: &Taxonomy) -> CliResult {
    let opts = LoadOptions { skip_bad: a.skip_bad, ..LoadOptions::new(a.split) };
    let loaded = match a.dataset {
        DatasetId::SemevalMemes => load_semeval(&a.input, tax, opts)?,
        DatasetId::JigsawToxic => load_jigsaw(&a.input, opts)?,
        DatasetId::HatefulMemes => load_hateful(&a.input, opts)?,
    };
    for bad in &loaded.skipped {
        eprintln!("skipped record {}: {}", bad.position, bad.reason);
    }
    let mut samples = if a.append && a.out.is_file() { read_jsonl::<Sample>(&a.out)? } else { Vec::new() };
    let existing: std::collections::HashSet<String> = samples.iter().map(|s| s.id.clone()).collect();
    if let Some(dup) = loaded.samples.iter().find(|s| existing.contains(&s.id)) {
        return Err(CliError::validation(format!("sample id {} already present in {}", dup.id, a.out.display())));
    }
    let added = loaded.samples.len();
    samples.extend(loaded.samples);
    write_jsonl(&a.out, &samples)?;
    println!("wrote {added} {} samples ({} skipped) to {}", a.split, loaded.skipped.len(), a.out.display());
    Ok(())
}

fn distribution(a: DistributionArgs) -> CliResult {
    let mut samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    if let Some(split) = a.split {
        samples.retain(|s| s.split == split);
    }
    let table = label_distribution(&samples)?;
    print!("{}", table.render(a.decimals));
    Ok(())
}

fn clean_lines(samples: &[Sample], llm: &LlmClient, settings: &AugmentSettings) -> Result<Vec<CleanLine>, CliError> {
    let cleaned = clean_corpus(samples, llm, settings)?;
    Ok(samples
        .iter()
        .zip(cleaned)
        .map(|(s, (clean, digests))| CleanLine { id: s.id.clone(), clean, digests })
        .collect())
}

fn clean(a: CleanArgs) -> CliResult {
    let samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    let llm = a.llm.client()?;
    let settings = a.llm.settings(Strategy::Explanation, "blip");
    let lines = clean_lines(&samples, &llm, &settings)?;
    write_jsonl(&a.out, &lines)?;
    let total: usize = lines.iter().map(|l| l.clean.len()).sum();
    let valid: usize = lines.iter().map(|l| l.clean.values().filter(|c| c.is_valid()).count()).sum();
    println!("cleaned {total} captions, {valid} valid");
    Ok(())
}

fn read_clean(path: &Path, samples: &[Sample]) -> Result<Vec<CleanLine>, CliError> {
    let lines: Vec<CleanLine> = read_jsonl(path)?;
    let by_id: BTreeMap<&str, &CleanLine> = lines.iter().map(|l| (l.id.as_str(), l)).collect();
    samples
        .iter()
        .map(|s| {
            by_id
                .get(s.id.as_str())
                .map(|l| (*l).clone())
                .ok_or_else(|| CliError::validation(format!("{} has no entry for sample {}", path.display(), s.id)))
        })
        .collect()
}

fn augment(a: AugmentArgs) -> CliResult {
    let samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    let dataset = samples.first().map(|s| s.dataset).ok_or_else(|| CliError::validation("empty corpus"))?;
    let strategy = a.strategy.unwrap_or_else(|| Strategy::default_for(dataset));
    let llm = a.llm.client()?;
    let settings = a.llm.settings(strategy, &a.captioner);
    let lines = match &a.clean {
        Some(p) => read_clean(p, &samples)?,
        None => clean_lines(&samples, &llm, &settings)?,
    };
    let cleaned: Vec<_> = lines.into_iter().map(|l| (l.clean, l.digests)).collect();
    fs::create_dir_all(&a.out_dir)?;
    for run in 0..a.runs {
        let records = augment_run(&samples, &cleaned, &llm, &settings, run)?;
        let refusals = records.iter().filter(|r| r.refusal).count();
        let path = a.out_dir.join(format!("run_{run}.jsonl"));
        write_jsonl(&path, &records)?;
        println!("run {run}: {} records, {refusals} refusals -> {}", records.len(), path.display());
    }
    let stats = llm.stats();
    println!("provider calls {}, cache hits {}", stats.provider_calls, stats.cache_hits);
    Ok(())
}

fn compose(a: ComposeArgs) -> CliResult {
    let samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    let dataset = samples.first().map(|s| s.dataset).ok_or_else(|| CliError::validation("empty corpus"))?;
    let strategy = a.strategy.unwrap_or_else(|| Strategy::default_for(dataset));
    if a.condition.uses_explanation() && a.records.is_none() {
        return Err(CliError::validation(format!("condition {} needs --records", a.condition)));
    }
    let mut records: BTreeMap<String, AugmentationRecord> = BTreeMap::new();
    if let Some(p) = &a.records {
        for r in read_jsonl::<AugmentationRecord>(p)? {
            records.insert(r.sample_id.clone(), r);
        }
    } else if let Some(p) = &a.clean {
        for l in read_jsonl::<CleanLine>(p)? {
            let r = AugmentationRecord {
                sample_id: l.id.clone(),
                run_index: 0,
                explanation: None,
                triggers: None,
                clean: l.clean,
                refusal: false,
                parse_error: None,
                raw_completions: l.digests,
            };
            records.insert(l.id, r);
        }
    } else if a.condition.uses_caption() {
        return Err(CliError::validation(format!("condition {} needs --clean or --records", a.condition)));
    }
    let settings = ComposeSettings { allow_empty_marker: a.allow_empty_marker, ..ComposeSettings::new(strategy, &a.captioner) };
    let mut composed = Vec::new();
    let mut unusable = 0;
    for s in &samples {
        match compose_input(s, records.get(&s.id), a.condition, &settings) {
            Ok(c) => composed.push(c),
            Err(u) => {
                log::warn!("sample {} has no usable input for {}", u.sample_id, u.condition);
                unusable += 1;
            }
        }
    }
    let degraded = composed.iter().filter(|c| c.effective != c.condition).count();
    write_jsonl(&a.out, &composed)?;
    println!("composed {} inputs ({degraded} degraded, {unusable} unusable)", composed.len());
    Ok(())
}

fn train_cmd(a: TrainArgs, tax: &Taxonomy) -> CliResult {
    let samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    let composed: Vec<ComposedInput> = read_jsonl(&a.composed)?;
    let dataset = samples.first().map(|s| s.dataset).ok_or_else(|| CliError::validation("empty corpus"))?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut spec = FeatureSpec::default();
    if let Some(d) = a.dim {
        spec.dim = d;
    }
    let mut config = TrainConfig::default();
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let space: Vec<Label> = if a.all_nodes { tax.nodes().cloned().collect() } else { label_space(dataset, tax) };
    let targets = |s: &Sample| -> Result<LabelSet, CliError> {
        if a.all_nodes {
            tax.expand(&s.gold).map_err(|e| CliError::validation(e.to_string()))
        } else {
            Ok(s.gold.clone())
        }
    };
    let mut examples = Vec::new();
    let mut dev = Vec::new();
    for c in &composed {
        let s = by_id
            .get(c.sample_id.as_str())
            .ok_or_else(|| CliError::validation(format!("composed input for unknown sample {}", c.sample_id)))?;
        match s.split {
            Split::Train => examples.push(TrainExample { id: s.id.clone(), features: featurize(&c.text, &spec), labels: targets(s)? }),
            Split::Dev => dev.push((featurize(&c.text, &spec), targets(s)?)),
            Split::Test => {}
        }
    }
    let (mut model, report) = train(&examples, &space, &spec, &config)?;
    model.thresholds = Thresholds { global: a.threshold, ..Thresholds::default() };
    if a.tune_thresholds {
        if dev.is_empty() {
            return Err(CliError::validation("--tune-thresholds needs dev samples in the corpus"));
        }
        model.tune_thresholds(&dev)?;
    }
    model.save(&a.out)?;
    println!(
        "trained on {} samples, {} labels; final objective {:.5}",
        examples.len(),
        space.len(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn predict(a: PredictArgs, tax: &Taxonomy) -> CliResult {
    let samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    let dataset = samples.first().map(|s| s.dataset).ok_or_else(|| CliError::validation("empty corpus"))?;
    let ids: Vec<String> = samples.iter().filter(|s| s.split == a.split).map(|s| s.id.clone()).collect();
    let closure = (a.closure && dataset.is_hierarchical()).then_some(tax);
    let preds: Vec<PredictionSet> = if let Some(ext) = &a.external {
        let thresholds = Thresholds { global: a.threshold, ..Thresholds::default() };
        import_external(ext, &ids, &label_space(dataset, tax), &thresholds, closure)?
    } else {
        let model = Model::load(a.model.as_ref().expect("required by clap"))?;
        let composed: Vec<ComposedInput> = read_jsonl(a.composed.as_ref().expect("required by clap"))?;
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        composed
            .iter()
            .filter(|c| wanted.contains(c.sample_id.as_str()))
            .map(|c| model.predict(&c.sample_id, &c.text, closure))
            .collect::<Result<_, _>>()?
    };
    write_jsonl(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct GoldLine {
    id: String,
    #[serde(alias = "gold")]
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct PredLine {
    #[serde(alias = "sample_id")]
    id: String,
    labels: Vec<String>,
    #[serde(default)]
    scores: Option<BTreeMap<String, f64>>,
}

fn evaluate(a: EvaluateArgs, tax: &Taxonomy) -> CliResult {
    let gold: Vec<GoldLine> = read_jsonl(&a.gold)?;
    let preds: Vec<PredLine> = read_jsonl(&a.predictions)?;
    let gold_by_id: BTreeMap<&str, &GoldLine> = gold.iter().map(|g| (g.id.as_str(), g)).collect();
    let space = label_space(a.dataset, tax);
    let canon = |names: &[String]| -> Result<LabelSet, CliError> {
        if a.dataset.is_hierarchical() {
            names.iter().map(|n| tax.canonicalize(n).map_err(|e| CliError::validation(e.to_string()))).collect()
        } else {
            Ok(names.iter().map(|n| Label::new(n.as_str())).collect())
        }
    };
    let mut gold_sets = Vec::new();
    let mut pred_sets = Vec::new();
    let with_scores = preds.iter().all(|p| p.scores.is_some());
    for p in &preds {
        let g = gold_by_id
            .get(p.id.as_str())
            .ok_or_else(|| CliError::validation(format!("prediction for unknown id {}", p.id)))?;
        gold_sets.push(canon(&g.labels)?);
        let scores = p
            .scores
            .as_ref()
            .map(|s| s.iter().map(|(k, v)| (Label::new(k.as_str()), *v)).collect())
            .unwrap_or_default();
        pred_sets.push(PredictionSet { sample_id: p.id.clone(), scores, labels: canon(&p.labels)? });
    }
    if preds.len() != gold.len() {
        log::warn!("{} gold records but {} predictions; scoring the predicted ids", gold.len(), preds.len());
    }
    let m = evaluate_predictions(a.dataset, tax, &space, &gold_sets, &pred_sets, with_scores)?;
    let pct = |v: Option<f64>| v.map_or_else(|| "--".to_string(), |x| format!("{:.2}", 100.0 * x));
    println!("samples    {}", m.n_eval);
    if a.dataset.is_hierarchical() {
        println!("H-P        {}", pct(m.h_precision));
        println!("H-R        {}", pct(m.h_recall));
        println!("H-F1       {}", pct(m.h_f1));
    }
    println!("micro-F1   {}", pct(Some(m.micro_f1)));
    println!("macro-F1   {}", pct(Some(m.macro_f1)));
    println!("macro-AUC  {}", pct(m.macro_auc));
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&m).expect("serializable") + "\n")?;
    }
    Ok(())
}

fn zero_shot(a: ZeroShotArgs, tax: &Taxonomy) -> CliResult {
    let samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    let eval: Vec<&Sample> = samples.iter().filter(|s| s.split == a.split).collect();
    if eval.iter().any(|s| !s.dataset.is_hierarchical()) {
        return Err(CliError::validation("zero-shot classification needs the semeval taxonomy"));
    }
    let clean: BTreeMap<String, CleanLine> = match &a.clean {
        Some(p) => read_jsonl::<CleanLine>(p)?.into_iter().map(|l| (l.id.clone(), l)).collect(),
        None => BTreeMap::new(),
    };
    let llm = a.llm.client()?;
    let space = label_space(DatasetId::SemevalMemes, tax);
    let requests: Vec<CompletionRequest> = eval
        .iter()
        .map(|s| {
            let img = clean.get(&s.id).map_or("", |l| semaug::augment::best_caption(&l.clean, &a.captioner));
            let mut r = CompletionRequest::new(TemplateId::ZeroShotClassify, &a.llm.model, 0)
                .field("text", &s.text)
                .field("img", img);
            if let Some(t) = a.llm.temperature {
                r = r.temperature(t);
            }
            r
        })
        .collect();
    let mut preds = Vec::new();
    let (mut dropped, mut invalid) = (0, 0);
    for (s, result) in eval.iter().zip(llm.complete_all(&requests, a.llm.parallelism)) {
        let c = result?;
        let labels = match parse_zero_shot(&c.raw_text, tax, &space) {
            Ok(p) => {
                dropped += p.dropped.len();
                p.labels
            }
            Err(e) => {
                log::warn!("sample {}: {e}", s.id);
                invalid += 1;
                LabelSet::new()
            }
        };
        let scores = space.iter().map(|l| (l.clone(), if labels.contains(l) { 1.0 } else { 0.0 })).collect();
        preds.push(PredictionSet { sample_id: s.id.clone(), scores, labels });
    }
    write_jsonl(&a.out, &preds)?;
    println!("{} predictions, {dropped} out-of-taxonomy labels dropped, {invalid} unusable responses", preds.len());
    Ok(())
}

#[derive(Deserialize)]
struct StatsInput {
    comparisons: Vec<StatsItem>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StatsItem {
    Paired { name: String, x: Vec<f64>, y: Vec<f64> },
    OneSample { name: String, values: Vec<f64>, mu0: f64 },
    Given { name: String, p: f64 },
}

#[derive(Serialize)]
struct StatsRow {
    name: String,
    test: Option<TestMethod>,
    statistic: Option<f64>,
    p: f64,
    adjusted_p: f64,
    significant: bool,
}

fn stats(a: StatsArgs) -> CliResult {
    let text = fs::read_to_string(&a.input)?;
    let input: StatsInput = serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", a.input.display())))?;
    let mut rows = Vec::new();
    for item in input.comparisons {
        let (name, test, statistic, p) = match item {
            StatsItem::Paired { name, x, y } => {
                let r = wilcoxon_signed_rank(&x, &y)?;
                (name, Some(r.method), Some(r.statistic), r.p_value)
            }
            StatsItem::OneSample { name, values, mu0 } => {
                let r = t_one_sample(&values, mu0)?;
                (name, Some(r.method), Some(r.statistic), r.p_value)
            }
            StatsItem::Given { name, p } => (name, None, None, p),
        };
        rows.push(StatsRow { name, test, statistic, p, adjusted_p: f64::NAN, significant: false });
    }
    let ps: Vec<f64> = rows.iter().map(|r| r.p).collect();
    let bh = bh_correct(&ps, a.alpha)?;
    for (i, row) in rows.iter_mut().enumerate() {
        row.adjusted_p = bh.adjusted_p[i];
        row.significant = bh.significant[i];
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("serializable"));
        return Ok(());
    }
    let width = rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(4).max(10);
    println!("{:<width$}  {:>10}  {:>8}  {:>8}  Significant (alpha = {})", "Comparison", "Statistic", "p", "p (BH)", a.alpha);
    for r in &rows {
        let stat = r.statistic.map_or_else(|| "--".to_string(), |s| format!("{s:.4}"));
        println!(
            "{:<width$}  {stat:>10}  {:>8.4}  {:>8.4}  {}",
            r.name,
            r.p,
            r.adjusted_p,
            if r.significant { "Yes" } else { "No" }
        );
    }
    Ok(())
}

fn export(a: ExportArgs) -> CliResult {
    let samples: Vec<Sample> = read_jsonl(&a.corpus)?;
    let composed: Vec<ComposedInput> = read_jsonl(&a.composed)?;
    let gold: BTreeMap<String, LabelSet> = samples.into_iter().map(|s| (s.id, s.gold)).collect();
    export_external(&a.out, &composed, &gold)?;
    println!("exported {} inputs to {}", composed.len(), a.out.display());
    Ok(())
}

fn run(a: RunArgs, taxonomy: Option<PathBuf>) -> CliResult {
    let mut cfg = ExperimentConfig::from_path(&a.config)?;
    if taxonomy.is_some() {
        cfg.taxonomy = taxonomy;
    }
    let outcome = runner::run_experiment(&cfg, RunOptions { stop_after: a.stop_after, provider: None })?;
    match (&outcome.report, outcome.stopped_after) {
        (Some(r), _) => print!("{}", render_report(r)),
        (None, Some(stage)) => println!("stopped after {stage}; rerun to resume"),
        (None, None) => {}
    }
    eprintln!(
        "run directory {} (provider calls {}, cache hits {})",
        outcome.run_dir.display(),
        outcome.llm_stats.provider_calls,
        outcome.llm_stats.cache_hits
    );
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let r = runner::report(&a.run_dir)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
    } else {
        print!("{}", render_report(&r));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    for f in [a.invalid_fraction, a.refusal_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(CliError::validation(format!("fraction {f} is outside [0, 1]")));
        }
    }
    let spec = SyntheticSpec {
        runs: a.runs,
        invalid_caption_fraction: a.invalid_fraction,
        refusal_fraction: a.refusal_fraction,
        ..SyntheticSpec::new(a.dataset, a.samples, a.seed)
    };
    let bundle = generate(&spec);
    fs::create_dir_all(&a.out_dir)?;
    write_jsonl(a.out_dir.join("corpus.jsonl"), &bundle.samples)?;
    fs::write(a.out_dir.join("scenario.json"), serde_json::to_string_pretty(&bundle.scenario).expect("serializable"))?;
    let conditions = if a.dataset == DatasetId::JigsawToxic { r#"["T", "TE"]"# } else { r#"["T", "TC", "TCE"]"# };
    let config = format!(
        r#"version = 1
name = "synthetic"
dataset = "{dataset}"
corpus = "corpus.jsonl"
conditions = {conditions}
runs_per_condition = {runs}
model_id = "mock-llm"
seed = {seed}

[provider]
kind = "mock"
scenario = "scenario.json"
"#,
        dataset = a.dataset,
        runs = a.runs,
        seed = a.seed,
    );
    fs::write(a.out_dir.join("config.toml"), config)?;
    println!("wrote corpus.jsonl, scenario.json and config.toml to {}", a.out_dir.display());
    Ok(())
}
