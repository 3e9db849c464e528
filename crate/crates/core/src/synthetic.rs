//! Seeded synthetic corpora with matching mock-provider scenarios, for
//! demos and end-to-end tests without a live model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::Strategy;
use crate::datasets::{DatasetId, Sample, Split, HATEFUL_LABEL, JIGSAW_LABELS};
use crate::label::{Label, LabelSet};
use crate::llm_client::{Scenario, ScenarioRule, TemplateId};

pub const REFUSAL_TEXT: &str =
    "I apologize, but I do not feel comfortable creating content that promotes harmful stereotypes.";

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub dataset: DatasetId,
    pub samples: usize,
    pub seed: u64,
    pub label_pool: Vec<Label>,
    pub test_fraction: f64,
    /// Probability that each gold label's cue word appears in the meme text.
    pub text_signal: f64,
    /// Probability that each gold label's cue word appears in a generated
    /// explanation.
    pub explanation_signal: f64,
    pub invalid_caption_fraction: f64,
    pub refusal_fraction: f64,
    pub runs: u32,
    pub strategy: Strategy,
}

impl SyntheticSpec {
    pub fn new(dataset: DatasetId, samples: usize, seed: u64) -> Self {
        let label_pool = match dataset {
            DatasetId::SemevalMemes => ["Smears", "Loaded Language", "Name calling/Labeling", "Glittering generalities (Virtue)", "Doubt", "Slogans"]
                .into_iter()
                .map(Label::from)
                .collect(),
            DatasetId::JigsawToxic => JIGSAW_LABELS.iter().map(|&l| Label::from(l)).collect(),
            DatasetId::HatefulMemes => vec![Label::from(HATEFUL_LABEL)],
        };
        SyntheticSpec {
            dataset,
            samples,
            seed,
            label_pool,
            test_fraction: 0.3,
            text_signal: 0.15,
            explanation_signal: 0.9,
            invalid_caption_fraction: 0.0,
            refusal_fraction: 0.0,
            runs: 5,
            strategy: Strategy::default_for(dataset),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub samples: Vec<Sample>,
    pub scenario: Scenario,
}

/// Cue word standing for the label at `index` of the pool.
pub fn cue_word(index: usize) -> String {
    const SYLLABLES: [&str; 8] = ["zor", "vek", "lum", "tas", "qir", "mod", "yen", "pax"];
    format!("{}{}cue", SYLLABLES[index % 8], SYLLABLES[(index / 8) % 8])
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.gen_range(0..150))).collect()
}

fn pick_gold(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pool = spec.label_pool.len();
    match spec.dataset {
        DatasetId::HatefulMemes => if rng.gen_bool(0.5) { vec![0] } else { Vec::new() },
        DatasetId::JigsawToxic => (0..pool).filter(|_| rng.gen_bool(0.25)).collect(),
        DatasetId::SemevalMemes => {
            let k = if rng.gen_bool(0.6) { 1 } else { 2 };
            let mut idx: Vec<usize> = (0..pool).collect();
            idx.shuffle(rng);
            idx.truncate(k.min(pool));
            idx.sort_unstable();
            idx
        }
    }
}

fn selected(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (n as f64 * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = vec![false; n];
    for &i in &idx[..k.min(n)] {
        out[i] = true;
    }
    out
}

fn rule(template: TemplateId, field: &str, equals: &str, responses: Vec<String>) -> ScenarioRule {
    ScenarioRule {
        template: Some(template),
        field: Some(field.to_string()),
        equals: Some(equals.to_string()),
        responses,
        ..ScenarioRule::default()
    }
}

/// Builds the corpus and a strict scenario answering every cleaning,
/// explanation and zero-shot request the pipeline will issue for it.
pub fn generate(spec: &SyntheticSpec) -> SyntheticBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.samples;
    let invalid = selected(n, spec.invalid_caption_fraction, &mut rng);
    let refused = selected(n, spec.refusal_fraction, &mut rng);
    let test = selected(n, spec.test_fraction, &mut rng);
    let with_captions = spec.dataset != DatasetId::JigsawToxic;

    let mut samples = Vec::with_capacity(n);
    let mut rules = Vec::new();
    for i in 0..n {
        let id = format!("syn{i:05}");
        let gold_idx = pick_gold(spec, &mut rng);
        let mut words = filler(&mut rng, 8);
        for &g in &gold_idx {
            if rng.gen_bool(spec.text_signal) {
                words.push(cue_word(g));
            }
        }
        words.shuffle(&mut rng);
        let text = format!("meme {id} {}", words.join(" "));
        let gold: LabelSet = gold_idx.iter().map(|&g| spec.label_pool[g].clone()).collect();

        let mut captions = BTreeMap::new();
        if with_captions {
            let caption = format!("raw caption {id} {}", filler(&mut rng, 4).join(" "));
            let cleaned = if invalid[i] {
                "INVALID DESCRIPTION".to_string()
            } else {
                format!("A photo showing {}.", filler(&mut rng, 4).join(" "))
            };
            rules.push(rule(TemplateId::CleanCaption, "caption", &caption, vec![cleaned]));
            captions.insert("blip".to_string(), caption);
        }

        let template = match spec.strategy {
            Strategy::Explanation => TemplateId::Explain,
            Strategy::Triggers => TemplateId::ExplainTriggers,
        };
        let responses: Vec<String> = (0..spec.runs.max(1))
            .map(|_| {
                if refused[i] {
                    return REFUSAL_TEXT.to_string();
                }
                let cues: Vec<String> = gold_idx
                    .iter()
                    .filter(|_| rng.gen_bool(spec.explanation_signal))
                    .map(|&g| cue_word(g))
                    .collect();
                let mut body = filler(&mut rng, 5);
                body.extend(cues.iter().cloned());
                body.shuffle(&mut rng);
                let sentence = format!("The meme conveys {}.", body.join(" "));
                match spec.strategy {
                    Strategy::Explanation => sentence,
                    Strategy::Triggers if cues.is_empty() => format!("{sentence}\nTRIGGERS: none"),
                    Strategy::Triggers => format!("{sentence}\nTriggers: {}", cues.join(", ")),
                }
            })
            .collect();
        rules.push(rule(template, "text", &text, responses));

        if spec.dataset == DatasetId::SemevalMemes {
            let names: Vec<String> = gold.names();
            let mut json = serde_json::json!({ "labels": names }).to_string();
            if i % 7 == 3 {
                json = format!("```json\n{json}\n```");
            }
            if i % 11 == 5 {
                let extended = [names.clone(), vec!["Sarcasm".to_string()]].concat();
                json = serde_json::json!({ "labels": extended }).to_string();
            }
            rules.push(rule(TemplateId::ZeroShotClassify, "text", &text, vec![json]));
        }

        samples.push(Sample {
            id,
            dataset: spec.dataset,
            split: if test[i] { Split::Test } else { Split::Train },
            text,
            captions,
            image_ref: None,
            gold,
            human_explanation: None,
        });
    }
    SyntheticBundle { samples, scenario: Scenario { strict: true, default: None, rules } }
}
