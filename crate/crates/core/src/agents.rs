//! Scripted responders whose grounding behavior is known in closed form.
//!
//! Each agent is a pure function of (spec, item, condition). Running the
//! pipeline on them must reproduce [`expected_metrics`], which makes them the
//! end-to-end oracle for the metric definitions.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::claims::tokenize;
use crate::corpus::EvaluationItem;
use crate::inference::Condition;
use crate::io::{self, hash64, IoError};
use crate::parsing::normalize_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    /// Answer depends only on the question; rationale has no visual terms.
    TextShortcut,
    /// Gold on the real image, a fixed wrong answer otherwise.
    FullyGrounded,
    /// Uniform over the answer choices, independently per condition.
    Random,
    /// Question-only answer wrapped in a detailed visual rationale.
    HallucinatingShortcut,
    /// Text-shortcut answers emitted without tags.
    Malformed,
    /// Per item: text-shortcut with probability `mixture_weight`, else
    /// fully-grounded.
    Mixture,
}

impl AgentKind {
    pub const ALL: [AgentKind; 6] = [
        AgentKind::TextShortcut,
        AgentKind::FullyGrounded,
        AgentKind::Random,
        AgentKind::HallucinatingShortcut,
        AgentKind::Malformed,
        AgentKind::Mixture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::TextShortcut => "text-shortcut",
            AgentKind::FullyGrounded => "fully-grounded",
            AgentKind::Random => "random",
            AgentKind::HallucinatingShortcut => "hallucinating-shortcut",
            AgentKind::Malformed => "malformed",
            AgentKind::Mixture => "mixture",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = AgentKind::ALL.iter().map(|k| k.as_str()).collect();
                format!("unknown agent \"{s}\" (expected one of {})", known.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    /// Probability that a question-only answer is the gold answer.
    #[serde(default = "default_accuracy")]
    pub accuracy_knob: f64,
    #[serde(default)]
    pub seed: u64,
    /// Share of text-shortcut items in a mixture.
    #[serde(default = "default_weight")]
    pub mixture_weight: f64,
}

fn default_accuracy() -> f64 {
    0.5
}

fn default_weight() -> f64 {
    0.5
}

impl AgentSpec {
    pub fn new(kind: AgentKind) -> Self {
        AgentSpec {
            kind,
            accuracy_knob: default_accuracy(),
            seed: 0,
            mixture_weight: default_weight(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_accuracy(mut self, accuracy: f64) -> Self {
        self.accuracy_knob = accuracy;
        self
    }

    pub fn with_mixture_weight(mut self, weight: f64) -> Self {
        self.mixture_weight = weight;
        self
    }
}

const NEUTRAL_RATIONALE: &str =
    "Answering from the wording of the question and the typical case mix for this kind of study.";
const UNSUPPORTED_RATIONALE: &str = "The image content does not support the expected finding.";

/// Visual terms used in grounded and hallucinated rationales. Only terms
/// absent from the question are used, so every emitted term is novel.
const VISUAL_TERMS: [&str; 10] = [
    "spiculated",
    "hyperdense",
    "lobulated",
    "calcified",
    "heterogeneous",
    "hypoechoic",
    "irregular",
    "circumscribed",
    "nodular",
    "fibrotic",
];

fn unit(key: &str) -> f64 {
    (hash64(key.as_bytes()) >> 11) as f64 / (1u64 << 53) as f64
}

/// Answer strings an agent may emit, and the index of the gold one.
pub fn answer_choices(item: &EvaluationItem) -> (Vec<String>, usize) {
    let base = &item.base;
    if let Some(options) = base.answer_options.as_deref().filter(|o| !o.is_empty()) {
        let letters: Vec<String> = ('A'..='Z').take(options.len()).map(String::from).collect();
        let gold = normalize_answer(&base.gold_answer, Some(options));
        let index = gold
            .option_letter
            .map(|l| (l as u8 - b'A') as usize)
            .unwrap_or(0);
        return (letters, index);
    }
    let gold = normalize_answer(&base.gold_answer, None).canonical;
    if gold == "yes" || gold == "no" {
        let choices = vec!["yes".to_string(), "no".to_string()];
        let index = usize::from(gold == "no");
        return (choices, index);
    }
    let mut choices = vec![base.gold_answer.clone()];
    for filler in ["none", "other", "unclear", "indeterminate", "unknown"] {
        if choices.len() == 4 {
            break;
        }
        if normalize_answer(filler, None).canonical != gold {
            choices.push(filler.to_string());
        }
    }
    (choices, 0)
}

fn wrong_answer(choices: &[String], gold: usize) -> &str {
    &choices[(gold + 1) % choices.len()]
}

fn shortcut_answer(spec: &AgentSpec, item: &EvaluationItem) -> String {
    let (choices, gold) = answer_choices(item);
    let u = unit(&format!("shortcut:{}:{}", spec.seed, item.base.question));
    if u < spec.accuracy_knob {
        choices[gold].clone()
    } else {
        wrong_answer(&choices, gold).to_string()
    }
}

fn visual_rationale(question: &str) -> String {
    let question_words: Vec<String> = tokenize(question).into_iter().map(|t| t.text).collect();
    let terms: Vec<&str> = VISUAL_TERMS
        .into_iter()
        .filter(|t| !question_words.iter().any(|w| w == t))
        .take(3)
        .collect();
    format!(
        "A {} lesion is visible with {} margins and a {} pattern.",
        terms.first().copied().unwrap_or("spiculated"),
        terms.get(1).copied().unwrap_or("irregular"),
        terms.get(2).copied().unwrap_or("nodular"),
    )
}

fn tagged(rationale: &str, answer: &str) -> String {
    format!("<think>{rationale}</think> <answer>{answer}</answer>")
}

fn is_shortcut_item(spec: &AgentSpec, item: &EvaluationItem) -> bool {
    unit(&format!("mixture:{}:{}", spec.seed, item.item_id())) < spec.mixture_weight
}

/// Response text of `spec` for one item under one condition.
pub fn generate(spec: &AgentSpec, item: &EvaluationItem, condition: Condition) -> String {
    match spec.kind {
        AgentKind::TextShortcut => tagged(NEUTRAL_RATIONALE, &shortcut_answer(spec, item)),
        AgentKind::Malformed => format!("{NEUTRAL_RATIONALE}\n{}", shortcut_answer(spec, item)),
        AgentKind::HallucinatingShortcut => tagged(
            &visual_rationale(&item.base.question),
            &shortcut_answer(spec, item),
        ),
        AgentKind::FullyGrounded => {
            let (choices, gold) = answer_choices(item);
            match condition {
                Condition::Real => tagged(&visual_rationale(&item.base.question), &choices[gold]),
                _ => tagged(UNSUPPORTED_RATIONALE, wrong_answer(&choices, gold)),
            }
        }
        AgentKind::Random => {
            let (choices, _) = answer_choices(item);
            let key = format!("random:{}:{}:{}", spec.seed, item.item_id(), condition);
            let pick = (hash64(key.as_bytes()) % choices.len() as u64) as usize;
            tagged(NEUTRAL_RATIONALE, &choices[pick])
        }
        AgentKind::Mixture => {
            let inner = if is_shortcut_item(spec, item) {
                AgentKind::TextShortcut
            } else {
                AgentKind::FullyGrounded
            };
            generate(&AgentSpec { kind: inner, ..spec.clone() }, item, condition)
        }
    }
}

/// Expected metric values for an agent. Fields marked exact in the agent
/// table hold for every sample; the rest are expectations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectedMetrics {
    pub acc_real: f64,
    pub acc_blank: f64,
    pub acc_shuffle: f64,
    pub vrs: f64,
    pub bd: f64,
    pub is_rate: f64,
    pub vbr: f64,
    pub vhr: f64,
    pub nvcr: f64,
    pub hvrr: f64,
    pub cond_prob: Option<f64>,
    /// True when every value above holds exactly on any sample.
    pub exact: bool,
}

/// Closed-form metrics for `spec` on items with `choices` answer choices.
///
/// Accuracy of question-only answers equals `accuracy_knob` in expectation.
pub fn expected_metrics(spec: &AgentSpec, choices: usize) -> ExpectedMetrics {
    let a = spec.accuracy_knob;
    let shortcut = |nvc: f64| ExpectedMetrics {
        acc_real: a,
        acc_blank: a,
        acc_shuffle: a,
        vrs: 0.0,
        bd: 0.0,
        is_rate: 0.0,
        vbr: 0.0,
        vhr: 0.0,
        nvcr: nvc,
        hvrr: nvc,
        cond_prob: (nvc > 0.0).then_some(1.0),
        exact: false,
    };
    match spec.kind {
        AgentKind::TextShortcut | AgentKind::Malformed => shortcut(0.0),
        AgentKind::HallucinatingShortcut => shortcut(1.0),
        AgentKind::FullyGrounded => ExpectedMetrics {
            acc_real: 1.0,
            acc_blank: 0.0,
            acc_shuffle: 0.0,
            vrs: 1.0,
            bd: 1.0,
            is_rate: 1.0,
            vbr: 1.0,
            vhr: 0.0,
            nvcr: 1.0,
            hvrr: 0.0,
            cond_prob: Some(0.0),
            exact: true,
        },
        AgentKind::Random => {
            let p = 1.0 / choices as f64;
            ExpectedMetrics {
                acc_real: p,
                acc_blank: p,
                acc_shuffle: p,
                vrs: 0.0,
                bd: 0.0,
                is_rate: 1.0 - p,
                vbr: p * (1.0 - p),
                vhr: p * (1.0 - p),
                nvcr: 0.0,
                hvrr: 0.0,
                cond_prob: None,
                exact: false,
            }
        }
        AgentKind::Mixture => {
            let w = spec.mixture_weight;
            let g = 1.0 - w;
            ExpectedMetrics {
                acc_real: w * a + g,
                acc_blank: w * a,
                acc_shuffle: w * a,
                vrs: g,
                bd: g,
                is_rate: g,
                vbr: g,
                vhr: 0.0,
                nvcr: g,
                hvrr: 0.0,
                cond_prob: (g > 0.0).then_some(0.0),
                exact: false,
            }
        }
    }
}

/// Writes `n` synthetic multiple-choice and yes/no items plus small PNG
/// images into `dir`, returning the benchmark JSONL path.
///
/// Every item gets its own image color so shuffled donors are real,
/// distinct files.
pub fn write_synthetic_benchmark(
    dir: &Path,
    benchmark_id: &str,
    n: usize,
    seed: u64,
) -> Result<PathBuf, IoError> {
    let image_dir = dir.join(format!("{benchmark_id}_images"));
    std::fs::create_dir_all(&image_dir).map_err(|e| IoError::fs(&image_dir, e))?;
    let organs = ["Liver", "Spleen", "Kidney", "Heart"];
    let modalities = ["ct", "mri", "xray"];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let h = hash64(format!("{benchmark_id}:{seed}:{i}").as_bytes());
        let side = 8u32;
        let color = [(h & 0xff) as u8, ((h >> 8) & 0xff) as u8, ((h >> 16) & 0xff) as u8];
        let image = image::RgbImage::from_pixel(side, side, image::Rgb(color));
        let file = format!("{i:04}.png");
        let path = image_dir.join(&file);
        image
            .save(&path)
            .map_err(|e| IoError::fs(&path, std::io::Error::other(e.to_string())))?;
        let relative = format!("{benchmark_id}_images/{file}");
        let row = if i % 2 == 0 {
            serde_json::json!({
                "example_id": format!("s{i:04}"),
                "question": format!("Case {i}: which organ is the focus of this study?"),
                "image_path": relative,
                "gold_answer": organs[(h >> 24) as usize % organs.len()],
                "options": organs,
                "modality": modalities[i % modalities.len()],
            })
        } else {
            serde_json::json!({
                "example_id": format!("s{i:04}"),
                "question": format!("Case {i}: is this study consistent with the reported diagnosis?"),
                "image_path": relative,
                "gold_answer": if (h >> 24) & 1 == 0 { "yes" } else { "no" },
                "modality": modalities[i % modalities.len()],
            })
        };
        rows.push(row);
    }
    let path = dir.join(format!("{benchmark_id}.jsonl"));
    io::write_jsonl(&path, &rows)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{nvc_indicator, VisualLexicon};
    use crate::corpus::{make_blank_image, BenchmarkExample, ImageRef};
    use crate::parsing::{answers_equal, extract_tagged, ExtractionPath};

    fn item(i: usize, options: bool) -> EvaluationItem {
        let base = BenchmarkExample {
            example_id: format!("e{i}"),
            question: format!("Case {i}: which organ is the focus of this study?"),
            image: ImageRef::file(format!("/tmp/{i}.png")),
            gold_answer: if options { "Kidney".into() } else { "yes".into() },
            answer_options: options.then(|| vec!["Liver".into(), "Spleen".into(), "Kidney".into(), "Heart".into()]),
            modality: None,
            benchmark_id: "b".into(),
        };
        EvaluationItem {
            real_image: base.image.clone(),
            blank_image: make_blank_image(),
            shuffle_image: ImageRef::file("/tmp/other.png"),
            shuffle_source_id: "e999".into(),
            sample_seed: 0,
            base,
        }
    }

    fn answer(spec: &AgentSpec, it: &EvaluationItem, c: Condition) -> crate::parsing::NormalizedAnswer {
        let parsed = extract_tagged(&generate(spec, it, c));
        normalize_answer(&parsed.answer_text, it.base.answer_options.as_deref())
    }

    #[test]
    fn choices_locate_gold() {
        let (choices, gold) = answer_choices(&item(0, true));
        assert_eq!(choices, ["A", "B", "C", "D"]);
        assert_eq!(gold, 2);
        let (choices, gold) = answer_choices(&item(0, false));
        assert_eq!((choices[gold].as_str(), choices.len()), ("yes", 2));
    }

    #[test]
    fn text_shortcut_ignores_condition() {
        let spec = AgentSpec::new(AgentKind::TextShortcut).with_seed(3);
        for i in 0..20 {
            let it = item(i, i % 2 == 0);
            let real = generate(&spec, &it, Condition::Real);
            assert_eq!(real, generate(&spec, &it, Condition::Blank));
            assert_eq!(real, generate(&spec, &it, Condition::Shuffle));
            let nvc = nvc_indicator(&extract_tagged(&real).rationale, &it.base.question, &VisualLexicon::shipped());
            assert_eq!(nvc.nvc, 0, "{real}");
        }
    }

    #[test]
    fn fully_grounded_changes_under_shuffle() {
        let spec = AgentSpec::new(AgentKind::FullyGrounded);
        for i in 0..10 {
            let it = item(i, i % 2 == 0);
            let real = answer(&spec, &it, Condition::Real);
            let shuffle = answer(&spec, &it, Condition::Shuffle);
            assert!(crate::parsing::is_correct(&real, &it.base.gold_answer, it.base.answer_options.as_deref()));
            assert!(!answers_equal(&real, &shuffle));
        }
    }

    #[test]
    fn hallucinating_rationale_is_novel() {
        let spec = AgentSpec::new(AgentKind::HallucinatingShortcut);
        let it = item(1, true);
        let parsed = extract_tagged(&generate(&spec, &it, Condition::Real));
        assert_eq!(parsed.extraction_path, ExtractionPath::Tags);
        let nvc = nvc_indicator(&parsed.rationale, &it.base.question, &VisualLexicon::shipped());
        assert_eq!(nvc.nvc, 1);
    }

    #[test]
    fn visual_terms_avoid_the_question() {
        let text = visual_rationale("Is the lesion spiculated or lobulated?");
        assert!(!text.contains("spiculated") && !text.contains("lobulated"));
    }

    #[test]
    fn malformed_output_falls_back() {
        let spec = AgentSpec::new(AgentKind::Malformed);
        let parsed = extract_tagged(&generate(&spec, &item(0, true), Condition::Real));
        assert_eq!(parsed.extraction_path, ExtractionPath::FallbackLastLine);
        assert_eq!(parsed.rationale, NEUTRAL_RATIONALE);
    }

    #[test]
    fn random_agent_changes_about_three_quarters_of_answers() {
        // Monte Carlo oracle for IS -> 1 - 1/k with k = 4.
        let spec = AgentSpec::new(AgentKind::Random).with_seed(11);
        let n = 10_000;
        let mut changed = 0;
        for i in 0..n {
            let it = item(i, true);
            if !answers_equal(&answer(&spec, &it, Condition::Real), &answer(&spec, &it, Condition::Shuffle)) {
                changed += 1;
            }
        }
        let is_rate = changed as f64 / n as f64;
        assert!((0.74..=0.76).contains(&is_rate), "{is_rate}");
        assert_eq!(expected_metrics(&spec, 4).is_rate, 0.75);
    }

    #[test]
    fn parse_agent_names() {
        for kind in AgentKind::ALL {
            assert_eq!(kind.as_str().parse::<AgentKind>().unwrap(), kind);
        }
        assert!("lucky".parse::<AgentKind>().is_err());
    }

    #[test]
    fn synthetic_benchmark_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic_benchmark(dir.path(), "synth", 12, 1).unwrap();
        let examples = crate::corpus::load_benchmark(&path, crate::corpus::BenchmarkFormat::Jsonl).unwrap();
        assert_eq!(examples.len(), 12);
        assert!(examples.iter().all(|e| e.benchmark_id == "synth"));
    }
}
