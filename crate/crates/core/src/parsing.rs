//! Rationale/answer extraction from tagged model output and answer normalization.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::inference::{Condition, RawResponse};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionPath {
    Tags,
    FallbackLastLine,
    FallbackWhole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub rationale: String,
    pub answer_text: String,
    pub extraction_path: ExtractionPath,
}

/// Byte ranges of the contents of every complete `open ... close` pair.
fn tag_pairs(text: &str, open: &str, close: &str) -> Vec<(usize, usize, usize)> {
    let mut pairs = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(open) {
        let start = from + rel;
        let content = start + open.len();
        match text[content..].find(close) {
            Some(rel_end) => {
                let end = content + rel_end;
                pairs.push((start, content, end));
                from = end + close.len();
            }
            None => break,
        }
    }
    pairs
}

fn last_nonempty_line(text: &str) -> Option<(usize, &str)> {
    let mut offset = 0;
    let mut last = None;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            last = Some((offset, line));
        }
        offset += line.len();
    }
    last
}

fn strip_tags(text: &str) -> String {
    [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
        .iter()
        .fold(text.to_string(), |acc, tag| acc.replace(tag, " "))
        .trim()
        .to_string()
}

/// Splits model output into rationale and answer.
///
/// With tags: the first `<think>` pair is the rationale, the last
/// `<answer>` pair is the answer. With only an answer pair, the text before
/// it is the rationale. Without an answer pair, the last non-empty line is
/// taken as the answer. Never fails.
pub fn extract_tagged(text: &str) -> ParsedOutput {
    if text.trim().is_empty() {
        return ParsedOutput {
            rationale: String::new(),
            answer_text: String::new(),
            extraction_path: ExtractionPath::FallbackWhole,
        };
    }
    let thinks = tag_pairs(text, THINK_OPEN, THINK_CLOSE);
    let answers = tag_pairs(text, ANSWER_OPEN, ANSWER_CLOSE);

    if let Some(&(open_at, content, end)) = answers.last() {
        let answer = text[content..end].trim().to_string();
        let rationale = match thinks.first() {
            Some(&(_, t_content, t_end)) => text[t_content..t_end].trim().to_string(),
            None => strip_tags(&text[..open_at]),
        };
        if answer.is_empty() {
            return ParsedOutput {
                rationale,
                answer_text: String::new(),
                extraction_path: ExtractionPath::FallbackWhole,
            };
        }
        return ParsedOutput {
            rationale,
            answer_text: answer,
            extraction_path: ExtractionPath::Tags,
        };
    }

    // No answer pair: rationale from the think pair if any, answer from the
    // last line of whatever remains.
    let (rationale_prefix, rest) = match thinks.first() {
        Some(&(_, t_content, t_end)) => (
            Some(text[t_content..t_end].trim().to_string()),
            &text[t_end + THINK_CLOSE.len()..],
        ),
        None => (None, text),
    };
    let source = if rest.trim().is_empty() { text } else { rest };
    let cleaned = strip_tags(source);
    match last_nonempty_line(&cleaned) {
        Some((offset, line)) => {
            let remainder = cleaned[..offset].trim().to_string();
            let rationale = match rationale_prefix {
                Some(r) if remainder.is_empty() || std::ptr::eq(source, text) => r,
                Some(r) => format!("{r}\n{remainder}"),
                None => remainder,
            };
            ParsedOutput {
                rationale,
                answer_text: line.trim().to_string(),
                extraction_path: ExtractionPath::FallbackLastLine,
            }
        }
        None => ParsedOutput {
            rationale: rationale_prefix.unwrap_or_default(),
            answer_text: String::new(),
            extraction_path: ExtractionPath::FallbackWhole,
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NormalizationError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("normalization config: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Versioned normalization policy, shipped as `assets/normalization.v1.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub version: String,
    #[serde(default)]
    pub answer_prefixes: Vec<String>,
    #[serde(default)]
    pub leading_yes_no: bool,
    /// Canonical target ("yes"/"no") → surface forms.
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
}

const DEFAULT_NORMALIZATION: &str = include_str!("../assets/normalization.v1.toml");

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_NORMALIZATION).expect("shipped normalization config parses")
    }
}

impl NormalizationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, NormalizationError> {
        let mut cfg: NormalizationConfig = toml::from_str(text)?;
        for prefix in &mut cfg.answer_prefixes {
            *prefix = prefix.to_lowercase();
        }
        cfg.answer_prefixes.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        for forms in cfg.synonyms.values_mut() {
            for form in forms.iter_mut() {
                *form = canonical_text(form);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, NormalizationError> {
        let text = std::fs::read_to_string(path).map_err(|source| NormalizationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    fn synonym_target(&self, canonical: &str) -> Option<&str> {
        self.synonyms
            .iter()
            .find(|(_, forms)| forms.iter().any(|f| f == canonical))
            .map(|(target, _)| target.as_str())
    }

    /// Removes configured lead-ins ("The answer is", "Option") until none apply.
    fn strip_prefixes<'a>(&self, mut text: &'a str) -> &'a str {
        'outer: loop {
            text = text.trim_start();
            for prefix in &self.answer_prefixes {
                if text.len() >= prefix.len()
                    && text.is_char_boundary(prefix.len())
                    && text[..prefix.len()].eq_ignore_ascii_case(prefix)
                {
                    let rest = &text[prefix.len()..];
                    if rest.chars().next().is_none_or(|c| !c.is_alphanumeric()) {
                        text = rest.trim_start_matches(|c: char| c == ':' || c.is_whitespace());
                        continue 'outer;
                    }
                }
            }
            return text;
        }
    }
}

static DEFAULT_CONFIG: LazyLock<NormalizationConfig> = LazyLock::new(NormalizationConfig::default);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub canonical: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_letter: Option<char>,
}

/// Lowercases, replaces punctuation with spaces and collapses whitespace.
///
/// Hyphens between alphanumerics and decimal points between digits survive.
pub fn canonical_text(text: &str) -> String {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut out = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        let keep = if c.is_alphanumeric() {
            true
        } else if c == '-' {
            prev.is_some_and(char::is_alphanumeric) && next.is_some_and(char::is_alphanumeric)
        } else if c == '.' {
            prev.is_some_and(|p| p.is_ascii_digit()) && next.is_some_and(|n| n.is_ascii_digit())
        } else {
            false
        };
        out.push(if keep { c } else { ' ' });
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a lone option letter such as `B`, `B.`, `(B)`, `B)` or `B: text`.
fn leading_option_letter(text: &str, option_count: usize) -> Option<char> {
    let text = text.trim();
    // A lone letter is judged on canonical text so that "B!" and its
    // canonical form "b" agree.
    let canon = canonical_text(text);
    let mut canon_chars = canon.chars();
    let letter = match (canon_chars.next(), canon_chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => c,
        _ => {
            let mut chars = text.chars();
            let mut first = chars.next()?;
            let parenthesized = first == '(';
            if parenthesized {
                first = chars.next()?;
            }
            let rest = chars.as_str();
            let delimited = if parenthesized {
                rest.starts_with(')')
            } else {
                rest.starts_with(['.', ')', ':', ','])
            };
            if !(first.is_ascii_alphabetic() && delimited) {
                return None;
            }
            first
        }
    };
    let upper = letter.to_ascii_uppercase();
    let index = (upper as u8 - b'A') as usize;
    (index < option_count).then_some(upper)
}

fn leading_yes_no<'a>(config: &'a NormalizationConfig, raw: &str) -> Option<&'a str> {
    let lower = raw.trim().to_lowercase();
    let word_end = lower
        .find(|c: char| !c.is_alphabetic())
        .unwrap_or(lower.len());
    let (word, rest) = lower.split_at(word_end);
    if word.is_empty() || !rest.starts_with([',', '.', ';', ':', '!']) {
        return None;
    }
    if rest[1..].trim().is_empty() {
        return None;
    }
    config
        .synonym_target(word)
        .filter(|target| *target == "yes" || *target == "no")
}

/// Stateless normalizer bound to one [`NormalizationConfig`].
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    pub config: NormalizationConfig,
}

impl Normalizer {
    pub fn new(config: NormalizationConfig) -> Self {
        Normalizer { config }
    }

    pub fn version(&self) -> &str {
        &self.config.version
    }

    pub fn normalize(&self, answer_text: &str, options: Option<&[String]>) -> NormalizedAnswer {
        let cfg = &self.config;
        let stripped = cfg.strip_prefixes(answer_text.trim());
        let mut canonical = canonical_text(stripped);
        if let Some(target) = cfg.synonym_target(&canonical) {
            canonical = target.to_string();
        } else if cfg.leading_yes_no {
            if let Some(target) = leading_yes_no(cfg, stripped) {
                canonical = target.to_string();
            }
        }

        let mut option_letter = None;
        if let Some(options) = options.filter(|o| !o.is_empty()) {
            let option_canon: Vec<String> = options.iter().map(|o| canonical_text(o)).collect();
            let by_text = option_canon
                .iter()
                .position(|o| !o.is_empty() && *o == canonical);
            let index = by_text.or_else(|| {
                leading_option_letter(stripped, options.len()).map(|l| (l as u8 - b'A') as usize)
            });
            if let Some(idx) = index {
                option_letter = Some((b'A' + idx as u8) as char);
                canonical = option_canon[idx].clone();
                if let Some(target) = cfg.synonym_target(&canonical) {
                    canonical = target.to_string();
                }
            }
        }
        NormalizedAnswer {
            canonical,
            option_letter,
        }
    }

    /// Normalizes `gold` through the same pipeline and compares.
    pub fn is_correct(&self, pred: &NormalizedAnswer, gold: &str, options: Option<&[String]>) -> bool {
        answers_equal(pred, &self.normalize(gold, options))
    }
}

/// Normalizes with the shipped default policy.
pub fn normalize_answer(answer_text: &str, options: Option<&[String]>) -> NormalizedAnswer {
    Normalizer::new(DEFAULT_CONFIG.clone()).normalize(answer_text, options)
}

pub fn is_correct(pred: &NormalizedAnswer, gold: &str, options: Option<&[String]>) -> bool {
    answers_equal(pred, &normalize_answer(gold, options))
}

/// Option letters decide when both sides carry one; otherwise canonical text.
pub fn answers_equal(a: &NormalizedAnswer, b: &NormalizedAnswer) -> bool {
    match (a.option_letter, b.option_letter) {
        (Some(x), Some(y)) => x == y,
        _ => a.canonical == b.canonical,
    }
}

/// One parsed model output for one (item, condition).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub item_id: String,
    pub model_id: String,
    pub condition: Condition,
    pub raw_text: String,
    pub rationale: String,
    pub answer_text: String,
    pub extraction_path: ExtractionPath,
    pub answer: NormalizedAnswer,
    /// Carried over from a failed request; never equal to a real answer.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
    pub normalization_version: String,
}

/// Parses and normalizes one response against its item's answer options.
pub fn parse_response(
    raw: &RawResponse,
    options: Option<&[String]>,
    normalizer: &Normalizer,
) -> ResponseRecord {
    let (parsed, answer) = if raw.failed {
        (
            ParsedOutput {
                rationale: String::new(),
                answer_text: String::new(),
                extraction_path: ExtractionPath::FallbackWhole,
            },
            NormalizedAnswer {
                canonical: String::new(),
                option_letter: None,
            },
        )
    } else {
        let parsed = extract_tagged(&raw.text);
        let answer = normalizer.normalize(&parsed.answer_text, options);
        (parsed, answer)
    };
    ResponseRecord {
        item_id: raw.item_id.clone(),
        model_id: raw.model_id.clone(),
        condition: raw.condition,
        raw_text: raw.text.clone(),
        rationale: parsed.rationale,
        answer_text: parsed.answer_text,
        extraction_path: parsed.extraction_path,
        answer,
        failed: raw.failed,
        normalization_version: normalizer.version().to_string(),
    }
}
