//! Novel visual claim (NVC) detection.
//!
//! A rationale sentence is a visual claim when it contains a term from the
//! visual-observation lexicon. A matched term only counts as *novel* when it
//! does not merely echo the question: terms that are themselves a word of the
//! question, or that sit inside a longer word sequence shared with the
//! question (up to five words), are disqualified.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::inference::Condition;
use crate::parsing::ResponseRecord;

/// Categories every lexicon must define.
pub const REQUIRED_CATEGORIES: [&str; 4] = ["presence", "location", "appearance", "severity"];

/// Terms that must be present in each required category.
pub const SEED_TERMS: [(&str, [&str; 2]); 4] = [
    ("presence", ["shows", "visible"]),
    ("location", ["left", "upper"]),
    ("appearance", ["irregular", "spiculated"]),
    ("severity", ["mild", "extensive"]),
];

/// Longest shared word sequence considered when filtering question echoes.
pub const DEFAULT_MAX_NGRAM: usize = 5;

const DEFAULT_LEXICON: &str = include_str!("../assets/lexicon.v1.toml");

#[derive(Debug, thiserror::Error)]
pub enum ClaimsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("lexicon is missing category \"{0}\"")]
    MissingCategory(&'static str),
    #[error("lexicon category \"{0}\" must be an array of strings")]
    BadCategory(String),
    #[error("lexicon category \"{category}\" lacks required term \"{term}\"")]
    MissingSeedTerm {
        category: &'static str,
        term: &'static str,
    },
}

/// Word token with its char (code point) offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercased word tokens. Hyphens and apostrophes between alphanumerics
/// stay inside a word; everything else separates words.
pub fn tokenize(text: &str) -> Vec<Token> {
    tokenize_from(text, 0)
}

fn tokenize_from(text: &str, char_offset: usize) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() {
            let c = chars[i];
            let joiner = (c == '-' || c == '\'' || c == '’')
                && i > start
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() || joiner {
                i += 1;
            } else {
                break;
            }
        }
        tokens.push(Token {
            text: chars[start..i].iter().flat_map(|c| c.to_lowercase()).collect(),
            start: char_offset + start,
            end: char_offset + i,
        });
    }
    tokens
}

/// Sentence char ranges: split after `.`, `!`, `?` and at newlines, trimmed.
/// A period between two digits is not a boundary.
pub fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut ranges = Vec::new();
    let mut start = 0;
    let push = |ranges: &mut Vec<(usize, usize)>, s: usize, e: usize| {
        let mut s = s;
        let mut e = e;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            ranges.push((s, e));
        }
    };
    for i in 0..chars.len() {
        let c = chars[i];
        let boundary = match c {
            '!' | '?' | '\n' => true,
            '.' => !(i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())),
            _ => false,
        };
        if boundary {
            let end = if c == '\n' { i } else { i + 1 };
            push(&mut ranges, start, end);
            start = i + 1;
        }
    }
    push(&mut ranges, start, chars.len());
    ranges
}

#[derive(Debug, Clone)]
struct LexEntry {
    words: Vec<String>,
    term: String,
    category: String,
}

/// Category → terms, plus a first-word index for matching.
#[derive(Debug, Clone)]
pub struct VisualLexicon {
    pub version: String,
    pub categories: BTreeMap<String, Vec<String>>,
    index: HashMap<String, Vec<LexEntry>>,
}

impl VisualLexicon {
    /// The lexicon shipped in `assets/lexicon.v1.toml`.
    pub fn shipped() -> Self {
        Self::from_toml_str(DEFAULT_LEXICON, "lex.v1").expect("shipped lexicon is valid")
    }

    /// Parses a lexicon file body. `fallback_version` is used when the file
    /// has no `version` key.
    pub fn from_toml_str(text: &str, fallback_version: &str) -> Result<Self, ClaimsError> {
        let table: toml::Table = toml::from_str(text)?;
        let version = table
            .get("version")
            .and_then(|v| v.as_str())
            .unwrap_or(fallback_version)
            .to_string();
        let mut categories = BTreeMap::new();
        for (key, value) in &table {
            if key == "version" {
                continue;
            }
            let array = value
                .as_array()
                .ok_or_else(|| ClaimsError::BadCategory(key.clone()))?;
            let mut terms: Vec<String> = Vec::with_capacity(array.len());
            for item in array {
                let term = item
                    .as_str()
                    .ok_or_else(|| ClaimsError::BadCategory(key.clone()))?;
                let norm = tokenize(term)
                    .into_iter()
                    .map(|t| t.text)
                    .collect::<Vec<_>>()
                    .join(" ");
                if !norm.is_empty() && !terms.contains(&norm) {
                    terms.push(norm);
                }
            }
            categories.insert(key.to_lowercase(), terms);
        }
        Self::from_categories(version, categories)
    }

    pub fn from_categories(
        version: String,
        categories: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, ClaimsError> {
        for required in REQUIRED_CATEGORIES {
            if !categories.contains_key(required) {
                return Err(ClaimsError::MissingCategory(required));
            }
        }
        for (category, terms) in SEED_TERMS {
            for term in terms {
                if !categories[category].iter().any(|t| t == term) {
                    return Err(ClaimsError::MissingSeedTerm { category, term });
                }
            }
        }
        let mut index: HashMap<String, Vec<LexEntry>> = HashMap::new();
        for (category, terms) in &categories {
            for term in terms {
                let words: Vec<String> = term.split(' ').map(str::to_string).collect();
                index.entry(words[0].clone()).or_default().push(LexEntry {
                    words,
                    term: term.clone(),
                    category: category.clone(),
                });
            }
        }
        let lexicon = VisualLexicon {
            version,
            categories,
            index,
        };
        for (term, cats) in lexicon.duplicate_terms() {
            log::warn!(
                "lexicon {}: term \"{term}\" appears in several categories: {}",
                lexicon.version,
                cats.join(", ")
            );
        }
        Ok(lexicon)
    }

    /// Terms listed under more than one category, with their categories.
    pub fn duplicate_terms(&self) -> Vec<(String, Vec<String>)> {
        let mut seen: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for (category, terms) in &self.categories {
            for term in terms {
                seen.entry(term).or_default().push(category.clone());
            }
        }
        seen.into_iter()
            .filter(|(_, cats)| cats.len() > 1)
            .map(|(t, cats)| (t.to_string(), cats))
            .collect()
    }

    pub fn contains(&self, category: &str, term: &str) -> bool {
        self.categories
            .get(category)
            .is_some_and(|terms| terms.iter().any(|t| t == term))
    }

    pub fn term_count(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }
}

pub fn load_lexicon(path: &Path) -> Result<VisualLexicon, ClaimsError> {
    let text = std::fs::read_to_string(path).map_err(|source| ClaimsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("lexicon");
    VisualLexicon::from_toml_str(&text, stem)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedTerm {
    pub term: String,
    pub category: String,
    /// Char range of the match within the rationale.
    pub char_range: (usize, usize),
    /// Word positions within the sentence, `[start, end)`.
    pub word_range: (usize, usize),
    /// False once the term is found to echo the question.
    pub qualified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimSpan {
    pub sentence_index: usize,
    /// Char (code point) range of the sentence within the rationale.
    pub char_range: (usize, usize),
    pub sentence: String,
    pub matched_terms: Vec<MatchedTerm>,
    pub novel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NvcResult {
    pub nvc: u8,
    pub spans: Vec<ClaimSpan>,
    pub lexicon_version: String,
}

impl NvcResult {
    pub fn is_claim(&self) -> bool {
        self.nvc == 1
    }

    pub fn novel_span_count(&self) -> usize {
        self.spans.iter().filter(|s| s.novel).count()
    }
}

/// Sentences of `rationale` that contain at least one lexicon term.
/// Returned spans have `novel = false`; see [`mark_novelty`].
pub fn detect_visual_spans(rationale: &str, lexicon: &VisualLexicon) -> Vec<ClaimSpan> {
    let chars: Vec<char> = rationale.chars().collect();
    let mut spans = Vec::new();
    for (sentence_index, (start, end)) in sentence_ranges(rationale).into_iter().enumerate() {
        let sentence: String = chars[start..end].iter().collect();
        let tokens = tokenize_from(&sentence, start);
        let mut matched = Vec::new();
        for (pos, token) in tokens.iter().enumerate() {
            let Some(entries) = lexicon.index.get(&token.text) else {
                continue;
            };
            for entry in entries {
                let len = entry.words.len();
                if pos + len > tokens.len() {
                    continue;
                }
                if tokens[pos..pos + len]
                    .iter()
                    .zip(&entry.words)
                    .all(|(t, w)| t.text == *w)
                {
                    matched.push(MatchedTerm {
                        term: entry.term.clone(),
                        category: entry.category.clone(),
                        char_range: (tokens[pos].start, tokens[pos + len - 1].end),
                        word_range: (pos, pos + len),
                        qualified: true,
                    });
                }
            }
        }
        if !matched.is_empty() {
            spans.push(ClaimSpan {
                sentence_index,
                char_range: (start, end),
                sentence,
                matched_terms: matched,
                novel: false,
            });
        }
    }
    spans
}

/// Word windows `(start, len)` of `sentence` with `1 <= len <= max_n` that
/// also occur contiguously in `question`.
pub fn shared_ngrams(sentence: &[String], question: &[String], max_n: usize) -> Vec<(usize, usize)> {
    let mut question_grams: HashSet<&[String]> = HashSet::new();
    for n in 1..=max_n.min(question.len()) {
        for window in question.windows(n) {
            question_grams.insert(window);
        }
    }
    let mut shared = Vec::new();
    for n in 1..=max_n.min(sentence.len()) {
        for (i, window) in sentence.windows(n).enumerate() {
            if question_grams.contains(window) {
                shared.push((i, n));
            }
        }
    }
    shared
}

/// Sets `novel` on each span: a matched term is disqualified when it is a
/// shared 1-gram or lies inside a shared n-gram of length 2..=`max_n`.
pub fn mark_novelty(mut spans: Vec<ClaimSpan>, question: &str, max_n: usize) -> Vec<ClaimSpan> {
    let question_words: Vec<String> = tokenize(question).into_iter().map(|t| t.text).collect();
    for span in &mut spans {
        let words: Vec<String> = tokenize(&span.sentence).into_iter().map(|t| t.text).collect();
        let shared = shared_ngrams(&words, &question_words, max_n);
        for term in &mut span.matched_terms {
            let (s, e) = term.word_range;
            let echoed = shared.iter().any(|&(i, n)| {
                if n == 1 {
                    e - s == 1 && i == s
                } else {
                    i <= s && e <= i + n
                }
            });
            term.qualified = !echoed;
        }
        span.novel = span.matched_terms.iter().any(|t| t.qualified);
    }
    spans
}

/// NVC indicator for one rationale: 1 iff some sentence makes a novel
/// visual claim.
pub fn nvc_indicator(rationale: &str, question: &str, lexicon: &VisualLexicon) -> NvcResult {
    let spans = mark_novelty(
        detect_visual_spans(rationale, lexicon),
        question,
        DEFAULT_MAX_NGRAM,
    );
    let nvc = u8::from(spans.iter().any(|s| s.novel));
    NvcResult {
        nvc,
        spans,
        lexicon_version: lexicon.version.clone(),
    }
}

/// NVC result for one (item, model, condition) rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NvcRecord {
    pub item_id: String,
    pub model_id: String,
    pub condition: Condition,
    #[serde(flatten)]
    pub result: NvcResult,
}

/// Tags one parsed response. Failed requests have no rationale and so
/// never carry a claim.
pub fn tag_response(record: &ResponseRecord, question: &str, lexicon: &VisualLexicon) -> NvcRecord {
    let result = if record.failed {
        NvcResult {
            nvc: 0,
            spans: Vec::new(),
            lexicon_version: lexicon.version.clone(),
        }
    } else {
        nvc_indicator(&record.rationale, question, lexicon)
    };
    NvcRecord {
        item_id: record.item_id.clone(),
        model_id: record.model_id.clone(),
        condition: record.condition,
        result,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> VisualLexicon {
        VisualLexicon::shipped()
    }

    fn words(text: &str) -> Vec<String> {
        tokenize(text).into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn shipped_lexicon_has_seed_terms() {
        let lexicon = lex();
        assert!(lexicon.contains("appearance", "spiculated"));
        assert!(lexicon.contains("presence", "visible"));
        assert_eq!(lexicon.version, "lex.v1");
        for category in REQUIRED_CATEGORIES {
            let n = lexicon.categories[category].len();
            assert!((40..=80).contains(&n), "{category} has {n} terms");
        }
        assert!(lexicon.duplicate_terms().is_empty());
    }

    #[test]
    fn missing_category_is_an_error() {
        let text = r#"
            presence = ["shows", "visible"]
            location = ["left", "upper"]
            appearance = ["irregular", "spiculated"]
        "#;
        assert!(matches!(
            VisualLexicon::from_toml_str(text, "t"),
            Err(ClaimsError::MissingCategory("severity"))
        ));
    }

    #[test]
    fn duplicates_across_categories_are_kept() {
        let text = r#"
            version = "dup"
            presence = ["shows", "visible", "Diffuse", "diffuse"]
            location = ["left", "upper"]
            appearance = ["irregular", "spiculated"]
            severity = ["mild", "extensive", "diffuse"]
        "#;
        let lexicon = VisualLexicon::from_toml_str(text, "t").unwrap();
        assert_eq!(lexicon.categories["presence"], ["shows", "visible", "diffuse"]);
        assert_eq!(
            lexicon.duplicate_terms(),
            vec![("diffuse".to_string(), vec!["presence".to_string(), "severity".to_string()])]
        );
        let spans = detect_visual_spans("Diffuse change.", &lexicon);
        assert_eq!(spans[0].matched_terms.len(), 2);
    }

    #[test]
    fn direct_lexicon_hit() {
        let spans = detect_visual_spans("The lesion is visible in the upper lobe.", &lex());
        assert_eq!(spans.len(), 1);
        let pairs: Vec<(&str, &str)> = spans[0]
            .matched_terms
            .iter()
            .map(|m| (m.term.as_str(), m.category.as_str()))
            .collect();
        assert!(pairs.contains(&("visible", "presence")));
        assert!(pairs.contains(&("upper", "location")));
        assert_eq!(spans[0].char_range, (0, 40));
    }

    #[test]
    fn no_terms_no_spans() {
        assert!(detect_visual_spans("We cannot answer without more data.", &lex()).is_empty());
        assert!(detect_visual_spans("The finding is invisible.", &lex()).is_empty());
    }

    #[test]
    fn multiword_terms_and_offsets() {
        let text = "Unclear.\nA nodule can be seen near the apex.";
        let spans = detect_visual_spans(text, &lex());
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].sentence_index, 1);
        let chars: Vec<char> = text.chars().collect();
        for m in &spans[0].matched_terms {
            let got: String = chars[m.char_range.0..m.char_range.1].iter().collect();
            assert_eq!(got.to_lowercase(), m.term);
        }
        assert!(spans[0].matched_terms.iter().any(|m| m.term == "can be seen"));
    }

    #[test]
    fn sentence_splitting() {
        let text = "Size is 2.5 cm. Next!  Third?\nFourth";
        let chars: Vec<char> = text.chars().collect();
        let got: Vec<String> = sentence_ranges(text)
            .into_iter()
            .map(|(s, e)| chars[s..e].iter().collect())
            .collect();
        assert_eq!(got, ["Size is 2.5 cm.", "Next!", "Third?", "Fourth"]);
    }

    #[test]
    fn question_echo_is_not_novel() {
        let spans = mark_novelty(
            detect_visual_spans("The liver is clearly visible.", &lex()),
            "Is the liver visible?",
            5,
        );
        assert_eq!(spans.len(), 1);
        assert!(!spans[0].novel);
    }

    #[test]
    fn new_information_is_novel() {
        let spans = mark_novelty(
            detect_visual_spans("A spiculated mass is visible.", &lex()),
            "Is the liver normal?",
            5,
        );
        assert!(spans[0].novel);
        assert!(spans[0].matched_terms.iter().all(|m| m.qualified));
    }

    /// Independent oracle: enumerate every sentence window of length <= 5 and
    /// scan every question window of the same length for a verbatim match.
    fn brute_shared(sentence: &[String], question: &[String], max_n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for n in 1..=max_n {
            for i in 0..sentence.len() {
                if i + n > sentence.len() {
                    break;
                }
                let mut found = false;
                for j in 0..question.len() {
                    if j + n > question.len() {
                        break;
                    }
                    if (0..n).all(|k| sentence[i + k] == question[j + k]) {
                        found = true;
                    }
                }
                if found {
                    out.push((i, n));
                }
            }
        }
        out
    }

    #[test]
    fn shared_five_gram_covers_location_terms() {
        let question = "Is there a mass in the left upper lobe?";
        let sentence = "There is a mass in the left upper lobe.";
        let (q, s) = (words(question), words(sentence));
        let oracle = brute_shared(&s, &q, 5);
        let mut got = shared_ngrams(&s, &q, 5);
        got.sort();
        let mut expected = oracle.clone();
        expected.sort();
        assert_eq!(got, expected);
        // "a mass in the left" .. "the left upper lobe" are shared 5/4-grams.
        let left = s.iter().position(|w| w == "left").unwrap();
        let upper = s.iter().position(|w| w == "upper").unwrap();
        assert!(oracle.iter().any(|&(i, n)| n == 5 && i <= left && upper < i + n));

        let spans = mark_novelty(detect_visual_spans(sentence, &lex()), question, 5);
        assert_eq!(spans.len(), 1);
        assert!(!spans[0].novel);
    }

    #[test]
    fn longer_shared_sequence_disqualifies_multiword_term() {
        let question = "Which structure can be seen clearly here?";
        let spans = mark_novelty(detect_visual_spans("The heart can be seen clearly.", &lex()), question, 5);
        assert_eq!(spans.len(), 1);
        assert!(!spans[0].novel);
        // Not contiguous in the question, so the term stays novel.
        let spans = mark_novelty(
            detect_visual_spans("The heart can be seen clearly.", &lex()),
            "Can the heart be seen?",
            5,
        );
        assert!(spans[0].novel);
    }

    #[test]
    fn indicator_examples() {
        let lexicon = lex();
        assert_eq!(nvc_indicator("", "Is the liver normal?", &lexicon).nvc, 0);
        let q = "Is there a mass visible in the upper left lung?";
        assert_eq!(nvc_indicator(q, q, &lexicon).nvc, 0);

        let rationale = "In this particular X-ray, the liver appears to be within its normal \
                         size and shape, with no obvious signs of enlargement or abnormal density.";
        let result = nvc_indicator(rationale, "Is the liver normal?", &lexicon);
        assert_eq!(result.nvc, 1);
        assert_eq!(result.lexicon_version, "lex.v1");
        let novel_terms: Vec<&str> = result.spans[0]
            .matched_terms
            .iter()
            .filter(|m| m.qualified)
            .map(|m| m.term.as_str())
            .collect();
        assert!(novel_terms.contains(&"size"));
        assert!(novel_terms.contains(&"enlargement"));
    }

    #[test]
    fn negated_observations_still_count() {
        let result = nvc_indicator("No mass is visible.", "What organ is this?", &lex());
        assert_eq!(result.nvc, 1);
    }

    proptest! {
        #[test]
        fn adding_terms_never_removes_a_claim(
            rationale in "[a-z ]{0,60}(visible|spiculated|left|mild)?[a-z .]{0,30}",
            question in "[a-z ]{0,40}",
            extra in prop::collection::vec("[a-z]{3,8}", 1..5),
        ) {
            let base = lex();
            let before = nvc_indicator(&rationale, &question, &base);
            let mut categories = base.categories.clone();
            categories.get_mut("appearance").unwrap().extend(extra);
            let bigger = VisualLexicon::from_categories("bigger".into(), categories).unwrap();
            let after = nvc_indicator(&rationale, &question, &bigger);
            prop_assert!(after.nvc >= before.nvc);
        }

        #[test]
        fn appending_question_never_adds_novel_spans(
            rationale in "[A-Za-z ,]{0,40}(visible|spiculated|left|mild|irregular)?[a-z .!?\n]{0,40}",
            question in "[A-Za-z ]{0,30}(visible|left|mass)?[a-z ]{0,10}\\??",
        ) {
            let lexicon = lex();
            let before = nvc_indicator(&rationale, &question, &lexicon).novel_span_count();
            let appended = format!("{rationale}\n{question}");
            let after = nvc_indicator(&appended, &question, &lexicon).novel_span_count();
            prop_assert!(after <= before, "{} -> {}", before, after);
        }

        #[test]
        fn spans_stay_in_bounds(text in "\\PC{0,80}") {
            let n = text.chars().count();
            for span in detect_visual_spans(&text, &lex()) {
                prop_assert!(span.char_range.0 < span.char_range.1 && span.char_range.1 <= n);
                prop_assert!(!span.matched_terms.is_empty());
            }
        }
    }
}
