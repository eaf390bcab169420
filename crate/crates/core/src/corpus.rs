//! Benchmark ingestion, stratified sampling and counterfactual image conditions.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use image::{ImageFormat, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::parsing::canonical_text;

/// Side length of the synthetic blank image, in pixels.
pub const BLANK_SIZE: u32 = 224;
/// Channel value used for every pixel of the blank image.
pub const BLANK_GRAY: u8 = 128;

/// Stratum used for examples without a modality tag.
pub const UNKNOWN_STRATUM: &str = "unknown";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: missing required field \"{field}\"")]
    MissingField {
        path: String,
        line: usize,
        field: &'static str,
    },
    #[error("{path}:{line}: duplicate example_id \"{id}\"")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: gold answer of \"{id}\" must match exactly one option or option letter")]
    GoldNotInOptions {
        path: String,
        line: usize,
        id: String,
    },
    #[error("requested {requested} examples but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("shuffle assignment needs at least 2 examples per benchmark, \"{benchmark}\" has {count}")]
    TooFewForShuffle { benchmark: String, count: usize },
    #[error("shuffle assignment expects a single benchmark, got {0:?}")]
    MixedBenchmarks(Vec<String>),
    #[error("no shuffle donor for example \"{0}\"")]
    MissingDonor(String),
    #[error("invalid shuffle donor \"{donor}\" for example \"{example_id}\"")]
    InvalidDonor { example_id: String, donor: String },
    #[error("image for example \"{example_id}\" not found at {path}")]
    MissingImage { example_id: String, path: String },
    #[error("image for example \"{example_id}\" could not be materialized: {message}")]
    BadImage { example_id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageKind {
    FilePath,
    InlineBase64,
    SyntheticBlank,
}

/// Where the pixels for one condition come from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub kind: ImageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl ImageRef {
    pub fn file(path: impl Into<String>) -> Self {
        ImageRef {
            kind: ImageKind::FilePath,
            locator: Some(path.into()),
            width: None,
            height: None,
        }
    }

    pub fn inline_base64(payload: impl Into<String>) -> Self {
        ImageRef {
            kind: ImageKind::InlineBase64,
            locator: Some(payload.into()),
            width: None,
            height: None,
        }
    }

    /// Stable textual identity used when hashing prompts.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            ImageKind::SyntheticBlank => format!("blank:{BLANK_SIZE}x{BLANK_SIZE}:{BLANK_GRAY}"),
            ImageKind::FilePath => format!("file:{}", self.locator.as_deref().unwrap_or("")),
            ImageKind::InlineBase64 => format!(
                "inline:{}",
                crate::io::sha256_hex(self.locator.as_deref().unwrap_or("").as_bytes())
            ),
        }
    }

    /// Returns encoded image bytes and their MIME type.
    pub fn materialize(&self) -> Result<(Vec<u8>, &'static str), String> {
        match self.kind {
            ImageKind::SyntheticBlank => Ok((blank_png_bytes(), "image/png")),
            ImageKind::FilePath => {
                let path = self.locator.as_deref().ok_or("file-path image without locator")?;
                let bytes = fs::read(path).map_err(|e| format!("{path}: {e}"))?;
                Ok((bytes, mime_for_path(path)))
            }
            ImageKind::InlineBase64 => {
                let payload = self.locator.as_deref().ok_or("inline image without payload")?;
                let (mime, data) = match payload.strip_prefix("data:") {
                    Some(rest) => {
                        let (head, data) = rest.split_once(',').ok_or("malformed data URL")?;
                        let mime = if head.starts_with("image/jpeg") {
                            "image/jpeg"
                        } else {
                            "image/png"
                        };
                        (mime, data)
                    }
                    None => ("image/png", payload),
                };
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(data.trim())
                    .map_err(|e| e.to_string())?;
                Ok((bytes, mime))
            }
        }
    }
}

fn mime_for_path(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else {
        "image/png"
    }
}

/// One VQA item as read from a benchmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkExample {
    pub example_id: String,
    pub question: String,
    pub image: ImageRef,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    pub benchmark_id: String,
}

impl BenchmarkExample {
    /// `benchmark_id/example_id`, unique across every benchmark in a run.
    pub fn qualified_id(&self) -> String {
        format!("{}/{}", self.benchmark_id, self.example_id)
    }

    fn stratum(&self) -> &str {
        match self.modality.as_deref().map(str::trim) {
            Some(tag) if !tag.is_empty() => tag,
            _ => UNKNOWN_STRATUM,
        }
    }
}

/// An example together with its real, blank and shuffled images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationItem {
    pub base: BenchmarkExample,
    pub real_image: ImageRef,
    pub blank_image: ImageRef,
    pub shuffle_image: ImageRef,
    pub shuffle_source_id: String,
    pub sample_seed: u64,
}

impl EvaluationItem {
    pub fn item_id(&self) -> String {
        self.base.qualified_id()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkFormat {
    Jsonl,
    Csv,
}

impl BenchmarkFormat {
    /// `.csv` selects CSV; anything else is read as JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => BenchmarkFormat::Csv,
            _ => BenchmarkFormat::Jsonl,
        }
    }
}

/// Loads every record of a benchmark file in file order.
///
/// The benchmark id is the file stem. Relative `image_path`s are resolved
/// against the directory holding the benchmark file.
pub fn load_benchmark(
    path: &Path,
    format: BenchmarkFormat,
) -> Result<Vec<BenchmarkExample>, CorpusError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let benchmark_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("benchmark")
        .to_string();
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let rows: Vec<(usize, Map<String, Value>)> = match format {
        BenchmarkFormat::Jsonl => jsonl_rows(&text, &display)?,
        BenchmarkFormat::Csv => csv_rows(&text, &display)?,
    };

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let example = example_from_row(&row, line, &display, &benchmark_id, &base_dir)?;
        if !seen.insert(example.example_id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: display,
                line,
                id: example.example_id,
            });
        }
        out.push(example);
    }
    Ok(out)
}

fn jsonl_rows(text: &str, display: &str) -> Result<Vec<(usize, Map<String, Value>)>, CorpusError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: display.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        match value {
            Value::Object(map) => rows.push((idx + 1, map)),
            _ => {
                return Err(CorpusError::Malformed {
                    path: display.to_string(),
                    line: idx + 1,
                    message: "expected a JSON object".into(),
                })
            }
        }
    }
    Ok(rows)
}

fn csv_rows(text: &str, display: &str) -> Result<Vec<(usize, Map<String, Value>)>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Malformed {
            path: display.to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CorpusError::Malformed {
            path: display.to_string(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut map = Map::new();
        for (header, cell) in headers.iter().zip(record.iter()) {
            if cell.is_empty() {
                continue;
            }
            let value = if header == "options" {
                csv_options(cell).map_err(|message| CorpusError::Malformed {
                    path: display.to_string(),
                    line,
                    message,
                })?
            } else {
                Value::String(cell.to_string())
            };
            map.insert(header.to_string(), value);
        }
        rows.push((line, map));
    }
    Ok(rows)
}

/// CSV option cells hold either a JSON array or `|`-separated texts.
fn csv_options(cell: &str) -> Result<Value, String> {
    let trimmed = cell.trim();
    if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| format!("options: {e}"))
    } else {
        Ok(Value::Array(
            trimmed
                .split('|')
                .map(|s| Value::String(s.trim().to_string()))
                .collect(),
        ))
    }
}

fn example_from_row(
    row: &Map<String, Value>,
    line: usize,
    display: &str,
    benchmark_id: &str,
    base_dir: &Path,
) -> Result<BenchmarkExample, CorpusError> {
    let required = |field: &'static str| -> Result<String, CorpusError> {
        match row.get(field) {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            Some(Value::Number(n)) if field == "example_id" => Ok(n.to_string()),
            _ => Err(CorpusError::MissingField {
                path: display.to_string(),
                line,
                field,
            }),
        }
    };
    let example_id = required("example_id")?;
    let question = required("question")?;
    let image_path = required("image_path")?;
    let gold_answer = required("gold_answer")?;

    let answer_options = match row.get("options") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => {
            let mut options = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    Value::String(s) => options.push(s.clone()),
                    other => {
                        return Err(CorpusError::Malformed {
                            path: display.to_string(),
                            line,
                            message: format!("option must be a string, got {other}"),
                        })
                    }
                }
            }
            if options.is_empty() {
                None
            } else {
                Some(options)
            }
        }
        Some(other) => {
            return Err(CorpusError::Malformed {
                path: display.to_string(),
                line,
                message: format!("options must be an array, got {other}"),
            })
        }
    };
    let modality = match row.get("modality") {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
        _ => None,
    };

    if let Some(options) = &answer_options {
        if !gold_matches_one_option(&gold_answer, options) {
            return Err(CorpusError::GoldNotInOptions {
                path: display.to_string(),
                line,
                id: example_id,
            });
        }
    }

    let resolved: PathBuf = if Path::new(&image_path).is_absolute() {
        PathBuf::from(&image_path)
    } else {
        base_dir.join(&image_path)
    };

    Ok(BenchmarkExample {
        example_id,
        question,
        image: ImageRef::file(resolved.to_string_lossy().into_owned()),
        gold_answer,
        answer_options,
        modality,
        benchmark_id: benchmark_id.to_string(),
    })
}

fn gold_matches_one_option(gold: &str, options: &[String]) -> bool {
    let gold_trim = gold.trim();
    if gold_trim.len() == 1 {
        let c = gold_trim.chars().next().unwrap().to_ascii_uppercase();
        if c.is_ascii_uppercase() && ((c as u8 - b'A') as usize) < options.len() {
            return true;
        }
    }
    let gold_canon = canonical_text(gold);
    options
        .iter()
        .filter(|opt| canonical_text(opt) == gold_canon)
        .count()
        == 1
}

/// Largest-remainder (Hamilton) apportionment of `n` over strata sizes.
///
/// Ties on the remainder go to the earlier stratum.
pub fn largest_remainder_allocation(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| n * s / total).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = (n * sizes[a]) % total;
        let rb = (n * sizes[b]) % total;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &idx in order.iter().take(n - assigned) {
        alloc[idx] += 1;
    }
    alloc
}

/// Draws `n` examples without replacement, stratified by modality when at
/// least two distinct modality tags are present. Output is sorted by
/// `example_id`.
pub fn stratified_sample(
    examples: &[BenchmarkExample],
    n: usize,
    seed: u64,
) -> Result<Vec<BenchmarkExample>, CorpusError> {
    if n > examples.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: examples.len(),
        });
    }
    let mut strata: BTreeMap<&str, Vec<&BenchmarkExample>> = BTreeMap::new();
    let tagged: HashSet<&str> = examples
        .iter()
        .filter_map(|e| e.modality.as_deref().map(str::trim))
        .filter(|t| !t.is_empty())
        .collect();
    if tagged.len() >= 2 {
        for example in examples {
            strata.entry(example.stratum()).or_default().push(example);
        }
    } else {
        strata.insert("all", examples.iter().collect());
    }

    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let quotas = largest_remainder_allocation(&sizes, n);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for (members, quota) in strata.values_mut().zip(quotas) {
        members.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        for idx in rand::seq::index::sample(&mut rng, members.len(), quota) {
            picked.push(members[idx].clone());
        }
    }
    picked.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    Ok(picked)
}

/// The uniform gray image used for the blank condition.
pub fn make_blank_image() -> ImageRef {
    ImageRef {
        kind: ImageKind::SyntheticBlank,
        locator: None,
        width: Some(BLANK_SIZE),
        height: Some(BLANK_SIZE),
    }
}

pub fn blank_pixels() -> RgbImage {
    RgbImage::from_pixel(BLANK_SIZE, BLANK_SIZE, Rgb([BLANK_GRAY; 3]))
}

/// Lossless PNG encoding of [`blank_pixels`].
pub fn blank_png_bytes() -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    blank_pixels()
        .write_to(&mut buf, ImageFormat::Png)
        .expect("encoding an in-memory PNG cannot fail");
    buf.into_inner()
}

/// Assigns every example a donor image from a different example of the same
/// benchmark. The result is a derangement of the sampled ids.
pub fn assign_shuffle(
    sampled: &[BenchmarkExample],
    seed: u64,
) -> Result<BTreeMap<String, String>, CorpusError> {
    let benchmarks: Vec<String> = sampled
        .iter()
        .map(|e| e.benchmark_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if benchmarks.len() > 1 {
        return Err(CorpusError::MixedBenchmarks(benchmarks));
    }
    if sampled.len() < 2 {
        return Err(CorpusError::TooFewForShuffle {
            benchmark: benchmarks.into_iter().next().unwrap_or_default(),
            count: sampled.len(),
        });
    }
    let mut ids: Vec<&str> = sampled.iter().map(|e| e.example_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..ids.len()).collect();
    // Uniform over derangements by rejection; ~e attempts on average.
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    Ok(ids
        .iter()
        .zip(&perm)
        .map(|(&id, &donor)| (id.to_string(), ids[donor].to_string()))
        .collect())
}

/// Pairs each sampled example with its blank and shuffled images.
pub fn build_evaluation_items(
    sampled: &[BenchmarkExample],
    shuffle_map: &BTreeMap<String, String>,
    sample_seed: u64,
) -> Result<Vec<EvaluationItem>, CorpusError> {
    let by_id: BTreeMap<&str, &BenchmarkExample> = sampled
        .iter()
        .map(|e| (e.example_id.as_str(), e))
        .collect();
    let blank = make_blank_image();
    let mut items = Vec::with_capacity(sampled.len());
    for example in sampled {
        let donor_id = shuffle_map
            .get(&example.example_id)
            .ok_or_else(|| CorpusError::MissingDonor(example.example_id.clone()))?;
        let donor = by_id
            .get(donor_id.as_str())
            .filter(|d| d.example_id != example.example_id)
            .ok_or_else(|| CorpusError::InvalidDonor {
                example_id: example.example_id.clone(),
                donor: donor_id.clone(),
            })?;
        check_image(&example.example_id, &example.image)?;
        check_image(&example.example_id, &donor.image)?;
        items.push(EvaluationItem {
            base: example.clone(),
            real_image: example.image.clone(),
            blank_image: blank.clone(),
            shuffle_image: donor.image.clone(),
            shuffle_source_id: donor.example_id.clone(),
            sample_seed,
        });
    }
    Ok(items)
}

fn check_image(example_id: &str, image: &ImageRef) -> Result<(), CorpusError> {
    match image.kind {
        ImageKind::FilePath => {
            let path = image.locator.as_deref().unwrap_or("");
            if Path::new(path).is_file() {
                Ok(())
            } else {
                Err(CorpusError::MissingImage {
                    example_id: example_id.to_string(),
                    path: path.to_string(),
                })
            }
        }
        ImageKind::InlineBase64 if image.locator.as_deref().unwrap_or("").is_empty() => {
            Err(CorpusError::BadImage {
                example_id: example_id.to_string(),
                message: "empty inline payload".into(),
            })
        }
        _ => Ok(()),
    }
}
