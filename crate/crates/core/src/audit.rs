//! Manual audit of high-risk cases: wrong on the real image yet making a
//! novel visual claim.
//!
//! The queue and the append-only annotation log are JSONL files. A small
//! local HTTP server exposes them to an annotation front end:
//!
//! | method | path              | body                                   |
//! |--------|-------------------|----------------------------------------|
//! | GET    | `/queue`          | all cases with per-annotator status    |
//! | GET    | `/case/{id}`      | one case                               |
//! | GET    | `/image/{id}`     | the case's real image bytes            |
//! | POST   | `/annotation`     | `{"case_id","label","elapsed_s"}`      |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::NvcRecord;
use crate::corpus::{EvaluationItem, ImageKind, ImageRef};
use crate::inference::Condition;
use crate::io::{self, hash64, IoError};
use crate::metrics::ExampleOutcome;
use crate::parsing::ResponseRecord;
use crate::stats::{cohens_kappa, AgreementResult, StatsError};

pub const DEFAULT_PER_MODEL: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("no annotations found")]
    NoAnnotations,
    #[error("kappa needs exactly two annotators, found {0:?}")]
    AnnotatorCount(Vec<String>),
    #[error("the two annotators share no labeled case")]
    NoOverlap,
    #[error("server: {0}")]
    Server(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditLabel {
    GroundedButWrong,
    UngroundedHallucination,
    Ambiguous,
}

impl AuditLabel {
    pub const ALL: [AuditLabel; 3] = [
        AuditLabel::GroundedButWrong,
        AuditLabel::UngroundedHallucination,
        AuditLabel::Ambiguous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuditLabel::GroundedButWrong => "grounded-but-wrong",
            AuditLabel::UngroundedHallucination => "ungrounded-hallucination",
            AuditLabel::Ambiguous => "ambiguous",
        }
    }
}

impl fmt::Display for AuditLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AuditLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AuditLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("label \"{s}\" is not one of grounded-but-wrong, ungrounded-hallucination, ambiguous"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    #[default]
    Pending,
    Labeled,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCase {
    pub case_id: String,
    pub model_id: String,
    pub item_id: String,
    pub question: String,
    /// File path of the real image, when it is file based.
    #[serde(default)]
    pub image_path: Option<String>,
    pub image: ImageRef,
    pub rationale: String,
    /// Char (code point) ranges of sentences carrying a novel visual claim.
    pub claim_spans: Vec<[usize; 2]>,
    pub answer_text: String,
    pub gold_answer: String,
    #[serde(default)]
    pub status: CaseStatus,
}

/// Uniform sample without replacement of up to `per_model` cases per model
/// from outcomes that are wrong on the real image and carry an NVC.
///
/// Each model draws from its own stream of `seed`, so adding a model never
/// changes another model's queue. Output is sorted by (model, item).
pub fn select_high_risk(
    outcomes: &[ExampleOutcome],
    items: &[EvaluationItem],
    records: &[ResponseRecord],
    nvc: &[NvcRecord],
    per_model: usize,
    seed: u64,
) -> Vec<AuditCase> {
    let items: HashMap<String, &EvaluationItem> = items.iter().map(|i| (i.item_id(), i)).collect();
    let real: HashMap<(&str, &str), &ResponseRecord> = records
        .iter()
        .filter(|r| r.condition == Condition::Real)
        .map(|r| ((r.model_id.as_str(), r.item_id.as_str()), r))
        .collect();
    let claims: HashMap<(&str, &str), &NvcRecord> = nvc
        .iter()
        .filter(|r| r.condition == Condition::Real)
        .map(|r| ((r.model_id.as_str(), r.item_id.as_str()), r))
        .collect();

    let mut pools: BTreeMap<&str, Vec<&ExampleOutcome>> = BTreeMap::new();
    for o in outcomes {
        let pool = pools.entry(&o.model_id).or_default();
        if !o.correct_real && o.nvc == 1 {
            pool.push(o);
        }
    }
    let mut cases = Vec::new();
    for (model_id, mut pool) in pools {
        pool.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        if pool.is_empty() {
            log::warn!("model {model_id}: no high-risk cases to audit");
            continue;
        }
        let chosen: Vec<&ExampleOutcome> = if pool.len() <= per_model {
            if pool.len() < per_model {
                log::warn!(
                    "model {model_id}: only {} high-risk cases, fewer than the {per_model} requested",
                    pool.len()
                );
            }
            pool
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(hash64(model_id.as_bytes()));
            let mut picks = rand::seq::index::sample(&mut rng, pool.len(), per_model).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| pool[i]).collect()
        };
        for o in chosen {
            let key = (o.model_id.as_str(), o.item_id.as_str());
            let Some(item) = items.get(&o.item_id) else {
                log::warn!("audit: item {} missing from item list", o.item_id);
                continue;
            };
            let record = real.get(&key);
            let spans = claims
                .get(&key)
                .map(|r| {
                    r.result
                        .spans
                        .iter()
                        .filter(|s| s.novel)
                        .map(|s| [s.char_range.0, s.char_range.1])
                        .collect()
                })
                .unwrap_or_default();
            cases.push(AuditCase {
                case_id: format!("{}::{}", o.model_id, o.item_id),
                model_id: o.model_id.clone(),
                item_id: o.item_id.clone(),
                question: item.base.question.clone(),
                image_path: (item.real_image.kind == ImageKind::FilePath)
                    .then(|| item.real_image.locator.clone())
                    .flatten(),
                image: item.real_image.clone(),
                rationale: record.map(|r| r.rationale.clone()).unwrap_or_default(),
                claim_spans: spans,
                answer_text: record.map(|r| r.answer_text.clone()).unwrap_or_default(),
                gold_answer: item.base.gold_answer.clone(),
                status: CaseStatus::Pending,
            });
        }
    }
    cases
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub case_id: String,
    pub annotator_id: String,
    pub label: AuditLabel,
    pub elapsed_s: f64,
    pub ts: String,
}

/// Appends one annotation line and syncs it to disk.
pub fn append_annotation(path: &Path, annotation: &Annotation) -> Result<(), IoError> {
    let mut line = serde_json::to_vec(annotation).map_err(IoError::Serialize)?;
    line.push(b'\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| IoError::fs(path, e))?;
    file.write_all(&line).map_err(|e| IoError::fs(path, e))?;
    file.sync_data().map_err(|e| IoError::fs(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, IoError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    io::read_jsonl(path)
}

/// The last annotation per (case_id, annotator_id) in input order.
pub fn latest_annotations(annotations: &[Annotation]) -> Vec<Annotation> {
    let mut latest: BTreeMap<(&str, &str), &Annotation> = BTreeMap::new();
    for a in annotations {
        latest.insert((&a.case_id, &a.annotator_id), a);
    }
    latest.into_values().cloned().collect()
}

/// Merges annotation files (in order) and marks labeled cases in `queue`.
/// Returns the merged, superseded-free annotations.
pub fn import_annotations(queue: &mut [AuditCase], files: &[PathBuf]) -> Result<Vec<Annotation>, AuditError> {
    let mut all = Vec::new();
    for file in files {
        all.extend(read_annotations(file)?);
    }
    let merged = latest_annotations(&all);
    let labeled: BTreeSet<&str> = merged.iter().map(|a| a.case_id.as_str()).collect();
    for case in queue.iter_mut() {
        if labeled.contains(case.case_id.as_str()) {
            case.status = CaseStatus::Labeled;
        }
    }
    let unknown = merged
        .iter()
        .filter(|a| !queue.iter().any(|c| c.case_id == a.case_id))
        .count();
    if unknown > 0 {
        log::warn!("{unknown} annotation(s) refer to cases outside the queue");
    }
    Ok(merged)
}

/// Cohen's kappa between the two annotators found in `annotations`,
/// paired by case_id over the cases both labeled.
pub fn kappa_from_annotations(annotations: &[Annotation]) -> Result<AgreementResult, AuditError> {
    if annotations.is_empty() {
        return Err(AuditError::NoAnnotations);
    }
    let merged = latest_annotations(annotations);
    let annotators: BTreeSet<&str> = merged.iter().map(|a| a.annotator_id.as_str()).collect();
    let annotators: Vec<&str> = annotators.into_iter().collect();
    if annotators.len() != 2 {
        return Err(AuditError::AnnotatorCount(annotators.iter().map(|s| s.to_string()).collect()));
    }
    let by = |who: &str| -> BTreeMap<String, AuditLabel> {
        merged
            .iter()
            .filter(|a| a.annotator_id == who)
            .map(|a| (a.case_id.clone(), a.label))
            .collect()
    };
    let (first, second) = (by(annotators[0]), by(annotators[1]));
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (case, label) in &first {
        if let Some(other) = second.get(case) {
            a.push(*label);
            b.push(*other);
        }
    }
    if a.is_empty() {
        return Err(AuditError::NoOverlap);
    }
    Ok(cohens_kappa(&a, &b)?)
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub queue_path: PathBuf,
    pub annotations_path: PathBuf,
    pub annotator_id: String,
    /// Hide model ids from the annotator.
    pub blind: bool,
    /// Show the model's final answer.
    pub show_answer: bool,
    pub bind: String,
}

impl ServerOptions {
    pub fn new(queue_path: PathBuf, annotations_path: PathBuf, annotator_id: impl Into<String>) -> Self {
        ServerOptions {
            queue_path,
            annotations_path,
            annotator_id: annotator_id.into(),
            blind: true,
            show_answer: true,
            bind: "127.0.0.1:8765".into(),
        }
    }
}

struct ServerState {
    options: ServerOptions,
    cases: Vec<AuditCase>,
    lock: Mutex<()>,
}

impl ServerState {
    fn view(&self, case: &AuditCase, labeled: &BTreeSet<String>) -> serde_json::Value {
        let mut value = serde_json::to_value(case).unwrap_or_default();
        if let Some(obj) = value.as_object_mut() {
            if self.options.blind {
                obj.remove("model_id");
            }
            if !self.options.show_answer {
                obj.remove("answer_text");
            }
            let status = if labeled.contains(&case.case_id) {
                CaseStatus::Labeled
            } else {
                case.status
            };
            obj.insert("status".into(), serde_json::to_value(status).unwrap_or_default());
            obj.insert(
                "image_available".into(),
                serde_json::Value::Bool(case.image.materialize().is_ok()),
            );
        }
        value
    }

    fn labeled(&self) -> BTreeSet<String> {
        read_annotations(&self.options.annotations_path)
            .unwrap_or_default()
            .into_iter()
            .filter(|a| a.annotator_id == self.options.annotator_id)
            .map(|a| a.case_id)
            .collect()
    }
}

#[derive(Deserialize)]
struct AnnotationPost {
    case_id: String,
    label: String,
    #[serde(default)]
    elapsed_s: f64,
    #[serde(default)]
    annotator_id: Option<String>,
}

fn json_response(status: u16, value: &serde_json::Value) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    tiny_http::Response::from_data(value.to_string().into_bytes())
        .with_status_code(status)
        .with_header(header)
}

fn error_response(status: u16, message: &str) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    json_response(status, &serde_json::json!({ "error": message }))
}

/// Decodes `%XX` escapes; malformed escapes are kept verbatim.
fn percent_decode(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() && text.is_char_boundary(i + 3) {
            if let Ok(b) = u8::from_str_radix(&text[i + 1..i + 3], 16) {
                out.push(b);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn handle(state: &ServerState, mut request: tiny_http::Request) {
    let method = request.method().clone();
    let url = request.url().split('?').next().unwrap_or("").to_string();
    let response = match (&method, url.as_str()) {
        (tiny_http::Method::Get, "/queue") => {
            let labeled = state.labeled();
            let cases: Vec<serde_json::Value> = state.cases.iter().map(|c| state.view(c, &labeled)).collect();
            let done = cases.iter().filter(|c| c["status"] == "labeled").count();
            json_response(
                200,
                &serde_json::json!({
                    "annotator_id": state.options.annotator_id,
                    "labeled": done,
                    "total": cases.len(),
                    "cases": cases,
                }),
            )
        }
        (tiny_http::Method::Get, path) if path.starts_with("/case/") => {
            let id = percent_decode(&path["/case/".len()..]);
            match state.cases.iter().find(|c| c.case_id == id) {
                Some(case) => json_response(200, &state.view(case, &state.labeled())),
                None => error_response(404, "no such case"),
            }
        }
        (tiny_http::Method::Get, path) if path.starts_with("/image/") => {
            let id = percent_decode(&path["/image/".len()..]);
            match state.cases.iter().find(|c| c.case_id == id) {
                Some(case) => match case.image.materialize() {
                    Ok((bytes, mime)) => {
                        let header = tiny_http::Header::from_bytes("Content-Type", mime).expect("mime header");
                        let _ = request.respond(tiny_http::Response::from_data(bytes).with_header(header));
                        return;
                    }
                    Err(_) => error_response(404, "image unavailable"),
                },
                None => error_response(404, "no such case"),
            }
        }
        (tiny_http::Method::Post, "/annotation") => {
            let mut body = String::new();
            if std::io::Read::read_to_string(request.as_reader(), &mut body).is_err() {
                error_response(400, "unreadable body")
            } else {
                post_annotation(state, &body)
            }
        }
        (tiny_http::Method::Get | tiny_http::Method::Post, _) => error_response(404, "not found"),
        _ => error_response(405, "read-only except POST /annotation"),
    };
    let _ = request.respond(response);
}

fn post_annotation(state: &ServerState, body: &str) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let post: AnnotationPost = match serde_json::from_str(body) {
        Ok(p) => p,
        Err(e) => return error_response(400, &e.to_string()),
    };
    let label = match post.label.parse::<AuditLabel>() {
        Ok(l) => l,
        Err(e) => return error_response(400, &e),
    };
    if !state.cases.iter().any(|c| c.case_id == post.case_id) {
        return error_response(404, "no such case");
    }
    let annotation = Annotation {
        case_id: post.case_id,
        annotator_id: post.annotator_id.unwrap_or_else(|| state.options.annotator_id.clone()),
        label,
        elapsed_s: post.elapsed_s,
        ts: chrono::Utc::now().to_rfc3339(),
    };
    let _guard = state.lock.lock().unwrap_or_else(|e| e.into_inner());
    match append_annotation(&state.options.annotations_path, &annotation) {
        Ok(()) => json_response(201, &serde_json::to_value(&annotation).unwrap_or_default()),
        Err(e) => error_response(500, &e.to_string()),
    }
}

/// A running audit server; dropping the handle does not stop it.
pub struct AuditServer {
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
    addr: SocketAddr,
}

impl AuditServer {
    pub fn start(options: ServerOptions) -> Result<Self, AuditError> {
        let cases: Vec<AuditCase> = io::read_jsonl(&options.queue_path)?;
        let server = tiny_http::Server::http(&options.bind).map_err(|e| AuditError::Server(e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| AuditError::Server("not bound to an IP address".into()))?;
        let server = Arc::new(server);
        let state = Arc::new(ServerState {
            options,
            cases,
            lock: Mutex::new(()),
        });
        let worker = server.clone();
        let thread = std::thread::spawn(move || {
            for request in worker.incoming_requests() {
                handle(&state, request);
            }
        });
        Ok(AuditServer {
            server,
            thread: Some(thread),
            addr,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_a_closed_set() {
        assert_eq!("ambiguous".parse::<AuditLabel>().unwrap(), AuditLabel::Ambiguous);
        assert!("maybe".parse::<AuditLabel>().is_err());
        let bad = r#"{"case_id":"c","annotator_id":"a","label":"maybe","elapsed_s":1,"ts":"t"}"#;
        assert!(serde_json::from_str::<Annotation>(bad).is_err());
    }

    fn ann(case: &str, who: &str, label: AuditLabel) -> Annotation {
        Annotation {
            case_id: case.into(),
            annotator_id: who.into(),
            label,
            elapsed_s: 1.0,
            ts: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn later_annotations_supersede() {
        let all = [
            ann("c1", "a", AuditLabel::Ambiguous),
            ann("c1", "b", AuditLabel::Ambiguous),
            ann("c1", "a", AuditLabel::GroundedButWrong),
        ];
        let latest = latest_annotations(&all);
        assert_eq!(latest.len(), 2);
        assert!(latest.contains(&all[2]) && latest.contains(&all[1]));
    }

    #[test]
    fn kappa_pairs_by_case() {
        use AuditLabel::*;
        let labels_a = [GroundedButWrong, GroundedButWrong, Ambiguous, Ambiguous];
        let labels_b = [GroundedButWrong, Ambiguous, Ambiguous, GroundedButWrong];
        let mut all = Vec::new();
        for (i, (x, y)) in labels_a.iter().zip(&labels_b).enumerate() {
            all.push(ann(&format!("c{i}"), "a", *x));
            all.push(ann(&format!("c{}", 3 - i), "b", labels_b[3 - i]));
            let _ = y;
        }
        let r = kappa_from_annotations(&all).unwrap();
        assert_eq!(r.n, 4);
        assert_eq!(r.kappa, Some(0.0));
        assert!(matches!(
            kappa_from_annotations(&all[..1]),
            Err(AuditError::AnnotatorCount(_))
        ));
    }
}
