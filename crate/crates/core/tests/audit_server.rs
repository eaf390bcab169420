mod common;

use std::path::{Path, PathBuf};

use groundcheck::audit::{
    import_annotations, kappa_from_annotations, read_annotations, AuditCase, AuditServer, CaseStatus, ServerOptions,
};
use groundcheck::io;
use groundcheck::pipeline::{run_all_from_file, RunOptions};

fn client() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

/// A run whose audit queue holds 20 cases.
fn queue_of_20(dir: &Path) -> PathBuf {
    let config = common::agent_config(
        dir,
        80,
        &[("halluc", "agent = \"hallucinating-shortcut\"\naccuracy = 0.3\nseed = 9")],
    );
    let mut text = std::fs::read_to_string(&config).unwrap();
    text.push_str("\n[audit]\nper_model = 20\n");
    std::fs::write(&config, text).unwrap();
    let summary = run_all_from_file(&config, RunOptions::default()).unwrap();
    let queue = summary.out_dir.join("audit_queue.jsonl");
    let cases: Vec<AuditCase> = io::read_jsonl(&queue).unwrap();
    assert_eq!(cases.len(), 20);
    queue
}

fn serve(queue: &Path, annotations: &Path, annotator: &str) -> (AuditServer, String) {
    let mut options = ServerOptions::new(queue.to_path_buf(), annotations.to_path_buf(), annotator);
    options.bind = "127.0.0.1:0".into();
    let server = AuditServer::start(options).unwrap();
    let base = format!("http://{}", server.addr());
    (server, base)
}

fn post(base: &str, case_id: &str, label: &str) -> u16 {
    let body = serde_json::json!({ "case_id": case_id, "label": label, "elapsed_s": 1.5 });
    client()
        .post(format!("{base}/annotation"))
        .send_json(&body)
        .unwrap()
        .status()
        .as_u16()
}

fn get_json(base: &str, path: &str) -> (u16, serde_json::Value) {
    let mut resp = client().get(format!("{base}{path}")).call().unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_json().unwrap())
}

fn encode(id: &str) -> String {
    id.replace(':', "%3A").replace('/', "%2F")
}

#[test]
fn round_trip_with_reload_and_two_annotators() {
    let tmp = tempfile::tempdir().unwrap();
    let queue_path = queue_of_20(tmp.path());
    let cases: Vec<AuditCase> = io::read_jsonl(&queue_path).unwrap();
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let labels = ["grounded-but-wrong", "ungrounded-hallucination", "ambiguous"];
    let label_of = |i: usize| labels[i % 3];

    let a_path = tmp.path().join("a.jsonl");
    let (server, base) = serve(&queue_path, &a_path, "ann-a");
    let (status, queue) = get_json(&base, "/queue");
    assert_eq!(status, 200);
    assert_eq!(queue["total"], 20);
    assert_eq!(queue["labeled"], 0);
    let first = &queue["cases"][0];
    assert!(first.get("model_id").is_none(), "blind mode hides the model");
    assert!(first["rationale"].as_str().is_some_and(|r| !r.is_empty()));
    assert!(first["claim_spans"].as_array().is_some_and(|s| !s.is_empty()));
    assert!(first.get("answer_text").is_some());

    let (status, case) = get_json(&base, &format!("/case/{}", encode(&ids[3])));
    assert_eq!(status, 200);
    assert_eq!(case["case_id"], ids[3].as_str());
    let mut image = client().get(format!("{base}/image/{}", ids[3])).call().unwrap();
    assert_eq!(image.status().as_u16(), 200);
    let bytes = image.body_mut().read_to_vec().unwrap();
    assert_eq!(&bytes[1..4], b"PNG");

    for (i, id) in ids.iter().enumerate().take(10) {
        assert_eq!(post(&base, id, label_of(i)), 201);
    }
    assert_eq!(post(&base, &ids[0], "not-a-label"), 400);
    assert_eq!(post(&base, "m::missing", "ambiguous"), 404);
    let put = client().put(format!("{base}/queue")).send_empty().unwrap();
    assert_eq!(put.status().as_u16(), 405);
    server.shutdown();

    // Reload mid-session: progress survives and labeling resumes.
    let (server, base) = serve(&queue_path, &a_path, "ann-a");
    let (_, queue) = get_json(&base, "/queue");
    assert_eq!(queue["labeled"], 10);
    let pending = queue["cases"]
        .as_array()
        .unwrap()
        .iter()
        .position(|c| c["status"] == "pending")
        .unwrap();
    assert_eq!(pending, 10, "first pending case follows the labeled ones");
    for (i, id) in ids.iter().enumerate().skip(10) {
        assert_eq!(post(&base, id, label_of(i)), 201);
    }
    server.shutdown();
    assert_eq!(read_annotations(&a_path).unwrap().len(), 20);

    let b_path = tmp.path().join("b.jsonl");
    let (server, base) = serve(&queue_path, &b_path, "ann-b");
    for (i, id) in ids.iter().enumerate() {
        assert_eq!(post(&base, id, label_of(i)), 201);
    }
    server.shutdown();

    let mut queue = cases.clone();
    let merged = import_annotations(&mut queue, &[a_path.clone(), b_path.clone()]).unwrap();
    assert_eq!(merged.len(), 40);
    assert!(queue.iter().all(|c| c.status == CaseStatus::Labeled));
    let kappa = kappa_from_annotations(&merged).unwrap();
    assert_eq!(kappa.n, 20);
    assert_eq!(kappa.kappa, Some(1.0));
}

#[test]
fn balanced_disagreement_gives_zero_kappa() {
    let tmp = tempfile::tempdir().unwrap();
    let queue_path = queue_of_20(tmp.path());
    let cases: Vec<AuditCase> = io::read_jsonl(&queue_path).unwrap();
    let a_path = tmp.path().join("a.jsonl");
    let b_path = tmp.path().join("b.jsonl");
    let (sa, base_a) = serve(&queue_path, &a_path, "ann-a");
    let (sb, base_b) = serve(&queue_path, &b_path, "ann-b");
    for (i, case) in cases.iter().enumerate() {
        let a = if i < 10 { "grounded-but-wrong" } else { "ungrounded-hallucination" };
        let b = if i % 2 == 0 { "grounded-but-wrong" } else { "ungrounded-hallucination" };
        assert_eq!(post(&base_a, &case.case_id, a), 201);
        assert_eq!(post(&base_b, &case.case_id, b), 201);
    }
    sa.shutdown();
    sb.shutdown();
    let mut all = read_annotations(&a_path).unwrap();
    all.extend(read_annotations(&b_path).unwrap());
    let kappa = kappa_from_annotations(&all).unwrap();
    assert_eq!(kappa.observed_agreement, 0.5);
    assert!(kappa.kappa.unwrap().abs() < 1e-12);
}

#[test]
fn relabeling_keeps_the_latest_label() {
    let tmp = tempfile::tempdir().unwrap();
    let queue_path = queue_of_20(tmp.path());
    let cases: Vec<AuditCase> = io::read_jsonl(&queue_path).unwrap();
    let a_path = tmp.path().join("a.jsonl");
    let (server, base) = serve(&queue_path, &a_path, "ann-a");
    assert_eq!(post(&base, &cases[0].case_id, "ambiguous"), 201);
    assert_eq!(post(&base, &cases[0].case_id, "grounded-but-wrong"), 201);
    server.shutdown();
    let raw = read_annotations(&a_path).unwrap();
    assert_eq!(raw.len(), 2, "the file is append-only");
    let mut queue = cases.clone();
    let merged = import_annotations(&mut queue, &[a_path]).unwrap();
    assert_eq!(merged.len(), 1);
    assert_eq!(merged[0].label.as_str(), "grounded-but-wrong");
}
