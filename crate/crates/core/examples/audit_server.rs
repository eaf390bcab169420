//! Exporting the high-risk audit queue and serving it for annotation.
//!
//! cargo run --example audit_server            (exits after a scripted session)
//! cargo run --example audit_server -- --serve (keeps serving until Ctrl-C)

use groundcheck::agents::write_synthetic_benchmark;
use groundcheck::audit::{read_annotations, AuditServer, ServerOptions};
use groundcheck::pipeline::{run_all_from_file, RunOptions};

fn main() -> anyhow::Result<()> {
    let keep_serving = std::env::args().any(|a| a == "--serve");
    let dir = tempfile::tempdir()?;
    write_synthetic_benchmark(dir.path(), "synth", 60, 5)?;
    std::fs::write(
        dir.path().join("config.toml"),
        "[benchmarks.synth]\npath = \"synth.jsonl\"\nn = 60\n\n[models.talker]\nagent = \"hallucinating-shortcut\"\naccuracy = 0.4\n\n[seeds]\nsample = 1\nshuffle = 2\nbootstrap = 3\npermutation = 4\naudit = 5\n\n[stats]\nreplicates = 100\nmetrics = [\"vrs\"]\n\n[audit]\nper_model = 10\n\n[output]\ndir = \"out\"\n",
    )?;
    let summary = run_all_from_file(&dir.path().join("config.toml"), RunOptions::default())?;
    let queue = summary.out_dir.join("audit_queue.jsonl");
    let annotations = dir.path().join("annotations.jsonl");

    let mut options = ServerOptions::new(queue, annotations.clone(), "demo-annotator");
    if !keep_serving {
        options.bind = "127.0.0.1:0".into();
    }
    let server = AuditServer::start(options)?;
    let base = format!("http://{}", server.addr());
    println!("audit queue served at {base}/queue");
    if keep_serving {
        server.wait();
        return Ok(());
    }

    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let queue: serde_json::Value = agent.get(format!("{base}/queue")).call()?.body_mut().read_json()?;
    println!("{} cases, {} labeled", queue["total"], queue["labeled"]);
    let first = &queue["cases"][0];
    println!("first case {}: {}", first["case_id"], first["rationale"]);
    let body = serde_json::json!({"case_id": first["case_id"], "label": "ungrounded-hallucination", "elapsed_s": 4.2});
    let status = agent.post(format!("{base}/annotation")).send_json(&body)?.status();
    println!("POST /annotation -> {status}");
    server.shutdown();
    println!("annotations on disk: {}", read_annotations(&annotations)?.len());
    Ok(())
}
