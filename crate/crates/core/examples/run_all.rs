//! The full staged pipeline on the shipped replay fixture, then a resume.
//!
//! cargo run --example run_all

use std::path::Path;

use groundcheck::pipeline::{run_all_from_file, RunOptions};

fn main() -> anyhow::Result<()> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay");
    let dir = tempfile::tempdir()?;
    for name in ["config.toml", "fixture.jsonl", "responses.jsonl"] {
        std::fs::copy(fixture.join(name), dir.path().join(name))?;
    }
    std::fs::create_dir(dir.path().join("images"))?;
    for entry in std::fs::read_dir(fixture.join("images"))? {
        let entry = entry?;
        std::fs::copy(entry.path(), dir.path().join("images").join(entry.file_name()))?;
    }
    let config = dir.path().join("config.toml");

    let summary = run_all_from_file(&config, RunOptions::default())?;
    println!("run {} (manifest {})", summary.run_id, &summary.manifest_hash[..16]);
    for (stage, status) in &summary.stages {
        println!("  {stage:<10} {status:?}");
    }

    std::fs::remove_file(summary.out_dir.join("report.json"))?;
    let resumed = run_all_from_file(&config, RunOptions::default())?;
    let ran: Vec<&str> = resumed
        .stages
        .iter()
        .filter(|(_, s)| *s == groundcheck::pipeline::StageStatus::Ran)
        .map(|(n, _)| n.as_str())
        .collect();
    println!("after deleting report.json only these stages ran: {ran:?}");
    println!("\n{}", std::fs::read_to_string(summary.out_dir.join("report.md"))?);
    Ok(())
}
