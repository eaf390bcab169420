#![allow(dead_code)]

use std::path::{Path, PathBuf};

use groundcheck::agents::write_synthetic_benchmark;
use groundcheck::io;
use groundcheck::metrics::{GroupMetrics, MetricsReport};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay")
}

/// Copies the replay fixture into `dst` and returns its config path.
pub fn copy_fixture(dst: &Path) -> PathBuf {
    let src = fixture_dir();
    std::fs::create_dir_all(dst.join("images")).unwrap();
    for name in ["config.toml", "fixture.jsonl", "responses.jsonl", "expected.json"] {
        std::fs::copy(src.join(name), dst.join(name)).unwrap();
    }
    for entry in std::fs::read_dir(src.join("images")).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dst.join("images").join(entry.file_name())).unwrap();
    }
    dst.join("config.toml")
}

/// Writes a synthetic benchmark of `n` items plus a config with one agent
/// model per `(model_id, agent table body)` pair. Returns the config path.
pub fn agent_config(dir: &Path, n: usize, models: &[(&str, &str)]) -> PathBuf {
    write_synthetic_benchmark(dir, "synth", n, 7).unwrap();
    let mut text = format!(
        "[benchmarks.synth]\npath = \"synth.jsonl\"\nn = {n}\n\n[seeds]\nsample = 1\nshuffle = 2\nbootstrap = 3\npermutation = 4\naudit = 5\n\n[stats]\nreplicates = 200\npermutation_replicates = 1000\n\n[output]\ndir = \"out\"\n"
    );
    for (id, body) in models {
        text.push_str(&format!("\n[models.{id}]\n{body}\n"));
    }
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn read_metrics(out_dir: &Path) -> MetricsReport {
    io::read_json(&out_dir.join("metrics.json")).unwrap()
}

pub fn group<'a>(report: &'a MetricsReport, model: &str, benchmark: &str) -> &'a GroupMetrics {
    report
        .per_benchmark
        .iter()
        .find(|g| g.model_id == model && g.benchmark_id == benchmark)
        .unwrap_or_else(|| panic!("no group {model}/{benchmark}"))
}
