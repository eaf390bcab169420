//! Scripted agents with known metric values, run through the full pipeline.
//!
//! cargo run --example synthetic_agents

use groundcheck::agents::{expected_metrics, write_synthetic_benchmark, AgentKind, AgentSpec};
use groundcheck::io;
use groundcheck::metrics::MetricsReport;
use groundcheck::pipeline::{run_all_from_file, RunOptions};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    write_synthetic_benchmark(dir.path(), "synth", 200, 3)?;
    let mut config = String::from(
        "[benchmarks.synth]\npath = \"synth.jsonl\"\nn = 200\n\n[seeds]\nsample = 1\nshuffle = 2\nbootstrap = 3\npermutation = 4\naudit = 5\n\n[stats]\nreplicates = 200\nmetrics = [\"vrs\"]\n\n[output]\ndir = \"out\"\n",
    );
    for kind in AgentKind::ALL {
        config.push_str(&format!("\n[models.{kind}]\nagent = \"{kind}\"\nseed = 11\n"));
    }
    let path = dir.path().join("config.toml");
    std::fs::write(&path, config)?;
    let summary = run_all_from_file(&path, RunOptions::default())?;
    let metrics: MetricsReport = io::read_json(&summary.out_dir.join("metrics.json"))?;

    println!("{:<24} {:>6} {:>6} {:>6} {:>6} {:>6}   expected VRS / IS", "agent", "acc", "VRS", "IS", "NVCR", "HVRR");
    for g in &metrics.overall {
        let kind: AgentKind = g.model_id.parse().map_err(anyhow::Error::msg)?;
        // Half the synthetic items have four options, half are yes/no.
        let e4 = expected_metrics(&AgentSpec::new(kind), 4);
        let e2 = expected_metrics(&AgentSpec::new(kind), 2);
        let m = &g.grounding;
        let h = &g.hallucination;
        println!(
            "{:<24} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}   {:.3} / {:.3}",
            g.model_id,
            m.acc_real,
            m.vrs,
            m.is_rate,
            h.nvcr,
            h.hvrr,
            (e4.vrs + e2.vrs) / 2.0,
            (e4.is_rate + e2.is_rate) / 2.0
        );
    }
    Ok(())
}
