//! Rendering report tables from a metrics artifact.
//!
//! cargo run --example report_tables

use groundcheck::metrics::{
    compute_metrics, ExampleOutcome, MetricsReport,
};
use groundcheck::report::{build_report, parse_markdown_tables, to_markdown};

fn main() -> anyhow::Result<()> {
    let mut outcomes = Vec::new();
    for (model, bench, seed) in [("baseline", "alpha", 1u64), ("baseline", "beta", 2), ("tuned", "alpha", 3), ("tuned", "beta", 4)] {
        for i in 0..40u64 {
            let bit = |k: u64| (seed * 7919 + i * 104_729 + k * 613 + i * i * seed) % 11 < 6;
            let correct = [bit(0), bit(1), bit(2)];
            let changed = correct[0] != correct[2] || bit(3);
            outcomes.push(ExampleOutcome::from_flags(
                format!("{bench}/{i}"),
                model,
                bench,
                correct,
                changed,
                false,
                u8::from(bit(4)),
            ));
        }
    }
    let models = vec!["tuned".to_string(), "baseline".to_string()];
    let (per_benchmark, overall) = compute_metrics(&outcomes, &models)?;
    let metrics = MetricsReport {
        run_id: "example".into(),
        lexicon_version: "lex.v1".into(),
        normalization_version: "norm.v1".into(),
        seeds: Default::default(),
        models,
        benchmarks: vec!["alpha".into(), "beta".into(), "gamma".into()],
        per_benchmark,
        overall,
    };
    let report = build_report(&metrics, None, "0000");
    let markdown = to_markdown(&report);
    println!("{markdown}");
    let parsed = parse_markdown_tables(&markdown);
    println!("parsed back {} tables; first has {} rows", parsed.len(), parsed[0].rows.len());
    Ok(())
}
