//! Replaying a recorded response log instead of calling a model.
//!
//! cargo run --example replay_inference

use std::path::Path;
use std::sync::Arc;

use groundcheck::corpus::BenchmarkFormat;
use groundcheck::inference::{run_inference, InferenceOptions, ModelSource, ReplayStore, ResponseSource};
use groundcheck::pipeline::{load_benchmark_as, make_conditions, sample_benchmarks};

fn main() -> anyhow::Result<()> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay");
    let examples = load_benchmark_as(&fixture.join("fixture.jsonl"), BenchmarkFormat::Jsonl, None)?;
    let sample = sample_benchmarks(&[(examples, 4)], 11)?;
    let items = make_conditions(&sample, 12, 11)?;

    let store = Arc::new(ReplayStore::load(&fixture.join("responses.jsonl"))?);
    println!("log holds {} responses for models {:?}", store.len(), store.model_ids());
    let models = vec![ModelSource {
        model_id: "m1".into(),
        source: ResponseSource::Replay(store),
    }];
    let responses = run_inference(&items, &models, &InferenceOptions::default())?;
    for r in &responses {
        println!("{:<12} {:<8} {}", r.item_id, r.condition, r.text);
    }
    Ok(())
}
