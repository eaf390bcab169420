//! Stratified sampling and the blank/shuffle image conditions.
//!
//! cargo run --example sample_and_conditions

use groundcheck::agents::write_synthetic_benchmark;
use groundcheck::corpus::{blank_pixels, BenchmarkFormat};
use groundcheck::pipeline::{load_benchmark_as, make_conditions, sample_benchmarks};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = write_synthetic_benchmark(dir.path(), "demo", 60, 1)?;
    let examples = load_benchmark_as(&path, BenchmarkFormat::Jsonl, None)?;
    println!("loaded {} examples from {}", examples.len(), path.display());

    let sample = sample_benchmarks(&[(examples, 12)], 42)?;
    let mut per_modality = std::collections::BTreeMap::new();
    for e in &sample {
        *per_modality.entry(e.modality.clone().unwrap_or_default()).or_insert(0) += 1;
    }
    println!("sample of {} by modality: {per_modality:?}", sample.len());

    let items = make_conditions(&sample, 7, 42)?;
    for item in items.iter().take(4) {
        println!(
            "{:<10} shuffled image from {:<10} blank {}x{}",
            item.item_id(),
            item.shuffle_source_id,
            item.blank_image.width.unwrap_or(0),
            item.blank_image.height.unwrap_or(0)
        );
    }
    assert!(items.iter().all(|i| i.shuffle_source_id != i.base.example_id));
    let blank = blank_pixels();
    println!("blank pixel value: {:?}", blank.get_pixel(0, 0).0);
    Ok(())
}
