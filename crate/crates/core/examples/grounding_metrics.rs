//! Per-example outcomes, grounding and hallucination metrics, and the
//! cross-benchmark mean.
//!
//! cargo run --example grounding_metrics

use groundcheck::metrics::{
    aggregate_grounding, aggregate_hallucination, cross_benchmark_grounding, cross_benchmark_hallucination,
    ExampleOutcome,
};

fn outcomes(benchmark: &str, rows: &[([bool; 3], bool, u8)]) -> Vec<ExampleOutcome> {
    rows.iter()
        .enumerate()
        .map(|(i, &(correct, changed, nvc))| {
            ExampleOutcome::from_flags(format!("{benchmark}/{i}"), "model", benchmark, correct, changed, false, nvc)
        })
        .collect()
}

fn main() -> anyhow::Result<()> {
    // [real, blank, shuffle] correctness, answer changed under shuffle, NVC.
    let a = outcomes(
        "bench-a",
        &[
            ([true, false, false], true, 1),
            ([true, true, true], false, 1),
            ([false, true, true], true, 1),
            ([true, false, true], false, 0),
        ],
    );
    let b = outcomes(
        "bench-b",
        &[
            ([true, true, true], false, 0),
            ([false, false, false], true, 1),
            ([true, false, false], true, 1),
            ([false, false, false], false, 1),
        ],
    );
    let mut grounding = Vec::new();
    let mut hallucination = Vec::new();
    for group in [&a, &b] {
        let g = aggregate_grounding(group)?;
        let h = aggregate_hallucination(group)?;
        g.check_identities().map_err(anyhow::Error::msg)?;
        println!(
            "{}: acc {:.2}/{:.2}/{:.2}  VRS {:+.2}  BD {:+.2}  IS {:.2}  VBR {:.2}  VHR {:.2}  NVCR {:.2}  HVRR {:.2}  P(inv|claim) {:?}",
            group[0].benchmark_id, g.acc_real, g.acc_blank, g.acc_shuffle, g.vrs, g.bd, g.is_rate, g.vbr, g.vhr,
            h.nvcr, h.hvrr, h.cond_prob
        );
        grounding.push(g);
        hallucination.push(h);
    }
    let mean = cross_benchmark_grounding(&grounding)?;
    let mean_h = cross_benchmark_hallucination(&hallucination)?;
    println!(
        "mean: acc {:.3}  VRS {:+.3}  IS {:.3}  cond_prob {:?}",
        mean.acc_real, mean.vrs, mean.is_rate, mean_h.cond_prob
    );
    Ok(())
}
