//! Acceptance suite. Every criterion runs inside one test and prints a
//! `PASS` or `FAIL` line straight to stdout, so the lines show up even when
//! libtest captures output. The test fails if any criterion fails.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use groundcheck::audit::AuditLabel;
use groundcheck::io;
use groundcheck::metrics::{
    aggregate_grounding, aggregate_hallucination, cross_benchmark_grounding, cross_benchmark_hallucination,
    ExampleOutcome, GroundingCounts, GroundingMetrics, HallucinationMetrics, RATE_EPS,
};
use groundcheck::pipeline::{run_all_from_file, RunOptions};
use groundcheck::stats::{bootstrap_ci, cohens_kappa, permutation_test, spearman_rho, PermutationMode};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn exact(name: &str, got: f64, want: f64) -> Result<(), String> {
    ensure(got == want, || format!("{name} = {got}, expected exactly {want}"))
}

fn run_agent(kind: &str, n: usize) -> Result<(groundcheck::metrics::GroupMetrics, Duration), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let body = format!("agent = \"{kind}\"\nseed = 17");
    let config = common::agent_config(dir.path(), n, &[("agent", &body)]);
    let start = Instant::now();
    let summary = run_all_from_file(&config, RunOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let metrics = common::read_metrics(&summary.out_dir);
    let outcomes: Vec<ExampleOutcome> = io::read_jsonl(&summary.out_dir.join("outcomes.jsonl")).map_err(|e| e.to_string())?;
    ensure(outcomes.len() == n, || format!("{} outcomes for {n} items", outcomes.len()))?;
    Ok((common::group(&metrics, "agent", "synth").clone(), elapsed))
}

fn text_shortcut_agent() -> Check {
    let (g, elapsed) = run_agent("text-shortcut", 100)?;
    let m = &g.grounding;
    let h = &g.hallucination;
    exact("IS", m.is_rate, 0.0)?;
    exact("VRS", m.vrs, 0.0)?;
    exact("BD", m.bd, 0.0)?;
    exact("VBR", m.vbr, 0.0)?;
    exact("VHR", m.vhr, 0.0)?;
    exact("HVRR - NVCR", h.hvrr, h.nvcr)?;
    ensure(elapsed < Duration::from_secs(60), || format!("run took {elapsed:?}"))?;
    Ok(format!("NVCR = HVRR = {}, run took {:.1}s", h.nvcr, elapsed.as_secs_f64()))
}

fn fully_grounded_agent() -> Check {
    let (g, _) = run_agent("fully-grounded", 100)?;
    let m = &g.grounding;
    exact("VRS", m.vrs, 1.0)?;
    exact("BD", m.bd, 1.0)?;
    exact("IS", m.is_rate, 1.0)?;
    exact("VBR", m.vbr, 1.0)?;
    exact("VHR", m.vhr, 0.0)?;
    exact("HVRR", g.hallucination.hvrr, 0.0)?;
    Ok("VRS = BD = IS = VBR = 1, VHR = HVRR = 0".into())
}

fn hallucinating_shortcut_agent() -> Check {
    let (g, _) = run_agent("hallucinating-shortcut", 100)?;
    let h = &g.hallucination;
    exact("NVCR", h.nvcr, 1.0)?;
    exact("HVRR", h.hvrr, 1.0)?;
    exact("cond_prob", h.cond_prob.unwrap_or(f64::NAN), 1.0)?;
    Ok("NVCR = HVRR = cond_prob = 1".into())
}

/// Per-benchmark reference rows: benchmark, model, accuracy under real,
/// blank and shuffled images (percent), printed VRS, BD and IS.
const BENCHMARK_ROWS: [(&str, &str, [u32; 3], f64, f64, f64); 12] = [
    ("pathvqa", "baseline", [62, 48, 62], 0.00, 0.14, 0.42),
    ("pathvqa", "rl-text", [56, 52, 65], -0.09, 0.04, 0.46),
    ("pathvqa", "rl-image", [60, 48, 56], 0.04, 0.12, 0.32),
    ("pmc-vqa", "baseline", [50, 29, 25], 0.25, 0.21, 0.63),
    ("pmc-vqa", "rl-text", [44, 30, 25], 0.19, 0.14, 0.65),
    ("pmc-vqa", "rl-image", [57, 48, 44], 0.13, 0.09, 0.55),
    ("slake", "baseline", [60, 53, 43], 0.17, 0.07, 0.45),
    ("slake", "rl-text", [62, 46, 44], 0.18, 0.16, 0.47),
    ("slake", "rl-image", [55, 45, 49], 0.06, 0.10, 0.43),
    ("vqa-rad", "baseline", [54, 44, 45], 0.09, 0.10, 0.43),
    ("vqa-rad", "rl-text", [63, 51, 49], 0.14, 0.12, 0.42),
    ("vqa-rad", "rl-image", [63, 44, 46], 0.17, 0.19, 0.29),
];

/// Model, Acc (%), VRS, BD, IS (%) averaged across the four benchmarks.
const OVERALL_ROWS: [(&str, f64, f64, f64, f64); 3] = [
    ("baseline", 56.5, 0.127, 0.130, 48.2),
    ("rl-text", 56.2, 0.105, 0.115, 50.0),
    ("rl-image", 58.8, 0.100, 0.125, 39.8),
];

/// Benchmark, model, NVCR (%), HVRR (%), printed conditional probability (%).
const HALLUCINATION_ROWS: [(&str, &str, u32, u32, f64); 12] = [
    ("pathvqa", "baseline", 80, 51, 63.8),
    ("pathvqa", "rl-text", 88, 52, 59.1),
    ("pathvqa", "rl-image", 83, 55, 66.3),
    ("pmc-vqa", "baseline", 60, 24, 40.0),
    ("pmc-vqa", "rl-text", 66, 27, 40.9),
    ("pmc-vqa", "rl-image", 64, 31, 48.4),
    ("slake", "baseline", 67, 35, 52.2),
    ("slake", "rl-text", 72, 40, 55.6),
    ("slake", "rl-image", 64, 38, 59.4),
    ("vqa-rad", "baseline", 66, 41, 62.1),
    ("vqa-rad", "rl-text", 69, 40, 58.0),
    ("vqa-rad", "rl-image", 69, 48, 69.6),
];

/// Model and the conditional probability (%) averaged across benchmarks.
const OVERALL_COND_PROB: [(&str, f64); 3] = [("baseline", 54.5), ("rl-text", 53.4), ("rl-image", 60.9)];

fn counts_from_row(acc: [u32; 3], is: f64) -> GroundingCounts {
    let [real, blank, shuffle] = acc.map(|a| a as usize);
    GroundingCounts {
        n: 100,
        correct_real: real,
        correct_blank: blank,
        correct_shuffle: shuffle,
        changed_shuffle: (is * 100.0).round() as usize,
        changed_blank: 0,
        vb: real.saturating_sub(shuffle),
        vh: shuffle.saturating_sub(real),
    }
}

fn table_reconstruction() -> Check {
    for (bench, model, acc, vrs, bd, is) in BENCHMARK_ROWS {
        let m = GroundingMetrics::from_counts(counts_from_row(acc, is));
        ensure((m.vrs - vrs).abs() <= 0.005, || {
            format!("{bench}/{model}: VRS {} vs printed {vrs}", m.vrs)
        })?;
        ensure((m.bd - bd).abs() <= 0.005, || format!("{bench}/{model}: BD {} vs printed {bd}", m.bd))?;
    }
    Ok("12 rows: VRS and BD recomputed within 0.005".into())
}

fn conditional_probability_identity() -> Check {
    let mut by_model: std::collections::BTreeMap<&str, Vec<HallucinationMetrics>> = Default::default();
    for (bench, model, nvcr, hvrr, printed) in HALLUCINATION_ROWS {
        let h = HallucinationMetrics::from_rates(nvcr as f64 / 100.0, hvrr as f64 / 100.0, 100);
        let cond = h.cond_prob.ok_or_else(|| format!("{bench}/{model}: undefined"))? * 100.0;
        ensure((cond - printed).abs() <= 0.5, || {
            format!("{bench}/{model}: {cond:.2}% vs printed {printed}%")
        })?;
        by_model.entry(model).or_default().push(h);
    }
    for (model, printed) in OVERALL_COND_PROB {
        let mean = cross_benchmark_hallucination(&by_model[model]).map_err(|e| e.to_string())?;
        let cond = mean.cond_prob.unwrap_or(f64::NAN) * 100.0;
        ensure((cond - printed).abs() <= 0.5, || {
            format!("{model}: mean cond_prob {cond:.2}% vs printed {printed}%")
        })?;
    }
    Ok("12 per-benchmark rows and 3 averaged rows within 0.5 pp".into())
}

fn cross_benchmark_averaging() -> Check {
    for (model, acc, vrs, bd, is) in OVERALL_ROWS {
        let groups: Vec<GroundingMetrics> = BENCHMARK_ROWS
            .iter()
            .filter(|r| r.1 == model)
            .map(|r| GroundingMetrics::from_counts(counts_from_row(r.2, r.5)))
            .collect();
        let mean = cross_benchmark_grounding(&groups).map_err(|e| e.to_string())?;
        let checks = [
            ("Acc", mean.acc_real * 100.0, acc, 0.5),
            ("VRS", mean.vrs, vrs, 0.005),
            ("BD", mean.bd, bd, 0.005),
            ("IS", mean.is_rate * 100.0, is, 0.5),
        ];
        for (name, got, want, tol) in checks {
            ensure((got - want).abs() <= tol, || format!("{model} {name}: {got} vs printed {want}"))?;
        }
    }
    Ok("3 models: Acc, VRS, BD and IS means within tolerance".into())
}

fn fixture_replay() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = common::copy_fixture(dir.path());
    let summary = run_all_from_file(&config, RunOptions::default()).map_err(|e| e.to_string())?;
    let metrics = common::read_metrics(&summary.out_dir);
    let g = common::group(&metrics, "m1", "fixture");
    let expected: serde_json::Map<String, serde_json::Value> =
        io::read_json(&dir.path().join("expected.json")).map_err(|e| e.to_string())?;
    let want = |k: &str| expected[k].as_f64().unwrap();
    let m = &g.grounding;
    let h = &g.hallucination;
    for (name, got) in [
        ("acc_real", m.acc_real),
        ("acc_blank", m.acc_blank),
        ("acc_shuffle", m.acc_shuffle),
        ("vrs", m.vrs),
        ("bd", m.bd),
        ("is", m.is_rate),
        ("vbr", m.vbr),
        ("vhr", m.vhr),
        ("nvcr", h.nvcr),
        ("hvrr", h.hvrr),
        ("cond_prob", h.cond_prob.unwrap_or(f64::NAN)),
    ] {
        exact(name, got, want(name))?;
    }
    Ok("12 records, 11 metrics equal to the hand enumeration".into())
}

fn statistics_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for n in 3..=10 {
        for trial in 0..3u64 {
            let diffs: Vec<f64> = (0..n).map(|_| rng.random_range(-1i32..=1) as f64).collect();
            let ex = permutation_test(&diffs, PermutationMode::Exact, 0, 0).map_err(|e| e.to_string())?;
            let mc = permutation_test(&diffs, PermutationMode::MonteCarlo, 100_000, trial).map_err(|e| e.to_string())?;
            worst = worst.max((ex.p_value - mc.p_value).abs());
        }
    }
    ensure(worst <= 0.02, || format!("exact vs Monte Carlo p differ by {worst}"))?;

    let mut covered = 0;
    for dataset in 0..200u64 {
        let mut data_rng = ChaCha8Rng::seed_from_u64(10_000 + dataset);
        let values: Vec<f64> = (0..100).map(|_| f64::from(u8::from(data_rng.random_bool(0.5)))).collect();
        let ci = bootstrap_ci(&values, 0.95, 1000, dataset).map_err(|e| e.to_string())?;
        if ci.contains(0.5) {
            covered += 1;
        }
    }
    let coverage = covered as f64 / 200.0;
    ensure((0.92..=0.98).contains(&coverage), || format!("bootstrap coverage {coverage}"))?;

    let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).map_err(|e| e.to_string())?;
    ensure(rho.is_some_and(|r| (r - 0.8).abs() < 1e-12), || format!("spearman {rho:?}"))?;

    use AuditLabel::*;
    let a = [GroundedButWrong, GroundedButWrong, UngroundedHallucination, UngroundedHallucination];
    let b = [GroundedButWrong, UngroundedHallucination, GroundedButWrong, UngroundedHallucination];
    let k0 = cohens_kappa(&a, &b).map_err(|e| e.to_string())?.kappa;
    ensure(k0.is_some_and(|k| k.abs() < 1e-12), || format!("kappa on the balanced table {k0:?}"))?;
    let same = [GroundedButWrong, Ambiguous, UngroundedHallucination, Ambiguous];
    let k1 = cohens_kappa(&same, &same).map_err(|e| e.to_string())?.kappa;
    ensure(k1 == Some(1.0), || format!("kappa on identical labels {k1:?}"))?;

    Ok(format!(
        "max |p_exact - p_mc| = {worst:.4}, coverage = {coverage:.3}, rho = 0.8, kappa = 0 and 1"
    ))
}

fn determinism() -> Check {
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = common::copy_fixture(dir.path());
        let summary = run_all_from_file(&config, RunOptions::default()).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(summary.out_dir.join("report.json")).map_err(|e| e.to_string())?);
    }
    ensure(reports[0] == reports[1], || "report.json differs between runs".into())?;
    Ok(format!("two runs, {} identical bytes", reports[0].len()))
}

fn outcome_strategy() -> impl Strategy<Value = Vec<ExampleOutcome>> {
    let one = (any::<[bool; 3]>(), any::<bool>(), any::<bool>(), 0u8..=1);
    prop::collection::vec(one, 1..120).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (correct, changed, changed_blank, nvc))| {
                let changed = changed || correct[0] != correct[2];
                ExampleOutcome::from_flags(format!("b/{i}"), "m", "b", correct, changed, changed_blank, nvc)
            })
            .collect()
    })
}

fn invariant_suite() -> Check {
    let cases = 1000;
    let mut runner = TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner
        .run(&outcome_strategy(), |outcomes| {
            let g = aggregate_grounding(&outcomes).unwrap();
            let h = aggregate_hallucination(&outcomes).unwrap();
            prop_assert!(((g.vbr - g.vhr) - g.vrs).abs() <= RATE_EPS);
            prop_assert!(g.vbr + g.vhr <= g.is_rate + RATE_EPS);
            prop_assert!(h.hvrr <= h.nvcr.min(1.0 - g.is_rate) + RATE_EPS);
            prop_assert!(g.check_identities().is_ok());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} generated outcome sets"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("text-shortcut agent, 100 items", text_shortcut_agent),
        ("fully-grounded agent, 100 items", fully_grounded_agent),
        ("hallucinating-shortcut agent, 100 items", hallucinating_shortcut_agent),
        ("per-benchmark VRS/BD reconstruction", table_reconstruction),
        ("conditional probability identity", conditional_probability_identity),
        ("cross-benchmark averaging", cross_benchmark_averaging),
        ("fixture replay", fixture_replay),
        ("statistics oracles", statistics_oracles),
        ("determinism of report.json", determinism),
        ("metric invariants", invariant_suite),
    ];
    let mut failed = Vec::new();
    let stdout = std::io::stdout();
    for (name, check) in criteria {
        let line = match check() {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(why) => {
                failed.push(name);
                format!("FAIL  {name}: {why}")
            }
        };
        let mut out = stdout.lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
