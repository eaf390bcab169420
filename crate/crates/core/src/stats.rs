//! Resampling statistics, paired tests, rank correlation and agreement.
//!
//! Every random procedure takes an explicit seed. Replicate `r` draws from
//! `ChaCha8Rng::seed_from_u64(seed)` on stream `r`, so parallel and serial
//! runs produce the same numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Display;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::io::hash64;
use crate::metrics::{group_outcomes, ExampleOutcome, Metric, ALL_BENCHMARKS};

pub use crate::audit::select_high_risk;

/// Largest sample size tested by full sign enumeration.
pub const EXACT_PERMUTATION_MAX_N: usize = 20;
pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} observations")]
    TooFew(usize),
    #[error("confidence level {0} is outside (0, 1)")]
    BadLevel(f64),
    #[error("replicate count must be positive")]
    NoReplicates,
    #[error("exact enumeration needs n <= {EXACT_PERMUTATION_MAX_N}, got {0}")]
    TooLargeForExact(usize),
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean computed as an offset from the first value, so a constant sample
/// returns that constant exactly.
fn mean(values: &[f64]) -> f64 {
    let base = values[0];
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl ConfidenceInterval {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

/// Linear interpolation between order statistics of a sorted sample.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let below = h.floor() as usize;
    let above = h.ceil() as usize;
    sorted[below] + (h - below as f64) * (sorted[above] - sorted[below])
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(
    values: &[f64],
    level: f64,
    replicates: usize,
    seed: u64,
) -> Result<ConfidenceInterval, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    if replicates == 0 {
        return Err(StatsError::NoReplicates);
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let sample: Vec<f64> = (0..n).map(|_| values[rng.random_range(0..n)]).collect();
            mean(&sample)
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    let point = mean(values);
    // The percentile interval of a mean practically always covers the
    // sample mean; the clamp only matters for tiny, very skewed samples.
    Ok(ConfidenceInterval {
        point,
        lo: quantile(&means, alpha / 2.0).min(point),
        hi: quantile(&means, 1.0 - alpha / 2.0).max(point),
        level,
        replicates,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    PermutationExact,
    PermutationMc,
    PairedT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Zero-variance paired differences; p follows the documented convention.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationMode {
    /// Exact for n <= 20, Monte Carlo otherwise.
    Auto,
    Exact,
    MonteCarlo,
}

fn tolerance(diffs: &[f64]) -> f64 {
    1e-9 * (1.0 + diffs.iter().map(|d| d.abs()).sum::<f64>())
}

/// Two-sided sign-flip permutation test of mean(diffs) = 0.
pub fn permutation_test_zero(diffs: &[f64], replicates: usize, seed: u64) -> Result<TestResult, StatsError> {
    permutation_test(diffs, PermutationMode::Auto, replicates, seed)
}

pub fn permutation_test(
    diffs: &[f64],
    mode: PermutationMode,
    replicates: usize,
    seed: u64,
) -> Result<TestResult, StatsError> {
    if diffs.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = diffs.len();
    let observed: f64 = diffs.iter().sum();
    let threshold = observed.abs() - tolerance(diffs);
    let exact = match mode {
        PermutationMode::Auto => n <= EXACT_PERMUTATION_MAX_N,
        PermutationMode::Exact if n > EXACT_PERMUTATION_MAX_N => return Err(StatsError::TooLargeForExact(n)),
        PermutationMode::Exact => true,
        PermutationMode::MonteCarlo => false,
    };
    if exact {
        // Gray-code walk: each step flips one sign and updates the sum.
        let mut signs = vec![1.0f64; n];
        let mut sum = observed;
        let mut extreme: u64 = u64::from(sum.abs() >= threshold);
        let total: u64 = 1 << n;
        for step in 1..total {
            let j = step.trailing_zeros() as usize;
            sum -= 2.0 * signs[j] * diffs[j];
            signs[j] = -signs[j];
            if sum.abs() >= threshold {
                extreme += 1;
            }
        }
        return Ok(TestResult {
            statistic: observed / n as f64,
            p_value: extreme as f64 / total as f64,
            method: TestMethod::PermutationExact,
            n,
            replicates: None,
            seed: None,
            degenerate: false,
        });
    }
    if replicates == 0 {
        return Err(StatsError::NoReplicates);
    }
    let extreme: usize = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let flipped: f64 = diffs
                .iter()
                .map(|&d| if rng.random::<bool>() { d } else { -d })
                .sum();
            usize::from(flipped.abs() >= threshold)
        })
        .sum();
    Ok(TestResult {
        statistic: observed / n as f64,
        p_value: (extreme + 1) as f64 / (replicates + 1) as f64,
        method: TestMethod::PermutationMc,
        n,
        replicates: Some(replicates),
        seed: Some(seed),
        degenerate: false,
    })
}

/// Paired two-sided t-test on `x - y` with n - 1 degrees of freedom.
///
/// Zero-variance differences are flagged `degenerate`: p = 1 when the mean
/// difference is zero, p = 0 with an infinite statistic otherwise.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFew(2));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let m = mean(&diffs);
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let result = |statistic: f64, p_value: f64, degenerate: bool| TestResult {
        statistic,
        p_value,
        method: TestMethod::PairedT,
        n,
        replicates: None,
        seed: None,
        degenerate,
    };
    if var == 0.0 {
        return Ok(if m == 0.0 {
            result(0.0, 1.0, true)
        } else {
            result(m.signum() * f64::INFINITY, 0.0, true)
        });
    }
    let t = m / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(result(t, p, false))
}

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho, or `None` when either input is constant.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew(2));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    /// `None` when expected agreement is 1 (both raters constant and equal).
    pub kappa: Option<f64>,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub label_set: Vec<String>,
    pub n: usize,
}

/// Two-rater Cohen's kappa over the labels that occur in either list.
pub fn cohens_kappa<L: Ord + Clone + Display>(a: &[L], b: &[L]) -> Result<AgreementResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = a.len() as f64;
    let labels: BTreeSet<&L> = a.iter().chain(b).collect();
    let count = |list: &[L], label: &L| list.iter().filter(|x| *x == label).count() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let expected: f64 = labels.iter().map(|l| (count(a, l) / n) * (count(b, l) / n)).sum();
    let kappa = (expected < 1.0).then(|| (observed - expected) / (1.0 - expected));
    Ok(AgreementResult {
        kappa,
        observed_agreement: observed,
        expected_agreement: expected,
        label_set: labels.into_iter().map(|l| l.to_string()).collect(),
        n: a.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub replicates: usize,
    pub level: f64,
    pub bootstrap_seed: u64,
    pub permutation_seed: u64,
    pub permutation_replicates: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            replicates: DEFAULT_REPLICATES,
            level: DEFAULT_LEVEL,
            bootstrap_seed: 0,
            permutation_seed: 0,
            permutation_replicates: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub model_id: String,
    pub benchmark_id: String,
    pub metric: Metric,
    pub ci: ConfidenceInterval,
    /// Sign-flip test against zero; only for paired-difference metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<TestResult>,
    /// The interval excludes zero.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub benchmark_id: String,
    pub metric: Metric,
    pub model_a: String,
    pub model_b: String,
    pub test: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub run_id: String,
    pub config: StatsConfig,
    pub metrics: Vec<MetricStats>,
    pub pairwise: Vec<PairwiseTest>,
}

fn derived_seed(seed: u64, parts: &[&str]) -> u64 {
    hash64(format!("{seed}:{}", parts.join(":")).as_bytes())
}

/// Bootstrap CIs for every (model, benchmark, metric), permutation tests
/// for VRS/BD, and paired t-tests between models on the same items.
///
/// Per-model rows over all benchmarks use the pooled per-example values.
pub fn compute_stats(
    outcomes: &[ExampleOutcome],
    metrics: &[Metric],
    model_order: &[String],
    config: &StatsConfig,
    run_id: &str,
) -> Result<StatsReport, StatsError> {
    let mut groups: Vec<((String, String), Vec<ExampleOutcome>)> = group_outcomes(outcomes).into_iter().collect();
    let mut models: Vec<String> = model_order.to_vec();
    for ((m, _), _) in &groups {
        if !models.contains(m) {
            models.push(m.clone());
        }
    }
    for model in &models {
        let pooled: Vec<ExampleOutcome> = outcomes.iter().filter(|o| &o.model_id == model).cloned().collect();
        if !pooled.is_empty() {
            groups.push(((model.clone(), ALL_BENCHMARKS.to_string()), pooled));
        }
    }

    let mut rows = Vec::new();
    for ((model_id, benchmark_id), group) in &groups {
        for &metric in metrics {
            let values: Vec<f64> = group.iter().map(|o| o.value(metric)).collect();
            let seed = derived_seed(config.bootstrap_seed, &[model_id, benchmark_id, metric.as_str()]);
            let ci = bootstrap_ci(&values, config.level, config.replicates, seed)?;
            let permutation = if metric.is_difference() {
                let seed = derived_seed(config.permutation_seed, &[model_id, benchmark_id, metric.as_str()]);
                Some(permutation_test_zero(&values, config.permutation_replicates, seed)?)
            } else {
                None
            };
            rows.push(MetricStats {
                model_id: model_id.clone(),
                benchmark_id: benchmark_id.clone(),
                metric,
                significant: ci.excludes_zero(),
                ci,
                permutation,
            });
        }
    }

    let mut pairwise = Vec::new();
    let mut by_benchmark: BTreeMap<&str, HashMap<&str, HashMap<&str, &ExampleOutcome>>> = BTreeMap::new();
    for o in outcomes {
        by_benchmark
            .entry(&o.benchmark_id)
            .or_default()
            .entry(&o.model_id)
            .or_default()
            .insert(&o.item_id, o);
    }
    for (benchmark_id, per_model) in &by_benchmark {
        for (i, a) in models.iter().enumerate() {
            for b in &models[i + 1..] {
                let (Some(xa), Some(xb)) = (per_model.get(a.as_str()), per_model.get(b.as_str())) else {
                    continue;
                };
                let mut shared: Vec<&&str> = xa.keys().filter(|k| xb.contains_key(**k)).collect();
                shared.sort();
                if shared.len() < 2 {
                    continue;
                }
                for &metric in metrics {
                    let x: Vec<f64> = shared.iter().map(|k| xa[**k].value(metric)).collect();
                    let y: Vec<f64> = shared.iter().map(|k| xb[**k].value(metric)).collect();
                    pairwise.push(PairwiseTest {
                        benchmark_id: benchmark_id.to_string(),
                        metric,
                        model_a: a.clone(),
                        model_b: b.clone(),
                        test: paired_t_test(&x, &y)?,
                    });
                }
            }
        }
    }

    Ok(StatsReport {
        run_id: run_id.to_string(),
        config: config.clone(),
        metrics: rows,
        pairwise,
    })
}
