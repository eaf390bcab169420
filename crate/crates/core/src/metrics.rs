//! Per-example outcomes and the grounding and hallucination aggregates.
//!
//! Rates are stored alongside the integer counts they come from, so the
//! structural identities (`vb - vh = correct_real - correct_shuffle` and
//! friends) can be checked exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::claims::{NvcRecord, NvcResult};
use crate::corpus::EvaluationItem;
use crate::inference::Condition;
use crate::parsing::{answers_equal, Normalizer, ResponseRecord};

/// Tolerance for float comparisons of identities that hold exactly on counts.
pub const RATE_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty outcome list")]
    Empty,
    #[error("outcomes mix groups: {0}")]
    MixedGroups(String),
    #[error("item {item_id} model {model_id}: missing {condition} response")]
    MissingCondition {
        item_id: String,
        model_id: String,
        condition: Condition,
    },
    #[error("item {item_id} model {model_id}: duplicate {condition} response")]
    DuplicateCondition {
        item_id: String,
        model_id: String,
        condition: Condition,
    },
    #[error("item {item_id} model {model_id}: records disagree on item or model")]
    Mismatched { item_id: String, model_id: String },
    #[error("item {item_id} model {model_id}: no NVC result for the real-image rationale")]
    MissingNvc { item_id: String, model_id: String },
    #[error("response for unknown item {0}")]
    UnknownItem(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub item_id: String,
    pub model_id: String,
    pub benchmark_id: String,
    pub correct_real: bool,
    pub correct_blank: bool,
    pub correct_shuffle: bool,
    /// Answer differs between real and shuffled image.
    pub changed_shuffle: bool,
    /// Answer differs between real and blank image (diagnostic only).
    pub changed_blank: bool,
    pub nvc: u8,
    pub hvr: bool,
    pub vb: bool,
    pub vh: bool,
}

impl ExampleOutcome {
    /// Builds an outcome from the three correctness verdicts, the two
    /// answer-change flags and the NVC bit, deriving hvr/vb/vh.
    #[allow(clippy::too_many_arguments)]
    pub fn from_flags(
        item_id: impl Into<String>,
        model_id: impl Into<String>,
        benchmark_id: impl Into<String>,
        correct: [bool; 3],
        changed_shuffle: bool,
        changed_blank: bool,
        nvc: u8,
    ) -> Self {
        let [correct_real, correct_blank, correct_shuffle] = correct;
        ExampleOutcome {
            item_id: item_id.into(),
            model_id: model_id.into(),
            benchmark_id: benchmark_id.into(),
            correct_real,
            correct_blank,
            correct_shuffle,
            changed_shuffle,
            changed_blank,
            nvc,
            hvr: nvc == 1 && !changed_shuffle,
            vb: correct_real && !correct_shuffle,
            vh: !correct_real && correct_shuffle,
        }
    }

    /// Checks the structural invariants of a single outcome.
    pub fn check(&self) -> Result<(), String> {
        if self.hvr && (self.nvc != 1 || self.changed_shuffle) {
            return Err(format!("{}: hvr without nvc=1 and unchanged answer", self.item_id));
        }
        if self.vb && self.vh {
            return Err(format!("{}: vb and vh both set", self.item_id));
        }
        if !self.changed_shuffle && self.correct_real != self.correct_shuffle {
            return Err(format!("{}: unchanged answer with changed correctness", self.item_id));
        }
        Ok(())
    }

    /// Per-example contribution to `metric`; its mean is the metric.
    pub fn value(&self, metric: Metric) -> f64 {
        let b = |x: bool| f64::from(u8::from(x));
        match metric {
            Metric::AccReal => b(self.correct_real),
            Metric::AccBlank => b(self.correct_blank),
            Metric::AccShuffle => b(self.correct_shuffle),
            Metric::Vrs => b(self.correct_real) - b(self.correct_shuffle),
            Metric::Bd => b(self.correct_real) - b(self.correct_blank),
            Metric::Is => b(self.changed_shuffle),
            Metric::Vbr => b(self.vb),
            Metric::Vhr => b(self.vh),
            Metric::Nvcr => f64::from(self.nvc),
            Metric::Hvrr => b(self.hvr),
        }
    }
}

/// Metrics that are means of a per-example value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AccReal,
    AccBlank,
    AccShuffle,
    Vrs,
    Bd,
    Is,
    Vbr,
    Vhr,
    Nvcr,
    Hvrr,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::AccReal,
        Metric::AccBlank,
        Metric::AccShuffle,
        Metric::Vrs,
        Metric::Bd,
        Metric::Is,
        Metric::Vbr,
        Metric::Vhr,
        Metric::Nvcr,
        Metric::Hvrr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AccReal => "acc_real",
            Metric::AccBlank => "acc_blank",
            Metric::AccShuffle => "acc_shuffle",
            Metric::Vrs => "vrs",
            Metric::Bd => "bd",
            Metric::Is => "is",
            Metric::Vbr => "vbr",
            Metric::Vhr => "vhr",
            Metric::Nvcr => "nvcr",
            Metric::Hvrr => "hvrr",
        }
    }

    /// Paired-difference metrics are tested against zero.
    pub fn is_difference(self) -> bool {
        matches!(self, Metric::Vrs | Metric::Bd)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s || (s == "is_rate" && *m == Metric::Is))
            .ok_or_else(|| format!("unknown metric \"{s}\""))
    }
}

fn same_answer(a: &ResponseRecord, b: &ResponseRecord) -> bool {
    match (a.failed, b.failed) {
        (true, true) => true,
        (false, false) => answers_equal(&a.answer, &b.answer),
        _ => false,
    }
}

/// Outcome for one (item, model) from its three parsed responses and the
/// NVC result of the real-image rationale.
pub fn example_outcome(
    records: &[&ResponseRecord],
    item: &EvaluationItem,
    nvc: &NvcResult,
    normalizer: &Normalizer,
) -> Result<ExampleOutcome, MetricsError> {
    let item_id = item.item_id();
    let model_id = records.first().map(|r| r.model_id.clone()).unwrap_or_default();
    let mut by_condition: [Option<&ResponseRecord>; 3] = [None; 3];
    for record in records {
        if record.item_id != item_id || record.model_id != model_id {
            return Err(MetricsError::Mismatched { item_id, model_id });
        }
        let slot = &mut by_condition[record.condition as usize];
        if slot.is_some() {
            return Err(MetricsError::DuplicateCondition {
                item_id,
                model_id,
                condition: record.condition,
            });
        }
        *slot = Some(record);
    }
    let mut found = Vec::with_capacity(3);
    for condition in Condition::ALL {
        match by_condition[condition as usize] {
            Some(record) => found.push(record),
            None => {
                return Err(MetricsError::MissingCondition {
                    item_id,
                    model_id,
                    condition,
                })
            }
        }
    }
    let (real, blank, shuffle) = (found[0], found[1], found[2]);
    let options = item.base.answer_options.as_deref();
    let correct = |r: &ResponseRecord| !r.failed && normalizer.is_correct(&r.answer, &item.base.gold_answer, options);
    Ok(ExampleOutcome::from_flags(
        item_id,
        model_id,
        item.base.benchmark_id.clone(),
        [correct(real), correct(blank), correct(shuffle)],
        !same_answer(real, shuffle),
        !same_answer(real, blank),
        if real.failed { 0 } else { nvc.nvc },
    ))
}

/// Scores every (model, item) group. Output is sorted by (model, item).
pub fn score_records(
    items: &[EvaluationItem],
    records: &[ResponseRecord],
    nvc: &[NvcRecord],
    normalizer: &Normalizer,
) -> Result<Vec<ExampleOutcome>, MetricsError> {
    let by_id: HashMap<String, &EvaluationItem> = items.iter().map(|i| (i.item_id(), i)).collect();
    let mut groups: BTreeMap<(&str, &str), Vec<&ResponseRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry((&record.model_id, &record.item_id))
            .or_default()
            .push(record);
    }
    let real_nvc: HashMap<(&str, &str), &NvcResult> = nvc
        .iter()
        .filter(|r| r.condition == Condition::Real)
        .map(|r| ((r.model_id.as_str(), r.item_id.as_str()), &r.result))
        .collect();
    let mut outcomes = Vec::with_capacity(groups.len());
    for ((model_id, item_id), group) in groups {
        let item = by_id
            .get(item_id)
            .ok_or_else(|| MetricsError::UnknownItem(item_id.to_string()))?;
        let nvc = real_nvc
            .get(&(model_id, item_id))
            .ok_or_else(|| MetricsError::MissingNvc {
                item_id: item_id.to_string(),
                model_id: model_id.to_string(),
            })?;
        outcomes.push(example_outcome(&group, item, nvc, normalizer)?);
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingCounts {
    pub n: usize,
    pub correct_real: usize,
    pub correct_blank: usize,
    pub correct_shuffle: usize,
    pub changed_shuffle: usize,
    pub changed_blank: usize,
    pub vb: usize,
    pub vh: usize,
}

impl GroundingCounts {
    fn add(&mut self, other: &GroundingCounts) {
        self.n += other.n;
        self.correct_real += other.correct_real;
        self.correct_blank += other.correct_blank;
        self.correct_shuffle += other.correct_shuffle;
        self.changed_shuffle += other.changed_shuffle;
        self.changed_blank += other.changed_blank;
        self.vb += other.vb;
        self.vh += other.vh;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub acc_real: f64,
    pub acc_blank: f64,
    pub acc_shuffle: f64,
    pub vrs: f64,
    pub bd: f64,
    pub is_rate: f64,
    pub vbr: f64,
    pub vhr: f64,
    /// P[a_real != a_blank]; a diagnostic, never reported as IS.
    pub blank_sensitivity: f64,
    pub n: usize,
    pub counts: GroundingCounts,
}

impl GroundingMetrics {
    pub fn from_counts(counts: GroundingCounts) -> Self {
        let n = counts.n as f64;
        let rate = |k: usize| k as f64 / n;
        let acc_real = rate(counts.correct_real);
        let acc_blank = rate(counts.correct_blank);
        let acc_shuffle = rate(counts.correct_shuffle);
        GroundingMetrics {
            acc_real,
            acc_blank,
            acc_shuffle,
            vrs: acc_real - acc_shuffle,
            bd: acc_real - acc_blank,
            is_rate: rate(counts.changed_shuffle),
            vbr: rate(counts.vb),
            vhr: rate(counts.vh),
            blank_sensitivity: rate(counts.changed_blank),
            n: counts.n,
            counts,
        }
    }

    /// Verifies the decomposition identity and the IS bound, exactly on
    /// counts and to [`RATE_EPS`] on rates.
    pub fn check_identities(&self) -> Result<(), String> {
        let c = &self.counts;
        let lhs = c.vb as i64 - c.vh as i64;
        let rhs = c.correct_real as i64 - c.correct_shuffle as i64;
        if c.n > 0 && lhs != rhs {
            return Err(format!("vb - vh = {lhs} but correct_real - correct_shuffle = {rhs}"));
        }
        if c.n > 0 && c.vb + c.vh > c.changed_shuffle {
            return Err(format!("vb + vh = {} exceeds changed = {}", c.vb + c.vh, c.changed_shuffle));
        }
        if (self.vbr - self.vhr - self.vrs).abs() > RATE_EPS {
            return Err(format!("vbr - vhr = {} but vrs = {}", self.vbr - self.vhr, self.vrs));
        }
        if self.vbr + self.vhr > self.is_rate + RATE_EPS {
            return Err(format!("vbr + vhr = {} exceeds is = {}", self.vbr + self.vhr, self.is_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationCounts {
    pub n: usize,
    pub nvc: usize,
    pub hvr: usize,
    /// Unchanged answers under shuffle, kept for the HVRR bound.
    pub unchanged_shuffle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationMetrics {
    pub nvcr: f64,
    /// Joint probability P[NVC = 1 and a_real = a_shuffle].
    pub hvrr: f64,
    /// hvrr / nvcr; `None` (serialized as null) when nvcr = 0.
    pub cond_prob: Option<f64>,
    pub n: usize,
    pub counts: HallucinationCounts,
}

impl HallucinationMetrics {
    pub fn from_counts(counts: HallucinationCounts) -> Self {
        let n = counts.n as f64;
        HallucinationMetrics {
            nvcr: counts.nvc as f64 / n,
            hvrr: counts.hvr as f64 / n,
            cond_prob: (counts.nvc > 0).then(|| counts.hvr as f64 / counts.nvc as f64),
            n: counts.n,
            counts,
        }
    }

    /// Builds from printed rates alone. Counts are rounded from the rates.
    pub fn from_rates(nvcr: f64, hvrr: f64, n: usize) -> Self {
        let k = |r: f64| (r * n as f64).round() as usize;
        HallucinationMetrics {
            nvcr,
            hvrr,
            cond_prob: cond_prob(hvrr, nvcr),
            n,
            counts: HallucinationCounts {
                n,
                nvc: k(nvcr),
                hvr: k(hvrr),
                unchanged_shuffle: 0,
            },
        }
    }
}

/// hvrr / nvcr, undefined when nvcr is zero.
pub fn cond_prob(hvrr: f64, nvcr: f64) -> Option<f64> {
    (nvcr > 0.0).then(|| hvrr / nvcr)
}

fn check_single_group(outcomes: &[ExampleOutcome]) -> Result<(), MetricsError> {
    let first = outcomes.first().ok_or(MetricsError::Empty)?;
    if let Some(other) = outcomes
        .iter()
        .find(|o| o.model_id != first.model_id || o.benchmark_id != first.benchmark_id)
    {
        return Err(MetricsError::MixedGroups(format!(
            "{}/{} and {}/{}",
            first.model_id, first.benchmark_id, other.model_id, other.benchmark_id
        )));
    }
    Ok(())
}

pub fn grounding_counts(outcomes: &[ExampleOutcome]) -> GroundingCounts {
    let count = |f: fn(&ExampleOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    GroundingCounts {
        n: outcomes.len(),
        correct_real: count(|o| o.correct_real),
        correct_blank: count(|o| o.correct_blank),
        correct_shuffle: count(|o| o.correct_shuffle),
        changed_shuffle: count(|o| o.changed_shuffle),
        changed_blank: count(|o| o.changed_blank),
        vb: count(|o| o.vb),
        vh: count(|o| o.vh),
    }
}

/// Grounding metrics of one (model, benchmark) group.
pub fn aggregate_grounding(outcomes: &[ExampleOutcome]) -> Result<GroundingMetrics, MetricsError> {
    check_single_group(outcomes)?;
    Ok(GroundingMetrics::from_counts(grounding_counts(outcomes)))
}

/// Hallucination metrics of one (model, benchmark) group.
pub fn aggregate_hallucination(outcomes: &[ExampleOutcome]) -> Result<HallucinationMetrics, MetricsError> {
    check_single_group(outcomes)?;
    Ok(HallucinationMetrics::from_counts(HallucinationCounts {
        n: outcomes.len(),
        nvc: outcomes.iter().filter(|o| o.nvc == 1).count(),
        hvr: outcomes.iter().filter(|o| o.hvr).count(),
        unchanged_shuffle: outcomes.iter().filter(|o| !o.changed_shuffle).count(),
    }))
}

fn weights(ns: &[usize]) -> Vec<f64> {
    let total: usize = ns.iter().sum();
    if ns.windows(2).all(|w| w[0] == w[1]) {
        vec![1.0 / ns.len() as f64; ns.len()]
    } else {
        log::warn!("averaging groups of unequal size {ns:?}; weighting by n");
        ns.iter().map(|&n| n as f64 / total as f64).collect()
    }
}

fn weighted(values: impl Iterator<Item = f64>, weights: &[f64]) -> f64 {
    values.zip(weights).map(|(v, w)| v * w).sum()
}

/// Mean over benchmarks: unweighted for equal n, weighted by n otherwise.
pub fn cross_benchmark_grounding(groups: &[GroundingMetrics]) -> Result<GroundingMetrics, MetricsError> {
    if groups.is_empty() {
        return Err(MetricsError::Empty);
    }
    if groups.len() == 1 {
        return Ok(groups[0].clone());
    }
    let w = weights(&groups.iter().map(|g| g.n).collect::<Vec<_>>());
    let mean = |f: fn(&GroundingMetrics) -> f64| weighted(groups.iter().map(f), &w);
    let mut counts = GroundingCounts::default();
    for g in groups {
        counts.add(&g.counts);
    }
    let acc_real = mean(|g| g.acc_real);
    let acc_blank = mean(|g| g.acc_blank);
    let acc_shuffle = mean(|g| g.acc_shuffle);
    Ok(GroundingMetrics {
        acc_real,
        acc_blank,
        acc_shuffle,
        vrs: mean(|g| g.vrs),
        bd: mean(|g| g.bd),
        is_rate: mean(|g| g.is_rate),
        vbr: mean(|g| g.vbr),
        vhr: mean(|g| g.vhr),
        blank_sensitivity: mean(|g| g.blank_sensitivity),
        n: counts.n,
        counts,
    })
}

/// Mean over benchmarks. `cond_prob` is the mean of the groups where it is
/// defined, not the ratio of the averaged rates.
pub fn cross_benchmark_hallucination(
    groups: &[HallucinationMetrics],
) -> Result<HallucinationMetrics, MetricsError> {
    if groups.is_empty() {
        return Err(MetricsError::Empty);
    }
    if groups.len() == 1 {
        return Ok(groups[0].clone());
    }
    let w = weights(&groups.iter().map(|g| g.n).collect::<Vec<_>>());
    let defined: Vec<(f64, f64)> = groups
        .iter()
        .zip(&w)
        .filter_map(|(g, &wi)| g.cond_prob.map(|c| (c, wi)))
        .collect();
    let total_w: f64 = defined.iter().map(|(_, wi)| wi).sum();
    let cond_prob = (!defined.is_empty()).then(|| defined.iter().map(|(c, wi)| c * wi).sum::<f64>() / total_w);
    let mut counts = HallucinationCounts::default();
    for g in groups {
        counts.n += g.counts.n;
        counts.nvc += g.counts.nvc;
        counts.hvr += g.counts.hvr;
        counts.unchanged_shuffle += g.counts.unchanged_shuffle;
    }
    Ok(HallucinationMetrics {
        nvcr: weighted(groups.iter().map(|g| g.nvcr), &w),
        hvrr: weighted(groups.iter().map(|g| g.hvrr), &w),
        cond_prob,
        n: counts.n,
        counts,
    })
}

/// Outcomes grouped by (model_id, benchmark_id).
pub fn group_outcomes(outcomes: &[ExampleOutcome]) -> BTreeMap<(String, String), Vec<ExampleOutcome>> {
    let mut groups: BTreeMap<(String, String), Vec<ExampleOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups
            .entry((o.model_id.clone(), o.benchmark_id.clone()))
            .or_default()
            .push(o.clone());
    }
    groups
}

/// Metrics of one (model, benchmark) group, or of a model across
/// benchmarks when `benchmark_id` is `"all"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub model_id: String,
    pub benchmark_id: String,
    pub grounding: GroundingMetrics,
    pub hallucination: HallucinationMetrics,
}

pub const ALL_BENCHMARKS: &str = "all";

/// The metrics artifact: per-group and per-model results plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub lexicon_version: String,
    pub normalization_version: String,
    pub seeds: BTreeMap<String, u64>,
    /// Model ids in configured order.
    pub models: Vec<String>,
    /// Configured benchmark ids, including any that produced no outcomes.
    pub benchmarks: Vec<String>,
    pub per_benchmark: Vec<GroupMetrics>,
    pub overall: Vec<GroupMetrics>,
}

/// Aggregates every group and the per-model cross-benchmark means.
/// `model_order` fixes the order of `overall`; models not listed follow
/// alphabetically.
pub fn compute_metrics(
    outcomes: &[ExampleOutcome],
    model_order: &[String],
) -> Result<(Vec<GroupMetrics>, Vec<GroupMetrics>), MetricsError> {
    let mut per_benchmark = Vec::new();
    for ((model_id, benchmark_id), group) in group_outcomes(outcomes) {
        per_benchmark.push(GroupMetrics {
            grounding: aggregate_grounding(&group)?,
            hallucination: aggregate_hallucination(&group)?,
            model_id,
            benchmark_id,
        });
    }
    let mut models: Vec<String> = model_order.to_vec();
    for g in &per_benchmark {
        if !models.contains(&g.model_id) {
            models.push(g.model_id.clone());
        }
    }
    let mut overall = Vec::new();
    for model in &models {
        let groups: Vec<&GroupMetrics> = per_benchmark.iter().filter(|g| &g.model_id == model).collect();
        if groups.is_empty() {
            continue;
        }
        let grounding: Vec<GroundingMetrics> = groups.iter().map(|g| g.grounding.clone()).collect();
        let hallucination: Vec<HallucinationMetrics> = groups.iter().map(|g| g.hallucination.clone()).collect();
        overall.push(GroupMetrics {
            model_id: model.clone(),
            benchmark_id: ALL_BENCHMARKS.into(),
            grounding: cross_benchmark_grounding(&grounding)?,
            hallucination: cross_benchmark_hallucination(&hallucination)?,
        });
    }
    Ok((per_benchmark, overall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(i: usize, correct: [bool; 3], changed: bool, nvc: u8) -> ExampleOutcome {
        ExampleOutcome::from_flags(format!("b/q{i}"), "m", "b", correct, changed, changed, nvc)
    }

    #[test]
    fn definitions_on_single_outcomes() {
        let o = outcome(0, [true, true, false], true, 0);
        assert!(o.vb && !o.vh && o.changed_shuffle);
        let o = outcome(0, [true, true, true], false, 1);
        assert!(o.hvr);
        assert!(o.check().is_ok());
    }

    #[test]
    fn four_outcome_hand_example() {
        // Patterns (real, blank, shuffle): 110, 101, 000, 111.
        let patterns = [[true, true, false], [true, false, true], [false, false, false], [true, true, true]];
        let outcomes: Vec<ExampleOutcome> = patterns
            .iter()
            .enumerate()
            .map(|(i, &p)| outcome(i, p, p[0] != p[2], 0))
            .collect();
        let g = aggregate_grounding(&outcomes).unwrap();
        assert_eq!(g.acc_real, 0.75);
        assert_eq!(g.acc_shuffle, 0.5);
        assert_eq!(g.vrs, 0.25);
        assert_eq!(g.bd, 0.25);
        assert_eq!(g.vbr, 0.25);
        assert_eq!(g.vhr, 0.0);
        g.check_identities().unwrap();
    }

    #[test]
    fn printed_rates_give_printed_differences() {
        let g = GroundingMetrics::from_counts(GroundingCounts {
            n: 100,
            correct_real: 62,
            correct_blank: 48,
            correct_shuffle: 62,
            ..Default::default()
        });
        assert!((g.vrs - 0.0).abs() < 1e-12);
        assert!((g.bd - 0.14).abs() < 1e-12);
        let g = GroundingMetrics::from_counts(GroundingCounts {
            n: 100,
            correct_real: 56,
            correct_shuffle: 65,
            ..Default::default()
        });
        assert!((g.vrs + 0.09).abs() < 1e-12);
    }

    #[test]
    fn conditional_probability() {
        let h = HallucinationMetrics::from_rates(0.80, 0.51, 100);
        assert!((h.cond_prob.unwrap() - 0.6375).abs() < 1e-12);
        let h = HallucinationMetrics::from_rates(0.69, 0.48, 100);
        assert!((h.cond_prob.unwrap() - 0.695_652).abs() < 1e-6);
        let none: Vec<ExampleOutcome> = (0..5).map(|i| outcome(i, [true; 3], false, 0)).collect();
        let h = aggregate_hallucination(&none).unwrap();
        assert_eq!((h.nvcr, h.hvrr, h.cond_prob), (0.0, 0.0, None));
        assert_eq!(serde_json::to_value(&h).unwrap()["cond_prob"], serde_json::Value::Null);
    }

    #[test]
    fn empty_and_mixed_inputs_fail() {
        assert_eq!(aggregate_grounding(&[]), Err(MetricsError::Empty));
        let mut other = outcome(1, [true; 3], false, 0);
        other.model_id = "m2".into();
        let mixed = [outcome(0, [true; 3], false, 0), other];
        assert!(matches!(aggregate_hallucination(&mixed), Err(MetricsError::MixedGroups(_))));
        assert!(cross_benchmark_grounding(&[]).is_err());
    }

    fn acc_group(acc: f64) -> GroundingMetrics {
        GroundingMetrics::from_counts(GroundingCounts {
            n: 100,
            correct_real: (acc * 100.0).round() as usize,
            ..Default::default()
        })
    }

    #[test]
    fn cross_benchmark_mean_of_equal_groups() {
        let groups: Vec<GroundingMetrics> = [0.62, 0.50, 0.60, 0.54].into_iter().map(acc_group).collect();
        let mean = cross_benchmark_grounding(&groups).unwrap();
        assert!((mean.acc_real - 0.565).abs() < 1e-12);
        assert_eq!(mean.n, 400);
        let single = cross_benchmark_grounding(&groups[..1]).unwrap();
        assert_eq!(single, groups[0]);
    }

    #[test]
    fn unequal_groups_are_weighted_by_n() {
        let a = acc_group(1.0);
        let mut b = GroundingMetrics::from_counts(GroundingCounts { n: 300, ..Default::default() });
        b.acc_real = 0.0;
        let mean = cross_benchmark_grounding(&[a, b]).unwrap();
        assert!((mean.acc_real - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cond_prob_mean_skips_undefined_groups() {
        let groups = [
            HallucinationMetrics::from_rates(0.80, 0.40, 100),
            HallucinationMetrics::from_rates(0.0, 0.0, 100),
            HallucinationMetrics::from_rates(0.50, 0.50, 100),
        ];
        let mean = cross_benchmark_hallucination(&groups).unwrap();
        assert!((mean.cond_prob.unwrap() - 0.75).abs() < 1e-12);
        assert!((mean.nvcr - 1.3 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert_eq!("IS_rate".parse::<Metric>().unwrap(), Metric::Is);
    }

    fn arb_outcome() -> impl Strategy<Value = (bool, bool, bool, bool, bool, u8)> {
        (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>(), 0u8..=1)
    }

    /// A consistent outcome: an unchanged answer keeps its correctness.
    fn build(i: usize, (cr, cb, cs, changed, changed_blank, nvc): (bool, bool, bool, bool, bool, u8)) -> ExampleOutcome {
        let cs = if changed { cs } else { cr };
        ExampleOutcome::from_flags(format!("b/q{i}"), "m", "b", [cr, cb, cs], changed, changed_blank, nvc)
    }

    proptest! {
        #[test]
        fn mean_of_values_matches_aggregate(raw in prop::collection::vec(arb_outcome(), 1..60)) {
            let outcomes: Vec<ExampleOutcome> = raw.into_iter().enumerate().map(|(i, r)| build(i, r)).collect();
            let g = aggregate_grounding(&outcomes).unwrap();
            let h = aggregate_hallucination(&outcomes).unwrap();
            let mean = |m: Metric| outcomes.iter().map(|o| o.value(m)).sum::<f64>() / outcomes.len() as f64;
            prop_assert!((mean(Metric::Vrs) - g.vrs).abs() < 1e-12);
            prop_assert!((mean(Metric::Bd) - g.bd).abs() < 1e-12);
            prop_assert!((mean(Metric::Is) - g.is_rate).abs() < 1e-12);
            prop_assert!((mean(Metric::Hvrr) - h.hvrr).abs() < 1e-12);
            for o in &outcomes {
                prop_assert!(o.check().is_ok());
            }
        }

        #[test]
        fn aggregates_ignore_order(raw in prop::collection::vec(arb_outcome(), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let outcomes: Vec<ExampleOutcome> = raw.into_iter().enumerate().map(|(i, r)| build(i, r)).collect();
            let mut shuffled = outcomes.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate_grounding(&outcomes).unwrap(), aggregate_grounding(&shuffled).unwrap());
            prop_assert_eq!(aggregate_hallucination(&outcomes).unwrap(), aggregate_hallucination(&shuffled).unwrap());
        }
    }
}
