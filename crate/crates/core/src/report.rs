//! Report tables and their JSON, CSV and Markdown exports.
//!
//! `report.json` is the source of truth: it holds full-precision values and
//! the rendered tables. CSV and Markdown are derived from it. Numbers are
//! rounded half away from zero on their decimal representation, after
//! trimming float noise beyond twelve decimals.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::metrics::{GroupMetrics, MetricsReport};
use crate::stats::StatsReport;

/// Cell text for undefined values (an em dash).
pub const UNDEFINED_CELL: &str = "\u{2014}";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row} lacks column \"{key}\"")]
    MissingCell { row: usize, key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFormat {
    Text,
    /// Rate as a whole percentage, `43%`.
    Percent0,
    /// Rate as a percentage with one decimal, `60.9%`.
    Percent1,
    /// Two decimals, `0.62`.
    Decimal2,
    /// Three decimals, `0.127`.
    Decimal3,
    /// Two decimals for differences that may be negative, `-0.09`.
    Signed2,
    /// Three decimals for differences that may be negative.
    Signed3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub key: String,
    pub header: String,
    pub format: CellFormat,
}

fn col(key: &str, header: &str, format: CellFormat) -> Column {
    Column {
        key: key.into(),
        header: header.into(),
        format,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Text(String),
    Number(Option<f64>),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Number(Some(v))
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        Cell::Number(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<Column>,
    pub rows: Vec<BTreeMap<String, Cell>>,
    pub footnotes: Vec<String>,
}

impl ReportTable {
    pub fn new(title: &str, columns: Vec<Column>) -> Self {
        ReportTable {
            title: title.into(),
            columns,
            rows: Vec::new(),
            footnotes: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cells: Vec<(&str, Cell)>) {
        self.rows
            .push(cells.into_iter().map(|(k, v)| (k.to_string(), v)).collect());
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        for (row, cells) in self.rows.iter().enumerate() {
            for c in &self.columns {
                if !cells.contains_key(&c.key) {
                    return Err(ReportError::MissingCell { row, key: c.key.clone() });
                }
            }
        }
        Ok(())
    }

    /// Rendered cell strings, row by row, in column order.
    pub fn rendered(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|cells| {
                self.columns
                    .iter()
                    .map(|c| match cells.get(&c.key) {
                        Some(cell) => format_cell(cell, c.format),
                        None => String::new(),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.title);
        let headers: Vec<&str> = self.columns.iter().map(|c| c.header.as_str()).collect();
        out.push_str(&format!("| {} |\n", headers.join(" | ")));
        let aligns: Vec<&str> = self
            .columns
            .iter()
            .map(|c| if c.format == CellFormat::Text { "---" } else { "---:" })
            .collect();
        out.push_str(&format!("| {} |\n", aligns.join(" | ")));
        for row in self.rendered() {
            let escaped: Vec<String> = row.iter().map(|c| c.replace('|', "\\|")).collect();
            out.push_str(&format!("| {} |\n", escaped.join(" | ")));
        }
        for note in &self.footnotes {
            out.push_str(&format!("\nNote: {note}\n"));
        }
        out
    }
}

/// Rounds the decimal string `digits` (no sign, optional point) to
/// `decimals` places, half away from zero.
fn round_decimal(text: &str, decimals: usize) -> String {
    let (int_part, frac_part) = text.split_once('.').unwrap_or((text, ""));
    let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes()).map(|b| b - b'0').collect();
    let keep = int_part.len() + decimals;
    while digits.len() < keep {
        digits.push(0);
    }
    let round_up = digits.get(keep).is_some_and(|&d| d >= 5);
    digits.truncate(keep);
    let mut int_len = int_part.len();
    if round_up {
        let mut i = keep;
        loop {
            if i == 0 {
                digits.insert(0, 1);
                int_len += 1;
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let as_str = |d: &[u8]| d.iter().map(|x| (x + b'0') as char).collect::<String>();
    let int_str = as_str(&digits[..int_len]);
    let int_str = int_str.trim_start_matches('0');
    let int_str = if int_str.is_empty() { "0" } else { int_str };
    if decimals == 0 {
        int_str.to_string()
    } else {
        format!("{int_str}.{}", as_str(&digits[int_len..]))
    }
}

/// `value * 10^shift` rounded half away from zero to `decimals` places.
pub fn round_half_away(value: f64, shift: usize, decimals: usize) -> String {
    let clean = format!("{:.12}", value.abs());
    let (int_part, frac_part) = clean.split_once('.').unwrap_or((&clean, ""));
    let mut frac = frac_part.to_string();
    while frac.len() < shift {
        frac.push('0');
    }
    let shifted = format!("{int_part}{}.{}", &frac[..shift], &frac[shift..]);
    let rounded = round_decimal(&shifted, decimals);
    let is_zero = rounded.bytes().all(|b| b == b'0' || b == b'.');
    if value < 0.0 && !is_zero {
        format!("-{rounded}")
    } else {
        rounded
    }
}

pub fn format_value(value: f64, format: CellFormat) -> String {
    match format {
        CellFormat::Percent0 => format!("{}%", round_half_away(value, 2, 0)),
        CellFormat::Percent1 => format!("{}%", round_half_away(value, 2, 1)),
        CellFormat::Decimal2 | CellFormat::Signed2 => round_half_away(value, 0, 2),
        CellFormat::Decimal3 | CellFormat::Signed3 => round_half_away(value, 0, 3),
        CellFormat::Text => value.to_string(),
    }
}

pub fn format_cell(cell: &Cell, format: CellFormat) -> String {
    match cell {
        Cell::Text(s) => s.clone(),
        Cell::Number(None) => UNDEFINED_CELL.to_string(),
        Cell::Number(Some(v)) => format_value(*v, format),
    }
}

/// Per-model means across benchmarks: Acc, VRS, BD, IS, VBR, VHR.
pub fn render_overall(overall: &[GroupMetrics]) -> ReportTable {
    use CellFormat::*;
    let mut table = ReportTable::new(
        "Overall grounding metrics (mean across benchmarks)",
        vec![
            col("model", "Model", Text),
            col("acc", "Acc", Percent1),
            col("vrs", "VRS", Signed3),
            col("bd", "BD", Signed3),
            col("is", "IS", Percent1),
            col("vbr", "VBR", Percent1),
            col("vhr", "VHR", Percent1),
        ],
    );
    for g in overall {
        let m = &g.grounding;
        table.push_row(vec![
            ("model", g.model_id.as_str().into()),
            ("acc", m.acc_real.into()),
            ("vrs", m.vrs.into()),
            ("bd", m.bd.into()),
            ("is", m.is_rate.into()),
            ("vbr", m.vbr.into()),
            ("vhr", m.vhr.into()),
        ]);
    }
    table
}

/// Groups sorted by benchmark id, then by the position of the model in
/// `models` (unlisted models last, alphabetically).
fn ordered<'a>(groups: &'a [GroupMetrics], models: &[String]) -> Vec<&'a GroupMetrics> {
    let rank = |m: &str| models.iter().position(|x| x == m).unwrap_or(usize::MAX);
    let mut sorted: Vec<&GroupMetrics> = groups.iter().collect();
    sorted.sort_by(|a, b| {
        (a.benchmark_id.as_str(), rank(&a.model_id), a.model_id.as_str())
            .cmp(&(b.benchmark_id.as_str(), rank(&b.model_id), b.model_id.as_str()))
    });
    sorted
}

fn empty_benchmark_notes(table: &mut ReportTable, groups: &[GroupMetrics], benchmarks: &[String]) {
    let mut missing: Vec<&String> = benchmarks
        .iter()
        .filter(|b| !groups.iter().any(|g| &g.benchmark_id == *b))
        .collect();
    missing.sort();
    for b in missing {
        table
            .footnotes
            .push(format!("Benchmark {b} has no scored items and is omitted."));
    }
}

/// Per (benchmark, model) accuracies under each condition, VRS, BD and IS.
pub fn render_benchmark(per_benchmark: &[GroupMetrics], models: &[String], benchmarks: &[String]) -> ReportTable {
    use CellFormat::*;
    let mut table = ReportTable::new(
        "Grounding metrics by benchmark",
        vec![
            col("benchmark", "Benchmark", Text),
            col("model", "Model", Text),
            col("acc_real", "Acc (real)", Decimal2),
            col("acc_blank", "Acc (blank)", Decimal2),
            col("acc_shuffle", "Acc (shuffle)", Decimal2),
            col("vrs", "VRS", Signed2),
            col("bd", "BD", Signed2),
            col("is", "IS", Decimal2),
        ],
    );
    for g in ordered(per_benchmark, models) {
        let m = &g.grounding;
        table.push_row(vec![
            ("benchmark", g.benchmark_id.as_str().into()),
            ("model", g.model_id.as_str().into()),
            ("acc_real", m.acc_real.into()),
            ("acc_blank", m.acc_blank.into()),
            ("acc_shuffle", m.acc_shuffle.into()),
            ("vrs", m.vrs.into()),
            ("bd", m.bd.into()),
            ("is", m.is_rate.into()),
        ]);
    }
    empty_benchmark_notes(&mut table, per_benchmark, benchmarks);
    table
}

/// NVCR, HVRR, conditional probability and real-image accuracy. With
/// `per_benchmark` set, rows are per (benchmark, model).
pub fn render_hallucination(groups: &[GroupMetrics], models: &[String], per_benchmark: bool) -> ReportTable {
    use CellFormat::*;
    let mut columns = vec![
        col("model", "Model", Text),
        col("nvcr", "NVCR", Percent0),
        col("hvrr", "HVRR", Percent0),
        col("cond_prob", "Cond. Prob.", Percent1),
        col("acc", "Acc", Percent1),
    ];
    let title = if per_benchmark {
        columns.insert(0, col("benchmark", "Benchmark", Text));
        "Hallucinated visual reasoning by benchmark"
    } else {
        "Hallucinated visual reasoning (mean across benchmarks)"
    };
    let mut table = ReportTable::new(title, columns);
    for g in ordered(groups, models) {
        let h = &g.hallucination;
        let mut row = vec![
            ("model", g.model_id.as_str().into()),
            ("nvcr", h.nvcr.into()),
            ("hvrr", h.hvrr.into()),
            ("cond_prob", h.cond_prob.into()),
            ("acc", g.grounding.acc_real.into()),
        ];
        if per_benchmark {
            row.insert(0, ("benchmark", g.benchmark_id.as_str().into()));
        }
        table.push_row(row);
    }
    if groups.iter().any(|g| g.hallucination.cond_prob.is_none()) {
        table
            .footnotes
            .push(format!("{UNDEFINED_CELL} marks groups without any novel visual claim (NVCR = 0)."));
    }
    if !per_benchmark {
        table.footnotes.push(
            "Cond. Prob. is the mean of the per-benchmark conditional probabilities.".into(),
        );
    }
    table
}

/// Bootstrap intervals and permutation p-values for difference metrics.
pub fn render_significance(stats: &StatsReport, models: &[String]) -> ReportTable {
    use CellFormat::*;
    let mut table = ReportTable::new(
        "Bootstrap confidence intervals",
        vec![
            col("benchmark", "Benchmark", Text),
            col("model", "Model", Text),
            col("metric", "Metric", Text),
            col("estimate", "Estimate", Signed3),
            col("lo", "CI low", Signed3),
            col("hi", "CI high", Signed3),
            col("p", "Permutation p", Decimal3),
            col("significant", "CI excludes 0", Text),
        ],
    );
    let rank = |m: &str| models.iter().position(|x| x == m).unwrap_or(usize::MAX);
    let mut rows: Vec<_> = stats.metrics.iter().filter(|s| s.metric.is_difference()).collect();
    rows.sort_by(|a, b| {
        (a.benchmark_id.as_str(), rank(&a.model_id), a.model_id.as_str(), a.metric)
            .cmp(&(b.benchmark_id.as_str(), rank(&b.model_id), b.model_id.as_str(), b.metric))
    });
    for s in rows {
        table.push_row(vec![
            ("benchmark", s.benchmark_id.as_str().into()),
            ("model", s.model_id.as_str().into()),
            ("metric", s.metric.as_str().to_uppercase().as_str().into()),
            ("estimate", s.ci.point.into()),
            ("lo", s.ci.lo.into()),
            ("hi", s.ci.hi.into()),
            ("p", s.permutation.as_ref().map(|t| t.p_value).into()),
            ("significant", if s.significant { "yes" } else { "no" }.into()),
        ]);
    }
    if let Some(first) = stats.metrics.first() {
        table.footnotes.push(format!(
            "{:.0}% percentile bootstrap over {} replicates.",
            first.ci.level * 100.0,
            first.ci.replicates
        ));
    }
    table
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub manifest_hash: String,
    pub lexicon_version: String,
    pub normalization_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub tables: Vec<ReportTable>,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<StatsReport>,
}

pub fn build_report(metrics: &MetricsReport, stats: Option<&StatsReport>, manifest_hash: &str) -> Report {
    let mut tables = vec![
        render_overall(&metrics.overall),
        render_benchmark(&metrics.per_benchmark, &metrics.models, &metrics.benchmarks),
        render_hallucination(&metrics.overall, &metrics.models, false),
        render_hallucination(&metrics.per_benchmark, &metrics.models, true),
    ];
    if let Some(stats) = stats {
        tables.push(render_significance(stats, &metrics.models));
    }
    Report {
        run_id: metrics.run_id.clone(),
        manifest_hash: manifest_hash.to_string(),
        lexicon_version: metrics.lexicon_version.clone(),
        normalization_version: metrics.normalization_version.clone(),
        seeds: metrics.seeds.clone(),
        tables,
        metrics: metrics.clone(),
        stats: stats.cloned(),
    }
}

pub fn to_markdown(report: &Report) -> String {
    let mut out = format!(
        "# Grounding report\n\nrun_id: `{}`  \nmanifest: `{}`  \nlexicon: `{}`  \nnormalization: `{}`\n",
        report.run_id, report.manifest_hash, report.lexicon_version, report.normalization_version
    );
    for table in &report.tables {
        out.push('\n');
        out.push_str(&table.to_markdown());
    }
    out
}

/// One CSV row per (benchmark, model) with full-precision values.
pub fn to_csv(report: &Report) -> Result<Vec<u8>, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "benchmark_id",
        "model_id",
        "n",
        "acc_real",
        "acc_blank",
        "acc_shuffle",
        "vrs",
        "bd",
        "is",
        "vbr",
        "vhr",
        "blank_sensitivity",
        "nvcr",
        "hvrr",
        "cond_prob",
        "run_id",
        "manifest_hash",
    ])?;
    for g in ordered(&report.metrics.per_benchmark, &report.metrics.models) {
        let m = &g.grounding;
        let h = &g.hallucination;
        writer.write_record([
            g.benchmark_id.clone(),
            g.model_id.clone(),
            m.n.to_string(),
            m.acc_real.to_string(),
            m.acc_blank.to_string(),
            m.acc_shuffle.to_string(),
            m.vrs.to_string(),
            m.bd.to_string(),
            m.is_rate.to_string(),
            m.vbr.to_string(),
            m.vhr.to_string(),
            m.blank_sensitivity.to_string(),
            h.nvcr.to_string(),
            h.hvrr.to_string(),
            h.cond_prob.map(|c| c.to_string()).unwrap_or_default(),
            report.run_id.clone(),
            report.manifest_hash.clone(),
        ])?;
    }
    writer
        .into_inner()
        .map_err(|e| ReportError::Io(IoError::Fs {
            path: "report.csv".into(),
            source: std::io::Error::other(e.to_string()),
        }))
}

/// Writes report.json, report.csv and report.md into `out_dir`.
pub fn export(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    for table in &report.tables {
        table.validate()?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| IoError::Fs {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let json = out_dir.join("report.json");
    let csv_path = out_dir.join("report.csv");
    let md = out_dir.join("report.md");
    io::write_json_pretty(&json, report)?;
    io::write_atomic(&csv_path, &to_csv(report)?)?;
    io::write_atomic(&md, to_markdown(report).as_bytes())?;
    Ok(vec![json, csv_path, md])
}

/// A table read back from Markdown: title, headers and cell strings.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn split_row(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|').trim_end_matches('|');
    let mut cells = Vec::new();
    let mut current = String::new();
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                current.push('|');
                chars.next();
            }
            '|' => cells.push(std::mem::take(&mut current).trim().to_string()),
            _ => current.push(c),
        }
    }
    cells.push(current.trim().to_string());
    cells
}

/// Parses the tables written by [`ReportTable::to_markdown`].
pub fn parse_markdown_tables(markdown: &str) -> Vec<ParsedTable> {
    let mut tables = Vec::new();
    let mut current: Option<ParsedTable> = None;
    for line in markdown.lines() {
        if let Some(title) = line.strip_prefix("### ") {
            if let Some(t) = current.take() {
                tables.push(t);
            }
            current = Some(ParsedTable {
                title: title.trim().to_string(),
                headers: Vec::new(),
                rows: Vec::new(),
            });
        } else if line.trim_start().starts_with('|') {
            let Some(table) = current.as_mut() else { continue };
            let cells = split_row(line);
            if table.headers.is_empty() {
                table.headers = cells;
            } else if cells.iter().all(|c| c.chars().all(|ch| ch == '-' || ch == ':') && !c.is_empty()) {
                continue;
            } else {
                table.rows.push(cells);
            }
        }
    }
    tables.extend(current);
    tables
}
