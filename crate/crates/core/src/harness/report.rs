//! Experiment reports: headline metrics with units, the files they came
//! from, and pass/fail flags against expected ranges.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::scenario::SCHEMA_VERSION;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub unit: String,
    /// Output file the value was derived from.
    pub source: String,
}

/// An accepted range for one metric. Missing bounds are open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub metric: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Statistical ranges are widened for short records.
    pub statistical: bool,
}

impl Expectation {
    pub fn range(metric: &str, min: f64, max: f64) -> Self {
        Expectation {
            metric: metric.into(),
            min: Some(min),
            max: Some(max),
            statistical: true,
        }
    }

    /// `target ± rel·|target|`.
    pub fn relative(metric: &str, target: f64, rel: f64) -> Self {
        let d = rel * target.abs();
        Self::range(metric, target - d, target + d)
    }

    pub fn at_most(metric: &str, max: f64) -> Self {
        Expectation {
            metric: metric.into(),
            min: None,
            max: Some(max),
            statistical: true,
        }
    }

    pub fn at_least(metric: &str, min: f64) -> Self {
        Expectation {
            metric: metric.into(),
            min: Some(min),
            max: None,
            statistical: true,
        }
    }

    /// Marks a range that does not depend on record length.
    pub fn exact(mut self) -> Self {
        self.statistical = false;
        self
    }

    /// Scales a statistical range's distance from its midpoint (or from the
    /// single bound's reference) by `factor`.
    pub fn widened(&self, factor: f64) -> Self {
        if !self.statistical {
            return self.clone();
        }
        let mut e = self.clone();
        match (self.min, self.max) {
            (Some(lo), Some(hi)) => {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo) * factor;
                e.min = Some(mid - half);
                e.max = Some(mid + half);
            }
            (Some(lo), None) => e.min = Some(lo / factor),
            (None, Some(hi)) => e.max = Some(hi * factor),
            (None, None) => {}
        }
        e
    }

    pub fn check(&self, value: f64) -> bool {
        value.is_finite()
            && self.min.map_or(true, |lo| value >= lo)
            && self.max.map_or(true, |hi| value <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationResult {
    pub expectation: Expectation,
    /// Absent when the metric was not produced.
    pub value: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub schema_version: u32,
    /// SHA-256 of the scenario echo, hex.
    pub scenario_hash: String,
    pub seed: u64,
    pub fast: bool,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    pub metrics: Vec<Metric>,
    pub expectations: Vec<ExpectationResult>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn new(name: &str, scenario_hash: String, seed: u64, fast: bool) -> Self {
        ExperimentReport {
            name: name.into(),
            schema_version: SCHEMA_VERSION,
            scenario_hash,
            seed,
            fast,
            outputs: Vec::new(),
            metrics: Vec::new(),
            expectations: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn push_metric(&mut self, name: &str, value: f64, unit: &str, source: &str) {
        self.metrics.push(Metric {
            name: name.into(),
            value,
            unit: unit.into(),
            source: source.into(),
        });
    }

    /// Evaluates each expectation against the recorded metrics.
    pub fn evaluate(&mut self, expectations: &[Expectation]) {
        self.expectations = expectations
            .iter()
            .map(|e| {
                let value = self.metric(&e.metric);
                ExpectationResult {
                    expectation: e.clone(),
                    value,
                    passed: value.is_some_and(|v| e.check(v)),
                }
            })
            .collect();
    }

    pub fn all_passed(&self) -> bool {
        self.expectations.iter().all(|e| e.passed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    /// Pretty-printed JSON.
    Structured,
}

fn bound(b: Option<f64>) -> String {
    b.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"))
}

/// Renders a report. Sections and rows keep their recorded order.
pub fn export_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => {
            serde_json::to_string_pretty(report).expect("report serializes") + "\n"
        }
        ReportFormat::Text => {
            let mut s = String::new();
            let _ = writeln!(s, "experiment: {}", report.name);
            let _ = writeln!(s, "schema_version: {}", report.schema_version);
            let _ = writeln!(s, "scenario_sha256: {}", report.scenario_hash);
            let _ = writeln!(s, "seed: {}", report.seed);
            let _ = writeln!(s, "fast: {}", report.fast);
            let _ = writeln!(s, "\n[outputs]");
            for o in &report.outputs {
                let _ = writeln!(s, "{o}");
            }
            let _ = writeln!(s, "\n[metrics]");
            for m in &report.metrics {
                let _ = writeln!(s, "{} = {:.6e} {} ({})", m.name, m.value, m.unit, m.source);
            }
            let _ = writeln!(s, "\n[expectations]");
            for e in &report.expectations {
                let x = &e.expectation;
                let _ = writeln!(
                    s,
                    "{} {}: {} in [{}, {}]",
                    if e.passed { "PASS" } else { "FAIL" },
                    x.metric,
                    e.value.map_or_else(|| "missing".to_string(), |v| format!("{v:.6e}")),
                    bound(x.min),
                    bound(x.max),
                );
            }
            if !report.warnings.is_empty() {
                let _ = writeln!(s, "\n[warnings]");
                for w in &report.warnings {
                    let _ = writeln!(s, "{w}");
                }
            }
            s
        }
    }
}

/// Reads a structured report back, refusing other schema versions.
pub fn parse_report(text: &str) -> Result<ExperimentReport> {
    let report: ExperimentReport =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "report schema_version {} is not supported (expected {SCHEMA_VERSION})",
            report.schema_version
        )));
    }
    Ok(report)
}
