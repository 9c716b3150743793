//! Benchmark reports: long-format rows, CSV in and out, aligned text.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    /// `key=value` pairs joined by `;`.
    pub parameters: String,
    pub metric: String,
    pub value: f64,
    pub units: String,
    /// Measured repetitions; 0 for rows that are not timings.
    pub iterations: u32,
    pub warmup: u32,
}

/// Rows in insertion order plus free-text footer lines (reference numbers,
/// notes). Footers travel in CSV as `#` comment lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<Row>,
    pub footers: Vec<String>,
}

impl BenchReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        experiment: &str,
        parameters: &str,
        metric: &str,
        value: f64,
        units: &str,
    ) {
        self.push_timed(experiment, parameters, metric, value, units, 0, 0);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push_timed(
        &mut self,
        experiment: &str,
        parameters: &str,
        metric: &str,
        value: f64,
        units: &str,
        iterations: u32,
        warmup: u32,
    ) {
        self.rows.push(Row {
            experiment: experiment.into(),
            parameters: parameters.into(),
            metric: metric.into(),
            value,
            units: units.into(),
            iterations,
            warmup,
        });
    }

    pub fn footer(&mut self, line: impl Into<String>) {
        self.footers.push(line.into());
    }

    pub fn extend(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
        self.footers.extend(other.footers);
    }

    /// First row matching `metric` and `parameters`.
    pub fn value(&self, parameters: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.parameters == parameters && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        // an empty report still gets a header
        if self.rows.is_empty() {
            w.write_record([
                "experiment",
                "parameters",
                "metric",
                "value",
                "units",
                "iterations",
                "warmup",
            ])?;
        }
        let mut inner = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        for f in &self.footers {
            writeln!(inner, "# {f}")?;
        }
        inner.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn read_csv<R: Read>(mut input: R) -> csv::Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let footers = text
            .lines()
            .filter_map(|l| l.strip_prefix("# "))
            .map(str::to_owned)
            .collect();
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let rows = rdr.deserialize().collect::<csv::Result<Vec<Row>>>()?;
        Ok(Self { rows, footers })
    }

    /// Aligned plain-text rendering of every row.
    pub fn to_text(&self) -> String {
        let header = [
            "experiment",
            "parameters",
            "metric",
            "value",
            "units",
            "iters",
            "warmup",
        ];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.experiment.clone(),
                    r.parameters.clone(),
                    r.metric.clone(),
                    format_value(r.value),
                    r.units.clone(),
                    r.iterations.to_string(),
                    r.warmup.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                // numbers right-aligned
                if i == 3 || i >= 5 {
                    let _ = write!(out, "{c:>w$}  ");
                } else {
                    let _ = write!(out, "{c:<w$}  ");
                }
            }
            let trimmed = out.trim_end().len();
            out.truncate(trimmed);
            out.push('\n');
        };
        line(&mut out, &header);
        for row in &body {
            let cells: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut out, &cells);
        }
        for f in &self.footers {
            let _ = writeln!(out, "# {f}");
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else if v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

impl BenchReport {
    /// One line per distinct parameter set, one column per metric.
    pub fn pivot(&self, metrics: &[&str]) -> String {
        let mut keys: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&r.parameters.as_str()) {
                keys.push(&r.parameters);
            }
        }
        let mut table: Vec<Vec<String>> = vec![std::iter::once("parameters")
            .chain(metrics.iter().copied())
            .map(str::to_owned)
            .collect()];
        for k in keys {
            let mut line = vec![k.to_owned()];
            for m in metrics {
                line.push(self.value(k, m).map_or_else(|| "-".into(), format_value));
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..=metrics.len())
            .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &table {
            for (c, (cell, w)) in line.iter().zip(&widths).enumerate() {
                if c == 0 {
                    let _ = write!(out, "{cell:<w$}");
                } else {
                    let _ = write!(out, "  {cell:>w$}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Joins `key=value` pairs in the order given.
pub fn params(pairs: &[(&str, &dyn std::fmt::Display)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}
