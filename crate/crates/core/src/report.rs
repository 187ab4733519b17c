//! Exit statistics computed from inference traces, written as CSV, JSON and
//! simple SVG charts.
//!
//! Matrices are indexed `[class][exit]` with exits 1-based in the files and
//! 0-based in memory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comparison::Comparison;
use crate::costmodel::{average_flops, CostModel, CostSummary};
use crate::error::{Error, Result};
use crate::inference::{accuracy, InferenceTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub num_classes: usize,
    pub num_exits: usize,
    pub count: usize,
    pub accuracy: f64,
    pub cost: CostSummary,
    /// Number of inputs finishing at each exit.
    pub exit_histogram: Vec<usize>,
    /// `[class][exit]`: share (percent) of the inputs finishing at an exit
    /// that carry this true label. Columns sum to 100, or are all zero when
    /// nothing finishes at that exit.
    pub class_exit_percent: Vec<Vec<f64>>,
    /// Mean number of excluded classes per input after each exit. Inputs that
    /// already finished keep the count they had when they left.
    pub cumulative_excluded: Vec<f64>,
    /// `[class][exit]`: percent of the inputs reaching an exit for which the
    /// class is out of the remaining set after that exit.
    pub class_exclusion_percent: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

/// Builds the report. Traces without a label are skipped by the accuracy
/// and the class-by-exit matrix.
pub fn build_report(traces: &[InferenceTrace], cost: &CostModel) -> Result<Report> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces to report"));
    }
    let m = cost.num_classes;
    let n = cost.num_exits();
    let summary = average_flops(traces, cost)?;

    let mut hist = vec![0usize; n];
    let mut class_counts = vec![vec![0usize; n]; m];
    let mut excluded_sum = vec![0usize; n];
    let mut visits = vec![0usize; n];
    let mut out_of_set = vec![vec![0usize; n]; m];
    for t in traces {
        if t.exit_layer == 0 || t.exit_layer > n || t.events.len() != t.exit_layer {
            return Err(Error::Inconsistent(format!(
                "trace exits at {} with {} events for {n} exits",
                t.exit_layer,
                t.events.len()
            )));
        }
        hist[t.exit_layer - 1] += 1;
        if let Some(l) = t.label {
            if l >= m {
                return Err(Error::OutOfRange {
                    index: l,
                    valid: format!("0..{m}"),
                });
            }
            class_counts[l][t.exit_layer - 1] += 1;
        }
        let mut last = 0;
        for e in 0..n {
            if let Some(ev) = t.events.get(e) {
                last = m - ev.remaining.len();
                visits[e] += 1;
                let mut present = vec![false; m];
                for &c in &ev.remaining {
                    present[c] = true;
                }
                for (c, p) in present.iter().enumerate() {
                    if !p {
                        out_of_set[c][e] += 1;
                    }
                }
            }
            excluded_sum[e] += last;
        }
    }
    let percent = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    let class_exit_percent = (0..m)
        .map(|c| {
            (0..n)
                .map(|e| {
                    let col: usize = class_counts.iter().map(|r| r[e]).sum();
                    percent(class_counts[c][e], col)
                })
                .collect()
        })
        .collect();
    let class_exclusion_percent = (0..m)
        .map(|c| (0..n).map(|e| percent(out_of_set[c][e], visits[e])).collect())
        .collect();
    let count = traces.len();
    Ok(Report {
        num_classes: m,
        num_exits: n,
        count,
        accuracy: accuracy(traces),
        cost: summary,
        exit_histogram: hist,
        class_exit_percent,
        cumulative_excluded: excluded_sum.iter().map(|&s| s as f64 / count as f64).collect(),
        class_exclusion_percent,
        comparison: None,
    })
}

fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let n = rows.first().map_or(0, Vec::len);
    let mut s = String::from("class");
    for e in 1..=n {
        write!(s, ",exit_{e}").unwrap();
    }
    s.push('\n');
    for (c, row) in rows.iter().enumerate() {
        write!(s, "{c}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

impl Report {
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("exit,count\n");
        for (e, c) in self.exit_histogram.iter().enumerate() {
            writeln!(s, "{},{c}", e + 1).unwrap();
        }
        s
    }

    pub fn cumulative_excluded_csv(&self) -> String {
        let mut s = String::from("exit,mean_excluded\n");
        for (e, v) in self.cumulative_excluded.iter().enumerate() {
            writeln!(s, "{},{v}", e + 1).unwrap();
        }
        s
    }

    pub fn class_exit_csv(&self) -> String {
        matrix_csv(&self.class_exit_percent)
    }

    pub fn class_exclusion_csv(&self) -> String {
        matrix_csv(&self.class_exclusion_percent)
    }

    /// Writes every artifact into `dir`, creating it if needed.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("report.json", serde_json::to_string_pretty(self)?)?;
        put("exit_histogram.csv", self.histogram_csv())?;
        put("class_exit_percent.csv", self.class_exit_csv())?;
        put("cumulative_excluded.csv", self.cumulative_excluded_csv())?;
        put("class_exclusion_percent.csv", self.class_exclusion_csv())?;
        let hist: Vec<f64> = self.exit_histogram.iter().map(|&c| c as f64).collect();
        put("exit_histogram.svg", bar_chart("inputs finishing per exit", &hist))?;
        put(
            "cumulative_excluded.svg",
            bar_chart("mean excluded classes after each exit", &self.cumulative_excluded),
        )?;
        put(
            "class_exit_percent.svg",
            heatmap("class share of inputs finishing per exit (%)", &self.class_exit_percent),
        )?;
        put(
            "class_exclusion_percent.svg",
            heatmap("inputs with the class excluded per exit (%)", &self.class_exclusion_percent),
        )?;
        if let Some(c) = &self.comparison {
            put("comparison.csv", c.to_csv())?;
            let bars = [
                c.original.mean_flops,
                c.class_exclusion.mean_flops,
                c.baseline.as_ref().map_or(0.0, |b| b.mean_flops),
            ];
            put("comparison.svg", bar_chart("mean FLOPs: original, class exclusion, baseline", &bars))?;
        }
        Ok(())
    }
}

/// Builds the report and writes it into `out_dir`.
pub fn emit_report(traces: &[InferenceTrace], cost: &CostModel, out_dir: impl AsRef<Path>) -> Result<Report> {
    let r = build_report(traces, cost)?;
    r.write_to(out_dir)?;
    Ok(r)
}

fn bar_chart(title: &str, values: &[f64]) -> String {
    let (w, h, pad) = (40.0 * values.len() as f64 + 40.0, 220.0, 20.0);
    let max = values.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\">\n<text x=\"{pad}\" y=\"14\" font-size=\"12\">{title}</text>\n",
        h + 20.0
    );
    for (i, v) in values.iter().enumerate() {
        let bh = (h - 2.0 * pad) * v / max;
        let x = pad + 40.0 * i as f64;
        writeln!(
            s,
            "<rect x=\"{x}\" y=\"{:.2}\" width=\"30\" height=\"{bh:.2}\" fill=\"steelblue\"/><text x=\"{x}\" y=\"{}\" font-size=\"10\">{}</text>",
            h - pad - bh,
            h + 5.0,
            i + 1
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn heatmap(title: &str, rows: &[Vec<f64>]) -> String {
    let cols = rows.first().map_or(0, Vec::len);
    let cell = 24.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n<text x=\"4\" y=\"14\" font-size=\"12\">{title}</text>\n",
        cell * cols as f64 + 40.0,
        cell * rows.len() as f64 + 30.0
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v / 100.0)).clamp(0.0, 255.0) as u8;
            writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"/>",
                30.0 + cell * c as f64,
                20.0 + cell * r as f64
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
