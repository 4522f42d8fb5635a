//! Confusion-matrix evaluation: per-class IoU, F1 and accuracy, macro means and
//! pixel accuracy, with ignored pixels excluded everywhere.

use std::fmt::Write as _;

use crate::config::NUM_CLASSES;
use crate::datapipe::CLASS_NAMES;
use crate::error::{Error, Result};

/// `counts[t][p]`: pixels of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        ConfusionMatrix {
            counts: [[0; NUM_CLASSES]; NUM_CLASSES],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Adds a `width`-wide label map pair; pixels whose truth is `ignore` are skipped.
    pub fn accumulate(
        &mut self,
        pred: &[u8],
        truth: &[u8],
        width: usize,
        ignore: u8,
    ) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Data(format!(
                "prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let width = width.max(1);
        // validate first so a failed call leaves the matrix untouched
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            let bad = if t != ignore && t as usize >= NUM_CLASSES {
                Some(("truth", t))
            } else if p as usize >= NUM_CLASSES {
                Some(("prediction", p))
            } else {
                None
            };
            if let Some((which, v)) = bad {
                return Err(Error::Data(format!(
                    "{which} class {v} out of range at (row {}, col {})",
                    i / width,
                    i % width
                )));
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != ignore {
                self.counts[t as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn report(&self) -> Result<MetricsReport> {
        self.report_with(MacroMean::AllClasses)
    }

    pub fn report_with(&self, macro_mean: MacroMean) -> Result<MetricsReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data(
                "confusion matrix is empty: no valid pixels".into(),
            ));
        }
        let mut classes = [ClassMetrics::default(); NUM_CLASSES];
        for (i, m) in classes.iter_mut().enumerate() {
            let tp = self.counts[i][i];
            let fp = (0..NUM_CLASSES).map(|t| self.counts[t][i]).sum::<u64>() - tp;
            let fn_ = self.counts[i].iter().sum::<u64>() - tp;
            let tn = total - tp - fp - fn_;
            let denom = tp + fp + fn_;
            *m = ClassMetrics {
                tp,
                fp,
                fn_,
                tn,
                iou: ratio(tp, denom),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
                acc: ratio(tp + tn, total),
                absent: denom == 0,
            };
        }
        let averaged: Vec<&ClassMetrics> = match macro_mean {
            MacroMean::AllClasses => classes.iter().collect(),
            MacroMean::PresentOnly => classes.iter().filter(|c| !c.absent).collect(),
        };
        let mean = |f: fn(&ClassMetrics) -> f64| {
            averaged.iter().map(|c| f(c)).sum::<f64>() / averaged.len() as f64
        };
        let trace: u64 = (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum();
        Ok(MetricsReport {
            miou: mean(|c| c.iou),
            mf1: mean(|c| c.f1),
            macc: mean(|c| c.acc),
            aacc: ratio(trace, total),
            classes,
            total,
        })
    }
}

/// Which classes the macro means average over. A class absent from both truth
/// and prediction has IoU = F1 = 0 and is flagged either way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum MacroMean {
    #[default]
    AllClasses,
    PresentOnly,
}

impl std::str::FromStr for MacroMean {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MacroMean::AllClasses),
            "present" => Ok(MacroMean::PresentOnly),
            other => Err(Error::Config(format!(
                "eval.macro_mean must be all or present, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for MacroMean {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MacroMean::AllClasses => "all",
            MacroMean::PresentOnly => "present",
        })
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub f1: f64,
    pub acc: f64,
    /// Absent from both truth and prediction; IoU and F1 are reported as 0.
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: [ClassMetrics; NUM_CLASSES],
    pub miou: f64,
    pub mf1: f64,
    pub macc: f64,
    pub aacc: f64,
    pub total: u64,
}

impl MetricsReport {
    pub fn absent_classes(&self) -> Vec<&'static str> {
        self.classes
            .iter()
            .zip(CLASS_NAMES)
            .filter(|(c, _)| c.absent)
            .map(|(_, n)| n)
            .collect()
    }

    fn row_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(16);
        for (pick, mean) in [
            (
                (|c: &ClassMetrics| c.iou) as fn(&ClassMetrics) -> f64,
                self.miou,
            ),
            (|c: &ClassMetrics| c.f1, self.mf1),
            (|c: &ClassMetrics| c.acc, self.macc),
        ] {
            v.extend(self.classes.iter().map(pick));
            v.push(mean);
        }
        v.push(self.aacc);
        v
    }
}

/// Fraction as a percentage with two decimals, rounding halves up.
pub fn percent(x: f64) -> String {
    let hundredths = (x * 10000.0 + 0.5).floor() as i64;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

fn header_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for metric in ["IoU", "F1", "Acc"] {
        for name in ["Clear", "Thick", "Thin", "Shadow", "mean"] {
            cols.push(format!("{metric}_{name}"));
        }
    }
    cols.push("aAcc".into());
    cols
}

/// Fixed-width table with one row per `(label, report)`.
pub fn emit_table(rows: &[(String, MetricsReport)]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Data("no reports to tabulate".into()));
    }
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "dataset");
    let groups = ["IoU", "F1", "Accuracy"];
    for g in groups {
        let _ = write!(out, " | {:^34}", g);
    }
    let _ = writeln!(out, " | {:>6}", "");
    let _ = write!(out, "{:<label_w$}", "");
    for _ in groups {
        let _ = write!(
            out,
            " | {:>6} {:>6} {:>6} {:>6} {:>6}",
            "Clear", "Thick", "Thin", "Shadow", "mean"
        );
    }
    let _ = writeln!(out, " | {:>6}", "aAcc");
    for (label, report) in rows {
        let v: Vec<String> = report.row_values().into_iter().map(percent).collect();
        let _ = write!(out, "{label:<label_w$}");
        for chunk in v[..15].chunks(5) {
            let _ = write!(
                out,
                " | {:>6} {:>6} {:>6} {:>6} {:>6}",
                chunk[0], chunk[1], chunk[2], chunk[3], chunk[4]
            );
        }
        let _ = writeln!(out, " | {:>6}", v[15]);
        let absent = report.absent_classes();
        if !absent.is_empty() {
            let _ = writeln!(
                out,
                "  note: {label}: absent classes reported as 0: {}",
                absent.join(", ")
            );
        }
    }
    Ok(out)
}

/// CSV with the table's columns, percentages to two decimals.
pub fn emit_csv(rows: &[(String, MetricsReport)]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Data("no reports to tabulate".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string()];
    header.extend(header_columns());
    header.push("absent".into());
    w.write_record(&header).map_err(csv_err)?;
    for (label, report) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(report.row_values().into_iter().map(percent));
        rec.push(report.absent_classes().join(";"));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
