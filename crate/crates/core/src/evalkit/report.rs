use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `None` when the test fold holds a single class.
    pub auc: Option<f64>,
}

/// Mean and population standard deviation over folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    pub fn display(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroF1,
    Accuracy,
    Auc,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f1" | "macro_f1" | "macro-f1" => Some(Self::MacroF1),
            "accuracy" | "acc" => Some(Self::Accuracy),
            "auc" => Some(Self::Auc),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::MacroF1 => "F1 (macro avg.)",
            Self::Accuracy => "Accuracy",
            Self::Auc => "AUC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Effective configuration and seeds that produced the report.
    pub config: serde_json::Value,
    pub folds: Vec<FoldMetrics>,
    pub macro_f1: Aggregate,
    pub accuracy: Aggregate,
    pub auc: Option<Aggregate>,
}

impl MetricReport {
    pub fn from_folds(config: serde_json::Value, folds: Vec<FoldMetrics>) -> Option<Self> {
        let col = |f: fn(&FoldMetrics) -> f64| folds.iter().map(f).collect::<Vec<_>>();
        let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
        Some(Self {
            macro_f1: Aggregate::of(&col(|f| f.macro_f1))?,
            accuracy: Aggregate::of(&col(|f| f.accuracy))?,
            auc: Aggregate::of(&aucs),
            config,
            folds,
        })
    }

    pub fn aggregate(&self, metric: Metric) -> Option<Aggregate> {
        match metric {
            Metric::MacroF1 => Some(self.macro_f1),
            Metric::Accuracy => Some(self.accuracy),
            Metric::Auc => self.auc,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellError {
    pub layer: usize,
    pub fold: usize,
    pub message: String,
    /// The probe's loss became non-finite.
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: serde_json::Value,
    pub layers: BTreeMap<usize, MetricReport>,
    /// Failed (layer, fold) cells; their layers are absent from `layers`.
    pub errors: Vec<CellError>,
}

impl SweepReport {
    /// Plot-ready `layer,mean,std` rows.
    pub fn to_csv(&self, metric: Metric) -> String {
        let mut out = String::from("layer,mean,std\n");
        for (layer, r) in &self.layers {
            if let Some(a) = r.aggregate(metric) {
                writeln!(out, "{layer},{},{}", a.mean, a.std).expect("string write");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Text table with one row per entry and `mean ± std` cells.
pub fn format_table(rows: &[(String, &MetricReport)], metrics: &[Metric]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend(metrics.iter().map(|m| m.label().to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let mut cells = vec![name.clone()];
            cells.extend(
                metrics
                    .iter()
                    .map(|&m| r.aggregate(m).map_or_else(|| "n/a".to_string(), |a| a.display())),
            );
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |row: &[String]| {
        row.iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("-|-"),
    );
    for row in &body {
        out.push('\n');
        out.push_str(&line(row));
    }
    out.push('\n');
    out
}
