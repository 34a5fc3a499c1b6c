//! Error rates, inconsistency between predictors, and comparison rows.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::models::GatedModel;

/// Header line that versions every CSV this crate writes.
pub const SCHEMA_LINE: &str = "# schema=1";

/// `+1`, `−1`, or `0` for a zero score.
pub fn predicted_label(score: f64) -> i8 {
    if score > 0.0 {
        1
    } else if score < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of samples with `sign(score) ≠ label`; a zero score is an error.
pub fn error_rate_scores(scores: &[f64], labels: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let wrong = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| predicted_label(**s) as f64 != **y)
        .count();
    wrong as f64 / scores.len() as f64
}

pub fn error_rate<M: GatedModel + Sync>(model: &M, ds: &Dataset) -> Result<f64> {
    Ok(error_rate_scores(&model.scores(ds)?, ds.labels()))
}

/// Fraction of samples on which the predicted labels differ. A zero score
/// differs from every nonzero score.
pub fn inconsistency_scores(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let diff = a
        .iter()
        .zip(b)
        .filter(|(x, y)| predicted_label(**x) != predicted_label(**y))
        .count();
    diff as f64 / a.len() as f64
}

pub fn inconsistency<A, B>(a: &A, b: &B, ds: &Dataset) -> Result<f64>
where
    A: GatedModel + Sync,
    B: GatedModel + Sync,
{
    Ok(inconsistency_scores(&a.scores(ds)?, &b.scores(ds)?))
}

/// Expected disagreement of two independent predictors with error `p`: `2p(1−p)`.
pub fn baseline_inconsistency(p: f64) -> f64 {
    2.0 * p * (1.0 - p)
}

/// One pair of variants evaluated on one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n_train: usize,
    pub units: usize,
    pub contexts: usize,
    pub seed: u64,
    pub median: bool,
    pub momentum: f64,
    pub variant_a: String,
    pub variant_b: String,
    pub error_a: Option<f64>,
    pub error_b: Option<f64>,
    pub inconsistency: Option<f64>,
    /// `2p(1−p)` with `p = error_a`.
    pub baseline_inconsistency: Option<f64>,
    /// Certification residual of `variant_a` when it is a gradient-descent run.
    pub kkt_residual: Option<f64>,
}

pub const COMPARISON_HEADER: &str = "n_train,units,contexts,seed,median,momentum,variant_a,variant_b,error_a,error_b,inconsistency,baseline_inconsistency,kkt_residual";

/// Missing values are empty fields.
pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

pub fn fmt_sci(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6e}"),
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

impl ComparisonRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n_train,
            self.units,
            self.contexts,
            self.seed,
            self.median,
            self.momentum,
            self.variant_a,
            self.variant_b,
            fmt_opt(self.error_a),
            fmt_opt(self.error_b),
            fmt_opt(self.inconsistency),
            fmt_opt(self.baseline_inconsistency),
            fmt_sci(self.kkt_residual),
        )
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{SCHEMA_LINE}\n{COMPARISON_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
