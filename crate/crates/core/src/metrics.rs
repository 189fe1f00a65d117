//! Bag-level classification metrics: confusion statistics at a threshold and
//! the rank-statistic AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Which ratios were 0/0 and therefore reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedRatios {
    pub precision: bool,
    pub recall: bool,
    pub f_score: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// `None` until computed; undefined for single-class inputs.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub threshold: f64,
    pub undefined: UndefinedRatios,
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(thetas: &[f64], labels: &[u8]) -> Result<()> {
    if thetas.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} predictions but {} labels",
            thetas.len(),
            labels.len()
        )));
    }
    if thetas.is_empty() {
        return Err(Error::domain("no predictions to score"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::domain(format!("labels must be 0 or 1, got {bad}")));
    }
    if let Some(bad) = thetas.iter().find(|t| t.is_nan()) {
        return Err(Error::domain(format!("prediction {bad} is not a number")));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Predicts positive iff `theta >= threshold`. The AUC is left unset.
pub fn confusion_metrics(thetas: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    check_inputs(thetas, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&t, &y) in thetas.iter().zip(labels) {
        match (t >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (precision, p_undef) = ratio(tp, tp + fp);
    let (recall, r_undef) = ratio(tp, tp + fn_);
    let f_undef = precision + recall == 0.0;
    let f_score = if f_undef {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        accuracy: (tp + tn) as f64 / thetas.len() as f64,
        precision,
        recall,
        f_score,
        auc: None,
        tp,
        fp,
        tn,
        fn_,
        threshold,
        undefined: UndefinedRatios {
            precision: p_undef,
            recall: r_undef,
            f_score: f_undef,
        },
    })
}

/// Mann-Whitney AUC from midranks: the fraction of positive-negative pairs
/// ordered correctly, ties counting one half.
pub fn auc(thetas: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(thetas, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain("AUC is undefined with a single class"));
    }
    let mut order: Vec<usize> = (0..thetas.len()).collect();
    order.sort_by(|&a, &b| thetas[a].total_cmp(&thetas[b]));

    // twice the positive rank sum keeps midranks integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && thetas[order[j + 1]] == thetas[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += midrank2 * pos_in_group;
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Confusion metrics plus AUC when both classes are present.
pub fn full_report(thetas: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    let mut report = confusion_metrics(thetas, labels, threshold)?;
    report.auc = auc(thetas, labels).ok();
    Ok(report)
}
