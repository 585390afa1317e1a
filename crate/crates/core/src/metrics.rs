//! Evaluation metrics for the sentiment-style score range `[−3, 3]` and for
//! class labels.
//!
//! Binarisation: a score is positive when `≥ 0` (including zero) or `> 0`
//! (excluding zero, where samples labelled exactly `0` are dropped). A class is
//! positive when its index is at least `K/2`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Width of the seven Acc7 bins over `[−3, 3]`.
const ACC7_BIN: f64 = 6.0 / 7.0;

/// Metrics of one split. `None` marks a metric that does not apply to the task
/// (or, for `corr`, a constant prediction or label vector).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub acc7: Option<f64>,
    pub acc2_incl_zero: Option<f64>,
    pub acc2_excl_zero: Option<f64>,
    pub f1_weighted: Option<f64>,
    pub mae: Option<f64>,
    pub corr: Option<f64>,
}

impl MetricsReport {
    /// `(name, value)` pairs in a fixed order, for tables.
    pub fn entries(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("accuracy", self.accuracy),
            ("acc7", self.acc7),
            ("acc2_incl_zero", self.acc2_incl_zero),
            ("acc2_excl_zero", self.acc2_excl_zero),
            ("f1_weighted", self.f1_weighted),
            ("mae", self.mae),
            ("corr", self.corr),
        ]
    }

    /// Headline accuracy: class accuracy, else Acc2 including zero.
    pub fn primary_accuracy(&self) -> Option<f64> {
        self.accuracy.or(self.acc2_incl_zero)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BinaryConfusion {
    pub fn from_pairs(pred: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (p, y) in pred {
            match (p, y) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `(TP + TN) / total`.
    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }

    /// Support-weighted mean of the per-class F1 scores; an undefined F1
    /// (no predictions and no labels of that class) counts as 0.
    pub fn f1_weighted(&self) -> Option<f64> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let f1 = |tp: usize, fp: usize, fn_: usize| {
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        };
        let pos = f1(self.tp, self.fp, self.fn_);
        let neg = f1(self.tn, self.fn_, self.fp);
        let support_pos = (self.tp + self.fn_) as f64;
        let support_neg = (self.tn + self.fp) as f64;
        Some((pos * support_pos + neg * support_neg) / n as f64)
    }
}

pub fn mae(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(pred.len(), labels.len())?;
    Ok(pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pairs(x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Bin index in `0..7` of a score clipped to `[−3, 3]`.
pub fn acc7_bin(x: f64) -> usize {
    let c = x.clamp(-3.0, 3.0);
    (((c + 3.0) / ACC7_BIN).floor() as usize).min(6)
}

pub fn acc7(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(pred.len(), labels.len())?;
    let hits = pred
        .iter()
        .zip(labels)
        .filter(|(p, y)| acc7_bin(**p) == acc7_bin(**y))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return arg_err(format!("{a} predictions for {b} labels"));
    }
    if a == 0 {
        return arg_err("cannot score an empty split");
    }
    Ok(())
}

pub fn regression_metrics(pred: &[f64], labels: &[f64]) -> Result<MetricsReport> {
    check_pairs(pred.len(), labels.len())?;
    let incl = BinaryConfusion::from_pairs(pred.iter().zip(labels).map(|(p, y)| (*p >= 0.0, *y >= 0.0)));
    let excl = BinaryConfusion::from_pairs(
        pred.iter()
            .zip(labels)
            .filter(|(_, y)| **y != 0.0)
            .map(|(p, y)| (*p > 0.0, *y > 0.0)),
    );
    Ok(MetricsReport {
        samples: pred.len(),
        accuracy: None,
        acc7: Some(acc7(pred, labels)?),
        acc2_incl_zero: incl.accuracy(),
        acc2_excl_zero: excl.accuracy(),
        f1_weighted: incl.f1_weighted(),
        mae: Some(mae(pred, labels)?),
        corr: pearson(pred, labels)?,
    })
}

pub fn binary_class(class: usize, classes: usize) -> bool {
    2 * class >= classes
}

pub fn classification_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    check_pairs(pred.len(), labels.len())?;
    if classes < 2 || pred.iter().chain(labels).any(|&c| c >= classes) {
        return arg_err(format!("class indices must lie in 0..{classes}"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let bin = BinaryConfusion::from_pairs(
        pred.iter()
            .zip(labels)
            .map(|(&p, &y)| (binary_class(p, classes), binary_class(y, classes))),
    );
    Ok(MetricsReport {
        samples: pred.len(),
        accuracy: Some(hits as f64 / pred.len() as f64),
        acc2_incl_zero: bin.accuracy(),
        f1_weighted: bin.f1_weighted(),
        ..MetricsReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_closed_case() {
        let c = BinaryConfusion {
            tp: 3,
            tn: 4,
            fp: 2,
            fn_: 1,
        };
        assert_eq!(c.accuracy(), Some(0.7));
    }

    #[test]
    fn mae_closed_case() {
        assert_eq!(mae(&[1.0, 2.0], &[0.0, 4.0]).unwrap(), 1.5);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn perfect_regression() {
        let y = [-2.5, -0.3, 0.0, 1.2, 2.9];
        let r = regression_metrics(&y, &y).unwrap();
        assert_eq!(r.acc7, Some(1.0));
        assert_eq!(r.acc2_incl_zero, Some(1.0));
        assert_eq!(r.acc2_excl_zero, Some(1.0));
        assert_eq!(r.f1_weighted, Some(1.0));
        assert_eq!(r.mae, Some(0.0));
        assert!((r.corr.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.accuracy, None);
    }

    #[test]
    fn bins_cover_the_range() {
        assert_eq!(acc7_bin(-3.0), 0);
        assert_eq!(acc7_bin(-10.0), 0);
        assert_eq!(acc7_bin(3.0), 6);
        assert_eq!(acc7_bin(0.0), 3);
    }

    #[test]
    fn classification_marks_regression_metrics_absent() {
        let r = classification_metrics(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        assert!((r.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.mae, None);
        assert_eq!(r.acc7, None);
        assert!(classification_metrics(&[2], &[0], 2).is_err());
    }
}
