//! Confusion counts with Drowsy as the positive class, the derived
//! metrics, and mean ± sample standard deviation across folds.

use crate::error::{Error, Result};
use crate::Label;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fn_: usize, fp: usize, tn: usize) -> Self {
        Self { tp, fn_, fp, tn }
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Drowsy, Label::Drowsy) => self.tp += 1,
            (Label::Drowsy, Label::Alert) => self.fn_ += 1,
            (Label::Alert, Label::Drowsy) => self.fp += 1,
            (Label::Alert, Label::Alert) => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = Self::default();
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }
}

/// Metric names in reporting order.
pub const METRIC_NAMES: [&str; 5] = ["Accuracy", "F1", "Sensitivity", "Specificity", "Precision"];

/// `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
}

impl MetricsReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 5] {
        [
            self.accuracy,
            self.f1,
            self.sensitivity,
            self.specificity,
            self.precision,
        ]
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let sensitivity = ratio(cm.tp, cm.tp + cm.fn_);
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    MetricsReport {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        f1,
        sensitivity,
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        precision,
    }
}

/// Rows are true classes (Drowsy, Alert), columns predicted (Drowsy, Alert);
/// each row sums to one.
pub fn normalize_confusion(cm: &ConfusionMatrix) -> Result<[[f64; 2]; 2]> {
    let rows = [(cm.tp, cm.fn_, "drowsy"), (cm.fp, cm.tn, "alert")];
    let mut out = [[0.0; 2]; 2];
    for (i, &(a, b, name)) in rows.iter().enumerate() {
        let n = a + b;
        if n == 0 {
            return Err(Error::invalid("normalize_confusion", format!("no {name} samples")));
        }
        out[i] = [a as f64 / n as f64, b as f64 / n as f64];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two defined values.
    pub std: Option<f64>,
    pub defined: usize,
}

/// Mean and sample standard deviation over the defined values.
pub fn summarize(values: &[Option<f64>]) -> Result<Summary> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let n = defined.len();
    if n == 0 {
        return Err(Error::invalid("aggregate", "every value is undefined"));
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| {
        let ss: f64 = defined.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Summary { mean, std, defined: n })
}

/// Per-metric summaries in [`METRIC_NAMES`] order.
pub fn aggregate(per_fold: &[MetricsReport]) -> Result<[Summary; 5]> {
    if per_fold.len() < 2 {
        return Err(Error::invalid(
            "aggregate",
            format!("{} folds, need at least 2", per_fold.len()),
        ));
    }
    let mut out = [Summary {
        mean: 0.0,
        std: None,
        defined: 0,
    }; 5];
    for (m, slot) in out.iter_mut().enumerate() {
        let column: Vec<Option<f64>> = per_fold.iter().map(|r| r.values()[m]).collect();
        *slot = summarize(&column)
            .map_err(|_| Error::invalid("aggregate", format!("{} is undefined in every fold", METRIC_NAMES[m])))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let r = metrics(&ConfusionMatrix::new(40, 10, 5, 45));
        assert_eq!(r.accuracy, Some(0.85));
        assert_eq!(r.sensitivity, Some(0.8));
        assert_eq!(r.specificity, Some(0.9));
        assert!((r.precision.unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!((r.f1.unwrap() - 16.0 / 19.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let perfect = metrics(&ConfusionMatrix::new(10, 0, 0, 10));
        assert!(perfect.values().iter().all(|v| *v == Some(1.0)));
        let always_drowsy = metrics(&ConfusionMatrix::new(10, 0, 10, 0));
        assert_eq!(always_drowsy.sensitivity, Some(1.0));
        assert_eq!(always_drowsy.specificity, Some(0.0));
    }

    #[test]
    fn zero_denominator_is_undefined_not_zero() {
        let r = metrics(&ConfusionMatrix::new(0, 5, 0, 5));
        assert_eq!(r.precision, None);
        assert_eq!(r.f1, None);
        assert_eq!(r.sensitivity, Some(0.0));
    }

    #[test]
    fn normalization() {
        let n = normalize_confusion(&ConfusionMatrix::new(40, 10, 5, 45)).unwrap();
        assert_eq!(n, [[0.8, 0.2], [0.1, 0.9]]);
        assert_eq!(
            normalize_confusion(&ConfusionMatrix::new(3, 0, 0, 7)).unwrap(),
            [[1.0, 0.0], [0.0, 1.0]]
        );
        assert!(normalize_confusion(&ConfusionMatrix::new(0, 0, 1, 1)).is_err());
    }

    #[test]
    fn aggregation() {
        let s = summarize(&[Some(0.8), Some(0.9)]).unwrap();
        assert!((s.mean - 0.85).abs() < 1e-15);
        assert!((s.std.unwrap() - 0.005f64.sqrt()).abs() < 1e-15);
        let same = summarize(&[Some(0.7); 5]).unwrap();
        assert_eq!(same.std, Some(0.0));
        let partial = summarize(&[None, Some(0.5), Some(0.7)]).unwrap();
        assert_eq!(partial.defined, 2);
        assert!(summarize(&[None, None]).is_err());
    }

    #[test]
    fn aggregate_requires_two_folds_and_some_definition() {
        let r = metrics(&ConfusionMatrix::new(1, 1, 1, 1));
        assert!(aggregate(&[r]).is_err());
        assert!(aggregate(&[r, r]).is_ok());
        let undefined = metrics(&ConfusionMatrix::new(0, 2, 0, 2));
        assert!(aggregate(&[undefined, undefined]).is_err());
    }
}
