//! Pixel-wise evaluation: confusion counts and precision, recall, F1, IoU.
//!
//! Dataset scores are micro-averaged: counts from every tile are summed
//! first, and the formulas are applied once to the totals.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts from already-binarized predictions.
    pub fn from_binary(pred: &[bool], target: &[bool]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::dim("confusion_counts", "pixels", target.len(), pred.len()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Binarizes `sigmoid(logit) >= threshold` and counts against a binary target.
pub fn confusion_counts<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<ConfusionCounts> {
    if logits.shape() != target.shape() {
        return Err(Error::dim(
            "confusion_counts",
            "shape",
            format!("{:?}", target.shape()),
            format!("{:?}", logits.shape()),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain {
            op: "confusion_counts",
            msg: format!("threshold must lie in (0,1), got {threshold}"),
        });
    }
    // sigmoid(x) >= t  <=>  x >= logit(t); comparing logits avoids rounding
    // in the sigmoid for large magnitudes.
    let cut = (threshold / (1.0 - threshold)).ln();
    let mut c = ConfusionCounts::default();
    for (i, (&x, &y)) in logits.data().iter().zip(target.data()).enumerate() {
        let y = y.as_f64();
        let t = if y == 1.0 {
            true
        } else if y == 0.0 {
            false
        } else {
            return Err(Error::Domain {
                op: "confusion_counts",
                msg: format!("target must be binary, found {y} at index {i}"),
            });
        };
        match (x.as_f64() >= cut, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Set when any formula hit a zero denominator and was defined as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    let mut degenerate = false;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics {
        precision,
        recall,
        f1,
        iou,
        degenerate,
    }
}

/// Evaluation summary with the underlying counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Report {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

impl Report {
    pub fn new(counts: ConfusionCounts) -> Self {
        Report {
            counts,
            metrics: metrics_from_counts(&counts),
        }
    }

    /// One `metric=value` line per entry, four decimals for the ratios.
    pub fn key_values(&self) -> String {
        let m = &self.metrics;
        let c = &self.counts;
        let mut s = format!(
            "precision={:.4}\nrecall={:.4}\nf1={:.4}\niou={:.4}\n",
            m.precision, m.recall, m.f1, m.iou
        );
        s += &format!("tp={}\nfp={}\ntn={}\nfn={}\n", c.tp, c.fp, c.tn, c.fn_);
        if m.degenerate {
            s += "warning=empty_mask\n";
        }
        s
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.metrics;
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        writeln!(f, "{:-<10} {:->8}", "", "")?;
        for (name, v) in [
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
            ("iou", m.iou),
        ] {
            writeln!(f, "{name:<10} {v:>8.4}")?;
        }
        write!(f, "pixels     {:>8}", self.counts.total())?;
        if m.degenerate {
            write!(f, "\nwarning: a denominator was zero (empty mask); affected metrics set to 0")?;
        }
        Ok(())
    }
}
