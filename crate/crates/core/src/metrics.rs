//! Confusion counts, ROC curves, AUC and optimal-cutoff selection.
//!
//! Scores are P(real); REAL is the positive class (label 1). A sample is
//! predicted positive iff `score >= threshold`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    /// P(real), in [0, 1].
    pub score: f64,
    /// 1 = real (positive), 0 = fake (negative).
    pub label: u8,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8) -> Self {
        ScoredSample { score, label }
    }
}

/// One ROC point; thresholds run from +inf down, (fpr, tpr) from (0,0) to (1,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn confusion(samples: &[ScoredSample], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for s in samples {
        let predicted_positive = s.score >= threshold;
        match (s.label == 1, predicted_positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// TPR = TP / (TP + FN), FPR = FP / (FP + TN). A ratio with an empty
/// denominator is reported as `None`.
pub fn tpr_fpr(c: &ConfusionCounts) -> Result<(Option<f64>, Option<f64>)> {
    let pos = c.tp + c.fn_;
    let neg = c.fp + c.tn;
    if pos == 0 && neg == 0 {
        return Err(Error::EmptyDataset("tpr_fpr: no samples".into()));
    }
    let tpr = (pos > 0).then(|| c.tp as f64 / pos as f64);
    let fpr = (neg > 0).then(|| c.fp as f64 / neg as f64);
    Ok((tpr, fpr))
}

/// Sweep thresholds over the distinct scores, highest first, preceded by a
/// +inf sentinel. Tied scores collapse to a single point.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<RocCurve> {
    let pos = samples.iter().filter(|s| s.label == 1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyDataset(format!(
            "roc_curve needs both classes, got {pos} positive / {neg} negative"
        )));
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal integral of the ROC curve over FPR.
pub fn auc_trapezoid(curve: &RocCurve) -> f64 {
    let mut auc = 0.0;
    for pair in curve.points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    auc
}

/// Fraction of (positive, negative) pairs ranked correctly, ties at 1/2 —
/// the Mann-Whitney route, used as the independent oracle for
/// [`auc_trapezoid`].
pub fn auc_pair_count(samples: &[ScoredSample]) -> Result<f64> {
    let positives: Vec<f64> = samples.iter().filter(|s| s.label == 1).map(|s| s.score).collect();
    let negatives: Vec<f64> = samples.iter().filter(|s| s.label == 0).map(|s| s.score).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyDataset("auc_pair_count needs both classes".into()));
    }
    let mut concordant = 0.0;
    for &p in &positives {
        for &n in &negatives {
            if p > n {
                concordant += 1.0;
            } else if p == n {
                concordant += 0.5;
            }
        }
    }
    Ok(concordant / (positives.len() * negatives.len()) as f64)
}

/// The ROC point nearest (0, 1) in Euclidean distance; ties go to the
/// higher threshold (earlier point).
pub fn optimal_cutoff(curve: &RocCurve) -> RocPoint {
    let mut best = curve.points[0];
    let mut best_d = best.fpr * best.fpr + (1.0 - best.tpr) * (1.0 - best.tpr);
    for p in &curve.points[1..] {
        let d = p.fpr * p.fpr + (1.0 - p.tpr) * (1.0 - p.tpr);
        if d < best_d {
            best = *p;
            best_d = d;
        }
    }
    best
}

/// ROC export: `threshold,fpr,tpr`, one row per point, 9 significant digits.
pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{:.9e},{:.9e},{:.9e}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}
