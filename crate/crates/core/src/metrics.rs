//! Classification metrics over a confusion matrix, and ROC AUC.
//!
//! Weighted metrics weight each class by its support (row sum) divided by
//! the total count. Per-class specificity is the one-vs-rest true-negative
//! rate.

use std::fmt;

use crate::error::{Error, Result};

/// `K x K` counts, rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion_matrix", "rows must form a non-empty square matrix"));
        }
        Ok(Self {
            k,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} labels vs {} predictions", truth.len(), predicted.len()),
            ));
        }
        let mut cm = Self::zeros(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Range(format!("class pair ({t}, {p}) with {k} classes")));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sums.
    pub fn class_support(&self) -> Vec<u64> {
        self.counts.chunks(self.k).map(|r| r.iter().sum()).collect()
    }

    /// Column sums.
    pub fn predicted_counts(&self) -> Vec<u64> {
        (0..self.k).map(|c| (0..self.k).map(|r| self.get(r, c)).sum()).collect()
    }

    /// Applies the same class permutation to rows and columns:
    /// new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                out.counts[i * self.k + j] = self.get(perm[i], perm[j]);
            }
        }
        out
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Undefined("confusion matrix has no samples".into())),
            n => Ok(n as f64),
        }
    }

    fn recall(&self, c: usize) -> Option<f64> {
        let support = self.class_support()[c];
        (support > 0).then(|| self.get(c, c) as f64 / support as f64)
    }

    fn precision(&self, c: usize) -> Option<f64> {
        let predicted = self.predicted_counts()[c];
        (predicted > 0).then(|| self.get(c, c) as f64 / predicted as f64)
    }

    /// One-vs-rest true-negative rate of class `c`.
    fn specificity(&self, c: usize) -> Option<f64> {
        let n = self.total();
        let support = self.class_support()[c];
        let negatives = n - support;
        let false_pos = self.predicted_counts()[c] - self.get(c, c);
        (negatives > 0).then(|| (negatives - false_pos) as f64 / negatives as f64)
    }

    fn support_weighted(&self, per_class: impl Fn(usize) -> f64) -> Result<f64> {
        let n = self.nonempty()?;
        Ok(self
            .class_support()
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0)
            .map(|(c, &s)| s as f64 / n * per_class(c))
            .sum())
    }
}

/// Mean per-class recall over classes with non-zero support.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let recalls: Vec<f64> = (0..cm.k).filter_map(|c| cm.recall(c)).collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Support-weighted sensitivity and specificity.
pub fn weighted_sen_spe(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    let sen = cm.support_weighted(|c| cm.recall(c).unwrap_or(0.0))?;
    // A class that is the only one present has no negatives; its TNR is
    // vacuously 1.
    let spe = cm.support_weighted(|c| cm.specificity(c).unwrap_or(1.0))?;
    Ok((sen, spe))
}

/// Cohen's kappa. Defined as 0 when chance agreement is 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let p_o = (0..cm.k).map(|c| cm.get(c, c)).sum::<u64>() as f64 / n;
    let rows = cm.class_support();
    let cols = cm.predicted_counts();
    let p_e = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Support-weighted per-class F1; a class with `P + R = 0` scores 0.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.support_weighted(|c| {
        let p = cm.precision(c).unwrap_or(0.0);
        let r = cm.recall(c).unwrap_or(0.0);
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Runs in `O(n log n)`.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite(format!("roc_auc score {}", s.score)));
    }
    let positives = samples.iter().filter(|s| s.label).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined(format!(
            "roc_auc needs both classes, got {positives} positives and {negatives} negatives"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Count, for each positive, negatives strictly below plus half the ties.
    let mut wins = 0.0f64;
    let mut negatives_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let group = &sorted[i..j];
        let pos = group.iter().filter(|s| s.label).count() as f64;
        let neg = group.len() as f64 - pos;
        wins += pos * negatives_below as f64 + 0.5 * pos * neg;
        negatives_below += neg as u64;
        i = j;
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

/// Evaluation summary written as `key value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub kappa: f64,
    pub f1: f64,
    pub b_acc: f64,
    pub sen: f64,
    pub spe: f64,
    /// `None` when the restricted subset lacks one of the two classes.
    pub auc_narrow_synechiae: Option<f64>,
}

impl EvalReport {
    /// Metrics from a confusion matrix plus the AUC sample set.
    pub fn from_parts(split: &str, cm: &ConfusionMatrix, auc_samples: &[ScoredSample]) -> Result<Self> {
        let (sen, spe) = weighted_sen_spe(cm)?;
        Ok(Self {
            split: split.to_string(),
            kappa: cohen_kappa(cm)?,
            f1: weighted_f1(cm)?,
            b_acc: balanced_accuracy(cm)?,
            sen,
            spe,
            auc_narrow_synechiae: roc_auc(auc_samples).ok(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split {}", self.split)?;
        writeln!(f, "kappa {:.6}", self.kappa)?;
        writeln!(f, "f1 {:.6}", self.f1)?;
        writeln!(f, "b_acc {:.6}", self.b_acc)?;
        writeln!(f, "sen {:.6}", self.sen)?;
        writeln!(f, "spe {:.6}", self.spe)?;
        match self.auc_narrow_synechiae {
            Some(a) => writeln!(f, "auc_narrow_synechiae {a:.6}"),
            None => writeln!(f, "auc_narrow_synechiae nan"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![4, 1, 0], vec![1, 3, 1], vec![0, 1, 4]]).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(balanced_accuracy(&cm).unwrap(), 1.0);
        assert_eq!(weighted_sen_spe(&cm).unwrap(), (1.0, 1.0));
        assert_eq!(cohen_kappa(&cm).unwrap(), 1.0);
        assert_eq!(weighted_f1(&cm).unwrap(), 1.0);
    }

    #[test]
    fn fixture_values() {
        let cm = fixture();
        assert!(close(balanced_accuracy(&cm).unwrap(), 0.733333));
        let (sen, spe) = weighted_sen_spe(&cm).unwrap();
        assert!(close(sen, 0.733333));
        assert!(close(spe, 0.866667));
        assert!(close(cohen_kappa(&cm).unwrap(), 0.6));
        assert!(close(weighted_f1(&cm).unwrap(), 0.733333));
    }

    #[test]
    fn constant_predictor() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![5, 0, 0], vec![5, 0, 0]]).unwrap();
        assert!(close(balanced_accuracy(&cm).unwrap(), 1.0 / 3.0));
        let (sen, spe) = weighted_sen_spe(&cm).unwrap();
        assert!(close(sen, 1.0 / 3.0));
        assert!(close(spe, 2.0 / 3.0));
        assert!(close(cohen_kappa(&cm).unwrap(), 0.0));
    }

    #[test]
    fn zero_support_class_excluded() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1, 0], vec![0, 3, 0], vec![0, 0, 0]]).unwrap();
        let ba = balanced_accuracy(&cm).unwrap();
        assert!(close(ba, (2.0 / 3.0 + 1.0) / 2.0));
        let f1 = weighted_f1(&cm).unwrap();
        let f1_0 = 2.0 * 1.0 * (2.0 / 3.0) / (1.0 + 2.0 / 3.0);
        let f1_1 = 2.0 * 0.75 * 1.0 / 1.75;
        assert!(close(f1, 0.5 * f1_0 + 0.5 * f1_1));
    }

    #[test]
    fn empty_matrix_errors() {
        let cm = ConfusionMatrix::zeros(3);
        assert!(balanced_accuracy(&cm).is_err());
        assert!(weighted_sen_spe(&cm).is_err());
        assert!(cohen_kappa(&cm).is_err());
    }

    #[test]
    fn degenerate_kappa_is_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!(cohen_kappa(&cm).unwrap(), 0.0);
    }

    #[test]
    fn auc_cases() {
        let s = |scores: &[f64], labels: &[u8]| -> Vec<ScoredSample> {
            scores.iter().zip(labels).map(|(&v, &l)| ScoredSample::new(v, l == 1)).collect()
        };
        assert_eq!(roc_auc(&s(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&s(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(roc_auc(&s(&[0.5; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        assert!(matches!(roc_auc(&s(&[0.1, 0.2], &[1, 1])), Err(Error::Undefined(_))));
    }

    #[test]
    fn report_format() {
        let cm = fixture();
        let r = EvalReport::from_parts("test", &cm, &[]).unwrap();
        let text = r.to_string();
        assert!(text.contains("kappa 0.600000\n"));
        assert!(text.contains("auc_narrow_synechiae nan\n"));
        assert!(text.starts_with("split test\n"));
    }
}
