//! Overall accuracy, balanced accuracy and macro F1 from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "class ({truth}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    fn predicted_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let correct: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    Ok(correct as f64 / total as f64)
}

/// Mean per-class recall. Classes with no true samples are left out.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = (0..cm.classes)
        .filter_map(|c| {
            let support = cm.support(c);
            if support == 0 {
                log::debug!("balanced accuracy: class {c} has no samples, excluded");
                None
            } else {
                Some(cm.get(c, c) as f64 / support as f64)
            }
        })
        .collect();
    if recalls.is_empty() {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Macro F1 over classes that occur among the true labels or the
/// predictions. A class with zero precision and recall contributes 0.
pub fn f1_score(cm: &ConfusionMatrix) -> Result<f64> {
    let mut scores = Vec::new();
    for c in 0..cm.classes {
        let (support, predicted) = (cm.support(c), cm.predicted_count(c));
        if support == 0 && predicted == 0 {
            continue;
        }
        let tp = cm.get(c, c) as f64;
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        scores.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub ba: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            oa: overall_accuracy(cm)?,
            ba: balanced_accuracy(cm)?,
            f1: f1_score(cm)?,
        })
    }

    /// Unweighted mean.
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            oa: sum(|m| m.oa),
            ba: sum(|m| m.ba),
            f1: sum(|m| m.f1),
        }
    }
}
