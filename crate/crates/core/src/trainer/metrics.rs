use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_answers, Parameters};
use crate::task::{Answer, Sequence};

/// Two-class confusion counts, indexed `[truth][prediction]` with
/// 0 = DIFFERENT and 1 = SAME.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; 2]; 2],
}

impl Confusion {
    pub fn add(&mut self, truth: Answer, predicted: Answer) {
        self.counts[truth.label() as usize][predicted.label() as usize] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        self.counts[0][0] + self.counts[1][1]
    }

    /// Precision of class `c`; 0 when the class is never predicted.
    pub fn precision(&self, c: usize) -> f64 {
        let predicted = self.counts[0][c] + self.counts[1][c];
        if predicted == 0 {
            0.0
        } else {
            self.counts[c][c] as f64 / predicted as f64
        }
    }

    /// Recall of class `c`; 0 when the class never occurs.
    pub fn recall(&self, c: usize) -> f64 {
        let actual = self.counts[c][0] + self.counts[c][1];
        if actual == 0 {
            0.0
        } else {
            self.counts[c][c] as f64 / actual as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// `[DIFFERENT, SAME]`
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub mean_logit_diff: Option<f64>,
    pub confusion: Confusion,
    pub total: usize,
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion, mean_logit_diff: Option<f64>) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(Error::Empty("no scored predictions".into()));
        }
        let precision = [confusion.precision(0), confusion.precision(1)];
        let recall = [confusion.recall(0), confusion.recall(1)];
        Ok(Self {
            accuracy: confusion.correct() as f64 / total as f64,
            macro_precision: (precision[0] + precision[1]) / 2.0,
            macro_recall: (recall[0] + recall[1]) / 2.0,
            precision,
            recall,
            mean_logit_diff,
            confusion,
            total,
        })
    }

    /// Metrics from aligned truth/prediction label slices.
    pub fn from_labels(truth: &[Answer], predicted: &[Answer]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion.add(t, p);
        }
        Self::from_confusion(confusion, None)
    }
}

/// Model metrics over the scored tuples of `sequences`.
pub fn evaluate(params: &Parameters, sequences: &[Sequence]) -> Result<Metrics> {
    if sequences.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let per_seq = sequences
        .par_iter()
        .map(|seq| {
            let preds = predict_answers(params, &seq.tokens)?;
            let mut c = Confusion::default();
            let mut diff = 0.0f64;
            for (p, &truth) in preds.iter().zip(&seq.labels) {
                c.add(truth, p.answer);
                diff += p.logit_diff as f64;
            }
            Ok((c, diff, preds.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = Confusion::default();
    let mut diff = 0.0;
    let mut n = 0;
    for (c, d, k) in per_seq {
        for t in 0..2 {
            for p in 0..2 {
                confusion.counts[t][p] += c.counts[t][p];
            }
        }
        diff += d;
        n += k;
    }
    Metrics::from_confusion(confusion, Some(diff / n.max(1) as f64))
}
