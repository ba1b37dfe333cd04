use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts, rows = true class, columns = prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn new(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape("metrics", &[predictions.len()], &[labels.len()]));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(Error::IndexOutOfRange {
                    index: p.max(l),
                    extent: classes,
                });
            }
            confusion[l][p] += 1;
        }
        Ok(Self { confusion })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    /// Overall accuracy.
    pub fn oa(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// Per-class recall; `None` for classes absent from the labels.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    /// Mean per-class accuracy over the classes that occur.
    pub fn macc(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}
