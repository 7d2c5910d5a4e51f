//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, validation_err, Result};

/// `counts[target * k + pred]` over all non-ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub pixel_accuracy: f64,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.k + pred]
    }

    /// Pixels whose target equals `ignore` are skipped.
    pub fn add(&mut self, pred: &[usize], target: &[usize], ignore: usize) -> Result<()> {
        if pred.len() != target.len() {
            return Err(dim_err!("{} predictions for {} targets", pred.len(), target.len()));
        }
        for (&p, &t) in pred.iter().zip(target) {
            if t == ignore {
                continue;
            }
            if p >= self.k || t >= self.k {
                return Err(validation_err!("class pair ({t}, {p}) outside {} classes", self.k));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hits: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        hits as f64 / total as f64
    }

    /// IoU per class; `None` where the class is absent from both maps.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c);
                let row: u64 = (0..self.k).map(|p| self.count(c, p)).sum();
                let col: u64 = (0..self.k).map(|t| self.count(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in prediction or target.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn scores(&self) -> SegScores {
        SegScores { pixel_accuracy: self.pixel_accuracy(), miou: self.miou() }
    }
}
