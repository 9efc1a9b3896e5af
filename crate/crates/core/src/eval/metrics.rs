use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest logit; ties go to the lowest class id.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Zero-based rank of `label`: classes with a higher logit, plus tied classes with a lower id.
pub fn rank_of(logits: &[f32], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, v)| *v > target || (*v == target && c < label))
        .count()
}

pub fn topk_accuracy(logits: &[Vec<f32>], labels: &[usize], k: usize) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Data("no predictions".into()));
    }
    let classes = logits[0].len();
    if k == 0 || k > classes {
        return Err(Error::Config(format!("k = {k} is outside 1..={classes}")));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| rank_of(l, y) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::new(classes);
        for (truth, pred) in pairs {
            m.add(truth, pred);
        }
        m
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Recall of every class with at least one sample.
    pub fn recalls(&self) -> Vec<(usize, f64)> {
        (0..self.classes())
            .filter(|&c| self.support(c) > 0)
            .map(|c| (c, self.counts[c][c] as f64 / self.support(c) as f64))
            .collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("empty confusion matrix".into()));
        }
        let correct: u64 = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Mean recall over represented classes.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        self.balanced_accuracy_over(&(0..self.classes()).collect::<Vec<_>>())
    }

    /// Mean recall over the represented classes of `subset`.
    pub fn balanced_accuracy_over(&self, subset: &[usize]) -> Result<f64> {
        let recalls: Vec<f64> = self
            .recalls()
            .into_iter()
            .filter(|(c, _)| subset.contains(c))
            .map(|(_, r)| r)
            .collect();
        if recalls.is_empty() {
            return Err(Error::Data("no class in the subset has samples".into()));
        }
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Baseline {
    pub classes: usize,
    pub samples: usize,
    pub top1: f64,
    pub balanced: f64,
}

/// Metrics of i.i.d. uniform logits against uniformly drawn labels.
pub fn random_baseline(classes: usize, samples: usize, seed: u64) -> Result<Baseline> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        logits.push((0..classes).map(|_| rng.random::<f32>()).collect::<Vec<_>>());
        labels.push(rng.random_range(0..classes));
    }
    let confusion = ConfusionMatrix::from_pairs(
        classes,
        labels.iter().zip(&logits).map(|(&y, l)| (y, argmax(l))),
    );
    Ok(Baseline {
        classes,
        samples,
        top1: topk_accuracy(&logits, &labels, 1)?,
        balanced: confusion.balanced_accuracy()?,
    })
}
