//! Multi-label emotion head on the `[CLS]` state, its binary cross-entropy
//! objective, thresholded prediction and the evaluation metrics.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{bce_term, sigmoid, Graph, Var};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const PREFIX: &str = "head";
pub const HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct EmotionHead {
    pub mlp: Mlp,
    pub d_model: usize,
    pub n_classes: usize,
}

impl EmotionHead {
    pub fn new<R: Real>(store: &mut ParamStore<R>, task: &str, d_model: usize, n_classes: usize, seed: u64) -> Self {
        let mlp = Mlp::new(store, &format!("{PREFIX}.{task}"), d_model, HIDDEN, n_classes, seed);
        EmotionHead { mlp, d_model, n_classes }
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, cls: Var) -> Var {
        self.mlp.forward(g, cls)
    }

    pub fn logits<R: Real>(&self, store: &ParamStore<R>, cls: &[R]) -> Result<Vec<R>> {
        if cls.len() != self.d_model {
            bail!(Shape, "[CLS] vector of {} vs head input {}", cls.len(), self.d_model);
        }
        let mut g = Graph::new(store);
        let x = g.constant(Tensor::new(&[1, cls.len()], cls.to_vec()));
        let y = self.forward(&mut g, x);
        Ok(g.value(y).data().to_vec())
    }
}

/// Mean over classes of the numerically stable binary cross-entropy with logits.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        bail!(Shape, "{} logits for {} labels", logits.len(), labels.len());
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        bail!(InvalidInput, "label {y} is not binary");
    }
    Ok(logits.iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum::<f64>() / logits.len() as f64)
}

/// Class `c` is present iff `σ(z_c) ≥ threshold`.
pub fn predict<R: Real>(logits: &[R], threshold: f64) -> Vec<bool> {
    logits.iter().map(|&z| sigmoid(z.f64()) >= threshold).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub tn: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(n_classes: usize) -> Self {
        let z = alloc::vec![0; n_classes];
        ConfusionCounts { tp: z.clone(), fp: z.clone(), tn: z.clone(), fn_: z }
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn add(&mut self, labels: &[bool], predicted: &[bool]) -> Result<()> {
        let c = self.n_classes();
        if labels.len() != c || predicted.len() != c {
            bail!(Shape, "{} labels and {} predictions for {c} classes", labels.len(), predicted.len());
        }
        for k in 0..c {
            match (labels[k], predicted[k]) {
                (true, true) => self.tp[k] += 1,
                (false, true) => self.fp[k] += 1,
                (false, false) => self.tn[k] += 1,
                (true, false) => self.fn_[k] += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            bail!(Shape, "cannot merge counts over {} and {} classes", self.n_classes(), other.n_classes());
        }
        for k in 0..self.n_classes() {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.tn[k] += other.tn[k];
            self.fn_[k] += other.fn_[k];
        }
        Ok(())
    }

    pub fn positives(&self, c: usize) -> u64 {
        self.tp[c] + self.fn_[c]
    }

    pub fn negatives(&self, c: usize) -> u64 {
        self.tn[c] + self.fp[c]
    }

    pub fn n_samples(&self) -> u64 {
        if self.n_classes() == 0 {
            0
        } else {
            self.positives(0) + self.negatives(0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub wa: f64,
    pub acc: f64,
    pub f1_micro: f64,
    /// classes lacking positives or negatives; they contribute only their defined half to WA
    pub degenerate_classes: Vec<usize>,
}

/// Weighted accuracy, per-class accuracy averaged over classes, and the
/// support-weighted F1.
pub fn metrics(counts: &ConfusionCounts) -> Result<Metrics> {
    let c = counts.n_classes();
    let n = counts.n_samples();
    if c == 0 || n == 0 {
        bail!(NotEnoughData, "empty evaluation set");
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let total_labels = (c as u64 * n) as f64;
    let (mut wa, mut acc, mut f1) = (0.0, 0.0, 0.0);
    let mut degenerate = Vec::new();
    for k in 0..c {
        let (p, q) = (counts.positives(k), counts.negatives(k));
        if p == 0 || q == 0 {
            degenerate.push(k);
        }
        wa += ratio(counts.tp[k], p) + ratio(counts.tn[k], q);
        acc += (counts.tp[k] + counts.tn[k]) as f64 / (p + q) as f64;
        let hits = (counts.tp[k] + counts.tn[k]) as f64;
        let denom = counts.tp[k] as f64 + 0.5 * (counts.fp[k] + counts.fn_[k]) as f64;
        let per_class = if denom == 0.0 { 0.0 } else { counts.tp[k] as f64 / denom };
        f1 += hits / total_labels * per_class;
    }
    Ok(Metrics { wa: wa / (2.0 * c as f64), acc: acc / c as f64, f1_micro: f1, degenerate_classes: degenerate })
}
