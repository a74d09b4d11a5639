//! Ranking metrics and evaluation loops.

use std::fmt;

use rayon::prelude::*;

use crate::data::{Batch, Dataset, ItemId};
use crate::model::{predict_scores, ModelConfig, ModelError, ModelParams};

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [10, 20];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("cutoff must be at least 1")]
    ZeroCutoff,
    #[error("target {target} out of range for {num_items} scores")]
    TargetOutOfRange { target: ItemId, num_items: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 1-based rank of `target`. Items with a strictly higher score come first;
/// equal scores are ordered by smaller item ID.
pub fn rank_of_target(scores: &[f64], target: ItemId) -> Result<usize, EvalError> {
    let t = target as usize;
    let own = *scores.get(t).ok_or(EvalError::TargetOutOfRange {
        target,
        num_items: scores.len(),
    })?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > own || (s == own && j < t))
        .count();
    Ok(ahead + 1)
}

/// Fraction of ranks within `k`.
pub fn precision_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank, counting ranks beyond `k` as zero.
pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    let total: f64 = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / r as f64).sum();
    Ok(total / ranks.len() as f64)
}

fn check(ranks: &[usize], k: usize) -> Result<(), EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffMetrics {
    pub k: usize,
    pub precision: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    pub cutoffs: Vec<CutoffMetrics>,
}

impl MetricReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self, EvalError> {
        let cutoffs = ks
            .iter()
            .map(|&k| {
                Ok(CutoffMetrics {
                    k,
                    precision: precision_at_k(ranks, k)?,
                    mrr: mrr_at_k(ranks, k)?,
                })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self {
            samples: ranks.len(),
            cutoffs,
        })
    }

    fn get(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.k == k)
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.get(k).map(|c| c.precision)
    }

    pub fn mrr_at(&self, k: usize) -> Option<f64> {
        self.get(k).map(|c| c.mrr)
    }

    /// `p@k,mrr@k` pairs in cutoff order, as fractions.
    pub fn csv_fields(&self) -> String {
        self.cutoffs
            .iter()
            .map(|c| format!("{},{}", c.precision, c.mrr))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn csv_header(&self) -> String {
        self.cutoffs
            .iter()
            .map(|c| format!("p@{0},mrr@{0}", c.k))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Percentages with two decimals, `P@k, MRR@k` per cutoff.
    pub fn percent_line(&self) -> String {
        self.cutoffs
            .iter()
            .map(|c| format!("{:.2}, {:.2}", c.precision * 100.0, c.mrr * 100.0))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .cutoffs
            .iter()
            .map(|c| format!("P@{0}={1:.4} MRR@{0}={2:.4}", c.k, c.precision, c.mrr))
            .collect();
        write!(f, "{} ({} samples)", parts.join(" "), self.samples)
    }
}

/// Rank of every label under the model in evaluation mode, in dataset order.
pub fn model_ranks(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<usize>, EvalError> {
    let batch_size = batch_size.max(1);
    let per_batch: Vec<Result<Vec<usize>, EvalError>> = dataset
        .sessions()
        .par_chunks(batch_size)
        .map(|chunk| {
            let batch = Batch::from_sessions(chunk);
            let scores = predict_scores(params, config, &batch)?;
            batch
                .labels
                .iter()
                .enumerate()
                .map(|(b, &label)| rank_of_target(scores.row(b), label))
                .collect()
        })
        .collect();
    let mut ranks = Vec::with_capacity(dataset.len());
    for chunk in per_batch {
        ranks.extend(chunk?);
    }
    Ok(ranks)
}

/// Evaluation-mode metrics over `dataset`.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
    ks: &[usize],
    batch_size: usize,
) -> Result<MetricReport, EvalError> {
    MetricReport::from_ranks(&model_ranks(params, config, dataset, batch_size)?, ks)
}

/// Scores every item by how often it appears as a training label.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    counts: Vec<f64>,
}

impl Popularity {
    pub fn fit(train: &Dataset) -> Self {
        let mut counts = vec![0.0; train.num_items()];
        for s in train.sessions() {
            counts[s.label as usize] += 1.0;
        }
        Self { counts }
    }

    pub fn scores(&self) -> &[f64] {
        &self.counts
    }

    pub fn ranks(&self, dataset: &Dataset) -> Result<Vec<usize>, EvalError> {
        dataset
            .sessions()
            .iter()
            .map(|s| rank_of_target(&self.counts, s.label))
            .collect()
    }

    pub fn evaluate(&self, dataset: &Dataset, ks: &[usize]) -> Result<MetricReport, EvalError> {
        MetricReport::from_ranks(&self.ranks(dataset)?, ks)
    }
}
