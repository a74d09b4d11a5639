use crate::data::ItemId;
use crate::numerics::{Graph, Tensor, Var, NORM_FLOOR};

use super::TrainError;

/// How the `(2 - 2p)^gamma` weight takes part in differentiation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FactorMode {
    /// The weight scales each sample's gradient but receives none itself.
    #[default]
    Detached,
    Differentiable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub factor: FactorMode,
}

impl LossConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            factor: FactorMode::Detached,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.gamma >= 0.0 && self.gamma.is_finite() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!(
                "gamma must be a finite non-negative number, got {}",
                self.gamma
            )))
        }
    }
}

/// Per-sample weight `(2 - 2p)^gamma`.
pub fn modulating_factor(p: f64, gamma: f64) -> f64 {
    (2.0 - 2.0 * p).powf(gamma)
}

/// Mean over the batch of `-(2 - 2p)^gamma * ln(p)`, where `p` is the
/// probability each row of `scores` (`[B, N]`) gives its target.
pub fn aw_loss(graph: &mut Graph<'_>, scores: Var, targets: &[ItemId], config: &LossConfig) -> Result<Var, TrainError> {
    let shape = graph.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "scores of shape {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let num_items = shape[1];
    let cols = targets
        .iter()
        .map(|&t| {
            if (t as usize) < num_items {
                Ok(t as usize)
            } else {
                Err(TrainError::TargetOutOfRange { target: t, num_items })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let p = graph.pick_columns(scores, &cols)?;
    let clamped = graph.clamp_min(p, NORM_FLOOR)?;
    let log_p = graph.ln(clamped)?;
    let factor = match config.factor {
        FactorMode::Detached => {
            let weights: Vec<f64> = graph
                .value(p)
                .data()
                .iter()
                .map(|&p| modulating_factor(p, config.gamma))
                .collect();
            graph.constant(Tensor::vector(weights)?)
        }
        FactorMode::Differentiable => {
            let base = graph.scale(p, -2.0)?;
            let base = graph.shift(base, 2.0)?;
            graph.pow(base, config.gamma)?
        }
    };
    let weighted = graph.mul(log_p, factor)?;
    let total = graph.sum(weighted)?;
    Ok(graph.scale(total, -1.0 / targets.len() as f64)?)
}

/// The loss value for given target probabilities, without a graph.
pub fn aw_loss_value(probs: &[f64], gamma: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .map(|&p| modulating_factor(p, gamma) * p.max(NORM_FLOOR).ln())
        .sum();
    -total / probs.len() as f64
}
