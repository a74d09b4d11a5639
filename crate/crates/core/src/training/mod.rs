//! Loss, optimizer, training loop and checkpoints.

mod adam;
mod checkpoint;
mod loss;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, Batch, Dataset, ItemId};
use crate::eval::{evaluate, EvalError, MetricReport, DEFAULT_KS};
use crate::model::{forward, Mode, ModelConfig, ModelError, ModelParams};
use crate::numerics::{Graph, TensorError};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError, TrainState, MAGIC, VERSION};
pub use loss::{aw_loss, aw_loss_value, modulating_factor, FactorMode, LossConfig};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("target {target} out of range for {num_items} items")]
    TargetOutOfRange { target: ItemId, num_items: usize },
    #[error("training diverged in epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            epochs: 50,
            batch_size: 100,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {beta}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean of the batch losses.
    pub mean_loss: f64,
    pub samples: usize,
    pub seconds: f64,
}

impl EpochStats {
    pub fn samples_per_sec(&self) -> f64 {
        self.samples as f64 / self.seconds.max(f64::MIN_POSITIVE)
    }
}

/// Owns parameters, optimizer state and the RNG that drives
/// initialization, shuffling and dropout.
pub struct Trainer {
    model: ModelConfig,
    loss: LossConfig,
    config: TrainConfig,
    params: ModelParams,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, loss: LossConfig, config: TrainConfig) -> Result<Self, TrainError> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&model, &mut rng);
        Self::assemble(model, loss, config, params, rng)
    }

    /// Starts from given parameters; the RNG still follows `config.seed`.
    pub fn with_params(
        model: ModelConfig,
        loss: LossConfig,
        config: TrainConfig,
        params: ModelParams,
    ) -> Result<Self, TrainError> {
        model.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::assemble(model, loss, config, params, rng)
    }

    fn assemble(
        model: ModelConfig,
        loss: LossConfig,
        config: TrainConfig,
        params: ModelParams,
        rng: ChaCha8Rng,
    ) -> Result<Self, TrainError> {
        loss.validate()?;
        config.validate()?;
        let optimizer = Adam::new(config.adam(), params.tensors());
        Ok(Self {
            model,
            loss,
            config,
            params,
            optimizer,
            rng,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            epoch: self.epoch,
            adam_step: self.optimizer.steps(),
            seed: self.config.seed,
            gamma: self.loss.gamma,
        }
    }

    pub fn checkpoint(&self, vocab_digest: Option<String>) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            state: self.state(),
            vocab_digest,
            params: self.params.clone(),
        }
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn train_batch(&mut self, batch: &Batch) -> Result<f64, TrainError> {
        let Self {
            model,
            loss,
            params,
            rng,
            ..
        } = self;
        let mut graph = Graph::new();
        let vars = params.register(&mut graph, true);
        let out = forward(&mut graph, &vars, model, batch, &mut Mode::Train(rng))?;
        let loss_var = aw_loss(&mut graph, out.scores, &batch.labels, loss)?;
        let value = graph.value(loss_var).item().unwrap_or(f64::NAN);
        graph.backward(loss_var)?;
        let grads: Vec<_> = vars.all().into_iter().map(|v| graph.take_grad(v)).collect();
        drop(graph);
        self.optimizer.step(&mut self.params.tensors_mut(), &grads)?;
        Ok(value)
    }

    /// One shuffled pass over `dataset`.
    pub fn train_epoch(&mut self, dataset: &Dataset) -> Result<EpochStats, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut order_rng = ChaCha8Rng::from_rng(&mut self.rng).map_err(|e| TrainError::Internal(e.to_string()))?;
        let mut weighted = 0.0;
        for (index, batch) in make_batches(dataset, self.config.batch_size, true, &mut order_rng).enumerate() {
            let value = self.train_batch(&batch).map_err(|e| diverged(e, epoch, index))?;
            if !value.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: index,
                    detail: format!("loss {value}"),
                });
            }
            weighted += value * batch.size() as f64;
        }
        self.epoch = epoch;
        let stats = EpochStats {
            mean_loss: weighted / dataset.len() as f64,
            samples: dataset.len(),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {epoch}: loss {:.6}, {:.0} samples/s",
            stats.mean_loss,
            stats.samples_per_sec()
        );
        Ok(stats)
    }
}

/// Evaluation-mode loss on one batch.
pub fn batch_loss(params: &ModelParams, model: &ModelConfig, batch: &Batch, loss: &LossConfig) -> Result<f64, TrainError> {
    let mut graph = Graph::new();
    let vars = params.register(&mut graph, false);
    let out = forward(&mut graph, &vars, model, batch, &mut Mode::Eval)?;
    let loss_var = aw_loss(&mut graph, out.scores, &batch.labels, loss)?;
    Ok(graph.value(loss_var).item().unwrap_or(f64::NAN))
}

/// Evaluation-mode loss and its gradient for every parameter tensor, in
/// [`ModelParams::tensors`] order.
pub fn batch_gradients(
    params: &ModelParams,
    model: &ModelConfig,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<(f64, Vec<crate::numerics::Tensor>), TrainError> {
    let mut graph = Graph::new();
    let vars = params.register(&mut graph, true);
    let out = forward(&mut graph, &vars, model, batch, &mut Mode::Eval)?;
    let loss_var = aw_loss(&mut graph, out.scores, &batch.labels, loss)?;
    let value = graph.value(loss_var).item().unwrap_or(f64::NAN);
    graph.backward(loss_var)?;
    let grads = vars
        .all()
        .into_iter()
        .map(|v| {
            graph
                .take_grad(v)
                .ok_or_else(|| TrainError::Internal(format!("no gradient for node {}", v.index())))
        })
        .collect::<Result<_, _>>()?;
    Ok((value, grads))
}

fn diverged(err: TrainError, epoch: usize, batch: usize) -> TrainError {
    let non_finite = |e: &TensorError| matches!(e, TensorError::NonFinite { .. });
    match &err {
        TrainError::Tensor(e) | TrainError::Model(ModelError::Tensor(e)) if non_finite(e) => TrainError::Divergence {
            epoch,
            batch,
            detail: e.to_string(),
        },
        _ => err,
    }
}

/// One line of the per-epoch metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub loss: f64,
    pub report: MetricReport,
    pub seconds: f64,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "epoch,loss,p@10,mrr@10,p@20,mrr@20,seconds";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.report.csv_fields(), self.seconds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    /// Checkpoint with the highest MRR@20; the initial parameters when no
    /// epoch ran.
    pub best: Checkpoint,
    pub best_report: Option<MetricReport>,
    pub log: Vec<MetricRow>,
}

/// Trains for `config.epochs` epochs, evaluating on `test` after each and
/// keeping the parameters with the best MRR@20 (earliest on ties).
pub fn fit(
    trainer: &mut Trainer,
    train: &Dataset,
    test: &Dataset,
    vocab_digest: Option<String>,
    mut on_epoch: impl FnMut(&MetricRow),
) -> Result<FitOutcome, TrainError> {
    let mut best = trainer.checkpoint(vocab_digest.clone());
    let mut best_report: Option<MetricReport> = None;
    let mut log = Vec::with_capacity(trainer.config.epochs);
    for _ in 0..trainer.config.epochs {
        let stats = trainer.train_epoch(train)?;
        let report = evaluate(&trainer.params, &trainer.model, test, &DEFAULT_KS, trainer.config.batch_size)?;
        let row = MetricRow {
            epoch: trainer.epoch,
            loss: stats.mean_loss,
            report: report.clone(),
            seconds: stats.seconds,
        };
        on_epoch(&row);
        let mrr = report.mrr_at(20).unwrap_or(0.0);
        if best_report.as_ref().is_none_or(|b| mrr > b.mrr_at(20).unwrap_or(0.0)) {
            best = trainer.checkpoint(vocab_digest.clone());
            best_report = Some(report);
        }
        log.push(row);
    }
    Ok(FitOutcome { best, best_report, log })
}
