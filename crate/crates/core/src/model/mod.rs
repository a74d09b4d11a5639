//! The recommender: position-aware item embeddings, causally masked
//! instant-interest attention, trend attention over those interests, and
//! cosine scoring against the whole catalog.

mod forward;

use rand::Rng;
use rand::RngCore;

use crate::numerics::{Graph, Tensor, TensorError, Var};

pub use forward::{
    attention, embed_session, forward, interest_enhancing, interest_tracking, predict, predict_scores, score, AttentionOutput,
    Embedded, ForwardOutput, ForwardTrace,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("session {index} in the batch is empty")]
    EmptySession { index: usize },
    #[error("item {id} out of range for a catalog of {num_items} items")]
    ItemOutOfRange { id: u32, num_items: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_items: usize,
    pub embed_dim: usize,
    /// Inner width of the position-wise feed-forward block.
    pub ffn_dim: usize,
    /// Sessions keep only their most recent `max_len` items.
    pub max_len: usize,
    pub dropout_rate: f64,
    /// Divides the cosine logits before the catalog softmax.
    pub score_temperature: f64,
}

impl ModelConfig {
    pub fn new(num_items: usize) -> Self {
        Self {
            num_items,
            embed_dim: 100,
            ffn_dim: 100,
            max_len: 50,
            dropout_rate: 0.2,
            score_temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_items == 0 {
            return bad("num_items must be positive".into());
        }
        if self.embed_dim == 0 || self.ffn_dim == 0 {
            return bad("embed_dim and ffn_dim must be positive".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.score_temperature > 0.0 && self.score_temperature.is_finite()) {
            return bad(format!("score_temperature must be positive, got {}", self.score_temperature));
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Name and shape of every parameter tensor, in canonical order.
    pub fn param_shapes(&self) -> [(&'static str, Vec<usize>); 10] {
        let (n, d, f, m) = (self.num_items, self.embed_dim, self.ffn_dim, self.max_len);
        [
            ("item_embed", vec![n, d]),
            ("pos_embed", vec![m, d]),
            ("query_weight", vec![d, d]),
            ("query_bias", vec![d]),
            ("ffn_w1", vec![d, f]),
            ("ffn_b1", vec![f]),
            ("ffn_w2", vec![f, d]),
            ("ffn_b2", vec![d]),
            ("ln_gain", vec![d]),
            ("ln_bias", vec![d]),
        ]
    }
}

/// All trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub item_embed: Tensor,
    pub pos_embed: Tensor,
    pub query_weight: Tensor,
    pub query_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// Graph handles for a registered [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub item_embed: Var,
    pub pos_embed: Var,
    pub query_weight: Var,
    pub query_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 10] {
        [
            self.item_embed,
            self.pos_embed,
            self.query_weight,
            self.query_bias,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln_gain,
            self.ln_bias,
        ]
    }
}

impl ModelParams {
    /// Weights and embeddings uniform in `±1/sqrt(d)`; biases zero; layer-norm
    /// gain one.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (n, d, f, m) = (config.num_items, config.embed_dim, config.ffn_dim, config.max_len);
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            item_embed: Tensor::uniform(vec![n, d], bound, rng),
            pos_embed: Tensor::uniform(vec![m, d], bound, rng),
            query_weight: Tensor::uniform(vec![d, d], bound, rng),
            query_bias: Tensor::zeros(vec![d]),
            ffn_w1: Tensor::uniform(vec![d, f], bound, rng),
            ffn_b1: Tensor::zeros(vec![f]),
            ffn_w2: Tensor::uniform(vec![f, d], bound, rng),
            ffn_b2: Tensor::zeros(vec![d]),
            ln_gain: Tensor::ones(vec![d]),
            ln_bias: Tensor::zeros(vec![d]),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mut shapes = config.param_shapes().into_iter().map(|(_, s)| Tensor::zeros(s));
        let mut next = || shapes.next().expect("ten shapes");
        Self {
            item_embed: next(),
            pos_embed: next(),
            query_weight: next(),
            query_bias: next(),
            ffn_w1: next(),
            ffn_b1: next(),
            ffn_w2: next(),
            ffn_b2: next(),
            ln_gain: next(),
            ln_bias: next(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.item_embed,
            &self.pos_embed,
            &self.query_weight,
            &self.query_bias,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln_gain,
            &self.ln_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.item_embed,
            &mut self.pos_embed,
            &mut self.query_weight,
            &mut self.query_bias,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    pub fn named(&self, config: &ModelConfig) -> Vec<(&'static str, &Tensor)> {
        config.param_shapes().iter().map(|(n, _)| *n).zip(self.tensors()).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from named tensors, requiring exactly the names
    /// and shapes that `config` implies.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut params = Self::zeros(config);
        let shapes = config.param_shapes();
        let mut seen = [false; 10];
        for (name, tensor) in tensors {
            let slot = shapes
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::UnexpectedTensor(name.clone()))?;
            if tensor.shape() != shapes[slot].1.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shapes[slot].1.clone(),
                    found: tensor.shape().to_vec(),
                });
            }
            seen[slot] = true;
            *params.tensors_mut()[slot] = tensor;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(ModelError::MissingTensor(shapes[missing].0.to_owned()));
        }
        Ok(params)
    }

    /// Adds every tensor to `graph` as a borrowed leaf.
    pub fn register<'p>(&'p self, graph: &mut Graph<'p>, trainable: bool) -> ParamVars {
        let mut leaf = |t: &'p Tensor| graph.leaf(std::borrow::Cow::Borrowed(t), trainable);
        ParamVars {
            item_embed: leaf(&self.item_embed),
            pos_embed: leaf(&self.pos_embed),
            query_weight: leaf(&self.query_weight),
            query_bias: leaf(&self.query_bias),
            ffn_w1: leaf(&self.ffn_w1),
            ffn_b1: leaf(&self.ffn_b1),
            ffn_w2: leaf(&self.ffn_w2),
            ffn_b2: leaf(&self.ffn_b2),
            ln_gain: leaf(&self.ln_gain),
            ln_bias: leaf(&self.ln_bias),
        }
    }
}

/// Training mode carries the RNG that drives dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(&mut **rng),
        }
    }
}
