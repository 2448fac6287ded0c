//! Four-head network: dynasty and period heads with bidirectional fusion,
//! plus independent shape and characteristic heads.
//!
//! Each head is two fully connected layers. After the first layer (and its
//! ReLU) the dynasty features are added to the period features, and the
//! period features are added back into the dynasty features through a
//! gradient-truncated addition, so dynasty losses never reach the period
//! head's parameters through that edge.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphSchema, RelationGraph};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub n_dynasties: usize,
    pub n_periods: usize,
    pub n_shapes: usize,
    pub n_chars: usize,
    pub seed: u64,
    /// Period-to-dynasty truncated addition.
    #[serde(default = "default_true")]
    pub truncation: bool,
    /// Feed the shape head's hidden features into the period output layer.
    #[serde(default)]
    pub concat_shape: bool,
    /// Feed the characteristic head's hidden features into the period output layer.
    #[serde(default)]
    pub concat_char: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn for_graph(graph: &RelationGraph, feature_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        ModelConfig {
            feature_dim,
            hidden_dim,
            n_dynasties: graph.n_dynasties(),
            n_periods: graph.n_periods(),
            n_shapes: graph.n_shapes(),
            n_chars: graph.n_chars(),
            seed,
            truncation: true,
            concat_shape: false,
            concat_char: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_dynasties", self.n_dynasties),
            ("n_periods", self.n_periods),
            ("n_shapes", self.n_shapes),
            ("n_chars", self.n_chars),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ModelError::BadConfig(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    pub fn check_graph(&self, graph: &RelationGraph) -> Result<(), ModelError> {
        let ours = (self.n_dynasties, self.n_periods, self.n_shapes, self.n_chars);
        let theirs = (graph.n_dynasties(), graph.n_periods(), graph.n_shapes(), graph.n_chars());
        if ours != theirs {
            return Err(ModelError::BadConfig(format!("head sizes {ours:?} do not match graph {theirs:?}")));
        }
        Ok(())
    }

    fn period_fc2_inputs(&self) -> usize {
        self.hidden_dim * (1 + usize::from(self.concat_shape) + usize::from(self.concat_char))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Dynasty,
    Period,
    Shape,
    Characteristic,
}

impl Head {
    pub const ALL: [Head; 4] = [Head::Dynasty, Head::Period, Head::Shape, Head::Characteristic];

    pub fn name(self) -> &'static str {
        match self {
            Head::Dynasty => "dynasty",
            Head::Period => "period",
            Head::Shape => "shape",
            Head::Characteristic => "characteristic",
        }
    }
}

const PARAMS_PER_HEAD: usize = 4;
const SLOT_NAMES: [&str; PARAMS_PER_HEAD] = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

/// How the period features enter the dynasty branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynastyFusion {
    /// Gradient-truncated addition.
    Truncated,
    /// Plain addition; gradients flow back into the period head.
    Plain,
    /// Adds the period features as a recorded constant.
    Constant,
    /// No period-to-dynasty edge.
    Absent,
}

/// Model parameters. Tensors are stored head by head in [`Head::ALL`]
/// order, four per head (`fc1.weight`, `fc1.bias`, `fc2.weight`,
/// `fc2.bias`); weights are `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

/// Head projections for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub dynasty_sigmoid: Tensor,
    pub period_sigmoid: Tensor,
    pub period_softmax: Tensor,
    pub shape_sigmoid: Tensor,
    pub shape_softmax: Tensor,
    pub char_sigmoid: Tensor,
}

impl HeadOutputs {
    pub fn batch_size(&self) -> usize {
        self.period_softmax.rows()
    }
}

/// Tape handles produced by [`Model::forward_on`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub params: Vec<Var>,
    pub dynasty_logits: Var,
    pub period_logits: Var,
    pub shape_logits: Var,
    pub char_logits: Var,
    pub dynasty_sigmoid: Var,
    pub period_sigmoid: Var,
    pub period_softmax: Var,
    pub shape_sigmoid: Var,
    pub shape_softmax: Var,
    pub char_sigmoid: Var,
}

impl ForwardVars {
    pub fn outputs(&self, tape: &Tape) -> HeadOutputs {
        HeadOutputs {
            dynasty_sigmoid: tape.value(self.dynasty_sigmoid).clone(),
            period_sigmoid: tape.value(self.period_sigmoid).clone(),
            period_softmax: tape.value(self.period_softmax).clone(),
            shape_sigmoid: tape.value(self.shape_sigmoid).clone(),
            shape_softmax: tape.value(self.shape_softmax).clone(),
            char_sigmoid: tape.value(self.char_sigmoid).clone(),
        }
    }

    pub fn head_params(&self, head: Head) -> &[Var] {
        let start = head as usize * PARAMS_PER_HEAD;
        &self.params[start..start + PARAMS_PER_HEAD]
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases, drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(4 * PARAMS_PER_HEAD);
        for head in Head::ALL {
            let (fc1_in, fc2_in, out) = Self::dims(&config, head);
            for (fan_in, fan_out) in [(fc1_in, config.hidden_dim), (fc2_in, out)] {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
                params.push(Tensor::new(vec![fan_in, fan_out], w)?);
                params.push(Tensor::zeros(&[fan_out]));
            }
        }
        Ok(Model { config, params })
    }

    fn dims(config: &ModelConfig, head: Head) -> (usize, usize, usize) {
        let h = config.hidden_dim;
        match head {
            Head::Dynasty => (config.feature_dim, h, config.n_dynasties),
            Head::Period => (config.feature_dim, config.period_fc2_inputs(), config.n_periods),
            Head::Shape => (config.feature_dim, h, config.n_shapes),
            Head::Characteristic => (config.feature_dim, h, config.n_chars),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names() -> Vec<String> {
        Head::ALL
            .iter()
            .flat_map(|h| SLOT_NAMES.iter().map(move |s| format!("{}.{s}", h.name())))
            .collect()
    }

    /// Parameter range of one head within [`Model::params`].
    pub fn head_range(head: Head) -> std::ops::Range<usize> {
        let start = head as usize * PARAMS_PER_HEAD;
        start..start + PARAMS_PER_HEAD
    }

    pub fn forward(&self, features: &Tensor) -> Result<HeadOutputs, ModelError> {
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, features)?;
        Ok(vars.outputs(&tape))
    }

    /// Record the forward pass on `tape` using the configured fusion.
    pub fn forward_on(&self, tape: &mut Tape, features: &Tensor) -> Result<ForwardVars, ModelError> {
        let fusion = if self.config.truncation { DynastyFusion::Truncated } else { DynastyFusion::Absent };
        self.forward_with(tape, features, fusion)
    }

    pub fn forward_with(&self, tape: &mut Tape, features: &Tensor, fusion: DynastyFusion) -> Result<ForwardVars, ModelError> {
        if features.shape().len() != 2 || features.cols() != self.config.feature_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "features {:?}, expected [batch, {}]",
                features.shape(),
                self.config.feature_dim
            )));
        }
        let x = tape.leaf(features.clone());
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let slot = |head: Head, i: usize| params[head as usize * PARAMS_PER_HEAD + i];

        let hidden = |tape: &mut Tape, head: Head| -> Result<Var, ModelError> {
            let h = tape.linear(x, slot(head, 0), slot(head, 1))?;
            Ok(tape.relu(h))
        };
        let dynasty_h = hidden(tape, Head::Dynasty)?;
        let period_h = hidden(tape, Head::Period)?;
        let shape_h = hidden(tape, Head::Shape)?;
        let char_h = hidden(tape, Head::Characteristic)?;

        let period_fused = tape.add(period_h, dynasty_h)?;
        let dynasty_fused = match fusion {
            DynastyFusion::Truncated => tape.stop_grad_add(dynasty_h, period_h)?,
            DynastyFusion::Plain => tape.add(dynasty_h, period_h)?,
            DynastyFusion::Constant => {
                let value = tape.value(period_h).clone();
                let frozen = tape.leaf(value);
                tape.add(dynasty_h, frozen)?
            }
            DynastyFusion::Absent => dynasty_h,
        };
        let mut period_in = vec![period_fused];
        if self.config.concat_shape {
            period_in.push(shape_h);
        }
        if self.config.concat_char {
            period_in.push(char_h);
        }
        let period_in = if period_in.len() == 1 { period_fused } else { tape.concat_cols(&period_in)? };

        let dynasty_logits = tape.linear(dynasty_fused, slot(Head::Dynasty, 2), slot(Head::Dynasty, 3))?;
        let period_logits = tape.linear(period_in, slot(Head::Period, 2), slot(Head::Period, 3))?;
        let shape_logits = tape.linear(shape_h, slot(Head::Shape, 2), slot(Head::Shape, 3))?;
        let char_logits = tape.linear(char_h, slot(Head::Characteristic, 2), slot(Head::Characteristic, 3))?;

        Ok(ForwardVars {
            dynasty_sigmoid: tape.sigmoid(dynasty_logits),
            period_sigmoid: tape.sigmoid(period_logits),
            period_softmax: tape.softmax(period_logits),
            shape_sigmoid: tape.sigmoid(shape_logits),
            shape_softmax: tape.softmax(shape_logits),
            char_sigmoid: tape.sigmoid(char_logits),
            params,
            dynasty_logits,
            period_logits,
            shape_logits,
            char_logits,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, graph: &RelationGraph) -> Result<(), ModelError> {
        let ckpt = Checkpoint::new(self, graph);
        let text = serde_json::to_string(&ckpt).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Model, RelationGraph), ModelError> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        ckpt.into_model()
    }
}

pub const CHECKPOINT_FORMAT: &str = "dingdate-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: config echo, the relation graph, and flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub graph: GraphSchema,
    pub params: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: &Model, graph: &RelationGraph) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            graph: graph.to_schema(),
            params: Model::param_names()
                .into_iter()
                .zip(&model.params)
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<(Model, RelationGraph), ModelError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let graph = self.graph.build().map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        self.config.check_graph(&graph)?;
        let template = Model::init(self.config.clone())?;
        let names = Model::param_names();
        if self.params.len() != names.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, got {}", names.len(), self.params.len())));
        }
        let mut params = Vec::with_capacity(names.len());
        for ((p, name), expected) in self.params.into_iter().zip(&names).zip(template.params()) {
            if &p.name != name || p.shape != expected.shape() {
                return Err(ModelError::Checkpoint(format!("tensor `{}` {:?} does not match `{name}` {:?}", p.name, p.shape, expected.shape())));
            }
            params.push(Tensor::new(p.shape, p.values)?);
        }
        Ok((Model { config: self.config, params }, graph))
    }
}

/// Argmax with the lowest index winning ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PredictMode {
    /// Dynasty from the dynasty head, period from the period softmax.
    #[default]
    Independent,
    /// Dynasty is the parent of the predicted period.
    Consistent,
}

/// `(dynasty, period)` local indices per sample.
pub fn predict(outputs: &HeadOutputs, graph: &RelationGraph, mode: PredictMode) -> Vec<(usize, usize)> {
    (0..outputs.batch_size())
        .map(|r| {
            let period = argmax(outputs.period_softmax.row(r));
            let dynasty = match mode {
                PredictMode::Independent => argmax(outputs.dynasty_sigmoid.row(r)),
                PredictMode::Consistent => graph.period_parent(period),
            };
            (dynasty, period)
        })
        .collect()
}
