//! Objective assembly, Adam with cosine annealing, early stopping and
//! evaluation metrics.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, RecordLabels, Split};
use crate::graph::{random_graph, RelationGraph};
use crate::inference::{InferenceError, NodeActivations};
use crate::losses::{
    cross_entropy, focal_loss, ml_focal_loss, sample_graph_loss, total_loss, EmbedOrder, GraphTerms, Hyperparams,
    LossComponents, LossError,
};
use crate::model::{predict, DynastyFusion, Head, HeadOutputs, Model, ModelConfig, ModelError, PredictMode};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Role of an attribute head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrMode {
    /// Head untrained and unused.
    Off,
    /// Head trained with its own focal loss only.
    Head,
    /// Head trained, and its hidden features concatenated into the period output layer.
    Concat,
    /// Head trained, and its marginal chained into the graph loss.
    Embed,
}

impl AttrMode {
    fn has_head(self) -> bool {
        self != AttrMode::Off
    }
}

impl std::str::FromStr for AttrMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(AttrMode::Off),
            "head" => Ok(AttrMode::Head),
            "concat" => Ok(AttrMode::Concat),
            "embed" => Ok(AttrMode::Embed),
            other => Err(format!("unknown attribute mode `{other}`")),
        }
    }
}

/// Which parts of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub truncation: bool,
    /// Graph loss on; when off the objective is `L_ce + lambda (focal terms)`.
    pub akg: bool,
    pub shape: AttrMode,
    pub characteristic: AttrMode,
    pub order: EmbedOrder,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Ablation {
            truncation: true,
            akg: true,
            shape: AttrMode::Embed,
            characteristic: AttrMode::Embed,
            order: EmbedOrder::ShapeFirst,
        }
    }

    /// Period cross-entropy only, on the same network.
    pub fn ce_only() -> Self {
        Ablation {
            akg: false,
            shape: AttrMode::Off,
            characteristic: AttrMode::Off,
            ..Ablation::full()
        }
    }

    pub fn graph_terms(&self) -> GraphTerms {
        GraphTerms {
            shape: self.shape == AttrMode::Embed,
            characteristic: self.characteristic == AttrMode::Embed,
            order: self.order,
        }
    }

    pub fn fusion(&self) -> DynastyFusion {
        if self.truncation {
            DynastyFusion::Truncated
        } else {
            DynastyFusion::Absent
        }
    }
}

/// Comma-separated flags: `full`, `ce-only`, `no-truncation`, `no-akg`,
/// `shape=<mode>`, `char=<mode>`, `order=esc|ecs`. Later flags win.
impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Ablation::full();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag.split_once('=') {
                None => match flag {
                    "full" => out = Ablation::full(),
                    "ce-only" => out = Ablation::ce_only(),
                    "no-truncation" => out.truncation = false,
                    "no-akg" => out.akg = false,
                    other => return Err(format!("unknown ablation flag `{other}`")),
                },
                Some(("shape", mode)) => out.shape = mode.parse()?,
                Some(("char", mode)) => out.characteristic = mode.parse()?,
                Some(("order", "esc")) => out.order = EmbedOrder::ShapeFirst,
                Some(("order", "ecs")) => out.order = EmbedOrder::CharacteristicFirst,
                Some((key, value)) => return Err(format!("unknown ablation setting `{key}={value}`")),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once the validation period accuracy has not improved for more
    /// than this many consecutive epochs.
    pub patience: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub ablation: Ablation,
    pub predict_mode: PredictMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 64,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            hidden_dim: 64,
            seed: 0,
            hyperparams: Hyperparams::default(),
            ablation: Ablation::full(),
            predict_mode: PredictMode::Independent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.hyperparams.validate()?;
        let checks = [
            (self.epochs > 0, "epochs must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.hidden_dim > 0, "hidden_dim must be positive"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            ((0.0..1.0).contains(&self.beta1), "beta1 must be in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "beta2 must be in [0, 1)"),
            (self.eps > 0.0, "eps must be positive"),
            (self.patience <= self.epochs, "patience must not exceed epochs"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(TrainError::BadConfig(msg.to_string())),
            None => Ok(()),
        }
    }

    /// Network shape matching the graph, the features and the ablation.
    pub fn model_config(&self, graph: &RelationGraph, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            truncation: self.ablation.truncation,
            concat_shape: self.ablation.shape == AttrMode::Concat,
            concat_char: self.ablation.characteristic == AttrMode::Concat,
            ..ModelConfig::for_graph(graph, feature_dim, self.hidden_dim, self.seed)
        }
    }
}

/// `0.5 lr_max (1 + cos(pi t / T))`.
pub fn lr_schedule(t: usize, total: usize, lr_max: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = (t as f64 / total as f64).min(1.0);
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam moments with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::BadConfig("parameter and gradient lists differ".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(TrainError::BadConfig(format!("gradient shape {:?} for {:?}", g.shape(), p.shape())));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Loss terms on the head outputs and the gradient of the total with
/// respect to every output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputObjective {
    pub components: LossComponents,
    pub total: f64,
    pub outputs_grad: HeadOutputs,
}

/// Batch-mean objective evaluated on head outputs.
pub fn output_objective(
    outputs: &HeadOutputs,
    graph: &RelationGraph,
    labels: &[RecordLabels],
    hp: &Hyperparams,
    ablation: &Ablation,
) -> Result<OutputObjective, TrainError> {
    let b = outputs.batch_size();
    if b == 0 || labels.len() != b {
        return Err(LossError::EmptyBatch.into());
    }
    let mut c = LossComponents::default();
    let zeros = |t: &Tensor| Tensor::zeros(t.shape());
    let mut grad = HeadOutputs {
        dynasty_sigmoid: zeros(&outputs.dynasty_sigmoid),
        period_sigmoid: zeros(&outputs.period_sigmoid),
        period_softmax: zeros(&outputs.period_softmax),
        shape_sigmoid: zeros(&outputs.shape_sigmoid),
        shape_softmax: zeros(&outputs.shape_softmax),
        char_sigmoid: zeros(&outputs.char_sigmoid),
    };

    let periods: Vec<usize> = labels.iter().map(|l| l.period).collect();
    let ce = cross_entropy(outputs.period_softmax.data(), graph.n_periods(), &periods)?;
    c.ce = ce.value;
    grad.period_softmax.data_mut().copy_from_slice(&ce.grad);

    if ablation.shape.has_head() {
        let shapes: Vec<usize> = labels.iter().map(|l| l.shape).collect();
        let f = focal_loss(outputs.shape_softmax.data(), graph.n_shapes(), &shapes, hp.focal_gamma, hp.focal_alpha)?;
        c.focal = f.value;
        for (g, v) in grad.shape_softmax.data_mut().iter_mut().zip(f.grad) {
            *g += hp.lambda * v;
        }
    }
    if ablation.characteristic.has_head() {
        let targets: Vec<Vec<bool>> = labels
            .iter()
            .map(|l| {
                let mut t = vec![false; graph.n_chars()];
                for &ch in &l.characteristics {
                    t[ch] = true;
                }
                t
            })
            .collect();
        let f = ml_focal_loss(outputs.char_sigmoid.data(), graph.n_chars(), &targets, hp.focal_gamma, hp.focal_alpha)?;
        c.ml_focal = f.value;
        for (g, v) in grad.char_sigmoid.data_mut().iter_mut().zip(f.grad) {
            *g += hp.lambda * v;
        }
    }

    if ablation.akg {
        let terms = ablation.graph_terms();
        let per_sample: Vec<_> = (0..b)
            .into_par_iter()
            .map(|r| {
                let acts = NodeActivations::from_heads(
                    outputs.dynasty_sigmoid.row(r),
                    outputs.period_sigmoid.row(r),
                    outputs.shape_sigmoid.row(r),
                    outputs.char_sigmoid.row(r),
                )?;
                let sample = labels[r].to_sample(graph);
                Ok::<_, TrainError>(sample_graph_loss(graph, &acts, &sample, hp, terms)?)
            })
            .collect::<Result<_, _>>()?;
        let inv = 1.0 / b as f64;
        let (nd, np, ns) = (graph.n_dynasties(), graph.n_periods(), graph.n_shapes());
        for (r, s) in per_sample.iter().enumerate() {
            c.era += s.era * inv;
            c.era_shape += s.era_shape * inv;
            c.era_char += s.era_char * inv;
            let blocks: [(&mut Tensor, usize, usize); 4] = [
                (&mut grad.dynasty_sigmoid, 0, nd),
                (&mut grad.period_sigmoid, nd, np),
                (&mut grad.shape_sigmoid, nd + np, ns),
                (&mut grad.char_sigmoid, nd + np + ns, graph.n_chars()),
            ];
            for (t, start, width) in blocks {
                let row = &mut t.data_mut()[r * width..(r + 1) * width];
                for (g, v) in row.iter_mut().zip(&s.grad[start..start + width]) {
                    *g += v * inv;
                }
            }
        }
    }
    let total = total_loss(&c, hp);
    Ok(OutputObjective {
        components: c,
        total,
        outputs_grad: grad,
    })
}

/// Objective value with gradients for every parameter and head logit.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub components: LossComponents,
    pub total: f64,
    /// Same order as [`Model::params`].
    pub param_grads: Vec<Tensor>,
    /// Dynasty, period, shape, characteristic logits.
    pub logit_grads: [Tensor; 4],
}

pub fn batch_objective(
    model: &Model,
    graph: &RelationGraph,
    features: &Tensor,
    labels: &[RecordLabels],
    hp: &Hyperparams,
    ablation: &Ablation,
) -> Result<BatchObjective, TrainError> {
    batch_objective_with(model, graph, features, labels, hp, ablation, ablation.fusion())
}

/// [`batch_objective`] with an explicit period-to-dynasty fusion.
pub fn batch_objective_with(
    model: &Model,
    graph: &RelationGraph,
    features: &Tensor,
    labels: &[RecordLabels],
    hp: &Hyperparams,
    ablation: &Ablation,
    fusion: DynastyFusion,
) -> Result<BatchObjective, TrainError> {
    let mut tape = Tape::new();
    let vars = model.forward_with(&mut tape, features, fusion)?;
    let outputs = vars.outputs(&tape);
    let obj = output_objective(&outputs, graph, labels, hp, ablation)?;
    let g = obj.outputs_grad;
    let seeds = [
        (vars.dynasty_sigmoid, g.dynasty_sigmoid),
        (vars.period_sigmoid, g.period_sigmoid),
        (vars.period_softmax, g.period_softmax),
        (vars.shape_sigmoid, g.shape_sigmoid),
        (vars.shape_softmax, g.shape_softmax),
        (vars.char_sigmoid, g.char_sigmoid),
    ];
    let grads = tape.backward_from(&seeds)?;
    let grad_of = |v, like: &Tensor| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()));
    let param_grads = vars
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grad_of(v, p))
        .collect();
    let logit_grads = [vars.dynasty_logits, vars.period_logits, vars.shape_logits, vars.char_logits]
        .map(|v| grad_of(v, tape.value(v)));
    Ok(BatchObjective {
        components: obj.components,
        total: obj.total,
        param_grads,
        logit_grads,
    })
}

/// Precision and recall of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub dynasty_oa: f64,
    pub period_oa: f64,
    pub dynasty_auprc: f64,
    pub period_auprc: f64,
    pub dynasty_classes: Vec<ClassMetrics>,
    pub period_classes: Vec<ClassMetrics>,
}

pub fn class_metrics(predicted: &[usize], actual: &[usize], classes: usize) -> Vec<ClassMetrics> {
    let mut tp = vec![0usize; classes];
    let mut pred = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &a) in predicted.iter().zip(actual) {
        pred[p] += 1;
        support[a] += 1;
        if p == a {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (0..classes)
        .map(|k| ClassMetrics {
            precision: ratio(tp[k], pred[k]),
            recall: ratio(tp[k], support[k]),
            support: support[k],
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], actual: &[usize]) -> f64 {
    if actual.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(actual).filter(|(p, a)| p == a).count() as f64 / actual.len() as f64
}

/// Points of the recall grid used for the precision-recall area.
pub const RECALL_GRID: usize = 101;

/// One-vs-rest precision-recall area, macro-averaged over classes with at
/// least one positive.
///
/// For each class the precision at recall level `r` is the highest
/// precision reached at any threshold with recall `>= r`. The per-class
/// curves are averaged on a grid of 101 recall levels and integrated with
/// the trapezoid rule.
pub fn macro_auprc(scores: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut curve = vec![0.0; RECALL_GRID];
    let mut used = 0;
    for k in 0..classes {
        let positives = labels.iter().filter(|&&l| l == k).count();
        if positives == 0 {
            continue;
        }
        used += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b * classes + k].total_cmp(&scores[a * classes + k]));
        // (recall, precision) after each group of tied scores
        let mut points = Vec::new();
        let mut tp = 0usize;
        let mut i = 0;
        while i < n {
            let s = scores[order[i] * classes + k];
            while i < n && scores[order[i] * classes + k] == s {
                tp += usize::from(labels[order[i]] == k);
                i += 1;
            }
            points.push((tp as f64 / positives as f64, tp as f64 / i as f64));
        }
        // best precision at recall >= r, sweeping from the high-recall end
        let mut best = vec![0.0; RECALL_GRID];
        let mut j = points.len();
        let mut running: f64 = 0.0;
        for g in (0..RECALL_GRID).rev() {
            let r = g as f64 / (RECALL_GRID - 1) as f64;
            while j > 0 && points[j - 1].0 >= r - 1e-12 {
                running = running.max(points[j - 1].1);
                j -= 1;
            }
            best[g] = running;
        }
        for (c, b) in curve.iter_mut().zip(best) {
            *c += b;
        }
    }
    if used == 0 {
        return 0.0;
    }
    let step = 1.0 / (RECALL_GRID - 1) as f64;
    let mean: Vec<f64> = curve.iter().map(|c| c / used as f64).collect();
    mean.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum()
}

const EVAL_CHUNK: usize = 512;

/// Accuracy and precision-recall area of the dynasty and period heads on
/// the given records.
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize], mode: PredictMode) -> Result<Metrics, TrainError> {
    if indices.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    let graph = dataset.graph();
    let (nd, np) = (graph.n_dynasties(), graph.n_periods());
    let mut dyn_scores = Vec::with_capacity(indices.len() * nd);
    let mut period_scores = Vec::with_capacity(indices.len() * np);
    let mut predictions = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let out = model.forward(&dataset.feature_matrix(chunk)?)?;
        dyn_scores.extend_from_slice(out.dynasty_sigmoid.data());
        period_scores.extend_from_slice(out.period_softmax.data());
        predictions.extend(predict(&out, graph, mode));
    }
    let labels = dataset.labels();
    let dyn_true: Vec<usize> = indices.iter().map(|&i| labels[i].dynasty).collect();
    let period_true: Vec<usize> = indices.iter().map(|&i| labels[i].period).collect();
    let dyn_pred: Vec<usize> = predictions.iter().map(|p| p.0).collect();
    let period_pred: Vec<usize> = predictions.iter().map(|p| p.1).collect();
    Ok(Metrics {
        samples: indices.len(),
        dynasty_oa: accuracy(&dyn_pred, &dyn_true),
        period_oa: accuracy(&period_pred, &period_true),
        dynasty_auprc: macro_auprc(&dyn_scores, nd, &dyn_true),
        period_auprc: macro_auprc(&period_scores, np, &period_true),
        dynasty_classes: class_metrics(&dyn_pred, &dyn_true, nd),
        period_classes: class_metrics(&period_pred, &period_true, np),
    })
}

/// [`evaluate`] on every record tagged with `split`.
pub fn evaluate_split(model: &Model, dataset: &Dataset, split: Split, mode: PredictMode) -> Result<Metrics, TrainError> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    evaluate(model, dataset, &indices, mode)
}

/// `metric,value` rows: the headline numbers, then per-class precision,
/// recall and support as `<level>.<class>.<field>`.
pub fn write_metrics_csv<W: Write>(metrics: &Metrics, graph: &RelationGraph, out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    let headline = [
        ("samples", metrics.samples as f64),
        ("dynasty_oa", metrics.dynasty_oa),
        ("period_oa", metrics.period_oa),
        ("dynasty_auprc", metrics.dynasty_auprc),
        ("period_auprc", metrics.period_auprc),
    ];
    for (name, value) in headline {
        w.write_record([name.to_string(), value.to_string()])?;
    }
    let levels = [
        ("dynasty", &metrics.dynasty_classes, 0),
        ("period", &metrics.period_classes, graph.n_dynasties()),
    ];
    for (level, classes, offset) in levels {
        for (k, c) in classes.iter().enumerate() {
            let name = &graph.nodes()[offset + k].name;
            for (field, value) in [("precision", c.precision), ("recall", c.recall), ("support", c.support as f64)] {
                w.write_record([format!("{level}.{name}.{field}"), value.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub era: f64,
    pub era_shape: f64,
    pub era_char: f64,
    pub ce: f64,
    pub focal: f64,
    pub ml_focal: f64,
    pub val_dynasty_oa: f64,
    pub val_period_oa: f64,
    pub val_dynasty_auprc: f64,
    pub val_period_auprc: f64,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation period accuracy.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_period_oa: f64,
    pub stopped_early: bool,
}

/// Initialise a model for `dataset` and train it.
pub fn train_new(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let dim = dataset
        .feature_dim()
        .ok_or_else(|| TrainError::BadConfig("records carry no features".into()))?;
    let model = Model::init(config.model_config(dataset.graph(), dim))?;
    train(model, dataset, config)
}

/// Mini-batch Adam on the train split with per-epoch cosine learning rate,
/// validation after every epoch and early stopping on period accuracy.
pub fn train(mut model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let graph = dataset.graph();
    model.config().check_graph(graph)?;
    let expected = config.model_config(graph, model.config().feature_dim);
    let mc = model.config();
    if (mc.truncation, mc.concat_shape, mc.concat_char) != (expected.truncation, expected.concat_shape, expected.concat_char) {
        return Err(TrainError::BadConfig("model structure does not match the ablation".into()));
    }
    let mut train_idx = dataset.indices(Split::Train);
    let val_idx = dataset.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val_idx.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.params(), config.beta1, config.beta2, config.eps);
    let mut history = Vec::new();
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    let mut streak = 0;
    let mut stopped_early = false;
    let labels = dataset.labels();

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.epochs, config.lr);
        train_idx.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut total = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let features = dataset.feature_matrix(batch)?;
            let batch_labels: Vec<RecordLabels> = batch.iter().map(|&i| labels[i].clone()).collect();
            let obj = batch_objective(&model, graph, &features, &batch_labels, &config.hyperparams, &config.ablation)?;
            adam.step(model.params_mut(), &obj.param_grads, lr)?;
            let w = batch.len() as f64;
            let c = obj.components;
            sums.era += w * c.era;
            sums.era_shape += w * c.era_shape;
            sums.era_char += w * c.era_char;
            sums.ce += w * c.ce;
            sums.focal += w * c.focal;
            sums.ml_focal += w * c.ml_focal;
            total += w * obj.total;
        }
        let n = train_idx.len() as f64;
        let val = evaluate(&model, dataset, &val_idx, config.predict_mode)?;
        history.push(EpochRecord {
            epoch,
            lr,
            loss: total / n,
            era: sums.era / n,
            era_shape: sums.era_shape / n,
            era_char: sums.era_char / n,
            ce: sums.ce / n,
            focal: sums.focal / n,
            ml_focal: sums.ml_focal / n,
            val_dynasty_oa: val.dynasty_oa,
            val_period_oa: val.period_oa,
            val_dynasty_auprc: val.dynasty_auprc,
            val_period_auprc: val.period_auprc,
        });
        if val.period_oa > best.2 {
            best = (model.clone(), epoch, val.period_oa);
            streak = 0;
        } else {
            streak += 1;
            if streak > config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (model, best_epoch, best_val_period_oa) = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_period_oa,
        stopped_early,
    })
}

/// Settings of the finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    /// Gradient magnitude below which the absolute tolerance applies.
    pub resolution: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub batch: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            seed: 0,
            step: 1e-4,
            resolution: 1e-6,
            abs_tol: 1e-8,
            rel_tol: 1e-4,
            batch: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    /// Draws discarded because a hidden unit sat within the ReLU kink.
    pub rejected: usize,
    pub entries: usize,
    pub failures: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.entries > 0
    }
}

/// A random tiny network, batch and hyperparameter draw for gradient checks.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub graph: RelationGraph,
    pub model: Model,
    pub features: Tensor,
    pub labels: Vec<RecordLabels>,
    pub hyperparams: Hyperparams,
    pub ablation: Ablation,
    /// `Plain` when the ablation truncates: the truncated edge is a
    /// stop-gradient, so only the untruncated edge has a derivative that
    /// finite differences can reproduce.
    pub fusion: DynastyFusion,
}

const KINK_MARGIN: f64 = 1e-3;

impl GradcheckInstance {
    /// Draw one instance. Focal factors are not detached, so the analytic
    /// gradient is the exact derivative of the total objective.
    pub fn draw(rng: &mut ChaCha8Rng, batch: usize) -> Result<Self, TrainError> {
        let graph = random_graph(rng, 2, 4, 3, 4);
        let mode = |rng: &mut ChaCha8Rng| [AttrMode::Off, AttrMode::Head, AttrMode::Concat, AttrMode::Embed][rng.random_range(0..4)];
        let ablation = Ablation {
            truncation: rng.random_bool(0.7),
            akg: rng.random_bool(0.8),
            shape: mode(rng),
            characteristic: mode(rng),
            order: if rng.random_bool(0.5) { EmbedOrder::ShapeFirst } else { EmbedOrder::CharacteristicFirst },
        };
        let hyperparams = Hyperparams {
            alpha1: rng.random_range(0.0..3.0),
            alpha2: rng.random_range(0.0..3.0),
            beta: rng.random_range(0.1..1.0),
            lambda: rng.random_range(0.05..1.0),
            focal_gamma: rng.random_range(0.0..3.0),
            focal_alpha: rng.random_range(0.1..0.9),
            detach_focal: false,
        };
        let config = TrainConfig {
            hidden_dim: 5,
            seed: rng.random(),
            ablation,
            ..TrainConfig::default()
        };
        let feature_dim = 6;
        let mut model = Model::init(config.model_config(&graph, feature_dim))?;
        // small random biases so that no head is symmetric
        for p in model.params_mut() {
            if p.shape().len() == 1 {
                for v in p.data_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        let features = Tensor::new(
            vec![batch, feature_dim],
            (0..batch * feature_dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )?;
        let labels = (0..batch)
            .map(|_| {
                let period = rng.random_range(0..graph.n_periods());
                RecordLabels {
                    dynasty: graph.period_parent(period),
                    period,
                    shape: rng.random_range(0..graph.n_shapes()),
                    characteristics: (0..graph.n_chars()).filter(|_| rng.random_bool(0.4)).collect(),
                }
            })
            .collect();
        let fusion = if ablation.truncation { DynastyFusion::Plain } else { DynastyFusion::Absent };
        Ok(GradcheckInstance {
            graph,
            model,
            features,
            labels,
            hyperparams,
            ablation,
            fusion,
        })
    }

    /// Whether some first-layer pre-activation is within `margin` of zero,
    /// where finite differences straddle the ReLU kink.
    pub fn near_kink(&self, margin: f64) -> bool {
        let x = &self.features;
        Head::ALL.iter().any(|&head| {
            let r = Model::head_range(head);
            let (w, b) = (&self.model.params()[r.start], &self.model.params()[r.start + 1]);
            let hidden = b.len();
            (0..x.rows()).any(|row| {
                (0..hidden).any(|j| {
                    let z: f64 = b.data()[j] + (0..x.cols()).map(|i| x.row(row)[i] * w.data()[i * hidden + j]).sum::<f64>();
                    z.abs() < margin
                })
            })
        })
    }

    pub fn objective(&self, model: &Model) -> Result<BatchObjective, TrainError> {
        batch_objective_with(model, &self.graph, &self.features, &self.labels, &self.hyperparams, &self.ablation, self.fusion)
    }
}

/// Compare analytic parameter gradients with central differences on random
/// tiny instances.
pub fn gradient_check(config: &GradcheckConfig) -> Result<GradcheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradcheckReport {
        instances: 0,
        rejected: 0,
        entries: 0,
        failures: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
    };
    while report.instances < config.instances {
        let inst = GradcheckInstance::draw(&mut rng, config.batch)?;
        if inst.near_kink(KINK_MARGIN) {
            report.rejected += 1;
            continue;
        }
        report.instances += 1;
        let analytic = inst.objective(&inst.model)?;
        for (k, g) in analytic.param_grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut probe = inst.model.clone();
                probe.params_mut()[k].data_mut()[j] += config.step;
                let up = inst.objective(&probe)?.total;
                probe.params_mut()[k].data_mut()[j] -= 2.0 * config.step;
                let down = inst.objective(&probe)?.total;
                let fd = (up - down) / (2.0 * config.step);
                let a = g.data()[j];
                let abs = (a - fd).abs();
                let scale = a.abs().max(fd.abs());
                report.entries += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                let ok = if scale < config.resolution {
                    abs <= config.abs_tol
                } else {
                    report.max_rel_error = report.max_rel_error.max(abs / scale);
                    abs / scale <= config.rel_tol
                };
                if !ok {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(lr_schedule(0, 64, 1e-4), 1e-4);
        assert!((lr_schedule(32, 64, 1e-4) - 5e-5).abs() < 1e-18);
        assert!(lr_schedule(64, 64, 1e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let mut adam = Adam::new(&params, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(params[0].data(), [1.0, -1.0]);

        let mut adam = Adam::new(&params, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &[Tensor::new(vec![2], vec![0.5, -2.0]).unwrap()], 0.1).unwrap();
        // bias-corrected first step moves each coordinate by lr
        assert!((params[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((params[0].data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("full".parse::<Ablation>().unwrap(), Ablation::full());
        let a: Ablation = "no-truncation,shape=concat,order=ecs".parse().unwrap();
        assert!(!a.truncation);
        assert_eq!(a.shape, AttrMode::Concat);
        assert_eq!(a.order, EmbedOrder::CharacteristicFirst);
        assert!("bogus".parse::<Ablation>().is_err());
        assert!(!a.graph_terms().shape && a.graph_terms().characteristic);
    }

    #[test]
    fn perfect_scores_give_unit_area() {
        let labels = [0, 1, 2, 1];
        let mut scores = vec![0.0; 12];
        for (i, &l) in labels.iter().enumerate() {
            scores[i * 3 + l] = 1.0;
        }
        assert!((macro_auprc(&scores, 3, &labels) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let labels = [0, 0, 0, 1];
        let scores = vec![0.5; 8];
        // class 0 prevalence 0.75, class 1 prevalence 0.25
        assert!((macro_auprc(&scores, 2, &labels) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_support_weighted_recall() {
        let predicted = [0, 1, 1, 2, 2, 2, 0];
        let actual = [0, 1, 2, 2, 2, 0, 0];
        let per_class = class_metrics(&predicted, &actual, 3);
        let weighted: f64 = per_class.iter().map(|c| c.recall * c.support as f64).sum::<f64>() / actual.len() as f64;
        assert!((weighted - accuracy(&predicted, &actual)).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_small_run() {
        let report = gradient_check(&GradcheckConfig {
            instances: 4,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
