//! Graph probabilistic losses, cross-entropy and focal losses.
//!
//! Every loss returns its value together with the gradient with respect to
//! its inputs (marginals, probabilities or node activations). Batch losses
//! are means over samples.
//!
//! The graph losses form a chain. The era term is `-ln Pr_e(true period)`.
//! Each attribute stage after it is weighted by a focal factor
//! `(1 - conf_prev)^alpha`, where `conf_prev` is the confidence of the
//! previous stage, so attribute supervision fades once the earlier stage
//! is already certain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{RelationGraph, Scope};
use crate::inference::{log_marginal_with_grad, InferenceError, NodeActivations};

/// Probabilities entering a logarithm are clamped from below to this value.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid hyperparameter: {0}")]
    BadHyperparams(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Decay exponent of the first attribute stage.
    pub alpha1: f64,
    /// Decay exponent of the second attribute stage.
    pub alpha2: f64,
    /// Weight of the attribute stages inside the graph loss.
    pub beta: f64,
    /// Weight of the attribute head losses in the total.
    pub lambda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Treat the focal factors as constants in the backward pass.
    pub detach_focal: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha1: 2.0,
            alpha2: 3.0,
            beta: 0.001,
            lambda: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            detach_focal: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), LossError> {
        let checks = [
            (self.alpha1 >= 0.0, "alpha1 must be >= 0"),
            (self.alpha2 >= 0.0, "alpha2 must be >= 0"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (self.lambda >= 0.0, "lambda must be >= 0"),
            (self.focal_gamma >= 0.0, "focal_gamma must be >= 0"),
            (
                self.focal_alpha > 0.0 && self.focal_alpha <= 1.0,
                "focal_alpha must be in (0, 1]",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(LossError::BadHyperparams(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// A loss value with the gradient with respect to the loss inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `ln max(p, LOG_FLOOR)` and its derivative.
fn clamped_ln(p: f64) -> (f64, f64) {
    if p > LOG_FLOOR {
        (p.ln(), 1.0 / p)
    } else {
        (LOG_FLOOR.ln(), 0.0)
    }
}

/// `(1 - p)^alpha` and its derivative with respect to `p`.
fn focal_factor(p: f64, alpha: f64) -> (f64, f64) {
    let q = (1.0 - p).max(0.0);
    if alpha == 0.0 {
        return (1.0, 0.0);
    }
    let value = q.powf(alpha);
    let deriv = if q > 0.0 { -alpha * q.powf(alpha - 1.0) } else { 0.0 };
    (value, deriv)
}

fn nonempty(len: usize) -> Result<f64, LossError> {
    if len == 0 {
        Err(LossError::EmptyBatch)
    } else {
        Ok(len as f64)
    }
}

/// Era loss: `-(1/B) sum ln Pr_e`. Gradient is with respect to each marginal.
pub fn loss_era(pr_e: &[f64]) -> Result<LossValue, LossError> {
    let b = nonempty(pr_e.len())?;
    let mut value = 0.0;
    let grad = pr_e
        .iter()
        .map(|&p| {
            let (ln, d) = clamped_ln(p);
            value -= ln / b;
            -d / b
        })
        .collect();
    Ok(LossValue { value, grad })
}

/// Gradients of a decayed stage term with respect to both of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLoss {
    pub value: f64,
    /// With respect to the confidence that drives the focal factor.
    pub grad_confidence: Vec<f64>,
    /// With respect to the stage marginal.
    pub grad_marginal: Vec<f64>,
}

/// Era-shape loss: `-(1/B) sum (1 - Pr_e)^alpha1 ln Pr_es`.
pub fn loss_era_shape(pr_e: &[f64], pr_es: &[f64], alpha1: f64, detach: bool) -> Result<StageLoss, LossError> {
    if pr_e.len() != pr_es.len() {
        return Err(LossError::ShapeMismatch(format!("{} era vs {} era-shape marginals", pr_e.len(), pr_es.len())));
    }
    let b = nonempty(pr_e.len())?;
    let mut out = StageLoss {
        value: 0.0,
        grad_confidence: Vec::with_capacity(pr_e.len()),
        grad_marginal: Vec::with_capacity(pr_e.len()),
    };
    for (&conf, &p) in pr_e.iter().zip(pr_es) {
        let (w, dw) = focal_factor(conf, alpha1);
        let (ln, dln) = clamped_ln(p);
        out.value -= w * ln / b;
        out.grad_marginal.push(-w * dln / b);
        out.grad_confidence.push(if detach { 0.0 } else { -dw * ln / b });
    }
    Ok(out)
}

/// Era-characteristic loss: `-(1/B) sum (1 - Pr_es)^alpha2 mean_c ln Pr_ec(c)`.
///
/// `pr_ec[l]` holds the marginals of sample `l`'s observed characteristics;
/// samples without characteristics contribute zero. `grad_marginal` is
/// flattened in the same order as `pr_ec`.
pub fn loss_era_char(pr_es: &[f64], pr_ec: &[Vec<f64>], alpha2: f64, detach: bool) -> Result<StageLoss, LossError> {
    if pr_es.len() != pr_ec.len() {
        return Err(LossError::ShapeMismatch(format!("{} era-shape vs {} characteristic rows", pr_es.len(), pr_ec.len())));
    }
    let b = nonempty(pr_es.len())?;
    let mut out = StageLoss {
        value: 0.0,
        grad_confidence: Vec::with_capacity(pr_es.len()),
        grad_marginal: Vec::new(),
    };
    for (&conf, row) in pr_es.iter().zip(pr_ec) {
        if row.is_empty() {
            out.grad_confidence.push(0.0);
            continue;
        }
        let (w, dw) = focal_factor(conf, alpha2);
        let k = row.len() as f64;
        let mean_ln: f64 = row.iter().map(|&p| clamped_ln(p).0).sum::<f64>() / k;
        out.value -= w * mean_ln / b;
        out.grad_marginal.extend(row.iter().map(|&p| -w * clamped_ln(p).1 / (k * b)));
        out.grad_confidence.push(if detach { 0.0 } else { -dw * mean_ln / b });
    }
    Ok(out)
}

/// `L_e + beta (L_es + L_esc)`.
pub fn loss_graph(era: f64, era_shape: f64, era_char: f64, beta: f64) -> f64 {
    era + beta * (era_shape + era_char)
}

fn check_rows(probs: &[f64], classes: usize, labels: usize) -> Result<f64, LossError> {
    let b = nonempty(labels)?;
    if classes == 0 || probs.len() != classes * labels {
        return Err(LossError::ShapeMismatch(format!(
            "{} probabilities for {labels} samples of {classes} classes",
            probs.len()
        )));
    }
    Ok(b)
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(probs: &[f64], classes: usize, labels: &[usize]) -> Result<LossValue, LossError> {
    focal_loss(probs, classes, labels, 0.0, 1.0)
}

/// Mean of `-alpha (1 - p_t)^gamma ln p_t` over samples.
pub fn focal_loss(probs: &[f64], classes: usize, labels: &[usize], gamma: f64, alpha: f64) -> Result<LossValue, LossError> {
    let b = check_rows(probs, classes, labels.len())?;
    let mut grad = vec![0.0; probs.len()];
    let mut value = 0.0;
    for (row, &t) in labels.iter().enumerate() {
        if t >= classes {
            return Err(LossError::ShapeMismatch(format!("label {t} with {classes} classes")));
        }
        let at = row * classes + t;
        let (v, d) = binary_focal_term(probs[at], gamma, alpha);
        value += v / b;
        grad[at] = d / b;
    }
    Ok(LossValue { value, grad })
}

/// `-alpha (1 - p)^gamma ln p` and its derivative in `p`.
fn binary_focal_term(p: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let (ln, dln) = clamped_ln(p);
    let (w, dw) = focal_factor(p, gamma);
    (-alpha * w * ln, -alpha * (dw * ln + w * dln))
}

/// Per-class binary focal loss averaged over classes and samples.
///
/// Positives use `-alpha (1-p)^gamma ln p`, negatives
/// `-(1-alpha) p^gamma ln(1-p)`.
pub fn ml_focal_loss(probs: &[f64], classes: usize, targets: &[Vec<bool>], gamma: f64, alpha: f64) -> Result<LossValue, LossError> {
    let b = check_rows(probs, classes, targets.len())?;
    let n = b * classes as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut value = 0.0;
    for (row, labels) in targets.iter().enumerate() {
        if labels.len() != classes {
            return Err(LossError::ShapeMismatch(format!("{} targets for {classes} classes", labels.len())));
        }
        for (c, &y) in labels.iter().enumerate() {
            let at = row * classes + c;
            let p = probs[at];
            let (v, d) = if y {
                binary_focal_term(p, gamma, alpha)
            } else {
                // Mirror image: q = 1 - p.
                let (v, dq) = binary_focal_term(1.0 - p, gamma, 1.0 - alpha);
                (v, -dq)
            };
            value += v / n;
            grad[at] = d / n;
        }
    }
    Ok(LossValue { value, grad })
}

/// Observed labels of one sample, as global node indices of the graph.
///
/// The era, era-shape and era-characteristic indices of the loss
/// formulation are these nodes' positions within the respective views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLabels {
    pub period: usize,
    pub shape: usize,
    pub characteristics: Vec<usize>,
}

/// Attribute stage of the graph loss chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Shape,
    Characteristic,
}

/// Order in which attribute stages follow the era stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EmbedOrder {
    /// Era, then shape, then characteristic.
    #[default]
    ShapeFirst,
    /// Era, then characteristic, then shape.
    CharacteristicFirst,
}

impl EmbedOrder {
    pub fn stages(self) -> [Stage; 2] {
        match self {
            EmbedOrder::ShapeFirst => [Stage::Shape, Stage::Characteristic],
            EmbedOrder::CharacteristicFirst => [Stage::Characteristic, Stage::Shape],
        }
    }
}

/// Which graph terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphTerms {
    pub shape: bool,
    pub characteristic: bool,
    pub order: EmbedOrder,
}

impl Default for GraphTerms {
    fn default() -> Self {
        GraphTerms {
            shape: true,
            characteristic: true,
            order: EmbedOrder::ShapeFirst,
        }
    }
}

/// Unweighted graph loss terms of one sample with the gradient of
/// `L_e + beta (L_es + L_esc)` with respect to the node activations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGraphLoss {
    pub era: f64,
    pub era_shape: f64,
    pub era_char: f64,
    pub grad: Vec<f64>,
}

/// Per-sample graph loss, unnormalized by the batch size.
///
/// Stage `k` (0-based, among the enabled stages in `terms.order`) uses
/// decay exponent `alpha1` for `k = 0` and `alpha2` for `k = 1`. Its focal
/// factor uses the previous stage's confidence: the era marginal, the
/// shape marginal, or the geometric mean of the observed characteristic
/// marginals. A characteristic stage with no observed characteristics is
/// skipped.
pub fn sample_graph_loss(
    graph: &RelationGraph,
    acts: &NodeActivations,
    labels: &SampleLabels,
    hp: &Hyperparams,
    terms: GraphTerms,
) -> Result<SampleGraphLoss, LossError> {
    let n = acts.len();
    let era_view = graph.view(Scope::Era);
    let (ln_era, d_ln_era) = clamp_log(log_marginal_with_grad(&era_view, acts, labels.period)?);

    let mut out = SampleGraphLoss {
        era: -ln_era,
        era_shape: 0.0,
        era_char: 0.0,
        grad: d_ln_era.iter().map(|g| -g).collect(),
    };

    // (log confidence, its gradient) of the previous stage
    let mut prev = (ln_era, d_ln_era);
    let mut position = 0;
    for stage in terms.order.stages() {
        let enabled = match stage {
            Stage::Shape => terms.shape,
            Stage::Characteristic => terms.characteristic,
        };
        if !enabled {
            continue;
        }
        let (ll, d_ll) = match stage {
            Stage::Shape => clamp_log(log_marginal_with_grad(&graph.view(Scope::EraShape), acts, labels.shape)?),
            Stage::Characteristic => {
                if labels.characteristics.is_empty() {
                    continue;
                }
                let view = graph.view(Scope::EraCharacteristic);
                let k = labels.characteristics.len() as f64;
                let mut ll = 0.0;
                let mut grad = vec![0.0; n];
                for &c in &labels.characteristics {
                    let (l, g) = clamp_log(log_marginal_with_grad(&view, acts, c)?);
                    ll += l / k;
                    for (acc, gi) in grad.iter_mut().zip(g) {
                        *acc += gi / k;
                    }
                }
                (ll, grad)
            }
        };
        let alpha = if position == 0 { hp.alpha1 } else { hp.alpha2 };
        position += 1;

        let conf = prev.0.exp();
        let (w, dw) = focal_factor(conf, alpha);
        let term = -w * ll;
        match stage {
            Stage::Shape => out.era_shape = term,
            Stage::Characteristic => out.era_char = term,
        }
        for (i, &d) in d_ll.iter().enumerate().take(n) {
            let mut g = -w * d;
            if !hp.detach_focal {
                // d conf = conf * d ln conf
                g -= ll * dw * conf * prev.1[i];
            }
            out.grad[i] += hp.beta * g;
        }
        prev = (ll, d_ll);
    }
    Ok(out)
}

fn clamp_log((value, grad): (f64, Vec<f64>)) -> (f64, Vec<f64>) {
    let floor = LOG_FLOOR.ln();
    if value > floor {
        (value, grad)
    } else {
        (floor, vec![0.0; grad.len()])
    }
}

/// Component values of the total objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub era: f64,
    pub era_shape: f64,
    pub era_char: f64,
    pub ce: f64,
    pub focal: f64,
    pub ml_focal: f64,
}

impl LossComponents {
    pub fn graph(&self, hp: &Hyperparams) -> f64 {
        loss_graph(self.era, self.era_shape, self.era_char, hp.beta)
    }
}

/// `L_graph + L_ce + lambda (L_focal + L_ml-focal)`.
pub fn total_loss(c: &LossComponents, hp: &Hyperparams) -> f64 {
    c.graph(hp) + c.ce + hp.lambda * (c.focal + c.ml_focal)
}
