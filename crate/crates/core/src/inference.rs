//! Partition functions and marginals over the legal assignments of a view.
//!
//! The unnormalized joint of an assignment is the Bernoulli product of the
//! node activations, restricted to legal assignments. Because the era
//! hierarchy is a forest of mutually exclusive choices, the sum over legal
//! assignments factorizes. Writing `o_i = p_i / (1 - p_i)` and scaling out
//! `prod_i (1 - p_i)`:
//!
//! ```text
//! Era:               S = 1 + sum_d o_d + sum_p o_par(p) o_p
//! EraShape:          S = 1 + sum_d o_d + sum_p o_par(p) o_p (1 + sum_{s in shapes(p)} o_s)
//! EraCharacteristic: S = 1 + sum_d o_d + sum_p o_par(p) o_p prod_{c in chars(p)} (1 + o_c)
//! ```
//!
//! Everything is evaluated on log-odds with log-sum-exp. [`oracle_inference`]
//! computes the same quantities by explicit enumeration.

use thiserror::Error;

use crate::graph::{enumerate_legal_capped, is_legal_unchecked, Assignment, GraphError, GraphView, NodeKind, Scope};
use crate::graph::DEFAULT_ENUMERATION_CAP;

/// Activations are clamped to `[EPS, 1 - EPS]` before any log is taken.
pub const ACTIVATION_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("assignment is not legal in the view")]
    IllegalAssignment,
    #[error("node {0} is not part of the view")]
    NodeNotInView(usize),
    #[error("expected {expected} activations, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("activation {index} = {value} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("view has exclusion edges outside the dynasty/period/shape blocks; use the oracle")]
    NotFactorizable,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-node sigmoid probabilities, indexed by global node index.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeActivations {
    p: Vec<f64>,
}

impl NodeActivations {
    pub fn new(p: Vec<f64>) -> Result<Self, InferenceError> {
        if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(InferenceError::OutOfRange { index, value });
        }
        Ok(NodeActivations { p })
    }

    /// Concatenate per-kind head outputs into global node order.
    pub fn from_heads(dynasty: &[f64], period: &[f64], shape: &[f64], characteristic: &[f64]) -> Result<Self, InferenceError> {
        let mut p = Vec::with_capacity(dynasty.len() + period.len() + shape.len() + characteristic.len());
        p.extend_from_slice(dynasty);
        p.extend_from_slice(period);
        p.extend_from_slice(shape);
        p.extend_from_slice(characteristic);
        Self::new(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    fn clamped(&self, i: usize) -> f64 {
        self.p[i].clamp(ACTIVATION_EPS, 1.0 - ACTIVATION_EPS)
    }

    fn logit(&self, i: usize) -> f64 {
        let p = self.clamped(i);
        p.ln() - (-p).ln_1p()
    }

    fn ln_one_minus(&self, i: usize) -> f64 {
        (-self.clamped(i)).ln_1p()
    }

    /// d logit / d p, zero where the clamp is active.
    fn dlogit_dp(&self, i: usize) -> f64 {
        let p = self.p[i];
        if p <= ACTIVATION_EPS || p >= 1.0 - ACTIVATION_EPS {
            0.0
        } else {
            1.0 / (p * (1.0 - p))
        }
    }

    fn check(&self, view: &GraphView<'_>) -> Result<(), InferenceError> {
        let expected = view.graph().len();
        if self.p.len() != expected {
            return Err(InferenceError::LengthMismatch {
                expected,
                got: self.p.len(),
            });
        }
        Ok(())
    }
}

/// Log partition function and per-node marginals (view order).
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub log_z: f64,
    pub marginals: Vec<f64>,
}

/// A log-domain quantity with its sparse gradient with respect to the
/// node log-odds.
#[derive(Debug, Clone)]
struct LogTerm {
    value: f64,
    grad: Vec<(usize, f64)>,
}

impl LogTerm {
    fn zero() -> Self {
        LogTerm {
            value: 0.0,
            grad: Vec::new(),
        }
    }

    fn logit(acts: &NodeActivations, i: usize) -> Self {
        LogTerm {
            value: acts.logit(i),
            grad: vec![(i, 1.0)],
        }
    }

    /// `ln(1 + e^z)` for node `i`.
    fn softplus(acts: &NodeActivations, i: usize) -> Self {
        let z = acts.logit(i);
        let value = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        LogTerm {
            value,
            grad: vec![(i, sigmoid(z))],
        }
    }

    fn plus(mut self, other: &LogTerm) -> Self {
        self.value += other.value;
        self.grad.extend_from_slice(&other.grad);
        self
    }

    fn minus(mut self, other: &LogTerm) -> Self {
        self.value -= other.value;
        self.grad.extend(other.grad.iter().map(|&(i, g)| (i, -g)));
        self
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(terms: &[LogTerm]) -> LogTerm {
    let max = terms.iter().map(|t| t.value).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return LogTerm {
            value: max,
            grad: Vec::new(),
        };
    }
    let weights: Vec<f64> = terms.iter().map(|t| (t.value - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut grad = Vec::new();
    for (t, w) in terms.iter().zip(&weights) {
        let share = w / total;
        grad.extend(t.grad.iter().map(|&(i, g)| (i, g * share)));
    }
    LogTerm {
        value: max + total.ln(),
        grad,
    }
}

/// Numerically stable `ln sum exp` over plain values.
pub fn log_sum_exp_values(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Factorized inference over one view.
struct Factorized<'a, 'g> {
    view: &'a GraphView<'g>,
    acts: &'a NodeActivations,
    /// `ln(o_par(p) o_p A_p)` per local period.
    period_terms: Vec<LogTerm>,
}

impl<'a, 'g> Factorized<'a, 'g> {
    fn new(view: &'a GraphView<'g>, acts: &'a NodeActivations) -> Result<Self, InferenceError> {
        acts.check(view)?;
        let g = view.graph();
        let factorizable = g
            .exclusion_edges()
            .filter(|&(a, b)| view.contains(a) && view.contains(b))
            .all(|(a, b)| {
                let (ka, kb) = (g.nodes()[a].kind, g.nodes()[b].kind);
                ka == kb && ka != NodeKind::Characteristic
            });
        if !factorizable {
            return Err(InferenceError::NotFactorizable);
        }
        let period_terms = (0..g.n_periods())
            .map(|p| {
                let node = g.period(p);
                let base = LogTerm::logit(acts, g.period_parent(p)).plus(&LogTerm::logit(acts, node));
                let attrs = view_children(view, node);
                match view.scope() {
                    Scope::Era => base,
                    Scope::EraShape => {
                        let mut options = vec![LogTerm::zero()];
                        options.extend(attrs.iter().map(|&s| LogTerm::logit(acts, s)));
                        base.plus(&log_sum_exp(&options))
                    }
                    Scope::EraCharacteristic => attrs
                        .iter()
                        .fold(base, |acc, &c| acc.plus(&LogTerm::softplus(acts, c))),
                }
            })
            .collect();
        Ok(Factorized {
            view,
            acts,
            period_terms,
        })
    }

    /// `ln S`, the log of the scaled partition sum.
    fn log_scaled_sum(&self) -> LogTerm {
        let g = self.view.graph();
        let mut terms = vec![LogTerm::zero()];
        terms.extend((0..g.n_dynasties()).map(|d| LogTerm::logit(self.acts, d)));
        terms.extend(self.period_terms.iter().cloned());
        log_sum_exp(&terms)
    }

    /// Log of the scaled mass of legal assignments with `node` active.
    fn log_numerator(&self, node: usize) -> LogTerm {
        let g = self.view.graph();
        let acts = self.acts;
        match g.nodes()[node].kind {
            NodeKind::Dynasty => {
                let mut terms = vec![LogTerm::logit(acts, node)];
                terms.extend(g.children(node).iter().map(|&p| self.period_terms[p - g.n_dynasties()].clone()));
                log_sum_exp(&terms)
            }
            NodeKind::Period => self.period_terms[node - g.n_dynasties()].clone(),
            NodeKind::Shape => {
                let terms: Vec<LogTerm> = g
                    .parents(node)
                    .iter()
                    .map(|&p| {
                        let local = p - g.n_dynasties();
                        LogTerm::logit(acts, g.period_parent(local))
                            .plus(&LogTerm::logit(acts, p))
                            .plus(&LogTerm::logit(acts, node))
                    })
                    .collect();
                log_sum_exp(&terms)
            }
            NodeKind::Characteristic => {
                // o_c / (1 + o_c) of each parent's product is the share with c on.
                let on = LogTerm::logit(acts, node).minus(&LogTerm::softplus(acts, node));
                let terms: Vec<LogTerm> = g
                    .parents(node)
                    .iter()
                    .map(|&p| self.period_terms[p - g.n_dynasties()].clone().plus(&on))
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }

    fn log_marginal(&self, node: usize, log_s: &LogTerm) -> Result<LogTerm, InferenceError> {
        if !self.view.contains(node) {
            return Err(InferenceError::NodeNotInView(node));
        }
        Ok(self.log_numerator(node).minus(log_s))
    }

    fn log_scale(&self) -> f64 {
        self.view.nodes().iter().map(|&i| self.acts.ln_one_minus(i)).sum()
    }
}

fn view_children(view: &GraphView<'_>, node: usize) -> Vec<usize> {
    view.graph()
        .children(node)
        .iter()
        .copied()
        .filter(|&c| view.contains(c))
        .collect()
}

fn log_joint_unchecked(view: &GraphView<'_>, acts: &NodeActivations, bits: &[bool]) -> f64 {
    view.nodes()
        .iter()
        .zip(bits)
        .map(|(&i, &on)| if on { acts.clamped(i).ln() } else { acts.ln_one_minus(i) })
        .sum()
}

/// Unnormalized joint probability of a legal assignment.
pub fn joint_probability(view: &GraphView<'_>, acts: &NodeActivations, a: &Assignment) -> Result<f64, InferenceError> {
    acts.check(view)?;
    if !crate::graph::is_legal(view, a)? {
        return Err(InferenceError::IllegalAssignment);
    }
    Ok(log_joint_unchecked(view, acts, &a.bits).exp())
}

/// `ln Z` by the closed-form factorization.
pub fn partition_function(view: &GraphView<'_>, acts: &NodeActivations) -> Result<f64, InferenceError> {
    let f = Factorized::new(view, acts)?;
    Ok(f.log_scale() + f.log_scaled_sum().value)
}

/// `Pr(node = 1)` by the closed-form factorization.
pub fn marginal(view: &GraphView<'_>, acts: &NodeActivations, node: usize) -> Result<f64, InferenceError> {
    let f = Factorized::new(view, acts)?;
    let log_s = f.log_scaled_sum();
    Ok(f.log_marginal(node, &log_s)?.value.exp())
}

/// `ln Z` and every marginal of the view by the closed-form factorization.
pub fn factorized_inference(view: &GraphView<'_>, acts: &NodeActivations) -> Result<InferenceResult, InferenceError> {
    let f = Factorized::new(view, acts)?;
    let log_s = f.log_scaled_sum();
    let marginals = view
        .nodes()
        .iter()
        .map(|&n| f.log_marginal(n, &log_s).map(|t| t.value.exp()))
        .collect::<Result<_, _>>()?;
    Ok(InferenceResult {
        log_z: f.log_scale() + log_s.value,
        marginals,
    })
}

/// `ln Pr(node = 1)` and its gradient with respect to the activations
/// (dense, global node order; zero outside the view and where clamped).
pub fn log_marginal_with_grad(
    view: &GraphView<'_>,
    acts: &NodeActivations,
    node: usize,
) -> Result<(f64, Vec<f64>), InferenceError> {
    let f = Factorized::new(view, acts)?;
    let log_s = f.log_scaled_sum();
    let term = f.log_marginal(node, &log_s)?;
    let mut grad = vec![0.0; acts.len()];
    for (i, g) in term.grad {
        grad[i] += g;
    }
    for (i, g) in grad.iter_mut().enumerate() {
        *g *= acts.dlogit_dp(i);
    }
    Ok((term.value, grad))
}

/// Brute-force `ln Z` and marginals by summing over [`enumerate_legal`].
///
/// [`enumerate_legal`]: crate::graph::enumerate_legal
pub fn oracle_inference(view: &GraphView<'_>, acts: &NodeActivations) -> Result<InferenceResult, InferenceError> {
    oracle_inference_capped(view, acts, DEFAULT_ENUMERATION_CAP)
}

pub fn oracle_inference_capped(
    view: &GraphView<'_>,
    acts: &NodeActivations,
    cap: usize,
) -> Result<InferenceResult, InferenceError> {
    acts.check(view)?;
    let legal = enumerate_legal_capped(view, cap)?;
    debug_assert!(legal.iter().all(|a| is_legal_unchecked(view, &a.bits)));
    let log_joints: Vec<f64> = legal.iter().map(|a| log_joint_unchecked(view, acts, &a.bits)).collect();
    let log_z = log_sum_exp_values(&log_joints);
    let mut marginals = vec![0.0; view.len()];
    for (a, lj) in legal.iter().zip(&log_joints) {
        let w = (lj - log_z).exp();
        for (m, &on) in marginals.iter_mut().zip(&a.bits) {
            if on {
                *m += w;
            }
        }
    }
    Ok(InferenceResult { log_z, marginals })
}
