//! Preference-loss objectives over log-probability inputs: DPO, IPO, and
//! KTO, each with the exact loss value and analytic gradient w.r.t. the
//! policy log-probs (the reference is frozen), plus a central-difference
//! gradient checker.
//!
//! With `W = beta * (lp_policy_chosen - lp_ref_chosen)` and
//! `L = beta * (lp_policy_rejected - lp_ref_rejected)`:
//!
//! * DPO: `-ln sigmoid(W - L)`, computed as `softplus(L - W)`.
//! * IPO: `(h - 1/(2 beta))^2` with `h = (W - L) / beta`.
//! * KTO (per singleton with log-ratio `r = lp_policy - lp_ref`):
//!   desirable `lambda_d * (1 - sigmoid(beta * (r - z0)))`, undesirable
//!   `lambda_u * (1 - sigmoid(beta * (z0 - r)))`, where the reference point
//!   `z0` is the positive part of the leave-one-out batch mean of `r` and is
//!   treated as a constant by the gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{sigmoid, softplus};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("log-probabilities must be finite")]
    NonFiniteLogProb,
    #[error("KTO weights must be positive")]
    InvalidLambda,
    #[error("batch must be nonempty")]
    EmptyBatch,
    #[error("{algo} expects {expected} inputs")]
    AlgoInputMismatch { algo: &'static str, expected: &'static str },
}

/// KL-penalty strength shared by all three objectives. Always positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Beta(f64);

impl Beta {
    pub fn new(value: f64) -> Result<Self, LossError> {
        if value > 0.0 && value.is_finite() {
            Ok(Beta(value))
        } else {
            Err(LossError::InvalidBeta(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// The four log-probabilities parameterizing a paired objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadLogProbs {
    pub lp_policy_chosen: f64,
    pub lp_ref_chosen: f64,
    pub lp_policy_rejected: f64,
    pub lp_ref_rejected: f64,
}

impl QuadLogProbs {
    pub fn new(
        lp_policy_chosen: f64,
        lp_ref_chosen: f64,
        lp_policy_rejected: f64,
        lp_ref_rejected: f64,
    ) -> Result<Self, LossError> {
        let q = QuadLogProbs {
            lp_policy_chosen,
            lp_ref_chosen,
            lp_policy_rejected,
            lp_ref_rejected,
        };
        if [lp_policy_chosen, lp_ref_chosen, lp_policy_rejected, lp_ref_rejected]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(q)
        } else {
            Err(LossError::NonFiniteLogProb)
        }
    }

    /// `(chosen log-ratio - rejected log-ratio)`, the margin before scaling.
    pub fn ratio_margin(&self) -> f64 {
        (self.lp_policy_chosen - self.lp_ref_chosen)
            - (self.lp_policy_rejected - self.lp_ref_rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KtoLabel {
    #[serde(rename = "desirable")]
    Desirable,
    #[serde(rename = "undesirable")]
    Undesirable,
}

/// A single labeled response for KTO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KtoExample {
    pub lp_policy: f64,
    pub lp_ref: f64,
    pub label: KtoLabel,
}

impl KtoExample {
    pub fn log_ratio(&self) -> f64 {
        self.lp_policy - self.lp_ref
    }
}

/// Loss value plus analytic gradient w.r.t. the policy log-prob inputs:
/// `(lp_policy_chosen, lp_policy_rejected)` for DPO/IPO, `(lp_policy,)`
/// for KTO.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "ipo")]
    Ipo,
    #[serde(rename = "kto")]
    Kto,
}

impl Algo {
    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Dpo => "dpo",
            Algo::Ipo => "ipo",
            Algo::Kto => "kto",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dpo" => Some(Algo::Dpo),
            "ipo" => Some(Algo::Ipo),
            "kto" => Some(Algo::Kto),
            _ => None,
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// DPO loss `-ln sigmoid(W - L)` and its gradient
/// `(-beta * sigmoid(L - W), +beta * sigmoid(L - W))`.
pub fn dpo_loss(q: &QuadLogProbs, beta: Beta) -> LossResult {
    let z = beta.value() * q.ratio_margin();
    let s = sigmoid(-z);
    LossResult {
        loss: softplus(-z),
        grad: vec![-beta.value() * s, beta.value() * s],
    }
}

/// IPO loss `(h - 1/(2 beta))^2` over the raw log-ratio margin `h`, with
/// gradient `(2 d, -2 d)` for `d = h - 1/(2 beta)`.
pub fn ipo_loss(q: &QuadLogProbs, beta: Beta) -> LossResult {
    let d = q.ratio_margin() - 1.0 / (2.0 * beta.value());
    LossResult {
        loss: d * d,
        grad: vec![2.0 * d, -2.0 * d],
    }
}

/// KTO loss for one labeled singleton against a fixed reference point. The
/// reference point is a constant for gradient purposes.
pub fn kto_loss(
    ex: &KtoExample,
    beta: Beta,
    ref_point: f64,
    lambda_d: f64,
    lambda_u: f64,
) -> Result<LossResult, LossError> {
    if lambda_d <= 0.0 || lambda_u <= 0.0 {
        return Err(LossError::InvalidLambda);
    }
    let b = beta.value();
    let r = ex.log_ratio();
    let (loss, grad) = match ex.label {
        KtoLabel::Desirable => {
            let s = sigmoid(b * (r - ref_point));
            (lambda_d * (1.0 - s), -lambda_d * b * s * (1.0 - s))
        }
        KtoLabel::Undesirable => {
            let s = sigmoid(b * (ref_point - r));
            (lambda_u * (1.0 - s), lambda_u * b * s * (1.0 - s))
        }
    };
    Ok(LossResult {
        loss,
        grad: vec![grad],
    })
}

/// Leave-one-out KTO reference point: the positive part of the mean
/// log-ratio over the batch excluding `exclude`; 0 for a batch of one.
pub fn kto_ref_point(log_ratios: &[f64], exclude: usize) -> f64 {
    if log_ratios.len() <= 1 {
        return 0.0;
    }
    let sum: f64 = log_ratios
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != exclude)
        .map(|(_, r)| r)
        .sum();
    (sum / (log_ratios.len() - 1) as f64).max(0.0)
}

/// A batch for [`batch_objective`]: paired quads for DPO/IPO, labeled
/// singletons for KTO.
#[derive(Debug, Clone, Copy)]
pub enum BatchInput<'a> {
    Paired(&'a [QuadLogProbs]),
    Singletons(&'a [KtoExample]),
}

/// Mean loss over a batch, with per-input gradients scaled by `1/batch` and
/// margin statistics (`W - L` scaled margin for DPO, the raw log-ratio
/// margin `h` for IPO, the per-example log-ratio `r` for KTO).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub mean_loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub margin_mean: f64,
    pub margin_min: f64,
    pub margin_max: f64,
}

pub fn batch_objective(
    input: BatchInput<'_>,
    algo: Algo,
    beta: Beta,
) -> Result<BatchResult, LossError> {
    match (algo, input) {
        (Algo::Dpo, BatchInput::Paired(quads)) => {
            paired_batch(quads, |q| (dpo_loss(q, beta), beta.value() * q.ratio_margin()))
        }
        (Algo::Ipo, BatchInput::Paired(quads)) => {
            paired_batch(quads, |q| (ipo_loss(q, beta), q.ratio_margin()))
        }
        (Algo::Kto, BatchInput::Singletons(examples)) => kto_batch(examples, beta, 1.0, 1.0),
        (Algo::Kto, BatchInput::Paired(_)) => Err(LossError::AlgoInputMismatch {
            algo: "kto",
            expected: "labeled singleton",
        }),
        (algo, BatchInput::Singletons(_)) => Err(LossError::AlgoInputMismatch {
            algo: algo.as_str(),
            expected: "paired quad",
        }),
    }
}

fn paired_batch(
    quads: &[QuadLogProbs],
    per_example: impl Fn(&QuadLogProbs) -> (LossResult, f64),
) -> Result<BatchResult, LossError> {
    if quads.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = quads.len() as f64;
    let mut acc = MarginAcc::new();
    let mut loss_sum = 0.0;
    let mut grads = Vec::with_capacity(quads.len());
    for q in quads {
        let (res, margin) = per_example(q);
        loss_sum += res.loss;
        grads.push(res.grad.iter().map(|g| g / n).collect());
        acc.push(margin);
    }
    Ok(acc.finish(loss_sum / n, grads))
}

/// KTO over labeled singletons with explicit weights; the per-example
/// reference point is the leave-one-out positive-part mean of the log-ratios.
pub fn kto_batch(
    examples: &[KtoExample],
    beta: Beta,
    lambda_d: f64,
    lambda_u: f64,
) -> Result<BatchResult, LossError> {
    if examples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = examples.len() as f64;
    let log_ratios: Vec<f64> = examples.iter().map(KtoExample::log_ratio).collect();
    let mut acc = MarginAcc::new();
    let mut loss_sum = 0.0;
    let mut grads = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let ref_point = kto_ref_point(&log_ratios, i);
        let res = kto_loss(ex, beta, ref_point, lambda_d, lambda_u)?;
        loss_sum += res.loss;
        grads.push(res.grad.iter().map(|g| g / n).collect());
        acc.push(log_ratios[i]);
    }
    Ok(acc.finish(loss_sum / n, grads))
}

struct MarginAcc {
    sum: f64,
    min: f64,
    max: f64,
    n: usize,
}

impl MarginAcc {
    fn new() -> Self {
        MarginAcc { sum: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY, n: 0 }
    }

    fn push(&mut self, m: f64) {
        self.sum += m;
        self.min = self.min.min(m);
        self.max = self.max.max(m);
        self.n += 1;
    }

    fn finish(self, mean_loss: f64, grads: Vec<Vec<f64>>) -> BatchResult {
        BatchResult {
            mean_loss,
            grads,
            margin_mean: self.sum / self.n as f64,
            margin_min: self.min,
            margin_max: self.max,
        }
    }
}

/// Serialized summary of one objective evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub algo: Algo,
    pub beta: f64,
    pub mean_loss: f64,
    pub margin_mean: f64,
    pub margin_min: f64,
    pub margin_max: f64,
}

impl LossReport {
    pub fn from_batch(algo: Algo, beta: Beta, batch: &BatchResult) -> Self {
        LossReport {
            algo,
            beta: beta.value(),
            mean_loss: batch.mean_loss,
            margin_mean: batch.margin_mean,
            margin_min: batch.margin_min,
            margin_max: batch.margin_max,
        }
    }
}

/// A point at which [`grad_check`] compares analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub enum CheckPoint {
    Paired(QuadLogProbs),
    Kto { example: KtoExample, ref_point: f64 },
}

/// Central-difference check of the analytic gradients: perturbs each policy
/// log-prob coordinate by `±eps` and returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check(algo: Algo, point: &CheckPoint, beta: Beta, eps: f64) -> f64 {
    assert!(eps > 0.0, "eps must be positive");
    let loss_at = |point: &CheckPoint| -> (f64, Vec<f64>) {
        match (algo, point) {
            (Algo::Dpo, CheckPoint::Paired(q)) => {
                let r = dpo_loss(q, beta);
                (r.loss, r.grad)
            }
            (Algo::Ipo, CheckPoint::Paired(q)) => {
                let r = ipo_loss(q, beta);
                (r.loss, r.grad)
            }
            (Algo::Kto, CheckPoint::Kto { example, ref_point }) => {
                let r = kto_loss(example, beta, *ref_point, 1.0, 1.0)
                    .expect("unit lambdas are valid");
                (r.loss, r.grad)
            }
            _ => panic!("algorithm/check-point mismatch"),
        }
    };

    let (_, analytic) = loss_at(point);
    let shifted = |coord: usize, delta: f64| -> CheckPoint {
        match point {
            CheckPoint::Paired(q) => {
                let mut q = *q;
                match coord {
                    0 => q.lp_policy_chosen += delta,
                    _ => q.lp_policy_rejected += delta,
                }
                CheckPoint::Paired(q)
            }
            CheckPoint::Kto { example, ref_point } => {
                let mut ex = *example;
                ex.lp_policy += delta;
                CheckPoint::Kto { example: ex, ref_point: *ref_point }
            }
        }
    };

    let mut worst = 0.0f64;
    for (coord, a) in analytic.iter().enumerate() {
        let (plus, _) = loss_at(&shifted(coord, eps));
        let (minus, _) = loss_at(&shifted(coord, -eps));
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
