//! Loss functions for imbalanced and sparse regression targets.
//!
//! Each loss is available as a plain value function and as a value plus the
//! gradient with respect to the predictions, which the training loop feeds
//! into the tape through [`crate::autodiff::Tape::custom_scalar`].

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geomodel::GridMap;
use crate::stats::UniformBins;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss needs at least one sample")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("tail loss needs at least one (a, y_r) term")]
    EmptyTerms,
    #[error("invalid tail term: {0}")]
    InvalidTerm(String),
    #[error("distribution weights need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate target range: min = max = {0}")]
    DegenerateRange(f64),
    #[error("row {0} is not a probability distribution")]
    InvalidProbabilities(usize),
    #[error("no observed cells in any sample")]
    EmptyMask,
    #[error("distribution loss used before weights were fitted")]
    Unfitted,
}

/// Extra penalty factor `a` applied when the truth exceeds `y_r` but the prediction does not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailTerm {
    pub a: f64,
    pub y_r: f64,
}

impl TailTerm {
    pub fn new(a: f64, y_r: f64) -> Result<Self, LossError> {
        if !(a > 0.0) || !y_r.is_finite() {
            return Err(LossError::InvalidTerm(format!("a = {a}, y_r = {y_r}")));
        }
        Ok(Self { a, y_r })
    }
}

/// The five (a, y_r) pairs used for the tail-loss experiments, y_r in log10 flux.
pub const DEFAULT_TAIL_TERMS: [TailTerm; 5] = [
    TailTerm { a: 2.5, y_r: 12.0 },
    TailTerm { a: 5.0, y_r: 12.5 },
    TailTerm { a: 10.0, y_r: 13.0 },
    TailTerm { a: 10.0, y_r: 13.25 },
    TailTerm { a: 10.0, y_r: 13.5 },
];

/// Parses `a:y_r,a:y_r,...`.
pub fn parse_tail_terms(s: &str) -> Result<Vec<TailTerm>, LossError> {
    let terms = s
        .split(',')
        .map(|pair| {
            let (a, y) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| LossError::InvalidTerm(pair.to_string()))?;
            let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| LossError::InvalidTerm(pair.to_string()));
            TailTerm::new(parse(a)?, parse(y)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if terms.is_empty() {
        return Err(LossError::EmptyTerms);
    }
    Ok(terms)
}

pub fn format_tail_terms(terms: &[TailTerm]) -> String {
    terms.iter().map(|t| format!("{}:{}", t.a, t.y_r)).collect::<Vec<_>>().join(",")
}

fn check_pair(y_true: &[f64], y_pred: &[f64]) -> Result<(), LossError> {
    if y_true.len() != y_pred.len() {
        return Err(LossError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(())
}

/// Weighted mean squared error and its gradient w.r.t. `y_pred`.
fn weighted_se(y_true: &[f64], y_pred: &[f64], weight: impl Fn(usize) -> f64) -> (f64, Vec<f64>) {
    let n = y_true.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(y_true.len());
    for (i, (t, p)) in y_true.iter().zip(y_pred).enumerate() {
        let w = weight(i);
        let d = t - p;
        total += w * d * d;
        grad.push(-2.0 * w * d / n);
    }
    (total / n, grad)
}

pub fn mse(y_true: &[f64], y_pred: &[f64]) -> Result<f64, LossError> {
    mse_with_grad(y_true, y_pred).map(|r| r.0)
}

pub fn mse_with_grad(y_true: &[f64], y_pred: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    check_pair(y_true, y_pred)?;
    Ok(weighted_se(y_true, y_pred, |_| 1.0))
}

/// Sum of penalty factors active for one sample.
pub fn tail_multiplier(y_true: f64, y_pred: f64, terms: &[TailTerm]) -> f64 {
    1.0 + terms
        .iter()
        .filter(|t| y_true > t.y_r && y_pred < t.y_r)
        .map(|t| t.a)
        .sum::<f64>()
}

/// Mean of `(y_true - y_pred)^2 * (1 + sum of active a_i)`. The indicators are
/// treated as constants when differentiating.
pub fn tail_loss(y_true: &[f64], y_pred: &[f64], terms: &[TailTerm]) -> Result<f64, LossError> {
    tail_loss_with_grad(y_true, y_pred, terms).map(|r| r.0)
}

pub fn tail_loss_with_grad(
    y_true: &[f64],
    y_pred: &[f64],
    terms: &[TailTerm],
) -> Result<(f64, Vec<f64>), LossError> {
    check_pair(y_true, y_pred)?;
    if terms.is_empty() {
        return Err(LossError::EmptyTerms);
    }
    Ok(weighted_se(y_true, y_pred, |i| tail_multiplier(y_true[i], y_pred[i], terms)))
}

/// Inverse-frequency sample weights over a uniform histogram of training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistWeights {
    bins: UniformBins,
    counts: Vec<usize>,
    weights: Vec<f64>,
    n_total: usize,
}

impl DistWeights {
    pub fn n_bins(&self) -> usize {
        self.bins.n_bins
    }

    pub fn edges(&self) -> Vec<f64> {
        self.bins.edges()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// Weight of the bin holding `y`; out-of-range values use the nearest edge bin.
    pub fn weight(&self, y: f64) -> f64 {
        self.weights[self.bins.index(y)]
    }

    /// Mean weight over the fitted sample: `sum(count * weight) / n_total`.
    pub fn mean_training_weight(&self) -> f64 {
        self.counts.iter().zip(&self.weights).map(|(&c, w)| c as f64 * w).sum::<f64>()
            / self.n_total as f64
    }
}

/// `weight = 1 / ((count + 1) * m)` per bin of an `n_bins` uniform histogram over `[min, max]`.
pub fn fit_dist_weights(y_train: &[f64], n_bins: usize) -> Result<DistWeights, LossError> {
    let m = y_train.len();
    if m < 2 {
        return Err(LossError::TooFewSamples(m));
    }
    if n_bins == 0 {
        return Err(LossError::InvalidTerm("n_bins must be positive".into()));
    }
    let lo = y_train.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y_train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(LossError::DegenerateRange(lo));
    }
    let bins = UniformBins { lo, hi, n_bins };
    let counts = bins.counts(y_train);
    let weights = counts.iter().map(|&c| 1.0 / ((c as f64 + 1.0) * m as f64)).collect();
    Ok(DistWeights { bins, counts, weights, n_total: m })
}

pub fn dist_loss(y_true: &[f64], y_pred: &[f64], w: &DistWeights) -> Result<f64, LossError> {
    dist_loss_with_grad(y_true, y_pred, w).map(|r| r.0)
}

pub fn dist_loss_with_grad(
    y_true: &[f64],
    y_pred: &[f64],
    w: &DistWeights,
) -> Result<(f64, Vec<f64>), LossError> {
    check_pair(y_true, y_pred)?;
    Ok(weighted_se(y_true, y_pred, |i| w.weight(y_true[i])))
}

/// Probabilities below this floor are clamped inside the cross-entropy log.
pub const CCE_FLOOR: f64 = 1e-12;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskOutput {
    pub value: f64,
    pub mse: f64,
    pub cce: f64,
    /// d loss / d region_flux, `[n, k]`
    pub grad_flux: Vec<f64>,
    /// d loss / d class_prob, `[n, k]`
    pub grad_prob: Vec<f64>,
}

/// MSE on the regression output of the predicted class plus `lambda_cce`
/// times the mean categorical cross-entropy.
pub fn multitask_loss(
    y_flux_true: &[f64],
    region_flux: &[f64],
    class_true: &[f64],
    class_prob: &[f64],
    k: usize,
    lambda_cce: f64,
) -> Result<MultiTaskOutput, LossError> {
    let n = y_flux_true.len();
    if n == 0 {
        return Err(LossError::Empty);
    }
    for len in [region_flux.len(), class_true.len(), class_prob.len()] {
        if len != n * k {
            return Err(LossError::LengthMismatch(len, n * k));
        }
    }
    let nf = n as f64;
    let mut grad_flux = vec![0.0; n * k];
    let mut grad_prob = vec![0.0; n * k];
    let (mut se, mut ce) = (0.0, 0.0);
    for i in 0..n {
        let probs = &class_prob[i * k..(i + 1) * k];
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::InvalidProbabilities(i));
        }
        let sel = argmax(probs);
        let d = y_flux_true[i] - region_flux[i * k + sel];
        se += d * d;
        grad_flux[i * k + sel] = -2.0 * d / nf;
        for j in 0..k {
            let t = class_true[i * k + j];
            if t == 0.0 {
                continue;
            }
            let p = probs[j];
            if p > CCE_FLOOR {
                ce -= t * p.ln();
                grad_prob[i * k + j] = -lambda_cce * t / (p * nf);
            } else {
                ce -= t * CCE_FLOOR.ln();
            }
        }
    }
    let (mse, cce) = (se / nf, ce / nf);
    Ok(MultiTaskOutput { value: mse + lambda_cce * cce, mse, cce, grad_flux, grad_prob })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLossOutput {
    pub value: f64,
    /// Zero at every unobserved cell.
    pub grad: Vec<f64>,
    pub observed: usize,
    /// Samples with an empty mask.
    pub skipped: usize,
}

/// Squared error over observed cells only. `preds` holds one flattened grid per
/// target. With `normalize` the sum is divided by the number of observed cells
/// in the batch; otherwise the raw sum is returned.
pub fn sparse_masked_loss(
    preds: &[f64],
    targets: &[&GridMap],
    normalize: bool,
) -> Result<SparseLossOutput, LossError> {
    let Some(first) = targets.first() else {
        return Err(LossError::Empty);
    };
    let cells = first.spec.len();
    if preds.len() != cells * targets.len() || targets.iter().any(|t| t.spec.len() != cells) {
        return Err(LossError::LengthMismatch(preds.len(), cells * targets.len()));
    }
    let mut sum = 0.0;
    let mut observed = 0usize;
    let mut skipped = 0usize;
    for (b, t) in targets.iter().enumerate() {
        let before = observed;
        for (i, v) in t.observed() {
            let d = preds[b * cells + i] - v;
            sum += d * d;
            observed += 1;
        }
        if observed == before {
            skipped += 1;
        }
    }
    if observed == 0 {
        return Err(LossError::EmptyMask);
    }
    let scale = if normalize { 1.0 / observed as f64 } else { 1.0 };
    let mut grad = vec![0.0; preds.len()];
    for (b, t) in targets.iter().enumerate() {
        for (i, v) in t.observed() {
            grad[b * cells + i] = 2.0 * (preds[b * cells + i] - v) * scale;
        }
    }
    Ok(SparseLossOutput { value: sum * scale, grad, observed, skipped })
}

/// Declarative loss selection.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    Mse,
    Tail { terms: Vec<TailTerm> },
    /// Weights are fitted on the training targets when training starts.
    Dist { n_bins: usize, rescale: bool },
    MultiTask { lambda_cce: f64 },
    SparseMasked { normalize: bool },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Mse => "mse",
            LossSpec::Tail { .. } => "tail",
            LossSpec::Dist { .. } => "dist",
            LossSpec::MultiTask { .. } => "multitask",
            LossSpec::SparseMasked { .. } => "sparse_masked",
        }
    }

    pub fn tail_default() -> Self {
        LossSpec::Tail { terms: DEFAULT_TAIL_TERMS.to_vec() }
    }

    pub fn dist_default() -> Self {
        LossSpec::Dist { n_bins: 50, rescale: true }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss variant name as used in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Tail,
    Dist,
    MultiTask,
    SparseMasked,
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "tail" => Ok(LossKind::Tail),
            "dist" => Ok(LossKind::Dist),
            "multitask" => Ok(LossKind::MultiTask),
            "sparse_masked" => Ok(LossKind::SparseMasked),
            other => Err(format!("unknown loss '{other}'")),
        }
    }
}

/// A point loss with any data-dependent state resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum PointLoss {
    Mse,
    Tail(Vec<TailTerm>),
    /// Distribution loss multiplied by `scale`.
    Dist { weights: DistWeights, scale: f64 },
}

impl PointLoss {
    /// Resolves a point-model loss spec against the training targets.
    pub fn resolve(spec: &LossSpec, y_train: &[f64]) -> Result<Option<Self>, LossError> {
        Ok(match spec {
            LossSpec::Mse => Some(PointLoss::Mse),
            LossSpec::Tail { terms } => {
                if terms.is_empty() {
                    return Err(LossError::EmptyTerms);
                }
                Some(PointLoss::Tail(terms.clone()))
            }
            LossSpec::Dist { n_bins, rescale } => {
                let weights = fit_dist_weights(y_train, *n_bins)?;
                let scale = if *rescale { 1.0 / weights.mean_training_weight() } else { 1.0 };
                Some(PointLoss::Dist { weights, scale })
            }
            LossSpec::MultiTask { .. } | LossSpec::SparseMasked { .. } => None,
        })
    }

    pub fn value_and_grad(&self, y_true: &[f64], y_pred: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
        match self {
            PointLoss::Mse => mse_with_grad(y_true, y_pred),
            PointLoss::Tail(terms) => tail_loss_with_grad(y_true, y_pred, terms),
            PointLoss::Dist { weights, scale } => {
                let (v, mut g) = dist_loss_with_grad(y_true, y_pred, weights)?;
                g.iter_mut().for_each(|x| *x *= scale);
                Ok((v * scale, g))
            }
        }
    }
}
