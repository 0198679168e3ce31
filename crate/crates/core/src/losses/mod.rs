//! Token-level losses over logits, each returning its value together with
//! the analytic gradient with respect to the logits.
//!
//! * [`cross_entropy`]: full-vocabulary CE, averaged over non-padded positions.
//! * [`ntl_lp`], [`ntl_was`], [`ntl_was_cdf`]: number token losses, averaged
//!   over number positions only. Text positions contribute nothing.
//! * [`gce`]: cross-entropy against Gaussian-smoothed number targets.
//! * [`combine`]: `ce + λ·ntl`.
//!
//! Number losses read probabilities over the number-token slice of the
//! vocabulary; see [`SoftmaxDomain`] for the two available readings.

mod ce;
mod cost;
mod gce;
mod ntl;
pub mod oracle;
mod softmax;

use ndarray::Array2;
use thiserror::Error;

use crate::numvocab::{number_mask, LabelBatch, NumberVocabulary, VocabError};
use crate::real::Real;

pub use ce::cross_entropy;
pub use cost::{build_cost, CostKind, CostSpec};
pub use gce::{gaussian_smooth_labels, gaussian_smooth_values, gce, GCE_LOG_FLOOR};
pub(crate) use ntl::lp_row;
pub use ntl::{combine, combine_owned, ntl_lp, ntl_was, ntl_was_cdf, LpVariant, DEFAULT_HUBER_DELTA, DEFAULT_LAMBDA};
pub use oracle::wasserstein_oracle;
pub use softmax::number_softmax;

/// Logits of shape `(positions, vocabulary)`.
pub type LogitBatch<A> = Array2<A>;

/// Row-stochastic tolerance for target distributions.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("logits have {logit_rows} rows but labels have {labels} positions")]
    PositionMismatch { logit_rows: usize, labels: usize },
    #[error("logits have {cols} columns but the vocabulary has {vocab} tokens")]
    VocabMismatch { cols: usize, vocab: usize },
    #[error("number losses need at least 2 number tokens, vocabulary has {0}")]
    TooFewNumberTokens(usize),
    #[error("CDF form needs number values that are sorted and equally spaced")]
    NotEquidistant,
    #[error("target row {row} is not a distribution: {reason}")]
    NotStochastic { row: usize, reason: String },
    #[error("targets cover positions {got:?}, number positions are {expected:?}")]
    TargetPositions { expected: Vec<usize>, got: Vec<usize> },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("value {0} is not a number token value")]
    UnknownValue(f64),
    #[error("squash factor must be positive, got {0}")]
    BadSquash(f64),
    #[error("invalid cost matrix: {0}")]
    BadCost(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("support mismatch: {0}")]
    Support(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Where number probabilities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SoftmaxDomain {
    /// Softmax over the number-token columns only, renormalized.
    #[default]
    Slice,
    /// Full-vocabulary softmax restricted to the number columns.
    Full,
}

impl std::str::FromStr for SoftmaxDomain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slice" => Ok(Self::Slice),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown softmax domain {other:?}")),
        }
    }
}

impl std::fmt::Display for SoftmaxDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Slice => "slice",
            Self::Full => "full",
        })
    }
}

/// Scalar loss, per-position losses and the gradient w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<A> {
    pub total: A,
    /// Unaveraged loss per position; zero where a position does not count.
    pub per_position: Vec<A>,
    pub grad_logits: Array2<A>,
    /// Positions the total is averaged over (number positions for NTL/GCE,
    /// non-padded positions for CE).
    pub number_position_count: usize,
    /// Columns outside which `grad_logits` is known to be zero; `None` when
    /// the gradient may touch any column.
    pub support: Option<Vec<usize>>,
}

impl<A: Real> LossResult<A> {
    pub(crate) fn zero(positions: usize, vocab: usize) -> Self {
        Self {
            total: A::zero(),
            per_position: vec![A::zero(); positions],
            grad_logits: Array2::zeros((positions, vocab)),
            number_position_count: 0,
            support: None,
        }
    }

    /// True when no position contributed (e.g. a text-only batch for NTL).
    pub fn is_empty(&self) -> bool {
        self.number_position_count == 0
    }
}

/// Target distributions over the number slice, one row per number position.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    /// Label positions the rows belong to, ascending.
    pub positions: Vec<usize>,
    pub probs: Array2<f64>,
}

impl TargetDistribution {
    pub fn new(positions: Vec<usize>, probs: Array2<f64>) -> Result<Self, LossError> {
        if positions.len() != probs.nrows() {
            return Err(LossError::Shape(format!(
                "{} positions for {} target rows",
                positions.len(),
                probs.nrows()
            )));
        }
        for (row, r) in probs.rows().into_iter().enumerate() {
            if let Some(bad) = r.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(LossError::NotStochastic {
                    row,
                    reason: format!("entry {bad}"),
                });
            }
            let sum: f64 = r.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(LossError::NotStochastic {
                    row,
                    reason: format!("sums to {sum}"),
                });
            }
        }
        Ok(Self { positions, probs })
    }

    /// One-hot rows at the label of every number position.
    pub fn one_hot(labels: &LabelBatch, vocab: &NumberVocabulary) -> Result<Self, LossError> {
        let mask = number_mask(labels, vocab)?;
        let slot = vocab.slice_positions();
        let positions: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
        let mut probs = Array2::zeros((positions.len(), vocab.number_indices().len()));
        for (r, &i) in positions.iter().enumerate() {
            probs[[r, slot[labels.ids[i]].unwrap()]] = 1.0;
        }
        Ok(Self { positions, probs })
    }
}

/// Number losses bound to a vocabulary and a softmax domain.
#[derive(Debug, Clone, Copy)]
pub struct NumberLoss<'v> {
    pub vocab: &'v NumberVocabulary,
    pub domain: SoftmaxDomain,
}

impl<'v> NumberLoss<'v> {
    pub fn new(vocab: &'v NumberVocabulary) -> Self {
        Self {
            vocab,
            domain: SoftmaxDomain::Slice,
        }
    }

    pub fn with_domain(mut self, domain: SoftmaxDomain) -> Self {
        self.domain = domain;
        self
    }
}

/// Shared shape checks; returns the number mask.
pub(crate) fn check_inputs<A: Real>(
    logits: &Array2<A>,
    labels: &LabelBatch,
    vocab: &NumberVocabulary,
) -> Result<Vec<bool>, LossError> {
    if logits.nrows() != labels.len() {
        return Err(LossError::PositionMismatch {
            logit_rows: logits.nrows(),
            labels: labels.len(),
        });
    }
    if logits.ncols() != vocab.len() {
        return Err(LossError::VocabMismatch {
            cols: logits.ncols(),
            vocab: vocab.len(),
        });
    }
    let n = vocab.number_indices().len();
    if n < 2 {
        return Err(LossError::TooFewNumberTokens(n));
    }
    Ok(number_mask(labels, vocab)?)
}
