use ndarray::Array2;

use super::{CostSpec, LossError, LossResult, NumberLoss, SoftmaxDomain, TargetDistribution};
use crate::numvocab::{LabelBatch, NumberVocabulary};
use crate::real::Real;

/// Weight of the number token loss in `ce + λ·ntl`.
pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

/// Penalty applied to `y - ŷ` where `ŷ` is the expected number value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LpVariant {
    Mse,
    Mae,
    Huber(f64),
}

impl LpVariant {
    fn penalty(self, r: f64) -> (f64, f64) {
        match self {
            Self::Mse => (r * r, 2.0 * r),
            Self::Mae => (r.abs(), sign(r)),
            Self::Huber(delta) => {
                if r.abs() <= delta {
                    (0.5 * r * r, r)
                } else {
                    (delta * (r.abs() - 0.5 * delta), delta * sign(r))
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn ntl_lp<A: Real>(
    logits: &Array2<A>,
    labels: &LabelBatch,
    vocab: &NumberVocabulary,
    variant: LpVariant,
) -> Result<LossResult<A>, LossError> {
    NumberLoss::new(vocab).lp(logits, labels, variant)
}

pub fn ntl_was<A: Real>(
    logits: &Array2<A>,
    labels: &LabelBatch,
    vocab: &NumberVocabulary,
    cost: &CostSpec,
) -> Result<LossResult<A>, LossError> {
    NumberLoss::new(vocab).was(logits, labels, cost)
}

pub fn ntl_was_cdf<A: Real>(
    logits: &Array2<A>,
    targets: &TargetDistribution,
    labels: &LabelBatch,
    vocab: &NumberVocabulary,
) -> Result<LossResult<A>, LossError> {
    NumberLoss::new(vocab).was_cdf(logits, targets, labels)
}

impl NumberLoss<'_> {
    /// Regression penalty between the label value and the expected value
    /// `Σ_j p_j v_j` of the predicted number distribution.
    pub fn lp<A: Real>(
        &self,
        logits: &Array2<A>,
        labels: &LabelBatch,
        variant: LpVariant,
    ) -> Result<LossResult<A>, LossError> {
        let values: Vec<A> = self.vocab.number_values().into_iter().map(A::of).collect();
        let centered = self.domain == SoftmaxDomain::Slice;
        self.drive(logits, labels, |_, slot, probs, dp| {
            let y = values[slot];
            let (loss, dr) = lp_row(probs, &values, y, centered, variant);
            // r = Σ p_j (y - v_j) (slice) or y - Σ p_j v_j (full)
            for (g, &v) in dp.iter_mut().zip(&values) {
                *g = if centered { dr * (y - v) } else { -dr * v };
            }
            loss
        })
    }

    /// Expected transport cost from the label token: `Σ_j p_j C[label][j]`.
    ///
    /// With euclidean cost this is the Wasserstein-1 distance between the
    /// prediction and the one-hot label.
    pub fn was<A: Real>(
        &self,
        logits: &Array2<A>,
        labels: &LabelBatch,
        cost: &CostSpec,
    ) -> Result<LossResult<A>, LossError> {
        let n = self.vocab.number_indices().len();
        if cost.matrix.dim() != (n, n) {
            return Err(LossError::Shape(format!(
                "cost matrix {:?} for {n} number tokens",
                cost.matrix.dim()
            )));
        }
        let c: Array2<A> = cost.matrix.mapv(A::of);
        self.drive(logits, labels, |_, slot, probs, dp| {
            let row = c.row(slot);
            dp.iter_mut().zip(row.iter()).for_each(|(g, &c)| *g = c);
            probs.iter().zip(row.iter()).map(|(&p, &c)| p * c).sum()
        })
    }

    /// Wasserstein-1 via cumulative distributions against arbitrary target
    /// rows; needs sorted, equally spaced number values.
    pub fn was_cdf<A: Real>(
        &self,
        logits: &Array2<A>,
        targets: &TargetDistribution,
        labels: &LabelBatch,
    ) -> Result<LossResult<A>, LossError> {
        let spacing = self.vocab.spacing().ok_or(LossError::NotEquidistant)?;
        let mask = super::check_inputs(logits, labels, self.vocab)?;
        let expected: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
        if targets.positions != expected {
            return Err(LossError::TargetPositions {
                expected,
                got: targets.positions.clone(),
            });
        }
        let n = self.vocab.number_indices().len();
        if targets.probs.ncols() != n {
            return Err(LossError::Shape(format!(
                "targets have {} columns for {n} number tokens",
                targets.probs.ncols()
            )));
        }
        // under the slice softmax both CDFs end at exactly 1
        let terms = match self.domain {
            SoftmaxDomain::Slice => n - 1,
            SoftmaxDomain::Full => n,
        };
        let spacing = A::of(spacing);
        let mut signs = vec![A::zero(); n];
        self.drive(logits, labels, |row, _, probs, dp| {
            let target = targets.probs.row(row);
            let (mut cdf_p, mut cdf_t, mut total) = (A::zero(), A::zero(), A::zero());
            for k in 0..terms {
                cdf_p += probs[k];
                cdf_t += A::of(target[k]);
                let d = cdf_p - cdf_t;
                total += d.abs();
                signs[k] = if d > A::zero() {
                    A::one()
                } else if d < A::zero() {
                    -A::one()
                } else {
                    A::zero()
                };
            }
            // dL/dp_j = spacing · Σ_{k ≥ j} sign(F_k - T_k)
            let mut acc = A::zero();
            for j in (0..n).rev() {
                if j < terms {
                    acc += signs[j];
                }
                dp[j] = spacing * acc;
            }
            spacing * total
        })
    }
}

/// Loss of one position given slice probabilities; also returns the
/// derivative of the penalty w.r.t. the residual.
pub(crate) fn lp_row<A: Real>(probs: &[A], values: &[A], y: A, centered: bool, variant: LpVariant) -> (A, A) {
    let r: A = if centered {
        probs.iter().zip(values).map(|(&p, &v)| p * (y - v)).sum()
    } else {
        y - probs.iter().zip(values).map(|(&p, &v)| p * v).sum::<A>()
    };
    let (loss, dpen) = variant.penalty(r.f64());
    (A::of(loss), A::of(dpen))
}

/// `ce + λ·ntl` for the total, per-position losses and gradients.
pub fn combine<A: Real>(
    ce: &LossResult<A>,
    ntl: &LossResult<A>,
    lambda: A,
) -> Result<LossResult<A>, LossError> {
    check_combinable(ce, ntl)?;
    combine_owned(ce.clone(), ntl, lambda)
}

/// Same as [`combine`] but reuses the CE buffers instead of copying them.
pub fn combine_owned<A: Real>(
    mut ce: LossResult<A>,
    ntl: &LossResult<A>,
    lambda: A,
) -> Result<LossResult<A>, LossError> {
    check_combinable(&ce, ntl)?;
    ce.total += lambda * ntl.total;
    // an empty or unweighted term leaves CE untouched, bit for bit
    if ntl.is_empty() || lambda == A::zero() {
        return Ok(ce);
    }
    ce.per_position
        .iter_mut()
        .zip(&ntl.per_position)
        .for_each(|(a, &b)| *a += lambda * b);
    match &ntl.support {
        Some(cols) => {
            for (mut out, g) in ce.grad_logits.rows_mut().into_iter().zip(ntl.grad_logits.rows()) {
                for &j in cols {
                    out[j] += lambda * g[j];
                }
            }
        }
        None => ce.grad_logits.scaled_add(lambda, &ntl.grad_logits),
    }
    ce.support = match (ce.support.take(), &ntl.support) {
        (Some(mut a), Some(b)) => {
            a.extend_from_slice(b);
            a.sort_unstable();
            a.dedup();
            Some(a)
        }
        _ => None,
    };
    Ok(ce)
}

fn check_combinable<A: Real>(ce: &LossResult<A>, ntl: &LossResult<A>) -> Result<(), LossError> {
    if ce.grad_logits.dim() != ntl.grad_logits.dim() || ce.per_position.len() != ntl.per_position.len() {
        return Err(LossError::Shape(format!(
            "ce gradient {:?} vs ntl gradient {:?}",
            ce.grad_logits.dim(),
            ntl.grad_logits.dim()
        )));
    }
    Ok(())
}
