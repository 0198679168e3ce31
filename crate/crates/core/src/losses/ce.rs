use ndarray::Array2;

use super::{LossError, LossResult};
use crate::numvocab::LabelBatch;
use crate::real::Real;

/// Full-vocabulary cross-entropy averaged over non-padded positions.
pub fn cross_entropy<A: Real>(
    logits: &Array2<A>,
    labels: &LabelBatch,
) -> Result<LossResult<A>, LossError> {
    if logits.nrows() != labels.len() {
        return Err(LossError::PositionMismatch {
            logit_rows: logits.nrows(),
            labels: labels.len(),
        });
    }
    labels.check_range(logits.ncols())?;
    let mut out = LossResult::zero(logits.nrows(), logits.ncols());
    let count = labels.active();
    if count == 0 {
        return Ok(out);
    }
    let scale = A::one() / A::of(count as f64);
    let mut sum = A::zero();
    for (i, (&label, &pad)) in labels.ids.iter().zip(&labels.pad_mask).enumerate() {
        if pad {
            continue;
        }
        let z = logits.row(i);
        let mut grad = out.grad_logits.row_mut(i);
        let max = z.iter().copied().fold(A::neg_infinity(), A::max);
        let mut norm = A::zero();
        for (g, &v) in grad.iter_mut().zip(z.iter()) {
            *g = (v - max).exp();
            norm += *g;
        }
        let loss = norm.ln() + max - z[label];
        let k = scale / norm;
        grad.iter_mut().for_each(|g| *g *= k);
        grad[label] -= scale;
        out.per_position[i] = loss;
        sum += loss;
    }
    out.total = sum * scale;
    out.number_position_count = count;
    Ok(out)
}
