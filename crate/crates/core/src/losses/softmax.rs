use ndarray::{Array2, ArrayView1};

use super::{check_inputs, LossError, LossResult, NumberLoss, SoftmaxDomain};
use crate::numvocab::{LabelBatch, NumberVocabulary};
use crate::real::Real;

/// Probabilities over the number slice for every position, shape
/// `(positions, number tokens)`.
pub fn number_softmax<A: Real>(
    logits: &Array2<A>,
    vocab: &NumberVocabulary,
) -> Result<Array2<A>, LossError> {
    NumberLoss::new(vocab).softmax(logits)
}

impl NumberLoss<'_> {
    pub fn softmax<A: Real>(&self, logits: &Array2<A>) -> Result<Array2<A>, LossError> {
        let labels = LabelBatch::new(vec![0; logits.nrows()], vec![true; logits.nrows()]);
        check_inputs(logits, &labels, self.vocab)?;
        let idx = self.vocab.number_indices();
        let mut out = Array2::zeros((logits.nrows(), idx.len()));
        let mut buf = vec![A::zero(); idx.len()];
        for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
            slice_probs(row, idx, self.domain, &mut buf);
            dst.iter_mut().zip(&buf).for_each(|(d, &p)| *d = p);
        }
        Ok(out)
    }

    /// Runs a per-position loss over all number positions.
    ///
    /// `per_row(row, label_slot, probs, dloss_dprobs)` returns the loss of one
    /// number position and writes the gradient w.r.t. the slice
    /// probabilities; the softmax backward pass and averaging happen here.
    pub(crate) fn drive<A: Real>(
        &self,
        logits: &Array2<A>,
        labels: &LabelBatch,
        mut per_row: impl FnMut(usize, usize, &[A], &mut [A]) -> A,
    ) -> Result<LossResult<A>, LossError> {
        let mask = check_inputs(logits, labels, self.vocab)?;
        let idx = self.vocab.number_indices();
        let slot = self.vocab.slice_positions();
        let count = mask.iter().filter(|&&m| m).count();
        let mut out = LossResult::zero(logits.nrows(), logits.ncols());
        if self.domain == SoftmaxDomain::Slice {
            out.support = Some(idx.to_vec());
        }
        if count == 0 {
            return Ok(out);
        }
        let scale = A::one() / A::of(count as f64);
        let n = idx.len();
        let mut probs = vec![A::zero(); n];
        let mut dp = vec![A::zero(); n];
        let mut full = match self.domain {
            SoftmaxDomain::Full => vec![A::zero(); logits.ncols()],
            SoftmaxDomain::Slice => Vec::new(),
        };
        let mut sum = A::zero();
        let mut row_no = 0;
        for (i, &is_num) in mask.iter().enumerate() {
            if !is_num {
                continue;
            }
            let z = logits.row(i);
            match self.domain {
                SoftmaxDomain::Slice => slice_probs(z, idx, self.domain, &mut probs),
                SoftmaxDomain::Full => {
                    full_softmax(z, &mut full);
                    for (p, &j) in probs.iter_mut().zip(idx) {
                        *p = full[j];
                    }
                }
            }
            dp.iter_mut().for_each(|g| *g = A::zero());
            let loss = per_row(row_no, slot[labels.ids[i]].unwrap(), &probs, &mut dp);
            row_no += 1;
            out.per_position[i] = loss;
            sum += loss;

            // d/dz_k = p_k (g_k - Σ_j p_j g_j) over the softmax domain
            let dot: A = probs.iter().zip(&dp).map(|(&p, &g)| p * g).sum();
            let mut grad = out.grad_logits.row_mut(i);
            if let SoftmaxDomain::Full = self.domain {
                for (g, &q) in grad.iter_mut().zip(&full) {
                    *g = -q * dot * scale;
                }
            }
            for ((&j, &p), &g) in idx.iter().zip(&probs).zip(&dp) {
                grad[j] = p * (g - dot) * scale;
            }
        }
        out.total = sum * scale;
        out.number_position_count = count;
        Ok(out)
    }
}

/// Softmax of the number columns (`Slice`) or the full row restricted to
/// them (`Full`), written into `out`.
pub(crate) fn slice_probs<A: Real>(
    z: ArrayView1<'_, A>,
    idx: &[usize],
    domain: SoftmaxDomain,
    out: &mut [A],
) {
    let (max, norm) = match domain {
        SoftmaxDomain::Slice => {
            let max = idx.iter().map(|&j| z[j]).fold(A::neg_infinity(), A::max);
            let norm: A = idx.iter().map(|&j| (z[j] - max).exp()).sum();
            (max, norm)
        }
        SoftmaxDomain::Full => {
            let max = z.iter().copied().fold(A::neg_infinity(), A::max);
            let norm: A = z.iter().map(|&v| (v - max).exp()).sum();
            (max, norm)
        }
    };
    for (o, &j) in out.iter_mut().zip(idx) {
        *o = (z[j] - max).exp() / norm;
    }
}

pub(crate) fn full_softmax<A: Real>(z: ArrayView1<'_, A>, out: &mut [A]) {
    let max = z.iter().copied().fold(A::neg_infinity(), A::max);
    let mut norm = A::zero();
    for (o, &v) in out.iter_mut().zip(z.iter()) {
        *o = (v - max).exp();
        norm += *o;
    }
    let inv = A::one() / norm;
    out.iter_mut().for_each(|o| *o *= inv);
}
