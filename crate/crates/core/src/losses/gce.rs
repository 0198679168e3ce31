use ndarray::Array2;

use super::{LossError, LossResult, NumberLoss, TargetDistribution};
use crate::numvocab::{number_mask, LabelBatch, NumberVocabulary};
use crate::real::Real;

/// Lower clamp on predicted probabilities inside the logarithm.
pub const GCE_LOG_FLOOR: f64 = 1e-12;

/// Gaussian-smoothed targets centred on each number label, renormalized
/// over the number slice.
pub fn gaussian_smooth_labels(
    labels: &LabelBatch,
    sigma: f64,
    vocab: &NumberVocabulary,
) -> Result<TargetDistribution, LossError> {
    let mask = number_mask(labels, vocab)?;
    let positions: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
    let values: Vec<f64> = positions
        .iter()
        .map(|&i| vocab.value_of(labels.ids[i]).unwrap())
        .collect();
    let probs = gaussian_smooth_values(&values, sigma, vocab)?;
    TargetDistribution::new(positions, probs)
}

/// One smoothed row per label value; each value must be a number token value.
pub fn gaussian_smooth_values(
    values: &[f64],
    sigma: f64,
    vocab: &NumberVocabulary,
) -> Result<Array2<f64>, LossError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(LossError::BadSigma(sigma));
    }
    let support = vocab.number_values();
    let mut out = Array2::zeros((values.len(), support.len()));
    for (mut row, &y) in out.rows_mut().into_iter().zip(values) {
        if !support.contains(&y) {
            return Err(LossError::UnknownValue(y));
        }
        // the 1/sqrt(2πσ²) prefactor cancels in the renormalization
        let inv = 1.0 / (2.0 * sigma * sigma);
        row.iter_mut()
            .zip(&support)
            .for_each(|(w, &v)| *w = (-(v - y) * (v - y) * inv).exp());
        let total = row.sum();
        row.mapv_inplace(|w| w / total);
    }
    Ok(out)
}

pub fn gce<A: Real>(
    logits: &Array2<A>,
    targets: &TargetDistribution,
    labels: &LabelBatch,
    vocab: &NumberVocabulary,
) -> Result<LossResult<A>, LossError> {
    NumberLoss::new(vocab).gce(logits, targets, labels)
}

impl NumberLoss<'_> {
    /// Cross-entropy between target rows and the number-slice prediction,
    /// `-Σ_j t_j ln max(p_j, floor)`.
    pub fn gce<A: Real>(
        &self,
        logits: &Array2<A>,
        targets: &TargetDistribution,
        labels: &LabelBatch,
    ) -> Result<LossResult<A>, LossError> {
        let mask = super::check_inputs(logits, labels, self.vocab)?;
        let expected: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
        if targets.positions != expected {
            return Err(LossError::TargetPositions {
                expected,
                got: targets.positions.clone(),
            });
        }
        let floor = A::of(GCE_LOG_FLOOR);
        self.drive(logits, labels, |row, _, probs, dp| {
            let target = targets.probs.row(row);
            let mut loss = A::zero();
            for ((&p, &t), g) in probs.iter().zip(target.iter()).zip(dp.iter_mut()) {
                let t = A::of(t);
                if p > floor {
                    loss -= t * p.ln();
                    *g = -t / p;
                } else {
                    loss -= t * floor.ln();
                }
            }
            loss
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn digit_label(v: &NumberVocabulary, d: usize) -> LabelBatch {
        LabelBatch::unpadded(vec![v.id(&d.to_string()).unwrap()])
    }

    /// Direct evaluation of the Gaussian weights followed by renormalization.
    fn smoothing_oracle(y: f64, sigma: f64) -> Vec<f64> {
        let w: Vec<f64> = (0..10)
            .map(|d| {
                let x = d as f64 - y;
                (-x * x / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn smoothing_matches_oracle() {
        let v = NumberVocabulary::task_default();
        let t = gaussian_smooth_labels(&digit_label(&v, 4), 0.5, &v).unwrap();
        let oracle = smoothing_oracle(4.0, 0.5);
        for (a, b) in t.probs.row(0).iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(t.probs[[0, 4]], 0.7866, epsilon = 1e-3);
        assert_abs_diff_eq!(t.probs[[0, 3]], 0.1064, epsilon = 1e-3);
        assert_abs_diff_eq!(t.probs[[0, 5]], t.probs[[0, 3]], epsilon = 1e-15);
        assert_abs_diff_eq!(t.probs.row(0).sum(), 1.0, epsilon = 1e-12);

        let sharp = gaussian_smooth_labels(&digit_label(&v, 4), 0.05, &v).unwrap();
        assert!(sharp.probs[[0, 4]] >= 0.999);
    }

    #[test]
    fn smoothing_errors() {
        let v = NumberVocabulary::task_default();
        assert!(matches!(
            gaussian_smooth_labels(&digit_label(&v, 1), 0.0, &v),
            Err(LossError::BadSigma(_))
        ));
        assert!(matches!(
            gaussian_smooth_values(&[4.5], 0.5, &v),
            Err(LossError::UnknownValue(_))
        ));
    }

    #[test]
    fn gce_examples() {
        let v = NumberVocabulary::task_default();
        let label = digit_label(&v, 4);
        let one_hot = TargetDistribution::one_hot(&label, &v).unwrap();
        let mut z = Array2::<f64>::zeros((1, v.len()));
        z[[0, v.id("4").unwrap()]] = 100.0;
        assert_abs_diff_eq!(gce(&z, &one_hot, &label, &v).unwrap().total, 0.0, epsilon = 1e-12);

        let uniform_t = TargetDistribution::new(vec![0], Array2::from_elem((1, 10), 0.1)).unwrap();
        let flat = Array2::<f64>::zeros((1, v.len()));
        assert_abs_diff_eq!(gce(&flat, &uniform_t, &label, &v).unwrap().total, 10f64.ln(), epsilon = 1e-12);

        // prediction one-hot at 4 (others below the floor): loss is the
        // off-centre target mass times -ln(floor)
        let smooth = gaussian_smooth_labels(&label, 0.5, &v).unwrap();
        let off_centre = 1.0 - smooth.probs[[0, 4]];
        let expected = off_centre * -(GCE_LOG_FLOOR.ln());
        let got = gce(&z, &smooth, &label, &v).unwrap().total;
        assert_abs_diff_eq!(got, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(got, 5.896, epsilon = 2e-3);
    }

    #[test]
    fn gce_gradient_is_prediction_minus_target() {
        let v = NumberVocabulary::task_default();
        let label = digit_label(&v, 2);
        let smooth = gaussian_smooth_labels(&label, 1.0, &v).unwrap();
        let z = Array2::from_shape_fn((1, v.len()), |(_, j)| (j % 5) as f64 * 0.3);
        let r = gce(&z, &smooth, &label, &v).unwrap();
        let p = crate::losses::number_softmax(&z, &v).unwrap();
        for (k, &j) in v.number_indices().iter().enumerate() {
            assert_abs_diff_eq!(r.grad_logits[[0, j]], p[[0, k]] - smooth.probs[[0, k]], epsilon = 1e-14);
        }
    }
}
