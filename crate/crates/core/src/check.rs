//! Randomized property suites: analytic gradients against central finite
//! differences, the one-hot closed form against exact optimal transport,
//! and the CDF form against the one-hot closed form.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::oracle::wasserstein_oracle;
use crate::losses::{
    build_cost, combine, cross_entropy, gaussian_smooth_labels, CostKind, LossError, LossResult,
    LpVariant, NumberLoss, SoftmaxDomain, TargetDistribution,
};
use crate::numvocab::{LabelBatch, NumberVocabulary};

pub const GRAD_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-6;
pub const EQUIV_TOL: f64 = 1e-9;

/// One randomized batch: vocabulary of `vocab_size` tokens with
/// `n_numbers` number tokens scattered through it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub vocab: NumberVocabulary,
    pub logits: Array2<f64>,
    pub labels: LabelBatch,
}

impl Instance {
    /// `equidistant` picks values `a + b·k`; otherwise values are distinct
    /// random reals in random order.
    pub fn random(
        rng: &mut impl Rng,
        vocab_size: usize,
        n_numbers: usize,
        positions: usize,
        equidistant: bool,
    ) -> Self {
        let mut slots: Vec<usize> = (0..vocab_size).collect();
        slots.shuffle(rng);
        let mut number_slots = slots[..n_numbers].to_vec();
        number_slots.sort_unstable();
        let values: Vec<f64> = if equidistant {
            let (a, b) = (rng.gen_range(-5.0..5.0), rng.gen_range(0.25..3.0));
            (0..n_numbers).map(|k| a + b * k as f64).collect()
        } else {
            let mut v: Vec<f64> = Vec::new();
            while v.len() < n_numbers {
                let x: f64 = rng.gen_range(-50.0..50.0);
                if v.iter().all(|&y| (y - x).abs() > 1e-3) {
                    v.push(x);
                }
            }
            v
        };
        let mut next = 0;
        let entries = (0..vocab_size)
            .map(|i| {
                if number_slots.binary_search(&i).is_ok() {
                    next += 1;
                    (format!("n{i}"), Some(values[next - 1]))
                } else {
                    (format!("t{i}"), None)
                }
            })
            .collect();
        let vocab = NumberVocabulary::from_entries(entries).expect("distinct generated tokens");
        let logits = Array2::from_shape_fn((positions, vocab_size), |_| rng.gen_range(-3.0..3.0));
        let mut ids = Vec::with_capacity(positions);
        let mut pad = Vec::with_capacity(positions);
        for i in 0..positions {
            // keep at least two number positions in every batch
            let roll: f64 = rng.gen();
            let id = if i < 2 || roll < 0.6 {
                number_slots[rng.gen_range(0..n_numbers)]
            } else {
                slots[n_numbers + rng.gen_range(0..vocab_size - n_numbers)]
            };
            ids.push(id);
            pad.push(i >= 2 && rng.gen::<f64>() < 0.15);
        }
        Self {
            vocab,
            logits,
            labels: LabelBatch::new(ids, pad),
        }
    }
}

type Eval = Box<dyn Fn(&Instance, &Array2<f64>) -> Result<LossResult<f64>, LossError>>;

/// A loss under gradient test.
pub struct GradOp {
    pub name: &'static str,
    /// Only applicable to sorted, equally spaced vocabularies.
    pub needs_equidistant: bool,
    pub eval: Eval,
}

impl GradOp {
    pub fn new(
        name: &'static str,
        eval: impl Fn(&Instance, &Array2<f64>) -> Result<LossResult<f64>, LossError> + 'static,
    ) -> Self {
        Self {
            name,
            needs_equidistant: false,
            eval: Box::new(eval),
        }
    }

    fn equidistant(mut self) -> Self {
        self.needs_equidistant = true;
        self
    }
}

fn slice(inst: &Instance) -> NumberLoss<'_> {
    NumberLoss::new(&inst.vocab)
}

/// Every loss op in the crate, including the combined objective and
/// non-default cost and softmax settings.
pub fn all_grad_ops() -> Vec<GradOp> {
    let explicit_cost = |inst: &Instance| {
        let n = inst.vocab.number_indices().len();
        let m = Array2::from_shape_fn((n, n), |(j, k)| {
            if j == k {
                0.0
            } else {
                let (a, b) = (j.min(k) as f64, j.max(k) as f64);
                1.0 + ((a * 7.0 + b * 3.0) % 5.0) * 0.5
            }
        });
        build_cost(&inst.vocab, CostKind::Explicit(m))
    };
    vec![
        GradOp::new("ce", |inst, z| cross_entropy(z, &inst.labels)),
        GradOp::new("ntl-mse", |inst, z| slice(inst).lp(z, &inst.labels, LpVariant::Mse)),
        GradOp::new("ntl-mae", |inst, z| slice(inst).lp(z, &inst.labels, LpVariant::Mae)),
        GradOp::new("ntl-huber", |inst, z| {
            slice(inst).lp(z, &inst.labels, LpVariant::Huber(1.0))
        }),
        GradOp::new("ntl-mse-full-softmax", |inst, z| {
            slice(inst)
                .with_domain(SoftmaxDomain::Full)
                .lp(z, &inst.labels, LpVariant::Mse)
        }),
        GradOp::new("ntl-was-euclidean", |inst, z| {
            let cost = build_cost(&inst.vocab, CostKind::Euclidean)?;
            slice(inst).was(z, &inst.labels, &cost)
        }),
        GradOp::new("ntl-was-squashed", |inst, z| {
            let cost = build_cost(&inst.vocab, CostKind::Squashed(3.0))?;
            slice(inst).was(z, &inst.labels, &cost)
        }),
        GradOp::new("ntl-was-explicit", move |inst, z| {
            slice(inst).was(z, &inst.labels, &explicit_cost(inst)?)
        }),
        GradOp::new("ntl-was-full-softmax", |inst, z| {
            let cost = build_cost(&inst.vocab, CostKind::Euclidean)?;
            slice(inst)
                .with_domain(SoftmaxDomain::Full)
                .was(z, &inst.labels, &cost)
        }),
        GradOp::new("ntl-was-cdf", |inst, z| {
            let t = TargetDistribution::one_hot(&inst.labels, &inst.vocab)?;
            slice(inst).was_cdf(z, &t, &inst.labels)
        })
        .equidistant(),
        GradOp::new("ntl-was-cdf-gaussian", |inst, z| {
            let t = gaussian_smooth_labels(&inst.labels, 0.7, &inst.vocab)?;
            slice(inst).was_cdf(z, &t, &inst.labels)
        })
        .equidistant(),
        GradOp::new("ntl-was-cdf-full-softmax", |inst, z| {
            let t = gaussian_smooth_labels(&inst.labels, 0.7, &inst.vocab)?;
            slice(inst)
                .with_domain(SoftmaxDomain::Full)
                .was_cdf(z, &t, &inst.labels)
        })
        .equidistant(),
        GradOp::new("gce", |inst, z| {
            let t = gaussian_smooth_labels(&inst.labels, 0.5, &inst.vocab)?;
            slice(inst).gce(z, &t, &inst.labels)
        }),
        GradOp::new("ce+ntl-was", |inst, z| {
            let cost = build_cost(&inst.vocab, CostKind::Euclidean)?;
            let ntl = slice(inst).was(z, &inst.labels, &cost)?;
            combine(&cross_entropy(z, &inst.labels)?, &ntl, 0.3)
        }),
        GradOp::new("ce+ntl-mse", |inst, z| {
            let ntl = slice(inst).lp(z, &inst.labels, LpVariant::Mse)?;
            combine(&cross_entropy(z, &inst.labels)?, &ntl, 0.3)
        }),
    ]
}

/// Central differences of the scalar loss w.r.t. every logit.
pub fn finite_difference(
    f: impl Fn(&Array2<f64>) -> f64,
    logits: &Array2<f64>,
    h: f64,
) -> Array2<f64> {
    let mut z = logits.clone();
    let mut out = Array2::zeros(logits.dim());
    for idx in 0..logits.len() {
        let (r, c) = (idx / logits.ncols(), idx % logits.ncols());
        let orig = z[[r, c]];
        z[[r, c]] = orig + h;
        let up = f(&z);
        z[[r, c]] = orig - h;
        let down = f(&z);
        z[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

/// `max_k |a_k - n_k| / max(‖a‖∞, ‖n‖∞)`: entrywise error measured against
/// the largest gradient entry of the instance.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Outcome of one property over a batch of random cases.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst < self.tolerance
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {:<28} cases={:<4} worst={:.3e} tol={:.0e}",
            self.name, self.cases, self.worst, self.tolerance
        )?;
        if let Some(e) = &self.error {
            write!(f, " error: {e}")?;
        }
        Ok(())
    }
}

/// Gradient check of every op over `cases` random instances
/// (V = 30, 10 number tokens, 8 positions).
pub fn gradient_suite(ops: &[GradOp], seed: u64, cases: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixed: Vec<Instance> = (0..cases)
        .map(|k| Instance::random(&mut rng, 30, 10, 8, k % 2 == 0))
        .collect();
    let equidistant: Vec<Instance> = (0..cases)
        .map(|_| Instance::random(&mut rng, 30, 10, 8, true))
        .collect();
    ops.iter()
        .map(|op| {
            let mut outcome = CheckOutcome {
                name: op.name.to_string(),
                cases: 0,
                worst: 0.0,
                tolerance: GRAD_TOL,
                error: None,
            };
            let pool = if op.needs_equidistant { &equidistant } else { &mixed };
            for inst in pool {
                let analytic = match (op.eval)(inst, &inst.logits) {
                    Ok(r) => r.grad_logits,
                    Err(e) => {
                        outcome.error = Some(e.to_string());
                        break;
                    }
                };
                let numeric = finite_difference(
                    |z| (op.eval)(inst, z).map(|r| r.total).unwrap_or(f64::NAN),
                    &inst.logits,
                    FD_STEP,
                );
                let err = max_relative_error(&analytic, &numeric);
                outcome.worst = if err.is_nan() { f64::INFINITY } else { outcome.worst.max(err) };
                outcome.cases += 1;
            }
            outcome
        })
        .collect()
}

/// Per-position one-hot closed form against the exact transport optimum,
/// for euclidean (including uneven value maps) and squashed costs.
pub fn ot_equivalence_suite(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcome = CheckOutcome {
        name: "ntl-was == exact OT".into(),
        cases: 0,
        worst: 0.0,
        tolerance: EQUIV_TOL,
        error: None,
    };
    for k in 0..cases {
        let n_numbers = rng.gen_range(2..=12);
        let inst = Instance::random(&mut rng, 30, n_numbers, 8, k % 4 == 0);
        let kind = if k % 3 == 2 {
            CostKind::Squashed(rng.gen_range(1.0..6.0))
        } else {
            CostKind::Euclidean
        };
        let run = || -> Result<f64, LossError> {
            let cost = build_cost(&inst.vocab, kind.clone())?;
            let loss = NumberLoss::new(&inst.vocab);
            let res = loss.was(&inst.logits, &inst.labels, &cost)?;
            let probs = loss.softmax(&inst.logits)?;
            let slot = inst.vocab.slice_positions();
            let mut worst: f64 = 0.0;
            for i in 0..inst.labels.len() {
                let Some(s) = (!inst.labels.pad_mask[i]).then(|| slot[inst.labels.ids[i]]).flatten() else {
                    continue;
                };
                let mut target = vec![0.0; cost.len()];
                target[s] = 1.0;
                let pred: Vec<f64> = probs.row(i).to_vec();
                let exact = wasserstein_oracle(&target, &renormalize(&pred), &cost)?;
                worst = worst.max((res.per_position[i] - exact).abs());
            }
            Ok(worst)
        };
        match run() {
            Ok(w) => outcome.worst = outcome.worst.max(w),
            Err(e) => {
                outcome.error = Some(e.to_string());
                break;
            }
        }
        outcome.cases += 1;
    }
    outcome
}

/// CDF form against the one-hot closed form on equidistant vocabularies.
pub fn cdf_equivalence_suite(seed: u64, cases: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcome = CheckOutcome {
        name: "ntl-was-cdf == ntl-was".into(),
        cases: 0,
        worst: 0.0,
        tolerance: EQUIV_TOL,
        error: None,
    };
    for _ in 0..cases {
        let n_numbers = rng.gen_range(2..=12);
        let mut inst = Instance::random(&mut rng, 30, n_numbers, 8, true);
        inst.logits.mapv_inplace(|z| z * 2.0);
        let run = || -> Result<f64, LossError> {
            let cost = build_cost(&inst.vocab, CostKind::Euclidean)?;
            let targets = TargetDistribution::one_hot(&inst.labels, &inst.vocab)?;
            let loss = NumberLoss::new(&inst.vocab);
            let was = loss.was(&inst.logits, &inst.labels, &cost)?;
            let cdf = loss.was_cdf(&inst.logits, &targets, &inst.labels)?;
            Ok(was
                .per_position
                .iter()
                .zip(&cdf.per_position)
                .map(|(a, b)| (a - b).abs())
                .fold((was.total - cdf.total).abs(), f64::max))
        };
        match run() {
            Ok(w) => outcome.worst = outcome.worst.max(w),
            Err(e) => {
                outcome.error = Some(e.to_string());
                break;
            }
        }
        outcome.cases += 1;
    }
    outcome
}

// softmax rows sum to 1 only up to rounding; the oracle checks at 1e-9
fn renormalize(p: &[f64]) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_a_quadratic() {
        let z = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_difference(|z| z.iter().map(|x| x * x).sum(), &z, 1e-5);
        for (a, b) in g.iter().zip(z.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_is_scaled_by_largest_entry() {
        let a = Array2::from_shape_vec((1, 2), vec![1e-9, 0.5]).unwrap();
        let n = Array2::from_shape_vec((1, 2), vec![2e-9, 0.5]).unwrap();
        assert!(max_relative_error(&a, &n) < 1e-8);
        let n = Array2::from_shape_vec((1, 2), vec![1e-9, 0.55]).unwrap();
        assert!((max_relative_error(&a, &n) - 0.05 / 0.55).abs() < 1e-12);
        let z = Array2::zeros((1, 2));
        assert_eq!(max_relative_error(&z, &z), 0.0);
    }

    #[test]
    fn instances_have_number_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..20 {
            let inst = Instance::random(&mut rng, 30, 10, 8, k % 2 == 0);
            assert_eq!(inst.vocab.len(), 30);
            assert_eq!(inst.vocab.number_indices().len(), 10);
            assert_eq!(inst.vocab.sorted_equidistant(), k % 2 == 0);
            let mask = crate::numvocab::number_mask(&inst.labels, &inst.vocab).unwrap();
            assert!(mask.iter().filter(|&&m| m).count() >= 2);
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        let mut ops = all_grad_ops();
        ops.truncate(1);
        ops.push(GradOp::new("broken", |inst, z| {
            let mut r = cross_entropy(z, &inst.labels)?;
            r.grad_logits.mapv_inplace(|g| g * 1.001);
            Ok(r)
        }));
        let out = gradient_suite(&ops, 5, 3);
        assert!(out[0].passed(), "{}", out[0]);
        assert!(!out[1].passed());
    }
}
