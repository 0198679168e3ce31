use std::fmt::Write as _;

use ndarray::Array2;

use super::LossError;
use crate::numvocab::NumberVocabulary;

/// How transport costs between number tokens are defined.
#[derive(Debug, Clone, PartialEq)]
pub enum CostKind {
    /// `|v_j - v_k|`.
    Euclidean,
    /// Power-law squash of the euclidean distance so that the ratio of the
    /// largest to the smallest nonzero cost equals the factor.
    Squashed(f64),
    /// User-supplied matrix, validated on construction.
    Explicit(Array2<f64>),
}

/// Realized cost matrix over the number tokens, in slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub kind: CostKind,
    pub values: Vec<f64>,
    pub matrix: Array2<f64>,
}

/// Builds the cost matrix of `kind` over the vocabulary's number tokens.
///
/// Squashing maps a distance `d` to `d_min * (d / d_min)^β` with
/// `β = ln(s) / ln(d_max / d_min)`, where `d_min`/`d_max` are the smallest and
/// largest nonzero distances. `s = 1` gives equal off-diagonal costs,
/// `s = d_max / d_min` gives back the euclidean matrix.
pub fn build_cost(vocab: &NumberVocabulary, kind: CostKind) -> Result<CostSpec, LossError> {
    let values = vocab.number_values();
    if values.len() < 2 {
        return Err(LossError::TooFewNumberTokens(values.len()));
    }
    let n = values.len();
    let euclid = Array2::from_shape_fn((n, n), |(j, k)| (values[j] - values[k]).abs());
    let matrix = match &kind {
        CostKind::Euclidean => euclid,
        CostKind::Squashed(s) => {
            if !(s.is_finite() && *s > 0.0) {
                return Err(LossError::BadSquash(*s));
            }
            let nonzero = euclid.iter().copied().filter(|&d| d > 0.0);
            let d_min = nonzero.clone().fold(f64::INFINITY, f64::min);
            let d_max = nonzero.fold(0.0, f64::max);
            if d_max == 0.0 {
                return Err(LossError::BadCost("all number values coincide".into()));
            }
            // a single distinct distance has nothing to squash
            let beta = if d_max > d_min {
                s.ln() / (d_max / d_min).ln()
            } else {
                1.0
            };
            euclid.mapv(|d| if d > 0.0 { d_min * (d / d_min).powf(beta) } else { 0.0 })
        }
        CostKind::Explicit(m) => {
            validate_explicit(m, &values)?;
            m.clone()
        }
    };
    Ok(CostSpec {
        kind,
        values,
        matrix,
    })
}

fn validate_explicit(m: &Array2<f64>, values: &[f64]) -> Result<(), LossError> {
    let n = values.len();
    if m.dim() != (n, n) {
        return Err(LossError::BadCost(format!(
            "expected {n}x{n}, got {:?}",
            m.dim()
        )));
    }
    for j in 0..n {
        if m[[j, j]] != 0.0 {
            return Err(LossError::BadCost(format!("diagonal entry {j} is {}", m[[j, j]])));
        }
        for k in 0..n {
            let c = m[[j, k]];
            if !c.is_finite() {
                return Err(LossError::BadCost(format!("entry ({j},{k}) is {c}")));
            }
            if c != m[[k, j]] {
                return Err(LossError::BadCost(format!("not symmetric at ({j},{k})")));
            }
            if j != k && values[j] != values[k] && c <= 0.0 {
                return Err(LossError::BadCost(format!(
                    "entry ({j},{k}) must be positive, got {c}"
                )));
            }
        }
    }
    Ok(())
}

impl CostSpec {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest over smallest off-diagonal cost between distinct values.
    pub fn max_min_ratio(&self) -> f64 {
        let n = self.len();
        let off = (0..n)
            .flat_map(|j| (0..n).map(move |k| (j, k)))
            .filter(|&(j, k)| j != k && self.values[j] != self.values[k])
            .map(|(j, k)| self.matrix[[j, k]]);
        let (lo, hi) = off.fold((f64::INFINITY, 0.0f64), |(lo, hi), c| (lo.min(c), hi.max(c)));
        hi / lo
    }

    /// Row-major CSV with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.matrix.rows() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:.16e}")).collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    /// Parses [`Self::to_csv`] output into an explicit cost for `vocab`.
    pub fn from_csv(vocab: &NumberVocabulary, csv: &str) -> Result<Self, LossError> {
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()
            .map_err(|e| LossError::BadCost(e.to_string()))?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(LossError::BadCost("ragged matrix".into()));
        }
        let m = Array2::from_shape_vec((n, n), rows.concat())
            .map_err(|e| LossError::BadCost(e.to_string()))?;
        build_cost(vocab, CostKind::Explicit(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits() -> NumberVocabulary {
        NumberVocabulary::task_default()
    }

    #[test]
    fn euclidean_digit_ratio_is_nine() {
        let c = build_cost(&digits(), CostKind::Euclidean).unwrap();
        assert_eq!(c.max_min_ratio(), 9.0);
        assert_eq!(c.matrix[[4, 9]], 5.0);
    }

    #[test]
    fn squash_endpoints() {
        let v = digits();
        let flat = build_cost(&v, CostKind::Squashed(1.0)).unwrap();
        for j in 0..10 {
            for k in 0..10 {
                let want = if j == k { 0.0 } else { 1.0 };
                assert!((flat.matrix[[j, k]] - want).abs() <= 1e-12);
            }
        }
        let three = build_cost(&v, CostKind::Squashed(3.0)).unwrap();
        assert!((three.max_min_ratio() - 3.0).abs() < 1e-12);
        let full = build_cost(&v, CostKind::Squashed(9.0)).unwrap();
        let e = build_cost(&v, CostKind::Euclidean).unwrap();
        for (a, b) in full.matrix.iter().zip(e.matrix.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn squash_tames_large_tokens() {
        let v = NumberVocabulary::build(&["a"], &[("1", 1.0), ("2", 2.0), ("1001", 1001.0)]).unwrap();
        assert_eq!(build_cost(&v, CostKind::Euclidean).unwrap().max_min_ratio(), 1000.0);
        let c = build_cost(&v, CostKind::Squashed(3.0)).unwrap();
        assert!((c.max_min_ratio() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_invalid_costs() {
        let v = digits();
        assert!(matches!(build_cost(&v, CostKind::Squashed(0.0)), Err(LossError::BadSquash(_))));
        assert!(build_cost(&v, CostKind::Squashed(-2.0)).is_err());
        let mut m = build_cost(&v, CostKind::Euclidean).unwrap().matrix;
        m[[0, 1]] = 7.0;
        assert!(build_cost(&v, CostKind::Explicit(m.clone())).is_err());
        m[[1, 0]] = 7.0;
        assert!(build_cost(&v, CostKind::Explicit(m.clone())).is_ok());
        m[[2, 2]] = 1.0;
        assert!(build_cost(&v, CostKind::Explicit(m)).is_err());
        assert!(build_cost(&v, CostKind::Explicit(Array2::zeros((3, 3)))).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let v = digits();
        let c = build_cost(&v, CostKind::Squashed(3.0)).unwrap();
        let back = CostSpec::from_csv(&v, &c.to_csv()).unwrap();
        for (a, b) in back.matrix.iter().zip(c.matrix.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
