use ndarray::{Array1, Array2, Axis, Zip};

use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
pub(crate) struct LnCache<A> {
    xhat: Array2<A>,
    rstd: Array1<A>,
}

/// Row-wise layer normalization.
pub(crate) fn layer_norm<A: Real>(x: &Array2<A>, gain: &Array1<A>, bias: &Array1<A>) -> (Array2<A>, LnCache<A>) {
    let d = A::of(x.ncols() as f64);
    let eps = A::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<A>() / d;
        *r = A::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = &xhat * gain;
    y += bias;
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<A: Real>(
    dy: &Array2<A>,
    cache: &LnCache<A>,
    gain: &Array1<A>,
) -> (Array2<A>, Array1<A>, Array1<A>) {
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let d = A::of(dy.ncols() as f64);
    let mut dx = dy * gain;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut g, xh, &r| {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<A>() / d;
            g.zip_mut_with(&xh, |v, &x| *v = r * (*v - mean_g - x * mean_gx));
        });
    (dx, dgain, dbias)
}

/// Tanh-approximated GELU.
pub(crate) fn gelu<A: Real>(u: A) -> A {
    let half = A::of(0.5);
    half * u * (A::one() + (A::of(GELU_C) * (u + A::of(GELU_K) * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<A: Real>(u: A) -> A {
    let half = A::of(0.5);
    let t = (A::of(GELU_C) * (u + A::of(GELU_K) * u * u * u)).tanh();
    half * (A::one() + t)
        + half * u * (A::one() - t * t) * A::of(GELU_C) * (A::one() + A::of(3.0 * GELU_K) * u * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = array![[1.0, 2.0, 3.0, 6.0], [-1.0, 0.5, 0.0, 4.0]];
        let (y, _) = layer_norm(&x, &Array1::ones(4), &Array1::zeros(4));
        for row in y.rows() {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
