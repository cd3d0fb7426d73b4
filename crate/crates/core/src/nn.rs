//! Dense-layer primitives with hand-written backward passes.
//!
//! The backbone is frozen, so backward functions only propagate gradients to
//! their *inputs*; parameter gradients are never formed. All math is f64 to
//! keep finite-difference verification tight.

use ndarray::{Array1, Array2, ArrayView2, Axis};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// y = x w + b, rows are tokens.
pub fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// dx = dy wᵀ
pub fn linear_bwd_input(dy: ArrayView2<f64>, w: &Array2<f64>) -> Array2<f64> {
    dy.dot(&w.t())
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer norm with affine params.
pub fn layer_norm(x: ArrayView2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[[i, j]] = h;
            y[[i, j]] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// dx for layer norm. Uses the standard reduction:
/// dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)), g = dy * gamma.
pub fn layer_norm_bwd_input(dy: ArrayView2<f64>, gamma: &Array1<f64>, cache: &LayerNormCache) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for j in 0..d {
            let g = dy[[i, j]] * gamma[j];
            g_mean += g;
            gx_mean += g * cache.xhat[[i, j]];
        }
        g_mean /= d as f64;
        gx_mean /= d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            let g = dy[[i, j]] * gamma[j];
            dx[[i, j]] = is * (g - g_mean - cache.xhat[[i, j]] * gx_mean);
        }
    }
    dx
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximation GELU.
pub fn gelu(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_bwd(dy: ArrayView2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    dx
}

/// Row-wise softmax (shift-stabilized).
pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut s = z.to_owned();
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    s
}

/// dz for row-wise softmax: dz = s * (ds - <ds, s>).
pub fn softmax_rows_bwd(s: ArrayView2<f64>, ds: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = s.dim();
    let mut dz = Array2::zeros((n, d));
    for i in 0..n {
        let dot: f64 = (0..d).map(|j| ds[[i, j]] * s[[i, j]]).sum();
        for j in 0..d {
            dz[[i, j]] = s[[i, j]] * (ds[[i, j]] - dot);
        }
    }
    dz
}

/// Stable log-softmax of a logit vector.
pub fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|v| v - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha12Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
    }

    /// Central-difference check of dL/dx where L = sum(f(x) * wgt).
    fn fd_check<F>(f: F, x: &Array2<f64>, dx: &Array2<f64>, wgt: &Array2<f64>, tol: f64)
    where
        F: Fn(ArrayView2<f64>) -> Array2<f64>,
    {
        let eps = 1e-5;
        for idx in [(0, 0), (1, 2), (2, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let lp = (&f(xp.view()) * wgt).sum();
            let lm = (&f(xm.view()) * wgt).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = dx[idx];
            assert!(
                (fd - an).abs() <= tol * fd.abs().max(an.abs()).max(1e-8),
                "fd {fd} vs analytic {an} at {idx:?}"
            );
        }
    }

    #[test]
    fn layer_norm_bwd_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = randn(&mut rng, 3, 5);
        let gamma = array![0.7, 1.3, 0.9, 1.1, 1.0];
        let beta = array![0.1, -0.2, 0.0, 0.3, -0.1];
        let wgt = randn(&mut rng, 3, 5);
        let (_, cache) = layer_norm(x.view(), &gamma, &beta);
        let dx = layer_norm_bwd_input(wgt.view(), &gamma, &cache);
        fd_check(|v| layer_norm(v, &gamma, &beta).0, &x, &dx, &wgt, 1e-6);
    }

    #[test]
    fn gelu_bwd_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = randn(&mut rng, 3, 4);
        let wgt = randn(&mut rng, 3, 4);
        let dx = gelu_bwd(wgt.view(), x.view());
        fd_check(|v| gelu(v), &x, &dx, &wgt, 1e-6);
    }

    #[test]
    fn softmax_bwd_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z = randn(&mut rng, 3, 6);
        let wgt = randn(&mut rng, 3, 6);
        let s = softmax_rows(z.view());
        let dz = softmax_rows_bwd(s.view(), wgt.view());
        fd_check(|v| softmax_rows(v), &z, &dz, &wgt, 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let z = randn(&mut rng, 5, 9);
        let s = softmax_rows(z.view());
        for row in s.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_of_uniform_is_ln_n() {
        let l = log_softmax(&Array1::zeros(7));
        for v in l.iter() {
            assert!((v + (7.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_bwd_shapes_and_values() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let w = array![[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]];
        let b = array![0.5, 0.5, 0.5];
        let y = linear(x.view(), &w, &b);
        assert_eq!(y, array![[1.5, 2.5, 4.5], [3.5, 4.5, 10.5]]);
        let dy = Array2::ones((2, 3));
        let dx = linear_bwd_input(dy.view(), &w);
        assert_eq!(dx, array![[3.0, 2.0], [3.0, 2.0]]);
    }
}
