//! Scalar root finding, maximization and small dense helpers shared by the
//! modules.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = nalgebra::DVector<Complex64>;

pub(crate) const J: Complex64 = Complex64::new(0.0, 1.0);

/// Safeguarded Newton iteration for a monotone increasing `f` on `[lo, hi]`
/// with `f(lo) <= 0 <= f(hi)`. Newton steps that leave the bracket or fail to
/// halve the residual are replaced by bisection.
pub fn newton_bracketed<F, D>(f: F, df: D, mut lo: f64, mut hi: f64, x0: f64, ftol: f64) -> f64
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let mut x = x0.clamp(lo, hi);
    let mut fx = f(x);
    for _ in 0..200 {
        if fx.abs() <= ftol {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = df(x);
        let mut next = if d > 0.0 { x - fx / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let fn_ = f(next);
        if fn_.abs() > 0.5 * fx.abs() {
            // slow progress, bisect the updated bracket once more
            if fn_ < 0.0 {
                lo = next;
            } else {
                hi = next;
            }
            x = 0.5 * (lo + hi);
            fx = f(x);
        } else {
            x = next;
            fx = fn_;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
            return x;
        }
    }
    x
}

/// Golden-section search for the maximum of a unimodal `f` on `[a, b]`.
/// Returns `(argmax, max)`.
pub fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

pub(crate) fn hermitian_asymmetry(m: &CMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for k in i..m.ncols() {
            worst = worst.max((m[(i, k)] - m[(k, i)].conj()).norm());
        }
    }
    worst
}

pub(crate) fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Smallest and largest eigenvalue of a Hermitian matrix.
pub fn hermitian_extreme_eigs(m: &CMatrix) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let sym = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = sym.symmetric_eigenvalues();
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Classic fixed-step RK4 for `y' = f(t, y)` on a flat state vector.
pub fn rk4_step<F: Fn(f64, &[f64], &mut [f64])>(f: &F, t: f64, y: &mut [f64], h: f64, work: &mut [Vec<f64>; 5]) {
    let n = y.len();
    let [k1, k2, k3, k4, tmp] = work;
    for v in [&mut *k1, &mut *k2, &mut *k3, &mut *k4, &mut *tmp] {
        v.resize(n, 0.0);
    }
    f(t, y, k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, tmp, k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, tmp, k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, tmp, k4);
    for i in 0..n {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Fornberg finite-difference weights for the first derivative at `x0` from
/// arbitrary distinct abscissae `xs`.
pub fn fd_weights(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![[0.0f64; 2]; n];
    if n == 0 {
        return Vec::new();
    }
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(1);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|w| w[1]).collect()
}

/// Start index of the `m` grid points nearest to index `i`.
pub(crate) fn stencil_start(i: usize, m: usize, len: usize) -> usize {
    i.saturating_sub(m / 2).min(len - m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_finds_cube_root() {
        let x = newton_bracketed(|x| x * x * x - 2.0, |x| 3.0 * x * x, 0.0, 2.0, 0.1, 1e-14);
        assert!((x - 2f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn newton_survives_flat_start() {
        // derivative vanishes at the initial guess
        let x = newton_bracketed(|x| x.powi(3), |x| 3.0 * x * x, -1.0, 3.0, 0.0 + 1e-300, 1e-30);
        assert!(x.abs() < 1e-9);
    }

    #[test]
    fn fd_weights_central_five_point() {
        let w = fd_weights(0.0, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let expected = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        // exact on a quartic at an off-center point of a nonuniform grid
        let xs = [0.0, 0.3, 0.7, 1.2, 2.0];
        let w = fd_weights(0.3, &xs);
        let d: f64 = xs.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((d - 4.0 * 0.3f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn golden_finds_peak() {
        let (x, v) = golden_max(|x| -(x - 0.3).powi(2) + 1.0, 0.0, 1.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rk4_integrates_exponential() {
        let f = |_t: f64, y: &[f64], d: &mut [f64]| d[0] = -y[0];
        let mut y = vec![1.0];
        let mut w: [Vec<f64>; 5] = Default::default();
        for i in 0..100 {
            rk4_step(&f, i as f64 * 0.01, &mut y, 0.01, &mut w);
        }
        assert!((y[0] - (-1f64).exp()).abs() < 1e-9);
    }
}
