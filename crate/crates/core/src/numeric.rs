//! Small numerical helpers shared across modules.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RootError {
    #[error("root not bracketed on [{lo}, {hi}]: f(lo) = {flo:.3e}, f(hi) = {fhi:.3e}")]
    NotBracketed { lo: f64, hi: f64, flo: f64, fhi: f64 },
    #[error("root finder did not converge in {0} iterations")]
    NoConvergence(usize),
}

/// Pairwise (cascade) summation in index order. Deterministic for a given slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Safeguarded Newton iteration for an increasing function on `[lo, hi]`.
///
/// `f` returns `(value, derivative)`. Falls back to bisection whenever the
/// Newton step leaves the current bracket.
pub fn newton_bracketed<F>(mut f: F, lo: f64, hi: f64, guess: f64, tol: f64) -> Result<f64, RootError>
where
    F: FnMut(f64) -> (f64, f64),
{
    const MAX_ITER: usize = 200;
    let (flo, _) = f(lo);
    let (fhi, _) = f(hi);
    if flo > 0.0 || fhi < 0.0 {
        return Err(RootError::NotBracketed { lo, hi, flo, fhi });
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    let (mut a, mut b) = (lo, hi);
    let mut x = guess.clamp(lo, hi);
    for _ in 0..MAX_ITER {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
        if (next - x).abs() <= tol * (1.0 + x.abs()) || (b - a) <= tol * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Err(RootError::NoConvergence(MAX_ITER))
}

/// Composite Simpson weights for `n` equal intervals of width `dx`
/// (Simpson 3/8 on the last three intervals when `n` is odd).
pub fn simpson_weights(n: usize, dx: f64) -> Vec<f64> {
    assert!(n >= 2, "Simpson rule needs at least two intervals");
    let mut w = vec![0.0; n + 1];
    let (simpson_end, tail) = if n % 2 == 0 { (n, false) } else { (n - 3, true) };
    let mut i = 0;
    while i + 2 <= simpson_end {
        w[i] += dx / 3.0;
        w[i + 1] += 4.0 * dx / 3.0;
        w[i + 2] += dx / 3.0;
        i += 2;
    }
    if tail {
        let j = simpson_end;
        let c = 3.0 * dx / 8.0;
        w[j] += c;
        w[j + 1] += 3.0 * c;
        w[j + 2] += 3.0 * c;
        w[j + 3] += c;
    }
    w
}

/// Trapezoid weights for `n` equal intervals.
pub fn trapezoid_weights(n: usize, dx: f64) -> Vec<f64> {
    let mut w = vec![dx; n + 1];
    w[0] = 0.5 * dx;
    w[n] = 0.5 * dx;
    w
}

/// Fourth-order first derivative of a uniformly sampled series.
pub fn d1_fourth_order(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    assert!(n >= 5, "fourth-order differences need five samples");
    let c = 1.0 / (12.0 * dx);
    (0..n)
        .map(|k| {
            if k >= 2 && k + 2 < n {
                c * (f[k - 2] - 8.0 * f[k - 1] + 8.0 * f[k + 1] - f[k + 2])
            } else if k == 0 {
                c * (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4])
            } else if k == 1 {
                c * (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4])
            } else if k == n - 2 {
                -c * (-3.0 * f[n - 1] - 10.0 * f[n - 2] + 18.0 * f[n - 3] - 6.0 * f[n - 4] + f[n - 5])
            } else {
                -c * (-25.0 * f[n - 1] + 48.0 * f[n - 2] - 36.0 * f[n - 3] + 16.0 * f[n - 4]
                    - 3.0 * f[n - 5])
            }
        })
        .collect()
}

/// Fourth-order second derivative of a uniformly sampled series.
pub fn d2_fourth_order(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    assert!(n >= 6, "fourth-order second differences need six samples");
    let c = 1.0 / (12.0 * dx * dx);
    let left = |g: &dyn Fn(usize) -> f64, k: usize| -> f64 {
        if k == 0 {
            c * (45.0 * g(0) - 154.0 * g(1) + 214.0 * g(2) - 156.0 * g(3) + 61.0 * g(4) - 10.0 * g(5))
        } else {
            c * (10.0 * g(0) - 15.0 * g(1) - 4.0 * g(2) + 14.0 * g(3) - 6.0 * g(4) + g(5))
        }
    };
    (0..n)
        .map(|k| {
            if k >= 2 && k + 2 < n {
                c * (-f[k - 2] + 16.0 * f[k - 1] - 30.0 * f[k] + 16.0 * f[k + 1] - f[k + 2])
            } else if k < 2 {
                left(&|j| f[j], k)
            } else {
                left(&|j| f[n - 1 - j], n - 1 - k)
            }
        })
        .collect()
}

/// Observed convergence order `log2(e_coarse / e_fine)` for successive halvings.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Least-squares order over successive halvings: minus the slope of
/// `log2 e_k` against the level index `k`.
pub fn fitted_order(errors: &[f64]) -> f64 {
    let n = errors.len() as f64;
    let ys: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, y) in ys.iter().enumerate() {
        let dx = k as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    -sxy / sxx
}
