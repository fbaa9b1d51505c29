//! Small dense linear-algebra and special-function helpers shared by the
//! estimator modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::gamma::ln_gamma;

pub type Chol = Cholesky<f64, Dyn>;

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice
/// or when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log of the multivariate gamma function `Γ_d(a)`.
pub fn ln_mv_gamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    let mut out = df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 0..d {
        out += ln_gamma(a - j as f64 / 2.0);
    }
    out
}

/// Log of `n!` via the gamma function.
pub fn ln_factorial(n: usize) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

/// Sum of the logs of the Cholesky diagonal, i.e. `½ log det`.
pub fn half_log_det(chol: &Chol) -> f64 {
    chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum()
}

/// `xᵀ A⁻¹ x` where `A = L Lᵀ`.
pub fn mahalanobis_sq(chol: &Chol, x: &DVector<f64>) -> f64 {
    let l = chol.l_dirty();
    let n = x.len();
    // forward substitution on the lower factor only; avoids an allocation
    // per call compared to `solve_lower_triangular`
    let mut y = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
        acc += y[i] * y[i];
    }
    acc
}

/// Sample mean and unbiased covariance of the rows in `rows`.
pub fn mean_cov(rows: &[&[f64]], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = rows.len();
    let mut mean = DVector::zeros(dim);
    for r in rows {
        for j in 0..dim {
            mean[j] += r[j];
        }
    }
    if m > 0 {
        mean /= m as f64;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    if m > 1 {
        let mut centered = vec![0.0; dim];
        for r in rows {
            for j in 0..dim {
                centered[j] = r[j] - mean[j];
            }
            for a in 0..dim {
                let ca = centered[a];
                for b in 0..=a {
                    cov[(a, b)] += ca * centered[b];
                }
            }
        }
        let denom = (m - 1) as f64;
        for a in 0..dim {
            for b in 0..=a {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
    }
    (mean, cov)
}

/// Scale-aware ridge `1e-8 · trace / dim`, falling back to `1e-8` for a zero
/// trace.
pub fn ridge_for(m: &DMatrix<f64>) -> f64 {
    let dim = m.nrows().max(1) as f64;
    let tr = m.trace();
    if tr > 0.0 && tr.is_finite() {
        1e-8 * tr / dim
    } else {
        1e-8
    }
}

/// Cholesky factorization, adding a ridge to the diagonal when the matrix is
/// not numerically positive definite or `force_ridge` is set. Returns the
/// factor, the (possibly regularized) matrix and the ridge that was added.
pub fn regularized_cholesky(m: &DMatrix<f64>, force_ridge: bool) -> (Chol, DMatrix<f64>, f64) {
    let zero_diag = m.diagonal().iter().any(|&v| v <= 0.0);
    if !force_ridge && !zero_diag {
        if let Some(c) = Cholesky::new(m.clone()) {
            return (c, m.clone(), 0.0);
        }
    }
    let mut ridge = ridge_for(m);
    loop {
        let mut reg = m.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(reg.clone()) {
            return (c, reg, ridge);
        }
        ridge *= 10.0;
    }
}

/// Log density of `N(x; mean, Σ)` given the Cholesky factor of `Σ`.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, chol: &Chol) -> f64 {
    let d = x.len() as f64;
    let diff = x - mean;
    -0.5 * d * (2.0 * std::f64::consts::PI).ln()
        - half_log_det(chol)
        - 0.5 * mahalanobis_sq(chol, &diff)
}

/// Index of the maximum value; ties resolve to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn mv_gamma_reduces_to_gamma_in_one_dim() {
        assert!((ln_mv_gamma(1, 3.5) - ln_gamma(3.5)).abs() < 1e-12);
        // Γ_2(a) = π^{1/2} Γ(a) Γ(a - 1/2)
        let a = 2.7;
        let expect = 0.5 * std::f64::consts::PI.ln() + ln_gamma(a) + ln_gamma(a - 0.5);
        assert!((ln_mv_gamma(2, a) - expect).abs() < 1e-12);
    }

    #[test]
    fn ridge_engages_for_singular_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, _, ridge) = regularized_cholesky(&m, false);
        assert!(ridge > 0.0);
        let z = DMatrix::<f64>::zeros(3, 3);
        let (c, reg, ridge) = regularized_cholesky(&z, false);
        assert_eq!(ridge, 1e-8);
        assert!((reg[(0, 0)] - 1e-8).abs() < 1e-20);
        assert!(c.l().determinant() > 0.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
