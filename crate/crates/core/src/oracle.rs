//! Ground-truth marginal likelihoods: exhaustive enumeration of allocations
//! for the fixed-variance univariate model and the conjugate approximation
//! for well-separated multivariate mixtures.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{ln_factorial, ln_mv_gamma, log_sum_exp};
use crate::model::{Dataset, Family, LogPosterior, ModelSpec};
use crate::relabel::{apply_relabelling, ecr_relabel};
use crate::sampler::PosteriorRun;

/// Largest number of allocations the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Hidden allocation vector, 0-based labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationMatrix {
    pub g: usize,
    pub labels: Vec<usize>,
}

impl AllocationMatrix {
    pub fn new(g: usize, labels: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= g) {
            return Err(Error::Domain(format!("label {} outside 1..={g}", bad + 1)));
        }
        Ok(AllocationMatrix { g, labels })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.g];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

/// `log MVN_m(y; 0, I + J)` for one cluster, using the rank-one structure.
fn cluster_term(m: usize, s1: f64, s2: f64) -> f64 {
    let mf = m as f64;
    -0.5 * mf * LN_2PI - 0.5 * (1.0 + mf).ln() - 0.5 * (s2 - s1 * s1 / (1.0 + mf))
}

/// Exact `log p(Y)` for the univariate model with unit variances, standard
/// normal means and equal weights, summing over all `Gⁿ` allocations.
pub fn exact_marglik_bruteforce(y: &[f64], g: usize) -> Result<f64> {
    let n = y.len();
    if g == 0 {
        return Err(Error::Config("G must be at least 1".into()));
    }
    let count = (g as u64)
        .checked_pow(n as u32)
        .filter(|&c| c <= BRUTE_FORCE_LIMIT);
    let Some(count) = count else {
        let shown = (g as f64).powi(n as i32);
        return Err(Error::Guard {
            count: shown,
            limit: BRUTE_FORCE_LIMIT as f64,
        });
    };
    const CHUNK: u64 = 4096;
    let n_chunks = count.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(count);
            let mut terms = Vec::with_capacity((hi - lo) as usize);
            let mut s1 = vec![0.0; g];
            let mut s2 = vec![0.0; g];
            let mut m = vec![0usize; g];
            for k in lo..hi {
                s1.iter_mut().for_each(|x| *x = 0.0);
                s2.iter_mut().for_each(|x| *x = 0.0);
                m.iter_mut().for_each(|x| *x = 0);
                let mut code = k;
                for &yi in y {
                    let l = (code % g as u64) as usize;
                    code /= g as u64;
                    s1[l] += yi;
                    s2[l] += yi * yi;
                    m[l] += 1;
                }
                let mut t = 0.0;
                for l in 0..g {
                    if m[l] > 0 {
                        t += cluster_term(m[l], s1[l], s2[l]);
                    }
                }
                terms.push(t);
            }
            log_sum_exp(&terms)
        })
        .collect();
    Ok(log_sum_exp(&partial) - n as f64 * (g as f64).ln())
}

/// Allocation maximizing the posterior-mean responsibilities of the
/// relabelled draws; ties go to the lowest label.
pub fn map_allocation(run: &PosteriorRun, data: &Dataset) -> Result<AllocationMatrix> {
    let g = run.spec.g;
    let post = LogPosterior::new(&run.spec, data)?;
    let draws = apply_relabelling(&ecr_relabel(run));
    let n = data.n();
    let sums = draws
        .par_iter()
        .filter_map(|v| post.responsibilities(v))
        .reduce(
            || vec![0.0; n * g],
            |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect(),
        );
    let labels = sums
        .chunks(g)
        .map(|row| {
            let mut best = 0;
            for k in 1..g {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    AllocationMatrix::new(g, labels)
}

/// Whether every retained allocation equals the first one.
pub fn check_separation(run: &PosteriorRun) -> bool {
    match run.allocations.first() {
        Some(first) => run.allocations.iter().all(|a| a == first),
        None => false,
    }
}

/// Log evidence of one cluster under the normal-inverse-Wishart prior
/// `μ | Σ ~ N(β, Σ/κ₀)`, `Σ ~ IW(φ₀, Λ)`.
pub fn niw_log_evidence(
    rows: &[&[f64]],
    beta: &[f64],
    kappa0: f64,
    phi0: f64,
    scale: &DMatrix<f64>,
) -> f64 {
    let m = rows.len();
    if m == 0 {
        return 0.0;
    }
    let d = beta.len();
    let mf = m as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= mf;
    let mut s = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        s += &c * c.transpose();
    }
    let kn = kappa0 + mf;
    let phin = phi0 + mf;
    let dm = &mean - DVector::from_column_slice(beta);
    let scale_n = scale + s + (&dm * dm.transpose()) * (kappa0 * mf / kn);
    let log_det = |a: &DMatrix<f64>| -> f64 {
        let c = a
            .clone()
            .cholesky()
            .expect("scale matrix must be positive definite");
        2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    };
    let df = d as f64;
    -0.5 * mf * df * std::f64::consts::PI.ln()
        + 0.5 * df * (kappa0.ln() - kn.ln())
        + 0.5 * phi0 * log_det(scale)
        - 0.5 * phin * log_det(&scale_n)
        + ln_mv_gamma(d, 0.5 * phin)
        - ln_mv_gamma(d, 0.5 * phi0)
}

/// Log evidence of one cluster under independent normal-inverse-gamma priors
/// per coordinate: `μ_r | σ²_r ~ N(β_r, σ²_r/κ₀)`, `σ²_r ~ IG(φ₀, λ_r)`.
pub fn nig_log_evidence(
    rows: &[&[f64]],
    beta: &[f64],
    kappa0: f64,
    phi0: f64,
    rates: &[f64],
) -> f64 {
    let m = rows.len();
    if m == 0 {
        return 0.0;
    }
    let mf = m as f64;
    let kn = kappa0 + mf;
    let an = phi0 + 0.5 * mf;
    let mut out = 0.0;
    for r in 0..beta.len() {
        let mean = rows.iter().map(|x| x[r]).sum::<f64>() / mf;
        let ss: f64 = rows.iter().map(|x| (x[r] - mean) * (x[r] - mean)).sum();
        let bn = rates[r] + 0.5 * ss + kappa0 * mf * (mean - beta[r]).powi(2) / (2.0 * kn);
        out += ln_gamma(an) - ln_gamma(phi0) + phi0 * rates[r].ln() - an * bn.ln()
            + 0.5 * (kappa0 / kn).ln()
            - 0.5 * mf * LN_2PI;
    }
    out
}

/// `log p(C)` under the symmetric-in-structure Dirichlet prior on weights.
pub fn log_allocation_prior(e: &[f64], sizes: &[usize]) -> f64 {
    let total: f64 = e.iter().sum();
    let n: usize = sizes.iter().sum();
    ln_gamma(total) - ln_gamma(total + n as f64)
        + e.iter()
            .zip(sizes)
            .map(|(&a, &m)| ln_gamma(a + m as f64) - ln_gamma(a))
            .sum::<f64>()
}

/// Well-separated approximation `log G! + log p(C⁰) + log p(Y | C⁰)` for the
/// conjugate multivariate families.
pub fn wellsep_marglik(data: &Dataset, spec: &ModelSpec, c0: &AllocationMatrix) -> Result<f64> {
    if c0.g != spec.g || c0.labels.len() != data.n() {
        return Err(Error::Config(
            "allocation does not match the model and data".into(),
        ));
    }
    let h = &spec.hyper;
    let missing = || Error::Config("conjugate hyperparameters are incomplete".into());
    let beta = h.beta.as_ref().ok_or_else(missing)?;
    let kappa0 = h.kappa0.ok_or_else(missing)?;
    let phi0 = h.phi0.ok_or_else(missing)?;
    let mut log_lik = 0.0;
    for k in 0..spec.g {
        let rows: Vec<&[f64]> = (0..data.n())
            .filter(|&i| c0.labels[i] == k)
            .map(|i| data.row(i))
            .collect();
        log_lik += match spec.family {
            Family::MvnFull => niw_log_evidence(
                &rows,
                beta,
                kappa0,
                phi0,
                &h.scale_matrix().ok_or_else(missing)?,
            ),
            Family::MvnDiag => nig_log_evidence(
                &rows,
                beta,
                kappa0,
                phi0,
                h.rates.as_ref().ok_or_else(missing)?,
            ),
            _ => {
                return Err(Error::Config(format!(
                    "no well-separated oracle for {:?}",
                    spec.family
                )))
            }
        };
    }
    Ok(ln_factorial(spec.g) + log_allocation_prior(&h.e, &c0.sizes()) + log_lik)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mvn_log_pdf(y: &[f64], cov: DMatrix<f64>) -> f64 {
        let n = y.len();
        let chol = cov.cholesky().unwrap();
        let yv = DVector::from_column_slice(y);
        let z = chol.l().solve_lower_triangular(&yv).unwrap();
        -0.5 * n as f64 * LN_2PI
            - chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
            - 0.5 * z.norm_squared()
    }

    #[test]
    fn single_point_is_normal_with_variance_two() {
        for g in 1..4 {
            let got = exact_marglik_bruteforce(&[0.7], g).unwrap();
            let want = -0.5 * (2.0 * std::f64::consts::TAU).ln() - 0.49 / 4.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn two_points_two_components() {
        let y = [0.3, -1.2];
        let got = exact_marglik_bruteforce(&y, 2).unwrap();
        let a = mvn_log_pdf(&y, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        let b = mvn_log_pdf(&y, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]));
        let want = (0.25 * (2.0 * a.exp() + 2.0 * b.exp())).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn guard_refuses() {
        let y = vec![0.0; 30];
        assert!(matches!(
            exact_marglik_bruteforce(&y, 2),
            Err(Error::Guard { .. })
        ));
    }

    #[test]
    fn separation_checks() {
        use crate::model::HyperParams;
        let spec =
            ModelSpec::new(Family::UniFixedSigma, 2, 1, HyperParams::fixed_sigma(2)).unwrap();
        let mut run = PosteriorRun {
            spec,
            draws: vec![vec![0.0, 1.0]; 3],
            log_post: vec![0.0; 3],
            allocations: vec![vec![0, 1, 1]; 3],
            seed: 0,
        };
        assert!(check_separation(&run));
        run.allocations[2][0] = 1;
        assert!(!check_separation(&run));
    }

    #[test]
    fn allocation_prior_single_component() {
        assert!(log_allocation_prior(&[1.0], &[7]).abs() < 1e-12);
        // e = 1, G = 2, sizes (1, 1): Γ(2)Γ(2)Γ(2)/Γ(4) = 1/6
        assert!((log_allocation_prior(&[1.0, 1.0], &[1, 1]) - (1.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_clusters_contribute_nothing() {
        let s = DMatrix::identity(2, 2);
        assert_eq!(niw_log_evidence(&[], &[0.0, 0.0], 1.0, 3.0, &s), 0.0);
        assert_eq!(nig_log_evidence(&[], &[0.0], 1.0, 2.0, &[1.0]), 0.0);
    }

    #[test]
    fn niw_in_one_dimension_matches_nig() {
        let pts = [[0.4], [1.3], [-0.2], [2.0]];
        let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        // IW(φ₀, Λ) in 1-D is IG(φ₀/2, Λ/2)
        let a = niw_log_evidence(&rows, &[0.5], 0.8, 4.0, &DMatrix::from_element(1, 1, 3.0));
        let b = nig_log_evidence(&rows, &[0.5], 0.8, 2.0, &[1.5]);
        assert!((a - b).abs() < 1e-10);
    }
}
