//! Truncation ellipsoids, uniform sampling inside them, hyperplane-crossing
//! tests, overlap graphs and the criterion of overlap.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::linalg::{half_log_det, mahalanobis_sq, mean_cov, regularized_cholesky, Chol};
use crate::model::Layout;

/// `{θ : (θ − θ̂)ᵀ Σ̂⁻¹ (θ − θ̂) < c²}`.
#[derive(Clone, Debug)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub scatter: DMatrix<f64>,
    chol: Chol,
    pub radius: f64,
    /// Ridge added to the diagonal of the scatter matrix, if any.
    pub ridge: f64,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, scatter: DMatrix<f64>, radius: f64) -> Self {
        let (chol, scatter, ridge) = regularized_cholesky(&scatter, false);
        if ridge > 0.0 {
            log::warn!("ellipsoid scatter matrix regularized with ridge {ridge:e}");
        }
        Ellipsoid {
            center,
            scatter,
            chol,
            radius,
            ridge,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn chol(&self) -> &Chol {
        &self.chol
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Ellipsoid {
            radius,
            ..self.clone()
        }
    }

    pub fn with_center(&self, center: DVector<f64>) -> Self {
        Ellipsoid {
            center,
            ..self.clone()
        }
    }

    /// Squared Mahalanobis distance from the center.
    pub fn distance_sq(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(
            x.len(),
            x.iter().zip(self.center.iter()).map(|(a, b)| a - b),
        );
        mahalanobis_sq(&self.chol, &diff)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.distance_sq(x) < self.radius * self.radius
    }

    pub fn log_volume(&self) -> f64 {
        let r = self.dim() as f64;
        r * self.radius.ln() + 0.5 * r * std::f64::consts::PI.ln() - ln_gamma(0.5 * r + 1.0)
            + half_log_det(&self.chol)
    }
}

/// Ellipsoid from the sample mean and covariance of `rows`.
pub fn fit_ellipsoid(rows: &[Vec<f64>], c: f64) -> Ellipsoid {
    let dim = rows.first().map_or(0, |r| r.len());
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    if rows.len() < dim + 2 {
        log::warn!(
            "fitting a {dim}-dimensional ellipsoid from only {} draws",
            rows.len()
        );
    }
    let (center, scatter) = mean_cov(&refs, dim);
    Ellipsoid::new(center, scatter, c)
}

pub fn ellipsoid_volume(e: &Ellipsoid) -> f64 {
    e.log_volume().exp()
}

/// `n` points uniform on the ellipsoid: Gaussian direction, radius `U^{1/R}`.
pub fn sample_uniform(e: &Ellipsoid, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = e.dim();
    let l = e.chol.l();
    let unif = Uniform::new(0.0f64, 1.0).expect("valid range");
    let mut out = Vec::with_capacity(n);
    let mut z = vec![0.0; dim];
    for _ in 0..n {
        let mut norm = 0.0;
        while norm == 0.0 {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        let u: f64 = unif.sample(&mut rng);
        let s = e.radius * u.powf(1.0 / dim as f64) / norm;
        let mut x = e.center.as_slice().to_vec();
        for i in 0..dim {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            x[i] += s * acc;
        }
        out.push(x);
    }
    out
}

/// Minimum of `(θ − θ̂)ᵀ Σ̂⁻¹ (θ − θ̂)` subject to `ξ_{g1} = ξ_{g2}`, solved
/// through the KKT system of the equality-constrained quadratic program.
pub fn hyperplane_min(e: &Ellipsoid, layout: &Layout, g1: usize, g2: usize) -> f64 {
    let r = e.dim();
    let u = layout.block;
    let b1 = layout.block_range(g1);
    let b2 = layout.block_range(g2);
    let mut a = DMatrix::zeros(u, r);
    for k in 0..u {
        a[(k, b1.start + k)] = 1.0;
        a[(k, b2.start + k)] = -1.0;
    }
    let a_center = &a * &e.center;
    let precision = e.chol.inverse();
    let mut ridge = 0.0;
    for attempt in 0..8 {
        let mut kkt = DMatrix::zeros(r + u, r + u);
        kkt.view_mut((0, 0), (r, r)).copy_from(&(&precision * 2.0));
        if ridge > 0.0 {
            for i in 0..r {
                kkt[(i, i)] += ridge;
            }
        }
        kkt.view_mut((r, 0), (u, r)).copy_from(&a);
        kkt.view_mut((0, r), (r, u)).copy_from(&a.transpose());
        let mut rhs = DVector::zeros(r + u);
        rhs.rows_mut(r, u).copy_from(&(-&a_center));
        if let Some(sol) = kkt.lu().solve(&rhs) {
            let delta = sol.rows(0, r).into_owned();
            let val = (delta.transpose() * &precision * &delta)[(0, 0)];
            if val.is_finite() {
                if attempt > 0 {
                    log::warn!(
                        "KKT system for components ({}, {}) needed ridge {ridge:e}",
                        g1 + 1,
                        g2 + 1
                    );
                }
                return val.max(0.0);
            }
        }
        ridge = if ridge == 0.0 {
            1e-10 * precision.trace() / r as f64
        } else {
            ridge * 100.0
        };
    }
    f64::INFINITY
}

pub fn hyperplane_crosses(e: &Ellipsoid, layout: &Layout, g1: usize, g2: usize) -> bool {
    hyperplane_min(e, layout, g1, g2) <= e.radius * e.radius
}

/// Undirected graph on components `0..g`; edges stored as `(low, high)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapGraph {
    pub g: usize,
    pub edges: BTreeSet<(usize, usize)>,
}

impl OverlapGraph {
    pub fn new(g: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let edges = edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        OverlapGraph { g, edges }
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "graph overlap_G{} {{", self.g);
        for v in 0..self.g {
            let _ = writeln!(s, "  {};", v + 1);
        }
        for (a, b) in &self.edges {
            let _ = writeln!(s, "  {} -- {};", a + 1, b + 1);
        }
        s.push_str("}\n");
        s
    }
}

pub fn build_overlap_graph(e: &Ellipsoid, layout: &Layout) -> OverlapGraph {
    let g = layout.g;
    let pairs: Vec<(usize, usize)> = (0..g)
        .flat_map(|a| (a + 1..g).map(move |b| (a, b)))
        .collect();
    let edges: Vec<(usize, usize)> = pairs
        .into_par_iter()
        .filter(|&(a, b)| hyperplane_crosses(e, layout, a, b))
        .collect();
    OverlapGraph::new(g, edges)
}

/// Greedy independent set: repeatedly take the vertex of minimum degree in the
/// remaining graph (lowest label on ties) and delete its neighbours.
pub fn max_independent_set_greedy(graph: &OverlapGraph) -> Vec<usize> {
    let g = graph.g;
    let mut alive = vec![true; g];
    let mut out = Vec::new();
    loop {
        let mut pick = None;
        let mut best = usize::MAX;
        for v in 0..g {
            if !alive[v] {
                continue;
            }
            let deg = (0..g)
                .filter(|&w| w != v && alive[w] && graph.has_edge(v, w))
                .count();
            if deg < best {
                best = deg;
                pick = Some(v);
            }
        }
        let Some(v) = pick else { break };
        out.push(v);
        alive[v] = false;
        for w in 0..g {
            if graph.has_edge(v, w) {
                alive[w] = false;
            }
        }
    }
    out.sort_unstable();
    out
}

/// `2|I| − G`.
pub fn criterion_of_overlap(i_size: usize, g: usize) -> i64 {
    2 * i_size as i64 - g as i64
}
