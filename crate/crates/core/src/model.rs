//! Mixture-model families, prior hyperparameters, the flat parameter layout
//! and the unnormalized log posterior on the transformed (real-line) scale.
//!
//! The transformed parameter vector is laid out as
//! `(ξ_1, …, ξ_G, τ_1, …, τ_{G-1})`. Each block `ξ_g` holds the component
//! mean followed by the transformed scale parameters:
//!
//! | family            | block                                             |
//! |-------------------|---------------------------------------------------|
//! | `uni-fixed-sigma` | `μ`                                               |
//! | `uni-hierarchical`| `μ, log σ²`                                       |
//! | `mvn-full`        | `μ (d)`, lower Cholesky factor row-major with log diagonal |
//! | `mvn-diag`        | `μ (d)`, `log σ²_r (d)`                           |
//!
//! Proportions are kept as plain simplex coordinates; `τ_G` is implicit. The
//! fixed-sigma family pins `τ = 1/G` and carries no proportion coordinates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{ln_mv_gamma, log_sum_exp};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Inverse-gamma shape on the component variances of the hierarchical model.
pub const HIER_VAR_SHAPE: f64 = 2.0;
/// Gamma shape of the hyper-prior on the inverse-gamma scale `ζ`.
pub const HIER_ZETA_SHAPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    UniFixedSigma,
    UniHierarchical,
    MvnFull,
    MvnDiag,
}

impl Family {
    pub fn is_univariate(self) -> bool {
        matches!(self, Family::UniFixedSigma | Family::UniHierarchical)
    }

    /// Whether the proportions carry a Dirichlet prior and the component
    /// parameters are a priori independent of each other and of `G`.
    pub fn supports_empty_reduction(self) -> bool {
        matches!(self, Family::MvnFull | Family::MvnDiag)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::UniFixedSigma => "uni-fixed-sigma",
            Family::UniHierarchical => "uni-hierarchical",
            Family::MvnFull => "mvn-full",
            Family::MvnDiag => "mvn-diag",
        };
        f.write_str(s)
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni-fixed" | "uni-fixed-sigma" | "toy" => Ok(Family::UniFixedSigma),
            "uni-hier" | "uni-hierarchical" => Ok(Family::UniHierarchical),
            "mvn-full" | "mvn" => Ok(Family::MvnFull),
            "mvn-diag" => Ok(Family::MvnDiag),
            other => Err(Error::Config(format!("unknown model family '{other}'"))),
        }
    }
}

/// Prior hyperparameters. Which optional fields are required depends on the
/// family; [`ModelSpec::new`] checks them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Dirichlet concentrations, one per component.
    pub e: Vec<f64>,
    /// Hierarchical univariate: prior location of the means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    /// Hierarchical univariate: data range; the means have prior standard
    /// deviation `λ` and the hyper-prior rate is `10/λ²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi0: Option<f64>,
    /// Inverse-Wishart scale matrix `Λ`, as rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<Vec<f64>>>,
    /// Diagonal model: inverse-gamma scale per coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
}

impl HyperParams {
    pub fn fixed_sigma(g: usize) -> Self {
        HyperParams {
            e: vec![1.0; g],
            x0: None,
            lambda: None,
            beta: None,
            kappa0: None,
            phi0: None,
            scale: None,
            rates: None,
        }
    }

    pub fn hierarchical(g: usize, x0: f64, lambda: f64) -> Self {
        HyperParams {
            x0: Some(x0),
            lambda: Some(lambda),
            ..Self::fixed_sigma(g)
        }
    }

    pub fn mvn_full(
        g: usize,
        beta: Vec<f64>,
        kappa0: f64,
        phi0: f64,
        scale: &DMatrix<f64>,
    ) -> Self {
        let rows = (0..scale.nrows())
            .map(|i| scale.row(i).iter().copied().collect())
            .collect();
        HyperParams {
            beta: Some(beta),
            kappa0: Some(kappa0),
            phi0: Some(phi0),
            scale: Some(rows),
            ..Self::fixed_sigma(g)
        }
    }

    pub fn mvn_diag(g: usize, beta: Vec<f64>, kappa0: f64, phi0: f64, rates: Vec<f64>) -> Self {
        HyperParams {
            beta: Some(beta),
            kappa0: Some(kappa0),
            phi0: Some(phi0),
            rates: Some(rates),
            ..Self::fixed_sigma(g)
        }
    }

    pub fn scale_matrix(&self) -> Option<DMatrix<f64>> {
        self.scale.as_ref().map(|rows| {
            let d = rows.len();
            DMatrix::from_fn(d, d, |i, j| rows[i][j])
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(rename = "G")]
    pub g: usize,
    pub d: usize,
    pub hyper: HyperParams,
}

impl ModelSpec {
    pub fn new(family: Family, g: usize, d: usize, hyper: HyperParams) -> Result<Self> {
        let spec = ModelSpec {
            family,
            g,
            d,
            hyper,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.g == 0 {
            return cfg("G must be at least 1".into());
        }
        if self.d == 0 {
            return cfg("d must be at least 1".into());
        }
        if self.family.is_univariate() && self.d != 1 {
            return cfg(format!(
                "family {} requires d = 1, got {}",
                self.family, self.d
            ));
        }
        let h = &self.hyper;
        if self.family != Family::UniFixedSigma {
            if h.e.len() != self.g {
                return cfg(format!(
                    "expected {} Dirichlet concentrations, got {}",
                    self.g,
                    h.e.len()
                ));
            }
            if h.e.iter().any(|&x| !(x > 0.0)) {
                return cfg("Dirichlet concentrations must be positive".into());
            }
        }
        match self.family {
            Family::UniFixedSigma => {}
            Family::UniHierarchical => {
                if h.x0.is_none() {
                    return cfg("uni-hierarchical requires x0".into());
                }
                match h.lambda {
                    Some(l) if l > 0.0 => {}
                    _ => return cfg("uni-hierarchical requires lambda > 0".into()),
                }
            }
            Family::MvnFull | Family::MvnDiag => {
                match &h.beta {
                    Some(b) if b.len() == self.d => {}
                    _ => return cfg(format!("beta must have length {}", self.d)),
                }
                match h.kappa0 {
                    Some(k) if k > 0.0 => {}
                    _ => return cfg("kappa0 must be positive".into()),
                }
                let phi0 = match h.phi0 {
                    Some(p) => p,
                    None => return cfg("phi0 is required".into()),
                };
                if self.family == Family::MvnFull {
                    if phi0 < self.d as f64 {
                        return cfg(format!("phi0 must be at least d = {}", self.d));
                    }
                    let scale = match h.scale_matrix() {
                        Some(s)
                            if s.nrows() == self.d
                                && h.scale.as_ref().unwrap().iter().all(|r| r.len() == self.d) =>
                        {
                            s
                        }
                        _ => return cfg(format!("scale must be a {0}x{0} matrix", self.d)),
                    };
                    if (&scale - scale.transpose()).abs().max() > 1e-9 * scale.abs().max().max(1.0)
                    {
                        return cfg("scale matrix must be symmetric".into());
                    }
                    if nalgebra::Cholesky::new(scale).is_none() {
                        return cfg("scale matrix must be positive definite".into());
                    }
                } else {
                    if !(phi0 > 0.0) {
                        return cfg("phi0 must be positive".into());
                    }
                    match &h.rates {
                        Some(r) if r.len() == self.d && r.iter().all(|&x| x > 0.0) => {}
                        _ => return cfg(format!("rates must be {} positive values", self.d)),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let block = match self.family {
            Family::UniFixedSigma => 1,
            Family::UniHierarchical => 2,
            Family::MvnFull => self.d + self.d * (self.d + 1) / 2,
            Family::MvnDiag => 2 * self.d,
        };
        let n_tau = match self.family {
            Family::UniFixedSigma => 0,
            _ => self.g - 1,
        };
        Layout {
            g: self.g,
            block,
            n_tau,
        }
    }

    /// Stable textual fingerprint used in run-file headers.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        // FNV-1a, 64 bit
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Position of each component block and of the free proportions inside the
/// flat transformed vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub g: usize,
    pub block: usize,
    pub n_tau: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.g * self.block + self.n_tau
    }

    pub fn block_range(&self, comp: usize) -> std::ops::Range<usize> {
        comp * self.block..(comp + 1) * self.block
    }

    pub fn tau_range(&self) -> std::ops::Range<usize> {
        self.g * self.block..self.dim()
    }

    pub fn block<'a>(&self, v: &'a [f64], comp: usize) -> &'a [f64] {
        &v[self.block_range(comp)]
    }
}

/// Number of free parameters `R`.
pub fn param_dimension(spec: &ModelSpec) -> usize {
    spec.layout().dim()
}

/// Natural-scale parameters of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub xi: Vec<ComponentParams>,
    pub tau: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformedParameterVector {
    pub values: Vec<f64>,
    pub log_jacobian: f64,
}

/// Row-major `n × d` data matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Data("dataset must be non-empty".into()));
        }
        if values.len() != n * d {
            return Err(Error::Data(format!(
                "expected {} values, got {}",
                n * d,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(Dataset { n, d, values })
    }

    pub fn univariate(ys: &[f64]) -> Result<Self> {
        Self::new(ys.len(), 1, ys.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Data("ragged rows".into()));
        }
        Self::new(n, d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.values[i * self.d + j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.d)
            .map(|j| self.column(j).iter().sum::<f64>() / self.n as f64)
            .collect()
    }

    pub fn scaled(&self, divisor: f64) -> Self {
        Dataset {
            n: self.n,
            d: self.d,
            values: self.values.iter().map(|v| v / divisor).collect(),
        }
    }
}

fn lower_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Map natural-scale parameters onto the real line.
pub fn transform(spec: &ModelSpec, theta: &ParameterVector) -> Result<TransformedParameterVector> {
    let layout = spec.layout();
    let d = spec.d;
    if theta.xi.len() != spec.g {
        return Err(Error::Domain(format!(
            "expected {} components, got {}",
            spec.g,
            theta.xi.len()
        )));
    }
    check_simplex(&theta.tau, spec)?;
    let mut values = vec![0.0; layout.dim()];
    let mut log_jac = 0.0;
    for (comp, p) in theta.xi.iter().enumerate() {
        if p.mean.len() != d || p.cov.nrows() != d || p.cov.ncols() != d {
            return Err(Error::Domain(format!(
                "component {} has the wrong shape",
                comp + 1
            )));
        }
        let out = &mut values[layout.block_range(comp)];
        out[..d].copy_from_slice(p.mean.as_slice());
        match spec.family {
            Family::UniFixedSigma => {}
            Family::UniHierarchical => {
                let var = p.cov[(0, 0)];
                if !(var > 0.0) {
                    return Err(Error::Domain("variance must be positive".into()));
                }
                out[1] = var.ln();
                log_jac += out[1];
            }
            Family::MvnDiag => {
                for r in 0..d {
                    let var = p.cov[(r, r)];
                    if !(var > 0.0) {
                        return Err(Error::Domain("variance must be positive".into()));
                    }
                    out[d + r] = var.ln();
                    log_jac += out[d + r];
                }
            }
            Family::MvnFull => {
                let chol = nalgebra::Cholesky::new(p.cov.clone()).ok_or_else(|| {
                    Error::Domain(format!(
                        "covariance of component {} is not positive definite",
                        comp + 1
                    ))
                })?;
                let l = chol.l();
                for i in 0..d {
                    for j in 0..=i {
                        let v = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
                        out[d + lower_index(i, j)] = v;
                    }
                }
                log_jac += cov_log_jacobian(&out[d..], d);
            }
        }
    }
    let tr = layout.tau_range();
    for (k, idx) in tr.enumerate() {
        values[idx] = theta.tau[k];
    }
    Ok(TransformedParameterVector {
        values,
        log_jacobian: log_jac,
    })
}

/// `log |det J|` of the map from the log-Cholesky coordinates to the unique
/// entries of `Σ = L Lᵀ`.
fn cov_log_jacobian(chol_coords: &[f64], d: usize) -> f64 {
    let mut out = d as f64 * std::f64::consts::LN_2;
    for i in 0..d {
        out += (d - i + 1) as f64 * chol_coords[lower_index(i, i)];
    }
    out
}

/// Log Jacobian adjustment for a transformed vector.
pub fn log_jacobian(spec: &ModelSpec, v: &[f64]) -> f64 {
    let layout = spec.layout();
    let d = spec.d;
    let mut out = 0.0;
    for comp in 0..spec.g {
        let b = layout.block(v, comp);
        match spec.family {
            Family::UniFixedSigma => {}
            Family::UniHierarchical => out += b[1],
            Family::MvnDiag => out += b[d..].iter().sum::<f64>(),
            Family::MvnFull => out += cov_log_jacobian(&b[d..], d),
        }
    }
    out
}

fn check_simplex(tau: &[f64], spec: &ModelSpec) -> Result<()> {
    if spec.family == Family::UniFixedSigma {
        return Ok(());
    }
    if tau.len() != spec.g {
        return Err(Error::Domain(format!(
            "expected {} proportions, got {}",
            spec.g,
            tau.len()
        )));
    }
    if tau.iter().any(|&t| !(t > 0.0)) || (tau.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(
            "proportions must lie in the open simplex".into(),
        ));
    }
    Ok(())
}

/// Full proportion vector from the free coordinates; `None` outside the open
/// simplex.
pub fn full_tau(spec: &ModelSpec, v: &[f64]) -> Option<Vec<f64>> {
    let layout = spec.layout();
    if spec.family == Family::UniFixedSigma {
        return Some(vec![1.0 / spec.g as f64; spec.g]);
    }
    let free = &v[layout.tau_range()];
    let last = 1.0 - free.iter().sum::<f64>();
    if free.iter().any(|&t| !(t > 0.0)) || !(last > 0.0) {
        return None;
    }
    let mut tau = free.to_vec();
    tau.push(last);
    Some(tau)
}

/// Inverse of [`transform`].
pub fn untransform(spec: &ModelSpec, v: &TransformedParameterVector) -> Result<ParameterVector> {
    let layout = spec.layout();
    if v.values.len() != layout.dim() {
        return Err(Error::Domain(format!(
            "expected length {}, got {}",
            layout.dim(),
            v.values.len()
        )));
    }
    let tau = full_tau(spec, &v.values)
        .ok_or_else(|| Error::Domain("reconstructed proportions leave the open simplex".into()))?;
    let d = spec.d;
    let xi = (0..spec.g)
        .map(|comp| {
            let b = layout.block(&v.values, comp);
            let mean = DVector::from_column_slice(&b[..d]);
            let cov = match spec.family {
                Family::UniFixedSigma => DMatrix::from_element(1, 1, 1.0),
                Family::UniHierarchical => DMatrix::from_element(1, 1, b[1].exp()),
                Family::MvnDiag => DMatrix::from_diagonal(&DVector::from_iterator(
                    d,
                    b[d..].iter().map(|x| x.exp()),
                )),
                Family::MvnFull => {
                    let l = chol_from_coords(&b[d..], d);
                    &l * l.transpose()
                }
            };
            ComponentParams { mean, cov }
        })
        .collect();
    Ok(ParameterVector { xi, tau })
}

fn chol_from_coords(coords: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| {
        if j > i {
            0.0
        } else if i == j {
            coords[lower_index(i, i)].exp()
        } else {
            coords[lower_index(i, j)]
        }
    })
}

/// Permute component labels: slot `k` of the output receives component
/// `perm[k]` of the input (0-based). Proportions move with their blocks.
pub fn permute_components(spec: &ModelSpec, v: &[f64], perm: &[usize]) -> Vec<f64> {
    let layout = spec.layout();
    let mut out = vec![0.0; v.len()];
    for (slot, &src) in perm.iter().enumerate() {
        out[layout.block_range(slot)].copy_from_slice(layout.block(v, src));
    }
    if layout.n_tau > 0 {
        let free = &v[layout.tau_range()];
        let last = 1.0 - free.iter().sum::<f64>();
        let tau_of = |c: usize| if c + 1 == spec.g { last } else { free[c] };
        let start = layout.tau_range().start;
        for slot in 0..spec.g - 1 {
            out[start + slot] = tau_of(perm[slot]);
        }
    }
    out
}

/// Prepared component density `N(μ, L Lᵀ)`.
#[derive(Clone, Debug)]
struct Component {
    mean: Vec<f64>,
    /// Row-major lower factor; only the diagonal is used when `diag` is set.
    l: Vec<f64>,
    log_det_l: f64,
    diag: bool,
}

impl Component {
    fn log_density(&self, y: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        if self.diag {
            for r in 0..d {
                let z = (y[r] - self.mean[r]) / self.l[r * d + r];
                q += z * z;
            }
        } else {
            for i in 0..d {
                let mut s = y[i] - self.mean[i];
                for k in 0..i {
                    s -= self.l[i * d + k] * scratch[k];
                }
                let z = s / self.l[i * d + i];
                scratch[i] = z;
                q += z * z;
            }
        }
        -0.5 * d as f64 * LN_2PI - self.log_det_l - 0.5 * q
    }
}

/// Family-specific constants precomputed from the hyperparameters.
#[derive(Clone, Debug)]
enum PriorConsts {
    Fixed,
    Hier {
        x0: f64,
        mu_var: f64,
        zeta_rate: f64,
    },
    Full {
        beta: Vec<f64>,
        kappa0: f64,
        phi0: f64,
        /// Row-major Cholesky factor of `Λ`.
        scale_chol: Vec<f64>,
        log_norm_iw: f64,
    },
    Diag {
        beta: Vec<f64>,
        kappa0: f64,
        phi0: f64,
        rates: Vec<f64>,
    },
}

/// Unnormalized log posterior `log π(θ) + log L(θ) + log|J|` for a fixed
/// model and dataset. Cheap to clone and safe to share across threads.
#[derive(Clone, Debug)]
pub struct LogPosterior {
    spec: ModelSpec,
    data: Dataset,
    layout: Layout,
    consts: PriorConsts,
    log_dirichlet_norm: f64,
}

impl LogPosterior {
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        if data.d() != spec.d {
            return Err(Error::Data(format!(
                "data has {} columns, model expects {}",
                data.d(),
                spec.d
            )));
        }
        let h = &spec.hyper;
        let d = spec.d;
        let consts = match spec.family {
            Family::UniFixedSigma => PriorConsts::Fixed,
            Family::UniHierarchical => {
                let lambda = h.lambda.unwrap();
                PriorConsts::Hier {
                    x0: h.x0.unwrap(),
                    mu_var: lambda * lambda,
                    zeta_rate: 10.0 / (lambda * lambda),
                }
            }
            Family::MvnFull => {
                let scale = h.scale_matrix().unwrap();
                let chol = nalgebra::Cholesky::new(scale.clone()).unwrap();
                let l = chol.l();
                let phi0 = h.phi0.unwrap();
                let log_det_scale = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
                let log_norm_iw = 0.5 * phi0 * log_det_scale
                    - 0.5 * phi0 * d as f64 * std::f64::consts::LN_2
                    - ln_mv_gamma(d, 0.5 * phi0);
                PriorConsts::Full {
                    beta: h.beta.clone().unwrap(),
                    kappa0: h.kappa0.unwrap(),
                    phi0,
                    scale_chol: (0..d * d).map(|k| l[(k / d, k % d)]).collect(),
                    log_norm_iw,
                }
            }
            Family::MvnDiag => PriorConsts::Diag {
                beta: h.beta.clone().unwrap(),
                kappa0: h.kappa0.unwrap(),
                phi0: h.phi0.unwrap(),
                rates: h.rates.clone().unwrap(),
            },
        };
        let log_dirichlet_norm = if spec.family == Family::UniFixedSigma {
            0.0
        } else {
            ln_gamma(h.e.iter().sum()) - h.e.iter().map(|&x| ln_gamma(x)).sum::<f64>()
        };
        Ok(LogPosterior {
            spec: spec.clone(),
            data: data.clone(),
            layout: spec.layout(),
            consts,
            log_dirichlet_norm,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    fn components(&self, v: &[f64]) -> Vec<Component> {
        let d = self.spec.d;
        (0..self.spec.g)
            .map(|comp| {
                let b = self.layout.block(v, comp);
                let mean = b[..d].to_vec();
                match self.spec.family {
                    Family::UniFixedSigma => Component {
                        mean,
                        l: vec![1.0],
                        log_det_l: 0.0,
                        diag: true,
                    },
                    Family::UniHierarchical => Component {
                        mean,
                        l: vec![(0.5 * b[1]).exp()],
                        log_det_l: 0.5 * b[1],
                        diag: true,
                    },
                    Family::MvnDiag => {
                        let mut l = vec![0.0; d * d];
                        for r in 0..d {
                            l[r * d + r] = (0.5 * b[d + r]).exp();
                        }
                        Component {
                            mean,
                            l,
                            log_det_l: 0.5 * b[d..].iter().sum::<f64>(),
                            diag: true,
                        }
                    }
                    Family::MvnFull => {
                        let c = &b[d..];
                        let mut l = vec![0.0; d * d];
                        let mut log_det_l = 0.0;
                        for i in 0..d {
                            for j in 0..i {
                                l[i * d + j] = c[lower_index(i, j)];
                            }
                            let a = c[lower_index(i, i)];
                            l[i * d + i] = a.exp();
                            log_det_l += a;
                        }
                        Component {
                            mean,
                            l,
                            log_det_l,
                            diag: false,
                        }
                    }
                }
            })
            .collect()
    }

    fn log_prior_components(&self, comps: &[Component], v: &[f64]) -> f64 {
        let d = self.spec.d;
        let mut out = 0.0;
        match &self.consts {
            PriorConsts::Fixed => {
                for c in comps {
                    out += -0.5 * LN_2PI - 0.5 * c.mean[0] * c.mean[0];
                }
            }
            PriorConsts::Hier {
                x0,
                mu_var,
                zeta_rate,
            } => {
                let g = self.spec.g as f64;
                let mut sum_prec = 0.0;
                for (comp, c) in comps.iter().enumerate() {
                    let dm = c.mean[0] - x0;
                    out += -0.5 * (LN_2PI + mu_var.ln()) - 0.5 * dm * dm / mu_var;
                    let log_var = self.layout.block(v, comp)[1];
                    // σ² part of the inverse-gamma kernel, ζ integrated out below
                    out += -(HIER_VAR_SHAPE + 1.0) * log_var - ln_gamma(HIER_VAR_SHAPE);
                    sum_prec += (-log_var).exp();
                }
                let shape = HIER_ZETA_SHAPE + HIER_VAR_SHAPE * g;
                out += HIER_ZETA_SHAPE * zeta_rate.ln() - ln_gamma(HIER_ZETA_SHAPE)
                    + ln_gamma(shape)
                    - shape * (zeta_rate + sum_prec).ln();
            }
            PriorConsts::Full {
                beta,
                kappa0,
                phi0,
                scale_chol,
                log_norm_iw,
            } => {
                let mut scratch = vec![0.0; d];
                let mut m = vec![0.0; d * d];
                for c in comps {
                    // N(μ; β, Σ/κ₀)
                    let mut q = 0.0;
                    for i in 0..d {
                        let mut s = c.mean[i] - beta[i];
                        for k in 0..i {
                            s -= c.l[i * d + k] * scratch[k];
                        }
                        let z = s / c.l[i * d + i];
                        scratch[i] = z;
                        q += z * z;
                    }
                    out += -0.5 * d as f64 * LN_2PI + 0.5 * d as f64 * kappa0.ln()
                        - c.log_det_l
                        - 0.5 * kappa0 * q;
                    // IW(Σ; φ₀, Λ): tr(Λ Σ⁻¹) = ‖L⁻¹ C‖²_F with Λ = C Cᵀ
                    for col in 0..d {
                        for i in 0..d {
                            let mut s = scale_chol[i * d + col];
                            for k in 0..i {
                                s -= c.l[i * d + k] * m[k * d + col];
                            }
                            m[i * d + col] = s / c.l[i * d + i];
                        }
                    }
                    let tr: f64 = m.iter().map(|x| x * x).sum();
                    let log_det_sigma = 2.0 * c.log_det_l;
                    out += log_norm_iw - 0.5 * (phi0 + d as f64 + 1.0) * log_det_sigma - 0.5 * tr;
                }
            }
            PriorConsts::Diag {
                beta,
                kappa0,
                phi0,
                rates,
            } => {
                let norm: f64 = rates.iter().map(|r| phi0 * r.ln() - ln_gamma(*phi0)).sum();
                for (comp, c) in comps.iter().enumerate() {
                    let b = self.layout.block(v, comp);
                    out += norm;
                    for r in 0..d {
                        let log_var = b[d + r];
                        let var = log_var.exp();
                        out += -(phi0 + 1.0) * log_var - rates[r] / var;
                        let dm = c.mean[r] - beta[r];
                        out +=
                            -0.5 * (LN_2PI + log_var - kappa0.ln()) - 0.5 * kappa0 * dm * dm / var;
                    }
                }
            }
        }
        out
    }

    fn log_prior_tau(&self, tau: &[f64]) -> f64 {
        if self.spec.family == Family::UniFixedSigma {
            return 0.0;
        }
        self.log_dirichlet_norm
            + self
                .spec
                .hyper
                .e
                .iter()
                .zip(tau)
                .map(|(&e, &t)| (e - 1.0) * t.ln())
                .sum::<f64>()
    }

    /// Evaluate the unnormalized log posterior. Points outside the support
    /// (proportions off the open simplex) give `-inf`.
    pub fn log_density(&self, v: &[f64]) -> f64 {
        let tau = match full_tau(&self.spec, v) {
            Some(t) => t,
            None => return f64::NEG_INFINITY,
        };
        if v.iter().any(|x| !x.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let comps = self.components(v);
        let log_tau: Vec<f64> = tau.iter().map(|t| t.ln()).collect();
        let mut scratch = vec![0.0; self.spec.d];
        let mut terms = vec![0.0; self.spec.g];
        let mut loglik = 0.0;
        for i in 0..self.data.n() {
            let y = self.data.row(i);
            for (g, c) in comps.iter().enumerate() {
                terms[g] = log_tau[g] + c.log_density(y, &mut scratch);
            }
            loglik += log_sum_exp(&terms);
        }
        let out = loglik
            + self.log_prior_components(&comps, v)
            + self.log_prior_tau(&tau)
            + log_jacobian(&self.spec, v);
        if out.is_nan() {
            f64::NEG_INFINITY
        } else {
            out
        }
    }

    /// Log prior density on the transformed scale (including the Jacobian).
    pub fn log_prior(&self, v: &[f64]) -> f64 {
        match full_tau(&self.spec, v) {
            Some(tau) => {
                let comps = self.components(v);
                self.log_prior_components(&comps, v)
                    + self.log_prior_tau(&tau)
                    + log_jacobian(&self.spec, v)
            }
            None => f64::NEG_INFINITY,
        }
    }

    /// `log τ_g + log f(y_i; ξ_g)` as a row-major `n × G` matrix.
    pub fn log_weighted_densities(&self, v: &[f64]) -> Option<Vec<f64>> {
        let tau = full_tau(&self.spec, v)?;
        let comps = self.components(v);
        let g = self.spec.g;
        let mut scratch = vec![0.0; self.spec.d];
        let mut out = vec![0.0; self.data.n() * g];
        for i in 0..self.data.n() {
            let y = self.data.row(i);
            for (k, c) in comps.iter().enumerate() {
                out[i * g + k] = tau[k].ln() + c.log_density(y, &mut scratch);
            }
        }
        Some(out)
    }

    /// Posterior allocation probabilities `ẑ_{i,g}` at `v` (row-major `n × G`).
    pub fn responsibilities(&self, v: &[f64]) -> Option<Vec<f64>> {
        let mut w = self.log_weighted_densities(v)?;
        let g = self.spec.g;
        for row in w.chunks_mut(g) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        Some(w)
    }
}

/// One-shot evaluation of the unnormalized log posterior.
pub fn log_unnorm_posterior(spec: &ModelSpec, data: &Dataset, v: &[f64]) -> Result<f64> {
    if v.len() != param_dimension(spec) {
        return Err(Error::Domain(format!(
            "expected length {}, got {}",
            param_dimension(spec),
            v.len()
        )));
    }
    Ok(LogPosterior::new(spec, data)?.log_density(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_spec(g: usize, d: usize) -> ModelSpec {
        let scale = DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 0.3 });
        ModelSpec::new(
            Family::MvnFull,
            g,
            d,
            HyperParams::mvn_full(g, vec![0.5; d], 0.1, d as f64 + 1.0, &scale),
        )
        .unwrap()
    }

    fn diag_spec(g: usize, d: usize) -> ModelSpec {
        ModelSpec::new(
            Family::MvnDiag,
            g,
            d,
            HyperParams::mvn_diag(g, vec![0.0; d], 0.2, 2.0, vec![1.5; d]),
        )
        .unwrap()
    }

    fn hier_spec(g: usize) -> ModelSpec {
        ModelSpec::new(
            Family::UniHierarchical,
            g,
            1,
            HyperParams::hierarchical(g, 1.0, 4.0),
        )
        .unwrap()
    }

    fn toy_spec(g: usize) -> ModelSpec {
        ModelSpec::new(Family::UniFixedSigma, g, 1, HyperParams::fixed_sigma(g)).unwrap()
    }

    #[test]
    fn param_dimension_examples() {
        assert_eq!(param_dimension(&full_spec(5, 6)), 139);
        assert_eq!(param_dimension(&diag_spec(15, 5)), 164);
        assert_eq!(param_dimension(&toy_spec(2)), 2);
        assert_eq!(param_dimension(&hier_spec(3)), 8);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::new(Family::UniFixedSigma, 0, 1, HyperParams::fixed_sigma(0)).is_err());
        assert!(ModelSpec::new(
            Family::UniHierarchical,
            2,
            2,
            HyperParams::hierarchical(2, 0.0, 1.0)
        )
        .is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ModelSpec::new(
            Family::MvnFull,
            2,
            2,
            HyperParams::mvn_full(2, vec![0.0; 2], 1.0, 2.0, &bad)
        )
        .is_err());
        assert!("nope".parse::<Family>().is_err());
        assert_eq!(
            "uni-hier".parse::<Family>().unwrap(),
            Family::UniHierarchical
        );
    }

    #[test]
    fn unit_variance_maps_to_zero() {
        let spec = hier_spec(1);
        let theta = ParameterVector {
            xi: vec![ComponentParams {
                mean: DVector::from_element(1, 0.3),
                cov: DMatrix::from_element(1, 1, 1.0),
            }],
            tau: vec![1.0],
        };
        let t = transform(&spec, &theta).unwrap();
        assert_eq!(t.values, vec![0.3, 0.0]);
        assert_eq!(t.log_jacobian, 0.0);

        let theta2 = ParameterVector {
            xi: vec![ComponentParams {
                mean: DVector::from_element(1, 0.0),
                cov: DMatrix::from_element(1, 1, 2f64.exp()),
            }],
            tau: vec![1.0],
        };
        let t2 = transform(&spec, &theta2).unwrap();
        assert!((t2.values[1] - 2.0).abs() < 1e-15);
        assert!((t2.log_jacobian - 2.0).abs() < 1e-15);

        let back = untransform(
            &spec,
            &TransformedParameterVector {
                values: vec![0.0, 0.0],
                log_jacobian: 0.0,
            },
        )
        .unwrap();
        assert_eq!(back.xi[0].cov[(0, 0)], 1.0);
    }

    #[test]
    fn identity_covariance_gives_identity_cholesky() {
        let spec = full_spec(1, 2);
        let theta = ParameterVector {
            xi: vec![ComponentParams {
                mean: DVector::zeros(2),
                cov: DMatrix::identity(2, 2),
            }],
            tau: vec![1.0],
        };
        let t = transform(&spec, &theta).unwrap();
        // mean (0,0), then L00, L10, L11 with log diagonal
        assert_eq!(t.values, vec![0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_pd_covariance_is_domain_error() {
        let spec = full_spec(1, 2);
        let theta = ParameterVector {
            xi: vec![ComponentParams {
                mean: DVector::zeros(2),
                cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            }],
            tau: vec![1.0],
        };
        assert!(matches!(transform(&spec, &theta), Err(Error::Domain(_))));
    }

    #[test]
    fn tau_reconstruction() {
        let spec = hier_spec(3);
        let mut v = vec![0.0; 8];
        v[6] = 0.2;
        v[7] = 0.3;
        let p = untransform(
            &spec,
            &TransformedParameterVector {
                values: v.clone(),
                log_jacobian: 0.0,
            },
        )
        .unwrap();
        assert!((p.tau[2] - 0.5).abs() < 1e-15);
        v[7] = 0.9;
        assert!(untransform(
            &spec,
            &TransformedParameterVector {
                values: v,
                log_jacobian: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn permute_moves_proportions() {
        let spec = hier_spec(3);
        let v = vec![1.0, 0.1, 2.0, 0.2, 3.0, 0.3, 0.2, 0.3];
        assert_eq!(permute_components(&spec, &v, &[0, 1, 2]), v);
        let p = permute_components(&spec, &v, &[2, 0, 1]);
        assert_eq!(&p[..6], &[3.0, 0.3, 1.0, 0.1, 2.0, 0.2]);
        assert!((p[6] - 0.5).abs() < 1e-15);
        assert!((p[7] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn toy_single_point_density() {
        let spec = toy_spec(1);
        let data = Dataset::univariate(&[0.0]).unwrap();
        let lp = log_unnorm_posterior(&spec, &data, &[0.0]).unwrap();
        assert!((lp + LN_2PI).abs() < 1e-12);
        assert!((lp + 1.8379).abs() < 1e-4);
    }

    /// Direct evaluation of the mvn-full posterior through natural-scale
    /// densities built with nalgebra, independent of the packed fast path.
    fn direct_mvn_full(spec: &ModelSpec, data: &Dataset, v: &[f64]) -> f64 {
        let theta = untransform(
            spec,
            &TransformedParameterVector {
                values: v.to_vec(),
                log_jacobian: 0.0,
            },
        )
        .unwrap();
        let d = spec.d;
        let h = &spec.hyper;
        let beta = DVector::from_vec(h.beta.clone().unwrap());
        let kappa0 = h.kappa0.unwrap();
        let phi0 = h.phi0.unwrap();
        let scale = h.scale_matrix().unwrap();
        let mvn = |x: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>| {
            let inv = s.clone().try_inverse().unwrap();
            let diff = x - m;
            let q = (diff.transpose() * inv * &diff)[(0, 0)];
            -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * s.determinant().ln()
                - 0.5 * q
        };
        let mut lp = 0.0;
        for i in 0..data.n() {
            let y = DVector::from_column_slice(data.row(i));
            let dens: f64 = theta
                .xi
                .iter()
                .zip(&theta.tau)
                .map(|(c, t)| t * mvn(&y, &c.mean, &c.cov).exp())
                .sum();
            lp += dens.ln();
        }
        for c in &theta.xi {
            lp += mvn(&c.mean, &beta, &(&c.cov / kappa0));
            let inv = c.cov.clone().try_inverse().unwrap();
            lp += 0.5 * phi0 * scale.determinant().ln()
                - 0.5 * phi0 * d as f64 * 2f64.ln()
                - ln_mv_gamma(d, phi0 / 2.0)
                - 0.5 * (phi0 + d as f64 + 1.0) * c.cov.determinant().ln()
                - 0.5 * (&scale * inv).trace();
        }
        let e = &h.e;
        lp += ln_gamma(e.iter().sum()) - e.iter().map(|&x| ln_gamma(x)).sum::<f64>();
        lp += e
            .iter()
            .zip(&theta.tau)
            .map(|(&a, &t)| (a - 1.0) * t.ln())
            .sum::<f64>();
        lp + log_jacobian(spec, v)
    }

    #[test]
    fn mvn_full_matches_direct_evaluation() {
        let spec = full_spec(2, 2);
        let data = Dataset::from_rows(&[vec![0.1, 0.4], vec![1.5, -0.2], vec![-0.7, 0.9]]).unwrap();
        let v = vec![0.2, 0.1, 0.3, -0.2, 0.4, -0.5, 1.0, 0.1, 0.2, -0.1, 0.35];
        let fast = log_unnorm_posterior(&spec, &data, &v).unwrap();
        let slow = direct_mvn_full(&spec, &data, &v);
        assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
    }

    /// Finite-difference Jacobian of the map from log-Cholesky coordinates to
    /// the unique entries of Σ.
    #[test]
    fn cov_jacobian_matches_finite_differences() {
        let d = 3;
        let coords = vec![0.2, 0.5, -0.1, -0.3, 0.7, 0.15];
        let sigma_entries = |c: &[f64]| {
            let l = chol_from_coords(c, d);
            let s = &l * l.transpose();
            let mut out = vec![];
            for i in 0..d {
                for j in 0..=i {
                    out.push(s[(i, j)]);
                }
            }
            out
        };
        let m = coords.len();
        let mut jac = DMatrix::zeros(m, m);
        let h = 1e-6;
        for k in 0..m {
            let mut up = coords.clone();
            let mut dn = coords.clone();
            up[k] += h;
            dn[k] -= h;
            let (a, b) = (sigma_entries(&up), sigma_entries(&dn));
            for r in 0..m {
                jac[(r, k)] = (a[r] - b[r]) / (2.0 * h);
            }
        }
        let numeric = jac.determinant().abs().ln();
        let analytic = cov_log_jacobian(&coords, d);
        assert!((numeric - analytic).abs() < 1e-6, "{numeric} vs {analytic}");
    }

    fn random_theta(spec: &ModelSpec, seed: &[f64]) -> ParameterVector {
        let d = spec.d;
        let mut k = 0;
        let mut next = || {
            k += 1;
            seed[k % seed.len()] + 0.01 * k as f64
        };
        let xi = (0..spec.g)
            .map(|_| {
                let mean = DVector::from_fn(d, |_, _| next());
                let a = DMatrix::from_fn(d, d, |_, _| next());
                let mut cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
                match spec.family {
                    Family::UniFixedSigma => cov = DMatrix::identity(1, 1),
                    Family::MvnDiag | Family::UniHierarchical => {
                        cov = DMatrix::from_diagonal(&cov.diagonal())
                    }
                    Family::MvnFull => {}
                }
                ComponentParams { mean, cov }
            })
            .collect();
        let raw: Vec<f64> = (0..spec.g).map(|_| next().abs() + 0.1).collect();
        let s: f64 = raw.iter().sum();
        ParameterVector {
            xi,
            tau: raw.iter().map(|x| x / s).collect(),
        }
    }

    fn specs() -> Vec<ModelSpec> {
        vec![toy_spec(3), hier_spec(3), full_spec(3, 2), diag_spec(3, 2)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(250))]

        #[test]
        fn transform_round_trip(seed in proptest::collection::vec(-2.0f64..2.0, 7)) {
            for spec in specs() {
                let mut theta = random_theta(&spec, &seed);
                if spec.family == Family::UniFixedSigma {
                    theta.tau = vec![1.0 / 3.0; 3];
                }
                let t = transform(&spec, &theta).unwrap();
                prop_assert_eq!(t.values.len(), param_dimension(&spec));
                prop_assert!((t.log_jacobian - log_jacobian(&spec, &t.values)).abs() < 1e-12);
                let back = untransform(&spec, &t).unwrap();
                for (a, b) in theta.xi.iter().zip(&back.xi) {
                    for (x, y) in a.mean.iter().zip(b.mean.iter()) {
                        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
                    }
                    for (x, y) in a.cov.iter().zip(b.cov.iter()) {
                        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
                    }
                }
                for (x, y) in theta.tau.iter().zip(&back.tau) {
                    prop_assert!((x - y).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn posterior_invariant_under_permutation(
            seed in proptest::collection::vec(-2.0f64..2.0, 7),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let rows = vec![vec![0.3, -0.4], vec![1.2, 0.8], vec![-1.0, 0.1], vec![0.0, 2.0]];
            for spec in specs() {
                let data = if spec.d == 1 {
                    Dataset::univariate(&[0.3, 1.2, -1.0, 2.0]).unwrap()
                } else {
                    Dataset::from_rows(&rows).unwrap()
                };
                let mut theta = random_theta(&spec, &seed);
                if spec.family == Family::UniFixedSigma {
                    theta.tau = vec![1.0 / 3.0; 3];
                }
                let v = transform(&spec, &theta).unwrap().values;
                let post = LogPosterior::new(&spec, &data).unwrap();
                let a = post.log_density(&v);
                let b = post.log_density(&permute_components(&spec, &v, &perms[perm_idx]));
                prop_assert!(a.is_finite());
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
            }
        }
    }
}
