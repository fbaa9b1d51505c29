//! Truncated harmonic mean estimation of the marginal likelihood: tuning of
//! the truncation quantile, the Monte Carlo volume of the truncation set,
//! the naive and ordering-based symmetric estimators, standard errors and
//! the empty-component reduction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::{
    build_overlap_graph, criterion_of_overlap, fit_ellipsoid, max_independent_set_greedy,
    sample_uniform, Ellipsoid,
};
use crate::linalg::{ln_factorial, log_sum_exp};
use crate::model::{permute_components, Dataset, LogPosterior, ModelSpec};
use crate::ordering::{
    all_permutations, enumerate_orderings, fit_qda, ordering_perm, shrink_until_tractable,
    w_values, OrderingStructure, QdaModel, ShrinkContext,
};
use crate::relabel::{apply_relabelling, compose, ecr_relabel, RelabelledRun};
use crate::sampler::PosteriorRun;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThamesConfig {
    /// Starting radius; `√(R+1)` when unset.
    pub c_init: Option<f64>,
    pub alpha_lower: f64,
    pub alpha_cap: f64,
    pub alpha_stride: usize,
    /// Use this quantile instead of selecting one.
    pub alpha_fixed: Option<f64>,
    /// Monte Carlo volume sample size; `T` when unset.
    pub n_mc: Option<usize>,
    pub omega_threshold: u64,
    /// Minimum `p̂₀` for the empty-component reduction; `1/T` when unset.
    pub empty_threshold: Option<f64>,
    /// Label permutations of draws inside the ellipsoid join the `Δ` check
    /// points while `G!` is at most this value.
    pub extra_checkpoint_limit: u64,
    pub seed: u64,
}

impl Default for ThamesConfig {
    fn default() -> Self {
        ThamesConfig {
            c_init: None,
            alpha_lower: 0.2,
            alpha_cap: 0.5,
            alpha_stride: 100,
            alpha_fixed: None,
            n_mc: None,
            omega_threshold: 50_000,
            empty_threshold: None,
            extra_checkpoint_limit: 720,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThamesResult {
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub log_z: f64,
    pub se_log_z: f64,
    pub alpha: f64,
    pub q_hat: f64,
    pub c_init: f64,
    pub c_final: f64,
    pub log_vol_e: f64,
    pub log_vol_b: f64,
    pub mc_passing: usize,
    pub mc_total: usize,
    pub omega_size: usize,
    pub ordering_bound: u64,
    /// 1-based labels of the independent set on the starting ellipsoid.
    pub i_set: Vec<usize>,
    pub co: i64,
    pub n_points_in_b: usize,
    pub n_draws_in_b: usize,
    pub shrink_steps: usize,
    pub recentered: bool,
    pub phat0: f64,
    pub se_log_phat0: f64,
    /// Direct estimate (always computed when possible).
    pub log_z_direct: Option<f64>,
    pub se_log_z_direct: Option<f64>,
    /// `G − 1` when the value came from the empty-component reduction.
    pub reduced_from: Option<usize>,
}

/// Outcome of the quantile search.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSelection {
    pub alpha: f64,
    /// `(α candidate, Kolmogorov distance)` over the grid.
    pub distances: Vec<(f64, f64)>,
    pub fallback: bool,
}

/// Type-7 sample quantile.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Kolmogorov distance between the top-`k` values of sorted `eta` and a
/// moment-matched shifted and scaled `χ²_R` truncated to `[0, max η]`.
fn kolmogorov_distance(eta_sorted: &[f64], k: usize, r: usize) -> f64 {
    let sample = &eta_sorted[..k];
    let kf = k as f64;
    let mean = sample.iter().sum::<f64>() / kf;
    let var = sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (kf - 1.0);
    if !(var > 0.0) {
        return f64::INFINITY;
    }
    let rf = r as f64;
    let scale = (var / (2.0 * rf)).sqrt();
    let shift = mean - rf * scale;
    let chi = ChiSquared::new(rf).expect("positive degrees of freedom");
    let cdf = |x: f64| {
        let z = (x - shift) / scale;
        if z <= 0.0 {
            0.0
        } else {
            chi.cdf(z)
        }
    };
    let upper = *eta_sorted.last().unwrap();
    let lo = cdf(0.0);
    let span = cdf(upper) - lo;
    let truncated = span > 0.0 && span.is_finite();
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = if truncated {
            ((cdf(x) - lo) / span).clamp(0.0, 1.0)
        } else {
            cdf(x)
        };
        d = d.max((i + 1) as f64 / kf - f).max(f - i as f64 / kf);
    }
    d
}

/// Choose the truncation quantile by minimizing the Kolmogorov distance of
/// the HPD-restricted `η = −log posterior` values to a shifted, scaled `χ²_R`.
pub fn select_alpha(log_post: &[f64], r: usize, cfg: &ThamesConfig) -> AlphaSelection {
    let fallback = AlphaSelection {
        alpha: cfg.alpha_cap,
        distances: vec![],
        fallback: true,
    };
    if 2 * log_post.len() < 200 {
        log::warn!("fewer than 200 draws; using alpha = {}", cfg.alpha_cap);
        return fallback;
    }
    let mut eta: Vec<f64> = log_post.iter().map(|x| -x).collect();
    eta.sort_by(f64::total_cmp);
    if eta.first() == eta.last() {
        log::warn!(
            "constant log-posterior trace; using alpha = {}",
            cfg.alpha_cap
        );
        return fallback;
    }
    let m = eta.len();
    let stride = cfg.alpha_stride.max(1);
    let distances: Vec<(f64, f64)> = (1..=m / stride)
        .map(|j| j * stride)
        .filter(|&k| k as f64 / m as f64 >= cfg.alpha_lower && k >= 2)
        .map(|k| (k as f64 / m as f64, kolmogorov_distance(&eta, k, r)))
        .collect();
    let best = distances
        .iter()
        .filter(|(_, d)| d.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match best {
        Some(&(a, _)) => AlphaSelection {
            alpha: a.min(cfg.alpha_cap),
            distances,
            fallback: false,
        },
        None => {
            log::warn!("no usable alpha candidate; using alpha = {}", cfg.alpha_cap);
            AlphaSelection {
                distances,
                ..fallback
            }
        }
    }
}

/// Monte Carlo estimate of the truncation-set volume.
#[derive(Clone, Debug)]
pub struct VolumeEstimate {
    pub log_vol_e: f64,
    pub log_vol_b: f64,
    pub passing: usize,
    pub total: usize,
    pub inside_flags: Vec<bool>,
}

pub fn estimate_volume_b(
    e: &Ellipsoid,
    q_hat: f64,
    mc_sample: &[Vec<f64>],
    post: &LogPosterior,
) -> VolumeEstimate {
    let inside_flags: Vec<bool> = mc_sample
        .par_iter()
        .map(|p| post.log_density(p) > q_hat)
        .collect();
    let passing = inside_flags.iter().filter(|&&b| b).count();
    let total = mc_sample.len();
    let log_vol_e = e.log_volume();
    let log_vol_b = if passing == 0 {
        f64::NEG_INFINITY
    } else {
        log_vol_e + (passing as f64 / total as f64).ln()
    };
    VolumeEstimate {
        log_vol_e,
        log_vol_b,
        passing,
        total,
        inside_flags,
    }
}

/// Accumulated estimator terms.
#[derive(Clone, Debug)]
pub struct ThamesSum {
    /// `log Ẑ`
    pub log_z: f64,
    /// Relative standard error of `Ẑ⁻¹` from the draws alone.
    pub rel_se: f64,
    /// Number of `(ordering, draw)` pairs inside `B`.
    pub n_points_in_b: usize,
    /// Per-draw counts of permuted copies inside `B`.
    pub counts: Vec<usize>,
}

fn finish_sum(counts: Vec<usize>, log_post: &[f64], log_vol_b: f64, g: usize) -> Result<ThamesSum> {
    let half = counts.len() as f64;
    let terms: Vec<f64> = counts
        .iter()
        .zip(log_post)
        .map(|(&c, &lp)| {
            if c == 0 {
                f64::NEG_INFINITY
            } else {
                (c as f64).ln() - lp
            }
        })
        .collect();
    let n_points_in_b: usize = counts.iter().sum();
    let lse = log_sum_exp(&terms);
    if !lse.is_finite() {
        return Err(Error::Numerical(
            "no retained draw falls in the truncation set".into(),
        ));
    }
    let log_inv_z = lse - half.ln() - ln_factorial(g) - log_vol_b;
    // scaled summands for the standard error
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = terms.iter().map(|t| (t - top).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / half;
    let var = scaled.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (half - 1.0).max(1.0);
    let rel_se = var.sqrt() / (mean * half.sqrt());
    Ok(ThamesSum {
        log_z: -log_inv_z,
        rel_se,
        n_points_in_b,
        counts,
    })
}

/// Symmetric estimator summing over all `G!` label permutations of every
/// second-half draw. Intended as a reference for small `G`.
pub fn thames_naive(
    spec: &ModelSpec,
    second_half: &[Vec<f64>],
    log_post: &[f64],
    e: &Ellipsoid,
    q_hat: f64,
    log_vol_b: f64,
) -> Result<ThamesSum> {
    let perms = all_permutations(spec.g);
    let counts: Vec<usize> = second_half
        .par_iter()
        .zip(log_post.par_iter())
        .map(|(v, &lp)| {
            if lp <= q_hat {
                return 0;
            }
            perms
                .iter()
                .filter(|p| e.contains(&permute_components(spec, v, p)))
                .count()
        })
        .collect();
    finish_sum(counts, log_post, log_vol_b, spec.g)
}

/// Ordering-based symmetric estimator: only the maps `ψ_o`, `o ∈ Ω`, are
/// evaluated.
#[allow(clippy::too_many_arguments)]
pub fn thames_efficient(
    spec: &ModelSpec,
    second_half: &[Vec<f64>],
    log_post: &[f64],
    e: &Ellipsoid,
    q_hat: f64,
    log_vol_b: f64,
    omega: &[Vec<usize>],
    q: &QdaModel,
    set: &[usize],
) -> Result<ThamesSum> {
    let layout = spec.layout();
    let counts: Vec<usize> = second_half
        .par_iter()
        .zip(log_post.par_iter())
        .map(|(v, &lp)| {
            if lp <= q_hat {
                return 0;
            }
            let w = w_values(v, &layout, q, set);
            omega
                .iter()
                .filter(|o| e.contains(&permute_components(spec, v, &ordering_perm(&w, o))))
                .count()
        })
        .collect();
    finish_sum(counts, log_post, log_vol_b, spec.g)
}

/// `p̂₀`: posterior probability that a given component is empty, averaged
/// over components, with the standard error of its logarithm.
pub fn phat0(draws: &[Vec<f64>], post: &LogPosterior) -> (f64, f64) {
    let g = post.spec().g;
    let per_draw: Vec<f64> = draws
        .par_iter()
        .map(|v| {
            let Some(w) = post.log_weighted_densities(v) else {
                return f64::NEG_INFINITY;
            };
            let mut acc = vec![0.0; g];
            for row in w.chunks(g) {
                let all = log_sum_exp(row);
                for k in 0..g {
                    let others: Vec<f64> = row
                        .iter()
                        .enumerate()
                        .filter(|&(h, _)| h != k)
                        .map(|(_, &x)| x)
                        .collect();
                    acc[k] += log_sum_exp(&others) - all;
                }
            }
            log_sum_exp(&acc) - (g as f64).ln()
        })
        .collect();
    let t = draws.len() as f64;
    let log_p = log_sum_exp(&per_draw) - t.ln();
    if !log_p.is_finite() {
        return (0.0, f64::INFINITY);
    }
    let scaled: Vec<f64> = per_draw.iter().map(|x| (x - log_p).exp()).collect();
    let var = scaled.iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>() / (t - 1.0).max(1.0);
    (log_p.exp(), (var / t).sqrt())
}

/// `log Γ(Σe) + log Γ(n + Σ_{g<G} e) − log Γ(n + Σe) − log Γ(Σ_{g<G} e)`.
pub fn empty_component_log_factor(e: &[f64], n: usize) -> f64 {
    let total: f64 = e.iter().sum();
    let reduced: f64 = e[..e.len() - 1].iter().sum();
    let nf = n as f64;
    let last = e[e.len() - 1];
    if last.fract() == 0.0 && (1.0..=64.0).contains(&last) {
        // Γ(x + m)/Γ(x) = x(x+1)…(x+m−1)
        let ratio: f64 = (0..last as usize)
            .map(|k| (reduced + k as f64) / (nf + reduced + k as f64))
            .product();
        return ratio.ln();
    }
    ln_gamma(total) + ln_gamma(nf + reduced) - ln_gamma(nf + total) - ln_gamma(reduced)
}

/// `log Ẑ(G)` from `log Ẑ(G−1)` and `p̂₀`.
pub fn reduce_empty_component(z_prev: f64, phat0: f64, e: &[f64], n: usize) -> Result<f64> {
    if !(phat0 > 0.0) {
        return Err(Error::Numerical(
            "p̂₀ is zero; the reduction does not apply".into(),
        ));
    }
    if e.len() < 2 {
        return Err(Error::Config(
            "the reduction needs at least two components".into(),
        ));
    }
    Ok(empty_component_log_factor(e, n) + z_prev - phat0.ln())
}

/// Estimate carried from the previous `G` of a sweep.
#[derive(Clone, Debug)]
pub struct PreviousEstimate {
    pub spec: ModelSpec,
    pub log_z: f64,
    pub se_log_z: f64,
}

/// Whether the component priors of `prev` and `spec` coincide so that the
/// reduction from `G − 1` components is valid.
pub fn reduction_applicable(prev: &ModelSpec, spec: &ModelSpec) -> bool {
    if !spec.family.supports_empty_reduction()
        || prev.family != spec.family
        || prev.g + 1 != spec.g
        || prev.d != spec.d
    {
        return false;
    }
    let (a, b) = (&prev.hyper, &spec.hyper);
    a.beta == b.beta
        && a.kappa0 == b.kappa0
        && a.phi0 == b.phi0
        && a.scale == b.scale
        && a.rates == b.rates
        && a.e[..] == b.e[..prev.g]
}

/// Canonical slot order after relabelling: slots sorted by the mean of their
/// block over `rows`, compared lexicographically, ties by slot.
pub fn canonical_order(rows: &[Vec<f64>], spec: &ModelSpec) -> Vec<usize> {
    let layout = spec.layout();
    let means: Vec<Vec<f64>> = (0..spec.g)
        .map(|c| {
            let mut m = vec![0.0; layout.block];
            for r in rows {
                for (a, b) in m.iter_mut().zip(layout.block(r, c)) {
                    *a += b;
                }
            }
            m
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.g).collect();
    order.sort_by(|&a, &b| {
        means[a]
            .iter()
            .zip(&means[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Intermediate state of the pipeline, exposed for diagnostics and exports.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub relabelled: RelabelledRun,
    /// Relabelled, canonically ordered draws.
    pub draws: Vec<Vec<f64>>,
    pub alpha: AlphaSelection,
    pub q_hat: f64,
    pub start: Ellipsoid,
    pub co: i64,
    pub i_set: Vec<usize>,
    pub structure: OrderingStructure,
    pub omega: Vec<Vec<usize>>,
    pub volume: VolumeEstimate,
    pub sum: ThamesSum,
}

/// Run the direct estimator and keep every intermediate.
pub fn run_pipeline(run: &PosteriorRun, data: &Dataset, cfg: &ThamesConfig) -> Result<Pipeline> {
    let spec = &run.spec;
    let t = run.len();
    if t < 4 || t % 2 != 0 {
        return Err(Error::Config(format!(
            "need an even number of at least 4 draws, got {t}"
        )));
    }
    let post = LogPosterior::new(spec, data)?;
    let layout = spec.layout();
    let r = layout.dim();
    let half = t / 2;

    let relabelled = ecr_relabel(run);
    let mut draws = apply_relabelling(&relabelled);
    let canon = canonical_order(&draws[..half], spec);
    if canon.iter().enumerate().any(|(i, &c)| i != c) {
        draws = draws
            .iter()
            .map(|d| permute_components(spec, d, &canon))
            .collect();
    }
    let relabelled = RelabelledRun {
        perms: relabelled
            .perms
            .iter()
            .map(|p| compose(p, &canon))
            .collect(),
        ..relabelled
    };
    let (first, second) = draws.split_at(half);
    let (lp_first, lp_second) = run.log_post.split_at(half);

    let c_init = cfg.c_init.unwrap_or(((r + 1) as f64).sqrt());
    let start = fit_ellipsoid(first, c_init);
    let alpha = match cfg.alpha_fixed {
        Some(a) => AlphaSelection {
            alpha: a,
            distances: vec![],
            fallback: false,
        },
        None => select_alpha(lp_first, r, cfg),
    };
    let q_hat = quantile(lp_first, 1.0 - alpha.alpha);

    let overlap0 = build_overlap_graph(&start, &layout);
    let i0 = max_independent_set_greedy(&overlap0);
    let co = criterion_of_overlap(i0.len(), spec.g);

    let second_refs: Vec<&[f64]> = second.iter().map(|v| v.as_slice()).collect();
    let qda = fit_qda(&second_refs, &layout);
    let n_mc = cfg.n_mc.unwrap_or(t).max(1);
    let mc = sample_uniform(&start, n_mc, cfg.seed);
    let ctx = ShrinkContext {
        spec,
        second_half: second,
        second_half_log_post: lp_second,
        threshold: cfg.omega_threshold,
        n_mc,
        seed: cfg.seed,
        extra_checkpoint_limit: cfg.extra_checkpoint_limit,
    };
    let structure = shrink_until_tractable(&ctx, &start, qda, mc)?;
    let cap = usize::try_from(cfg.omega_threshold)
        .unwrap_or(usize::MAX)
        .max(1);
    let omega = enumerate_orderings(&structure.delta, cap)?;

    let e = &structure.ellipsoid;
    let volume = estimate_volume_b(e, q_hat, &structure.mc_sample, &post);
    if volume.passing == 0 {
        return Err(Error::EmptyTruncation {
            alpha: alpha.alpha,
            c: e.radius,
            mc_passing: 0,
            mc_total: volume.total,
        });
    }
    let sum = thames_efficient(
        spec,
        second,
        lp_second,
        e,
        q_hat,
        volume.log_vol_b,
        &omega,
        &structure.qda,
        &structure.independent_set,
    )
    .map_err(|_| Error::EmptyTruncation {
        alpha: alpha.alpha,
        c: e.radius,
        mc_passing: volume.passing,
        mc_total: volume.total,
    })?;
    Ok(Pipeline {
        relabelled,
        draws,
        alpha,
        q_hat,
        start,
        co,
        i_set: i0,
        structure,
        omega,
        volume,
        sum,
    })
}

/// Full estimate for one `G`. With `prev` from `G − 1` and a compatible
/// prior, the empty-component reduction replaces the direct value when
/// `p̂₀` exceeds the threshold.
pub fn estimate(
    run: &PosteriorRun,
    data: &Dataset,
    cfg: &ThamesConfig,
    prev: Option<&PreviousEstimate>,
) -> Result<ThamesResult> {
    estimate_with_pipeline(run, data, cfg, prev).map(|(r, _)| r)
}

/// [`estimate`] that also hands back the direct pipeline when it ran.
pub fn estimate_with_pipeline(
    run: &PosteriorRun,
    data: &Dataset,
    cfg: &ThamesConfig,
    prev: Option<&PreviousEstimate>,
) -> Result<(ThamesResult, Option<Pipeline>)> {
    let spec = &run.spec;
    let t = run.len();
    let post = LogPosterior::new(spec, data)?;
    let (p0, se_p0) = phat0(&run.draws, &post);
    let se_log_p0 = if p0 > 0.0 { se_p0 / p0 } else { f64::INFINITY };
    let threshold = cfg.empty_threshold.unwrap_or(1.0 / t as f64);
    let reduction = prev.filter(|p| reduction_applicable(&p.spec, spec) && p0 > threshold);

    let direct = run_pipeline(run, data, cfg);
    let direct = match (direct, reduction) {
        (Ok(p), _) => Some(p),
        (Err(e), None) => return Err(e),
        (Err(e), Some(_)) => {
            log::warn!("direct estimate failed ({e}); using the reduction only");
            None
        }
    };
    let direct_z = direct.as_ref().map(|p| {
        let vol_rel = ((p.volume.total - p.volume.passing) as f64
            / (p.volume.passing as f64 * p.volume.total as f64))
            .sqrt();
        (p.sum.log_z, (p.sum.rel_se.powi(2) + vol_rel.powi(2)).sqrt())
    });
    let (log_z, se_log_z, reduced_from) = match reduction {
        Some(prev) => {
            let z = reduce_empty_component(prev.log_z, p0, &spec.hyper.e, data.n())?;
            (
                z,
                (prev.se_log_z.powi(2) + se_log_p0.powi(2)).sqrt(),
                Some(prev.spec.g),
            )
        }
        None => {
            let (z, se) = direct_z.unwrap();
            (z, se, None)
        }
    };
    let r = spec.layout().dim();
    let c_init = cfg.c_init.unwrap_or(((r + 1) as f64).sqrt());
    let mut res = ThamesResult {
        g: spec.g,
        r,
        t,
        log_z,
        se_log_z,
        alpha: f64::NAN,
        q_hat: f64::NAN,
        c_init,
        c_final: f64::NAN,
        log_vol_e: f64::NAN,
        log_vol_b: f64::NAN,
        mc_passing: 0,
        mc_total: 0,
        omega_size: 0,
        ordering_bound: 0,
        i_set: vec![],
        co: 0,
        n_points_in_b: 0,
        n_draws_in_b: 0,
        shrink_steps: 0,
        recentered: false,
        phat0: p0,
        se_log_phat0: se_log_p0,
        log_z_direct: direct_z.map(|d| d.0),
        se_log_z_direct: direct_z.map(|d| d.1),
        reduced_from,
    };
    if let Some(p) = &direct {
        let e = &p.structure.ellipsoid;
        let half = t / 2;
        res.alpha = p.alpha.alpha;
        res.q_hat = p.q_hat;
        res.c_final = e.radius;
        res.log_vol_e = p.volume.log_vol_e;
        res.log_vol_b = p.volume.log_vol_b;
        res.mc_passing = p.volume.passing;
        res.mc_total = p.volume.total;
        res.omega_size = p.omega.len();
        res.ordering_bound = p.structure.bound;
        res.i_set = p.i_set.iter().map(|g| g + 1).collect();
        res.co = p.co;
        res.n_points_in_b = p.sum.n_points_in_b;
        res.n_draws_in_b = p.draws[half..]
            .iter()
            .zip(&run.log_post[half..])
            .filter(|(v, &lp)| lp > p.q_hat && e.contains(v))
            .count();
        res.shrink_steps = p.structure.shrink_steps;
        res.recentered = p.structure.recentered;
    }
    Ok((res, direct))
}

/// Plain (non-symmetrized) truncated harmonic mean on draws that need no
/// relabelling, e.g. single-component models.
pub fn thames_plain(
    draws: &[Vec<f64>],
    log_post: &[f64],
    post: &LogPosterior,
    cfg: &ThamesConfig,
) -> Result<f64> {
    let t = draws.len();
    let half = t / 2;
    let r = draws[0].len();
    let e = fit_ellipsoid(
        &draws[..half],
        cfg.c_init.unwrap_or(((r + 1) as f64).sqrt()),
    );
    let alpha = match cfg.alpha_fixed {
        Some(a) => a,
        None => select_alpha(&log_post[..half], r, cfg).alpha,
    };
    let q_hat = quantile(&log_post[..half], 1.0 - alpha);
    let mc = sample_uniform(&e, cfg.n_mc.unwrap_or(t), cfg.seed);
    let vol = estimate_volume_b(&e, q_hat, &mc, post);
    let counts: Vec<usize> = draws[half..]
        .iter()
        .zip(&log_post[half..])
        .map(|(v, &lp)| usize::from(lp > q_hat && e.contains(v)))
        .collect();
    Ok(finish_sum(counts, &log_post[half..], vol.log_vol_b, 1)?.log_z)
}
