//! Ordering structure of the relabelled sample: QDA component summaries, the
//! summary measure `W`, the precedence matrix `Δ`, enumeration of the
//! admissible orderings `Ω` and the ordering maps `ψ_o`.
//!
//! An ordering `o` lists component labels from smallest to largest `W`;
//! `ψ_o` puts the component with the `k`-th smallest `W` into slot `o[k]`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    build_overlap_graph, max_independent_set_greedy, sample_uniform, Ellipsoid, OverlapGraph,
};
use crate::linalg::{
    half_log_det, log_sum_exp, mahalanobis_sq, mean_cov, regularized_cholesky, Chol,
};
use crate::model::{permute_components, Layout, ModelSpec};

/// Per-component Gaussian summaries of the component blocks.
#[derive(Clone, Debug)]
pub struct QdaModel {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    chols: Vec<Chol>,
    pub block_dim: usize,
}

/// Fit one Gaussian per component slot from the blocks of `draws`.
pub fn fit_qda(draws: &[&[f64]], layout: &Layout) -> QdaModel {
    let u = layout.block;
    if draws.len() < u + 2 {
        log::warn!(
            "QDA fitted from {} draws per component (block dimension {u}); ridge engaged",
            draws.len()
        );
    }
    let mut means = Vec::with_capacity(layout.g);
    let mut covs = Vec::with_capacity(layout.g);
    let mut chols = Vec::with_capacity(layout.g);
    for comp in 0..layout.g {
        let blocks: Vec<&[f64]> = draws.iter().map(|d| layout.block(d, comp)).collect();
        let (m, s) = mean_cov(&blocks, u);
        let (chol, s, _) = regularized_cholesky(&s, draws.len() < u + 2);
        means.push(m);
        covs.push(s);
        chols.push(chol);
    }
    QdaModel {
        means,
        covs,
        chols,
        block_dim: u,
    }
}

impl QdaModel {
    fn log_density(&self, comp: usize, xi: &[f64]) -> f64 {
        let diff = DVector::from_iterator(
            xi.len(),
            xi.iter().zip(self.means[comp].iter()).map(|(a, b)| a - b),
        );
        -half_log_det(&self.chols[comp]) - 0.5 * mahalanobis_sq(&self.chols[comp], &diff)
    }

    fn mahalanobis(&self, comp: usize, xi: &[f64]) -> f64 {
        let diff = DVector::from_iterator(
            xi.len(),
            xi.iter().zip(self.means[comp].iter()).map(|(a, b)| a - b),
        );
        mahalanobis_sq(&self.chols[comp], &diff)
    }
}

/// Most probable member of `set` for block `xi` and its probability
/// conditional on `set` (equal proportions).
pub fn qda_assign(xi: &[f64], q: &QdaModel, set: &[usize]) -> (usize, f64) {
    debug_assert!(!set.is_empty());
    let ld: Vec<f64> = set.iter().map(|&g| q.log_density(g, xi)).collect();
    let lse = log_sum_exp(&ld);
    if !lse.is_finite() {
        let mut best = set[0];
        let mut bd = f64::INFINITY;
        for &g in set {
            let m = q.mahalanobis(g, xi);
            if m < bd {
                bd = m;
                best = g;
            }
        }
        return (best, 1.0);
    }
    let mut best = 0;
    for k in 1..set.len() {
        if ld[k] > ld[best] {
            best = k;
        }
    }
    (set[best], (ld[best] - lse).exp())
}

/// `W(ξ) = ĝ + 1 − ŵ` with a 1-based label `ĝ`.
pub fn summary_w(xi: &[f64], q: &QdaModel, set: &[usize]) -> f64 {
    let (g, w) = qda_assign(xi, q, set);
    (g + 1) as f64 + 1.0 - w
}

/// `W` of every component block of `v`.
pub fn w_values(v: &[f64], layout: &Layout, q: &QdaModel, set: &[usize]) -> Vec<f64> {
    (0..layout.g)
        .map(|c| summary_w(layout.block(v, c), q, set))
        .collect()
}

/// Slot permutation realizing `ψ_o` for a vector whose blocks have the given
/// `W` values.
pub fn ordering_perm(w: &[f64], o: &[usize]) -> Vec<usize> {
    let mut sorted: Vec<usize> = (0..w.len()).collect();
    sorted.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    let mut perm = vec![0; w.len()];
    for (k, &slot) in o.iter().enumerate() {
        perm[slot] = sorted[k];
    }
    perm
}

/// `ψ_o(v)`.
pub fn apply_ordering(
    spec: &ModelSpec,
    v: &[f64],
    o: &[usize],
    q: &QdaModel,
    set: &[usize],
) -> Vec<f64> {
    let w = w_values(v, &spec.layout(), q, set);
    permute_components(spec, v, &ordering_perm(&w, o))
}

/// `Δ[a][b]` set when `W(ξ_a) < W(ξ_b)` at every check point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeltaMatrix {
    pub g: usize,
    pub entries: Vec<Vec<bool>>,
}

impl DeltaMatrix {
    pub fn empty(g: usize) -> Self {
        DeltaMatrix {
            g,
            entries: vec![vec![false; g]; g],
        }
    }

    pub fn from_edges(g: usize, edges: &[(usize, usize)]) -> Self {
        let mut d = Self::empty(g);
        for &(a, b) in edges {
            d.entries[a][b] = true;
        }
        d
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for a in 0..self.g {
            for b in 0..self.g {
                if self.entries[a][b] {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Some directed cycle as a list of edges, if one exists.
    pub fn find_cycle(&self) -> Option<Vec<(usize, usize)>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        fn dfs(
            d: &DeltaMatrix,
            v: usize,
            state: &mut [u8],
            stack: &mut Vec<usize>,
        ) -> Option<Vec<(usize, usize)>> {
            state[v] = 1;
            stack.push(v);
            for w in 0..d.g {
                if !d.entries[v][w] {
                    continue;
                }
                if state[w] == 1 {
                    let start = stack.iter().position(|&x| x == w).unwrap();
                    let mut cyc: Vec<(usize, usize)> =
                        stack[start..].windows(2).map(|p| (p[0], p[1])).collect();
                    cyc.push((v, w));
                    return Some(cyc);
                }
                if state[w] == 0 {
                    if let Some(c) = dfs(d, w, state, stack) {
                        return Some(c);
                    }
                }
            }
            stack.pop();
            state[v] = 2;
            None
        }
        let mut state = vec![0u8; self.g];
        for v in 0..self.g {
            if state[v] == 0 {
                let mut stack = vec![];
                if let Some(c) = dfs(self, v, &mut state, &mut stack) {
                    return Some(c);
                }
            }
        }
        None
    }

    pub fn is_acyclic(&self) -> bool {
        self.find_cycle().is_none()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph delta_G{} {{", self.g);
        for v in 0..self.g {
            let _ = writeln!(s, "  {};", v + 1);
        }
        for (a, b) in self.edges() {
            let _ = writeln!(s, "  {} -> {};", a + 1, b + 1);
        }
        s.push_str("}\n");
        s
    }
}

/// Precedence matrix from `W` evaluated at the check points. Overlapping
/// pairs never get an entry; any cycle left by sampling noise is broken by
/// removing its smallest-margin edge.
pub fn build_delta(
    points: &[Vec<f64>],
    layout: &Layout,
    q: &QdaModel,
    set: &[usize],
    overlap: &OverlapGraph,
) -> DeltaMatrix {
    let g = layout.g;
    if points.is_empty() {
        return DeltaMatrix::empty(g);
    }
    // margin[a][b] = min over points of W_b − W_a
    let margin = points
        .par_iter()
        .map(|p| {
            let w = w_values(p, layout, q, set);
            let mut m = vec![vec![f64::INFINITY; g]; g];
            for a in 0..g {
                for b in 0..g {
                    m[a][b] = w[b] - w[a];
                }
            }
            m
        })
        .reduce(
            || vec![vec![f64::INFINITY; g]; g],
            |mut x, y| {
                for a in 0..g {
                    for b in 0..g {
                        x[a][b] = x[a][b].min(y[a][b]);
                    }
                }
                x
            },
        );
    let mut delta = DeltaMatrix::empty(g);
    for a in 0..g {
        for b in 0..g {
            delta.entries[a][b] = a != b && !overlap.has_edge(a, b) && margin[a][b] > 0.0;
        }
    }
    while let Some(cycle) = delta.find_cycle() {
        let &(a, b) = cycle
            .iter()
            .min_by(|x, y| margin[x.0][x.1].total_cmp(&margin[y.0][y.1]))
            .unwrap();
        log::warn!("precedence cycle detected; dropping {} -> {}", a + 1, b + 1);
        delta.entries[a][b] = false;
    }
    delta
}

/// Sentinel returned by [`ordering_bound`] when the bound overflows.
pub const BOUND_SATURATED: u64 = u64::MAX;

/// `G!/L!` where `L` is the number of vertices on the longest directed path.
pub fn ordering_bound(delta: &DeltaMatrix) -> u64 {
    let g = delta.g;
    let l = longest_path_vertices(delta);
    let mut out: u64 = 1;
    for k in (l + 1)..=g {
        out = out.saturating_mul(k as u64);
    }
    out
}

fn longest_path_vertices(delta: &DeltaMatrix) -> usize {
    let g = delta.g;
    if g == 0 {
        return 0;
    }
    let order = match topological_order(delta) {
        Some(o) => o,
        None => return 1,
    };
    let mut best = vec![1usize; g];
    for &v in order.iter().rev() {
        for w in 0..g {
            if delta.entries[v][w] {
                best[v] = best[v].max(best[w] + 1);
            }
        }
    }
    best.into_iter().max().unwrap()
}

fn topological_order(delta: &DeltaMatrix) -> Option<Vec<usize>> {
    let g = delta.g;
    let mut indeg: Vec<usize> = (0..g)
        .map(|b| (0..g).filter(|&a| delta.entries[a][b]).count())
        .collect();
    let mut out = Vec::with_capacity(g);
    let mut ready: Vec<usize> = (0..g).filter(|&v| indeg[v] == 0).collect();
    while let Some(v) = ready.pop() {
        out.push(v);
        for w in 0..g {
            if delta.entries[v][w] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.push(w);
                }
            }
        }
    }
    (out.len() == g).then_some(out)
}

/// All topological orderings of `Δ`, in lexicographic order.
pub fn enumerate_orderings(delta: &DeltaMatrix, cap: usize) -> Result<Vec<Vec<usize>>> {
    if !delta.is_acyclic() {
        return Err(Error::Numerical("precedence matrix has a cycle".into()));
    }
    let g = delta.g;
    let mut indeg: Vec<usize> = (0..g)
        .map(|b| (0..g).filter(|&a| delta.entries[a][b]).count())
        .collect();
    let mut placed = vec![false; g];
    let mut current = Vec::with_capacity(g);
    let mut out = Vec::new();

    fn rec(
        delta: &DeltaMatrix,
        indeg: &mut [usize],
        placed: &mut [bool],
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        cap: usize,
    ) -> Result<()> {
        let g = delta.g;
        if current.len() == g {
            if out.len() >= cap {
                return Err(Error::Numerical(format!(
                    "more than {cap} admissible orderings"
                )));
            }
            out.push(current.clone());
            return Ok(());
        }
        for v in 0..g {
            if placed[v] || indeg[v] != 0 {
                continue;
            }
            placed[v] = true;
            current.push(v);
            for w in 0..g {
                if delta.entries[v][w] {
                    indeg[w] -= 1;
                }
            }
            rec(delta, indeg, placed, current, out, cap)?;
            for w in 0..g {
                if delta.entries[v][w] {
                    indeg[w] += 1;
                }
            }
            current.pop();
            placed[v] = false;
        }
        Ok(())
    }

    rec(delta, &mut indeg, &mut placed, &mut current, &mut out, cap)?;
    Ok(out)
}

/// Everything the efficient estimator needs from the ordering stage.
#[derive(Clone, Debug)]
pub struct OrderingStructure {
    pub ellipsoid: Ellipsoid,
    pub qda: QdaModel,
    pub overlap: OverlapGraph,
    pub independent_set: Vec<usize>,
    pub delta: DeltaMatrix,
    pub bound: u64,
    pub mc_sample: Vec<Vec<f64>>,
    pub shrink_steps: usize,
    pub recentered: bool,
}

/// Inputs to [`shrink_until_tractable`] besides the starting ellipsoid.
pub struct ShrinkContext<'a> {
    pub spec: &'a ModelSpec,
    pub second_half: &'a [Vec<f64>],
    pub second_half_log_post: &'a [f64],
    pub threshold: u64,
    pub n_mc: usize,
    pub seed: u64,
    /// Permuted draws that fall inside the ellipsoid are added to the `Δ`
    /// check points when `G! ≤ extra_checkpoint_limit`.
    pub extra_checkpoint_limit: u64,
}

const MAX_SHRINK_STEPS: usize = 64;

/// Check points for `Δ`: the Monte Carlo sample plus every relabelled draw,
/// or every label permutation of it when `G!` is small, that lies in the
/// ellipsoid.
pub fn delta_checkpoints(ctx: &ShrinkContext<'_>, e: &Ellipsoid, mc: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = ctx.spec.g;
    let fact = (1..=g as u64).try_fold(1u64, |acc, k| acc.checked_mul(k));
    let perms = match fact {
        Some(f) if f <= ctx.extra_checkpoint_limit => all_permutations(g),
        _ => vec![(0..g).collect()],
    };
    let extra: Vec<Vec<f64>> = ctx
        .second_half
        .par_iter()
        .flat_map_iter(|v| {
            perms
                .iter()
                .map(|p| permute_components(ctx.spec, v, p))
                .filter(|pv| e.contains(pv))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut pts = mc.to_vec();
    pts.extend(extra);
    pts
}

/// All permutations of `0..g` in lexicographic order.
pub fn all_permutations(g: usize) -> Vec<Vec<usize>> {
    enumerate_orderings(&DeltaMatrix::empty(g), usize::MAX).expect("empty precedence is acyclic")
}

/// Build `Δ` on the starting ellipsoid and halve the radius until the
/// ordering bound is at most the threshold. If no second-half draw remains
/// inside, the ellipsoid is recentred at the second-half MAP draw and QDA is
/// refitted on the draws inside from then on. The Monte Carlo sample, the
/// overlap graph and the independent set are refreshed after every change.
pub fn shrink_until_tractable(
    ctx: &ShrinkContext<'_>,
    start: &Ellipsoid,
    qda: QdaModel,
    mc_sample: Vec<Vec<f64>>,
) -> Result<OrderingStructure> {
    let layout = ctx.spec.layout();
    let overlap = build_overlap_graph(start, &layout);
    let set = max_independent_set_greedy(&overlap);
    let pts = delta_checkpoints(ctx, start, &mc_sample);
    let delta = build_delta(&pts, &layout, &qda, &set, &overlap);
    let bound = ordering_bound(&delta);
    let mut st = OrderingStructure {
        ellipsoid: start.clone(),
        qda,
        overlap,
        independent_set: set,
        delta,
        bound,
        mc_sample,
        shrink_steps: 0,
        recentered: false,
    };
    while st.bound > ctx.threshold {
        if st.shrink_steps >= MAX_SHRINK_STEPS {
            return Err(Error::Numerical(format!(
                "ordering bound still {} after {MAX_SHRINK_STEPS} radius halvings",
                st.bound
            )));
        }
        st.shrink_steps += 1;
        let mut e = st.ellipsoid.with_radius(st.ellipsoid.radius / 2.0);
        let mut inside: Vec<&[f64]> = ctx
            .second_half
            .iter()
            .filter(|v| e.contains(v))
            .map(|v| v.as_slice())
            .collect();
        if inside.is_empty() {
            let map = crate::linalg::argmax(ctx.second_half_log_post);
            e = e.with_center(DVector::from_column_slice(&ctx.second_half[map]));
            st.recentered = true;
            inside = ctx
                .second_half
                .iter()
                .filter(|v| e.contains(v))
                .map(|v| v.as_slice())
                .collect();
            log::info!("ellipsoid recentred at the second-half MAP draw");
        }
        if st.recentered {
            st.qda = fit_qda(&inside, &layout);
        }
        st.mc_sample = sample_uniform(&e, ctx.n_mc, ctx.seed.wrapping_add(st.shrink_steps as u64));
        st.overlap = build_overlap_graph(&e, &layout);
        st.independent_set = max_independent_set_greedy(&st.overlap);
        let pts = delta_checkpoints(ctx, &e, &st.mc_sample);
        st.delta = build_delta(&pts, &layout, &st.qda, &st.independent_set, &st.overlap);
        st.bound = ordering_bound(&st.delta);
        st.ellipsoid = e;
        log::info!(
            "radius halved to {:.4e}; ordering bound {}",
            st.ellipsoid.radius,
            st.bound
        );
    }
    Ok(st)
}

/// CSV of orderings, one per line, 1-based space-separated labels.
pub fn orderings_csv(omega: &[Vec<usize>]) -> String {
    let mut s = String::from("index,ordering\n");
    for (i, o) in omega.iter().enumerate() {
        let labels: Vec<String> = o.iter().map(|x| (x + 1).to_string()).collect();
        let _ = writeln!(s, "{},{}", i + 1, labels.join(" "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qda_1d(means: &[f64]) -> QdaModel {
        let layout = Layout {
            g: means.len(),
            block: 1,
            n_tau: 0,
        };
        // two draws per component at m ± 1 give unit variance
        let draws: Vec<Vec<f64>> = vec![
            means.iter().map(|m| m - 1.0).collect(),
            means.iter().map(|m| m + 1.0).collect(),
        ];
        let refs: Vec<&[f64]> = draws.iter().map(|d| d.as_slice()).collect();
        let mut q = fit_qda(&refs, &layout);
        for c in 0..means.len() {
            q.covs[c] = DMatrix::from_element(1, 1, 1.0);
            q.chols[c] = nalgebra::Cholesky::new(q.covs[c].clone()).unwrap();
        }
        q
    }

    #[test]
    fn qda_constant_draws() {
        let layout = Layout {
            g: 2,
            block: 2,
            n_tau: 0,
        };
        let draws = vec![vec![1.0, 2.0, 3.0, 4.0]; 10];
        let refs: Vec<&[f64]> = draws.iter().map(|d| d.as_slice()).collect();
        let q = fit_qda(&refs, &layout);
        assert_eq!(q.means[1].as_slice(), &[3.0, 4.0]);
        assert_eq!(q.covs[0], DMatrix::identity(2, 2) * 1e-8);
    }

    #[test]
    fn assignment_examples() {
        let q = qda_1d(&[0.0, 10.0]);
        let (g, w) = qda_assign(&[0.0], &q, &[0, 1]);
        assert_eq!(g, 0);
        assert!((w - 1.0).abs() < 1e-12);
        let (g, w) = qda_assign(&[5.0], &q, &[0, 1]);
        assert_eq!(g, 0);
        assert!((w - 0.5).abs() < 1e-12);
        assert!((summary_w(&[5.0], &q, &[0, 1]) - 1.5).abs() < 1e-12);
        assert!((summary_w(&[10.0], &q, &[0, 1]) - 2.0).abs() < 1e-12);
        // both densities underflow to zero: fall back to a valid member
        let (g, w) = qda_assign(&[-1e300], &q, &[0, 1]);
        assert_eq!((g, w), (0, 1.0));
    }

    #[test]
    fn delta_far_components() {
        let layout = Layout {
            g: 2,
            block: 1,
            n_tau: 0,
        };
        let q = qda_1d(&[0.0, 100.0]);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![i as f64 * 0.01, 100.0 - i as f64 * 0.01])
            .collect();
        let d = build_delta(&pts, &layout, &q, &[0, 1], &OverlapGraph::new(2, vec![]));
        assert!(d.entries[0][1] && !d.entries[1][0]);
        let d = build_delta(
            &pts,
            &layout,
            &q,
            &[0, 1],
            &OverlapGraph::new(2, vec![(0, 1)]),
        );
        assert_eq!(d, DeltaMatrix::empty(2));
        let single = build_delta(
            &[vec![0.0]],
            &Layout {
                g: 1,
                block: 1,
                n_tau: 0,
            },
            &qda_1d(&[0.0]),
            &[0],
            &OverlapGraph::new(1, vec![]),
        );
        assert_eq!(single, DeltaMatrix::empty(1));
    }

    #[test]
    fn bound_examples() {
        let chain = DeltaMatrix::from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(ordering_bound(&chain), 1);
        assert_eq!(ordering_bound(&DeltaMatrix::empty(4)), 24);
        let three = DeltaMatrix::from_edges(5, &[(0, 1), (1, 2)]);
        assert_eq!(ordering_bound(&three), 20);
        assert_eq!(ordering_bound(&DeltaMatrix::empty(25)), BOUND_SATURATED);
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(
            enumerate_orderings(&DeltaMatrix::empty(3), 100)
                .unwrap()
                .len(),
            6
        );
        let chain = DeltaMatrix::from_edges(3, &[(0, 1), (1, 2)]);
        assert_eq!(
            enumerate_orderings(&chain, 100).unwrap(),
            vec![vec![0, 1, 2]]
        );
        let one = DeltaMatrix::from_edges(3, &[(0, 1)]);
        assert_eq!(
            enumerate_orderings(&one, 100).unwrap(),
            vec![vec![0, 1, 2], vec![0, 2, 1], vec![2, 0, 1]]
        );
        assert!(enumerate_orderings(&DeltaMatrix::empty(4), 10).is_err());
        assert_eq!(all_permutations(3)[1], vec![0, 2, 1]);
    }

    #[test]
    fn cycles_are_broken() {
        let layout = Layout {
            g: 3,
            block: 1,
            n_tau: 0,
        };
        let q = qda_1d(&[0.0, 10.0, 20.0]);
        let d = build_delta(
            &[vec![0.0, 10.0, 20.0]],
            &layout,
            &q,
            &[0, 1, 2],
            &OverlapGraph::new(3, vec![]),
        );
        assert!(d.is_acyclic());
        let cyc = DeltaMatrix::from_edges(3, &[(0, 1), (1, 2), (2, 0)]);
        assert!(cyc.find_cycle().is_some());
    }

    #[test]
    fn ordering_maps() {
        let spec = ModelSpec::new(
            crate::model::Family::UniFixedSigma,
            2,
            1,
            crate::model::HyperParams::fixed_sigma(2),
        )
        .unwrap();
        let q = qda_1d(&[0.0, 10.0]);
        let set = [0, 1];
        let sorted = vec![0.2, 9.7];
        assert_eq!(apply_ordering(&spec, &sorted, &[0, 1], &q, &set), sorted);
        let swapped = vec![9.7, 0.2];
        assert_eq!(apply_ordering(&spec, &swapped, &[0, 1], &q, &set), sorted);
        assert_eq!(apply_ordering(&spec, &swapped, &[1, 0], &q, &set), swapped);
    }

    #[test]
    fn dot_and_csv() {
        let d = DeltaMatrix::from_edges(2, &[(0, 1)]);
        assert_eq!(d.to_dot(), "digraph delta_G2 {\n  1;\n  2;\n  1 -> 2;\n}\n");
        assert_eq!(orderings_csv(&[vec![1, 0]]), "index,ordering\n1,2 1\n");
    }
}
