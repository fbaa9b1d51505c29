//! Label-switching removal with the equivalence-classes-representatives (ECR)
//! algorithm against a MAP pivot.
//!
//! Permutations use the slot convention of [`permute_components`]: `perm[k]`
//! is the original component that ends up in slot `k` (0-based).

use std::io::Write;

use rayon::prelude::*;

use crate::error::Result;
use crate::linalg::argmax;
use crate::model::permute_components;
use crate::sampler::PosteriorRun;

#[derive(Clone, Debug, PartialEq)]
pub struct RelabelledRun {
    pub base: PosteriorRun,
    pub perms: Vec<Vec<usize>>,
    pub pivot_index: usize,
}

/// Index of the MAP draw; ties go to the smallest index.
pub fn choose_pivot(run: &PosteriorRun) -> usize {
    argmax(&run.log_post)
}

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian method
/// with potentials). Returns `assign[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return vec![];
    }
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Number of observations whose label after applying `perm` disagrees with
/// the pivot allocation.
pub fn mismatch_cost(alloc: &[usize], pivot: &[usize], perm: &[usize]) -> usize {
    let inv = invert(perm);
    alloc
        .iter()
        .zip(pivot)
        .filter(|(&z, &p)| inv[z] != p)
        .count()
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (slot, &src) in perm.iter().enumerate() {
        inv[src] = slot;
    }
    inv
}

/// Compose slot permutations: applying `first` and then `second` equals
/// applying `compose(first, second)` once.
pub fn compose(first: &[usize], second: &[usize]) -> Vec<usize> {
    second.iter().map(|&s| first[s]).collect()
}

/// ECR relabelling. For every draw, the permutation minimizing label
/// disagreement with the pivot allocation is found as an assignment
/// problem. Ties in the count are broken by squared distance between the
/// component blocks and the pivot blocks, scaled so that it never outweighs
/// a single disagreement.
pub fn ecr_relabel(run: &PosteriorRun) -> RelabelledRun {
    let g = run.spec.g;
    let layout = run.spec.layout();
    let pivot_index = choose_pivot(run);
    if run.allocations.is_empty() {
        log::warn!("run carries no allocations; relabelling by block distance only");
    }
    let pivot_alloc = run
        .allocations
        .get(pivot_index)
        .cloned()
        .unwrap_or_default();
    let pivot_draw = &run.draws[pivot_index];
    let dist2 = |draw: &[f64], j: usize, k: usize| -> f64 {
        layout
            .block(draw, j)
            .iter()
            .zip(layout.block(pivot_draw, k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let perms: Vec<Vec<usize>> = (0..run.len())
        .into_par_iter()
        .map(|t| {
            if t == pivot_index || g == 1 {
                return (0..g).collect();
            }
            let draw = &run.draws[t];
            let mut cost = vec![vec![0.0; g]; g];
            if let Some(alloc) = run.allocations.get(t) {
                let mut counts = vec![vec![0usize; g]; g];
                let mut sizes = vec![0usize; g];
                for (&z, &p) in alloc.iter().zip(&pivot_alloc) {
                    counts[z][p] += 1;
                    sizes[z] += 1;
                }
                for j in 0..g {
                    for k in 0..g {
                        cost[j][k] = (sizes[j] - counts[j][k]) as f64;
                    }
                }
            }
            let dists: Vec<Vec<f64>> = (0..g)
                .map(|j| (0..g).map(|k| dist2(draw, j, k)).collect())
                .collect();
            let max_d = dists.iter().flatten().copied().fold(0.0, f64::max);
            let eps = if max_d > 0.0 && max_d.is_finite() {
                0.4 / (g as f64 * max_d)
            } else {
                0.0
            };
            for j in 0..g {
                for k in 0..g {
                    cost[j][k] += eps * dists[j][k];
                }
            }
            // assign[j] = new slot of old component j
            invert(&hungarian(&cost))
        })
        .collect();
    RelabelledRun {
        base: run.clone(),
        perms,
        pivot_index,
    }
}

impl RelabelledRun {
    /// Relabelled draws, one `permute_components` per draw.
    pub fn relabelled_draws(&self) -> Vec<Vec<f64>> {
        apply_relabelling(self)
    }

    /// Allocations expressed in the relabelled component slots.
    pub fn relabelled_allocations(&self) -> Vec<Vec<usize>> {
        self.base
            .allocations
            .iter()
            .zip(&self.perms)
            .map(|(alloc, perm)| {
                let inv = invert(perm);
                alloc.iter().map(|&z| inv[z]).collect()
            })
            .collect()
    }

    /// CSV with one line per draw: `t,perm` (1-based, space separated).
    pub fn write_perms_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,perm")?;
        for (t, perm) in self.perms.iter().enumerate() {
            let labels: Vec<String> = perm.iter().map(|p| (p + 1).to_string()).collect();
            writeln!(w, "{},{}", t + 1, labels.join(" "))?;
        }
        Ok(())
    }
}

pub fn apply_relabelling(rr: &RelabelledRun) -> Vec<Vec<f64>> {
    let spec = &rr.base.spec;
    rr.base
        .draws
        .iter()
        .zip(&rr.perms)
        .map(|(d, p)| permute_components(spec, d, p))
        .collect()
}
