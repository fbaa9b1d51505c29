use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use thames_mix::model::{permute_components, Family, HyperParams, ModelSpec};
use thames_mix::relabel::{compose, ecr_relabel, hungarian, invert, mismatch_cost};
use thames_mix::sampler::PosteriorRun;

/// Three well separated means with scrambled labels in every draw but the first.
fn scrambled_run(seed: u64, t: usize) -> (PosteriorRun, Vec<Vec<usize>>) {
    let spec = ModelSpec::new(Family::UniFixedSigma, 3, 1, HyperParams::fixed_sigma(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = [0usize, 0, 0, 1, 1, 1, 2, 2, 2];
    let (mut draws, mut allocs, mut injected) = (vec![], vec![], vec![]);
    for i in 0..t {
        let base: Vec<f64> = (0..3)
            .map(|k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                10.0 * k as f64 + 0.3 * z
            })
            .collect();
        let mut perm: Vec<usize> = (0..3).collect();
        if i > 0 {
            perm.shuffle(&mut rng);
        }
        let inv = invert(&perm);
        draws.push(permute_components(&spec, &base, &perm));
        allocs.push(truth.iter().map(|&z| inv[z]).collect());
        injected.push(perm);
    }
    let log_post = (0..t).map(|i| -(i as f64)).collect();
    let run = PosteriorRun {
        spec,
        draws,
        log_post,
        allocations: allocs,
        seed,
    };
    (run, injected)
}

#[test]
fn recovers_scrambled_labels() {
    let (run, injected) = scrambled_run(5, 200);
    let rr = ecr_relabel(&run);
    assert_eq!(rr.pivot_index, 0);
    for (t, v) in rr.relabelled_draws().iter().enumerate() {
        for k in 0..3 {
            assert!((v[k] - 10.0 * k as f64).abs() < 2.0, "draw {t}: {v:?}");
        }
        assert_eq!(compose(&injected[t], &rr.perms[t]), vec![0, 1, 2]);
    }
    let pivot = &run.allocations[0];
    assert!(rr.relabelled_allocations().iter().all(|a| a == pivot));
}

#[test]
fn perms_csv_has_one_row_per_draw() {
    let (run, _) = scrambled_run(1, 20);
    let rr = ecr_relabel(&run);
    let mut buf = Vec::new();
    rr.write_perms_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().count() >= 20);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = vec![];
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #[test]
    fn hungarian_is_optimal(n in 1usize..6, vals in prop::collection::vec(0.0f64..10.0, 25)) {
        let cost: Vec<Vec<f64>> = (0..n).map(|i| vals[i * 5..i * 5 + n].to_vec()).collect();
        let total = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
        let got = hungarian(&cost);
        let best = permutations(n).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        prop_assert!((total(&got) - best).abs() < 1e-9);
    }

    #[test]
    fn compose_and_invert(seed in 0u64..1000, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        let id: Vec<usize> = (0..n).collect();
        prop_assert_eq!(compose(&p, &invert(&p)), id.clone());
        prop_assert_eq!(compose(&invert(&p), &p), id);
    }

    #[test]
    fn relabelling_is_label_invariant(seed in 0u64..200) {
        let (run, _) = scrambled_run(seed, 30);
        let a = ecr_relabel(&run).relabelled_draws();
        // scrambling the labels of a non-pivot draw changes nothing
        let mut other = run.clone();
        let p = vec![2, 0, 1];
        other.draws[7] = permute_components(&run.spec, &run.draws[7], &p);
        let inv = invert(&p);
        other.allocations[7] = run.allocations[7].iter().map(|&z| inv[z]).collect();
        prop_assert_eq!(ecr_relabel(&other).relabelled_draws(), a);
    }

    #[test]
    fn mismatch_cost_is_zero_for_matching_labels(alloc in prop::collection::vec(0usize..4, 1..20)) {
        prop_assert_eq!(mismatch_cost(&alloc, &alloc, &[0, 1, 2, 3]), 0);
    }
}
