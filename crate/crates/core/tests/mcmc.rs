mod common;

use std::collections::HashMap;

use common::*;
use rand::Rng;
use sparse_unmix::mcmc::{
    acceptance_probability, energy, propose, run_rjmcmc, run_rjmcmc_observed, McmcConfig, MoveKind,
    Proposal,
};
use sparse_unmix::solver::SolverConfig;
use sparse_unmix::{seeded_rng, Dataset, Spectrum};

fn pixels(v: &[Vec<f64>]) -> Dataset {
    Dataset::new(
        v.iter()
            .map(|p| Spectrum::new(p.clone()).unwrap())
            .collect(),
    )
}

#[test]
fn boundary_moves_are_forced() {
    let mut rng = seeded_rng(31);
    for _ in 0..1000 {
        let p = propose(&[4], 10, 5, &mut rng).unwrap();
        assert_eq!(p.kind, MoveKind::Birth);
        assert_ne!(p.index, 4);
        assert!((p.forward_probability - 1.0 / 9.0).abs() < 1e-15);
        let p = propose(&[0, 2, 4, 6, 8], 10, 5, &mut rng).unwrap();
        assert_eq!(p.kind, MoveKind::Death);
        assert!([0, 2, 4, 6, 8].contains(&p.index));
        // Whole pool in use: only deaths remain.
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(
            propose(&all, 6, 150, &mut rng).unwrap().kind,
            MoveKind::Death
        );
    }
    assert!(propose(&[0], 1, 150, &mut rng).is_none());
    assert!(propose(&[3], 10, 1, &mut rng).is_none());
}

#[test]
fn interior_proposal_frequencies() {
    let mut rng = seeded_rng(32);
    let subset = [1usize, 3, 4, 8];
    let p = 12;
    let n = 100_000;
    let mut births = 0usize;
    let mut born = HashMap::new();
    let mut died = HashMap::new();
    for _ in 0..n {
        let prop = propose(&subset, p, 10, &mut rng).unwrap();
        match prop.kind {
            MoveKind::Birth => {
                births += 1;
                assert!(!subset.contains(&prop.index) && prop.index < p);
                assert!((prop.forward_probability - 0.5 / 8.0).abs() < 1e-15);
                *born.entry(prop.index).or_insert(0usize) += 1;
            }
            MoveKind::Death => {
                assert!(subset.contains(&prop.index));
                assert!((prop.forward_probability - 0.5 / 4.0).abs() < 1e-15);
                *died.entry(prop.index).or_insert(0usize) += 1;
            }
        }
    }
    let freq = births as f64 / n as f64;
    assert!((freq - 0.5).abs() <= 0.01, "birth frequency {freq}");
    let check = |counts: &HashMap<usize, usize>, total: usize, cells: usize| {
        assert_eq!(counts.len(), cells);
        let q = 1.0 / cells as f64;
        let se = (q * (1.0 - q) / total as f64).sqrt();
        for (&i, &c) in counts {
            let f = c as f64 / total as f64;
            assert!((f - q).abs() <= 3.0 * se + 1e-12, "index {i}: {f} vs {q}");
        }
    };
    check(&born, births, 8);
    check(&died, n - births, 4);
}

fn birth(k: usize, p: usize, upper: usize) -> Proposal {
    let b = if k <= 1 { 1.0 } else { 0.5 };
    let _ = upper;
    Proposal {
        kind: MoveKind::Birth,
        index: 0,
        forward_probability: b / (p - k) as f64,
    }
}

#[test]
fn acceptance_identities() {
    let huge = McmcConfig {
        prior_lambda: 1e12,
        ..Default::default()
    };
    assert_eq!(
        acceptance_probability(0.0, &birth(3, 20, 150), 3, 20, 1.0, &huge),
        1.0
    );

    // lambda = K + 1 and P - K = K + 1: every factor cancels.
    let k = 4;
    let cfg = McmcConfig {
        prior_lambda: (k + 1) as f64,
        ..Default::default()
    };
    let a = acceptance_probability(0.0, &birth(k, 2 * k + 1, 150), k, 2 * k + 1, 1.0, &cfg);
    assert!((a - 1.0).abs() < 1e-12);

    // Birth and the reverse death have reciprocal ratios.
    let cfg = McmcConfig {
        prior_lambda: 2.5,
        max_elements: 6,
        ..Default::default()
    };
    let p = 9;
    let temp = 0.7;
    for k in 1..6 {
        for du in [-0.3, 0.0, 0.4] {
            let b = Proposal {
                kind: MoveKind::Birth,
                index: 0,
                forward_probability: 0.0,
            };
            let d = Proposal {
                kind: MoveKind::Death,
                index: 0,
                forward_probability: 0.0,
            };
            let ab = acceptance_probability(du, &b, k, p, temp, &cfg);
            let ad = acceptance_probability(-du, &d, k + 1, p, temp, &cfg);
            // min(1, r) / min(1, 1/r) = r
            let bk = if k == 1 { 1.0 } else { 0.5 };
            let dk1 = if k + 1 == 6 { 1.0 } else { 0.5 };
            let r = (-du / temp).exp() * 2.5 / (k + 1) as f64 * dk1 / bk * (p - k) as f64
                / (k + 1) as f64;
            assert!((ab / ad - r).abs() <= 1e-12 * r.max(1.0), "k={k} du={du}");
        }
    }
    // Beyond the bound nothing is accepted.
    assert_eq!(
        acceptance_probability(-5.0, &birth(6, 9, 6), 6, 9, 1.0, &cfg),
        0.0
    );
}

#[test]
fn energy_examples() {
    let mut rng = seeded_rng(33);
    let atoms = random_vectors(&mut rng, 6, 15);
    let lib = library_from(&atoms);
    let cfg = SolverConfig::default();
    let exact = pixels(&[atoms[1].clone(), atoms[3].clone(), atoms[1].clone()]);
    assert!(energy(&lib, &[1, 3, 5], &exact, &cfg).unwrap() < 1e-12);

    let x: Vec<f64> = (0..15).map(|_| gaussian(&mut rng)).collect();
    let one = library_from(&atoms[..1]);
    let e = energy(&one, &[0], &pixels(std::slice::from_ref(&x)), &cfg).unwrap();
    assert!((e - dist(&x, &atoms[0])).abs() < 1e-12);
    assert!(energy(&lib, &[], &exact, &cfg).is_err());

    let mixed: Vec<Vec<f64>> = (0..20)
        .map(|_| mixture(&mut rng, &atoms, &[0, 1, 2, 3, 4, 5]))
        .collect();
    let sub = [0usize, 2, 3, 5];
    let sub_atoms: Vec<Vec<f64>> = sub.iter().map(|&j| atoms[j].clone()).collect();
    let got = energy(&lib, &sub, &pixels(&mixed), &SolverConfig::with_sparsity(3)).unwrap();
    let want = energy_oracle(&sub_atoms, &mixed, 3);
    assert!(
        (got - want).abs() <= 1e-9 * want.max(1.0),
        "{got} vs {want}"
    );
}

#[test]
fn trivial_chains() {
    let mut rng = seeded_rng(34);
    let atoms = random_vectors(&mut rng, 3, 5);
    let lib = library_from(&atoms);
    let eval = pixels(&vec![atoms[0].clone(); 4]);
    let cfg = McmcConfig {
        prior_lambda: 1.0,
        iterations: 300,
        ..Default::default()
    };
    let out = run_rjmcmc(&lib, &eval, &cfg).unwrap();
    assert!(out.best_subset.contains(&0));
    assert!(out.best_energy < 1e-12);

    let idle = McmcConfig {
        iterations: 0,
        prior_lambda: 2.0,
        seed: 5,
        ..Default::default()
    };
    let out = run_rjmcmc(&lib, &eval, &idle).unwrap();
    assert_eq!(out.best_subset, out.final_state.subset);
    assert_eq!(out.final_state.subset.len(), 2);
    let e = energy(&lib, &out.best_subset, &eval, &idle.solver()).unwrap();
    assert_eq!(out.best_energy, e);
    assert!(out.trace.records.is_empty());
}

/// Lowest-energy subset (ties to the smaller size, then lexicographic) by
/// enumerating every subset with at most `max_k` elements.
fn exhaustive_optimum(
    atoms: &[Vec<f64>],
    eval: &Dataset,
    max_k: usize,
    w: usize,
) -> (Vec<usize>, f64) {
    let lib = library_from(atoms);
    let cfg = SolverConfig::with_sparsity(w);
    let norm = eval
        .pixels
        .iter()
        .flat_map(|p| p.values())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let tie = 1e-10 * norm;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in subsets(atoms.len(), max_k) {
        let e = energy(&lib, &s, eval, &cfg).unwrap();
        let better = match &best {
            None => true,
            Some((bs, be)) => e < be - tie || (e <= be + tie && s.len() < bs.len()),
        };
        if better {
            best = Some((s, e));
        }
    }
    best.unwrap()
}

#[test]
fn planted_pair_is_found() {
    let mut rng = seeded_rng(35);
    let atoms: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..12).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let eval = pixels(
        &(0..15)
            .map(|_| mixture(&mut rng, &atoms, &[3, 7]))
            .collect::<Vec<_>>(),
    );
    let (oracle, e) = exhaustive_optimum(&atoms, &eval, 4, 7);
    assert_eq!(oracle, vec![3, 7]);
    assert!(e < 1e-9);
    let cfg = McmcConfig {
        prior_lambda: 2.0,
        seed: 1,
        ..Default::default()
    };
    let out = run_rjmcmc(&library_from(&atoms), &eval, &cfg).unwrap();
    assert_eq!(out.best_subset, vec![3, 7]);
    assert!(out.best_energy < 1e-9);
    assert_eq!(out.best_library.len(), 2);
    assert_eq!(out.best_library.get(1).unwrap().source_id, "a7");
}

#[test]
fn chain_invariants_and_cache_consistency() {
    let mut rng = seeded_rng(36);
    let inst = planted_instance(&mut rng, 12, 10, 3, 25);
    let pool = library_from(&inst.atoms);
    let noisy: Vec<Vec<f64>> = inst
        .pixels
        .iter()
        .map(|p| p.iter().map(|v| v + 0.01 * gaussian(&mut rng)).collect())
        .collect();
    let eval = pixels(&noisy);
    for incremental in [false, true] {
        let cfg = McmcConfig {
            prior_lambda: 4.0,
            max_elements: 6,
            iterations: 2000,
            seed: 7,
            incremental,
            ..Default::default()
        };
        let mut last_temp = f64::INFINITY;
        let mut checks = 0;
        let out = run_rjmcmc_observed(&pool, &eval, &cfg, |s| {
            assert!(!s.is_empty() && s.len() <= 6);
            assert!(s.subset.windows(2).all(|w| w[0] < w[1]));
            assert!(s.temperature < last_temp && s.temperature > 0.0);
            last_temp = s.temperature;
            if s.step % 100 == 0 {
                let fresh = energy(&pool, &s.subset, &eval, &cfg.solver()).unwrap();
                assert!(
                    (s.energy - fresh).abs() <= 1e-9 * fresh.max(1e-300),
                    "step {}",
                    s.step
                );
                checks += 1;
            }
        })
        .unwrap();
        assert_eq!(checks, 20);
        let recs = &out.trace.records;
        assert_eq!(recs.len(), 2000);
        let min = recs.iter().map(|r| r.energy).fold(f64::INFINITY, f64::min);
        let tie = 1e-10 * noisy.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(out.best_energy <= min + tie && out.best_energy >= min - tie);
        for w in out.trace.best_history.windows(2) {
            assert!(w[1] <= w[0] + tie);
        }
        let fresh = energy(&pool, &out.best_subset, &eval, &cfg.solver()).unwrap();
        assert!((fresh - out.best_energy).abs() <= 1e-9 * fresh);
        let again = run_rjmcmc(&pool, &eval, &cfg).unwrap();
        assert_eq!(again.trace.to_delimited(), out.trace.to_delimited());
    }
}

#[test]
fn incremental_mode_matches_full_recomputation() {
    let mut rng = seeded_rng(37);
    let inst = planted_instance(&mut rng, 15, 12, 4, 30);
    let pool = library_from(&inst.atoms);
    let noisy: Vec<Vec<f64>> = inst
        .pixels
        .iter()
        .map(|p| p.iter().map(|v| v + 0.02 * gaussian(&mut rng)).collect())
        .collect();
    let eval = pixels(&noisy);
    let base = McmcConfig {
        prior_lambda: 6.0,
        iterations: 1500,
        seed: 3,
        energy_cache: false,
        ..Default::default()
    };
    let full = run_rjmcmc(&pool, &eval, &base).unwrap();
    let inc = run_rjmcmc(
        &pool,
        &eval,
        &McmcConfig {
            incremental: true,
            ..base.clone()
        },
    )
    .unwrap();
    let cached = run_rjmcmc(
        &pool,
        &eval,
        &McmcConfig {
            energy_cache: true,
            ..base.clone()
        },
    )
    .unwrap();
    assert_eq!(full.trace.to_delimited(), cached.trace.to_delimited());
    assert_eq!(full.trace.records.len(), inc.trace.records.len());
    for (a, b) in full.trace.records.iter().zip(&inc.trace.records) {
        assert_eq!(
            (a.k, a.kind, a.accepted),
            (b.k, b.kind, b.accepted),
            "step {}",
            a.step
        );
        assert!((a.energy - b.energy).abs() <= 1e-9 * a.energy.max(1e-300));
    }
    assert_eq!(full.best_subset, inc.best_subset);
}

#[test]
fn class_coverage_is_enforced_when_requested() {
    let mut rng = seeded_rng(38);
    let inst = planted_instance(&mut rng, 12, 8, 2, 10);
    let pool = library_from(&inst.atoms);
    let eval = pixels(&inst.pixels);
    let cfg = McmcConfig {
        prior_lambda: 2.0,
        iterations: 1500,
        require_all_classes: true,
        ..Default::default()
    };
    run_rjmcmc_observed(&pool, &eval, &cfg, |s| {
        let classes: std::collections::BTreeSet<usize> = s.subset.iter().map(|j| j % 4).collect();
        assert_eq!(classes.len(), 4, "step {}: {:?}", s.step, s.subset);
    })
    .unwrap();
}

#[test]
fn mismatched_inputs_are_rejected() {
    let lib = library_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let cfg = McmcConfig::default();
    assert!(run_rjmcmc(&lib, &Dataset::new(vec![]), &cfg).is_err());
    assert!(run_rjmcmc(&lib, &pixels(&[vec![1.0, 2.0, 3.0]]), &cfg).is_err());
    let bad = McmcConfig {
        cooling_factor: 1.5,
        ..Default::default()
    };
    assert!(run_rjmcmc(&lib, &pixels(&[vec![1.0, 0.0]]), &bad).is_err());
}
