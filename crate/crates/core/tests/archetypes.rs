mod common;

use common::*;
use rand::Rng;
use sparse_unmix::archetypes::{
    accumulate_runs, distance, label_archetypes, sigma_heuristic, sivm_select, ArchetypeSet, Init,
    Metric, Provenance, Sigma, SivmConfig,
};
use sparse_unmix::data::{synth_scene, SynthConfig};
use sparse_unmix::{seeded_rng, ClassId, Dataset, Spectrum};

fn dataset(points: &[Vec<f64>]) -> Dataset {
    Dataset::new(
        points
            .iter()
            .map(|p| Spectrum::new(p.clone()).unwrap())
            .collect(),
    )
}

fn no_provenance() -> Provenance {
    Provenance {
        configs: vec![],
        seeds: vec![],
        sigmas: vec![],
    }
}

#[test]
fn triangle_vertices_are_selected_first() {
    let mut rng = seeded_rng(21);
    let mut pts = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![1.0, 3.0]];
    for _ in 0..20 {
        let w: [f64; 3] = [
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
        ];
        let z: f64 = w.iter().sum();
        pts.push(vec![(w[1] * 4.0 + w[2] * 1.0) / z, (w[2] * 3.0) / z]);
    }
    let set = sivm_select(&dataset(&pts), &SivmConfig::linear(3, Init::Mean)).unwrap();
    let mut sorted = set.indices.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2]);
    let mean: Vec<f64> = (0..2)
        .map(|b| pts.iter().map(|p| p[b]).sum::<f64>() / 23.0)
        .collect();
    assert_eq!(set.indices, sivm_oracle(&pts, 3, &mean, None).0);
}

#[test]
fn every_step_matches_brute_force_argmax() {
    let mut rng = seeded_rng(22);
    for case in 0..30 {
        let n = rng.random_range(20..200);
        let m = rng.random_range(2..=5);
        let pts = random_vectors(&mut rng, n, m);
        let k = rng.random_range(1..=10.min(n));
        let d = dataset(&pts);
        let sigma = 0.5 + rng.random::<f64>();
        let (cfg, init, s) = match case % 3 {
            0 => {
                let mean: Vec<f64> = (0..m)
                    .map(|b| pts.iter().map(|p| p[b]).sum::<f64>() / n as f64)
                    .collect();
                (SivmConfig::linear(k, Init::Mean), mean, None)
            }
            1 => {
                let seed = rng.random::<u64>();
                let pick = seeded_rng(seed).random_range(0..n);
                (
                    SivmConfig::kernel(k, Init::Random { seed }, Sigma::Value(sigma)),
                    pts[pick].clone(),
                    Some(sigma),
                )
            }
            _ => {
                let fixed: Vec<f64> = (0..m).map(|_| gaussian(&mut rng)).collect();
                (
                    SivmConfig::kernel(k, Init::Fixed(fixed.clone()), Sigma::Value(sigma)),
                    fixed,
                    Some(sigma),
                )
            }
        };
        let set = sivm_select(&d, &cfg).unwrap();
        let (idx, crit) = sivm_oracle(&pts, k, &init, s);
        assert_eq!(set.indices, idx, "case {case}");
        for (a, b) in set.criteria.iter().zip(&crit) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        for (pos, &i) in set.indices.iter().enumerate() {
            assert_eq!(set.spectra[pos], d.pixels[i]);
        }
    }
}

#[test]
fn linear_selection_stays_on_the_hull() {
    let mut rng = seeded_rng(23);
    for _ in 0..20 {
        let n = rng.random_range(20..300);
        let pts2: Vec<[f64; 2]> = (0..n)
            .map(|_| [gaussian(&mut rng), gaussian(&mut rng)])
            .collect();
        let pts: Vec<Vec<f64>> = pts2.iter().map(|p| p.to_vec()).collect();
        let hull = hull_vertices_2d(&pts2);
        let set = sivm_select(&dataset(&pts), &SivmConfig::linear(3, Init::Mean)).unwrap();
        for i in &set.indices {
            assert!(hull.contains(i), "index {i} not a hull vertex {hull:?}");
        }
        // Later picks are extreme points of the candidates still unselected,
        // which need not be vertices of the full hull.
        let set = sivm_select(&dataset(&pts), &SivmConfig::linear(hull.len(), Init::Mean)).unwrap();
        for (step, &i) in set.indices.iter().enumerate() {
            let remaining: Vec<usize> = (0..n)
                .filter(|j| !set.indices[..step].contains(j))
                .collect();
            let sub: Vec<[f64; 2]> = remaining.iter().map(|&j| pts2[j]).collect();
            let sub_hull: Vec<usize> = hull_vertices_2d(&sub)
                .iter()
                .map(|&h| remaining[h])
                .collect();
            assert!(
                sub_hull.contains(&i),
                "step {step}: {i} not extreme among the remaining"
            );
        }
    }
}

#[test]
fn kernel_distance_properties() {
    let mut rng = seeded_rng(24);
    let pts = random_vectors(&mut rng, 12, 3);
    let sigma = 0.8;
    let metric = Metric::Rbf { sigma };
    let sp: Vec<Spectrum> = pts
        .iter()
        .map(|p| Spectrum::new(p.clone()).unwrap())
        .collect();
    let mut gram = nalgebra::DMatrix::zeros(12, 12);
    for i in 0..12 {
        for j in 0..12 {
            let dij = distance(&sp[i], &sp[j], metric).unwrap();
            let dji = distance(&sp[j], &sp[i], metric).unwrap();
            assert_eq!(dij, dji);
            assert!(dij >= 0.0 && dij < 2f64.sqrt());
            assert!((dij - rbf_distance(&pts[i], &pts[j], sigma)).abs() < 1e-12);
            gram[(i, j)] = 1.0 - dij * dij / 2.0;
        }
        assert_eq!(distance(&sp[i], &sp[i], metric).unwrap(), 0.0);
    }
    let eig = gram.symmetric_eigen().eigenvalues;
    assert!(eig.iter().all(|&e| e >= -1e-8), "{eig}");
    let lin = distance(&sp[0], &sp[1], Metric::Euclidean).unwrap();
    assert!((lin - dist(&pts[0], &pts[1])).abs() < 1e-12);
}

#[test]
fn sigma_heuristic_cases() {
    // Bands with sample standard deviation exactly 2.
    let pts = vec![vec![0.0, 10.0], vec![2.0, 12.0], vec![4.0, 14.0]];
    assert!((sigma_heuristic(&dataset(&pts)).unwrap() - 1.0).abs() < 1e-15);
    assert!(sigma_heuristic(&dataset(&vec![vec![1.0, 1.0]; 5])).is_err());
    assert!(sigma_heuristic(&dataset(&[vec![1.0, 2.0]])).is_err());

    let mut rng = seeded_rng(25);
    let pts = random_vectors(&mut rng, 50, 111);
    let mut mean_std = 0.0;
    for b in 0..111 {
        let mean = pts.iter().map(|p| p[b]).sum::<f64>() / 50.0;
        let ss: f64 = pts.iter().map(|p| (p[b] - mean).powi(2)).sum();
        mean_std += (ss / 49.0).sqrt();
    }
    let expected = 0.5 * mean_std / 111.0;
    let got = sigma_heuristic(&dataset(&pts)).unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected);
}

#[test]
fn accumulation_is_a_first_appearance_union() {
    let mut rng = seeded_rng(26);
    let pts = random_vectors(&mut rng, 10, 3);
    let d = dataset(&pts);
    let a = ArchetypeSet::from_indices(&d, vec![1, 2, 3], no_provenance()).unwrap();
    let b = ArchetypeSet::from_indices(&d, vec![3, 4], no_provenance()).unwrap();
    assert_eq!(
        accumulate_runs(&[a.clone(), b]).unwrap().indices,
        vec![1, 2, 3, 4]
    );
    assert_eq!(
        accumulate_runs(&[a.clone(), a.clone()]).unwrap().indices,
        a.indices
    );

    let other = dataset(&random_vectors(&mut rng, 10, 3));
    let c = ArchetypeSet::from_indices(&other, vec![0], no_provenance()).unwrap();
    assert!(accumulate_runs(&[a, c]).is_err());
    assert!(accumulate_runs(&[]).is_err());
}

#[test]
fn ten_kernel_runs_union() {
    let scene = synth_scene(&SynthConfig {
        n_pixels: 400,
        bands: 30,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let d = scene.pixels;
    let sigma = sigma_heuristic(&d).unwrap();
    let runs: Vec<ArchetypeSet> = (0..10)
        .map(|s| {
            sivm_select(
                &d,
                &SivmConfig::kernel(75, Init::Random { seed: s }, Sigma::Value(sigma)),
            )
            .unwrap()
        })
        .collect();
    let union = accumulate_runs(&runs).unwrap();
    let mut oracle: Vec<usize> = Vec::new();
    for r in &runs {
        for &i in &r.indices {
            if !oracle.contains(&i) {
                oracle.push(i);
            }
        }
    }
    assert_eq!(union.indices, oracle);
    assert!(union.len() >= 75 && union.len() <= 750);
    assert_eq!(union.provenance.seeds, (0..10).collect::<Vec<u64>>());
}

#[test]
fn labels_follow_source_pixels() {
    let scene = synth_scene(&SynthConfig {
        n_pixels: 120,
        bands: 20,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let labels = scene.pixels.dominant_labels().unwrap();
    let d = scene.pixels.clone().with_labels(labels.clone());
    let set = sivm_select(
        &Dataset::new(d.pixels.clone()),
        &SivmConfig::linear(15, Init::Mean),
    )
    .unwrap();
    assert!(set.labels.is_none());
    let labeled = label_archetypes(&set, &labels).unwrap();
    for (pos, &i) in labeled.indices.iter().enumerate() {
        assert_eq!(labeled.labels.as_ref().unwrap()[pos], labels[i]);
    }
    let lib = labeled.to_library().unwrap();
    assert_eq!(
        lib.get(0).unwrap().source_id,
        format!("px{}", labeled.indices[0])
    );

    let veg = vec![ClassId::new("vegetation"); 120];
    let all_veg = label_archetypes(&set, &veg).unwrap();
    assert!(all_veg
        .labels
        .unwrap()
        .iter()
        .all(|c| c.as_str() == "vegetation"));

    let max = *set.indices.iter().max().unwrap();
    let err = label_archetypes(&set, &labels[..max])
        .unwrap_err()
        .to_string();
    assert!(err.contains(&max.to_string()), "{err}");
}

#[test]
fn selection_is_deterministic() {
    let mut rng = seeded_rng(27);
    let d = dataset(&random_vectors(&mut rng, 150, 4));
    let cfg = SivmConfig::kernel(12, Init::Random { seed: 9 }, Sigma::Heuristic);
    assert_eq!(
        sivm_select(&d, &cfg).unwrap(),
        sivm_select(&d, &cfg).unwrap()
    );
}

#[test]
fn saturated_kernel_still_ranks_by_distance() {
    let mut rng = seeded_rng(28);
    let (n, m, sigma) = (120, 60, 0.3);
    let pts = random_vectors(&mut rng, n, m);
    // Every pairwise distance rounds to sqrt(2) here.
    assert_eq!(rbf_distance(&pts[0], &pts[1], sigma), 2f64.sqrt());
    let k = 12;
    let set = sivm_select(
        &dataset(&pts),
        &SivmConfig::kernel(k, Init::Random { seed: 3 }, Sigma::Value(sigma)),
    )
    .unwrap();
    assert_ne!(set.indices, (0..k).collect::<Vec<_>>());

    // With k(a, x) far below machine precision, maximizing the summed kernel
    // distance means minimizing the summed kernel values, compared in log space.
    let q = |a: &[f64], b: &[f64]| dist(a, b).powi(2) / (2.0 * sigma * sigma);
    let start = &pts[seeded_rng(3).random_range(0..n)];
    let first = (0..n)
        .max_by(|&a, &b| q(start, &pts[a]).total_cmp(&q(start, &pts[b])))
        .unwrap();
    assert_eq!(set.indices[0], first);
    for step in 1..k {
        let chosen = &set.indices[..step];
        let log_sum = |x: usize| {
            let terms: Vec<f64> = chosen.iter().map(|&a| -q(&pts[a], &pts[x])).collect();
            let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
        };
        let want = (0..n)
            .filter(|x| !chosen.contains(x))
            .min_by(|&a, &b| log_sum(a).total_cmp(&log_sum(b)))
            .unwrap();
        assert_eq!(set.indices[step], want, "step {step}");
    }
}
