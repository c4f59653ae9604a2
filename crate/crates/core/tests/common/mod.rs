//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's numerical code.
#![allow(dead_code)]

use rand::Rng;
use sparse_unmix::{ClassId, LabeledSpectrum, SpectralLibrary, Spectrum};

pub const CLASSES: [&str; 4] = ["impervious", "vegetation", "soil", "water"];

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller keeps the oracles free of distribution crates.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_vectors(rng: &mut impl Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..m).map(|_| gaussian(rng)).collect())
        .collect()
}

pub fn library_from(atoms: &[Vec<f64>]) -> SpectralLibrary {
    SpectralLibrary::new(
        atoms
            .iter()
            .enumerate()
            .map(|(j, a)| {
                LabeledSpectrum::new(
                    Spectrum::new(a.clone()).unwrap(),
                    ClassId::new(CLASSES[j % 4]),
                    format!("a{j}"),
                )
            })
            .collect(),
    )
    .unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Dense Gaussian elimination with partial pivoting; `None` when singular.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

pub fn residual_sq(atoms: &[Vec<f64>], alpha: &[f64], x: &[f64]) -> f64 {
    (0..x.len())
        .map(|b| {
            let r: f64 = atoms.iter().zip(alpha).map(|(a, w)| a[b] * w).sum::<f64>() - x[b];
            r * r
        })
        .sum()
}

/// Simplex-constrained least squares by enumerating every active set of the
/// `allowed` atoms: for each support solve the equality-constrained KKT
/// system, keep feasible solutions, return the best. Zero outside `allowed`.
pub fn qp_oracle(atoms: &[Vec<f64>], x: &[f64], allowed: &[usize]) -> Vec<f64> {
    let n = allowed.len();
    assert!((1..=16).contains(&n));
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let s: Vec<usize> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| allowed[i])
            .collect();
        let k = s.len();
        let mut m = vec![vec![0.0; k + 1]; k + 1];
        let mut rhs = vec![0.0; k + 1];
        for (i, &p) in s.iter().enumerate() {
            for (j, &q) in s.iter().enumerate() {
                m[i][j] = dot(&atoms[p], &atoms[q]);
            }
            m[i][k] = 1.0;
            m[k][i] = 1.0;
            rhs[i] = dot(&atoms[p], x);
        }
        rhs[k] = 1.0;
        let Some(sol) = gauss_solve(m, rhs) else {
            continue;
        };
        if sol[..k].iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut alpha = vec![0.0; atoms.len()];
        for (i, &p) in s.iter().enumerate() {
            alpha[p] = sol[i].max(0.0);
        }
        let obj = residual_sq(atoms, &alpha, x);
        let better = match &best {
            None => true,
            Some((b, bk, _)) => obj < b - 1e-13 || (obj <= b + 1e-13 && k < *bk),
        };
        if better {
            best = Some((obj, k, alpha));
        }
    }
    best.expect("a single atom is always feasible").2
}

/// Step-by-step backward greedy path on top of [`qp_oracle`].
pub fn greedy_oracle(atoms: &[Vec<f64>], x: &[f64], w: usize) -> Vec<f64> {
    let all: Vec<usize> = (0..atoms.len()).collect();
    let mut alpha = qp_oracle(atoms, x, &all);
    loop {
        let support: Vec<usize> = (0..atoms.len()).filter(|&j| alpha[j] > 0.0).collect();
        if support.len() <= w {
            return alpha;
        }
        let mut drop = support[0];
        for &j in &support {
            if alpha[j] < alpha[drop] {
                drop = j;
            }
        }
        let rest: Vec<usize> = support.into_iter().filter(|&j| j != drop).collect();
        alpha = qp_oracle(atoms, x, &rest);
    }
}

pub fn support_of(alpha: &[f64]) -> Vec<usize> {
    (0..alpha.len()).filter(|&j| alpha[j] > 0.0).collect()
}

/// Stacked residual norm of the greedy oracle over all pixels.
pub fn energy_oracle(atoms: &[Vec<f64>], pixels: &[Vec<f64>], w: usize) -> f64 {
    pixels
        .iter()
        .map(|x| residual_sq(atoms, &greedy_oracle(atoms, x, w), x))
        .sum::<f64>()
        .sqrt()
}

pub fn rbf_distance(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (2.0 - 2.0 * (-d2 / (2.0 * sigma * sigma)).exp())
        .max(0.0)
        .sqrt()
}

/// Brute-force greedy selection: at every step each candidate's criterion is
/// recomputed from scratch. Returns selected indices and criterion values.
///
/// Kernel sums are compared through `sum (sqrt(2) - d)`, each shortfall
/// `2k / (sqrt(2) + d)` taken in log space, because the distances themselves
/// round to `sqrt(2)` for well separated points.
pub fn sivm_oracle(
    points: &[Vec<f64>],
    k: usize,
    init: &[f64],
    sigma: Option<f64>,
) -> (Vec<usize>, Vec<f64>) {
    let mut chosen: Vec<usize> = Vec::new();
    let mut values = Vec::new();
    while chosen.len() < k {
        let anchors: Vec<&[f64]> = if chosen.is_empty() {
            vec![init]
        } else {
            chosen.iter().map(|&j| points[j].as_slice()).collect()
        };
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let (value, key) = match sigma {
                None => {
                    let c: f64 = anchors.iter().map(|a| dist(a, p)).sum();
                    (c, c)
                }
                Some(s) => {
                    let c: f64 = anchors.iter().map(|a| rbf_distance(a, p, s)).sum();
                    let logs: Vec<f64> = anchors
                        .iter()
                        .map(|a| {
                            let q = dist(a, p).powi(2) / (2.0 * s * s);
                            2f64.ln() - q - (2f64.sqrt() + rbf_distance(a, p, s)).ln()
                        })
                        .collect();
                    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
                    (c, -lse)
                }
            };
            if best.is_none_or(|(_, _, b)| key > b) {
                best = Some((i, value, key));
            }
        }
        let (i, c, _) = best.unwrap();
        chosen.push(i);
        values.push(c);
    }
    (chosen, values)
}

/// Indices of the vertices of the convex hull of 2-D points (monotone chain,
/// collinear boundary points excluded).
pub fn hull_vertices_2d(points: &[[f64; 2]]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a][0]
            .total_cmp(&points[b][0])
            .then(points[a][1].total_cmp(&points[b][1]))
    });
    let cross = |o: usize, a: usize, b: usize| {
        (points[a][0] - points[o][0]) * (points[b][1] - points[o][1])
            - (points[a][1] - points[o][1]) * (points[b][0] - points[o][0])
    };
    let chain = |order: &mut dyn Iterator<Item = usize>| {
        let mut h: Vec<usize> = Vec::new();
        for p in order {
            while h.len() >= 2 && cross(h[h.len() - 2], h[h.len() - 1], p) <= 0.0 {
                h.pop();
            }
            h.push(p);
        }
        h.pop();
        h
    };
    let mut hull = chain(&mut idx.clone().into_iter());
    hull.extend(chain(&mut idx.into_iter().rev()));
    hull.sort_unstable();
    hull.dedup();
    hull
}

/// LOF from the full pairwise distance matrix.
pub fn lof_oracle(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    let dm: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist(&points[i], &points[j])).collect())
        .collect();
    let knn: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            o.sort_by(|&a, &b| dm[i][a].total_cmp(&dm[i][b]).then(a.cmp(&b)));
            o.truncate(k);
            o
        })
        .collect();
    let kdist: Vec<f64> = (0..n).map(|i| dm[i][knn[i][k - 1]]).collect();
    let lrd: Vec<f64> = (0..n)
        .map(|p| {
            let mean: f64 = knn[p].iter().map(|&o| kdist[o].max(dm[p][o])).sum::<f64>() / k as f64;
            1.0 / mean.max(1e-12)
        })
        .collect();
    (0..n)
        .map(|p| {
            if kdist[p] == 0.0 {
                1.0
            } else {
                knn[p].iter().map(|&o| lrd[o] / lrd[p]).sum::<f64>() / k as f64
            }
        })
        .collect()
}

/// Normalized `exp(-U/R) * lambda^K / K!` over the given subsets.
pub fn subset_target(subsets: &[(Vec<usize>, f64)], lambda: f64, temperature: f64) -> Vec<f64> {
    let logw: Vec<f64> = subsets
        .iter()
        .map(|(s, u)| {
            let k = s.len();
            let log_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
            -u / temperature + k as f64 * lambda.ln() - log_fact
        })
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// All nonempty subsets of `0..n` with at most `max_k` elements, ascending.
pub fn subsets(n: usize, max_k: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << n))
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect::<Vec<_>>())
        .filter(|s| s.len() <= max_k)
        .collect()
}

/// Convex combination of the listed atoms with positive random weights.
pub fn mixture(rng: &mut impl Rng, atoms: &[Vec<f64>], which: &[usize]) -> Vec<f64> {
    let w: Vec<f64> = which.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let z: f64 = w.iter().sum();
    let m = atoms[0].len();
    (0..m)
        .map(|b| {
            which
                .iter()
                .zip(&w)
                .map(|(&j, wj)| atoms[j][b] * wj / z)
                .sum()
        })
        .collect()
}

/// Pool of `p` positive random atoms with a planted subset; every eval pixel
/// is a strictly positive mixture of all planted atoms.
pub struct Planted {
    pub atoms: Vec<Vec<f64>>,
    pub planted: Vec<usize>,
    pub pixels: Vec<Vec<f64>>,
}

pub fn planted_instance(
    rng: &mut impl Rng,
    p: usize,
    m: usize,
    size: usize,
    pixels: usize,
) -> Planted {
    let atoms: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut planted = rand::seq::index::sample(rng, p, size).into_vec();
    planted.sort_unstable();
    let pixels = (0..pixels)
        .map(|_| mixture(rng, &atoms, &planted))
        .collect();
    Planted {
        atoms,
        planted,
        pixels,
    }
}
