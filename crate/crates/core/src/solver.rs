//! Simplex-constrained non-negative least squares with greedy backward
//! sparsification.
//!
//! For a dictionary `A` (bands x atoms) and a pixel `x`, [`Dictionary::solve`]
//! minimizes `||A a - x||_2` over the probability simplex with a primal
//! active-set method. The equality-constrained subproblem on a passive set
//! is solved in a reduced parametrization (one coordinate eliminated by the
//! sum-to-one constraint) by QR, falling back to SVD when the passive columns
//! are affinely dependent. [`Dictionary::sparsify`] then removes the smallest
//! activation one at a time and re-solves on the survivors until at most `W`
//! atoms remain.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientVector, Dataset, SpectralLibrary, Spectrum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Maximum number of nonzero activations (`W`).
    pub sparsity_w: usize,
    /// KKT tolerance on the reduced gradient, scaled by the squared atom norm.
    pub active_set_tolerance: f64,
    /// Active-set iteration cap per solve; `None` means `10 * atoms`.
    pub max_iterations: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            sparsity_w: 7,
            active_set_tolerance: 1e-10,
            max_iterations: None,
        }
    }
}

impl SolverConfig {
    pub fn with_sparsity(sparsity_w: usize) -> Self {
        SolverConfig {
            sparsity_w,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sparsity_w == 0 {
            return Err(Error::InvalidConfig("sparsity_w must be >= 1".into()));
        }
        if !(self.active_set_tolerance.is_finite() && self.active_set_tolerance >= 0.0) {
            return Err(Error::InvalidConfig(
                "active_set_tolerance must be finite and >= 0".into(),
            ));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }

    fn iteration_cap(&self, atoms: usize) -> usize {
        self.max_iterations.unwrap_or(10 * atoms).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmixResult {
    pub coefficients: CoefficientVector,
    /// `||A a - x||_2` recomputed from the returned coefficients.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// State of the unsparsified optimum, kept so that callers can test whether
/// adding or removing an atom would change it.
#[derive(Debug, Clone)]
pub(crate) struct SimplexFit {
    /// Atoms with positive weight, ascending.
    pub support: Vec<usize>,
    /// `A a - x` at the unsparsified optimum.
    pub residual: DVector<f64>,
    /// Equality multiplier: the common reduced gradient on the support.
    pub multiplier: f64,
}

/// Dense column-major dictionary (`bands x atoms`) prepared for repeated solves.
#[derive(Debug, Clone)]
pub struct Dictionary {
    columns: DMatrix<f64>,
    norms_sq: Vec<f64>,
}

impl Dictionary {
    pub fn from_library(library: &SpectralLibrary) -> Self {
        Self::from_spectra(library.elements().iter().map(|e| e.spectrum.values()))
            .expect("library invariants guarantee a consistent dictionary")
    }

    /// Builds a dictionary from borrowed atom vectors of equal length.
    pub fn from_spectra<'a, I>(atoms: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let atoms: Vec<&[f64]> = atoms.into_iter().collect();
        let first = atoms
            .first()
            .ok_or_else(|| Error::InvalidInput("dictionary has no atoms".into()))?;
        let m = first.len();
        if m == 0 {
            return Err(Error::InvalidInput("dictionary atoms have no bands".into()));
        }
        for a in &atoms {
            if a.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: a.len(),
                });
            }
            if let Some(band) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { band });
            }
        }
        let columns = DMatrix::from_fn(m, atoms.len(), |r, c| atoms[c][r]);
        let norms_sq = columns.column_iter().map(|c| c.norm_squared()).collect();
        Ok(Dictionary { columns, norms_sq })
    }

    pub fn band_count(&self) -> usize {
        self.columns.nrows()
    }

    pub fn atom_count(&self) -> usize {
        self.columns.ncols()
    }

    pub(crate) fn column(&self, j: usize) -> nalgebra::DVectorView<'_, f64> {
        self.columns.column(j)
    }

    fn check_pixel(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.band_count() {
            return Err(Error::DimensionMismatch {
                expected: self.band_count(),
                actual: x.len(),
            });
        }
        if let Some(band) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { band });
        }
        Ok(DVector::from_column_slice(x))
    }

    /// Absolute KKT tolerance for this dictionary.
    pub(crate) fn kkt_tolerance(&self, cfg: &SolverConfig) -> f64 {
        let scale = self.norms_sq.iter().copied().fold(1.0, f64::max);
        cfg.active_set_tolerance * scale
    }

    /// Minimizer of `||A a - x||_2` over the probability simplex.
    pub fn solve(&self, x: &[f64], cfg: &SolverConfig) -> Result<UnmixResult> {
        cfg.validate()?;
        let x = self.check_pixel(x)?;
        let cols: Vec<usize> = (0..self.atom_count()).collect();
        let (alpha, iterations) = self.active_set(&x, &cols, cfg);
        Ok(self.finish(&x, alpha, iterations))
    }

    /// Greedy backward removal of the smallest activation (lowest index on
    /// ties), re-solving on the survivors after every single removal, until
    /// the support has at most `W` atoms.
    pub fn sparsify(
        &self,
        x: &[f64],
        result: &UnmixResult,
        cfg: &SolverConfig,
    ) -> Result<UnmixResult> {
        cfg.validate()?;
        let xv = self.check_pixel(x)?;
        if result.coefficients.len() != self.atom_count() {
            return Err(Error::InvalidInput(format!(
                "result has {} coefficients for {} atoms",
                result.coefficients.len(),
                self.atom_count()
            )));
        }
        let mut support = result.coefficients.support();
        if support.len() <= cfg.sparsity_w {
            return Ok(result.clone());
        }
        let mut alpha = result.coefficients.alpha().to_vec();
        let mut iterations = result.iterations;
        while support.len() > cfg.sparsity_w {
            let mut weakest = support[0];
            for &j in &support[1..] {
                if alpha[j] < alpha[weakest] {
                    weakest = j;
                }
            }
            support.retain(|&j| j != weakest);
            let (a, it) = self.active_set(&xv, &support, cfg);
            iterations += it;
            alpha = a;
            support.retain(|&j| alpha[j] > 0.0);
        }
        Ok(self.finish(&xv, alpha, iterations))
    }

    /// Full estimator: simplex NNLS followed by backward sparsification.
    pub fn unmix(&self, x: &[f64], cfg: &SolverConfig) -> Result<UnmixResult> {
        let full = self.solve(x, cfg)?;
        self.sparsify(x, &full, cfg)
    }

    /// Like [`Dictionary::unmix`], also returning the unsparsified optimum.
    pub(crate) fn unmix_with_fit(
        &self,
        x: &[f64],
        cfg: &SolverConfig,
    ) -> Result<(UnmixResult, SimplexFit)> {
        let full = self.solve(x, cfg)?;
        let xv = DVector::from_column_slice(x);
        let alpha = DVector::from_column_slice(full.coefficients.alpha());
        let fitted = &self.columns * &alpha;
        let residual = &fitted - &xv;
        let fit = SimplexFit {
            support: full.coefficients.support(),
            multiplier: fitted.dot(&residual),
            residual,
        };
        Ok((self.sparsify(x, &full, cfg)?, fit))
    }

    fn finish(&self, x: &DVector<f64>, mut alpha: Vec<f64>, iterations: usize) -> UnmixResult {
        let sum: f64 = alpha.iter().sum();
        if sum > 0.0 && sum != 1.0 {
            alpha.iter_mut().for_each(|a| *a /= sum);
        }
        let mut fitted = DVector::zeros(self.band_count());
        for (j, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                fitted.axpy(a, &self.columns.column(j), 1.0);
            }
        }
        UnmixResult {
            residual_norm: (fitted - x).norm(),
            coefficients: CoefficientVector::from_solver(alpha),
            iterations,
        }
    }

    /// Primal active-set method on the simplex restricted to `cols`.
    /// Returns full-length weights (zero outside the passive set).
    fn active_set(
        &self,
        x: &DVector<f64>,
        cols: &[usize],
        cfg: &SolverConfig,
    ) -> (Vec<f64>, usize) {
        let d = self.atom_count();
        let mut alpha = vec![0.0; d];
        if cols.is_empty() {
            return (alpha, 0);
        }

        // Start at the single closest atom.
        let mut start = cols[0];
        let mut best = f64::INFINITY;
        for &j in cols {
            let dist = (self.columns.column(j) - x).norm_squared();
            if dist < best {
                best = dist;
                start = j;
            }
        }
        alpha[start] = 1.0;
        if cols.len() == 1 {
            return (alpha, 0);
        }

        let tol = self.kkt_tolerance(cfg);
        let cap = cfg.iteration_cap(cols.len());
        let mut passive = vec![start];
        let mut in_passive = vec![false; d];
        in_passive[start] = true;
        let mut iterations = 0;

        'outer: while iterations < cap {
            iterations += 1;
            // Reduced gradient g_j - mu with g = A^T (A a - x), mu = a^T g.
            let residual = self.fitted(&alpha, &passive) - x;
            let grad: Vec<(usize, f64)> = cols
                .iter()
                .map(|&j| (j, self.columns.column(j).dot(&residual)))
                .collect();
            let mu: f64 = grad.iter().map(|&(j, g)| alpha[j] * g).sum();
            let mut entering = None;
            let mut most_negative = -tol;
            for &(j, g) in &grad {
                if !in_passive[j] && g - mu < most_negative {
                    most_negative = g - mu;
                    entering = Some(j);
                }
            }
            let Some(entering) = entering else {
                break;
            };
            passive.push(entering);
            in_passive[entering] = true;

            let mut first_step = true;
            loop {
                let z = self.equality_solve(x, &passive, &alpha);
                if z.iter().all(|&v| v > 0.0) {
                    for (&j, &v) in passive.iter().zip(&z) {
                        alpha[j] = v;
                    }
                    break;
                }
                iterations += 1;
                // Step toward z until the first coordinate hits zero.
                let mut step = f64::INFINITY;
                let mut blocking = passive[0];
                for (&j, &v) in passive.iter().zip(&z) {
                    if v <= 0.0 {
                        let gap = alpha[j] - v;
                        let t = if gap > 0.0 { alpha[j] / gap } else { 0.0 };
                        if t < step {
                            step = t;
                            blocking = j;
                        }
                    }
                }
                if first_step && blocking == entering && step <= 0.0 {
                    // The entering atom cannot move off zero: converged to
                    // within numerical precision.
                    passive.retain(|&j| j != entering);
                    in_passive[entering] = false;
                    break 'outer;
                }
                first_step = false;
                for (&j, &v) in passive.iter().zip(&z) {
                    alpha[j] += step * (v - alpha[j]);
                }
                alpha[blocking] = 0.0;
                for &j in &passive {
                    if alpha[j] <= 0.0 {
                        alpha[j] = 0.0;
                        in_passive[j] = false;
                    }
                }
                passive.retain(|&j| in_passive[j]);
                if passive.is_empty() || iterations >= cap {
                    break 'outer;
                }
            }
        }
        if passive.is_empty() {
            // Only reachable through the iteration cap; fall back to the start atom.
            alpha.iter_mut().for_each(|a| *a = 0.0);
            alpha[start] = 1.0;
        }
        (alpha, iterations)
    }

    fn fitted(&self, alpha: &[f64], passive: &[usize]) -> DVector<f64> {
        let mut out = DVector::zeros(self.band_count());
        for &j in passive {
            out.axpy(alpha[j], &self.columns.column(j), 1.0);
        }
        out
    }

    /// Minimizes `||A_P z - x||` subject to `sum z = 1` (no sign constraint).
    /// The coordinate with the largest current weight is eliminated.
    fn equality_solve(&self, x: &DVector<f64>, passive: &[usize], alpha: &[f64]) -> Vec<f64> {
        let p = passive.len();
        if p == 1 {
            return vec![1.0];
        }
        let mut pivot = 0;
        for i in 1..p {
            if alpha[passive[i]] > alpha[passive[pivot]] {
                pivot = i;
            }
        }
        let anchor = self.columns.column(passive[pivot]);
        let others: Vec<usize> = (0..p).filter(|&i| i != pivot).collect();
        let m = self.band_count();
        let b = DMatrix::from_fn(m, p - 1, |r, c| {
            self.columns[(r, passive[others[c]])] - anchor[r]
        });
        let y = x - anchor;
        let beta = least_squares(b, &y);
        let mut z = vec![0.0; p];
        let mut rest = 1.0;
        for (k, &i) in others.iter().enumerate() {
            z[i] = beta[k];
            rest -= beta[k];
        }
        z[pivot] = rest;
        z
    }
}

/// Least-squares solution of `b * beta = y`; minimum-norm when `b` is rank deficient.
fn least_squares(b: DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (m, n) = b.shape();
    if n <= m {
        let qr = b.clone().qr();
        let r = qr.r();
        let diag_max = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let well_posed = diag_max > 0.0 && (0..n).all(|i| r[(i, i)].abs() > 1e-10 * diag_max);
        if well_posed {
            let qty = qr.q().tr_mul(y);
            if let Some(beta) = r.solve_upper_triangular(&qty) {
                if beta.iter().all(|v| v.is_finite()) {
                    return beta;
                }
            }
        }
    }
    let svd = b.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    svd.solve(y, 1e-12 * smax.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DVector::zeros(n))
}

pub fn solve_simplex_nnls(
    library: &SpectralLibrary,
    x: &Spectrum,
    cfg: &SolverConfig,
) -> Result<UnmixResult> {
    Dictionary::from_library(library).solve(x.values(), cfg)
}

pub fn sparsify_backward(
    library: &SpectralLibrary,
    x: &Spectrum,
    result: &UnmixResult,
    cfg: &SolverConfig,
) -> Result<UnmixResult> {
    Dictionary::from_library(library).sparsify(x.values(), result, cfg)
}

/// Unmixes every pixel. Output order follows input order; the result does not
/// depend on the number of worker threads.
pub fn unmix_batch(
    library: &SpectralLibrary,
    pixels: &Dataset,
    cfg: &SolverConfig,
) -> Result<Vec<UnmixResult>> {
    cfg.validate()?;
    let dict = Dictionary::from_library(library);
    unmix_pixels(&dict, &pixels.pixels, cfg)
}

pub(crate) fn unmix_pixels(
    dict: &Dictionary,
    pixels: &[Spectrum],
    cfg: &SolverConfig,
) -> Result<Vec<UnmixResult>> {
    pixels
        .par_iter()
        .enumerate()
        .map(|(i, p)| dict.unmix(p.values(), cfg).map_err(|e| e.at_pixel(i)))
        .collect()
}

/// `sqrt(sum_t ||residual_t||^2)` over the full estimator applied to every pixel.
pub fn stacked_residual(dict: &Dictionary, pixels: &[Spectrum], cfg: &SolverConfig) -> Result<f64> {
    let results = unmix_pixels(dict, pixels, cfg)?;
    Ok(results
        .iter()
        .map(|r| r.residual_norm * r.residual_norm)
        .sum::<f64>()
        .sqrt())
}
