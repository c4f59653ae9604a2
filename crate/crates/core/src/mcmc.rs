//! Birth-death reversible-jump MCMC with simulated annealing over subsets of
//! a spectral pool.
//!
//! The chain targets `pi(S) ∝ exp(-U(S)/R) * lambda^|S| / |S|!` on subsets
//! with `1 <= |S| <= min(max_elements, pool size)`, where `U(S)` is the
//! stacked reconstruction error of the evaluation pixels with dictionary `S`.
//! The temperature `R` is multiplied by the cooling factor after each step;
//! the lowest-energy subset ever visited is returned.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassSet, Dataset, SpectralLibrary, Spectrum};
use crate::solver::{Dictionary, SolverConfig};

/// Relative scale (w.r.t. the evaluation-set norm) below which energy
/// differences are treated as exact ties.
const ENERGY_RESOLUTION: f64 = 1e-10;

const SUBSET_CACHE_LIMIT: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    /// Poisson prior mean on the subset size.
    pub prior_lambda: f64,
    pub max_elements: usize,
    pub iterations: usize,
    /// `None` selects the automatic start temperature.
    pub initial_temperature: Option<f64>,
    /// In `(0, 1]`; 1 keeps the temperature fixed.
    pub cooling_factor: f64,
    pub seed: u64,
    pub sparsity_w: usize,
    /// Forbid states that lack an element of some class present in the pool.
    pub require_all_classes: bool,
    /// Reuse per-pixel fits whose optimum a move provably leaves unchanged.
    pub incremental: bool,
    /// Memoize energies by subset (exact: the energy is a pure function).
    pub energy_cache: bool,
    pub record_trace: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            prior_lambda: 75.0,
            max_elements: 150,
            iterations: 10_000,
            initial_temperature: None,
            cooling_factor: 0.995,
            seed: 0,
            sparsity_w: 7,
            require_all_classes: false,
            incremental: false,
            energy_cache: true,
            record_trace: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_lambda.is_finite() && self.prior_lambda > 0.0) {
            return Err(Error::InvalidConfig("prior_lambda must be > 0".into()));
        }
        if self.max_elements == 0 {
            return Err(Error::InvalidConfig("max_elements must be >= 1".into()));
        }
        if !(self.cooling_factor > 0.0 && self.cooling_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cooling_factor must be in (0, 1], got {}",
                self.cooling_factor
            )));
        }
        if let Some(t) = self.initial_temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidConfig(
                    "initial_temperature must be > 0".into(),
                ));
            }
        }
        self.solver().validate()
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig::with_sparsity(self.sparsity_w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Birth,
    Death,
}

impl fmt::Display for MoveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoveKind::Birth => "birth",
            MoveKind::Death => "death",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub kind: MoveKind,
    /// Pool index added or removed.
    pub index: usize,
    /// Probability of proposing exactly this move from the current state.
    pub forward_probability: f64,
}

/// Probability of choosing a birth at size `k` with size bound `upper`.
pub fn birth_probability(k: usize, upper: usize) -> f64 {
    if upper <= 1 || k >= upper {
        0.0
    } else if k <= 1 {
        1.0
    } else {
        0.5
    }
}

fn death_probability(k: usize, upper: usize) -> f64 {
    if upper <= 1 {
        0.0
    } else {
        1.0 - birth_probability(k, upper)
    }
}

/// Effective size bound for a pool.
pub fn size_bound(pool_size: usize, max_elements: usize) -> usize {
    pool_size.min(max_elements)
}

/// Draws a birth (uniform over unused pool indices) or a death (uniform over
/// the current subset). `None` when no move exists (bound of one element).
pub fn propose(
    subset: &[usize],
    pool_size: usize,
    max_elements: usize,
    rng: &mut impl Rng,
) -> Option<Proposal> {
    let k = subset.len();
    let upper = size_bound(pool_size, max_elements);
    let b = birth_probability(k, upper);
    let d = death_probability(k, upper);
    if b == 0.0 && d == 0.0 {
        return None;
    }
    let u: f64 = rng.random();
    if u < b {
        let unused = pool_size - k;
        let mut r = rng.random_range(0..unused);
        // r-th pool index not in the (sorted) subset.
        let mut index = 0;
        let mut it = subset.iter().peekable();
        loop {
            if it.peek() == Some(&&index) {
                it.next();
            } else if r == 0 {
                break;
            } else {
                r -= 1;
            }
            index += 1;
        }
        Some(Proposal {
            kind: MoveKind::Birth,
            index,
            forward_probability: b / unused as f64,
        })
    } else {
        let pos = rng.random_range(0..k);
        Some(Proposal {
            kind: MoveKind::Death,
            index: subset[pos],
            forward_probability: d / k as f64,
        })
    }
}

/// Metropolis-Hastings-Green acceptance probability of `proposal` from a
/// state of size `k` at temperature `temperature`.
pub fn acceptance_probability(
    delta_energy: f64,
    proposal: &Proposal,
    k: usize,
    pool_size: usize,
    temperature: f64,
    cfg: &McmcConfig,
) -> f64 {
    let upper = size_bound(pool_size, cfg.max_elements);
    let lambda = cfg.prior_lambda;
    let kf = k as f64;
    let pf = pool_size as f64;
    let log_ratio = match proposal.kind {
        MoveKind::Birth => {
            if k >= upper {
                return 0.0;
            }
            let b = birth_probability(k, upper);
            let d_rev = death_probability(k + 1, upper);
            lambda.ln() - (kf + 1.0).ln() + d_rev.ln() - b.ln() + (pf - kf).ln() - (kf + 1.0).ln()
        }
        MoveKind::Death => {
            if k <= 1 {
                return 0.0;
            }
            let d = death_probability(k, upper);
            let b_rev = birth_probability(k - 1, upper);
            kf.ln() - lambda.ln() + b_rev.ln() - d.ln() + kf.ln() - (pf - kf + 1.0).ln()
        }
    };
    let tempered = if delta_energy == 0.0 {
        0.0
    } else {
        -delta_energy / temperature
    };
    let log_a = tempered + log_ratio;
    if log_a.is_nan() {
        0.0
    } else if log_a >= 0.0 {
        1.0
    } else {
        log_a.exp()
    }
}

/// Stacked residual `sqrt(sum_t ||gamma_t||^2)` of `eval_set` unmixed with the
/// pool elements at `subset` (full estimator, including sparsification).
pub fn energy(
    pool: &SpectralLibrary,
    subset: &[usize],
    eval_set: &Dataset,
    cfg: &SolverConfig,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("energy of an empty subset".into()));
    }
    let sub = pool.subset(subset)?;
    if let Some(m) = eval_set.band_count() {
        if m != pool.band_count() {
            return Err(Error::DimensionMismatch {
                expected: pool.band_count(),
                actual: m,
            });
        }
    }
    crate::solver::stacked_residual(&Dictionary::from_library(&sub), &eval_set.pixels, cfg)
}

#[derive(Debug, Clone)]
pub struct McmcState {
    /// Sorted pool indices.
    pub subset: Vec<usize>,
    pub energy: f64,
    pub temperature: f64,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl McmcState {
    pub fn len(&self) -> usize {
        self.subset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subset.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    /// Subset size after the step.
    pub k: usize,
    /// Energy of the state after the step.
    pub energy: f64,
    /// Temperature used for this step's decision.
    pub temperature: f64,
    pub kind: Option<MoveKind>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct McmcTrace {
    pub records: Vec<TraceRecord>,
    pub best_subset: Vec<usize>,
    pub best_energy: f64,
    /// Running best energy after each step.
    pub best_history: Vec<f64>,
}

impl McmcTrace {
    /// `step,k,energy,temperature,move,accepted` rows.
    pub fn to_delimited(&self) -> String {
        let mut s = String::from("step,k,energy,temperature,move,accepted\n");
        for r in &self.records {
            let kind = r.kind.map_or("none".to_string(), |k| k.to_string());
            writeln!(
                s,
                "{},{},{:.17e},{:.17e},{},{}",
                r.step, r.k, r.energy, r.temperature, kind, r.accepted as u8
            )
            .unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct McmcOutcome {
    pub best_subset: Vec<usize>,
    pub best_energy: f64,
    pub best_library: SpectralLibrary,
    pub initial_temperature: f64,
    pub final_state: McmcState,
    pub trace: McmcTrace,
}

#[derive(Debug, Clone)]
struct PixelFit {
    /// Pool indices of the unsparsified support.
    support: Vec<usize>,
    residual: DVector<f64>,
    multiplier: f64,
    squared: f64,
}

#[derive(Debug, Clone)]
struct SubsetFit {
    pixels: Vec<PixelFit>,
    energy: f64,
}

struct Evaluator<'a> {
    pool: &'a SpectralLibrary,
    pool_dict: Dictionary,
    pixels: &'a [Spectrum],
    solver: SolverConfig,
    cache: Option<HashMap<Vec<usize>, f64>>,
}

impl<'a> Evaluator<'a> {
    fn new(pool: &'a SpectralLibrary, pixels: &'a [Spectrum], cfg: &McmcConfig) -> Self {
        Evaluator {
            pool,
            pool_dict: Dictionary::from_library(pool),
            pixels,
            solver: cfg.solver(),
            cache: cfg.energy_cache.then(HashMap::new),
        }
    }

    fn dictionary(&self, subset: &[usize]) -> Dictionary {
        Dictionary::from_spectra(
            subset
                .iter()
                .map(|&j| self.pool.elements()[j].spectrum.values()),
        )
        .expect("pool atoms are consistent")
    }

    fn energy(&mut self, subset: &[usize]) -> Result<f64> {
        if let Some(e) = self.cache.as_ref().and_then(|c| c.get(subset)) {
            return Ok(*e);
        }
        let e =
            crate::solver::stacked_residual(&self.dictionary(subset), self.pixels, &self.solver)?;
        if let Some(cache) = self.cache.as_mut() {
            if cache.len() >= SUBSET_CACHE_LIMIT {
                cache.clear();
            }
            cache.insert(subset.to_vec(), e);
        }
        Ok(e)
    }

    fn fit_pixel(&self, dict: &Dictionary, subset: &[usize], t: usize) -> Result<PixelFit> {
        let (result, fit) = dict
            .unmix_with_fit(self.pixels[t].values(), &self.solver)
            .map_err(|e| e.at_pixel(t))?;
        Ok(PixelFit {
            support: fit.support.iter().map(|&j| subset[j]).collect(),
            residual: fit.residual,
            multiplier: fit.multiplier,
            squared: result.residual_norm * result.residual_norm,
        })
    }

    fn collect(&self, pixels: Vec<PixelFit>) -> SubsetFit {
        let energy = pixels.iter().map(|p| p.squared).sum::<f64>().sqrt();
        SubsetFit { pixels, energy }
    }

    fn full_fit(&self, subset: &[usize]) -> Result<SubsetFit> {
        let dict = self.dictionary(subset);
        let pixels = (0..self.pixels.len())
            .into_par_iter()
            .map(|t| self.fit_pixel(&dict, subset, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.collect(pixels))
    }

    /// Refits only the pixels whose unsparsified optimum the move can change.
    fn incremental_fit(
        &self,
        current: &SubsetFit,
        proposal: &Proposal,
        subset: &[usize],
    ) -> Result<SubsetFit> {
        let dict = self.dictionary(subset);
        let tol = dict.kkt_tolerance(&self.solver);
        let pixels = current
            .pixels
            .par_iter()
            .enumerate()
            .map(|(t, old)| {
                let unchanged = match proposal.kind {
                    MoveKind::Death => !old.support.contains(&proposal.index),
                    MoveKind::Birth => {
                        let g = self.pool_dict.column(proposal.index).dot(&old.residual);
                        g - old.multiplier >= -tol
                    }
                };
                if unchanged {
                    Ok(old.clone())
                } else {
                    self.fit_pixel(&dict, subset, t)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.collect(pixels))
    }
}

fn apply(subset: &[usize], proposal: &Proposal) -> Vec<usize> {
    let mut out = subset.to_vec();
    match proposal.kind {
        MoveKind::Birth => {
            let pos = out.partition_point(|&j| j < proposal.index);
            out.insert(pos, proposal.index);
        }
        MoveKind::Death => out.retain(|&j| j != proposal.index),
    }
    out
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Mean and sample standard deviation; the deviation is `None` for one value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = (values.len() > 1).then(|| sample_std(values));
    (mean, std)
}

pub fn run_rjmcmc(
    pool: &SpectralLibrary,
    eval_set: &Dataset,
    cfg: &McmcConfig,
) -> Result<McmcOutcome> {
    run_rjmcmc_observed(pool, eval_set, cfg, |_| {})
}

/// Runs the annealed chain, calling `observer` with the state after every step.
pub fn run_rjmcmc_observed(
    pool: &SpectralLibrary,
    eval_set: &Dataset,
    cfg: &McmcConfig,
    mut observer: impl FnMut(&McmcState),
) -> Result<McmcOutcome> {
    cfg.validate()?;
    if eval_set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    if eval_set.band_count() != Some(pool.band_count()) {
        return Err(Error::DimensionMismatch {
            expected: pool.band_count(),
            actual: eval_set.band_count().unwrap_or(0),
        });
    }
    eval_set.ensure_pixels_valid()?;
    let p = pool.len();
    let upper = size_bound(p, cfg.max_elements);
    let eval_norm = eval_set
        .pixels
        .iter()
        .flat_map(|x| x.values())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let resolution = ENERGY_RESOLUTION * eval_norm;

    // Pool element -> class slot, for the optional coverage constraint.
    let class_of: Vec<usize> = if cfg.require_all_classes {
        let mut names = Vec::new();
        pool.elements()
            .iter()
            .map(|e| match names.iter().position(|n| n == &e.class_id) {
                Some(i) => i,
                None => {
                    names.push(e.class_id.clone());
                    names.len() - 1
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let class_count = class_of.iter().copied().max().map_or(0, |m| m + 1);

    let mut rng = crate::seeded_rng(cfg.seed);
    let start_size = (cfg.prior_lambda.round() as usize).clamp(1, upper);
    let mut subset: Vec<usize> = sample(&mut rng, p, start_size).into_vec();
    subset.sort_unstable();
    if cfg.require_all_classes {
        for c in 0..class_count {
            if !subset.iter().any(|&j| class_of[j] == c) {
                let j = class_of
                    .iter()
                    .position(|&x| x == c)
                    .expect("class present");
                let pos = subset.partition_point(|&i| i < j);
                subset.insert(pos, j);
            }
        }
        if subset.len() > upper {
            return Err(Error::InvalidConfig(format!(
                "{class_count} classes cannot be covered with at most {upper} elements"
            )));
        }
    }

    let mut eval = Evaluator::new(pool, &eval_set.pixels, cfg);
    let mut current_fit = if cfg.incremental {
        Some(eval.full_fit(&subset)?)
    } else {
        None
    };
    let mut current_energy = match &current_fit {
        Some(f) => f.energy,
        None => eval.energy(&subset)?,
    };

    let initial_temperature = match cfg.initial_temperature {
        Some(t) => t,
        None => {
            let mut energies = Vec::with_capacity(20);
            for _ in 0..20 {
                let mut s: Vec<usize> = sample(&mut rng, p, start_size).into_vec();
                s.sort_unstable();
                energies.push(eval.energy(&s)?);
            }
            let std = sample_std(&energies);
            if std.is_finite() && std > 0.0 {
                std
            } else if current_energy > 0.0 {
                current_energy
            } else {
                1.0
            }
        }
    };

    let mut state = McmcState {
        subset,
        energy: current_energy,
        temperature: initial_temperature,
        step: 0,
        rng,
    };
    let mut trace = McmcTrace {
        records: Vec::new(),
        best_subset: state.subset.clone(),
        best_energy: state.energy,
        best_history: Vec::new(),
    };

    for step in 1..=cfg.iterations {
        let temperature = state.temperature;
        let proposal = propose(&state.subset, p, cfg.max_elements, &mut state.rng);
        let mut accepted = false;
        if let Some(prop) = proposal {
            let candidate = apply(&state.subset, &prop);
            let allowed = !cfg.require_all_classes
                || prop.kind == MoveKind::Birth
                || candidate
                    .iter()
                    .any(|&j| class_of[j] == class_of[prop.index]);
            // Always consume the uniform so the random stream does not depend
            // on the coverage constraint.
            let u: f64 = state.rng.random();
            if allowed {
                let (new_energy, new_fit) = match &current_fit {
                    Some(fit) => {
                        let f = eval.incremental_fit(fit, &prop, &candidate)?;
                        (f.energy, Some(f))
                    }
                    None => (eval.energy(&candidate)?, None),
                };
                let mut delta = new_energy - current_energy;
                if delta.abs() <= resolution {
                    delta = 0.0;
                }
                let a = acceptance_probability(delta, &prop, state.len(), p, temperature, cfg);
                if u < a {
                    accepted = true;
                    state.subset = candidate;
                    current_energy = new_energy;
                    current_fit = new_fit;
                    state.energy = current_energy;
                }
            }
        }
        state.step = step;
        let improves = state.energy < trace.best_energy - resolution
            || (state.energy <= trace.best_energy + resolution
                && state.subset.len() < trace.best_subset.len());
        if improves {
            trace.best_energy = state.energy;
            trace.best_subset = state.subset.clone();
        }
        if cfg.record_trace {
            trace.records.push(TraceRecord {
                step,
                k: state.len(),
                energy: state.energy,
                temperature,
                kind: proposal.map(|p| p.kind),
                accepted,
            });
            trace.best_history.push(trace.best_energy);
        }
        state.temperature = (temperature * cfg.cooling_factor).max(f64::MIN_POSITIVE);
        observer(&state);
    }

    // Fresh recomputation, bypassing caches and incremental reuse.
    let verified = energy(pool, &trace.best_subset, eval_set, &cfg.solver())?;
    let scale = verified.abs().max(trace.best_energy.abs()).max(resolution);
    if (verified - trace.best_energy).abs() > 1e-9 * scale {
        log::warn!(
            "best energy {} differs from recomputation {verified}",
            trace.best_energy
        );
    }
    trace.best_energy = verified;

    Ok(McmcOutcome {
        best_library: pool.subset(&trace.best_subset)?,
        best_subset: trace.best_subset.clone(),
        best_energy: verified,
        initial_temperature,
        final_state: state,
        trace,
    })
}

/// Independent chains with seeds `cfg.seed + r`, run concurrently.
pub fn run_chains(
    pool: &SpectralLibrary,
    eval_set: &Dataset,
    cfg: &McmcConfig,
    repeats: usize,
) -> Result<Vec<McmcOutcome>> {
    (0..repeats as u64)
        .into_par_iter()
        .map(|r| {
            let c = McmcConfig {
                seed: cfg.seed.wrapping_add(r),
                ..cfg.clone()
            };
            run_rjmcmc(pool, eval_set, &c)
        })
        .collect()
}

/// Classes of the pool that a subset leaves uncovered.
pub fn missing_classes(
    pool: &SpectralLibrary,
    subset: &[usize],
    classes: &ClassSet,
) -> Vec<String> {
    classes
        .iter()
        .filter(|c| pool.elements().iter().any(|e| &e.class_id == *c))
        .filter(|c| !subset.iter().any(|&j| &pool.elements()[j].class_id == *c))
        .map(|c| c.to_string())
        .collect()
}
