//! Archetype extraction by greedy simplex volume maximization (SiVM), in the
//! input feature space or in the space induced by a Gaussian RBF kernel.
//!
//! The first archetype is the candidate farthest from an initialization
//! vector; every following one maximizes the sum of distances to all
//! archetypes selected so far. Archetypes are always candidate pixels,
//! referenced by index.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassId, Dataset, LabeledSpectrum, SpectralLibrary, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Linear,
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Mean input-space vector of the candidates.
    Mean,
    /// A candidate pixel drawn uniformly with the given seed.
    Random {
        seed: u64,
    },
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma {
    /// Half the mean per-band standard deviation of the candidates.
    Heuristic,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SivmConfig {
    pub k_archetypes: usize,
    pub space: Space,
    pub init: Init,
    /// Required for kernel space, ignored otherwise.
    pub sigma: Option<Sigma>,
}

impl SivmConfig {
    pub fn linear(k_archetypes: usize, init: Init) -> Self {
        SivmConfig {
            k_archetypes,
            space: Space::Linear,
            init,
            sigma: None,
        }
    }

    pub fn kernel(k_archetypes: usize, init: Init, sigma: Sigma) -> Self {
        SivmConfig {
            k_archetypes,
            space: Space::Kernel,
            init,
            sigma: Some(sigma),
        }
    }
}

/// Distance used by the greedy criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Euclidean,
    /// Metric induced by `k(a, b) = exp(-||a - b||^2 / (2 sigma^2))`.
    Rbf {
        sigma: f64,
    },
}

impl Metric {
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match *self {
            Metric::Euclidean => sq.sqrt(),
            Metric::Rbf { sigma } => {
                let k = (-sq / (2.0 * sigma * sigma)).exp();
                (2.0 - 2.0 * k).max(0.0).sqrt()
            }
        }
    }

    /// `(distance, ranking term)`. In kernel space the term is the log of
    /// the shortfall `sqrt(2) - d = 2k / (sqrt(2) + d)`: once `k` drops below
    /// machine precision `d` rounds to `sqrt(2)` and `k` may underflow, while
    /// `ln 2 - q - ln(sqrt(2) + d)` keeps the exact ordering.
    fn eval_keyed(&self, a: &[f64], b: &[f64]) -> (f64, f64) {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match *self {
            Metric::Euclidean => {
                let d = sq.sqrt();
                (d, d)
            }
            Metric::Rbf { sigma } => {
                let q = sq / (2.0 * sigma * sigma);
                let d = (2.0 - 2.0 * (-q).exp()).max(0.0).sqrt();
                (
                    d,
                    std::f64::consts::LN_2 - q - (std::f64::consts::SQRT_2 + d).ln(),
                )
            }
        }
    }

    /// Folds a term into a candidate's running rank (higher is better).
    fn accumulate(&self, rank: f64, term: f64) -> f64 {
        match self {
            Metric::Euclidean => rank + term,
            // rank = -ln(sum of shortfalls)
            Metric::Rbf { .. } => {
                let l = -rank;
                let (hi, lo) = if l > term { (l, term) } else { (term, l) };
                if lo == f64::NEG_INFINITY {
                    -hi
                } else {
                    -(hi + (lo - hi).exp().ln_1p())
                }
            }
        }
    }

    fn empty_rank(&self) -> f64 {
        match self {
            Metric::Euclidean => 0.0,
            Metric::Rbf { .. } => f64::INFINITY,
        }
    }
}

pub fn distance(a: &Spectrum, b: &Spectrum, metric: Metric) -> Result<f64> {
    if a.band_count() != b.band_count() {
        return Err(Error::DimensionMismatch {
            expected: a.band_count(),
            actual: b.band_count(),
        });
    }
    if let Metric::Rbf { sigma } = metric {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kernel sigma must be > 0, got {sigma}"
            )));
        }
    }
    Ok(metric.eval(a.values(), b.values()))
}

/// `0.5 *` the mean over bands of the per-band sample standard deviation.
pub fn sigma_heuristic(candidates: &Dataset) -> Result<f64> {
    let n = candidates.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "sigma heuristic needs at least 2 candidates, got {n}"
        )));
    }
    let m = candidates.band_count().unwrap_or(0);
    let mut mean = vec![0.0; m];
    for p in &candidates.pixels {
        for (acc, v) in mean.iter_mut().zip(p.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; m];
    for p in &candidates.pixels {
        for ((acc, v), mu) in var.iter_mut().zip(p.values()).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let mean_std = var.iter().map(|s| (s / (n - 1) as f64).sqrt()).sum::<f64>() / m as f64;
    let sigma = 0.5 * mean_std;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidInput(
            "candidates have zero variance; supply an explicit sigma".into(),
        ));
    }
    Ok(sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub configs: Vec<SivmConfig>,
    /// Seeds of every random initialization that contributed.
    pub seeds: Vec<u64>,
    /// Kernel width actually used, per contributing run (`None` in linear space).
    pub sigmas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchetypeSet {
    /// Candidate indices in selection order.
    pub indices: Vec<usize>,
    /// Greedy criterion value at each selection step.
    pub criteria: Vec<f64>,
    pub spectra: Vec<Spectrum>,
    pub labels: Option<Vec<ClassId>>,
    pub provenance: Provenance,
    candidate_count: usize,
    candidate_digest: u64,
}

impl ArchetypeSet {
    /// Builds a set from explicit candidate indices (no criterion values).
    pub fn from_indices(
        candidates: &Dataset,
        indices: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = candidates.len();
        for (pos, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::InvalidInput(format!(
                    "archetype index {i} out of range ({n} candidates)"
                )));
            }
            if indices[..pos].contains(&i) {
                return Err(Error::InvalidInput(format!(
                    "duplicate archetype index {i}"
                )));
            }
        }
        Ok(ArchetypeSet {
            criteria: vec![f64::NAN; indices.len()],
            spectra: indices
                .iter()
                .map(|&i| candidates.pixels[i].clone())
                .collect(),
            labels: candidates
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
            indices,
            provenance,
            candidate_count: n,
            candidate_digest: digest(candidates),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn candidate_count(&self) -> usize {
        self.candidate_count
    }

    /// Materializes the labeled library; source ids are `px<index>`.
    pub fn to_library(&self) -> Result<SpectralLibrary> {
        self.to_library_with(|i| format!("px{i}"))
    }

    pub fn to_library_with(&self, source_id: impl Fn(usize) -> String) -> Result<SpectralLibrary> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("archetypes are unlabeled".into()))?;
        let elements = self
            .indices
            .iter()
            .zip(&self.spectra)
            .zip(labels)
            .map(|((&i, s), c)| LabeledSpectrum::new(s.clone(), c.clone(), source_id(i)))
            .collect();
        SpectralLibrary::new(elements)
    }
}

/// FNV-1a over the candidate values, used to detect runs over different data.
fn digest(candidates: &Dataset) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: [u8; 8]| {
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    feed((candidates.len() as u64).to_le_bytes());
    for p in &candidates.pixels {
        for v in p.values() {
            feed(v.to_bits().to_le_bytes());
        }
    }
    h
}

fn argmax_excluding(values: &[f64], selected: &[bool]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &taken)) in values.iter().zip(selected).enumerate() {
        if !taken && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Greedy SiVM selection of `k_archetypes` candidates.
pub fn sivm_select(candidates: &Dataset, cfg: &SivmConfig) -> Result<ArchetypeSet> {
    let n = candidates.len();
    if n == 0 {
        return Err(Error::InvalidInput("no candidates".into()));
    }
    if cfg.k_archetypes == 0 || cfg.k_archetypes > n {
        return Err(Error::InvalidConfig(format!(
            "k_archetypes = {} must be in 1..={n}",
            cfg.k_archetypes
        )));
    }
    candidates.ensure_pixels_valid()?;
    let m = candidates.band_count().unwrap_or(0);

    let (metric, sigma_used) = match (cfg.space, cfg.sigma) {
        (Space::Linear, _) => (Metric::Euclidean, None),
        (Space::Kernel, None) => {
            return Err(Error::InvalidConfig("kernel space requires sigma".into()))
        }
        (Space::Kernel, Some(Sigma::Heuristic)) => {
            let s = sigma_heuristic(candidates)?;
            (Metric::Rbf { sigma: s }, Some(s))
        }
        (Space::Kernel, Some(Sigma::Value(s))) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "kernel sigma must be > 0, got {s}"
                )));
            }
            (Metric::Rbf { sigma: s }, Some(s))
        }
    };

    let mut seeds = Vec::new();
    let origin: Vec<f64> = match &cfg.init {
        Init::Mean => {
            let mut mean = vec![0.0; m];
            for p in &candidates.pixels {
                for (acc, v) in mean.iter_mut().zip(p.values()) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n as f64);
            mean
        }
        Init::Random { seed } => {
            seeds.push(*seed);
            let pick = crate::seeded_rng(*seed).random_range(0..n);
            candidates.pixels[pick].values().to_vec()
        }
        Init::Fixed(v) => {
            if v.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: v.len(),
                });
            }
            v.clone()
        }
    };

    let terms_to = |a: &[f64]| -> Vec<(f64, f64)> {
        candidates
            .pixels
            .par_iter()
            .map(|p| metric.eval_keyed(a, p.values()))
            .collect()
    };

    let mut selected = vec![false; n];
    let mut indices = Vec::with_capacity(cfg.k_archetypes);
    let mut criteria = Vec::with_capacity(cfg.k_archetypes);
    let mut score = vec![0.0; n];
    let mut rank = vec![metric.empty_rank(); n];
    let mut anchor = origin;
    loop {
        for ((s, r), (d, t)) in score.iter_mut().zip(rank.iter_mut()).zip(terms_to(&anchor)) {
            *s += d;
            *r = metric.accumulate(*r, t);
        }
        let (next, _) = argmax_excluding(&rank, &selected).expect("k <= n");
        selected[next] = true;
        indices.push(next);
        criteria.push(score[next]);
        if indices.len() == cfg.k_archetypes {
            break;
        }
        if indices.len() == 1 {
            // The initialization vector only drives the first pick.
            score.iter_mut().for_each(|s| *s = 0.0);
            rank.iter_mut().for_each(|r| *r = metric.empty_rank());
        }
        anchor = candidates.pixels[next].values().to_vec();
    }

    let provenance = Provenance {
        configs: vec![cfg.clone()],
        seeds,
        sigmas: vec![sigma_used],
    };
    let mut set = ArchetypeSet::from_indices(candidates, indices, provenance)?;
    set.criteria = criteria;
    Ok(set)
}

/// Union of several runs over the same candidates, ordered by first appearance.
pub fn accumulate_runs(runs: &[ArchetypeSet]) -> Result<ArchetypeSet> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidInput("no archetype runs to accumulate".into()))?;
    let mut out = ArchetypeSet {
        indices: Vec::new(),
        criteria: Vec::new(),
        spectra: Vec::new(),
        labels: first.labels.as_ref().map(|_| Vec::new()),
        provenance: Provenance {
            configs: Vec::new(),
            seeds: Vec::new(),
            sigmas: Vec::new(),
        },
        candidate_count: first.candidate_count,
        candidate_digest: first.candidate_digest,
    };
    let mut seen = vec![false; first.candidate_count];
    for (r, run) in runs.iter().enumerate() {
        if run.candidate_count != first.candidate_count
            || run.candidate_digest != first.candidate_digest
        {
            return Err(Error::InvalidInput(format!(
                "run {r} was drawn from a different candidate set"
            )));
        }
        if run.labels.is_none() {
            out.labels = None;
        }
        for (pos, &i) in run.indices.iter().enumerate() {
            if !seen[i] {
                seen[i] = true;
                out.indices.push(i);
                out.criteria.push(run.criteria[pos]);
                out.spectra.push(run.spectra[pos].clone());
                if let (Some(dst), Some(src)) = (out.labels.as_mut(), run.labels.as_ref()) {
                    dst.push(src[pos].clone());
                }
            }
        }
        out.provenance
            .configs
            .extend(run.provenance.configs.iter().cloned());
        out.provenance.seeds.extend(&run.provenance.seeds);
        out.provenance.sigmas.extend(&run.provenance.sigmas);
    }
    Ok(out)
}

/// Attaches the class of each archetype's source candidate.
pub fn label_archetypes(set: &ArchetypeSet, labels: &[ClassId]) -> Result<ArchetypeSet> {
    let assigned = set
        .indices
        .iter()
        .map(|&i| {
            labels.get(i).cloned().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "no label for candidate {i} ({} labels given)",
                    labels.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = set.clone();
    out.labels = Some(assigned);
    Ok(out)
}
