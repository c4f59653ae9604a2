//! Command-level workflow. Every stage reads its inputs from files and writes
//! its outputs to files, so stages can be run, replaced or repeated
//! independently. Text outputs start with a `#` provenance block that echoes
//! the full configuration used.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archetypes::{
    accumulate_runs, sigma_heuristic, sivm_select, ArchetypeSet, Init, Sigma, SivmConfig,
};
use crate::data::{
    read_fraction_map, read_library, read_raster, write_fraction_map, write_library, write_raster,
    FractionMap, SynthConfig,
};
use crate::error::{Error, Result};
use crate::mcmc::{mean_std, run_chains, McmcConfig};
use crate::metrics::{
    aggregate_fractions, evaluate, mae, scatter_columns, usage_histogram, EvaluationReport,
    RmseConvention, UsageHistogram,
};
use crate::model::{
    ClassId, ClassSet, Dataset, FractionVector, Geometry, SpectralLibrary, DEFAULT_CLASSES,
};
use crate::preprocess::{lof_filter, LofConfig};
use crate::solver::{unmix_batch, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractMode {
    /// One SiVM run in input space from the mean.
    LinearMean,
    /// One kernel SiVM run from the mean.
    KernelMean,
    /// Kernel SiVM from random pixels; one library per run.
    KernelRandom,
    /// Union of the kernel-random runs.
    #[default]
    KernelAccumulate,
}

impl ExtractMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractMode::LinearMean => "linear-mean",
            ExtractMode::KernelMean => "kernel-mean",
            ExtractMode::KernelRandom => "kernel-random",
            ExtractMode::KernelAccumulate => "kernel-accumulate",
        }
    }
}

impl FromStr for ExtractMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear-mean" => Ok(ExtractMode::LinearMean),
            "kernel-mean" => Ok(ExtractMode::KernelMean),
            "kernel-random" => Ok(ExtractMode::KernelRandom),
            "kernel-accumulate" => Ok(ExtractMode::KernelAccumulate),
            _ => Err(format!(
                "unknown mode `{s}` (expected linear-mean, kernel-mean, kernel-random, kernel-accumulate)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub lof_enabled: bool,
    pub neighbors_k: usize,
    pub quantile: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let lof = LofConfig::default();
        PreprocessConfig {
            lof_enabled: true,
            neighbors_k: lof.neighbors_k,
            quantile: lof.quantile,
        }
    }
}

impl PreprocessConfig {
    pub fn lof(&self) -> LofConfig {
        LofConfig {
            neighbors_k: self.neighbors_k,
            quantile: self.quantile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub mode: ExtractMode,
    pub k_archetypes: usize,
    /// Random runs for the kernel-random and kernel-accumulate modes.
    pub runs: usize,
    /// Run `r` initializes with seed `seed + r`.
    pub seed: u64,
    /// Kernel width; the heuristic is used when absent.
    pub sigma: Option<f64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            mode: ExtractMode::default(),
            k_archetypes: 40,
            runs: 10,
            seed: 0,
            sigma: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub rmse_convention: RmseConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Independent optimization chains; chain `r` uses seed `mcmc.seed + r`.
    pub run_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { run_repeats: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Class order of fraction maps; derived from the library when absent.
    pub classes: Option<Vec<String>>,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub archetypes: ExtractConfig,
    pub mcmc: McmcConfig,
    pub solver: SolverConfig,
    pub metrics: MetricsConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.classes {
            ClassSet::new(c.iter().cloned())?;
        }
        self.synth.validate()?;
        if self.archetypes.k_archetypes == 0 {
            return Err(Error::InvalidConfig("k_archetypes must be >= 1".into()));
        }
        if self.archetypes.runs == 0 {
            return Err(Error::InvalidConfig("runs must be >= 1".into()));
        }
        if let Some(s) = self.archetypes.sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!("sigma must be > 0, got {s}")));
            }
        }
        if self.run.run_repeats == 0 {
            return Err(Error::InvalidConfig("run_repeats must be >= 1".into()));
        }
        self.mcmc.validate()?;
        self.solver.validate()
    }

    fn provenance(&self, command: &str) -> Vec<String> {
        let mut p = vec![format!(
            "sparse-unmix {command} {}",
            env!("CARGO_PKG_VERSION")
        )];
        p.push("config:".into());
        p.extend(self.to_toml().lines().map(|l| format!("  {l}")));
        p
    }

    /// Explicit classes, else the default class names when they cover the
    /// library, else the library classes in order of first appearance.
    pub fn class_set_for(&self, library: &SpectralLibrary) -> Result<ClassSet> {
        if let Some(c) = &self.classes {
            return ClassSet::new(c.iter().cloned());
        }
        let mut seen: Vec<&str> = Vec::new();
        for e in library.elements() {
            if !seen.contains(&e.class_id.as_str()) {
                seen.push(e.class_id.as_str());
            }
        }
        if seen.iter().all(|c| DEFAULT_CLASSES.contains(c)) {
            return Ok(ClassSet::default());
        }
        ClassSet::new(seen.iter().map(|s| s.to_string()))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_with_provenance(path: &Path, provenance: &[String], body: &str) -> Result<()> {
    let mut s = String::new();
    for l in provenance {
        writeln!(s, "# {l}").unwrap();
    }
    s.push_str(body);
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutputs {
    pub endmembers: PathBuf,
    pub raster: PathBuf,
    pub reference: PathBuf,
}

/// Writes `endmembers.csv`, `scene.bsq` (with header) and `reference.csv`.
pub fn cmd_synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<SynthOutputs> {
    cfg.validate()?;
    let scene = crate::data::synth_scene(&cfg.synth)?;
    create_dir(out_dir)?;
    let out = SynthOutputs {
        endmembers: out_dir.join("endmembers.csv"),
        raster: out_dir.join("scene.bsq"),
        reference: out_dir.join("reference.csv"),
    };
    let prov = cfg.provenance("synth");
    write_library(&out.endmembers, &scene.endmembers, &prov)?;
    write_raster(&out.raster, &scene.pixels, None)?;
    let geometry = scene
        .pixels
        .geometry
        .expect("synthetic scenes carry a geometry");
    let reference = scene
        .pixels
        .reference_fractions
        .as_ref()
        .expect("synthetic scenes carry reference fractions");
    write_fraction_map(
        &out.reference,
        reference,
        geometry,
        &scene.pixels.classes,
        &prov,
    )?;
    Ok(out)
}

/// Where candidate labels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSource {
    /// Fraction map; each listed pixel is labeled with its dominant class.
    Reference(PathBuf),
    /// `row,col,class` rows.
    Labels(PathBuf),
}

fn read_label_file(path: &Path) -> Result<Vec<((usize, usize), ClassId)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line != "row,col,class" {
                return Err(Error::parse(path, i + 1, "header must be `row,col,class`"));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 || f[2].is_empty() {
            return Err(Error::parse(path, i + 1, "expected `row,col,class`"));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(path, i + 1, format!("invalid index `{s}`")))
        };
        out.push(((parse(f[0])?, parse(f[1])?), ClassId::new(f[2])));
    }
    Ok(out)
}

/// Raster indices of `positions`, rejecting out-of-range and repeated keys.
fn position_indices(
    positions: &[(usize, usize)],
    geometry: Geometry,
    what: &Path,
) -> Result<Vec<usize>> {
    let mut seen = vec![false; geometry.pixel_count()];
    positions
        .iter()
        .map(|&(r, c)| {
            if r >= geometry.rows || c >= geometry.cols {
                return Err(Error::InvalidInput(format!(
                    "{}: pixel ({r},{c}) outside the {}x{} raster",
                    what.display(),
                    geometry.rows,
                    geometry.cols
                )));
            }
            let i = r * geometry.cols + c;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidInput(format!(
                    "{}: pixel ({r},{c}) listed twice",
                    what.display()
                )));
            }
            Ok(i)
        })
        .collect()
}

/// Labeled candidate pixels and their raster indices, in raster order.
fn labeled_candidates(
    raster: &Dataset,
    labels: &LabelSource,
    explicit: Option<&[String]>,
) -> Result<(Dataset, Vec<usize>)> {
    let geometry = raster.geometry.expect("rasters carry a geometry");
    let (pairs, classes): (Vec<(usize, ClassId)>, ClassSet) = match labels {
        LabelSource::Reference(path) => {
            let map = read_fraction_map(path)?;
            let idx = position_indices(&map.positions, geometry, path)?;
            let mut pairs = Vec::with_capacity(idx.len());
            for (i, f) in idx.into_iter().zip(&map.fractions) {
                let k = f.dominant().ok_or_else(|| {
                    Error::InvalidInput(format!("{}: pixel {i} has no fractions", path.display()))
                })?;
                pairs.push((i, map.classes.get(k).unwrap().clone()));
            }
            (pairs, map.classes)
        }
        LabelSource::Labels(path) => {
            let rows = read_label_file(path)?;
            let positions: Vec<(usize, usize)> = rows.iter().map(|(p, _)| *p).collect();
            let idx = position_indices(&positions, geometry, path)?;
            let mut names: Vec<String> = Vec::new();
            for (_, c) in &rows {
                if !names.iter().any(|n| n == c.as_str()) {
                    names.push(c.as_str().to_string());
                }
            }
            let classes = match explicit {
                Some(c) => ClassSet::new(c.iter().cloned())?,
                None => ClassSet::new(names)?,
            };
            (
                idx.into_iter()
                    .zip(rows.into_iter().map(|(_, c)| c))
                    .collect(),
                classes,
            )
        }
    };
    let mut pairs = pairs;
    pairs.sort_by_key(|(i, _)| *i);
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no labeled candidate pixels".into()));
    }
    let indices: Vec<usize> = pairs.iter().map(|(i, _)| *i).collect();
    let mut cands = raster.select(&indices);
    cands.geometry = None;
    let cands = cands
        .with_labels(pairs.into_iter().map(|(_, c)| c).collect())
        .with_classes(classes);
    cands.ensure_valid()?;
    Ok((cands, indices))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractReport {
    /// Written library files.
    pub outputs: Vec<PathBuf>,
    pub libraries: Vec<SpectralLibrary>,
    pub candidates: usize,
    /// Raster indices removed as outliers.
    pub removed: Vec<usize>,
    pub sigma: Option<f64>,
}

/// `lib.csv` -> `lib.run3.csv`.
pub fn run_path(out: &Path, run: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.run{run}.{}", ext.to_string_lossy()),
        None => format!("{stem}.run{run}"),
    };
    out.with_file_name(name)
}

/// Builds an archetype library from the labeled pixels of a raster.
///
/// `kernel-random` with more than one run writes one library per run next to
/// `out` (see [`run_path`]); every other mode writes `out`.
pub fn cmd_extract(
    cfg: &PipelineConfig,
    raster: &Path,
    labels: &LabelSource,
    out: &Path,
) -> Result<ExtractReport> {
    cfg.validate()?;
    let (scene, _) = read_raster(raster)?;
    let (mut cands, mut origin) = labeled_candidates(&scene, labels, cfg.classes.as_deref())?;
    let mut removed = Vec::new();
    if cfg.preprocess.lof_enabled {
        let f = lof_filter(&cands, &cfg.preprocess.lof())?;
        removed = f.removed.iter().map(|&k| origin[k]).collect();
        origin = f.kept.iter().map(|&k| origin[k]).collect();
        cands = f.cleaned;
    }
    let ex = &cfg.archetypes;
    if ex.k_archetypes > cands.len() {
        return Err(Error::InvalidInput(format!(
            "k_archetypes = {} exceeds the {} candidates left after outlier removal",
            ex.k_archetypes,
            cands.len()
        )));
    }
    let sigma = match ex.mode {
        ExtractMode::LinearMean => None,
        _ => Some(match ex.sigma {
            Some(s) => s,
            None => sigma_heuristic(&cands)?,
        }),
    };
    let kernel = |init| SivmConfig::kernel(ex.k_archetypes, init, Sigma::Value(sigma.unwrap()));
    let sets: Vec<ArchetypeSet> = match ex.mode {
        ExtractMode::LinearMean => vec![sivm_select(
            &cands,
            &SivmConfig::linear(ex.k_archetypes, Init::Mean),
        )?],
        ExtractMode::KernelMean => vec![sivm_select(&cands, &kernel(Init::Mean))?],
        ExtractMode::KernelRandom | ExtractMode::KernelAccumulate => (0..ex.runs as u64)
            .into_par_iter()
            .map(|r| {
                sivm_select(
                    &cands,
                    &kernel(Init::Random {
                        seed: ex.seed.wrapping_add(r),
                    }),
                )
            })
            .collect::<Result<_>>()?,
    };

    let mut prov = cfg.provenance("extract");
    prov.push(format!("mode = {}", ex.mode.as_str()));
    prov.push(format!("candidates = {}", cands.len()));
    prov.push(format!("outliers_removed = {}", removed.len()));
    if let Some(s) = sigma {
        prov.push(format!("sigma = {s:.17e}"));
    }
    let source = |i: usize| format!("px{}", origin[i]);
    let mut outputs = Vec::new();
    let mut libraries = Vec::new();
    let mut emit = |set: &ArchetypeSet, path: PathBuf, extra: Vec<String>| -> Result<()> {
        let lib = set.to_library_with(source)?;
        let mut p = prov.clone();
        p.extend(extra);
        write_library(&path, &lib, &p)?;
        outputs.push(path);
        libraries.push(lib);
        Ok(())
    };
    match ex.mode {
        ExtractMode::KernelRandom if sets.len() > 1 => {
            for (r, set) in sets.iter().enumerate() {
                emit(
                    set,
                    run_path(out, r),
                    vec![
                        format!("run = {r}"),
                        format!("seeds = {:?}", set.provenance.seeds),
                    ],
                )?;
            }
        }
        ExtractMode::KernelAccumulate => {
            let union = accumulate_runs(&sets)?;
            let seeds = format!("seeds = {:?}", union.provenance.seeds);
            emit(&union, out.to_path_buf(), vec![seeds])?;
        }
        _ => {
            let seeds = format!("seeds = {:?}", sets[0].provenance.seeds);
            emit(&sets[0], out.to_path_buf(), vec![seeds])?;
        }
    }
    Ok(ExtractReport {
        outputs,
        libraries,
        candidates: cands.len(),
        removed,
        sigma,
    })
}

/// Pixels of `raster` in the order of `reference`, with the reference
/// fractions reordered to `classes`.
fn referenced_pixels(raster: &Dataset, reference: &FractionMap, path: &Path) -> Result<Dataset> {
    let geometry = raster.geometry.expect("rasters carry a geometry");
    let idx = position_indices(&reference.positions, geometry, path)?;
    let mut d = raster.select(&idx);
    d.geometry = None;
    Ok(d.with_reference(reference.fractions.clone())
        .with_classes(reference.classes.clone()))
}

fn estimate_fractions(
    library: &SpectralLibrary,
    pixels: &Dataset,
    classes: &ClassSet,
    solver: &SolverConfig,
) -> Result<Vec<FractionVector>> {
    unmix_batch(library, pixels, solver)?
        .iter()
        .map(|r| aggregate_fractions(&r.coefficients, library, classes))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeRun {
    pub seed: u64,
    pub subset: Vec<usize>,
    pub energy: f64,
    /// Overall MAE on the referenced pixels.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub pool_size: usize,
    pub runs: Vec<OptimizeRun>,
    pub size: (f64, Option<f64>),
    pub energy: (f64, Option<f64>),
    pub mae: Option<(f64, Option<f64>)>,
    /// Overall MAE of the unpruned pool.
    pub pool_mae: Option<f64>,
    pub outputs: Vec<PathBuf>,
}

impl OptimizeReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let stat = |s: &mut String, name: &str, (mean, std): (f64, Option<f64>)| {
            writeln!(s, "{name}_mean = {mean:.17e}").unwrap();
            if let Some(sd) = std {
                writeln!(s, "{name}_std = {sd:.17e}").unwrap();
            }
        };
        writeln!(s, "pool_size = {}", self.pool_size).unwrap();
        if let Some(m) = self.pool_mae {
            writeln!(s, "pool_mae = {m:.17e}").unwrap();
        }
        writeln!(s, "repeats = {}", self.runs.len()).unwrap();
        for (r, run) in self.runs.iter().enumerate() {
            writeln!(s, "run.{r}.seed = {}", run.seed).unwrap();
            writeln!(s, "run.{r}.size = {}", run.subset.len()).unwrap();
            writeln!(s, "run.{r}.energy = {:.17e}", run.energy).unwrap();
            if let Some(m) = run.mae {
                writeln!(s, "run.{r}.mae = {m:.17e}").unwrap();
            }
        }
        stat(&mut s, "size", self.size);
        stat(&mut s, "energy", self.energy);
        if let Some(m) = self.mae {
            stat(&mut s, "mae", m);
        }
        s
    }
}

/// Prunes a pool with `run_repeats` independent chains, evaluated on the
/// pixels of `raster` (only those listed in `reference`, when given).
///
/// Writes `best_run<r>.csv`, `trace_run<r>.csv` (when tracing) and `summary.txt`.
pub fn cmd_optimize(
    cfg: &PipelineConfig,
    pool: &Path,
    raster: &Path,
    reference: Option<&Path>,
    out_dir: &Path,
) -> Result<OptimizeReport> {
    cfg.validate()?;
    let pool_lib = read_library(pool)?;
    let (scene, _) = read_raster(raster)?;
    let reference = match reference {
        Some(p) => Some((read_fraction_map(p)?, p)),
        None => None,
    };
    let eval = match &reference {
        Some((map, p)) => referenced_pixels(&scene, map, p)?,
        None => scene.clone(),
    };
    if eval.band_count() != Some(pool_lib.band_count()) {
        return Err(Error::DimensionMismatch {
            expected: pool_lib.band_count(),
            actual: eval.band_count().unwrap_or(0),
        });
    }
    let outcomes = run_chains(&pool_lib, &eval, &cfg.mcmc, cfg.run.run_repeats)?;

    let score = |lib: &SpectralLibrary| -> Result<Option<f64>> {
        match &reference {
            Some((map, _)) => {
                let est = estimate_fractions(lib, &eval, &map.classes, &cfg.mcmc.solver())?;
                Ok(Some(mae(&map.fractions, &est)?.overall))
            }
            None => Ok(None),
        }
    };
    let pool_mae = score(&pool_lib)?;

    create_dir(out_dir)?;
    let prov = cfg.provenance("optimize");
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut outputs = Vec::new();
    for (r, o) in outcomes.iter().enumerate() {
        let seed = cfg.mcmc.seed.wrapping_add(r as u64);
        let mut p = prov.clone();
        p.push(format!("run = {r}"));
        p.push(format!("seed = {seed}"));
        p.push(format!(
            "initial_temperature = {:.17e}",
            o.initial_temperature
        ));
        p.push(format!("best_energy = {:.17e}", o.best_energy));
        p.push(format!("pool_indices = {:?}", o.best_subset));
        let lib_path = out_dir.join(format!("best_run{r}.csv"));
        write_library(&lib_path, &o.best_library, &p)?;
        outputs.push(lib_path);
        if cfg.mcmc.record_trace {
            let trace_path = out_dir.join(format!("trace_run{r}.csv"));
            write_with_provenance(&trace_path, &p, &o.trace.to_delimited())?;
            outputs.push(trace_path);
        }
        runs.push(OptimizeRun {
            seed,
            subset: o.best_subset.clone(),
            energy: o.best_energy,
            mae: score(&o.best_library)?,
        });
    }
    let sizes: Vec<f64> = runs.iter().map(|r| r.subset.len() as f64).collect();
    let energies: Vec<f64> = runs.iter().map(|r| r.energy).collect();
    let maes: Option<Vec<f64>> = runs.iter().map(|r| r.mae).collect();
    let mut report = OptimizeReport {
        pool_size: pool_lib.len(),
        size: mean_std(&sizes),
        energy: mean_std(&energies),
        mae: maes.map(|m| mean_std(&m)),
        pool_mae,
        runs,
        outputs,
    };
    let summary = out_dir.join("summary.txt");
    write_with_provenance(&summary, &prov, &report.to_key_value())?;
    report.outputs.push(summary);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmixReport {
    pub classes: ClassSet,
    pub fractions: Vec<FractionVector>,
    pub histogram: UsageHistogram,
}

/// Unmixes every raster pixel, writing the fraction map and the usage histogram.
pub fn cmd_unmix(
    cfg: &PipelineConfig,
    library: &Path,
    raster: &Path,
    fractions_out: &Path,
    histogram_out: &Path,
) -> Result<UnmixReport> {
    cfg.validate()?;
    let lib = read_library(library)?;
    let (scene, header) = read_raster(raster)?;
    if header.bands != lib.band_count() {
        return Err(Error::DimensionMismatch {
            expected: lib.band_count(),
            actual: header.bands,
        });
    }
    let classes = cfg.class_set_for(&lib)?;
    let results = unmix_batch(&lib, &scene, &cfg.solver)?;
    let fractions = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            aggregate_fractions(&r.coefficients, &lib, &classes).map_err(|e| e.at_pixel(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let histogram = usage_histogram(&results, &lib)?;
    let prov = cfg.provenance("unmix");
    let geometry = Geometry {
        rows: header.rows,
        cols: header.cols,
    };
    write_fraction_map(fractions_out, &fractions, geometry, &classes, &prov)?;
    write_with_provenance(histogram_out, &prov, &histogram.to_delimited())?;
    Ok(UnmixReport {
        classes,
        fractions,
        histogram,
    })
}

/// Reference and estimate paired by `(row, col)`, in ascending position order,
/// with the estimate's columns reordered to the reference classes.
pub fn pair_fraction_maps(
    estimated: &FractionMap,
    reference: &FractionMap,
) -> Result<(Vec<FractionVector>, Vec<FractionVector>)> {
    let mut ref_names: Vec<&str> = reference.classes.iter().map(ClassId::as_str).collect();
    let mut est_names: Vec<&str> = estimated.classes.iter().map(ClassId::as_str).collect();
    ref_names.sort_unstable();
    est_names.sort_unstable();
    if ref_names != est_names {
        return Err(Error::InvalidInput(format!(
            "class sets differ: reference {ref_names:?}, estimate {est_names:?}"
        )));
    }
    let column: Vec<usize> = reference
        .classes
        .iter()
        .map(|c| estimated.classes.index_of(c).unwrap())
        .collect();

    let index = |map: &FractionMap, what: &str| -> Result<BTreeMap<(usize, usize), usize>> {
        let mut m = BTreeMap::new();
        for (i, &p) in map.positions.iter().enumerate() {
            if m.insert(p, i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "{what}: pixel {p:?} listed twice"
                )));
            }
        }
        Ok(m)
    };
    let ref_index = index(reference, "reference")?;
    let est_index = index(estimated, "estimate")?;
    if ref_index.len() != est_index.len() || ref_index.keys().any(|k| !est_index.contains_key(k)) {
        let missing = ref_index
            .keys()
            .filter(|k| !est_index.contains_key(k))
            .count();
        let extra = est_index
            .keys()
            .filter(|k| !ref_index.contains_key(k))
            .count();
        return Err(Error::InvalidInput(format!(
            "pixel sets differ: {missing} reference pixels missing from the estimate, {extra} extra"
        )));
    }
    let mut r = Vec::with_capacity(ref_index.len());
    let mut e = Vec::with_capacity(ref_index.len());
    for (key, &ri) in &ref_index {
        r.push(reference.fractions[ri].clone());
        let est = estimated.fractions[est_index[key]].values();
        e.push(FractionVector::new(
            column.iter().map(|&k| est[k]).collect(),
        ));
    }
    Ok((r, e))
}

/// Scores an estimated fraction map against a reference map. Writes the
/// key-value report, optionally the per-class table and one
/// `scatter_<class>.csv` per class.
pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    estimated: &Path,
    reference: &Path,
    report_out: &Path,
    table_out: Option<&Path>,
    scatter_dir: Option<&Path>,
) -> Result<EvaluationReport> {
    cfg.validate()?;
    let est_map = read_fraction_map(estimated)?;
    let ref_map = read_fraction_map(reference)?;
    let (r, e) = pair_fraction_maps(&est_map, &ref_map)?;
    let report = evaluate(&r, &e, &ref_map.classes, cfg.metrics.rmse_convention)?;
    let prov = cfg.provenance("evaluate");
    write_with_provenance(report_out, &prov, &report.to_key_value())?;
    if let Some(t) = table_out {
        write_with_provenance(t, &prov, &report.to_delimited())?;
    }
    if let Some(dir) = scatter_dir {
        create_dir(dir)?;
        for (k, class) in ref_map.classes.iter().enumerate() {
            let path = dir.join(format!("scatter_{class}.csv"));
            write_with_provenance(&path, &prov, &scatter_columns(&r, &e, k)?)?;
        }
    }
    Ok(report)
}
