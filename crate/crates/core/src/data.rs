//! File formats and synthetic scenes.
//!
//! * Library: delimited text, header `class,source_id,b1..bM`, one element
//!   per row, values with 17 significant digits.
//! * Raster: band-sequential little-endian `f32` payload with a `key = value`
//!   sidecar header at `<payload>.hdr`; pixels are linearized row-major.
//! * Fraction map: `row,col,<class...>` rows followed by a `mean,-,...` footer.
//!
//! Lines starting with `#` are provenance comments and are skipped by readers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ClassId, ClassSet, Dataset, FractionVector, Geometry, LabeledSpectrum, SpectralLibrary,
    Spectrum, DEFAULT_CLASSES,
};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn comment_block(provenance: &[String]) -> String {
    let mut s = String::new();
    for line in provenance {
        for l in line.lines() {
            writeln!(s, "# {l}").unwrap();
        }
    }
    s
}

/// Non-comment, non-blank lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Provenance comment lines (without the `# ` prefix).
pub fn read_provenance(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .map(|l| l.strip_prefix(' ').unwrap_or(l).to_string())
        .collect())
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("invalid number `{field}`")))
}

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() || value.contains([',', '\n', '\r']) || value.starts_with('#') {
        return Err(Error::InvalidInput(format!(
            "{what} `{value}` cannot be written"
        )));
    }
    Ok(())
}

pub fn write_library(path: &Path, library: &SpectralLibrary, provenance: &[String]) -> Result<()> {
    let mut s = comment_block(provenance);
    s.push_str("class,source_id");
    for b in 1..=library.band_count() {
        write!(s, ",b{b}").unwrap();
    }
    s.push('\n');
    for e in library.elements() {
        check_field(e.class_id.as_str(), "class")?;
        check_field(&e.source_id, "source id")?;
        write!(s, "{},{}", e.class_id, e.source_id).unwrap();
        for v in e.spectrum.values() {
            write!(s, ",{v:.16e}").unwrap();
        }
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_library(path: &Path) -> Result<SpectralLibrary> {
    let text = read_text(path)?;
    let mut lines = data_lines(&text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "class" || cols[1] != "source_id" {
        return Err(Error::parse(
            path,
            hline,
            "header must be `class,source_id,b1..bM`",
        ));
    }
    let bands = cols.len() - 2;
    let mut elements = Vec::new();
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != bands + 2 {
            return Err(Error::parse(
                path,
                ln,
                format!(
                    "row has {} bands, expected {bands}",
                    fields.len().saturating_sub(2)
                ),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(path, ln, "empty class"));
        }
        let values = fields[2..]
            .iter()
            .map(|f| parse_f64(path, ln, f))
            .collect::<Result<Vec<_>>>()?;
        let spectrum = Spectrum::new(values).map_err(|e| Error::parse(path, ln, e.to_string()))?;
        elements.push(LabeledSpectrum::new(
            spectrum,
            ClassId::new(fields[0]),
            fields[1],
        ));
    }
    if elements.is_empty() {
        return Err(Error::parse(path, hline, "library has no elements"));
    }
    SpectralLibrary::new(elements)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    /// Band centers in micrometers.
    pub wavelengths: Option<Vec<f64>>,
}

impl RasterHeader {
    pub fn payload_len(&self) -> u64 {
        (self.rows * self.cols * self.bands * 4) as u64
    }

    fn to_text(&self) -> String {
        let mut s = format!(
            "rows = {}\ncols = {}\nbands = {}\ninterleave = bsq\ndata_type = float32\nbyte_order = little\n",
            self.rows, self.cols, self.bands
        );
        if let Some(w) = &self.wavelengths {
            let list: Vec<String> = w.iter().map(|v| format!("{v}")).collect();
            writeln!(s, "wavelengths = {}", list.join(",")).unwrap();
        }
        s
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let (mut rows, mut cols, mut bands, mut wavelengths) = (None, None, None, None);
        for (ln, line) in data_lines(text) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, ln, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let positive = |v: &str| -> Result<usize> {
                match v.parse::<usize>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(Error::parse(
                        path,
                        ln,
                        format!("`{key}` must be a positive integer"),
                    )),
                }
            };
            match key {
                "rows" => rows = Some(positive(value)?),
                "cols" => cols = Some(positive(value)?),
                "bands" => bands = Some(positive(value)?),
                "interleave" if value == "bsq" => {}
                "data_type" if value == "float32" => {}
                "byte_order" if value == "little" => {}
                "interleave" | "data_type" | "byte_order" => {
                    return Err(Error::parse(
                        path,
                        ln,
                        format!("unsupported {key} `{value}`"),
                    ))
                }
                "wavelengths" => {
                    wavelengths = Some(
                        value
                            .split(',')
                            .map(|f| parse_f64(path, ln, f))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => return Err(Error::parse(path, ln, format!("unknown key `{key}`"))),
            }
        }
        let missing = |k: &str| Error::parse(path, 0, format!("header lacks `{k}`"));
        let header = RasterHeader {
            rows: rows.ok_or_else(|| missing("rows"))?,
            cols: cols.ok_or_else(|| missing("cols"))?,
            bands: bands.ok_or_else(|| missing("bands"))?,
            wavelengths,
        };
        if let Some(w) = &header.wavelengths {
            if w.len() != header.bands {
                return Err(Error::parse(
                    path,
                    0,
                    format!("{} wavelengths for {} bands", w.len(), header.bands),
                ));
            }
        }
        Ok(header)
    }
}

pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Writes `dataset` as a band-sequential raster. Without a geometry the
/// pixels are written as a single column.
pub fn write_raster(path: &Path, dataset: &Dataset, wavelengths: Option<&[f64]>) -> Result<()> {
    let bands = dataset
        .band_count()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty raster".into()))?;
    dataset.ensure_pixels_valid()?;
    let geometry = dataset.geometry.unwrap_or(Geometry {
        rows: dataset.len(),
        cols: 1,
    });
    let header = RasterHeader {
        rows: geometry.rows,
        cols: geometry.cols,
        bands,
        wavelengths: wavelengths.map(<[f64]>::to_vec),
    };
    let n = dataset.len();
    let mut payload = Vec::with_capacity(header.payload_len() as usize);
    for b in 0..bands {
        for p in &dataset.pixels {
            payload.extend_from_slice(&(p.values()[b] as f32).to_le_bytes());
        }
    }
    debug_assert_eq!(payload.len(), n * bands * 4);
    fs::write(path, &payload).map_err(|e| Error::io(path, e))?;
    write_text(&header_path(path), &header.to_text())
}

pub fn read_raster(path: &Path) -> Result<(Dataset, RasterHeader)> {
    let hpath = header_path(path);
    let header = RasterHeader::parse(&hpath, &read_text(&hpath)?)?;
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    if payload.len() as u64 != header.payload_len() {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: header.payload_len(),
            actual: payload.len() as u64,
        });
    }
    let n = header.rows * header.cols;
    let mut pixels = vec![Vec::with_capacity(header.bands); n];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        pixels[k % n].push(v as f64);
    }
    let dataset =
        Dataset::new(pixels.into_iter().map(Spectrum::from).collect()).with_geometry(Geometry {
            rows: header.rows,
            cols: header.cols,
        });
    Ok((dataset, header))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionMap {
    pub classes: ClassSet,
    /// `(row, col)` of each data row, in file order.
    pub positions: Vec<(usize, usize)>,
    pub fractions: Vec<FractionVector>,
    pub footer_means: Vec<f64>,
}

/// Column means of `fractions`, one per class.
pub fn class_means(fractions: &[FractionVector], classes: usize) -> Vec<f64> {
    let mut sums = vec![0.0; classes];
    for f in fractions {
        for (s, v) in sums.iter_mut().zip(f.values()) {
            *s += v;
        }
    }
    let n = fractions.len().max(1) as f64;
    sums.iter().map(|s| s / n).collect()
}

pub fn write_fraction_map(
    path: &Path,
    fractions: &[FractionVector],
    geometry: Geometry,
    classes: &ClassSet,
    provenance: &[String],
) -> Result<()> {
    if fractions.len() != geometry.pixel_count() {
        return Err(Error::InvalidInput(format!(
            "{} fraction vectors for a {}x{} map",
            fractions.len(),
            geometry.rows,
            geometry.cols
        )));
    }
    let mut s = comment_block(provenance);
    s.push_str("row,col");
    for c in classes.iter() {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    for (i, f) in fractions.iter().enumerate() {
        if f.len() != classes.len() {
            return Err(Error::InvalidInput(format!(
                "pixel {i} has {} fractions for {} classes",
                f.len(),
                classes.len()
            )));
        }
        let (r, c) = geometry.row_col(i);
        write!(s, "{r},{c}").unwrap();
        for v in f.values() {
            write!(s, ",{v:.16e}").unwrap();
        }
        s.push('\n');
    }
    s.push_str("mean,-");
    for m in class_means(fractions, classes.len()) {
        write!(s, ",{m:.16e}").unwrap();
    }
    s.push('\n');
    write_text(path, &s)
}

pub fn read_fraction_map(path: &Path) -> Result<FractionMap> {
    let text = read_text(path)?;
    let mut lines = data_lines(&text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "row" || cols[1] != "col" {
        return Err(Error::parse(
            path,
            hline,
            "header must be `row,col,<classes>`",
        ));
    }
    let classes = ClassSet::new(cols[2..].iter().copied())
        .map_err(|e| Error::parse(path, hline, e.to_string()))?;
    let c = classes.len();
    let mut positions = Vec::new();
    let mut fractions = Vec::new();
    let mut footer = None;
    for (ln, line) in lines {
        if footer.is_some() {
            return Err(Error::parse(path, ln, "data after footer"));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != c + 2 {
            return Err(Error::parse(
                path,
                ln,
                format!("row has {} fields, expected {}", fields.len(), c + 2),
            ));
        }
        let values = fields[2..]
            .iter()
            .map(|f| parse_f64(path, ln, f))
            .collect::<Result<Vec<_>>>()?;
        if fields[0] == "mean" {
            footer = Some(values);
            continue;
        }
        let index = |f: &str| {
            f.parse::<usize>()
                .map_err(|_| Error::parse(path, ln, format!("invalid index `{f}`")))
        };
        positions.push((index(fields[0])?, index(fields[1])?));
        fractions.push(FractionVector::new(values));
    }
    let footer_means = footer.ok_or_else(|| Error::parse(path, hline, "missing `mean` footer"))?;
    Ok(FractionMap {
        classes,
        positions,
        fractions,
        footer_means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_endmembers: usize,
    pub n_classes: usize,
    pub bands: usize,
    pub n_pixels: usize,
    /// Endmembers mixed per pixel.
    pub sparsity: usize,
    pub noise_sigma: f64,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_endmembers: 20,
            n_classes: 4,
            bands: 111,
            n_pixels: 500,
            sparsity: 3,
            noise_sigma: 0.0,
            dirichlet_alpha: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_endmembers == 0 || self.bands == 0 || self.n_classes == 0 || self.sparsity == 0 {
            return bad("n_endmembers, bands, n_classes and sparsity must be >= 1");
        }
        if self.sparsity > self.n_endmembers {
            return bad("sparsity exceeds n_endmembers");
        }
        if self.n_classes > self.n_endmembers {
            return bad("n_classes exceeds n_endmembers");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            return bad("dirichlet_alpha must be > 0");
        }
        Ok(())
    }

    /// The first `n_classes` default class names, then `class<i>`.
    pub fn classes(&self) -> ClassSet {
        ClassSet::new((0..self.n_classes).map(|i| match DEFAULT_CLASSES.get(i) {
            Some(name) => name.to_string(),
            None => format!("class{i}"),
        }))
        .expect("generated class names are valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub endmembers: SpectralLibrary,
    /// Pixels with reference fractions, dominant-class labels and geometry.
    pub pixels: Dataset,
    /// True `(endmember, weight)` pairs per pixel.
    pub weights: Vec<Vec<(usize, f64)>>,
}

/// Smooth random spectrum in `[0, 1]`: a baseline plus 3 to 6 Gaussian bumps.
fn smooth_spectrum(bands: usize, rng: &mut impl Rng) -> Vec<f64> {
    let m = bands as f64;
    let baseline = rng.random_range(0.02..0.2);
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(3..=6))
        .map(|_| {
            let center = rng.random_range(0.0..m);
            let width = rng.random_range((m / 30.0).max(0.5)..(m / 6.0).max(1.0));
            let amp = rng.random_range(0.1..0.8);
            (center, width, amp)
        })
        .collect();
    let mut s: Vec<f64> = (0..bands)
        .map(|b| {
            let x = b as f64;
            baseline
                + bumps
                    .iter()
                    .map(|&(c, w, a)| a * (-(x - c) * (x - c) / (2.0 * w * w)).exp())
                    .sum::<f64>()
        })
        .collect();
    let max = s.iter().copied().fold(0.0, f64::max);
    if max > 1.0 {
        s.iter_mut().for_each(|v| *v /= max);
    }
    s
}

/// Linear-mixture scene fully determined by `cfg.seed`.
pub fn synth_scene(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = crate::seeded_rng(cfg.seed);
    let classes = cfg.classes();
    let endmembers = SpectralLibrary::new(
        (0..cfg.n_endmembers)
            .map(|e| {
                LabeledSpectrum::new(
                    Spectrum::from(smooth_spectrum(cfg.bands, &mut rng)),
                    classes.get(e % cfg.n_classes).unwrap().clone(),
                    format!("em{e}"),
                )
            })
            .collect(),
    )?;
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("dirichlet_alpha: {e}")))?;
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;

    let mut pixels = Vec::with_capacity(cfg.n_pixels);
    let mut reference = Vec::with_capacity(cfg.n_pixels);
    let mut weights = Vec::with_capacity(cfg.n_pixels);
    for _ in 0..cfg.n_pixels {
        let mut chosen = sample(&mut rng, cfg.n_endmembers, cfg.sparsity).into_vec();
        chosen.sort_unstable();
        let mut w: Vec<f64> = chosen.iter().map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        } else {
            w.iter_mut().for_each(|v| *v = 1.0 / chosen.len() as f64);
        }
        let mut x = vec![0.0; cfg.bands];
        let mut f = vec![0.0; cfg.n_classes];
        for (&e, &wv) in chosen.iter().zip(&w) {
            for (xb, sb) in x.iter_mut().zip(endmembers.elements()[e].spectrum.values()) {
                *xb += wv * sb;
            }
            f[e % cfg.n_classes] += wv;
        }
        if cfg.noise_sigma > 0.0 {
            for xb in x.iter_mut() {
                *xb = (*xb + noise.sample(&mut rng)).max(0.0);
            }
        }
        pixels.push(Spectrum::from(x));
        reference.push(FractionVector::new(f));
        weights.push(chosen.into_iter().zip(w).collect());
    }
    let mut dataset = Dataset::new(pixels)
        .with_classes(classes)
        .with_reference(reference)
        .with_geometry(Geometry::near_square(cfg.n_pixels));
    dataset.labels = dataset.dominant_labels();
    Ok(SyntheticScene {
        endmembers,
        pixels: dataset,
        weights,
    })
}
