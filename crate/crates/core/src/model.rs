//! Shared domain types: spectra, labeled libraries, coefficient and fraction
//! vectors, and datasets of pixels with optional ground truth.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Land-cover classes used when no class set is configured.
pub const DEFAULT_CLASSES: [&str; 4] = ["impervious", "vegetation", "soil", "water"];

/// Tolerance on `|sum - 1|` for coefficient vectors.
pub const SUM_TO_ONE_TOL: f64 = 1e-9;

/// Tolerance on `|sum - 1|` for reference fractions read from data.
pub const REFERENCE_SUM_TOL: f64 = 1e-6;

/// Class identity, keyed by name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(String);

impl ClassId {
    pub fn new(name: impl Into<String>) -> Self {
        ClassId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClassId {
    fn from(s: &str) -> Self {
        ClassId(s.to_string())
    }
}

/// Ordered set of land-cover classes. Fraction vectors are indexed in this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassSet(Vec<ClassId>);

impl Default for ClassSet {
    fn default() -> Self {
        ClassSet(DEFAULT_CLASSES.iter().map(|&c| ClassId::from(c)).collect())
    }
}

impl ClassSet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let classes: Vec<ClassId> = names.into_iter().map(|n| ClassId::new(n)).collect();
        if classes.is_empty() {
            return Err(Error::InvalidConfig("class set is empty".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.as_str().is_empty() || c.as_str().contains([',', '\n', '\r']) {
                return Err(Error::InvalidConfig(format!("invalid class name `{c}`")));
            }
            if classes[..i].contains(c) {
                return Err(Error::InvalidConfig(format!("duplicate class `{c}`")));
            }
        }
        Ok(ClassSet(classes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, class: &ClassId) -> Option<usize> {
        self.0.iter().position(|c| c == class)
    }

    pub fn require(&self, class: &ClassId) -> Result<usize> {
        self.index_of(class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    pub fn get(&self, index: usize) -> Option<&ClassId> {
        self.0.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassId> {
        self.0.iter()
    }
}

/// One reflectance vector over `M` bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    /// Checked constructor: non-empty and all values finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let s = Spectrum(values);
        s.check()?;
        Ok(s)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn band_count(&self) -> usize {
        self.0.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|v| !v.is_finite())
    }

    pub fn check(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidInput("spectrum has no bands".into()));
        }
        match self.first_non_finite() {
            Some(band) => Err(Error::NonFinite { band }),
            None => Ok(()),
        }
    }
}

/// Unchecked conversion; readers use it so that validation can report bad values.
impl From<Vec<f64>> for Spectrum {
    fn from(values: Vec<f64>) -> Self {
        Spectrum(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSpectrum {
    pub spectrum: Spectrum,
    pub class_id: ClassId,
    pub source_id: String,
}

impl LabeledSpectrum {
    pub fn new(spectrum: Spectrum, class_id: ClassId, source_id: impl Into<String>) -> Self {
        LabeledSpectrum {
            spectrum,
            class_id,
            source_id: source_id.into(),
        }
    }
}

/// Ordered, labeled dictionary of elementary spectra.
///
/// Element order is significant: coefficient vectors index into it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLibrary {
    elements: Vec<LabeledSpectrum>,
    band_count: usize,
}

impl SpectralLibrary {
    pub fn new(elements: Vec<LabeledSpectrum>) -> Result<Self> {
        let first = elements
            .first()
            .ok_or_else(|| Error::InvalidInput("spectral library is empty".into()))?;
        let band_count = first.spectrum.band_count();
        for (i, e) in elements.iter().enumerate() {
            if e.spectrum.band_count() != band_count {
                return Err(Error::DimensionMismatch {
                    expected: band_count,
                    actual: e.spectrum.band_count(),
                }
                .at_pixel(i));
            }
            e.spectrum.check().map_err(|err| err.at_pixel(i))?;
        }
        Ok(SpectralLibrary {
            elements,
            band_count,
        })
    }

    pub fn elements(&self) -> &[LabeledSpectrum] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn band_count(&self) -> usize {
        self.band_count
    }

    pub fn get(&self, index: usize) -> Option<&LabeledSpectrum> {
        self.elements.get(index)
    }

    /// Sub-library in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Result<SpectralLibrary> {
        let elements = indices
            .iter()
            .map(|&i| {
                self.elements.get(i).cloned().ok_or_else(|| {
                    Error::InvalidInput(format!("library index {i} out of range ({})", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SpectralLibrary::new(elements)
    }

    /// Number of elements per class, in class-set order.
    pub fn class_histogram(&self, classes: &ClassSet) -> Result<Vec<usize>> {
        let mut counts = vec![0; classes.len()];
        for e in &self.elements {
            counts[classes.require(&e.class_id)?] += 1;
        }
        Ok(counts)
    }
}

/// Per-pixel activations over a library.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    alpha: Vec<f64>,
}

impl CoefficientVector {
    /// Checked constructor: non-negative entries summing to one.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidInput("empty coefficient vector".into()));
        }
        if let Some(i) = alpha.iter().position(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "coefficient {i} is {} (must be finite and non-negative)",
                alpha[i]
            )));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > SUM_TO_ONE_TOL {
            return Err(Error::InvalidInput(format!("coefficients sum to {sum}")));
        }
        Ok(CoefficientVector { alpha })
    }

    pub(crate) fn from_solver(alpha: Vec<f64>) -> Self {
        CoefficientVector { alpha }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Indices of the nonzero activations, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

/// Per-class fractions, ordered like the [`ClassSet`] they were derived with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FractionVector(Vec<f64>);

impl FractionVector {
    pub fn new(fractions: Vec<f64>) -> Self {
        FractionVector(fractions)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Index of the largest fraction; ties go to the lowest index.
    pub fn dominant(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &f) in self.0.iter().enumerate() {
            if best.is_none_or(|(_, b)| f > b) {
                best = Some((i, f));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Raster geometry for a dataset whose pixels are linearized row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub rows: usize,
    pub cols: usize,
}

impl Geometry {
    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Geometry for `n` pixels with the divisor of `n` closest to its square root as width.
    pub fn near_square(n: usize) -> Geometry {
        if n == 0 {
            return Geometry { rows: 0, cols: 0 };
        }
        let mut cols = (n as f64).sqrt().floor() as usize;
        while cols > 1 && !n.is_multiple_of(cols) {
            cols -= 1;
        }
        let cols = cols.max(1);
        Geometry {
            rows: n / cols,
            cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<Spectrum>,
    pub labels: Option<Vec<ClassId>>,
    pub reference_fractions: Option<Vec<FractionVector>>,
    pub classes: ClassSet,
    pub geometry: Option<Geometry>,
}

impl Dataset {
    pub fn new(pixels: Vec<Spectrum>) -> Self {
        Dataset {
            pixels,
            labels: None,
            reference_fractions: None,
            classes: ClassSet::default(),
            geometry: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<ClassId>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_reference(mut self, fractions: Vec<FractionVector>) -> Self {
        self.reference_fractions = Some(fractions);
        self
    }

    pub fn with_classes(mut self, classes: ClassSet) -> Self {
        self.classes = classes;
        self
    }

    pub fn with_geometry(mut self, geometry: Geometry) -> Self {
        self.geometry = Some(geometry);
        self
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn band_count(&self) -> Option<usize> {
        self.pixels.first().map(Spectrum::band_count)
    }

    /// Keeps the pixels at `indices` (in that order), carrying labels and
    /// reference fractions along. Geometry is dropped.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            pixels: indices.iter().map(|&i| self.pixels[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
            reference_fractions: self
                .reference_fractions
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i].clone()).collect()),
            classes: self.classes.clone(),
            geometry: None,
        }
    }

    /// Labels derived from the dominant reference class of each pixel.
    pub fn dominant_labels(&self) -> Option<Vec<ClassId>> {
        let refs = self.reference_fractions.as_ref()?;
        refs.iter()
            .map(|f| f.dominant().and_then(|i| self.classes.get(i).cloned()))
            .collect()
    }

    /// Checks only the pixel values (consistent band count, finite values).
    pub fn ensure_pixels_valid(&self) -> Result<()> {
        let m = self.band_count().unwrap_or(0);
        for (i, p) in self.pixels.iter().enumerate() {
            if p.band_count() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: p.band_count(),
                }
                .at_pixel(i));
            }
            p.check().map_err(|e| e.at_pixel(i))?;
        }
        Ok(())
    }

    /// Fails with the first violation found by [`validate_dataset`].
    pub fn ensure_valid(&self) -> Result<()> {
        match validate_dataset(self).into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::InvalidInput(v.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyPixel {
        pixel: usize,
    },
    BandCount {
        pixel: usize,
        expected: usize,
        actual: usize,
    },
    NonFinite {
        pixel: usize,
        band: usize,
    },
    LabelCount {
        expected: usize,
        actual: usize,
    },
    UnknownLabel {
        pixel: usize,
        class: ClassId,
    },
    ReferenceCount {
        expected: usize,
        actual: usize,
    },
    ReferenceLength {
        pixel: usize,
        expected: usize,
        actual: usize,
    },
    ReferenceValue {
        pixel: usize,
        class: usize,
        value: f64,
    },
    ReferenceSum {
        pixel: usize,
        sum: f64,
    },
    GeometryMismatch {
        rows: usize,
        cols: usize,
        pixels: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPixel { pixel } => write!(f, "pixel {pixel} has no bands"),
            Violation::BandCount {
                pixel,
                expected,
                actual,
            } => write!(f, "pixel {pixel} has {actual} bands, expected {expected}"),
            Violation::NonFinite { pixel, band } => {
                write!(f, "pixel {pixel} band {band} is not finite")
            }
            Violation::LabelCount { expected, actual } => {
                write!(f, "{actual} labels for {expected} pixels")
            }
            Violation::UnknownLabel { pixel, class } => {
                write!(f, "pixel {pixel} has unknown class `{class}`")
            }
            Violation::ReferenceCount { expected, actual } => {
                write!(
                    f,
                    "{actual} reference fraction vectors for {expected} pixels"
                )
            }
            Violation::ReferenceLength {
                pixel,
                expected,
                actual,
            } => write!(
                f,
                "pixel {pixel} reference has {actual} fractions, expected {expected}"
            ),
            Violation::ReferenceValue {
                pixel,
                class,
                value,
            } => write!(f, "pixel {pixel} reference fraction {class} is {value}"),
            Violation::ReferenceSum { pixel, sum } => {
                write!(f, "pixel {pixel} reference fractions sum to {sum}")
            }
            Violation::GeometryMismatch { rows, cols, pixels } => {
                write!(f, "geometry {rows}x{cols} does not match {pixels} pixels")
            }
        }
    }
}

/// Lists every invariant violation in `dataset`; empty iff the dataset is valid.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = dataset.len();
    let expected = dataset.band_count().unwrap_or(0);
    for (i, p) in dataset.pixels.iter().enumerate() {
        if p.band_count() == 0 {
            out.push(Violation::EmptyPixel { pixel: i });
            continue;
        }
        if p.band_count() != expected {
            out.push(Violation::BandCount {
                pixel: i,
                expected,
                actual: p.band_count(),
            });
        }
        for (band, v) in p.values().iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFinite { pixel: i, band });
            }
        }
    }
    if let Some(labels) = &dataset.labels {
        if labels.len() != n {
            out.push(Violation::LabelCount {
                expected: n,
                actual: labels.len(),
            });
        }
        for (i, l) in labels.iter().enumerate() {
            if dataset.classes.index_of(l).is_none() {
                out.push(Violation::UnknownLabel {
                    pixel: i,
                    class: l.clone(),
                });
            }
        }
    }
    if let Some(refs) = &dataset.reference_fractions {
        if refs.len() != n {
            out.push(Violation::ReferenceCount {
                expected: n,
                actual: refs.len(),
            });
        }
        let c = dataset.classes.len();
        for (i, f) in refs.iter().enumerate() {
            if f.len() != c {
                out.push(Violation::ReferenceLength {
                    pixel: i,
                    expected: c,
                    actual: f.len(),
                });
            }
            for (class, &value) in f.values().iter().enumerate() {
                if !(value.is_finite() && (0.0..=1.0 + REFERENCE_SUM_TOL).contains(&value)) {
                    out.push(Violation::ReferenceValue {
                        pixel: i,
                        class,
                        value,
                    });
                }
            }
            let sum = f.sum();
            if !((sum - 1.0).abs() <= REFERENCE_SUM_TOL) {
                out.push(Violation::ReferenceSum { pixel: i, sum });
            }
        }
    }
    if let Some(g) = dataset.geometry {
        if g.pixel_count() != n {
            out.push(Violation::GeometryMismatch {
                rows: g.rows,
                cols: g.cols,
                pixels: n,
            });
        }
    }
    out
}
