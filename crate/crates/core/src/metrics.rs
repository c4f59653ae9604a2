//! Evaluation statistics for fraction estimates: class aggregation, MAE,
//! RMSE, R² with least-squares lines, the sparsity elbow scan, and the
//! per-atom usage histogram.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ClassId, ClassSet, CoefficientVector, Dataset, FractionVector, SpectralLibrary,
};
use crate::solver::{Dictionary, SolverConfig, UnmixResult};

/// Sums the activations of atoms sharing a class.
pub fn aggregate_fractions(
    alpha: &CoefficientVector,
    library: &SpectralLibrary,
    classes: &ClassSet,
) -> Result<FractionVector> {
    if alpha.len() != library.len() {
        return Err(Error::InvalidInput(format!(
            "{} coefficients for a library of {} elements",
            alpha.len(),
            library.len()
        )));
    }
    let mut out = vec![0.0; classes.len()];
    for (a, e) in alpha.alpha().iter().zip(library.elements()) {
        out[classes.require(&e.class_id)?] += a;
    }
    Ok(FractionVector::new(out))
}

fn check_shapes(reference: &[FractionVector], estimated: &[FractionVector]) -> Result<usize> {
    if reference.len() != estimated.len() {
        return Err(Error::InvalidInput(format!(
            "{} reference vs {} estimated pixels",
            reference.len(),
            estimated.len()
        )));
    }
    let c = reference.first().map_or(0, FractionVector::len);
    for (t, (r, e)) in reference.iter().zip(estimated).enumerate() {
        if r.len() != c || e.len() != c {
            return Err(Error::InvalidInput(format!(
                "pixel {t}: class counts {} / {} (expected {c})",
                r.len(),
                e.len()
            )));
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeSummary {
    pub classwise: Vec<f64>,
    /// Over pixels whose reference fraction for the class is positive;
    /// `None` when no such pixel exists.
    pub classwise_nonzero: Vec<Option<f64>>,
    /// Mean over all pixel-class pairs.
    pub overall: f64,
}

pub fn mae(reference: &[FractionVector], estimated: &[FractionVector]) -> Result<MaeSummary> {
    let c = check_shapes(reference, estimated)?;
    let t = reference.len();
    if t == 0 {
        return Err(Error::InvalidInput("no pixels to evaluate".into()));
    }
    let mut sum = vec![0.0; c];
    let mut nz_sum = vec![0.0; c];
    let mut nz_count = vec![0usize; c];
    for (r, e) in reference.iter().zip(estimated) {
        for (k, (rv, ev)) in r.values().iter().zip(e.values()).enumerate() {
            let diff = (rv - ev).abs();
            sum[k] += diff;
            if *rv > 0.0 {
                nz_sum[k] += diff;
                nz_count[k] += 1;
            }
        }
    }
    let overall = sum.iter().sum::<f64>() / (t * c) as f64;
    Ok(MaeSummary {
        classwise: sum.iter().map(|s| s / t as f64).collect(),
        classwise_nonzero: nz_sum
            .iter()
            .zip(&nz_count)
            .map(|(s, &n)| (n > 0).then(|| s / n as f64))
            .collect(),
        overall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RmseConvention {
    /// `sqrt(mean over pixel-class pairs of squared differences)`.
    #[default]
    Standard,
    /// `(1/(T C)) sum sqrt(d^2)`, which coincides with the overall MAE.
    Literal,
}

pub fn rmse(reference: &[FractionVector], estimated: &[FractionVector]) -> Result<f64> {
    rmse_with(reference, estimated, RmseConvention::Standard)
}

pub fn rmse_with(
    reference: &[FractionVector],
    estimated: &[FractionVector],
    convention: RmseConvention,
) -> Result<f64> {
    let c = check_shapes(reference, estimated)?;
    let pairs = (reference.len() * c) as f64;
    if pairs == 0.0 {
        return Err(Error::InvalidInput("no pixels to evaluate".into()));
    }
    let diffs = reference
        .iter()
        .zip(estimated)
        .flat_map(|(r, e)| r.values().iter().zip(e.values()).map(|(a, b)| a - b));
    Ok(match convention {
        RmseConvention::Standard => (diffs.map(|d| d * d).sum::<f64>() / pairs).sqrt(),
        RmseConvention::Literal => diffs.map(|d| (d * d).sqrt()).sum::<f64>() / pairs,
    })
}

/// Squared correlation and OLS line of `estimated` on `reference`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    /// `None` when either series is constant.
    pub r_squared: Option<f64>,
    /// `None` when the reference series is constant.
    pub line: Option<(f64, f64)>,
}

pub fn r_squared_and_line(reference: &[f64], estimated: &[f64]) -> Result<LinearFit> {
    if reference.len() != estimated.len() {
        return Err(Error::InvalidInput(format!(
            "{} reference vs {} estimated values",
            reference.len(),
            estimated.len()
        )));
    }
    let n = reference.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "regression needs >= 2 pixels, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = reference.iter().sum::<f64>() / nf;
    let my = estimated.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in reference.iter().zip(estimated) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let line = (sxx > 0.0).then(|| {
        let slope = sxy / sxx;
        (slope, my - slope * mx)
    });
    let r_squared = (sxx > 0.0 && syy > 0.0).then(|| (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0));
    Ok(LinearFit { r_squared, line })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub classes: ClassSet,
    pub classwise_mae: Vec<f64>,
    pub classwise_mae_nonzero: Vec<Option<f64>>,
    pub overall_mae: f64,
    pub overall_rmse: f64,
    pub r_squared: Vec<Option<f64>>,
    /// `(slope, intercept)` per class.
    pub regression_lines: Vec<Option<(f64, f64)>>,
    pub pixel_count: usize,
}

pub fn evaluate(
    reference: &[FractionVector],
    estimated: &[FractionVector],
    classes: &ClassSet,
    convention: RmseConvention,
) -> Result<EvaluationReport> {
    let c = check_shapes(reference, estimated)?;
    if c != classes.len() {
        return Err(Error::InvalidInput(format!(
            "fractions have {c} classes, class set has {}",
            classes.len()
        )));
    }
    let m = mae(reference, estimated)?;
    let overall_rmse = rmse_with(reference, estimated, convention)?;
    let mut r_squared = Vec::with_capacity(c);
    let mut regression_lines = Vec::with_capacity(c);
    for k in 0..c {
        let r: Vec<f64> = reference.iter().map(|f| f.values()[k]).collect();
        let e: Vec<f64> = estimated.iter().map(|f| f.values()[k]).collect();
        let fit = if r.len() >= 2 {
            r_squared_and_line(&r, &e)?
        } else {
            LinearFit {
                r_squared: None,
                line: None,
            }
        };
        r_squared.push(fit.r_squared);
        regression_lines.push(fit.line);
    }
    Ok(EvaluationReport {
        classes: classes.clone(),
        classwise_mae: m.classwise,
        classwise_mae_nonzero: m.classwise_nonzero,
        overall_mae: m.overall,
        overall_rmse,
        r_squared,
        regression_lines,
        pixel_count: reference.len(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.17e}"))
}

impl EvaluationReport {
    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        writeln!(s, "pixel_count = {}", self.pixel_count).unwrap();
        writeln!(s, "overall_mae = {:.17e}", self.overall_mae).unwrap();
        writeln!(s, "overall_rmse = {:.17e}", self.overall_rmse).unwrap();
        for (k, class) in self.classes.iter().enumerate() {
            writeln!(s, "mae.{class} = {:.17e}", self.classwise_mae[k]).unwrap();
            writeln!(
                s,
                "mae_nonzero.{class} = {}",
                opt(self.classwise_mae_nonzero[k])
            )
            .unwrap();
            writeln!(s, "r_squared.{class} = {}", opt(self.r_squared[k])).unwrap();
            let (slope, intercept) = match self.regression_lines[k] {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            writeln!(s, "slope.{class} = {}", opt(slope)).unwrap();
            writeln!(s, "intercept.{class} = {}", opt(intercept)).unwrap();
        }
        s
    }

    /// One row per class plus an `overall` row; the nonzero-reference MAE is
    /// also given in Table-style brackets.
    pub fn to_delimited(&self) -> String {
        let mut s = String::from("class,mae,mae_nonzero,r_squared,slope,intercept,display\n");
        for (k, class) in self.classes.iter().enumerate() {
            let (slope, intercept) = match self.regression_lines[k] {
                Some((a, b)) => (Some(a), Some(b)),
                None => (None, None),
            };
            let bracket = self.classwise_mae_nonzero[k]
                .map_or_else(|| "undefined".to_string(), |v| format!("{:.2}", 100.0 * v));
            writeln!(
                s,
                "{class},{:.17e},{},{},{},{},{:.2} ({bracket})",
                self.classwise_mae[k],
                opt(self.classwise_mae_nonzero[k]),
                opt(self.r_squared[k]),
                opt(slope),
                opt(intercept),
                100.0 * self.classwise_mae[k],
            )
            .unwrap();
        }
        writeln!(
            s,
            "overall,{:.17e},,,,,{:.2}",
            self.overall_mae,
            100.0 * self.overall_mae
        )
        .unwrap();
        writeln!(
            s,
            "overall_rmse,{:.17e},,,,,{:.2}",
            self.overall_rmse,
            100.0 * self.overall_rmse
        )
        .unwrap();
        s
    }
}

/// Two-column `reference,estimated` text for one class.
pub fn scatter_columns(
    reference: &[FractionVector],
    estimated: &[FractionVector],
    class_index: usize,
) -> Result<String> {
    let c = check_shapes(reference, estimated)?;
    if class_index >= c {
        return Err(Error::InvalidInput(format!(
            "class index {class_index} >= {c}"
        )));
    }
    let mut s = String::from("reference,estimated\n");
    for (r, e) in reference.iter().zip(estimated) {
        writeln!(
            s,
            "{:.17e},{:.17e}",
            r.values()[class_index],
            e.values()[class_index]
        )
        .unwrap();
    }
    Ok(s)
}

/// Stacked reconstruction error of `eval_set` for each sparsity in `w_range`,
/// sorted by `W`. The unsparsified solve is shared across all `W`.
pub fn elbow_scan(
    library: &SpectralLibrary,
    eval_set: &Dataset,
    w_range: &[usize],
    cfg: &SolverConfig,
) -> Result<Vec<(usize, f64)>> {
    if w_range.is_empty() {
        return Err(Error::InvalidConfig("empty sparsity range".into()));
    }
    let mut ws = w_range.to_vec();
    ws.sort_unstable();
    ws.dedup();
    if ws[0] == 0 {
        return Err(Error::InvalidConfig("sparsity W must be >= 1".into()));
    }
    let dict = Dictionary::from_library(library);
    let per_pixel: Vec<Vec<f64>> = eval_set
        .pixels
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let full = dict.solve(p.values(), cfg).map_err(|e| e.at_pixel(i))?;
            ws.iter()
                .map(|&w| {
                    let c = SolverConfig {
                        sparsity_w: w,
                        ..cfg.clone()
                    };
                    dict.sparsify(p.values(), &full, &c)
                        .map(|r| r.residual_norm * r.residual_norm)
                        .map_err(|e| e.at_pixel(i))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(ws
        .iter()
        .enumerate()
        .map(|(k, &w)| (w, per_pixel.iter().map(|r| r[k]).sum::<f64>().sqrt()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageHistogram {
    pub labels: Vec<ClassId>,
    pub source_ids: Vec<String>,
    /// Pixels with a positive activation of each atom.
    pub use_count: Vec<usize>,
    /// Sum of each atom's activations over all pixels.
    pub fraction_sum: Vec<f64>,
    pub pixel_count: usize,
}

pub fn usage_histogram(
    results: &[UnmixResult],
    library: &SpectralLibrary,
) -> Result<UsageHistogram> {
    let d = library.len();
    let mut use_count = vec![0; d];
    let mut fraction_sum = vec![0.0; d];
    for (t, r) in results.iter().enumerate() {
        let alpha = r.coefficients.alpha();
        if alpha.len() != d {
            return Err(Error::InvalidInput(format!(
                "result {t} has {} coefficients for {d} atoms",
                alpha.len()
            )));
        }
        for (j, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                use_count[j] += 1;
                fraction_sum[j] += a;
            }
        }
    }
    Ok(UsageHistogram {
        labels: library
            .elements()
            .iter()
            .map(|e| e.class_id.clone())
            .collect(),
        source_ids: library
            .elements()
            .iter()
            .map(|e| e.source_id.clone())
            .collect(),
        use_count,
        fraction_sum,
        pixel_count: results.len(),
    })
}

impl UsageHistogram {
    pub fn to_delimited(&self) -> String {
        let mut s = String::from("index,source_id,class,use_count,fraction_sum\n");
        for j in 0..self.use_count.len() {
            writeln!(
                s,
                "{j},{},{},{},{:.17e}",
                self.source_ids[j], self.labels[j], self.use_count[j], self.fraction_sum[j]
            )
            .unwrap();
        }
        s
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!("pixel_count = {}\n", self.pixel_count);
        for j in 0..self.use_count.len() {
            writeln!(s, "use_count.{j} = {}", self.use_count[j]).unwrap();
            writeln!(s, "fraction_sum.{j} = {:.17e}", self.fraction_sum[j]).unwrap();
        }
        s
    }
}
