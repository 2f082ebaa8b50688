//! Longitudinal harmonization and variability analysis.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SliceImage, Units};
use crate::metrics::{cv, format_value, nmi, SliceGenerator};
use crate::model::SliceGen;
use crate::phantom::SubjectSeries;
use crate::preprocess::{hu_to_unit, resize, window_and_rescale};
use crate::scalar::Scalar;
use crate::seeding;
use crate::stats::{wilcoxon_signed_rank, SignedRank};
use crate::volume::{hstack, write_pgm};

/// Adipose intensity band in HU.
pub const FAT_BAND_HU: (f64, f64) = (-190.0, -30.0);
/// Pixels at or below this HU count as outside the body.
pub const BODY_FLOOR_HU: f64 = -120.0;
/// Resolution harmonized slices are returned at.
pub const OUTPUT_SIZE: usize = 512;
pub const DEFAULT_JITTER_SPLIT_MM: f64 = 9.0;

const FCM_M: f64 = 2.0;
const FCM_TOL: f64 = 1e-5;
const FCM_MAX_ITER: usize = 300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FatMethod {
    #[default]
    Threshold,
    FuzzyCmeans,
    ExternalMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FatArea {
    pub area_mm2: f64,
    /// Set when the slice contained no body pixels.
    pub empty_body: bool,
}

fn body_floor() -> f64 {
    hu_to_unit(BODY_FLOOR_HU)
}

fn body_values<T: Scalar>(img: &Image<T>) -> Vec<f64> {
    let floor = body_floor();
    img.as_slice()
        .iter()
        .map(|v| v.to_f64_lossy())
        .filter(|&v| v > floor)
        .collect()
}

/// Two-cluster fuzzy c-means on scalar data; returns the centroids (low, high)
/// and each value's membership in the low cluster.
pub fn fuzzy_cmeans_1d(values: &[f64]) -> (f64, f64, Vec<f64>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut c = [lo, hi];
    let mut u = vec![0.5; values.len()];
    let exp = 2.0 / (FCM_M - 1.0);
    for _ in 0..FCM_MAX_ITER {
        let mut delta: f64 = 0.0;
        for (ui, &x) in u.iter_mut().zip(values) {
            let (d0, d1) = ((x - c[0]).abs(), (x - c[1]).abs());
            let next = if d0 == 0.0 {
                1.0
            } else if d1 == 0.0 {
                0.0
            } else {
                1.0 / (1.0 + (d0 / d1).powf(exp))
            };
            delta = delta.max((next - *ui).abs());
            *ui = next;
        }
        let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
        for (&ui, &x) in u.iter().zip(values) {
            let (w0, w1) = (ui.powf(FCM_M), (1.0 - ui).powf(FCM_M));
            n0 += w0;
            s0 += w0 * x;
            n1 += w1;
            s1 += w1 * x;
        }
        if n0 > 0.0 {
            c[0] = s0 / n0;
        }
        if n1 > 0.0 {
            c[1] = s1 / n1;
        }
        if delta < FCM_TOL {
            break;
        }
    }
    if c[0] > c[1] {
        c.swap(0, 1);
        u.iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    (c[0], c[1], u)
}

/// Fat-area proxy in mm² of a normalized slice.
///
/// `Threshold` counts body pixels inside the windowed fat band; the band's
/// lower edge sits below the display window, so the body floor bounds it in
/// practice. `FuzzyCmeans` clusters the body pixels into two groups and counts
/// those belonging mostly to the lower one. `ExternalMask` counts `mask`.
pub fn fat_area<T: Scalar>(
    slice: &SliceImage<T>,
    method: FatMethod,
    mask: Option<&[bool]>,
) -> Result<FatArea> {
    slice.require_normalized()?;
    let pixel = slice.pixel_area_mm2();
    if method == FatMethod::ExternalMask {
        let mask = mask.ok_or_else(|| Error::config("mask", "external_mask needs a mask"))?;
        if mask.len() != slice.pixels.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} pixels",
                mask.len(),
                slice.pixels.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        return Ok(FatArea {
            area_mm2: count as f64 * pixel,
            empty_body: count == 0,
        });
    }
    let body = body_values(&slice.pixels);
    if body.is_empty() {
        log::warn!("slice of {} has no body pixels", slice.meta.subject_id);
        return Ok(FatArea {
            area_mm2: 0.0,
            empty_body: true,
        });
    }
    let count = match method {
        FatMethod::Threshold => {
            let (lo, hi) = (hu_to_unit(FAT_BAND_HU.0), hu_to_unit(FAT_BAND_HU.1));
            body.iter().filter(|&&v| v >= lo && v <= hi).count()
        }
        FatMethod::FuzzyCmeans => {
            let (_, _, u) = fuzzy_cmeans_1d(&body);
            u.iter().filter(|&&m| m >= 0.5).count()
        }
        FatMethod::ExternalMask => unreachable!(),
    };
    Ok(FatArea {
        area_mm2: count as f64 * pixel,
        empty_body: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisitResult<T> {
    pub visit_index: u32,
    /// Normalized original at the output resolution.
    pub original: SliceImage<T>,
    pub harmonized: SliceImage<T>,
    pub fat_area_original: f64,
    pub fat_area_harmonized: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonizationResult<T> {
    pub subject_id: String,
    pub offset_spread_mm: f64,
    pub visits: Vec<VisitResult<T>>,
    pub cv_original: f64,
    pub cv_harmonized: f64,
    pub pairwise_nmi_original: Vec<f64>,
    pub pairwise_nmi_harmonized: Vec<f64>,
    pub warnings: Vec<String>,
}

fn normalized<T: Scalar>(slice: &SliceImage<T>) -> Result<SliceImage<T>> {
    match slice.units {
        Units::RawHu => window_and_rescale(slice),
        Units::Normalized01 => Ok(slice.clone()),
    }
}

fn pairwise_nmi<T: Scalar>(images: &[&Image<T>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            out.push(nmi(images[i], images[j])?);
        }
    }
    Ok(out)
}

fn cv_or_nan(values: &[f64], what: &str, warnings: &mut Vec<String>) -> f64 {
    cv(values).unwrap_or_else(|e| {
        warnings.push(format!("{what}: {e}"));
        f64::NAN
    })
}

/// Replace every visit with a generated slice at the target level.
pub fn harmonize_series<T: Scalar>(
    model: &SliceGen<T>,
    series: &SubjectSeries<T>,
    method: FatMethod,
    seed: u64,
) -> Result<HarmonizationResult<T>> {
    if model.step == 0 {
        return Err(Error::State("model has not been trained".into()));
    }
    if method == FatMethod::ExternalMask {
        return Err(Error::config("fat_method", "external masks do not exist for generated slices"));
    }
    if series.visits.len() < 2 {
        return Err(Error::Data(format!(
            "{} has {} visit(s), need at least 2",
            series.subject_id,
            series.visits.len()
        )));
    }
    let size = model.config.image_size;
    let mut warnings = Vec::new();
    let mut visits = Vec::with_capacity(series.visits.len());
    for v in &series.visits {
        let norm = normalized(&v.slice)?;
        let cond = resize(&norm, size)?;
        let key = format!("{}/{}", series.subject_id, v.visit_index);
        let visit_seed = seeding::derive_u64(seed, "harmonize", key.as_bytes());
        let generated = model.generate_slice(&cond, visit_seed)?;
        let original = resize(&norm, OUTPUT_SIZE)?;
        let harmonized = resize(&generated, OUTPUT_SIZE)?;
        let fa_o = fat_area(&original, method, None)?;
        let fa_h = fat_area(&harmonized, method, None)?;
        for (fa, which) in [(fa_o, "original"), (fa_h, "harmonized")] {
            if fa.empty_body {
                warnings.push(format!("visit {} {which}: empty body region", v.visit_index));
            }
        }
        visits.push(VisitResult {
            visit_index: v.visit_index,
            original,
            harmonized,
            fat_area_original: fa_o.area_mm2,
            fat_area_harmonized: fa_h.area_mm2,
        });
    }
    let fo: Vec<f64> = visits.iter().map(|v| v.fat_area_original).collect();
    let fh: Vec<f64> = visits.iter().map(|v| v.fat_area_harmonized).collect();
    let cv_original = cv_or_nan(&fo, "original CV", &mut warnings);
    let cv_harmonized = cv_or_nan(&fh, "harmonized CV", &mut warnings);
    let orig: Vec<&Image<T>> = visits.iter().map(|v| &v.original.pixels).collect();
    let harm: Vec<&Image<T>> = visits.iter().map(|v| &v.harmonized.pixels).collect();
    Ok(HarmonizationResult {
        subject_id: series.subject_id.clone(),
        offset_spread_mm: series.offset_spread_mm(),
        pairwise_nmi_original: pairwise_nmi(&orig)?,
        pairwise_nmi_harmonized: pairwise_nmi(&harm)?,
        visits,
        cv_original,
        cv_harmonized,
        warnings,
    })
}

/// Harmonize a cohort, skipping series with fewer than two visits.
pub fn harmonize_cohort<T: Scalar>(
    model: &SliceGen<T>,
    series: &[SubjectSeries<T>],
    method: FatMethod,
    seed: u64,
) -> Result<(Vec<HarmonizationResult<T>>, Vec<String>)> {
    let mut results = Vec::with_capacity(series.len());
    let mut skipped = Vec::new();
    for s in series {
        if s.visits.len() < 2 {
            let msg = format!("{}: fewer than 2 visits, excluded", s.subject_id);
            log::warn!("{msg}");
            skipped.push(msg);
            continue;
        }
        results.push(harmonize_series(model, s, method, seed)?);
    }
    Ok((results, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: String,
    pub n_visits: usize,
    pub offset_spread_mm: f64,
    pub high_jitter: bool,
    pub cv_original: f64,
    pub cv_harmonized: f64,
    /// `100 * (cv_original - cv_harmonized) / cv_original`.
    pub variance_reduction_pct: f64,
    pub mean_nmi_original: f64,
    pub mean_nmi_harmonized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n_subjects: usize,
    pub median_cv_original: f64,
    pub median_cv_harmonized: f64,
    pub mean_variance_reduction_pct: f64,
    /// Signed-rank test on `cv_harmonized - cv_original`.
    pub test: SignedRank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub jitter_split_mm: f64,
    pub rows: Vec<SubjectRow>,
    pub full: GroupSummary,
    pub high_jitter: GroupSummary,
    pub warnings: Vec<String>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn summarize(rows: &[&SubjectRow]) -> Result<GroupSummary> {
    let co: Vec<f64> = rows.iter().map(|r| r.cv_original).collect();
    let ch: Vec<f64> = rows.iter().map(|r| r.cv_harmonized).collect();
    let diffs: Vec<f64> = rows.iter().map(|r| r.cv_harmonized - r.cv_original).collect();
    let vr: Vec<f64> = rows
        .iter()
        .map(|r| r.variance_reduction_pct)
        .filter(|v| v.is_finite())
        .collect();
    Ok(GroupSummary {
        n_subjects: rows.len(),
        median_cv_original: median(&co),
        median_cv_harmonized: median(&ch),
        mean_variance_reduction_pct: mean(&vr),
        test: wilcoxon_signed_rank(&diffs)?,
    })
}

/// Paired CV comparison over the cohort and its high-jitter part.
///
/// Subjects are processed in `subject_id` order, so the report does not
/// depend on the order of `results`. A subject is high-jitter when its visit
/// offsets spread more than `jitter_split_mm`.
pub fn cv_analysis<T>(results: &[HarmonizationResult<T>], jitter_split_mm: f64) -> Result<CohortReport> {
    let mut sorted: Vec<&HarmonizationResult<T>> = results.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(sorted.len());
    for r in sorted {
        if r.visits.len() < 2 {
            warnings.push(format!("{}: fewer than 2 visits, excluded", r.subject_id));
            continue;
        }
        if !r.cv_original.is_finite() || !r.cv_harmonized.is_finite() {
            warnings.push(format!("{}: CV undefined, excluded", r.subject_id));
            continue;
        }
        warnings.extend(r.warnings.iter().map(|w| format!("{}: {w}", r.subject_id)));
        rows.push(SubjectRow {
            subject_id: r.subject_id.clone(),
            n_visits: r.visits.len(),
            offset_spread_mm: r.offset_spread_mm,
            high_jitter: r.offset_spread_mm > jitter_split_mm,
            cv_original: r.cv_original,
            cv_harmonized: r.cv_harmonized,
            variance_reduction_pct: if r.cv_original > 0.0 {
                100.0 * (r.cv_original - r.cv_harmonized) / r.cv_original
            } else {
                f64::NAN
            },
            mean_nmi_original: mean(&r.pairwise_nmi_original),
            mean_nmi_harmonized: mean(&r.pairwise_nmi_harmonized),
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let all: Vec<&SubjectRow> = rows.iter().collect();
    let high: Vec<&SubjectRow> = rows.iter().filter(|r| r.high_jitter).collect();
    Ok(CohortReport {
        jitter_split_mm,
        full: summarize(&all)?,
        high_jitter: summarize(&high)?,
        rows,
        warnings,
    })
}

impl CohortReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "subject_id,n_visits,offset_spread_mm,high_jitter,cv_original,cv_harmonized,\
             variance_reduction_pct,mean_nmi_original,mean_nmi_harmonized\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.subject_id,
                r.n_visits,
                format_value(r.offset_spread_mm),
                r.high_jitter,
                format_value(r.cv_original),
                format_value(r.cv_harmonized),
                format_value(r.variance_reduction_pct),
                format_value(r.mean_nmi_original),
                format_value(r.mean_nmi_harmonized),
            );
        }
        out
    }

    /// JSON summary without the per-subject rows; non-finite numbers become `null`.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "jitter_split_mm": self.jitter_split_mm,
            "full": self.full,
            "high_jitter": self.high_jitter,
            "warnings": self.warnings,
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12}{:>6}{:>12}{:>12}{:>10}{:>12}",
            "group", "n", "median CV", "harmonized", "p", "reduction %"
        );
        for (name, g) in [("all", &self.full), ("high jitter", &self.high_jitter)] {
            let _ = writeln!(
                out,
                "{:<12}{:>6}{:>12.4}{:>12.4}{:>10.2e}{:>12.1}",
                name,
                g.n_subjects,
                g.median_cv_original,
                g.median_cv_harmonized,
                g.test.p_two_sided,
                g.mean_variance_reduction_pct
            );
        }
        out
    }
}

/// Paired NMI distributions over every unordered visit pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmiSummary {
    pub original: Vec<f64>,
    pub harmonized: Vec<f64>,
    pub mean_original: f64,
    pub mean_harmonized: f64,
    /// All harmonized pairs are identical images.
    pub collapse: bool,
}

pub fn pairwise_nmi_analysis<T>(results: &[HarmonizationResult<T>]) -> NmiSummary {
    let original: Vec<f64> = results.iter().flat_map(|r| r.pairwise_nmi_original.iter().copied()).collect();
    let harmonized: Vec<f64> = results
        .iter()
        .flat_map(|r| r.pairwise_nmi_harmonized.iter().copied())
        .collect();
    let collapse = !harmonized.is_empty() && harmonized.iter().all(|&v| v >= 1.0 - 1e-12);
    if collapse {
        log::warn!("every harmonized pair is identical; the generator may have collapsed");
    }
    NmiSummary {
        mean_original: mean(&original),
        mean_harmonized: mean(&harmonized),
        original,
        harmonized,
        collapse,
    }
}

fn vstack<T: Scalar>(rows: &[Image<T>]) -> Result<Image<T>> {
    let cols = rows.first().map_or(0, |r| r.cols());
    if rows.iter().any(|r| r.cols() != cols) {
        return Err(Error::Shape("panel rows differ in width".into()));
    }
    let data: Vec<T> = rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect();
    Image::new(rows.iter().map(|r| r.rows()).sum(), cols, data)
}

/// One PGM per subject: each row shows a visit as original | harmonized.
pub fn write_panels<T: Scalar>(dir: &Path, results: &[HarmonizationResult<T>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in results {
        let rows = r
            .visits
            .iter()
            .map(|v| hstack(&[&v.original.pixels, &v.harmonized.pixels]))
            .collect::<Result<Vec<_>>>()?;
        write_pgm(&dir.join(format!("{}.pgm", r.subject_id)), &vstack(&rows)?)?;
    }
    Ok(())
}
