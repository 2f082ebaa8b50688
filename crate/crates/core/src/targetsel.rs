//! Locating each subject's slice at the reference anatomical level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SliceImage, Units};
use crate::metrics::{bin_indices, JointHistogram, NMI_BINS};
use crate::preprocess::window_and_rescale;
use crate::scalar::Scalar;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Bpr,
    Registration,
    SemiBpr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub subject_id: String,
    pub method: SelectionMethod,
    pub slice_index: usize,
    /// NMI for image-based methods, score distance for the score method.
    pub score: f64,
    pub reference_id: String,
}

/// Exhaustive in-plane translation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationSearch {
    /// Largest shift in pixels along each axis.
    pub radius: usize,
    pub step: usize,
}

impl Default for TranslationSearch {
    fn default() -> Self {
        Self { radius: 8, step: 2 }
    }
}

impl TranslationSearch {
    pub fn shifts(&self) -> Vec<(i64, i64)> {
        let r = self.radius as i64;
        let offsets: Vec<i64> = (-r..=r).step_by(self.step.max(1)).collect();
        offsets
            .iter()
            .flat_map(|&dy| offsets.iter().map(move |&dx| (dy, dx)))
            .collect()
    }
}

/// Nearest score; ties go to the lower index.
pub fn select_target_bpr(
    subject_id: &str,
    scores: &[f64],
    reference_score: f64,
) -> Result<TargetSelection> {
    if scores.is_empty() {
        return Err(Error::Data(format!("no anatomy scores for {subject_id}")));
    }
    if scores.iter().any(|s| !s.is_finite()) || !reference_score.is_finite() {
        return Err(Error::Data(format!("non-finite anatomy score for {subject_id}")));
    }
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.iter().enumerate() {
        let d = (s - reference_score).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(TargetSelection {
        subject_id: subject_id.to_string(),
        method: SelectionMethod::Bpr,
        slice_index: best.0,
        score: best.1,
        reference_id: format!("score:{reference_score:?}"),
    })
}

fn normalized_bins<T: Scalar>(volume: &Volume<T>, index: usize) -> Result<Vec<u16>> {
    let slice = volume.slice(index)?;
    let slice = match slice.units {
        Units::RawHu => window_and_rescale(&slice)?,
        Units::Normalized01 => slice,
    };
    bin_indices(&slice.pixels, NMI_BINS)
}

fn check_reference<T: Scalar>(volume: &Volume<T>, reference: &SliceImage<T>) -> Result<usize> {
    reference.require_normalized()?;
    let size = volume.size()?;
    if reference.pixels.rows() != size || reference.pixels.cols() != size {
        return Err(Error::Shape(format!(
            "reference is {}x{}, volume slices are {size}x{size}",
            reference.pixels.rows(),
            reference.pixels.cols()
        )));
    }
    Ok(size)
}

/// NMI between `reference` and `moving` translated by `(dy, dx)`, over the overlap only.
pub fn shifted_nmi(
    reference: &[u16],
    moving: &[u16],
    size: usize,
    (dy, dx): (i64, i64),
    hist: &mut JointHistogram,
) -> f64 {
    hist.clear();
    let n = size as i64;
    let (r0, r1) = (dy.max(0), (n + dy).min(n));
    let (c0, c1) = (dx.max(0), (n + dx).min(n));
    for r in r0..r1 {
        let ref_row = &reference[(r * n) as usize..((r + 1) * n) as usize];
        let mov_row = &moving[((r - dy) * n) as usize..((r - dy + 1) * n) as usize];
        for c in c0..c1 {
            hist.add(ref_row[c as usize], mov_row[(c - dx) as usize]);
        }
    }
    hist.nmi()
}

/// Best post-registration NMI of every slice, with the maximizing shift.
pub fn registration_scores<T: Scalar>(
    volume: &Volume<T>,
    reference: &SliceImage<T>,
    search: TranslationSearch,
) -> Result<Vec<(f64, (i64, i64))>> {
    let size = check_reference(volume, reference)?;
    if search.radius >= size {
        return Err(Error::config("search.radius", "must be smaller than the image size"));
    }
    if search.step == 0 {
        return Err(Error::config("search.step", "must be positive"));
    }
    let ref_bins = bin_indices(&reference.pixels, NMI_BINS)?;
    let shifts = search.shifts();
    let mut hist = JointHistogram::new(NMI_BINS);
    (0..volume.n_slices())
        .map(|i| {
            let mov = normalized_bins(volume, i)?;
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for &s in &shifts {
                let v = shifted_nmi(&ref_bins, &mov, size, s, &mut hist);
                if v > best.0 {
                    best = (v, s);
                }
            }
            Ok(best)
        })
        .collect()
}

/// Slice whose best translation maximizes NMI against the reference; ties go to the lower index.
pub fn select_target_registration<T: Scalar>(
    volume: &Volume<T>,
    reference: &SliceImage<T>,
    search: TranslationSearch,
) -> Result<TargetSelection> {
    let scores = registration_scores(volume, reference, search)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (v, _)) in scores.iter().enumerate() {
        if *v > best.1 {
            best = (i, *v);
        }
    }
    Ok(TargetSelection {
        subject_id: volume.subject_id.clone(),
        method: SelectionMethod::Registration,
        slice_index: best.0,
        score: best.1,
        reference_id: reference.meta.subject_id.clone(),
    })
}

/// Local NMI search around an initial selection.
///
/// Ties prefer the index closest to `initial_index`, then the lower index.
pub fn refine_target_semi_bpr<T: Scalar>(
    volume: &Volume<T>,
    initial_index: usize,
    reference: &SliceImage<T>,
    radius: i64,
) -> Result<TargetSelection> {
    if radius < 0 {
        return Err(Error::config("radius", "must be non-negative"));
    }
    let size = check_reference(volume, reference)?;
    if initial_index >= volume.n_slices() {
        return Err(Error::Range(format!(
            "initial index {initial_index} outside {} slices",
            volume.n_slices()
        )));
    }
    let ref_bins = bin_indices(&reference.pixels, NMI_BINS)?;
    let lo = initial_index.saturating_sub(radius as usize);
    let hi = (initial_index + radius as usize).min(volume.n_slices() - 1);
    let mut hist = JointHistogram::new(NMI_BINS);
    let mut best: Option<(usize, f64)> = None;
    for i in lo..=hi {
        let v = shifted_nmi(&ref_bins, &normalized_bins(volume, i)?, size, (0, 0), &mut hist);
        let better = match best {
            None => true,
            Some((bi, bv)) => {
                v > bv || (v == bv && i.abs_diff(initial_index) < bi.abs_diff(initial_index))
            }
        };
        if better {
            best = Some((i, v));
        }
    }
    let (slice_index, score) = best.expect("window contains the initial index");
    Ok(TargetSelection {
        subject_id: volume.subject_id.clone(),
        method: SelectionMethod::SemiBpr,
        slice_index,
        score,
        reference_id: reference.meta.subject_id.clone(),
    })
}

pub fn write_manifest(path: &Path, selections: &[TargetSelection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    for s in selections {
        w.serialize(s)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<TargetSelection>> {
    let shown = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(&shown, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(&shown, e.to_string())))
        .collect()
}

/// Copy of `img` translated by `(dy, dx)` pixels with zero fill.
pub fn translate<T: Scalar>(img: &Image<T>, (dy, dx): (i64, i64)) -> Image<T> {
    let (rows, cols) = (img.rows() as i64, img.cols() as i64);
    Image::from_fn(img.rows(), img.cols(), |r, c| {
        let (sr, sc) = (r as i64 - dy, c as i64 - dx);
        if sr < 0 || sc < 0 || sr >= rows || sc >= cols {
            T::zero()
        } else {
            img.get(sr as usize, sc as usize)
        }
    })
}
