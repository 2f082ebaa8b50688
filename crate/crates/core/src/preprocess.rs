//! Intensity windowing, resampling and paired augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SliceImage, Units};
use crate::scalar::{cst, Scalar};
use crate::seeding;

/// Soft-tissue window in HU.
pub const WINDOW_LOW_HU: f64 = -125.0;
pub const WINDOW_HIGH_HU: f64 = 275.0;

/// Map HU to the unit interval through the soft-tissue window (unclamped).
#[inline]
pub fn hu_to_unit(hu: f64) -> f64 {
    (hu - WINDOW_LOW_HU) / (WINDOW_HIGH_HU - WINDOW_LOW_HU)
}

#[inline]
pub fn unit_to_hu(v: f64) -> f64 {
    WINDOW_LOW_HU + v * (WINDOW_HIGH_HU - WINDOW_LOW_HU)
}

pub fn window_and_rescale<T: Scalar>(img: &SliceImage<T>) -> Result<SliceImage<T>> {
    if img.units != Units::RawHu {
        return Err(Error::Data(format!(
            "slice of {} is already normalized",
            img.meta.subject_id
        )));
    }
    if !img.pixels.all_finite() {
        return Err(Error::Data(format!(
            "non-finite HU value in slice of {}",
            img.meta.subject_id
        )));
    }
    let lo: T = cst(WINDOW_LOW_HU);
    let width: T = cst(WINDOW_HIGH_HU - WINDOW_LOW_HU);
    let pixels = img
        .pixels
        .map(|p| ((p - lo) / width).max(T::zero()).min(T::one()));
    Ok(SliceImage::new(pixels, Units::Normalized01, img.meta.clone()))
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_image<T: Scalar>(img: &Image<T>, rows: usize, cols: usize) -> Image<T> {
    if rows == img.rows() && cols == img.cols() {
        return img.clone();
    }
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, T)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, cst(s - i0 as f64))
            })
            .collect()
    };
    let ty = taps(rows, img.rows());
    let tx = taps(cols, img.cols());
    let mut out = Image::zeros(rows, cols);
    for (r, &(y0, y1, sy)) in ty.iter().enumerate() {
        for (c, &(x0, x1, sx)) in tx.iter().enumerate() {
            let top = img.get(y0, x0) + sx * (img.get(y0, x1) - img.get(y0, x0));
            let bot = img.get(y1, x0) + sx * (img.get(y1, x1) - img.get(y1, x0));
            out.set(r, c, top + sy * (bot - top));
        }
    }
    out
}

/// Resample a square slice to `target_size` (256 or 512), keeping the field of view.
pub fn resize<T: Scalar>(img: &SliceImage<T>, target_size: usize) -> Result<SliceImage<T>> {
    if !matches!(target_size, 256 | 512) {
        return Err(Error::config("target_size", "must be 256 or 512"));
    }
    let size = img.size()?;
    let mut out = img.with_pixels(resize_image(&img.pixels, target_size, target_size));
    out.meta.pixel_spacing_mm = img.meta.pixel_spacing_mm * size as f64 / target_size as f64;
    Ok(out)
}

/// One sampled spatial transform, applied identically to both images of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    /// Whole-pixel translation `(rows, cols)`.
    pub shift: (i64, i64),
    pub rotation_deg: f64,
}

impl Augment {
    pub const MAX_SHIFT_FRACTION: f64 = 0.1;
    pub const MAX_ROTATION_DEG: f64 = 10.0;

    pub fn sample<R: Rng>(rng: &mut R, size: usize) -> Self {
        let max_shift = (Self::MAX_SHIFT_FRACTION * size as f64).floor() as i64;
        let flip = rng.gen_bool(0.5);
        let shift = if rng.gen_bool(0.5) {
            (
                rng.gen_range(-max_shift..=max_shift),
                rng.gen_range(-max_shift..=max_shift),
            )
        } else {
            (0, 0)
        };
        let rotation_deg = if rng.gen_bool(0.5) {
            rng.gen_range(-Self::MAX_ROTATION_DEG..=Self::MAX_ROTATION_DEG)
        } else {
            0.0
        };
        Self {
            flip,
            shift,
            rotation_deg,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.shift == (0, 0) && self.rotation_deg == 0.0
    }

    /// Apply to one image; uncovered pixels become 0.
    pub fn apply<T: Scalar>(&self, img: &Image<T>) -> Image<T> {
        if self.is_identity() {
            return img.clone();
        }
        let (rows, cols) = (img.rows(), img.cols());
        let src = if self.flip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (dy, dx) = (self.shift.0 as f64, self.shift.1 as f64);
        if self.rotation_deg == 0.0 {
            return Image::from_fn(rows, cols, |r, c| {
                let (sr, sc) = (r as i64 - self.shift.0, c as i64 - self.shift.1);
                if sr < 0 || sc < 0 || sr >= rows as i64 || sc >= cols as i64 {
                    T::zero()
                } else {
                    src.get(sr as usize, sc as usize)
                }
            });
        }
        Image::from_fn(rows, cols, |r, c| {
            // Inverse map: undo the shift, then rotate back about the center.
            let (y, x) = (r as f64 - dy - cy, c as f64 - dx - cx);
            let sy = cos * y - sin * x + cy;
            let sx = sin * y + cos * x + cx;
            bilinear_or_zero(&src, sy, sx)
        })
    }
}

fn bilinear_or_zero<T: Scalar>(img: &Image<T>, y: f64, x: f64) -> T {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= img.rows() as f64 || c >= img.cols() as f64 {
            0.0
        } else {
            img.get(r as usize, c as usize).to_f64_lossy()
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
    cst(v)
}

/// Paired shift / rotation / flip, each drawn with probability 0.5.
pub fn augment_pair<T: Scalar>(
    cond: &SliceImage<T>,
    target: &SliceImage<T>,
    rng_seed: u64,
) -> Result<(SliceImage<T>, SliceImage<T>)> {
    cond.require_normalized()?;
    target.require_normalized()?;
    cond.pixels.same_shape(&target.pixels)?;
    let size = cond.size()?;
    let aug = Augment::sample(&mut seeding::stream_n(rng_seed, "augment", 0), size);
    Ok((
        cond.with_pixels(aug.apply(&cond.pixels)),
        target.with_pixels(aug.apply(&target.pixels)),
    ))
}
