//! 2D image containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major 2D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} image",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Side length of a square image.
    pub fn size(&self) -> Result<usize> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(Error::Shape(format!(
                "expected a square image, got {}x{}",
                self.rows, self.cols
            )))
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.rows == other.rows && self.cols == other.cols {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )))
        }
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mirror columns (left-right flip).
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self.get(r, self.cols - 1 - c))
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Intensity convention of a slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    RawHu,
    Normalized01,
}

/// Provenance carried alongside pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub subject_id: String,
    pub visit_index: Option<u32>,
    pub z_mm: f64,
    /// Physical in-plane pixel edge length.
    pub pixel_spacing_mm: f64,
}

impl SliceMeta {
    pub fn new(subject_id: impl Into<String>, z_mm: f64, pixel_spacing_mm: f64) -> Self {
        Self {
            subject_id: subject_id.into(),
            visit_index: None,
            z_mm,
            pixel_spacing_mm,
        }
    }
}

/// One axial slice with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage<T> {
    pub pixels: Image<T>,
    pub units: Units,
    pub meta: SliceMeta,
}

impl<T: Scalar> SliceImage<T> {
    pub fn new(pixels: Image<T>, units: Units, meta: SliceMeta) -> Self {
        Self {
            pixels,
            units,
            meta,
        }
    }

    /// Wrap a bare normalized image, e.g. for tests and generated outputs.
    pub fn normalized(pixels: Image<T>, meta: SliceMeta) -> Self {
        Self::new(pixels, Units::Normalized01, meta)
    }

    pub fn size(&self) -> Result<usize> {
        self.pixels.size()
    }

    pub fn pixel_area_mm2(&self) -> f64 {
        self.meta.pixel_spacing_mm * self.meta.pixel_spacing_mm
    }

    pub fn require_normalized(&self) -> Result<()> {
        if self.units == Units::Normalized01 {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "slice of {} is in raw HU, expected normalized intensities",
                self.meta.subject_id
            )))
        }
    }

    pub fn with_pixels(&self, pixels: Image<T>) -> Self {
        Self {
            pixels,
            units: self.units,
            meta: self.meta.clone(),
        }
    }
}
