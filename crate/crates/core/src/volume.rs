//! Slice stacks and their on-disk form.
//!
//! A volume file is one JSON header line followed by little-endian voxels,
//! slice after slice in row-major order. Anatomy scores live in a sidecar
//! text file with one value per line. Single slices use the same layout
//! with their own header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SliceImage, SliceMeta, Units};
use crate::scalar::Scalar;

const MAGIC: &str = "slicegen-volume";
const SLICE_MAGIC: &str = "slicegen-slice";
const VERSION: u32 = 1;

/// A subject's axial slice stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub subject_id: String,
    pub slices: Vec<Image<T>>,
    pub z_positions_mm: Vec<f64>,
    /// Monotone body-part score per slice.
    pub anatomy_score: Vec<f64>,
    pub pixel_spacing_mm: f64,
    pub units: Units,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    subject_id: String,
    rows: usize,
    cols: usize,
    n_slices: usize,
    z0_mm: f64,
    z_spacing_mm: f64,
    pixel_spacing_mm: f64,
    units: Units,
    dtype: String,
}

impl<T: Scalar> Volume<T> {
    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn z_spacing_mm(&self) -> f64 {
        match self.z_positions_mm.as_slice() {
            [a, b, ..] => b - a,
            _ => 0.0,
        }
    }

    /// Image side length.
    pub fn size(&self) -> Result<usize> {
        self.slices
            .first()
            .ok_or_else(|| Error::Data(format!("volume {} has no slices", self.subject_id)))?
            .size()
    }

    pub fn slice(&self, index: usize) -> Result<SliceImage<T>> {
        let pixels = self.slices.get(index).ok_or_else(|| {
            Error::Range(format!(
                "slice {index} outside volume {} of {} slices",
                self.subject_id,
                self.slices.len()
            ))
        })?;
        Ok(SliceImage::new(
            pixels.clone(),
            self.units,
            SliceMeta::new(&self.subject_id, self.z_positions_mm[index], self.pixel_spacing_mm),
        ))
    }

    /// Check grid regularity and score monotonicity.
    pub fn validate(&self) -> Result<()> {
        let n = self.slices.len();
        if n < 2 || self.z_positions_mm.len() != n || self.anatomy_score.len() != n {
            return Err(Error::Data(format!(
                "volume {}: {} slices, {} z positions, {} scores",
                self.subject_id,
                n,
                self.z_positions_mm.len(),
                self.anatomy_score.len()
            )));
        }
        let step = self.z_spacing_mm();
        if !(step > 0.0) {
            return Err(Error::Data("z positions must increase".into()));
        }
        for (i, w) in self.z_positions_mm.windows(2).enumerate() {
            if ((w[1] - w[0]) - step).abs() > 1e-6 * step.max(1.0) {
                return Err(Error::Data(format!("irregular z step after slice {i}")));
            }
        }
        let dir = (self.anatomy_score[1] - self.anatomy_score[0]).signum();
        if dir == 0.0
            || self
                .anatomy_score
                .windows(2)
                .any(|w| (w[1] - w[0]).signum() != dir)
        {
            return Err(Error::Data("anatomy score is not strictly monotone".into()));
        }
        let size = self.size()?;
        if self.slices.iter().any(|s| s.rows() != size || s.cols() != size) {
            return Err(Error::Shape("slices differ in size".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let size = self.size()?;
        let header = Header {
            format: MAGIC.into(),
            version: VERSION,
            subject_id: self.subject_id.clone(),
            rows: size,
            cols: size,
            n_slices: self.slices.len(),
            z0_mm: self.z_positions_mm[0],
            z_spacing_mm: self.z_spacing_mm(),
            pixel_spacing_mm: self.pixel_spacing_mm,
            units: self.units,
            dtype: T::DTYPE.into(),
        };
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        buf.reserve(self.slices.len() * size * size * T::BYTES);
        for s in &self.slices {
            for &v in s.as_slice() {
                v.write_le(&mut buf);
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Load voxels; anatomy scores are left empty until [`Volume::load_scores`].
    pub fn load(path: &Path) -> Result<Self> {
        let shown = path.display().to_string();
        let bytes = fs::read(path)?;
        let (head, body) = split_header(&bytes, &shown)?;
        let header: Header = serde_json::from_slice(head).map_err(|e| Error::format(&shown, e.to_string()))?;
        if header.format != MAGIC || header.version != VERSION {
            return Err(Error::format(&shown, "not a version 1 volume"));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::format(
                &shown,
                format!("stored as {}, requested {}", header.dtype, T::DTYPE),
            ));
        }
        let plane = header.rows * header.cols;
        if body.len() != plane * header.n_slices * T::BYTES {
            return Err(Error::format(&shown, "voxel payload has the wrong length"));
        }
        let slices = body
            .chunks(plane * T::BYTES)
            .map(|chunk| {
                let data = chunk.chunks(T::BYTES).map(T::read_le).collect();
                Image::new(header.rows, header.cols, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let z_positions_mm = (0..header.n_slices)
            .map(|i| header.z0_mm + i as f64 * header.z_spacing_mm)
            .collect();
        Ok(Self {
            subject_id: header.subject_id,
            slices,
            z_positions_mm,
            anatomy_score: Vec::new(),
            pixel_spacing_mm: header.pixel_spacing_mm,
            units: header.units,
        })
    }

    pub fn save_scores(&self, path: &Path) -> Result<()> {
        write_scores(path, &self.anatomy_score)
    }

    pub fn load_scores(&mut self, path: &Path) -> Result<()> {
        let scores = read_scores(path)?;
        if scores.len() != self.slices.len() {
            return Err(Error::format(
                path.display().to_string(),
                format!("{} scores for {} slices", scores.len(), self.slices.len()),
            ));
        }
        self.anatomy_score = scores;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SliceHeader {
    format: String,
    version: u32,
    rows: usize,
    cols: usize,
    units: Units,
    dtype: String,
    meta: SliceMeta,
}

fn split_header<'a>(bytes: &'a [u8], shown: &str) -> Result<(&'a [u8], &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(shown, "missing header line"))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

/// Write one slice in the volume layout with a per-slice header.
pub fn save_slice<T: Scalar>(path: &Path, slice: &SliceImage<T>) -> Result<()> {
    let header = SliceHeader {
        format: SLICE_MAGIC.into(),
        version: VERSION,
        rows: slice.pixels.rows(),
        cols: slice.pixels.cols(),
        units: slice.units,
        dtype: T::DTYPE.into(),
        meta: slice.meta.clone(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for &v in slice.pixels.as_slice() {
        v.write_le(&mut buf);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_slice<T: Scalar>(path: &Path) -> Result<SliceImage<T>> {
    let shown = path.display().to_string();
    let bytes = fs::read(path)?;
    let (head, body) = split_header(&bytes, &shown)?;
    let header: SliceHeader = serde_json::from_slice(head).map_err(|e| Error::format(&shown, e.to_string()))?;
    if header.format != SLICE_MAGIC || header.version != VERSION {
        return Err(Error::format(&shown, "not a version 1 slice"));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            &shown,
            format!("stored as {}, requested {}", header.dtype, T::DTYPE),
        ));
    }
    if body.len() != header.rows * header.cols * T::BYTES {
        return Err(Error::format(&shown, "pixel payload has the wrong length"));
    }
    let data = body.chunks(T::BYTES).map(T::read_le).collect();
    Ok(SliceImage::new(
        Image::new(header.rows, header.cols, data)?,
        header.units,
        header.meta,
    ))
}

pub fn write_scores(path: &Path, scores: &[f64]) -> Result<()> {
    let mut out = String::new();
    for s in scores {
        out.push_str(&format!("{s:?}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let shown = path.display().to_string();
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|_| Error::format(&shown, format!("bad score `{l}`")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::format(&shown, "non-finite score"))
            }
        })
        .collect()
}

/// Write a normalized image as 8-bit binary PGM.
pub fn write_pgm<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.cols(), img.rows())?;
    let bytes: Vec<u8> = img
        .as_slice()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Side-by-side panel of equally sized images.
pub fn hstack<T: Scalar>(images: &[&Image<T>]) -> Result<Image<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("no images to stack".into()));
    };
    let rows = first.rows();
    if images.iter().any(|i| i.rows() != rows) {
        return Err(Error::Shape("panel images differ in height".into()));
    }
    let cols: usize = images.iter().map(|i| i.cols()).sum();
    let mut out = Image::zeros(rows, cols);
    let mut c0 = 0;
    for img in images {
        for r in 0..rows {
            for c in 0..img.cols() {
                out.set(r, c0 + c, img.get(r, c));
            }
        }
        c0 += img.cols();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Volume<f32> {
        Volume {
            subject_id: "v1".into(),
            slices: (0..3)
                .map(|k| Image::from_fn(4, 4, |r, c| (r * 4 + c + k) as f32 - 7.5))
                .collect(),
            z_positions_mm: vec![10.0, 13.0, 16.0],
            anatomy_score: vec![-1.0, 0.25, 1.5],
            pixel_spacing_mm: 0.8,
            units: Units::RawHu,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny();
        v.save(&dir.path().join("v.vol")).unwrap();
        v.save_scores(&dir.path().join("v.scores")).unwrap();
        let mut back = Volume::<f32>::load(&dir.path().join("v.vol")).unwrap();
        back.load_scores(&dir.path().join("v.scores")).unwrap();
        assert_eq!(back, v);
        assert!(Volume::<f64>::load(&dir.path().join("v.vol")).is_err());
    }

    #[test]
    fn slice_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = SliceMeta::new("v1", 13.0, 0.8);
        meta.visit_index = Some(2);
        let s = SliceImage::new(tiny().slices[1].clone(), Units::RawHu, meta);
        let path = dir.path().join("s.slice");
        save_slice(&path, &s).unwrap();
        assert_eq!(load_slice::<f32>(&path).unwrap(), s);
        assert!(Volume::<f32>::load(&path).is_err());
    }

    #[test]
    fn validate_rejects_non_monotone_scores() {
        let mut v = tiny();
        v.anatomy_score[2] = 0.0;
        assert!(v.validate().is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        tiny().save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Volume::<f32>::load(&p), Err(Error::Format { .. })));
    }
}
