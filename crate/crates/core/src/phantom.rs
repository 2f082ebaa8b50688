//! Procedural abdominal phantoms.
//!
//! Each subject is a stack of nested ellipses whose geometry follows splines
//! in the anatomical coordinate `u = z - z_target`: an outer body contour, a
//! subcutaneous fat ring, a central visceral fat blob and up to four organ
//! blobs parked in fixed peripheral slots so shapes never overlap. Because
//! the geometry is analytic, the fat area at any z has a closed form.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SliceImage, SliceMeta, Units};
use crate::scalar::{cst, Scalar};
use crate::seeding;
use crate::volume::{load_slice, save_slice};
use crate::spline::Spline;
use crate::volume::Volume;

pub const HU_BACKGROUND: f64 = -1000.0;
pub const HU_FAT: f64 = -100.0;
pub const HU_SOFT: f64 = 50.0;
pub const HU_ORGAN: f64 = 150.0;

const KNOT_START: f64 = -120.0;
const KNOT_STEP: f64 = 30.0;
const N_KNOTS: usize = 9;
/// Normalized distance of organ slots from the body center.
const ORGAN_SLOT: f64 = 0.55;
const ORGAN_MAX_RADIUS: f64 = 0.2;
const VISCERAL_MAX_RADIUS: f64 = 0.33;
/// Largest displacement of a subject's target level from the volume middle.
const TARGET_SPREAD_SLICES: i64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Fat,
    Soft,
    Organ,
}

impl Tissue {
    pub fn hu(self) -> f64 {
        match self {
            Tissue::Background => HU_BACKGROUND,
            Tissue::Fat => HU_FAT,
            Tissue::Soft => HU_SOFT,
            Tissue::Organ => HU_ORGAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Organ {
    /// Slot direction in radians.
    pub angle: f64,
    /// Radius in inner-ellipse normalized units.
    pub radius: Spline,
}

/// Geometry of one subject as splines over the anatomical coordinate (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectShape {
    /// Outer semi-axes (mm), lateral and anterior-posterior.
    pub semi_a: Spline,
    pub semi_b: Spline,
    /// Subcutaneous fat thickness (mm).
    pub fat_thickness: Spline,
    /// Visceral fat blob radius in inner-ellipse normalized units.
    pub visceral_radius: Spline,
    pub organs: Vec<Organ>,
}

/// Evaluated cross-section at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub a: f64,
    pub b: f64,
    pub fat: f64,
    pub visceral: f64,
    /// `(center_x, center_y, radius)` in normalized inner coordinates.
    pub organs: Vec<(f64, f64, f64)>,
}

impl Section {
    pub fn inner(&self) -> (f64, f64) {
        (self.a - self.fat, self.b - self.fat)
    }

    /// Closed-form fat area: annulus between the ellipses plus the visceral blob.
    pub fn fat_area_mm2(&self) -> f64 {
        let (ai, bi) = self.inner();
        PI * (self.a * self.b - ai * bi) + PI * self.visceral * self.visceral * ai * bi
    }

    /// Tissue at in-plane position `(x, y)` in mm from the body center.
    pub fn tissue(&self, x: f64, y: f64) -> Tissue {
        let (nx, ny) = (x / self.a, y / self.b);
        if nx * nx + ny * ny > 1.0 {
            return Tissue::Background;
        }
        let (ai, bi) = self.inner();
        let (px, py) = (x / ai, y / bi);
        let r2 = px * px + py * py;
        if r2 > 1.0 || r2 <= self.visceral * self.visceral {
            return Tissue::Fat;
        }
        for &(cx, cy, r) in &self.organs {
            let (dx, dy) = (px - cx, py - cy);
            if dx * dx + dy * dy <= r * r {
                return Tissue::Organ;
            }
        }
        Tissue::Soft
    }
}

fn knot_u(j: usize) -> f64 {
    KNOT_START + KNOT_STEP * j as f64
}

fn spline_from(f: impl Fn(f64) -> f64) -> Spline {
    Spline::new(KNOT_START, KNOT_STEP, (0..N_KNOTS).map(|j| f(knot_u(j))).collect())
}

impl SubjectShape {
    /// Draw a subject from the phantom population.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let a0 = rng.gen_range(140.0..180.0);
        let aspect = rng.gen_range(0.68..0.80);
        let taper = rng.gen_range(0.04..0.12);
        let jitter = |rng: &mut R, scale: f64| -> Vec<f64> {
            (0..N_KNOTS).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let ja = jitter(rng, 0.03);
        let jb = jitter(rng, 0.03);
        let semi_a = Spline::new(
            KNOT_START,
            KNOT_STEP,
            (0..N_KNOTS)
                .map(|j| a0 * (1.0 + ja[j]) + taper * knot_u(j))
                .collect(),
        );
        let semi_b = Spline::new(
            KNOT_START,
            KNOT_STEP,
            (0..N_KNOTS)
                .map(|j| a0 * aspect * (1.0 + jb[j]) + 0.5 * taper * knot_u(j))
                .collect(),
        );

        let t0 = rng.gen_range(12.0..28.0);
        let phase_t = rng.gen_range(-0.5..0.5);
        let fat_thickness = spline_from(|u| t0 * (1.0 + 0.35 * (u / 45.0 + phase_t).sin()));

        let v0 = rng.gen_range(0.14..0.24);
        let phase_v = rng.gen_range(-0.4..0.4);
        let visceral_radius = spline_from(|u| v0 + 0.07 * (u / 35.0 + phase_v).cos());

        let count = rng.gen_range(1..=4);
        let offset = rng.gen_range(-15f64..15.0).to_radians();
        let mut slots: Vec<usize> = (0..4).collect();
        slots.shuffle(rng);
        let organs = slots[..count]
            .iter()
            .map(|&s| {
                let center = rng.gen_range(-80.0..80.0);
                let half_width = rng.gen_range(45.0..95.0);
                let rmax = rng.gen_range(0.12..0.2);
                Organ {
                    angle: PI / 4.0 + PI / 2.0 * s as f64 + offset,
                    radius: spline_from(|u| {
                        let d = (u - center) / half_width;
                        rmax * (1.0 - d * d).max(0.0)
                    }),
                }
            })
            .collect();
        Self {
            semi_a,
            semi_b,
            fat_thickness,
            visceral_radius,
            organs,
        }
    }

    pub fn section(&self, u: f64) -> Section {
        Section {
            a: self.semi_a.eval(u).clamp(110.0, 210.0),
            b: self.semi_b.eval(u).clamp(85.0, 170.0),
            fat: self.fat_thickness.eval(u).clamp(5.0, 40.0),
            visceral: self.visceral_radius.eval(u).clamp(0.0, VISCERAL_MAX_RADIUS),
            organs: self
                .organs
                .iter()
                .map(|o| {
                    (
                        ORGAN_SLOT * o.angle.cos(),
                        ORGAN_SLOT * o.angle.sin(),
                        o.radius.eval(u).clamp(0.0, ORGAN_MAX_RADIUS),
                    )
                })
                .collect(),
        }
    }

    /// Upper bound on `|dA/du|` for the fat area `A`.
    ///
    /// With inner axes `ai = a - t`, `bi = b - t`,
    /// `A = pi * (a b - (1 - rho^2) ai bi)`; the product rule plus the
    /// spline slope and magnitude bounds give the estimate. Clamping is
    /// 1-Lipschitz, so it cannot raise the bound.
    pub fn fat_area_lipschitz(&self) -> f64 {
        let (la, lb) = (self.semi_a.lipschitz(), self.semi_b.lipschitz());
        let lt = self.fat_thickness.lipschitz();
        let lr = self.visceral_radius.lipschitz();
        let am = self.semi_a.abs_bound().min(210.0);
        let bm = self.semi_b.abs_bound().min(170.0);
        let rm = self.visceral_radius.abs_bound().min(VISCERAL_MAX_RADIUS);
        PI * (la * bm + am * lb + 2.0 * rm * lr * am * bm + (la + lt) * bm + am * (lb + lt))
    }
}

/// A phantom subject placed on a slice grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSubject {
    pub subject_id: String,
    pub shape: SubjectShape,
    pub z0_mm: f64,
    pub z_spacing_mm: f64,
    pub n_slices: usize,
    pub target_index: usize,
    pub score_offset: f64,
}

impl PhantomSubject {
    pub fn z_of(&self, index: usize) -> f64 {
        self.z0_mm + index as f64 * self.z_spacing_mm
    }

    pub fn z_target_mm(&self) -> f64 {
        self.z_of(self.target_index)
    }

    pub fn z_range_mm(&self) -> (f64, f64) {
        (self.z0_mm, self.z_of(self.n_slices - 1))
    }

    /// Anatomical coordinate of a z position.
    pub fn u_of(&self, z_mm: f64) -> f64 {
        z_mm - self.z_target_mm()
    }

    /// Synthetic body-part score, shared by every subject up to `score_offset`.
    pub fn anatomy_score(&self, z_mm: f64) -> f64 {
        anatomy_score(self.u_of(z_mm)) + self.score_offset
    }

    pub fn section(&self, z_mm: f64) -> Section {
        self.shape.section(self.u_of(z_mm))
    }

    pub fn fat_area_mm2(&self, z_mm: f64) -> f64 {
        self.section(z_mm).fat_area_mm2()
    }

    /// Tissue labels on a `size x size` grid covering `fov_mm`.
    pub fn labels(&self, z_mm: f64, size: usize, fov_mm: f64) -> Vec<Tissue> {
        let sec = self.section(z_mm);
        let sp = fov_mm / size as f64;
        let half = size as f64 / 2.0;
        let mut out = Vec::with_capacity(size * size);
        for r in 0..size {
            let y = (r as f64 + 0.5 - half) * sp;
            for c in 0..size {
                let x = (c as f64 + 0.5 - half) * sp;
                out.push(sec.tissue(x, y));
            }
        }
        out
    }

    /// Raw HU slice with noise seeded on `(seed, subject, z)`.
    pub fn render<T: Scalar>(
        &self,
        z_mm: f64,
        size: usize,
        fov_mm: f64,
        noise_hu: f64,
        seed: u64,
    ) -> Image<T> {
        let labels = self.labels(z_mm, size, fov_mm);
        let mut key = self.subject_id.as_bytes().to_vec();
        key.extend_from_slice(&z_mm.to_bits().to_le_bytes());
        let mut rng = seeding::stream(seed, "phantom-noise", &key);
        let noise = Normal::new(0.0, noise_hu.max(0.0)).expect("finite noise level");
        let data = labels
            .iter()
            .map(|t| {
                let n = if noise_hu > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                cst::<T>(t.hu() + n)
            })
            .collect();
        Image::new(size, size, data).expect("label grid matches size")
    }
}

/// Body-part score as a function of the anatomical coordinate.
pub fn anatomy_score(u_mm: f64) -> f64 {
    u_mm / 30.0 + 0.2 * (u_mm / 40.0).tanh()
}

/// Parameters of a single phantom volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub subject_id: String,
    pub n_slices: usize,
    pub z_spacing_mm: f64,
    pub image_size: usize,
    pub fov_mm: f64,
    pub noise_hu: f64,
    pub score_offset: f64,
    /// Explicit geometry; sampled from `(seed, subject_id)` when absent.
    pub shape: Option<SubjectShape>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subject_id: "sub-0000".into(),
            n_slices: 64,
            z_spacing_mm: 3.0,
            image_size: 256,
            fov_mm: 500.0,
            noise_hu: 5.0,
            score_offset: 0.0,
            shape: None,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slices < 2 {
            return Err(Error::config("n_slices", "need at least 2 slices"));
        }
        if !(self.z_spacing_mm > 0.0) || !self.z_spacing_mm.is_finite() {
            return Err(Error::config("z_spacing_mm", "must be positive"));
        }
        if !matches!(self.image_size, 256 | 512) {
            return Err(Error::config("image_size", "must be 256 or 512"));
        }
        if !(self.fov_mm > 0.0) || !self.fov_mm.is_finite() {
            return Err(Error::config("fov_mm", "must be positive"));
        }
        if !(0.0..=10.0).contains(&self.noise_hu) {
            return Err(Error::config("noise_hu", "must lie in [0, 10]"));
        }
        if !self.score_offset.is_finite() {
            return Err(Error::config("score_offset", "must be finite"));
        }
        if self.subject_id.is_empty() {
            return Err(Error::config("subject_id", "must not be empty"));
        }
        Ok(())
    }

    pub fn subject(&self) -> Result<PhantomSubject> {
        self.validate()?;
        let mut rng = seeding::stream(self.seed, "phantom-subject", self.subject_id.as_bytes());
        let shape = self
            .shape
            .clone()
            .unwrap_or_else(|| SubjectShape::sample(&mut rng));
        let mid = (self.n_slices / 2) as i64;
        let k = rng.gen_range(-TARGET_SPREAD_SLICES..=TARGET_SPREAD_SLICES);
        let target_index = (mid + k).clamp(0, self.n_slices as i64 - 1) as usize;
        Ok(PhantomSubject {
            subject_id: self.subject_id.clone(),
            shape,
            z0_mm: 0.0,
            z_spacing_mm: self.z_spacing_mm,
            n_slices: self.n_slices,
            target_index,
            score_offset: self.score_offset,
        })
    }
}

/// Render a full phantom volume in raw HU.
pub fn generate_volume<T: Scalar>(config: &PhantomConfig) -> Result<Volume<T>> {
    let subject = config.subject()?;
    Ok(render_volume(&subject, config))
}

pub(crate) fn render_volume<T: Scalar>(subject: &PhantomSubject, config: &PhantomConfig) -> Volume<T> {
    let z: Vec<f64> = (0..subject.n_slices).map(|i| subject.z_of(i)).collect();
    Volume {
        subject_id: subject.subject_id.clone(),
        slices: z
            .iter()
            .map(|&z| {
                subject.render(z, config.image_size, config.fov_mm, config.noise_hu, config.seed)
            })
            .collect(),
        anatomy_score: z.iter().map(|&z| subject.anatomy_score(z)).collect(),
        z_positions_mm: z,
        pixel_spacing_mm: config.fov_mm / config.image_size as f64,
        units: Units::RawHu,
    }
}

/// Ground-truth registry of generated subjects.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhantomAtlas {
    pub subjects: BTreeMap<String, PhantomSubject>,
}

impl PhantomAtlas {
    pub fn insert(&mut self, subject: PhantomSubject) {
        self.subjects.insert(subject.subject_id.clone(), subject);
    }

    pub fn get(&self, subject_id: &str) -> Result<&PhantomSubject> {
        self.subjects.get(subject_id).ok_or_else(|| Error::Lookup {
            kind: "subject",
            id: subject_id.to_string(),
        })
    }

    /// Analytic fat-compartment area (mm^2) of a subject at `z_mm`.
    pub fn fat_area_oracle(&self, subject_id: &str, z_mm: f64) -> Result<f64> {
        let s = self.get(subject_id)?;
        let (lo, hi) = s.z_range_mm();
        if !(lo..=hi).contains(&z_mm) {
            return Err(Error::Range(format!(
                "z = {z_mm} mm outside [{lo}, {hi}] for {subject_id}"
            )));
        }
        Ok(s.fat_area_mm2(z_mm))
    }
}

/// One longitudinal acquisition.
#[derive(Clone, Debug, PartialEq)]
pub struct Visit<T> {
    pub visit_index: u32,
    pub age_years: f64,
    pub slice: SliceImage<T>,
    /// Hidden displacement from the subject's target level.
    pub true_z_offset_mm: f64,
    pub fat_area_truth_mm2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSeries<T> {
    pub subject_id: String,
    /// Member of the subpopulation scanned close to the target level.
    pub near_target: bool,
    pub visits: Vec<Visit<T>>,
}

impl<T> SubjectSeries<T> {
    /// Spread `max - min` of the hidden offsets.
    pub fn offset_spread_mm(&self) -> f64 {
        let (lo, hi) = self.visits.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.true_z_offset_mm), hi.max(v.true_z_offset_mm))
        });
        if self.visits.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub seed: u64,
    pub n_subjects: usize,
    /// Inclusive range of visits per subject.
    pub visits: (u32, u32),
    /// Range of positional jitter around the target level.
    pub jitter_mm: (f64, f64),
    pub near_target_fraction: f64,
    pub near_target_max_mm: f64,
    pub n_slices: usize,
    pub z_spacing_mm: f64,
    pub image_size: usize,
    pub fov_mm: f64,
    pub noise_hu: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subjects: 100,
            visits: (2, 4),
            jitter_mm: (-30.0, 30.0),
            near_target_fraction: 0.4,
            near_target_max_mm: 3.0,
            n_slices: 64,
            z_spacing_mm: 3.0,
            image_size: 512,
            fov_mm: 500.0,
            noise_hu: 5.0,
        }
    }
}

impl CohortConfig {
    fn phantom(&self, subject_id: String) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            subject_id,
            n_slices: self.n_slices,
            z_spacing_mm: self.z_spacing_mm,
            image_size: self.image_size,
            fov_mm: self.fov_mm,
            noise_hu: self.noise_hu,
            score_offset: 0.0,
            shape: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom("probe".into()).validate()?;
        if self.n_subjects == 0 {
            return Err(Error::config("n_subjects", "must be positive"));
        }
        if self.visits.0 < 2 || self.visits.1 < self.visits.0 {
            return Err(Error::config("visits", "need a range with at least 2 visits"));
        }
        if !(0.0..=1.0).contains(&self.near_target_fraction) {
            return Err(Error::config("near_target_fraction", "must lie in [0, 1]"));
        }
        if !(self.near_target_max_mm >= 0.0) {
            return Err(Error::config("near_target_max_mm", "must be non-negative"));
        }
        let (lo, hi) = self.jitter_mm;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config("jitter_mm", "expected an ordered finite range"));
        }
        let half = 0.5 * (self.n_slices - 1) as f64 * self.z_spacing_mm;
        if lo.abs() > half || hi.abs() > half {
            return Err(Error::Range(format!(
                "jitter range ({lo}, {hi}) mm exceeds half the volume extent ({half} mm)"
            )));
        }
        Ok(())
    }
}

pub fn cohort_subject_id(index: usize) -> String {
    format!("cohort-{index:04}")
}

/// Longitudinal single-slice series plus their ground truth.
#[derive(Clone, Debug)]
pub struct Cohort<T> {
    pub series: Vec<SubjectSeries<T>>,
    pub atlas: PhantomAtlas,
}

pub fn generate_cohort<T: Scalar>(config: &CohortConfig) -> Result<Cohort<T>> {
    config.validate()?;
    let n_near = (config.near_target_fraction * config.n_subjects as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.n_subjects).collect();
    order.shuffle(&mut seeding::stream_n(config.seed, "cohort-split", 0));
    let mut near = vec![false; config.n_subjects];
    for &i in &order[..n_near] {
        near[i] = true;
    }

    let mut atlas = PhantomAtlas::default();
    let mut series = Vec::with_capacity(config.n_subjects);
    for (i, &is_near) in near.iter().enumerate() {
        let pc = config.phantom(cohort_subject_id(i));
        let subject = pc.subject()?;
        let mut rng = seeding::stream(config.seed, "cohort-visits", pc.subject_id.as_bytes());
        let (mut lo, mut hi) = config.jitter_mm;
        if is_near {
            let cap = config.near_target_max_mm;
            lo = lo.clamp(-cap, cap);
            hi = hi.clamp(-cap, cap);
        }
        let n_visits = rng.gen_range(config.visits.0..=config.visits.1);
        let mut age = rng.gen_range(45.0..80.0);
        let (z_lo, z_hi) = subject.z_range_mm();
        let mut visits = Vec::with_capacity(n_visits as usize);
        for v in 0..n_visits {
            let jitter = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let z = (subject.z_target_mm() + jitter).clamp(z_lo, z_hi);
            let pixels = subject.render(z, pc.image_size, pc.fov_mm, pc.noise_hu, pc.seed);
            let mut meta = SliceMeta::new(&subject.subject_id, z, pc.fov_mm / pc.image_size as f64);
            meta.visit_index = Some(v);
            visits.push(Visit {
                visit_index: v,
                age_years: age,
                slice: SliceImage::new(pixels, Units::RawHu, meta),
                true_z_offset_mm: z - subject.z_target_mm(),
                fat_area_truth_mm2: subject.fat_area_mm2(z),
            });
            age += rng.gen_range(1.0..3.0);
        }
        series.push(SubjectSeries {
            subject_id: subject.subject_id.clone(),
            near_target: is_near,
            visits,
        });
        atlas.insert(subject);
    }
    Ok(Cohort { series, atlas })
}

/// One row of a cohort index file.
#[derive(Serialize, Deserialize)]
struct VisitRecord {
    subject_id: String,
    near_target: bool,
    visit_index: u32,
    age_years: f64,
    true_z_offset_mm: f64,
    fat_area_truth_mm2: f64,
    file: String,
}

pub const SERIES_INDEX: &str = "series.csv";

/// Write visits as `slices/<subject>-v<k>.slice` plus an index CSV.
pub fn write_series<T: Scalar>(dir: &Path, series: &[SubjectSeries<T>]) -> Result<()> {
    fs::create_dir_all(dir.join("slices"))?;
    let index = dir.join(SERIES_INDEX);
    let bad = |e: csv::Error| Error::format(index.display().to_string(), e.to_string());
    let mut w = csv::Writer::from_path(&index).map_err(bad)?;
    for s in series {
        for v in &s.visits {
            let file = format!("slices/{}-v{}.slice", s.subject_id, v.visit_index);
            save_slice(&dir.join(&file), &v.slice)?;
            w.serialize(VisitRecord {
                subject_id: s.subject_id.clone(),
                near_target: s.near_target,
                visit_index: v.visit_index,
                age_years: v.age_years,
                true_z_offset_mm: v.true_z_offset_mm,
                fat_area_truth_mm2: v.fat_area_truth_mm2,
                file,
            })
            .map_err(bad)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a directory written by [`write_series`], in index order.
pub fn read_series<T: Scalar>(dir: &Path) -> Result<Vec<SubjectSeries<T>>> {
    let index = dir.join(SERIES_INDEX);
    let bad = |e: csv::Error| Error::format(index.display().to_string(), e.to_string());
    let mut r = csv::Reader::from_path(&index).map_err(bad)?;
    let mut out: Vec<SubjectSeries<T>> = Vec::new();
    for rec in r.deserialize() {
        let rec: VisitRecord = rec.map_err(bad)?;
        let visit = Visit {
            visit_index: rec.visit_index,
            age_years: rec.age_years,
            slice: load_slice(&dir.join(&rec.file))?,
            true_z_offset_mm: rec.true_z_offset_mm,
            fat_area_truth_mm2: rec.fat_area_truth_mm2,
        };
        match out.last_mut() {
            Some(s) if s.subject_id == rec.subject_id => s.visits.push(visit),
            _ => out.push(SubjectSeries {
                subject_id: rec.subject_id,
                near_target: rec.near_target,
                visits: vec![visit],
            }),
        }
    }
    Ok(out)
}
