//! Image similarity and cohort variability metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, SliceImage};
use crate::nn::{Act, Geom, Layer, Net};
use crate::scalar::{cst, Scalar};

pub const NMI_BINS: usize = 64;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    a.same_shape(b)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a row-major `rows x cols` f64 grid.
fn filter_valid(x: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (orows, ocols) = (rows - k + 1, cols - k + 1);
    let mut tmp = vec![0.0; rows * ocols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        for c in 0..ocols {
            tmp[r * ocols + c] = taps.iter().zip(&row[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for r in 0..orows {
        for (j, &t) in taps.iter().enumerate() {
            let src = &tmp[(r + j) * ocols..(r + j + 1) * ocols];
            for (o, &v) in out[r * ocols..(r + 1) * ocols].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows (dynamic range 1).
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (rows, cols) = (a.rows(), a.cols());
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {rows}x{cols}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let y: Vec<f64> = b.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, rows, cols, &taps);
    let my = filter_valid(&y, rows, cols, &taps);
    let mxx = filter_valid(&prod(&x, &x), rows, cols, &taps);
    let myy = filter_valid(&prod(&y, &y), rows, cols, &taps);
    let mxy = filter_valid(&prod(&x, &y), rows, cols, &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n)
}

/// PSNR in dB for peak 1; identical images give `+inf`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

/// Fixed-width bin of a unit-interval intensity.
#[inline]
pub fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn bin_indices<T: Scalar>(img: &Image<T>, bins: usize) -> Result<Vec<u16>> {
    img.as_slice()
        .iter()
        .map(|v| {
            let v = v.to_f64_lossy();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range(format!("NMI input {v} outside [0, 1]")));
            }
            Ok(bin_of(v, bins) as u16)
        })
        .collect()
}

/// Joint intensity histogram over fixed bins.
#[derive(Clone, Debug)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<u64>,
    total: u64,
}

impl JointHistogram {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            counts: vec![0; bins * bins],
            total: 0,
        }
    }

    #[inline]
    pub fn add(&mut self, a: u16, b: u16) {
        self.counts[a as usize * self.bins + b as usize] += 1;
        self.total += 1;
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }

    /// `2 I(A;B) / (H(A) + H(B))` in nats, with the constant-image convention.
    pub fn nmi(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        let mut pa = vec![0u64; self.bins];
        let mut pb = vec![0u64; self.bins];
        let mut hab = 0.0;
        for i in 0..self.bins {
            for j in 0..self.bins {
                let c = self.counts[i * self.bins + j];
                if c > 0 {
                    pa[i] += c;
                    pb[j] += c;
                    let p = c as f64 / n;
                    hab -= p * p.ln();
                }
            }
        }
        let entropy = |h: &[u64]| -> f64 {
            h.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum()
        };
        let (ha, hb) = (entropy(&pa), entropy(&pb));
        if ha + hb == 0.0 {
            // Both constant: identical iff they share the single occupied bin.
            let ia = pa.iter().position(|&c| c > 0);
            let ib = pb.iter().position(|&c| c > 0);
            return if ia == ib { 1.0 } else { 0.0 };
        }
        (2.0 * (ha + hb - hab) / (ha + hb)).clamp(0.0, 1.0)
    }
}

pub fn nmi_with_bins<T: Scalar>(a: &Image<T>, b: &Image<T>, bins: usize) -> Result<f64> {
    same_shape(a, b)?;
    if bins < 2 || bins > u16::MAX as usize {
        return Err(Error::config("bins", "must lie in [2, 65535]"));
    }
    let (ia, ib) = (bin_indices(a, bins)?, bin_indices(b, bins)?);
    let mut h = JointHistogram::new(bins);
    for (&x, &y) in ia.iter().zip(&ib) {
        h.add(x, y);
    }
    Ok(h.nmi())
}

/// Normalized mutual information with 64 bins on `[0, 1]`.
pub fn nmi<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    nmi_with_bins(a, b, NMI_BINS)
}

/// Coefficient of variation with the population standard deviation.
pub fn cv(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Range("CV needs at least two values".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::Range(format!("CV undefined for mean {mean}")));
    }
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Mean forward-difference gradient magnitude, a sharpness proxy.
pub fn mean_gradient_magnitude<T: Scalar>(img: &Image<T>) -> f64 {
    let (rows, cols) = (img.rows(), img.cols());
    if rows < 2 || cols < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let v = img.get(r, c).to_f64_lossy();
            let gx = img.get(r, c + 1).to_f64_lossy() - v;
            let gy = img.get(r + 1, c).to_f64_lossy() - v;
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / ((rows - 1) * (cols - 1)) as f64
}

/// Seeded random convolutional feature stack standing in for a perceptual network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    pub id: String,
    stages: Vec<Net<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub const DEFAULT_SEED: u64 = 0x1f5e;

    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [1usize, 8, 16, 32];
        let stages = widths
            .windows(2)
            .map(|w| {
                Net::new(vec![
                    Layer::conv(w[0], w[1], Geom::new(4, 2, 1), 0.2, &mut rng),
                    Layer::LeakyRelu(cst(0.2)),
                ])
            })
            .collect();
        Self {
            id: format!("random-conv-8-16-32-seed{seed}"),
            stages,
        }
    }

    /// Wrap externally provided stages (each a sub-network applied in turn).
    pub fn from_stages(id: impl Into<String>, stages: Vec<Net<T>>) -> Self {
        Self {
            id: id.into(),
            stages,
        }
    }

    /// Unit-normalized feature maps per stage, as `(channels, positions, data)`.
    fn features(&self, img: &Image<T>) -> Result<Vec<(usize, usize, Vec<T>)>> {
        let two: T = cst(2.0);
        let scaled: Vec<T> = img.as_slice().iter().map(|&v| two * v - T::one()).collect();
        let mut x = Act::from_images(&[&scaled], img.rows(), img.cols())?;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.infer(x)?;
            let Act::Map { c, h, w, data, .. } = &x else {
                return Err(Error::Shape("feature stage must produce maps".into()));
            };
            let hw = h * w;
            let mut normed = data.clone();
            for p in 0..hw {
                let norm = (0..*c)
                    .map(|ch| data[ch * hw + p] * data[ch * hw + p])
                    .sum::<T>()
                    .sqrt()
                    + cst(1e-10);
                for ch in 0..*c {
                    normed[ch * hw + p] /= norm;
                }
            }
            out.push((*c, hw, normed));
        }
        Ok(out)
    }

    /// Learned-perceptual-style distance: per stage, squared differences of
    /// channel-normalized features summed over channels and averaged over
    /// positions, then summed over stages.
    pub fn distance(&self, a: &Image<T>, b: &Image<T>) -> Result<f64> {
        same_shape(a, b)?;
        let (fa, fb) = (self.features(a)?, self.features(b)?);
        Ok(fa
            .iter()
            .zip(&fb)
            .map(|((_, hw, x), (_, _, y))| {
                x.iter()
                    .zip(y)
                    .map(|(p, q)| (p.to_f64_lossy() - q.to_f64_lossy()).powi(2))
                    .sum::<f64>()
                    / *hw as f64
            })
            .sum())
    }
}

pub fn lpips<T: Scalar>(a: &Image<T>, b: &Image<T>, features: &FeatureExtractor<T>) -> Result<f64> {
    features.distance(a, b)
}

/// Settings that make metric values comparable across reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFingerprint {
    pub nmi_bins: usize,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub lpips_extractor: String,
}

impl MetricsFingerprint {
    pub fn new(extractor_id: &str) -> Self {
        Self {
            nmi_bins: NMI_BINS,
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            lpips_extractor: extractor_id.to_string(),
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["SSIM", "PSNR", "LPIPS", "NMI"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subject_id: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// Per-pair metric values with aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub fingerprint: MetricsFingerprint,
}

/// Formats `inf`/`-inf`/`nan` as text and finite values with full precision.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

impl MetricsReport {
    pub fn aggregates(&self) -> BTreeMap<String, Aggregate> {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.metric.clone()).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|(k, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = if mean.is_finite() {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
                } else {
                    f64::NAN
                };
                (k, Aggregate { mean, std })
            })
            .collect()
    }

    pub fn value(&self, subject_id: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subject_id == subject_id && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.subject_id, r.metric, format_value(r.value));
        }
        out
    }

    /// JSON summary; infinite means are written as the string `"inf"`.
    pub fn summary_json(&self) -> serde_json::Value {
        let aggs: serde_json::Map<String, serde_json::Value> = self
            .aggregates()
            .into_iter()
            .map(|(k, a)| {
                let enc = |v: f64| {
                    if v.is_finite() {
                        serde_json::json!(v)
                    } else {
                        serde_json::json!(format_value(v))
                    }
                };
                (k, serde_json::json!({ "mean": enc(a.mean), "std": enc(a.std) }))
            })
            .collect();
        serde_json::json!({
            "fingerprint": self.fingerprint,
            "n_rows": self.rows.len(),
            "aggregates": aggs,
        })
    }

    /// One-line-per-metric table in the usual SSIM / PSNR / LPIPS / NMI order.
    pub fn table(&self) -> String {
        let aggs = self.aggregates();
        let mut out = String::new();
        let _ = writeln!(out, "{:<8}{:>12}{:>12}", "metric", "mean", "std");
        for name in METRIC_NAMES {
            if let Some(a) = aggs.get(name) {
                let _ = writeln!(
                    out,
                    "{:<8}{:>12}{:>12}",
                    name,
                    format!("{:.4}", a.mean),
                    format!("{:.4}", a.std)
                );
            }
        }
        out
    }

    /// Refuse to compare reports computed with different settings.
    pub fn check_comparable(&self, other: &MetricsReport) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::Fingerprint {
                expected: serde_json::to_string(&self.fingerprint)?,
                found: serde_json::to_string(&other.fingerprint)?,
            });
        }
        Ok(())
    }
}

/// Anything that can produce a target-level slice from a condition slice.
pub trait SliceGenerator<T: Scalar> {
    fn generate_slice(&self, cond: &SliceImage<T>, seed: u64) -> Result<SliceImage<T>>;
}

/// Condition slice with its ground-truth target.
#[derive(Clone, Debug)]
pub struct TestCase<T> {
    pub subject_id: String,
    pub condition: SliceImage<T>,
    pub target: Option<SliceImage<T>>,
}

/// SSIM, PSNR, LPIPS and NMI between the generated and the true target of each case.
pub fn evaluate_testset<T: Scalar, G: SliceGenerator<T> + ?Sized>(
    model: &G,
    cases: &[TestCase<T>],
    features: &FeatureExtractor<T>,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(cases.len() * 4);
    for (i, case) in cases.iter().enumerate() {
        let target = case.target.as_ref().ok_or_else(|| {
            Error::Data(format!("test case {} has no target slice", case.subject_id))
        })?;
        let generated = model.generate_slice(&case.condition, seed.wrapping_add(i as u64))?;
        let (g, t) = (&generated.pixels, &target.pixels);
        for (metric, value) in [
            ("SSIM", ssim(g, t)?),
            ("PSNR", psnr(g, t)?),
            ("LPIPS", lpips(g, t, features)?),
            ("NMI", nmi(g, t)?),
        ] {
            rows.push(MetricRow {
                subject_id: case.subject_id.clone(),
                metric: metric.into(),
                value,
            });
        }
    }
    Ok(MetricsReport {
        rows,
        fingerprint: MetricsFingerprint::new(&features.id),
    })
}
