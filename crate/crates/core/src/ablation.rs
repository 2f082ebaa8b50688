//! Ablation harnesses over the adversarial weight and the pairing distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{SliceImage, SliceMeta};
use crate::metrics::{format_value, lpips, mean_gradient_magnitude, ssim, FeatureExtractor, SliceGenerator, TestCase};
use crate::model::{ModelConfig, SliceGen};
use crate::scalar::Scalar;
use crate::trainer::{make_pairs, model_ready, train, PairingMode, TrainConfig, TrainLog, TrainingSet};
use crate::volume::Volume;

/// A subject volume with its chosen target slice.
#[derive(Clone, Debug)]
pub struct Subject<T> {
    pub volume: Volume<T>,
    pub target_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    /// Mean image-gradient magnitude of the generated slices.
    pub sharpness: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub final_l_recon: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Per-case `(sharpness, ssim, lpips)` of generated slices.
fn score_cases<T: Scalar>(
    model: &SliceGen<T>,
    cases: &[TestCase<T>],
    features: &FeatureExtractor<T>,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let target = case
                .target
                .as_ref()
                .ok_or_else(|| Error::Data(format!("test case {} has no target", case.subject_id)))?;
            let g = model.generate_slice(&case.condition, seed.wrapping_add(i as u64))?;
            Ok((
                mean_gradient_magnitude(&g.pixels),
                ssim(&g.pixels, &target.pixels)?,
                lpips(&g.pixels, &target.pixels, features)?,
            ))
        })
        .collect()
}

/// Train one model per `beta` from the same seed and data, then score each.
pub fn beta_ablation<T: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    set: &TrainingSet<T>,
    betas: &[f64],
    cases: &[TestCase<T>],
    features: &FeatureExtractor<T>,
) -> Result<Vec<(BetaRow, TrainLog)>> {
    if cases.is_empty() {
        return Err(Error::Data("beta ablation needs test cases".into()));
    }
    betas
        .iter()
        .map(|&beta| {
            let cfg = TrainConfig {
                beta,
                ..train_config.clone()
            };
            let (model, log) = train(model_config, &cfg, set, None)?;
            let scores = score_cases(&model, cases, features, train_config.seed)?;
            let col = |f: fn(&(f64, f64, f64)) -> f64| mean(&scores.iter().map(f).collect::<Vec<_>>());
            let row = BetaRow {
                beta,
                sharpness: col(|s| s.0),
                ssim: col(|s| s.1),
                lpips: col(|s| s.2),
                final_l_recon: log.tail_mean(50, |l| l.l_recon),
            };
            log::info!("beta {beta}: {row:?}");
            Ok((row, log))
        })
        .collect()
}

pub fn beta_table(rows: &[BetaRow]) -> String {
    let mut out = format!("{:>8}{:>12}{:>10}{:>10}\n", "beta", "sharpness", "SSIM", "LPIPS");
    for r in rows {
        let _ = writeln!(out, "{:>8}{:>12.5}{:>10.4}{:>10.4}", r.beta, r.sharpness, r.ssim, r.lpips);
    }
    out
}

/// Pairing strategy without its distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingKind {
    UnknownDistance,
    FixedRange,
    FixedDistance,
}

impl PairingKind {
    pub const ALL: [PairingKind; 3] = [
        PairingKind::UnknownDistance,
        PairingKind::FixedRange,
        PairingKind::FixedDistance,
    ];

    pub fn with_distance(self, d: f64) -> PairingMode {
        match self {
            PairingKind::UnknownDistance => PairingMode::UnknownDistance,
            PairingKind::FixedRange => PairingMode::FixedRange(d),
            PairingKind::FixedDistance => PairingMode::FixedDistance(d),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairingKind::UnknownDistance => "unknown_distance",
            PairingKind::FixedRange => "fixed_range",
            PairingKind::FixedDistance => "fixed_distance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceGrid {
    pub distances_mm: Vec<f64>,
    pub kinds: Vec<PairingKind>,
    pub seeds: Vec<u64>,
    /// Fixed-distance test pairs kept per held-out subject.
    pub max_pairs_per_subject: usize,
}

impl Default for DistanceGrid {
    fn default() -> Self {
        Self {
            distances_mm: vec![3.0, 6.0, 15.0, 30.0, 45.0, 60.0, 75.0],
            kinds: PairingKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            max_pairs_per_subject: 8,
        }
    }
}

fn case_from<T: Scalar>(subject: &Subject<T>, cond: usize, target: usize, size: usize) -> Result<TestCase<T>> {
    let v = &subject.volume;
    let spacing = v.pixel_spacing_mm * v.size()? as f64 / size as f64;
    let meta = |i: usize| SliceMeta::new(&v.subject_id, v.z_positions_mm[i], spacing);
    Ok(TestCase {
        subject_id: format!("{}:{cond}->{target}", v.subject_id),
        condition: SliceImage::normalized(model_ready(v, cond, size)?, meta(cond)),
        target: Some(SliceImage::normalized(model_ready(v, target, size)?, meta(target))),
    })
}

/// Held-out cases for a pairing strategy at distance `d`.
///
/// Range and unknown-distance models are scored on conditions exactly `d`
/// above and below each target; fixed-distance models on slice pairs `d` apart,
/// evenly thinned to at most `max_pairs` per subject.
pub fn distance_cases<T: Scalar>(
    subjects: &[Subject<T>],
    kind: PairingKind,
    d: f64,
    size: usize,
    max_pairs: usize,
) -> Result<Vec<TestCase<T>>> {
    let mut cases = Vec::new();
    for s in subjects {
        let pairs = match kind {
            PairingKind::FixedDistance => {
                let all = make_pairs(&s.volume, s.target_index, PairingMode::FixedDistance(d))?;
                let stride = all.len().div_ceil(max_pairs.max(1)).max(1);
                all.into_iter().step_by(stride).collect()
            }
            _ => {
                let step = d / s.volume.z_spacing_mm();
                let k = step.round() as i64;
                if (step - k as f64).abs() > 1e-6 {
                    return Err(Error::config(
                        "distances_mm",
                        format!("{d} mm is not a multiple of the slice spacing"),
                    ));
                }
                let t = s.target_index as i64;
                let mut p: Vec<(usize, usize)> = [t - k, t + k]
                    .into_iter()
                    .filter(|&c| c >= 0 && c < s.volume.n_slices() as i64)
                    .map(|c| (c as usize, s.target_index))
                    .collect();
                p.dedup();
                p
            }
        };
        for (c, t) in pairs {
            cases.push(case_from(s, c, t, size)?);
        }
    }
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub kind: PairingKind,
    pub distance_mm: f64,
    pub seed: u64,
    pub ssim: f64,
    pub lpips: f64,
    pub n_cases: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    /// Seed-averaged `(ssim, lpips)` for one grid point.
    pub fn mean(&self, kind: PairingKind, distance_mm: f64) -> Option<(f64, f64)> {
        let hits: Vec<&AblationCell> = self
            .cells
            .iter()
            .filter(|c| c.kind == kind && c.distance_mm == distance_mm)
            .collect();
        if hits.is_empty() {
            return None;
        }
        let n = hits.len() as f64;
        Some((
            hits.iter().map(|c| c.ssim).sum::<f64>() / n,
            hits.iter().map(|c| c.lpips).sum::<f64>() / n,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,distance_mm,seed,ssim,lpips,n_cases\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.kind.name(),
                format_value(c.distance_mm),
                c.seed,
                format_value(c.ssim),
                format_value(c.lpips),
                c.n_cases
            );
        }
        out
    }

    /// SSIM / LPIPS means per mode (rows) and distance (columns).
    pub fn table(&self) -> String {
        let mut grid: BTreeMap<PairingKind, BTreeMap<u64, (f64, f64)>> = BTreeMap::new();
        let mut dists: Vec<f64> = self.cells.iter().map(|c| c.distance_mm).collect();
        dists.sort_by(f64::total_cmp);
        dists.dedup();
        for c in &self.cells {
            if let Some(m) = self.mean(c.kind, c.distance_mm) {
                grid.entry(c.kind).or_default().insert(c.distance_mm.to_bits(), m);
            }
        }
        let mut out = format!("{:<18}", "mode \\ mm");
        for d in &dists {
            let _ = write!(out, "{:>16}", d);
        }
        out.push('\n');
        for (kind, row) in &grid {
            let _ = write!(out, "{:<18}", kind.name());
            for d in &dists {
                match row.get(&d.to_bits()) {
                    Some((s, l)) => {
                        let _ = write!(out, "{:>16}", format!("{s:.3}/{l:.3}"));
                    }
                    None => {
                        let _ = write!(out, "{:>16}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Train each (mode, distance, seed) combination and score it on held-out subjects.
///
/// The unknown-distance training set does not depend on the distance, so one
/// model per seed is trained and scored at every distance.
pub fn distance_ablation<T: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_subjects: &[Subject<T>],
    test_subjects: &[Subject<T>],
    grid: &DistanceGrid,
    features: &FeatureExtractor<T>,
) -> Result<AblationReport> {
    if train_subjects.is_empty() || test_subjects.is_empty() {
        return Err(Error::Data("distance ablation needs training and held-out subjects".into()));
    }
    let size = model_config.image_size;
    let build = |mode: PairingMode| -> Result<TrainingSet<T>> {
        let mut set = TrainingSet::default();
        for s in train_subjects {
            set.add_volume(&s.volume, s.target_index, mode, size)?;
        }
        Ok(set)
    };
    let mut report = AblationReport::default();
    for &kind in &grid.kinds {
        for &seed in &grid.seeds {
            let cfg_for = |d: f64| TrainConfig {
                seed,
                pairing_mode: kind.with_distance(d),
                ..train_config.clone()
            };
            let mut shared: Option<SliceGen<T>> = None;
            for &d in &grid.distances_mm {
                let cases = distance_cases(test_subjects, kind, d, size, grid.max_pairs_per_subject)?;
                if cases.is_empty() {
                    return Err(Error::Data(format!("no held-out cases at {d} mm")));
                }
                let fresh;
                let model = match (kind, &shared) {
                    (PairingKind::UnknownDistance, Some(m)) => m,
                    _ => {
                        let cfg = cfg_for(d);
                        let (m, _) = train(model_config, &cfg, &build(cfg.pairing_mode)?, None)?;
                        if kind == PairingKind::UnknownDistance {
                            shared = Some(m);
                            shared.as_ref().expect("just stored")
                        } else {
                            fresh = m;
                            &fresh
                        }
                    }
                };
                let scores = score_cases(model, &cases, features, seed)?;
                let cell = AblationCell {
                    kind,
                    distance_mm: d,
                    seed,
                    ssim: mean(&scores.iter().map(|s| s.1).collect::<Vec<_>>()),
                    lpips: mean(&scores.iter().map(|s| s.2).collect::<Vec<_>>()),
                    n_cases: cases.len(),
                };
                log::info!("{cell:?}");
                report.cells.push(cell);
            }
        }
    }
    Ok(report)
}
