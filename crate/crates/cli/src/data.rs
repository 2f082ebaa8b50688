//! On-disk dataset layout.
//!
//! ```text
//! <dir>/volumes/<id>.vol      slice stack
//! <dir>/volumes/<id>.scores   body-part score per slice
//! <dir>/truth.csv             true target slice per subject
//! <dir>/cohort/series.csv     longitudinal visits (optional)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slicegen_core::ablation::Subject;
use slicegen_core::phantom::{generate_volume, PhantomConfig};
use slicegen_core::seeding::derive_u64;
use slicegen_core::targetsel::read_manifest;
use slicegen_core::volume::Volume;
use slicegen_core::{Error, Result};

use crate::config::DatasetSection;

pub const VOLUMES: &str = "volumes";
pub const TRUTH: &str = "truth.csv";
pub const COHORT: &str = "cohort";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub subject_id: String,
    pub target_index: usize,
    pub z_target_mm: f64,
    pub score_offset: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Uniform draw in `[-max, max]` keyed on the subject.
fn score_offset(seed: u64, subject_id: &str, max: f64) -> f64 {
    let u = derive_u64(seed, "score-offset", subject_id.as_bytes()) as f64 / u64::MAX as f64;
    (2.0 * u - 1.0) * max
}

pub fn phantom_configs(cfg: &DatasetSection, seed: u64) -> Vec<PhantomConfig> {
    (0..cfg.subjects)
        .map(|i| {
            let subject_id = format!("{}-{i:04}", cfg.id_prefix);
            PhantomConfig {
                seed,
                score_offset: score_offset(seed, &subject_id, cfg.score_offset_max),
                subject_id,
                n_slices: cfg.n_slices,
                z_spacing_mm: cfg.z_spacing_mm,
                image_size: cfg.image_size,
                fov_mm: cfg.fov_mm,
                noise_hu: cfg.noise_hu,
                shape: None,
            }
        })
        .collect()
}

pub fn write_dataset(dir: &Path, cfg: &DatasetSection, seed: u64) -> Result<Vec<TruthRow>> {
    let vol_dir = dir.join(VOLUMES);
    std::fs::create_dir_all(&vol_dir)?;
    let mut truth = Vec::with_capacity(cfg.subjects);
    for pc in phantom_configs(cfg, seed) {
        let subject = pc.subject()?;
        let volume = generate_volume::<f32>(&pc)?;
        volume.save(&vol_dir.join(format!("{}.vol", pc.subject_id)))?;
        volume.save_scores(&vol_dir.join(format!("{}.scores", pc.subject_id)))?;
        truth.push(TruthRow {
            subject_id: pc.subject_id.clone(),
            target_index: subject.target_index,
            z_target_mm: subject.z_target_mm(),
            score_offset: pc.score_offset,
        });
        log::info!("wrote {}", pc.subject_id);
    }
    let path = dir.join(TRUTH);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for row in &truth {
        w.serialize(row).map_err(|e| csv_err(&path, e))?;
    }
    w.flush()?;
    Ok(truth)
}

pub fn read_truth(dir: &Path) -> Result<Vec<TruthRow>> {
    let path = dir.join(TRUTH);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(&path, e)))
        .collect()
}

/// Volume files sorted by subject id.
pub fn volume_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let vol_dir = dir.join(VOLUMES);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&vol_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", vol_dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "vol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no volumes in {}", vol_dir.display())));
    }
    Ok(paths)
}

pub fn load_volume(path: &Path) -> Result<Volume<f32>> {
    let mut v = Volume::<f32>::load(path)?;
    let scores = path.with_extension("scores");
    if scores.exists() {
        v.load_scores(&scores)?;
    }
    Ok(v)
}

/// Volumes paired with target slices from `targets` (a selection manifest) or the dataset truth.
pub fn load_subjects(dir: &Path, targets: Option<&Path>) -> Result<Vec<Subject<f32>>> {
    let index: BTreeMap<String, usize> = match targets {
        Some(p) => read_manifest(p)?
            .into_iter()
            .map(|s| (s.subject_id, s.slice_index))
            .collect(),
        None => read_truth(dir)?
            .into_iter()
            .map(|t| (t.subject_id, t.target_index))
            .collect(),
    };
    volume_paths(dir)?
        .iter()
        .map(|p| {
            let volume = load_volume(p)?;
            let target_index = *index.get(&volume.subject_id).ok_or_else(|| Error::Lookup {
                kind: "target for subject",
                id: volume.subject_id.clone(),
            })?;
            if target_index >= volume.n_slices() {
                return Err(Error::Range(format!(
                    "target {target_index} outside {} slices of {}",
                    volume.n_slices(),
                    volume.subject_id
                )));
            }
            Ok(Subject { volume, target_index })
        })
        .collect()
}
