//! Run configuration: one TOML file, `SLICEGEN_<SECTION>_<KEY>` environment
//! overrides, then `--set section.key=value` flags, in increasing precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use slicegen_core::ablation::DistanceGrid;
use slicegen_core::harmonize::{FatMethod, DEFAULT_JITTER_SPLIT_MM};
use slicegen_core::model::ModelConfig;
use slicegen_core::phantom::CohortConfig;
use slicegen_core::targetsel::SelectionMethod;
use slicegen_core::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "SLICEGEN_";

/// Training volumes written by `phantom-gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub subjects: usize,
    pub id_prefix: String,
    pub n_slices: usize,
    pub z_spacing_mm: f64,
    pub image_size: usize,
    pub fov_mm: f64,
    pub noise_hu: f64,
    /// Per-subject body-part score bias drawn uniformly from `±score_offset_max`.
    pub score_offset_max: f64,
    /// Also write a longitudinal cohort from `[cohort]`.
    pub with_cohort: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            subjects: 20,
            id_prefix: "sub".into(),
            n_slices: 64,
            z_spacing_mm: 3.0,
            image_size: 256,
            fov_mm: 500.0,
            noise_hu: 5.0,
            score_offset_max: 0.0,
            with_cohort: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    pub method: SelectionMethod,
    /// Subject whose true target slice serves as the reference; the first subject when empty.
    pub reference_subject: String,
    /// Slice window searched around the score-based pick.
    pub refine_radius: i64,
    pub search_radius: usize,
    pub search_step: usize,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            method: SelectionMethod::SemiBpr,
            reference_subject: String::new(),
            refine_radius: 8,
            search_radius: 8,
            search_step: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Conditions are taken this far above and below each target.
    pub distance_mm: f64,
    pub features_seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            distance_mm: 30.0,
            features_seed: slicegen_core::metrics::FeatureExtractor::<f32>::DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub betas: Vec<f64>,
    /// Conditions for the beta ablation sit this far from each target.
    pub beta_distance_mm: f64,
    pub grid: DistanceGrid,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.01],
            beta_distance_mm: 30.0,
            grid: DistanceGrid::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizeSection {
    pub fat_method: FatMethod,
    pub jitter_split_mm: f64,
    pub panels: bool,
}

impl Default for HarmonizeSection {
    fn default() -> Self {
        Self {
            fat_method: FatMethod::Threshold,
            jitter_split_mm: DEFAULT_JITTER_SPLIT_MM,
            panels: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetSection,
    pub cohort: CohortConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub target: TargetSection,
    pub evaluate: EvaluateSection,
    pub ablation: AblationSection,
    pub harmonize: HarmonizeSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected section.key=value")]
    Override(String),
}

const SECTIONS: [&str; 8] = ["dataset", "cohort", "model", "train", "target", "evaluate", "ablation", "harmonize"];

/// A scalar, array or inline table written in TOML syntax; anything else is a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, section: &str, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    if !SECTIONS.contains(&section) || key.is_empty() {
        return Err(ConfigError::Override(format!("{section}.{key}")));
    }
    let mut table = root
        .entry(section)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| ConfigError::Parse(format!("[{section}] is not a table")))?;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(*part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Parse(format!("{section}.{key} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    /// Layer the file, the environment and `overrides` over the defaults.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        env.sort();
        for (name, raw) in env {
            // Section names contain no underscore, so the first one splits section from key.
            let Some((section, key)) = name.split_once('_') else {
                continue;
            };
            if SECTIONS.contains(&section) {
                set_path(&mut root, section, key, parse_value(&raw))?;
            }
        }
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let (section, key) = path.trim().split_once('.').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_path(&mut root, section, key, parse_value(raw.trim()))?;
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }
}
