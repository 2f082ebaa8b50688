use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use slicegen_core::ablation::{beta_ablation, beta_table, distance_ablation, distance_cases, PairingKind, Subject};
use slicegen_core::checkpoint::{load_checkpoint, save_checkpoint};
use slicegen_core::harmonize::{cv_analysis, harmonize_cohort, pairwise_nmi_analysis, write_panels};
use slicegen_core::image::Units;
use slicegen_core::metrics::{evaluate_testset, FeatureExtractor};
use slicegen_core::model::SliceGen;
use slicegen_core::phantom::{generate_cohort, read_series, write_series, SERIES_INDEX};
use slicegen_core::preprocess::window_and_rescale;
use slicegen_core::targetsel::{
    refine_target_semi_bpr, select_target_bpr, select_target_registration, write_manifest, SelectionMethod,
    TargetSelection, TranslationSearch,
};
use slicegen_core::trainer::{finetune, train, TrainLog, TrainingSet};
use slicegen_core::{Error, Result};

use crate::config::Config;
use crate::data::{self, COHORT};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let err = |e: csv::Error| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

fn training_set(subjects: &[Subject<f32>], cfg: &Config) -> Result<TrainingSet<f32>> {
    let mut set = TrainingSet::default();
    for s in subjects {
        set.add_volume(&s.volume, s.target_index, cfg.train.pairing_mode, cfg.model.image_size)?;
    }
    log::info!("{} training pairs from {} subjects", set.len(), subjects.len());
    Ok(set)
}

fn write_training(out: &Path, model: &SliceGen<f32>, log: &TrainLog) -> Result<()> {
    save_checkpoint(model, &out.join("model.ckpt"))?;
    write_text(&out.join("train_log.csv"), &log.to_csv())
}

pub fn phantom_gen(cfg: &Config, out: &Path, seed: u64) -> Result<()> {
    if cfg.dataset.subjects > 0 {
        let truth = data::write_dataset(out, &cfg.dataset, seed)?;
        log::info!("{} volumes written", truth.len());
    }
    if cfg.dataset.with_cohort {
        let cohort_cfg = slicegen_core::phantom::CohortConfig {
            seed,
            ..cfg.cohort.clone()
        };
        let cohort = generate_cohort::<f32>(&cohort_cfg)?;
        write_series(&out.join(COHORT), &cohort.series)?;
        log::info!("{} cohort series written", cohort.series.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct AccuracyRow {
    subject_id: String,
    selected: usize,
    truth: usize,
    error_slices: i64,
}

pub fn select_target(cfg: &Config, data_dir: &Path, reference_dir: Option<&Path>, out: &Path) -> Result<()> {
    let t = &cfg.target;
    let ref_dir = reference_dir.unwrap_or(data_dir);
    let ref_truth = data::read_truth(ref_dir)?;
    let ref_row = if t.reference_subject.is_empty() {
        ref_truth.first().ok_or_else(|| Error::Data("reference dataset is empty".into()))?
    } else {
        ref_truth
            .iter()
            .find(|r| r.subject_id == t.reference_subject)
            .ok_or_else(|| Error::Lookup {
                kind: "reference subject",
                id: t.reference_subject.clone(),
            })?
    };
    let ref_volume = data::load_volume(&ref_dir.join(data::VOLUMES).join(format!("{}.vol", ref_row.subject_id)))?;
    let reference = match ref_volume.slice(ref_row.target_index)? {
        raw if raw.units == Units::RawHu => window_and_rescale(&raw)?,
        normalized => normalized,
    };
    let reference_score = ref_volume.anatomy_score[ref_row.target_index];
    let search = TranslationSearch {
        radius: t.search_radius,
        step: t.search_step,
    };
    let mut selections: Vec<TargetSelection> = Vec::new();
    for path in data::volume_paths(data_dir)? {
        let volume = data::load_volume(&path)?;
        let mut sel = match t.method {
            SelectionMethod::Bpr => select_target_bpr(&volume.subject_id, &volume.anatomy_score, reference_score)?,
            SelectionMethod::Registration => select_target_registration(&volume, &reference, search)?,
            SelectionMethod::SemiBpr => {
                let initial = select_target_bpr(&volume.subject_id, &volume.anatomy_score, reference_score)?;
                refine_target_semi_bpr(&volume, initial.slice_index, &reference, t.refine_radius)?
            }
        };
        sel.reference_id = ref_row.subject_id.clone();
        log::info!("{}: slice {}", sel.subject_id, sel.slice_index);
        selections.push(sel);
    }
    write_manifest(&out.join("selections.csv"), &selections)?;

    if let Ok(truth) = data::read_truth(data_dir) {
        let rows: Vec<AccuracyRow> = selections
            .iter()
            .filter_map(|s| {
                let tr = truth.iter().find(|r| r.subject_id == s.subject_id)?;
                Some(AccuracyRow {
                    subject_id: s.subject_id.clone(),
                    selected: s.slice_index,
                    truth: tr.target_index,
                    error_slices: s.slice_index as i64 - tr.target_index as i64,
                })
            })
            .collect();
        write_rows(&out.join("accuracy.csv"), &rows)?;
        let n = rows.len().max(1) as f64;
        write_json(
            &out.join("summary.json"),
            &json!({
                "method": t.method,
                "reference_subject": ref_row.subject_id,
                "n_subjects": rows.len(),
                "exact_fraction": rows.iter().filter(|r| r.error_slices == 0).count() as f64 / n,
                "mean_abs_error_slices": rows.iter().map(|r| r.error_slices.unsigned_abs() as f64).sum::<f64>() / n,
            }),
        )?;
    }
    Ok(())
}

pub fn train_cmd(cfg: &Config, data_dir: &Path, targets: Option<&Path>, out: &Path) -> Result<()> {
    let subjects = data::load_subjects(data_dir, targets)?;
    let set = training_set(&subjects, cfg)?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let (model, log) = train(&cfg.model, &cfg.train, &set, Some(&ckpt_dir))?;
    write_training(out, &model, &log)
}

pub fn finetune_cmd(cfg: &Config, checkpoint: &Path, data_dir: &Path, targets: Option<&Path>, out: &Path) -> Result<()> {
    let mut model = load_checkpoint::<f32>(checkpoint, None)?;
    let subjects = data::load_subjects(data_dir, targets)?;
    let set = training_set(&subjects, cfg)?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let log = finetune(&mut model, &set, &cfg.train, cfg.train.max_steps, Some(&ckpt_dir))?;
    write_training(out, &model, &log)
}

fn features(cfg: &Config) -> FeatureExtractor<f32> {
    FeatureExtractor::seeded(cfg.evaluate.features_seed)
}

pub fn evaluate(cfg: &Config, checkpoint: &Path, data_dir: &Path, targets: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint, None)?;
    let subjects = data::load_subjects(data_dir, targets)?;
    let cases = distance_cases(
        &subjects,
        PairingKind::FixedRange,
        cfg.evaluate.distance_mm,
        model.config.image_size,
        usize::MAX,
    )?;
    if cases.is_empty() {
        return Err(Error::Data("no condition slice lies at the evaluation distance".into()));
    }
    let report = evaluate_testset(&model, &cases, &features(cfg), seed)?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_json(&out.join("summary.json"), &report.summary_json())?;
    write_text(&out.join("table.txt"), &report.table())
}

pub fn ablate_beta(cfg: &Config, data_dir: &Path, test_dir: &Path, out: &Path) -> Result<()> {
    let train_subjects = data::load_subjects(data_dir, None)?;
    let test_subjects = data::load_subjects(test_dir, None)?;
    let set = training_set(&train_subjects, cfg)?;
    let cases = distance_cases(
        &test_subjects,
        PairingKind::FixedRange,
        cfg.ablation.beta_distance_mm,
        cfg.model.image_size,
        usize::MAX,
    )?;
    let results = beta_ablation(&cfg.model, &cfg.train, &set, &cfg.ablation.betas, &cases, &features(cfg))?;
    let rows: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    write_rows(&out.join("beta.csv"), &rows)?;
    write_text(&out.join("table.txt"), &beta_table(&rows))?;
    for (row, log) in &results {
        write_text(&out.join("logs").join(format!("beta-{}.csv", row.beta)), &log.to_csv())?;
    }
    Ok(())
}

pub fn ablate_distance(cfg: &Config, data_dir: &Path, test_dir: &Path, out: &Path, seed: u64) -> Result<()> {
    let train_subjects = data::load_subjects(data_dir, None)?;
    let test_subjects = data::load_subjects(test_dir, None)?;
    let mut grid = cfg.ablation.grid.clone();
    grid.seeds = grid.seeds.iter().map(|s| seed.wrapping_add(*s)).collect();
    let report = distance_ablation(&cfg.model, &cfg.train, &train_subjects, &test_subjects, &grid, &features(cfg))?;
    write_text(&out.join("ablation.csv"), &report.to_csv())?;
    write_text(&out.join("table.txt"), &report.table())
}

/// A cohort directory: either `dir` itself or its `cohort/` child.
pub fn cohort_dir(dir: &Path) -> PathBuf {
    if dir.join(SERIES_INDEX).exists() {
        dir.to_path_buf()
    } else {
        dir.join(COHORT)
    }
}

pub fn harmonize(cfg: &Config, checkpoint: &Path, data_dir: &Path, out: &Path, seed: u64) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint, None)?;
    let series = read_series::<f32>(&cohort_dir(data_dir))?;
    let h = &cfg.harmonize;
    let (results, skipped) = harmonize_cohort(&model, &series, h.fat_method, seed)?;
    let report = cv_analysis(&results, h.jitter_split_mm)?;
    let nmi = pairwise_nmi_analysis(&results);
    write_text(&out.join("subjects.csv"), &report.to_csv())?;
    write_text(&out.join("table.txt"), &report.table())?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "cv": report.summary_json(),
            "nmi": {
                "mean_original": nmi.mean_original,
                "mean_harmonized": nmi.mean_harmonized,
                "collapse": nmi.collapse,
            },
            "skipped": skipped,
        }),
    )?;
    write_json(&out.join("nmi.json"), &nmi)?;
    if h.panels {
        write_panels(&out.join("panels"), &results)?;
    }
    Ok(())
}
