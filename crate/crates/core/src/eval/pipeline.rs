// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::accuracy::{accuracy_delta, evaluate_accuracy, EvalMode, EvalReport, InferenceModel};
use crate::config::ExperimentConfig;
use crate::corpus::{bilingual_pairs, read_jsonl, read_manifest, ParallelExample, ReadOptions};
use crate::error::{Error, Result};
use crate::training::{load_training_data, run_training, TimingReport, TrainMode, Trainer};
use crate::transform::{collect_activation_bank, fit_transform_matrix, TransformFit};

/// Reads a corpus split, failing with the missing path.
pub fn read_split(data_dir: &Path, file: &str, require_x_en: bool) -> Result<Vec<ParallelExample>> {
    let path = data_dir.join(file);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    read_jsonl(&path, ReadOptions { require_x_en })
}

/// Samples parallel pairs from the training split and fits `W_T`.
pub fn fit_from_corpus(
    m: &InferenceModel,
    data_dir: &Path,
    cfg: &ExperimentConfig,
) -> Result<TransformFit> {
    let manifest = read_manifest(data_dir)?;
    let train = read_split(data_dir, "train.jsonl", true)?;
    let pairs = bilingual_pairs(&train, &manifest.languages)?;
    let limit = cfg.transform.bank_size.min(pairs.len());
    let bank = collect_activation_bank(
        &m.params,
        &m.model,
        &pairs,
        limit,
        cfg.train.seed,
        m.connection.site,
    )?;
    fit_transform_matrix(&bank, cfg.transform.lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub mode: TrainMode,
    pub seed: u64,
    pub final_loss: f64,
    pub reports: BTreeMap<EvalMode, EvalReport>,
    pub fit: Option<TransformFit>,
    /// Average |Δ| between parallel-input and Transform Matrix accuracy.
    pub abs_delta_average: Option<f64>,
    pub timing: TimingReport,
}

/// Train, then (for cc runs) fit `W_T`, then evaluate on `test.jsonl`.
/// Everything lands under `out_dir`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    reference_timing: Option<&Path>,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let manifest = read_manifest(data_dir)?;
    let data = load_training_data(data_dir, &cfg.train)?;
    let test = read_split(data_dir, "test.jsonl", cfg.train.mode == TrainMode::Cc)?;
    let mut trainer = Trainer::new(
        cfg.model.clone(),
        cfg.connection.clone(),
        cfg.train.clone(),
        data,
    )?;
    let train_dir = out_dir.join("train");
    let out = run_training(&mut trainer, &train_dir, reference_timing)?;
    let m = InferenceModel::load(&train_dir.join("checkpoint"))?;
    let pair = &manifest.languages;

    let mut reports = BTreeMap::new();
    let none = evaluate_accuracy(&m, &test, EvalMode::None, None, pair, &cfg.eval)?;
    reports.insert(EvalMode::None, none.report);
    let (mut fit, mut abs_delta_average) = (None, None);
    if cfg.train.mode == TrainMode::Cc {
        let f = fit_from_corpus(&m, data_dir, cfg)?;
        f.save(&out_dir.join("transform"))?;
        let par = evaluate_accuracy(&m, &test, EvalMode::ParallelInput, None, pair, &cfg.eval)?;
        let tr = evaluate_accuracy(
            &m,
            &test,
            EvalMode::TransformMatrix,
            Some(&f),
            pair,
            &cfg.eval,
        )?;
        abs_delta_average = Some(accuracy_delta(&par.report, &tr.report).2);
        write_selections(&out_dir.join("eval_selections.jsonl"), &par.selections)?;
        reports.insert(EvalMode::ParallelInput, par.report);
        reports.insert(EvalMode::TransformMatrix, tr.report);
        fit = Some(f);
    }
    let result = PipelineResult {
        mode: cfg.train.mode,
        seed: cfg.train.seed,
        final_loss: out.losses.last().map_or(f64::NAN, |l| l.1),
        reports,
        fit,
        abs_delta_average,
        timing: out.timing,
    };
    fs::write(
        out_dir.join("result.json"),
        serde_json::to_string_pretty(&result)? + "\n",
    )?;
    Ok(result)
}

pub fn write_selections(path: &Path, records: &[crate::connection::SelectionRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}
