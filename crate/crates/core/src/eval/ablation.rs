// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::accuracy::EvalMode;
use super::pipeline::{run_pipeline, PipelineResult};
use crate::config::ExperimentConfig;
use crate::corpus::{Lang, TaskKind};
use crate::error::{Error, Result};
use crate::model::Site;
use crate::training::{Augmentation, TrainMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Selector,
    FusionSite,
    Augmentation,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Selector => "selector",
            AblationAxis::FusionSite => "fusion_site",
            AblationAxis::Augmentation => "augmentation",
        }
    }

    pub fn default_variants(self) -> Vec<String> {
        let v: Vec<&str> = match self {
            AblationAxis::Selector => vec!["decision_maker", "mean_pooling", "random_pooling"],
            AblationAxis::FusionSite => Site::ALL.iter().map(|s| s.as_str()).collect(),
            AblationAxis::Augmentation => Augmentation::ALL.iter().map(|a| a.as_str()).collect(),
        };
        v.into_iter().map(String::from).collect()
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AblationAxis::Selector,
            AblationAxis::FusionSite,
            AblationAxis::Augmentation,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}`")))
    }
}

/// One axis, its variants, and the seeds every variant is run with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    pub fn new(axis: AblationAxis, seeds: Vec<u64>) -> Self {
        Self {
            axis,
            variants: axis.default_variants(),
            seeds,
        }
    }

    /// `base` with this axis set to `variant`; every other setting is kept.
    pub fn apply(&self, base: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.train.mode = TrainMode::Cc;
        match self.axis {
            AblationAxis::Selector => {
                crate::connection::SelectorRegistry::<f32>::with_builtins().create(variant)?;
                cfg.connection.selector = variant.to_string();
            }
            AblationAxis::FusionSite => cfg.connection.site = variant.parse()?,
            AblationAxis::Augmentation => cfg.train.augmentation = variant.parse()?,
        }
        Ok(cfg)
    }

    pub fn validate(&self, base: &ExperimentConfig) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::config(
                "an ablation needs at least one variant and one seed",
            ));
        }
        for v in &self.variants {
            self.apply(base, v)?;
        }
        Ok(())
    }
}

/// Seed-averaged scores of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: usize,
    pub lang_b_parallel: f64,
    pub lang_b_transform: f64,
    pub lang_b_lookup_parallel: f64,
    pub lang_a: f64,
    pub abs_delta: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn summarize_runs(variant: &str, runs: &[PipelineResult]) -> AblationRow {
    let acc = |mode: EvalMode, lang: Lang| {
        mean(
            runs.iter()
                .filter_map(|r| r.reports.get(&mode))
                .map(|r| r.accuracy_of(lang)),
        )
    };
    AblationRow {
        variant: variant.to_string(),
        runs: runs.len(),
        lang_b_parallel: acc(EvalMode::ParallelInput, Lang::LangB),
        lang_b_transform: acc(EvalMode::TransformMatrix, Lang::LangB),
        lang_b_lookup_parallel: mean(
            runs.iter()
                .filter_map(|r| r.reports.get(&EvalMode::ParallelInput))
                .filter_map(|r| r.task_accuracy(Lang::LangB, TaskKind::Lookup)),
        ),
        lang_a: acc(EvalMode::ParallelInput, Lang::LangA),
        abs_delta: mean(runs.iter().filter_map(|r| r.abs_delta_average)),
        final_loss: mean(runs.iter().map(|r| r.final_loss)),
    }
}

const COLUMNS: [&str; 8] = [
    "variant",
    "runs",
    "lang_b_parallel",
    "lang_b_transform",
    "lang_b_lookup_parallel",
    "lang_a",
    "abs_delta",
    "final_loss",
];

impl AblationRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.variant.clone(),
            self.runs.to_string(),
            format!("{:.4}", self.lang_b_parallel),
            format!("{:.4}", self.lang_b_transform),
            format!("{:.4}", self.lang_b_lookup_parallel),
            format!("{:.4}", self.lang_a),
            format!("{:.4}", self.abs_delta),
            format!("{:.4}", self.final_loss),
        ]
    }
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = COLUMNS.join(",") + "\n";
        for r in &self.rows {
            s.push_str(&r.cells().join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![COLUMNS.iter().map(|c| c.to_string()).collect::<Vec<_>>()];
        rows.extend(self.rows.iter().map(AblationRow::cells));
        super::aligned_table(&rows)
    }
}

/// Runs every variant with every seed on the same data and writes
/// `ablation.csv` / `ablation.txt` under `out_dir`.
pub fn run_ablation(
    spec: &AblationSpec,
    base: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<AblationTable> {
    spec.validate(base)?;
    let mut rows = Vec::with_capacity(spec.variants.len());
    for v in &spec.variants {
        let cfg = spec.apply(base, v)?;
        let runs = spec
            .seeds
            .iter()
            .map(|&s| {
                let run_cfg = cfg.clone().with_run_seed(s);
                run_pipeline(
                    &run_cfg,
                    data_dir,
                    &out_dir.join(v).join(format!("seed{s}")),
                    None,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(summarize_runs(v, &runs));
    }
    let table = AblationTable {
        axis: spec.axis,
        rows,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("ablation.csv"), table.to_csv())?;
    fs::write(out_dir.join("ablation.txt"), table.to_table())?;
    Ok(table)
}
