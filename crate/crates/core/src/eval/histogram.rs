// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connection::SelectionRecord;
use crate::error::{Error, Result};

/// Reads `selections.jsonl`, reporting the first malformed line.
pub fn read_selections(path: &Path) -> Result<Vec<SelectionRecord>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: SelectionRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if r.weights.is_empty() || r.layer >= r.weights.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("layer {} outside {} weights", r.layer, r.weights.len()),
                });
            }
            Ok(r)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub total: usize,
    pub counts: Vec<usize>,
    pub percent: Vec<f64>,
}

impl LayerCounts {
    fn new(counts: Vec<usize>) -> Self {
        let total = counts.iter().sum();
        let percent = counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    100.0 * c as f64 / total as f64
                }
            })
            .collect();
        Self {
            total,
            counts,
            percent,
        }
    }
}

/// How often each layer was the argmax choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub n_layers: usize,
    pub all: LayerCounts,
    pub per_task: BTreeMap<String, LayerCounts>,
}

pub fn layer_selection_histogram(records: &[SelectionRecord]) -> Result<LayerHistogram> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no selection records"))?;
    let l = first.weights.len();
    let mut all = vec![0; l];
    let mut per_task: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in records {
        if r.weights.len() != l || r.layer >= l {
            return Err(Error::invalid(format!(
                "record {} does not match {l} layers",
                r.id
            )));
        }
        all[r.layer] += 1;
        if let Some(t) = r.task {
            per_task.entry(t.to_string()).or_insert_with(|| vec![0; l])[r.layer] += 1;
        }
    }
    Ok(LayerHistogram {
        n_layers: l,
        all: LayerCounts::new(all),
        per_task: per_task
            .into_iter()
            .map(|(k, v)| (k, LayerCounts::new(v)))
            .collect(),
    })
}

impl LayerHistogram {
    fn scopes(&self) -> impl Iterator<Item = (&str, &LayerCounts)> {
        std::iter::once(("all", &self.all))
            .chain(self.per_task.iter().map(|(k, v)| (k.as_str(), v)))
    }

    /// `scope,layer,count,percent` rows, the overall scope first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,layer,count,percent\n");
        for (scope, c) in self.scopes() {
            for l in 0..self.n_layers {
                s.push_str(&format!(
                    "{scope},{l},{},{:.4}\n",
                    c.counts[l], c.percent[l]
                ));
            }
        }
        s
    }

    /// One row per scope, one percentage column per layer.
    pub fn to_table(&self) -> String {
        let mut header = vec!["scope".to_string(), "n".to_string()];
        header.extend((0..self.n_layers).map(|l| format!("layer {l}")));
        let mut rows = vec![header];
        for (scope, c) in self.scopes() {
            let mut row = vec![scope.to_string(), c.total.to_string()];
            row.extend(c.percent.iter().map(|p| format!("{p:.1}%")));
            rows.push(row);
        }
        super::aligned_table(&rows)
    }
}
