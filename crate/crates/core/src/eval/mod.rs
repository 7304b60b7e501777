// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoding-based evaluation, diagnostics and the ablation runner.

mod ablation;
mod accuracy;
mod export;
mod histogram;
mod pipeline;

pub use ablation::{
    run_ablation, summarize_runs, AblationAxis, AblationRow, AblationSpec, AblationTable,
};
pub use accuracy::{
    accuracy_delta, evaluate_accuracy, is_language_consistent, parallel_vs_transform_delta,
    summarize, DeltaReport, EvalConfig, EvalMode, EvalOutput, EvalReport, InferenceModel,
    Prediction, Tally,
};
pub use export::{export_activation_dump, DumpMeta, DumpRecord};
pub use histogram::{layer_selection_histogram, read_selections, LayerCounts, LayerHistogram};
pub use pipeline::{fit_from_corpus, read_split, run_pipeline, write_selections, PipelineResult};

/// Left-aligned text table with two spaces between columns.
pub fn aligned_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
