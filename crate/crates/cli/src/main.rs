// SPDX-License-Identifier: MIT OR Apache-2.0

//! `cctune` command-line front end.
//!
//! Exit codes: 0 on success, 1 when the input is rejected (bad flags,
//! bad config, missing files), 2 when a run fails midway.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cctune::config::ExperimentConfig;
use cctune::connection::SelectionRecord;
use cctune::corpus::{bilingual_pairs, generate_parallel_corpus, read_manifest, write_corpus};
use cctune::error::{Error, Result};
use cctune::eval::{
    accuracy_delta, aligned_table, evaluate_accuracy, export_activation_dump,
    layer_selection_histogram, read_selections, read_split, run_ablation, write_selections,
    AblationAxis, AblationSpec, EvalMode, EvalReport, InferenceModel,
};
use cctune::model::Site;
use cctune::training::{
    load_checkpoint, load_training_data, run_training, TimingReport, TrainMode, Trainer,
};
use cctune::transform::{
    collect_activation_bank, curve_csv, fit_transform_matrix, mse_vs_samples_curve, TransformFit,
    HELD_OUT_FRACTION,
};

#[derive(Parser)]
#[command(
    name = "cctune",
    version,
    about = "Cross-lingual activation fusion on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for the stochastic parts of this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment config (TOML); unset sections keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory that receives every output file.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parallel corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training examples.
        #[arg(long)]
        n: Option<usize>,
        /// Test examples.
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train a model with plain fine-tuning or with fusion.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// `sft` or `cc`.
        #[arg(long)]
        mode: Option<TrainMode>,
        /// `none`, `en`, or `mt`.
        #[arg(long)]
        augmentation: Option<cctune::training::Augmentation>,
        /// Optimizer step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Peak learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// `decision_maker`, `mean_pooling`, or `random_pooling`.
        #[arg(long)]
        selector: Option<String>,
        /// Injection site in the first layer: `ffn`, `attn`, or `block`.
        #[arg(long)]
        site: Option<Site>,
        /// Continue from `<out-dir>/checkpoint`.
        #[arg(long)]
        resume: bool,
        /// `timing.json` of a baseline run; its per-step time is the ratio denominator.
        #[arg(long)]
        reference_timing: Option<PathBuf>,
    },
    /// Fit the Transform Matrix on a trained checkpoint.
    FitTransform {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Bilingual pairs in the activation bank.
        #[arg(long)]
        bank_size: Option<usize>,
        /// Explicit ridge strength; 0 means plain least squares.
        #[arg(long)]
        lambda: Option<f64>,
        /// Also write the held-out MSE curve over `transform.curve_sizes`.
        #[arg(long)]
        curve: bool,
    },
    /// Score exact-match accuracy under one or all inference modes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Split file inside the corpus directory.
        #[arg(long, default_value = "test.jsonl")]
        split: String,
        /// `none`, `parallel_input`, `transform_matrix`, or `all`.
        #[arg(long, default_value = "all")]
        mode: String,
        /// Directory written by `fit-transform` (its `transform/` subdirectory or itself).
        #[arg(long)]
        transform: Option<PathBuf>,
        /// Dump final-layer activations at the tap position.
        #[arg(long)]
        export_activations: bool,
    },
    /// Run every variant of one ablation axis and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `selector`, `fusion_site`, or `augmentation`.
        #[arg(long)]
        axis: AblationAxis,
        /// Corpus directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated run seeds; defaults to `--seed`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated variants; defaults to every variant of the axis.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Optimizer step budget of every run.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Summarize a run directory: layer choices, timing, MSE curve.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directory of `train`, `fit-transform`, or a full run.
        #[arg(long)]
        run: PathBuf,
        /// Baseline run directory for the wall-time ratio.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, n, n_test } => gen_data(&common, n, n_test),
        Command::Train {
            common,
            data,
            mode,
            augmentation,
            steps,
            lr,
            selector,
            site,
            resume,
            reference_timing,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg = cfg.with_run_seed(s);
            }
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(a) = augmentation {
                cfg.train.augmentation = a;
            }
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(s) = selector {
                cfg.connection.selector = s;
            }
            if let Some(s) = site {
                cfg.connection.site = s;
            }
            cfg.validate()?;
            train(
                &cfg,
                &data,
                &common.out_dir,
                resume,
                reference_timing.as_deref(),
            )
        }
        Command::FitTransform {
            common,
            checkpoint,
            data,
            bank_size,
            lambda,
            curve,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(b) = bank_size {
                cfg.transform.bank_size = b;
            }
            if let Some(l) = lambda {
                cfg.transform.lambda = l;
            }
            cfg.validate()?;
            fit_transform(&cfg, &checkpoint, &data, &common.out_dir, curve)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            mode,
            transform,
            export_activations,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            let modes = if mode == "all" {
                None
            } else {
                Some(mode.parse::<EvalMode>()?)
            };
            eval(
                &cfg,
                &checkpoint,
                &data,
                &split,
                modes,
                transform.as_deref(),
                export_activations,
                &common.out_dir,
            )
        }
        Command::Ablate {
            common,
            axis,
            data,
            seeds,
            variants,
            steps,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            let seeds = if seeds.is_empty() {
                vec![common.seed.unwrap_or(cfg.train.seed)]
            } else {
                seeds
            };
            let mut spec = AblationSpec::new(axis, seeds);
            if !variants.is_empty() {
                spec.variants = variants;
            }
            cfg.validate()?;
            let table = run_ablation(&spec, &cfg, &data, &common.out_dir)?;
            print!("{}", table.to_table());
            println!("wrote {}", common.out_dir.join("ablation.csv").display());
            Ok(())
        }
        Command::Report {
            common,
            run,
            baseline,
        } => report(&run, baseline.as_deref(), &common.out_dir),
    }
}

fn gen_data(common: &Common, n: Option<usize>, n_test: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.corpus.seed = s;
    }
    if let Some(n) = n {
        cfg.corpus.n_examples = n;
    }
    if let Some(n) = n_test {
        cfg.corpus.n_test = n;
    }
    cfg.corpus.validate()?;
    let corpus = generate_parallel_corpus(&cfg.corpus)?;
    let manifest = write_corpus(&common.out_dir, &corpus)?;
    for f in &manifest.files {
        println!("{:<16} {:>6} records", f.path, f.records);
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn train(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
    resume: bool,
    reference: Option<&Path>,
) -> Result<()> {
    let ckpt = out.join("checkpoint");
    let mut trainer = if resume {
        if !ckpt.exists() {
            return Err(Error::MissingPath(ckpt));
        }
        let (meta, _) = load_checkpoint(&ckpt)?;
        Trainer::resume(&ckpt, load_training_data(data_dir, &meta.train)?)?
    } else {
        let data = load_training_data(data_dir, &cfg.train)?;
        Trainer::new(
            cfg.model.clone(),
            cfg.connection.clone(),
            cfg.train.clone(),
            data,
        )?
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let outputs = run_training(&mut trainer, out, reference)?;
    let last = outputs.losses.last().map_or(f64::NAN, |l| l.1);
    println!(
        "{} steps, final loss {last:.4}, {:.3} ms/step",
        outputs.timing.steps,
        outputs.timing.per_step_s * 1e3
    );
    if let Some(r) = outputs.timing.ratio_vs_reference {
        println!("wall-time ratio vs reference {r:.2}");
    }
    Ok(())
}

fn fit_transform(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    curve: bool,
) -> Result<()> {
    let m = InferenceModel::load(checkpoint)?;
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
    let fit = fit_transform_matrix(&bank, cfg.transform.lambda)?;
    fs::create_dir_all(out)?;
    fit.save(&out.join("transform"))?;
    println!(
        "W_T from {} pairs at site {}: residual MSE {:.6}, lambda {:e}, condition {:e}",
        fit.sample_count, fit.site, fit.residual_mse, fit.lambda, fit.condition
    );
    if curve {
        let hold = (pairs.len() as f64 * HELD_OUT_FRACTION).round() as usize;
        let pool = pairs.len().saturating_sub(hold.max(1));
        let sizes: Vec<usize> = cfg
            .transform
            .curve_sizes
            .iter()
            .copied()
            .filter(|&s| s <= pool)
            .collect();
        if sizes.len() < cfg.transform.curve_sizes.len() {
            eprintln!(
                "note: curve limited to sizes <= {pool}, the pairs left after holding out {hold}"
            );
        }
        let points = mse_vs_samples_curve(
            &m.params,
            &m.model,
            &pairs,
            &sizes,
            cfg.transform.lambda,
            cfg.train.seed,
            m.connection.site,
        )?;
        fs::write(out.join("mse_curve.csv"), curve_csv(&points))?;
        write_json(&out.join("mse_curve.json"), &points)?;
        for p in &points {
            println!(
                "|M| = {:>5}  held-out MSE {:.6}  in-sample {:.6}",
                p.size, p.held_out_mse, p.in_sample_mse
            );
        }
    }
    Ok(())
}

fn load_fit(path: &Path) -> Result<TransformFit> {
    let nested = path.join("transform");
    TransformFit::load(if nested.is_dir() { &nested } else { path })
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
    mode: Option<EvalMode>,
    transform: Option<&Path>,
    export: bool,
    out: &Path,
) -> Result<()> {
    let m = InferenceModel::load(checkpoint)?;
    let manifest = read_manifest(data_dir)?;
    let modes: Vec<EvalMode> = match mode {
        Some(m) => vec![m],
        None if m.trained_as == TrainMode::Cc => {
            let mut v = vec![EvalMode::None, EvalMode::ParallelInput];
            if transform.is_some() {
                v.push(EvalMode::TransformMatrix);
            }
            v
        }
        None => vec![EvalMode::None],
    };
    let fit = match transform {
        Some(p) => Some(load_fit(p)?),
        None if modes.contains(&EvalMode::TransformMatrix) => {
            return Err(Error::invalid(
                "transform_matrix evaluation needs --transform",
            ));
        }
        None => None,
    };
    let needs_parallel = modes.contains(&EvalMode::ParallelInput);
    let data = read_split(data_dir, split, needs_parallel)?;
    fs::create_dir_all(out)?;

    let mut reports: Vec<EvalReport> = Vec::new();
    for mode in modes {
        let o = evaluate_accuracy(
            &m,
            &data,
            mode,
            fit.as_ref(),
            &manifest.languages,
            &cfg.eval,
        )?;
        let mut lines = String::new();
        for p in &o.predictions {
            lines.push_str(&serde_json::to_string(p)?);
            lines.push('\n');
        }
        fs::write(out.join(format!("predictions_{mode}.jsonl")), lines)?;
        if !o.selections.is_empty() {
            write_selections(
                &out.join(format!("eval_selections_{mode}.jsonl")),
                &o.selections,
            )?;
        }
        reports.push(o.report);
    }

    let mut rows = vec![vec![
        "mode".to_string(),
        "lang".into(),
        "accuracy".into(),
        "consistency".into(),
    ]];
    for r in &reports {
        for (lang, acc) in &r.accuracy {
            rows.push(vec![
                r.mode.to_string(),
                lang.to_string(),
                format!("{acc:.4}"),
                format!("{:.4}", r.consistency[lang]),
            ]);
        }
    }
    print!("{}", aligned_table(&rows));
    let par = reports.iter().find(|r| r.mode == EvalMode::ParallelInput);
    let tr = reports.iter().find(|r| r.mode == EvalMode::TransformMatrix);
    let delta = match (par, tr) {
        (Some(p), Some(t)) => {
            let (signed, abs, avg) = accuracy_delta(p, t);
            println!("average |parallel - transform| = {:.2} points", avg * 100.0);
            Some(serde_json::json!({ "signed": signed, "abs": abs, "abs_average": avg }))
        }
        _ => None,
    };
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({ "reports": reports, "delta": delta }),
    )?;
    if export {
        let meta = export_activation_dump(&m.params, &m.model, &data, &out.join("activations"))?;
        println!("exported {} activation rows", meta.records.len());
    }
    Ok(())
}

fn histogram_section(title: &str, records: &[SelectionRecord], csv: &Path) -> Result<String> {
    let h = layer_selection_histogram(records)?;
    fs::write(csv, h.to_csv())?;
    Ok(format!(
        "{title} ({} records)\n{}\n",
        records.len(),
        h.to_table()
    ))
}

fn find_file(run: &Path, name: &str) -> Option<PathBuf> {
    [
        run.join(name),
        run.join("train").join(name),
        run.join("transform").join(name),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

fn read_timing(run: &Path) -> Result<Option<TimingReport>> {
    match find_file(run, "timing.json") {
        Some(p) => Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?)),
        None => Ok(None),
    }
}

fn report(run: &Path, baseline: Option<&Path>, out: &Path) -> Result<()> {
    if !run.is_dir() {
        return Err(Error::MissingPath(run.to_path_buf()));
    }
    fs::create_dir_all(out)?;
    let mut text = String::new();

    if let Some(p) = find_file(run, "selections.jsonl") {
        text += &histogram_section(
            "Layer selections during training",
            &read_selections(&p)?,
            &out.join("histogram_train.csv"),
        )?;
    }
    let mut eval_files: Vec<PathBuf> = fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_selections") && n.ends_with(".jsonl"))
        })
        .collect();
    eval_files.sort();
    for p in eval_files {
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("eval_selections")
            .to_string();
        let csv = out.join(format!(
            "histogram_{}.csv",
            stem.trim_start_matches("eval_selections")
                .trim_start_matches('_')
        ));
        let csv = if csv.file_name().and_then(|n| n.to_str()) == Some("histogram_.csv") {
            out.join("histogram_eval.csv")
        } else {
            csv
        };
        text += &histogram_section(
            &format!("Layer selections at inference ({stem})"),
            &read_selections(&p)?,
            &csv,
        )?;
    }

    if let Some(t) = read_timing(run)? {
        let base = match baseline {
            Some(b) => {
                Some(read_timing(b)?.ok_or_else(|| Error::MissingPath(b.join("timing.json")))?)
            }
            None => None,
        };
        let ratio = base
            .as_ref()
            .filter(|b| b.per_step_s > 0.0)
            .map(|b| t.per_step_s / b.per_step_s)
            .or(t.ratio_vs_reference);
        let mut rows = vec![vec!["phase".to_string(), "seconds".into()]];
        for (k, v) in [
            ("english forward", t.forward_en_s),
            ("main forward", t.forward_main_s),
            ("backward", t.backward_s),
            ("total", t.total_s),
        ] {
            rows.push(vec![k.to_string(), format!("{v:.3}")]);
        }
        text += &format!(
            "Timing ({} run, {} steps, {:.3} ms/step)\n",
            t.mode,
            t.steps,
            t.per_step_s * 1e3
        );
        text += &aligned_table(&rows);
        if let Some(r) = ratio {
            text += &format!("wall-time ratio vs baseline: {r:.3}\n");
        }
        let [lo, hi] = t.full_scale_ratio_range;
        text += &format!("ratio measured on 7-8B models for context: {lo:.2} to {hi:.2}\n\n");
    }

    if let Some(p) = find_file(run, "mse_curve.csv") {
        text += "Transform Matrix held-out MSE by bank size\n";
        text += &fs::read_to_string(&p)?;
        text.push('\n');
        fs::copy(&p, out.join("mse_curve.csv"))?;
    }
    if let Some(p) = find_file(run, "loss.csv") {
        let body = fs::read_to_string(&p)?;
        let rows: Vec<&str> = body.lines().skip(1).collect();
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            text += &format!(
                "Loss: first {first}, last {last} ({} steps logged)\n",
                rows.len()
            );
        }
    }

    if text.is_empty() {
        return Err(Error::invalid(format!(
            "{} holds no run artifacts to report on",
            run.display()
        )));
    }
    fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
