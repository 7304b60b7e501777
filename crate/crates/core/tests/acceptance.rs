// SPDX-License-Identifier: MIT OR Apache-2.0

//! The twelve acceptance criteria, one status line each.
//!
//! Criterion 7 is directional and soft: a miss is reported, its run
//! artifacts are written for diagnosis, and the target still passes.
//! Every other criterion is a hard gate. Artifacts land under
//! `$CARGO_TARGET_TMPDIR/acceptance`.

mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cctune::autograd::{Graph, NodeId, Segment};
use cctune::config::ExperimentConfig;
use cctune::connection::{
    cc_forward, cc_loss, decision_logits, gumbel_softmax_weights, sample_gumbel, ConnectionConfig,
    ConnectionNodes, DecisionMaker, DecisionMakerSelector, EnglishSource, SelectionInput,
    SelectionMode, SelectionSettings, SelectorRegistry,
};
use cctune::corpus::{
    bilingual_pairs, generate_parallel_corpus, write_corpus, CorpusConfig, Lang, ParallelExample,
    TaskKind,
};
use cctune::eval::{
    layer_selection_histogram, read_selections, run_ablation, run_pipeline, AblationAxis,
    AblationSpec, EvalMode, InferenceModel, PipelineResult,
};
use cctune::gradcheck::finite_difference_check;
use cctune::model::{ModelConfig, Parameters, Site};
use cctune::training::{load_checkpoint, TrainConfig, TrainMode, Trainer};
use cctune::transform::{
    collect_activation_bank, curve_csv, fit_transform_matrix, mse_vs_samples_curve,
};
use cctune::Tensor;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    SoftMiss,
}

struct Outcome {
    id: u8,
    name: &'static str,
    status: Status,
    detail: String,
    seconds: f64,
}

impl Outcome {
    fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::SoftMiss => "MISS (soft)",
        };
        format!(
            "criterion {:>2} {:<28} {tag}: {} [{:.1}s]",
            self.id, self.name, self.detail, self.seconds
        )
    }
}

/// Writes past libtest's output capture so the lines show in every run.
fn emit(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn run(id: u8, name: &'static str, soft: bool, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let (status, detail) = match result {
        Ok(d) => (Status::Pass, d),
        Err(d) if soft => (Status::SoftMiss, d),
        Err(d) => (Status::Fail, d),
    };
    let o = Outcome {
        id,
        name,
        status,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    };
    emit(&o.line());
    o
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn rand_t(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> cctune::Result<NodeId>>;

/// `sum(out ⊙ P)` for a fixed random probe `P`, so every output entry
/// carries its own weight in the gradient.
fn probe(g: &mut Graph<f64>, out: NodeId, p: &Tensor<f64>) -> cctune::Result<NodeId> {
    let c = g.constant(p.clone());
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

const OP_NAMES: [&str; 18] = [
    "matmul",
    "add",
    "mul",
    "add_row",
    "scale",
    "silu",
    "layer_norm",
    "embedding",
    "causal_attention",
    "row_softmax",
    "cross_entropy",
    "gather_rows",
    "scatter_rows",
    "row_mix",
    "mean_of",
    "sum",
    "decision_gumbel_soft",
    "end_to_end_cc_loss",
];

fn op_case(op: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Builder) {
    match op {
        0 => {
            let p = rand_t(rng, 3, 2, 1.0);
            (
                vec![rand_t(rng, 3, 4, 1.0), rand_t(rng, 4, 2, 1.0)],
                Box::new(move |g, ids| {
                    let o = g.matmul(ids[0], ids[1])?;
                    probe(g, o, &p)
                }),
            )
        }
        1 | 2 => {
            let p = rand_t(rng, 3, 4, 1.0);
            (
                vec![rand_t(rng, 3, 4, 1.0), rand_t(rng, 3, 4, 1.0)],
                Box::new(move |g, ids| {
                    let o = if op == 1 {
                        g.add(ids[0], ids[1])?
                    } else {
                        g.mul(ids[0], ids[1])?
                    };
                    probe(g, o, &p)
                }),
            )
        }
        3 => {
            let p = rand_t(rng, 3, 4, 1.0);
            (
                vec![rand_t(rng, 3, 4, 1.0), rand_t(rng, 1, 4, 1.0)],
                Box::new(move |g, ids| {
                    let o = g.add_row(ids[0], ids[1])?;
                    probe(g, o, &p)
                }),
            )
        }
        4 => {
            let p = rand_t(rng, 3, 4, 1.0);
            let factor = rng.gen_range(-2.0..2.0);
            (
                vec![rand_t(rng, 3, 4, 1.0)],
                Box::new(move |g, ids| {
                    let o = g.scale(ids[0], factor);
                    probe(g, o, &p)
                }),
            )
        }
        5 => {
            let p = rand_t(rng, 3, 4, 1.0);
            (
                vec![rand_t(rng, 3, 4, 3.0)],
                Box::new(move |g, ids| {
                    let o = g.silu(ids[0]);
                    probe(g, o, &p)
                }),
            )
        }
        6 => {
            let p = rand_t(rng, 3, 6, 1.0);
            (
                vec![
                    rand_t(rng, 3, 6, 2.0),
                    rand_t(rng, 1, 6, 1.5),
                    rand_t(rng, 1, 6, 1.0),
                ],
                Box::new(move |g, ids| {
                    let o = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                    probe(g, o, &p)
                }),
            )
        }
        7 => {
            let p = rand_t(rng, 5, 4, 1.0);
            let ids_tok: Vec<usize> = (0..5).map(|_| rng.gen_range(0..10)).collect();
            (
                vec![rand_t(rng, 10, 4, 1.0)],
                Box::new(move |g, ids| {
                    let o = g.embedding(ids[0], &ids_tok)?;
                    probe(g, o, &p)
                }),
            )
        }
        8 => {
            let p = rand_t(rng, 6, 8, 1.0);
            let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 4 }];
            (
                vec![
                    rand_t(rng, 6, 8, 1.0),
                    rand_t(rng, 6, 8, 1.0),
                    rand_t(rng, 6, 8, 1.0),
                ],
                Box::new(move |g, ids| {
                    let o = g.causal_attention(ids[0], ids[1], ids[2], &segs, 2)?;
                    probe(g, o, &p)
                }),
            )
        }
        9 => {
            let p = rand_t(rng, 3, 5, 1.0);
            (
                vec![rand_t(rng, 3, 5, 2.0)],
                Box::new(move |g, ids| {
                    let o = g.row_softmax(ids[0]);
                    probe(g, o, &p)
                }),
            )
        }
        10 => {
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
            let mut mask: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.6)).collect();
            mask[0] = true;
            (
                vec![rand_t(rng, 4, 7, 2.0)],
                Box::new(move |g, ids| g.cross_entropy(ids[0], &targets, &mask)),
            )
        }
        11 => {
            let p = rand_t(rng, 4, 3, 1.0);
            (
                vec![rand_t(rng, 5, 3, 1.0)],
                Box::new(move |g, ids| {
                    let o = g.gather_rows(ids[0], &[4, 0, 0, 2])?;
                    probe(g, o, &p)
                }),
            )
        }
        12 => {
            let p = rand_t(rng, 6, 3, 1.0);
            (
                vec![rand_t(rng, 3, 3, 1.0)],
                Box::new(move |g, ids| {
                    let o = g.scatter_rows(ids[0], &[4, 1, 2], 6)?;
                    probe(g, o, &p)
                }),
            )
        }
        13 => {
            let p = rand_t(rng, 3, 5, 1.0);
            let mut params = vec![rand_t(rng, 3, 4, 1.0)];
            params.extend((0..4).map(|_| rand_t(rng, 3, 5, 1.0)));
            (
                params,
                Box::new(move |g, ids| {
                    let o = g.row_mix(ids[0], &ids[1..])?;
                    probe(g, o, &p)
                }),
            )
        }
        14 => {
            let p = rand_t(rng, 2, 4, 1.0);
            (
                (0..3).map(|_| rand_t(rng, 2, 4, 1.0)).collect(),
                Box::new(move |g, ids| {
                    let o = g.mean_of(ids)?;
                    probe(g, o, &p)
                }),
            )
        }
        15 => (
            vec![rand_t(rng, 3, 4, 1.0)],
            Box::new(move |g, ids| {
                let s = g.sum(ids[0]);
                let sq = g.mul(s, s)?;
                Ok(sq)
            }),
        ),
        16 => {
            let (k, d, l) = (2, 4, 3);
            let tau = rng.gen_range(0.5..2.0);
            let noise: Tensor<f64> = sample_gumbel(k, l, rng);
            let p = rand_t(rng, k, d, 1.0);
            let mut params: Vec<Tensor<f64>> = (0..l).map(|_| rand_t(rng, k, d, 1.0)).collect();
            params.push(rand_t(rng, k, d, 1.0));
            params.push(rand_t(rng, d, l, 1.0));
            (
                params,
                Box::new(move |g, ids| {
                    let h = decision_logits(g, &ids[..l], ids[l], ids[l + 1])?;
                    let (soft, _) = gumbel_softmax_weights(
                        g,
                        h,
                        tau,
                        SelectionMode::Soft,
                        Some(noise.clone()),
                    )?;
                    let fused = g.row_mix(soft, &ids[..l])?;
                    probe(g, fused, &p)
                }),
            )
        }
        _ => end_to_end_case(rng),
    }
}

fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 40,
        max_seq_len: 16,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn pair_example(
    id: u64,
    lang: Lang,
    x: Vec<usize>,
    x_en: Vec<usize>,
    y: Vec<usize>,
) -> ParallelExample {
    ParallelExample {
        id,
        lang,
        task: TaskKind::Copy,
        x,
        x_en: Some(x_en),
        y,
    }
}

/// Every model parameter and `W_DM` through the full fused loss, soft
/// Gumbel path with fixed noise.
fn end_to_end_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Builder) {
    let cfg = ModelConfig {
        seed: rng.gen(),
        ..gradcheck_model()
    };
    let params = Parameters::<f64>::init(&cfg).unwrap();
    let mut tensors: Vec<Tensor<f64>> =
        params.named().into_iter().map(|(_, t)| t.clone()).collect();
    assert_eq!(
        Parameters::from_ordered(&cfg, tensors.clone()).unwrap(),
        params
    );
    let n = tensors.len();
    tensors.push(DecisionMaker::<f64>::init(8, 2, 0.5, rng).weight);
    let site = Site::ALL[rng.gen_range(0..3)];
    let transform = rng.gen_bool(0.5).then(|| rand_t(rng, 8, 8, 0.5));
    let tau = rng.gen_range(0.5..2.0);
    let noise_seed: u64 = rng.gen();
    let batch = vec![
        pair_example(
            1,
            Lang::LangB,
            vec![30, 31, 32],
            vec![20, 21, 22],
            vec![32, 31],
        ),
        pair_example(2, Lang::LangB, vec![33, 34], vec![23, 24], vec![33, 34, 35]),
        pair_example(3, Lang::LangA, vec![25, 26], vec![25, 26], vec![26]),
    ];
    (
        tensors,
        Box::new(move |g, ids| {
            let nodes = Parameters::<f64>::nodes_from_ordered(&cfg, &ids[..n])?;
            let conn = ConnectionNodes {
                main: &nodes,
                english: &nodes,
                dm_weight: ids[n],
            };
            let settings = SelectionSettings {
                tau,
                mode: SelectionMode::Soft,
                noise: true,
            };
            let refs: Vec<&ParallelExample> = batch.iter().collect();
            let source = match &transform {
                Some(w) => EnglishSource::Transform(w),
                None => EnglishSource::Parallel,
            };
            let out = cc_loss(
                g,
                conn,
                &cfg,
                site,
                settings,
                &DecisionMakerSelector,
                &refs,
                source,
                &mut ChaCha8Rng::seed_from_u64(noise_seed),
            )?;
            Ok(out.loss)
        }),
    )
}

fn criterion_1() -> Check {
    let mut worst = (0.0f64, "");
    let (mut coords, mut limited, mut raw) = (0, 0, 0.0f64);
    for trial in 0..100u64 {
        let op = trial as usize % OP_NAMES.len();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let (params, build) = op_case(op, &mut rng);
        let report =
            finite_difference_check(|g, ids| build(g, ids), &params, 1e-5, 1e-4).map_err(err)?;
        coords += report.coordinates_checked;
        limited += report.resolution_limited;
        raw = raw.max(report.max_raw_rel_error);
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, OP_NAMES[op]);
        }
        ensure(report.passed(), || {
            format!(
                "trial {trial} ({}) max relative error {:.2e}: {report:?}",
                OP_NAMES[op], report.max_rel_error
            )
        })?;
    }
    Ok(format!(
        "100 trials over {} ops, {coords} coordinates, worst relative error {:.1e} ({}); {limited} near-zero \
         coordinates over tolerance but within the difference quotient's rounding resolution (raw worst {raw:.1e})",
        OP_NAMES.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------- 2, 3

fn criterion_2() -> Check {
    let mut worst_planted = 0.0f64;
    for seed in 0..5 {
        let (a, m, b) = planted(600, 16, 1e-3, seed);
        let fit = fit_transform_matrix(&bank(&a, &b), 0.0).map_err(err)?;
        worst_planted = worst_planted.max(relative_frobenius(&to_dmatrix(&fit.w), &m));
    }
    ensure(worst_planted < 1e-2, || {
        format!("planted relative error {worst_planted:.2e}")
    })?;

    let mut worst_gd = 0.0f64;
    for seed in 0..3 {
        let (a, _, b) = planted(200, 6, 1e-3, 100 + seed);
        let fit = fit_transform_matrix(&bank(&a, &b), 0.0).map_err(err)?;
        let gd = gradient_descent_solution(&a, &b);
        worst_gd = worst_gd.max(relative_frobenius(&to_dmatrix(&fit.w), &gd));
    }
    ensure(worst_gd < 1e-6, || {
        format!("gradient-descent distance {worst_gd:.2e}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_pinv = 0.0f64;
    for r in [3, 6] {
        let a = low_rank(400, 8, r, &mut rng);
        let b = &a * gaussian(8, 8, 1.0, &mut rng) + gaussian(400, 8, 1e-3, &mut rng);
        let fit = fit_transform_matrix(&bank(&a, &b), 0.0).map_err(err)?;
        ensure(fit.lambda > 0.0, || {
            format!("rank {r} bank did not engage ridge")
        })?;
        worst_pinv = worst_pinv.max((to_dmatrix(&fit.w) - pinv_solution(&a, &b)).amax());
    }
    ensure(worst_pinv < 1e-5, || {
        format!("pseudoinverse distance {worst_pinv:.2e}")
    })?;
    Ok(format!(
        "planted rel. error {worst_planted:.1e}, GD distance {worst_gd:.1e}, rank-deficient vs pinv {worst_pinv:.1e}"
    ))
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = gaussian(500, 16, 1.0, &mut rng);
    let fit = fit_transform_matrix(&bank(&a, &a), 0.0).map_err(err)?;
    let synth = (to_dmatrix(&fit.w) - nalgebra::DMatrix::identity(16, 16)).amax();
    ensure(synth < 1e-6 && fit.residual_mse < 1e-10, || {
        format!(
            "synthetic bank: max |W-I| {synth:.2e}, MSE {:.2e}",
            fit.residual_mse
        )
    })?;

    // real activations of the default toy model on self-parallel records
    let c = generate_parallel_corpus(&CorpusConfig {
        n_examples: 1500,
        ..CorpusConfig::default()
    })
    .map_err(err)?;
    let own: Vec<ParallelExample> = c
        .train
        .iter()
        .filter(|e| e.lang == Lang::LangA)
        .cloned()
        .collect();
    let config = ModelConfig::default();
    let params = Parameters::<f32>::init(&config).map_err(err)?;
    let bk = collect_activation_bank(&params, &config, &own, 1000, 0, Site::Ffn).map_err(err)?;
    let fit = fit_transform_matrix(&bk, 0.0).map_err(err)?;
    let eye = Tensor::<f64>::identity(config.d_model);
    let real = fit.w.max_abs_diff(&eye);
    ensure(real < 1e-6 && fit.residual_mse < 1e-10, || {
        format!(
            "real bank: max |W-I| {real:.2e}, MSE {:.2e}, lambda {:e}, condition {:e}",
            fit.residual_mse, fit.lambda, fit.condition
        )
    })?;
    Ok(format!(
        "max |W-I| {synth:.1e} (synthetic), {real:.1e} (real d=64 bank, 1000 pairs); MSE {:.1e}",
        fit.residual_mse
    ))
}

// ---------------------------------------------------------------- 5, 6

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn criterion_5() -> Check {
    let reg = SelectorRegistry::<f64>::with_builtins();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut checked = 0;
    for name in reg.names() {
        let sel = reg.create(name).map_err(err)?;
        for tau in [0.01, 0.1, 0.5, 1.0, 2.0, 10.0] {
            for mode in [SelectionMode::Soft, SelectionMode::StraightThroughHard] {
                for noise in [false, true] {
                    let mut g = Graph::new();
                    let layers: Vec<NodeId> = (0..4)
                        .map(|_| g.constant(rand_t(&mut rng, 5, 6, 2.0)))
                        .collect();
                    let emb = g.constant(rand_t(&mut rng, 5, 6, 2.0));
                    let w = g.constant(rand_t(&mut rng, 6, 4, 2.0));
                    let input = SelectionInput {
                        layers: &layers,
                        embedding: emb,
                        dm_weight: w,
                        tau,
                        mode,
                        noise,
                    };
                    let s = sel.select(&mut g, &input, &mut rng).map_err(err)?;
                    for node in [s.soft, s.mix] {
                        let v = g.value(node);
                        for r in 0..v.rows() {
                            let sum: f64 = v.row(r).iter().sum();
                            ensure(
                                (sum - 1.0).abs() <= 1e-6 && v.row(r).iter().all(|&x| x >= 0.0),
                                || {
                                    format!(
                                        "{name} tau {tau} row {r} off the simplex: {:?}",
                                        v.row(r)
                                    )
                                },
                            )?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }

    let mut min_peak = 1.0f64;
    for trial in 0..200 {
        let l = 2 + trial % 6;
        // distinct logits at least 0.1 apart
        let mut levels: Vec<f64> = (0..l).map(|i| i as f64 * 0.1).collect();
        levels.rotate_left(trial % l);
        let base: f64 = rng.gen_range(-5.0..5.0);
        let h = Tensor::matrix(1, l, levels.iter().map(|x| x + base).collect()).unwrap();
        let mut g = Graph::new();
        let hn = g.constant(h.clone());
        let (soft, _) =
            gumbel_softmax_weights(&mut g, hn, 0.01, SelectionMode::Soft, None).map_err(err)?;
        min_peak = min_peak.min(g.value(soft).data().iter().copied().fold(0.0, f64::max));

        let noise: Tensor<f64> = sample_gumbel(1, l, &mut rng);
        let mut g = Graph::new();
        let hn = g.constant(h.clone());
        let (_, mix) = gumbel_softmax_weights(
            &mut g,
            hn,
            1.0,
            SelectionMode::StraightThroughHard,
            Some(noise.clone()),
        )
        .map_err(err)?;
        let perturbed: Vec<f64> = h
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect();
        let want = argmax(&perturbed);
        let onehot: Vec<f64> = (0..l).map(|j| if j == want { 1.0 } else { 0.0 }).collect();
        ensure(g.value(mix).data() == onehot.as_slice(), || {
            format!(
                "straight-through forward {:?} is not one-hot at {want}",
                g.value(mix).data()
            )
        })?;

        let shift: f64 = rng.gen_range(-50.0..50.0);
        let moved = Tensor::matrix(1, l, h.data().iter().map(|x| x + shift).collect()).unwrap();
        let mut g = Graph::new();
        let a = g.constant(h);
        let b = g.constant(moved);
        let (sa, _) =
            gumbel_softmax_weights(&mut g, a, 1.0, SelectionMode::Soft, None).map_err(err)?;
        let (sb, _) =
            gumbel_softmax_weights(&mut g, b, 1.0, SelectionMode::Soft, None).map_err(err)?;
        ensure(
            argmax(g.value(sa).data()) == argmax(g.value(sb).data()),
            || "argmax moved under a shift".into(),
        )?;
    }
    ensure(min_peak > 0.999, || {
        format!("noise-off tau=0.01 peak weight {min_peak}")
    })?;
    Ok(format!(
        "{checked} weight rows on the simplex across 3 selectors x 6 temperatures; tau=0.01 peak >= {min_peak:.6}; \
         straight-through and shift checks over 200 draws"
    ))
}

fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        seed,
        ..ModelConfig::default()
    }
}

fn criterion_6(dir: &Path) -> Check {
    let cfg = ModelConfig {
        init_std: 0.3,
        ..small_model(4)
    };
    let params = Parameters::<f32>::init(&cfg).map_err(err)?;
    let zero = DecisionMaker::<f32> {
        weight: Tensor::zeros(&[cfg.d_model, cfg.n_layers]),
        tau: 1.0,
        mode: SelectionMode::Soft,
        noise: false,
    };
    let reg = SelectorRegistry::<f32>::with_builtins();
    let dm = reg.create("decision_maker").map_err(err)?;
    let mean = reg.create("mean_pooling").map_err(err)?;
    let corpus = generate_parallel_corpus(&CorpusConfig {
        n_examples: 300,
        n_test: 60,
        seed: 6,
        ..CorpusConfig::default()
    })
    .map_err(err)?;
    let fused: Vec<&ParallelExample> = corpus
        .train
        .iter()
        .filter(|e| e.lang == Lang::LangB)
        .take(10)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for site in Site::ALL {
        for ex in &fused {
            let (a, ra) =
                cc_forward(&params, &zero, &cfg, ex, dm.as_ref(), site, &mut rng).map_err(err)?;
            let (b, rb) =
                cc_forward(&params, &zero, &cfg, ex, mean.as_ref(), site, &mut rng).map_err(err)?;
            ensure(a == b && ra.weights == rb.weights, || {
                format!("record {} differs at site {site}", ex.id)
            })?;
        }
    }

    let data = dir.join("data");
    write_corpus(&data, &corpus).map_err(err)?;
    let mut base = ExperimentConfig::default();
    base.model = small_model(0);
    base.train.max_steps = 40;
    base.train.batch_size = 16;
    base.transform.bank_size = 200;
    let spec = AblationSpec::new(AblationAxis::Selector, vec![0]);
    let table = run_ablation(&spec, &base, &data, &dir.join("ablation")).map_err(err)?;
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    ensure(
        names == ["decision_maker", "mean_pooling", "random_pooling"],
        || format!("rows {names:?}"),
    )?;
    ensure(table.rows.iter().all(|r| r.final_loss.is_finite()), || {
        "non-finite loss in ablation".into()
    })?;
    Ok(format!(
        "zero W_DM == mean pooling bitwise on {} records x 3 sites; selector ablation table with {} rows",
        fused.len(),
        table.rows.len()
    ))
}

// ---------------------------------------------------------------- 7 and dependents

struct SeedRuns {
    seed: u64,
    sft: PipelineResult,
    cc: PipelineResult,
    cc_dir: PathBuf,
    sft_dir: PathBuf,
}

fn lang_b(r: &PipelineResult, mode: EvalMode) -> f64 {
    r.reports[&mode].accuracy_of(Lang::LangB)
}

fn lookup_b(r: &PipelineResult, mode: EvalMode) -> f64 {
    r.reports[&mode]
        .task_accuracy(Lang::LangB, TaskKind::Lookup)
        .unwrap_or(0.0)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn training_runs(dir: &Path) -> Result<(PathBuf, Vec<SeedRuns>), String> {
    let corpus = generate_parallel_corpus(&CorpusConfig::default()).map_err(err)?;
    let data = dir.join("data");
    write_corpus(&data, &corpus).map_err(err)?;
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let base = ExperimentConfig::default().with_run_seed(seed);
        let mut sft_cfg = base.clone();
        sft_cfg.train.mode = TrainMode::Sft;
        let mut cc_cfg = base;
        cc_cfg.train.mode = TrainMode::Cc;
        let sft_dir = dir.join(format!("seed{seed}")).join("sft");
        let cc_dir = dir.join(format!("seed{seed}")).join("cc");
        let sft = run_pipeline(&sft_cfg, &data, &sft_dir, None).map_err(err)?;
        let cc = run_pipeline(
            &cc_cfg,
            &data,
            &cc_dir,
            Some(&sft_dir.join("train/timing.json")),
        )
        .map_err(err)?;
        emit(&format!(
            "    seed {seed}: SFT lang_b {:.3} (lookup {:.3}) | CC transform {:.3}, parallel {:.3} (lookup {:.3}), none {:.3}",
            lang_b(&sft, EvalMode::None),
            lookup_b(&sft, EvalMode::None),
            lang_b(&cc, EvalMode::TransformMatrix),
            lang_b(&cc, EvalMode::ParallelInput),
            lookup_b(&cc, EvalMode::ParallelInput),
            lang_b(&cc, EvalMode::None),
        ));
        runs.push(SeedRuns {
            seed,
            sft,
            cc,
            cc_dir,
            sft_dir,
        });
    }
    Ok((data, runs))
}

/// Loss curves stay in the run directories; histograms, the per-seed
/// score table and the fit reports are collected next to them.
fn write_diagnostics(dir: &Path, runs: &[SeedRuns]) -> Result<(), String> {
    let mut summary = String::from(
        "seed,sft_lang_b,sft_lookup_b,cc_none_lang_b,cc_parallel_lang_b,cc_parallel_lookup_b,cc_transform_lang_b,abs_delta_avg,fit_residual_mse,fit_lambda,timing_ratio\n",
    );
    for r in runs {
        let fit = r.cc.fit.as_ref();
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            lang_b(&r.sft, EvalMode::None),
            lookup_b(&r.sft, EvalMode::None),
            lang_b(&r.cc, EvalMode::None),
            lang_b(&r.cc, EvalMode::ParallelInput),
            lookup_b(&r.cc, EvalMode::ParallelInput),
            lang_b(&r.cc, EvalMode::TransformMatrix),
            r.cc.abs_delta_average.unwrap_or(f64::NAN),
            fit.map_or(f64::NAN, |f| f.residual_mse),
            fit.map_or(f64::NAN, |f| f.lambda),
            r.cc.timing.ratio_vs_reference.unwrap_or(f64::NAN),
        ));
        for (file, tag) in [
            ("train/selections.jsonl", "train"),
            ("eval_selections.jsonl", "eval"),
        ] {
            let p = r.cc_dir.join(file);
            if p.exists() {
                let h =
                    layer_selection_histogram(&read_selections(&p).map_err(err)?).map_err(err)?;
                fs::write(
                    dir.join(format!("seed{}_histogram_{tag}.csv", r.seed)),
                    h.to_csv(),
                )
                .map_err(err)?;
                fs::write(
                    dir.join(format!("seed{}_histogram_{tag}.txt", r.seed)),
                    h.to_table(),
                )
                .map_err(err)?;
            }
        }
        for (mode, d) in [("sft", &r.sft_dir), ("cc", &r.cc_dir)] {
            fs::copy(
                d.join("train/loss.csv"),
                dir.join(format!("seed{}_{mode}_loss.csv", r.seed)),
            )
            .map_err(err)?;
        }
    }
    fs::write(dir.join("summary.csv"), summary).map_err(err)
}

fn criterion_7(dir: &Path, runs: &[SeedRuns]) -> Check {
    write_diagnostics(dir, runs)?;
    let sft_b = mean(runs.iter().map(|r| lang_b(&r.sft, EvalMode::None)));
    let tr_b = mean(
        runs.iter()
            .map(|r| lang_b(&r.cc, EvalMode::TransformMatrix)),
    );
    let sft_lookup = mean(runs.iter().map(|r| lookup_b(&r.sft, EvalMode::None)));
    let par_lookup = mean(
        runs.iter()
            .map(|r| lookup_b(&r.cc, EvalMode::ParallelInput)),
    );
    let detail = format!(
        "mean lang_b: CC transform {tr_b:.3} vs SFT {sft_b:.3}; lang_b lookup: CC parallel {par_lookup:.3} vs SFT \
         {sft_lookup:.3} (margin {:+.1} points, need +2.0); artifacts in {}",
        (par_lookup - sft_lookup) * 100.0,
        dir.display()
    );
    if tr_b >= sft_b && par_lookup - sft_lookup >= 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4(dir: &Path, data: &Path, runs: &[SeedRuns]) -> Check {
    let r = runs.first().ok_or("no trained model")?;
    let m = InferenceModel::load(&r.cc_dir.join("train/checkpoint")).map_err(err)?;
    let manifest = cctune::corpus::read_manifest(data).map_err(err)?;
    let train = cctune::eval::read_split(data, "train.jsonl", true).map_err(err)?;
    let pairs = bilingual_pairs(&train, &manifest.languages).map_err(err)?;
    let sizes = [10, 50, 100, 500, 1000];
    let curve = mse_vs_samples_curve(
        &m.params,
        &m.model,
        &pairs,
        &sizes,
        0.0,
        0,
        m.connection.site,
    )
    .map_err(err)?;
    fs::write(dir.join("mse_curve.csv"), curve_csv(&curve)).map_err(err)?;
    let at = |s: usize| {
        curve
            .iter()
            .find(|p| p.size == s)
            .map(|p| p.held_out_mse)
            .unwrap()
    };
    let ratio = at(1000) / at(100);
    let monotone = curve
        .windows(2)
        .all(|w| w[1].held_out_mse <= 1.1 * w[0].held_out_mse);
    let shape: Vec<String> = curve
        .iter()
        .map(|p| format!("{}:{:.4}", p.size, p.held_out_mse))
        .collect();
    let detail = format!(
        "held-out MSE {}; MSE(1000)/MSE(100) = {ratio:.3} (need <= 0.5); nonincreasing within 10%: {monotone}",
        shape.join(" ")
    );
    if ratio <= 0.5 && monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(runs: &[SeedRuns]) -> Check {
    let deltas: Vec<f64> = runs
        .iter()
        .map(|r| r.cc.abs_delta_average.unwrap_or(f64::NAN))
        .collect();
    let avg = mean(deltas.iter().copied());
    let detail = format!(
        "average |parallel - transform| = {:.2} points over {} seeds (per seed {:?})",
        avg * 100.0,
        deltas.len(),
        deltas
            .iter()
            .map(|d| format!("{:.2}", d * 100.0))
            .collect::<Vec<_>>()
    );
    if avg <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10(runs: &[SeedRuns]) -> Check {
    let mut ratios = Vec::new();
    for r in runs {
        let t = &r.cc.timing;
        let ratio = t.ratio_vs_reference.ok_or("timing.json lacks the ratio")?;
        ensure(t.full_scale_ratio_range == [1.12, 1.16], || {
            "full-scale range missing".into()
        })?;
        ratios.push(ratio);
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    let detail = format!(
        "cc/sft wall-time ratio per seed {:?}, max {worst:.2} (limit 3.0; 7-8B models measured 1.12 to 1.16)",
        ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
    );
    if worst <= 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 9, 11, 12

fn criterion_9(data: &Path) -> Check {
    let examples = cctune::eval::read_split(data, "train.jsonl", true).map_err(err)?;
    let mut curves = Vec::new();
    for mode in [TrainMode::Sft, TrainMode::Cc] {
        let train = TrainConfig {
            mode,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(
            ModelConfig::default(),
            ConnectionConfig::default(),
            train,
            examples.clone(),
        )
        .map_err(err)?;
        let losses: Vec<f64> = (0..50)
            .map(|_| t.step().map(|s| s.loss))
            .collect::<cctune::Result<_>>()
            .map_err(err)?;
        curves.push(losses);
    }
    let gap = mean(curves[0].iter().zip(&curves[1]).map(|(a, b)| (a - b).abs()));
    let bound = 0.25 * curves[0][0];
    let detail = format!(
        "mean |loss_cc - loss_sft| over 50 steps = {gap:.2e}, bound {bound:.4} (25% of {:.4})",
        curves[0][0]
    );
    if gap <= bound {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_11(dir: &Path) -> Check {
    let mut checked = 0;
    for l in [2, 4, 6] {
        for (d, heads) in [(16, 2), (64, 4), (96, 4)] {
            for v in [64, 256] {
                let cfg = ModelConfig {
                    n_layers: l,
                    d_model: d,
                    n_heads: heads,
                    d_ffn: 4 * d,
                    vocab_size: v,
                    ..ModelConfig::default()
                };
                let total = Parameters::<f32>::init(&cfg).map_err(err)?.count();
                let expected = (d * l) as f64 / total as f64;
                ensure(cfg.param_count() == total, || {
                    format!("count mismatch for {cfg:?}")
                })?;
                ensure(cfg.decision_maker_fraction() == expected, || {
                    format!(
                        "fraction {} != {expected} for L={l} d={d}",
                        cfg.decision_maker_fraction()
                    )
                })?;
                checked += 1;
            }
        }
    }
    // the value a checkpoint reports
    let corpus = generate_parallel_corpus(&CorpusConfig {
        n_examples: 64,
        ..CorpusConfig::default()
    })
    .map_err(err)?;
    let train = TrainConfig {
        mode: TrainMode::Cc,
        max_steps: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(
        small_model(1),
        ConnectionConfig::default(),
        train,
        corpus.train,
    )
    .map_err(err)?;
    t.run().map_err(err)?;
    t.save(&dir.join("ckpt")).map_err(err)?;
    let (meta, _) = load_checkpoint(&dir.join("ckpt")).map_err(err)?;
    let want = (32 * 2) as f64 / meta.param_count as f64;
    ensure(
        meta.decision_maker_fraction == want && meta.decision_maker_params == 64,
        || {
            format!(
                "checkpoint reports {} / {}",
                meta.decision_maker_fraction, meta.decision_maker_params
            )
        },
    )?;

    // published full-scale totals
    let llama = (4096.0 * 32.0) / 8_030_261_248.0 * 100.0;
    let qwen = (3584.0 * 28.0) / 7_615_616_512.0 * 100.0;
    let (a, b) = (format!("{llama:.4}%"), format!("{qwen:.4}%"));
    ensure(a == "0.0016%" && b == "0.0013%", || {
        format!("full-scale fractions {a} and {b}")
    })?;
    Ok(format!(
        "d*L/total exact on {checked} configs and in checkpoint metadata; full scale {llama:.5}% and {qwen:.5}%"
    ))
}

fn criterion_12(dir: &Path) -> Check {
    let ccfg = CorpusConfig {
        n_examples: 300,
        seed: 12,
        ..CorpusConfig::default()
    };
    let (c1, c2) = (
        generate_parallel_corpus(&ccfg).map_err(err)?,
        generate_parallel_corpus(&ccfg).map_err(err)?,
    );
    ensure(
        c1.train == c2.train && c1.test == c2.test && c1.languages == c2.languages,
        || "corpus differs".into(),
    )?;

    let model = small_model(3);
    let params = Parameters::<f32>::init(&model).map_err(err)?;
    let pairs = bilingual_pairs(&c1.train, &c1.languages).map_err(err)?;
    let b1 = collect_activation_bank(&params, &model, &pairs, 150, 4, Site::Ffn).map_err(err)?;
    let b2 = collect_activation_bank(&params, &model, &pairs, 150, 4, Site::Ffn).map_err(err)?;
    ensure(b1 == b2, || "activation banks differ".into())?;

    let train = TrainConfig {
        mode: TrainMode::Cc,
        max_steps: 20,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let fresh = || {
        Trainer::new(
            model.clone(),
            ConnectionConfig::default(),
            train.clone(),
            c1.train.clone(),
        )
    };
    let mut a = fresh().map_err(err)?;
    a.run().map_err(err)?;
    let mut b = fresh().map_err(err)?;
    b.run().map_err(err)?;
    ensure(a.losses == b.losses, || {
        "loss curves differ between identical runs".into()
    })?;

    let mut first = fresh().map_err(err)?;
    for _ in 0..10 {
        first.step().map_err(err)?;
    }
    let ckpt = dir.join("resume");
    first.save(&ckpt).map_err(err)?;
    let mut resumed = Trainer::resume(&ckpt, c1.train.clone()).map_err(err)?;
    resumed.run().map_err(err)?;
    let tail: Vec<u64> = a.losses[10..].iter().map(|l| l.1.to_bits()).collect();
    let got: Vec<u64> = resumed.losses.iter().map(|l| l.1.to_bits()).collect();
    ensure(tail.len() == 10 && tail == got, || {
        format!("resumed losses {got:?} vs {tail:?}")
    })?;
    Ok("corpora, banks and loss curves reproduce; resume reproduces 10 losses bitwise".into())
}

#[test]
fn acceptance_criteria() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    let sub = |name: &str| {
        let p = root.join(name);
        fs::create_dir_all(&p).unwrap();
        p
    };
    emit(&format!("acceptance artifacts: {}", root.display()));
    let mut outcomes = vec![
        run(1, "gradient soundness", false, criterion_1),
        run(2, "closed-form solver", false, criterion_2),
        run(3, "identity transform", false, criterion_3),
        run(5, "gumbel-softmax properties", false, criterion_5),
        run(6, "selector equivalences", false, || {
            criterion_6(&sub("c6"))
        }),
        run(11, "decision maker fraction", false, || {
            criterion_11(&sub("c11"))
        }),
        run(12, "checkpoint and determinism", false, || {
            criterion_12(&sub("c12"))
        }),
    ];

    let c7 = sub("c7");
    emit("    training 3 seeds x (SFT, CC) at d=64/L=4 for criterion 7 ...");
    match catch_unwind(AssertUnwindSafe(|| training_runs(&c7))) {
        Ok(Ok((data, runs))) => {
            outcomes.push(run(9, "loss-curve proximity", false, || criterion_9(&data)));
            outcomes.push(run(7, "directional training result", true, || {
                criterion_7(&c7, &runs)
            }));
            outcomes.push(run(4, "MSE sample-efficiency curve", false, || {
                criterion_4(&c7, &data, &runs)
            }));
            outcomes.push(run(8, "parallel vs transform delta", false, || {
                criterion_8(&runs)
            }));
            outcomes.push(run(10, "overhead report", false, || criterion_10(&runs)));
        }
        failure => {
            let why = match failure {
                Ok(Err(e)) => e,
                _ => "training panicked".into(),
            };
            for (id, name, soft) in [
                (4, "MSE sample-efficiency curve", false),
                (7, "directional training result", true),
                (8, "parallel vs transform delta", false),
                (9, "loss-curve proximity", false),
                (10, "overhead report", false),
            ] {
                outcomes.push(run(id, name, soft, || {
                    Err(format!("training runs failed: {why}"))
                }));
            }
        }
    }

    outcomes.sort_by_key(|o| o.id);
    emit("---- acceptance summary ----");
    for o in &outcomes {
        emit(&o.line());
    }
    let hard: Vec<u8> = outcomes
        .iter()
        .filter(|o| o.status == Status::Fail)
        .map(|o| o.id)
        .collect();
    assert!(hard.is_empty(), "hard acceptance criteria failed: {hard:?}");
}
