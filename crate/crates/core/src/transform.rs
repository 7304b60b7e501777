// SPDX-License-Identifier: MIT OR Apache-2.0

//! Least-squares Transform Matrix from language-B to language-A
//! activations, used to stand in for the parallel pass at inference.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::model::{forward_batch, ActivationTrace, ModelConfig, Parameters, Site};
use crate::store::{read_tensor_dir, take_tensor, write_tensor_dir};
use crate::tensor::{Scalar, Tensor};

/// Gram condition estimate above which the solve switches to ridge.
pub const MAX_CONDITION: f64 = 1e12;
/// Ridge strength of the fallback, relative to `trace(AᵀA)/d`.
pub const RIDGE_SCALE: f64 = 1e-6;
const BATCH: usize = 64;

/// Paired per-layer activations, one row per (example, layer), examples
/// outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBank {
    /// Language-B side.
    pub a: Tensor<f64>,
    /// Language-A side, same row order.
    pub b: Tensor<f64>,
    pub sample_count: usize,
    pub layer_count: usize,
    pub site: Site,
    pub ids: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    sample_count: usize,
    layer_count: usize,
    site: Site,
    ids: Vec<u64>,
}

impl ActivationBank {
    pub fn from_parts(
        a: Tensor<f64>,
        b: Tensor<f64>,
        layer_count: usize,
        site: Site,
    ) -> Result<Self> {
        if a.shape() != b.shape() || a.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "activation_bank",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        if layer_count == 0 || a.rows() % layer_count != 0 {
            return Err(Error::invalid(format!(
                "{} rows do not split into {layer_count} layers",
                a.rows()
            )));
        }
        let n = a.rows() / layer_count;
        Ok(Self {
            a,
            b,
            sample_count: n,
            layer_count,
            site,
            ids: (0..n as u64).collect(),
        })
    }

    pub fn d(&self) -> usize {
        self.a.cols()
    }

    /// The bank restricted to examples `range`.
    pub fn examples(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.sample_count {
            return Err(Error::invalid(format!(
                "example range {range:?} outside a bank of {}",
                self.sample_count
            )));
        }
        let (l, d) = (self.layer_count, self.d());
        let rows = |t: &Tensor<f64>| {
            Tensor::matrix(
                (range.end - range.start) * l,
                d,
                t.data()[range.start * l * d..range.end * l * d].to_vec(),
            )
        };
        Ok(Self {
            a: rows(&self.a)?,
            b: rows(&self.b)?,
            sample_count: range.end - range.start,
            layer_count: l,
            site: self.site,
            ids: self.ids[range].to_vec(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = BankMeta {
            sample_count: self.sample_count,
            layer_count: self.layer_count,
            site: self.site,
            ids: self.ids.clone(),
        };
        write_tensor_dir(
            dir,
            &[("A".into(), &self.a), ("B".into(), &self.b)],
            serde_json::to_value(meta)?,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (mut ts, meta) = read_tensor_dir::<f64>(dir)?;
        let meta: BankMeta = serde_json::from_value(meta)?;
        let a = take_tensor(&mut ts, "A")?;
        let b = take_tensor(&mut ts, "B")?;
        let mut bank = Self::from_parts(a, b, meta.layer_count, meta.site)?;
        if bank.sample_count != meta.sample_count || meta.ids.len() != bank.sample_count {
            return Err(Error::Checkpoint {
                name: "A".into(),
                msg: "row count disagrees with sample_count".into(),
            });
        }
        bank.ids = meta.ids;
        Ok(bank)
    }
}

/// Runs both sides of each pair (in the given order) and stacks the
/// `site` outputs of every layer at the tap position.
pub fn bank_from_pairs<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    pairs: &[&ParallelExample],
    site: Site,
) -> Result<ActivationBank> {
    if pairs.is_empty() {
        return Err(Error::invalid("no parallel pairs to collect"));
    }
    let (l, d) = (config.n_layers, config.d_model);
    let mut a = Vec::with_capacity(pairs.len() * l * d);
    let mut b = Vec::with_capacity(pairs.len() * l * d);
    for chunk in pairs.chunks(BATCH) {
        let side = |prompts: Vec<Vec<usize>>, out: &mut Vec<f64>| -> Result<()> {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let mut taps = Vec::with_capacity(prompts.len());
            let mut start = 0;
            for pr in &prompts {
                taps.push(start + pr.len() - 2);
                start += pr.len();
            }
            let seqs: Vec<&[usize]> = prompts.iter().map(Vec::as_slice).collect();
            let fwd = forward_batch(&mut g, &p, config, &seqs, None, Some(&taps))?;
            for &row in &taps {
                for &node in fwd.site_outputs(site) {
                    out.extend(
                        g.value(node)
                            .row(row)
                            .iter()
                            .map(|x| x.to_f64().unwrap_or(f64::NAN)),
                    );
                }
            }
            Ok(())
        };
        side(chunk.iter().map(|e| e.prompt().tokens).collect(), &mut a)?;
        let en = chunk
            .iter()
            .map(|e| e.prompt_en().map(|r| r.tokens))
            .collect::<Result<Vec<_>>>()?;
        for (e, t) in chunk.iter().zip(&en) {
            if t.len() != e.prompt().tokens.len() {
                return Err(Error::invalid(format!(
                    "record {}: x_en and x differ in length",
                    e.id
                )));
            }
        }
        side(en, &mut b)?;
    }
    let rows = pairs.len() * l;
    let mut bank = ActivationBank::from_parts(
        Tensor::matrix(rows, d, a)?,
        Tensor::matrix(rows, d, b)?,
        l,
        site,
    )?;
    bank.ids = pairs.iter().map(|e| e.id).collect();
    Ok(bank)
}

/// Shuffles `pairs` with `seed`, keeps the first `limit`, and collects
/// their bank.
pub fn collect_activation_bank<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    pairs: &[ParallelExample],
    limit: usize,
    seed: u64,
    site: Site,
) -> Result<ActivationBank> {
    if pairs.is_empty() {
        return Err(Error::invalid("no parallel pairs to collect"));
    }
    if limit == 0 || limit > pairs.len() {
        return Err(Error::invalid(format!(
            "limit {limit} outside 1..={}",
            pairs.len()
        )));
    }
    let mut order: Vec<&ParallelExample> = pairs.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(limit);
    bank_from_pairs(params, config, &order, site)
}

/// Fitted `W_T` with its diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformFit {
    #[serde(skip, default = "placeholder")]
    pub w: Tensor<f64>,
    pub sample_count: usize,
    /// Ridge strength actually used; 0 for the plain normal equations.
    pub lambda: f64,
    pub residual_mse: f64,
    /// Eigenvalue ratio of `AᵀA`; infinite when it is singular.
    #[serde(with = "lossy_f64")]
    pub condition: f64,
    pub site: Site,
}

fn placeholder() -> Tensor<f64> {
    Tensor::zeros(&[1, 1])
}

/// JSON has no infinity; store it as `null`.
mod lossy_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl TransformFit {
    /// Identity or zero maps, mostly for degenerate-case runs.
    pub fn fixed(w: Tensor<f64>, site: Site) -> Self {
        Self {
            w,
            sample_count: 0,
            lambda: 0.0,
            residual_mse: f64::NAN,
            condition: f64::NAN,
            site,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_tensor_dir(dir, &[("W_T".into(), &self.w)], serde_json::to_value(self)?)?;
        fs::write(
            dir.join("transform.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (mut ts, meta) = read_tensor_dir::<f64>(dir)?;
        let mut fit: TransformFit = serde_json::from_value(meta)?;
        fit.w = take_tensor(&mut ts, "W_T")?;
        if fit.w.shape().len() != 2 || fit.w.rows() != fit.w.cols() || !fit.w.is_finite() {
            return Err(Error::Checkpoint {
                name: "W_T".into(),
                msg: format!("expected a finite square matrix, got {:?}", fit.w.shape()),
            });
        }
        Ok(fit)
    }
}

/// Lower-triangular `L` with `L·Lᵀ = m`, or `None` when `m` is not
/// numerically positive definite.
pub fn cholesky(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let v = m[i * n + i] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = (m[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L·Lᵀ·X = rhs` for an `n×k` right-hand side, in place.
fn cholesky_solve(l: &[f64], n: usize, rhs: &mut [f64], k: usize) {
    for c in 0..k {
        for i in 0..n {
            let s: f64 = (0..i).map(|j| l[i * n + j] * rhs[j * k + c]).sum();
            rhs[i * k + c] = (rhs[i * k + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| l[j * n + i] * rhs[j * k + c]).sum();
            rhs[i * k + c] = (rhs[i * k + c] - s) / l[i * n + i];
        }
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

fn condition_estimate(gram: &[f64], d: usize) -> f64 {
    let eig = symmetric_eigenvalues(gram, d);
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || max <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `W_T = (AᵀA + λI)⁻¹AᵀB` via a Cholesky solve.
///
/// With `lambda = 0` the plain normal equations are tried first; a Gram
/// matrix whose condition estimate exceeds [`MAX_CONDITION`], or which
/// fails to factor, is re-solved with `λ = 1e-6·trace(AᵀA)/d`.
pub fn fit_transform_matrix(bank: &ActivationBank, lambda: f64) -> Result<TransformFit> {
    let (n, d) = (bank.a.rows(), bank.d());
    if n == 0 || d == 0 {
        return Err(Error::invalid("empty activation bank"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "ridge strength must be finite and ≥ 0, got {lambda}"
        )));
    }
    let mut gram = vec![0.0; d * d];
    f64::gemm(
        d,
        n,
        d,
        bank.a.data(),
        true,
        bank.a.data(),
        false,
        &mut gram,
        false,
    );
    let mut atb = vec![0.0; d * d];
    f64::gemm(
        d,
        n,
        d,
        bank.a.data(),
        true,
        bank.b.data(),
        false,
        &mut atb,
        false,
    );
    let condition = condition_estimate(&gram, d);
    let trace: f64 = (0..d).map(|i| gram[i * d + i]).sum();

    let regularized = |lam: f64| {
        let mut m = gram.clone();
        for i in 0..d {
            m[i * d + i] += lam;
        }
        cholesky(&m, d)
    };
    let mut lam = lambda;
    let mut factor = if lam == 0.0 && condition > MAX_CONDITION {
        None
    } else {
        regularized(lam)
    };
    if factor.is_none() && lam == 0.0 {
        if !(trace > 0.0) {
            return Err(Error::invalid(
                "activation bank has no nonzero language-B rows",
            ));
        }
        lam = RIDGE_SCALE * trace / d as f64;
        factor = regularized(lam);
    }
    let l = factor
        .ok_or_else(|| Error::invalid("Gram matrix is not positive definite even with ridge"))?;
    cholesky_solve(&l, d, &mut atb, d);
    let w = Tensor::matrix(d, d, atb)?;
    if !w.is_finite() {
        return Err(Error::invalid(
            "Transform Matrix solve produced non-finite entries",
        ));
    }
    let residual_mse = transform_mse(bank, &w)?;
    Ok(TransformFit {
        w,
        sample_count: bank.sample_count,
        lambda: lam,
        residual_mse,
        condition,
        site: bank.site,
    })
}

/// `(1/(N·L)) Σ (1/d)‖a·W − b‖²` over the bank's rows.
pub fn transform_mse(bank: &ActivationBank, w: &Tensor<f64>) -> Result<f64> {
    let mapped = bank.a.matmul(w)?;
    if mapped.shape() != bank.b.shape() {
        return Err(Error::ShapeMismatch {
            op: "transform_mse",
            left: mapped.shape().to_vec(),
            right: bank.b.shape().to_vec(),
        });
    }
    let sq: f64 = mapped
        .data()
        .iter()
        .zip(bank.b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq / mapped.len() as f64)
}

/// Replaces the fit's site vectors of `trace` with `f·W_T`; the embedding
/// feature, tap position and other sites are carried over.
pub fn apply_transform<T: Scalar>(
    trace: &ActivationTrace<T>,
    fit: &TransformFit,
) -> Result<ActivationTrace<T>> {
    let d = fit.w.rows();
    let src = trace.site(fit.site);
    if src.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch {
            op: "apply_transform",
            left: vec![src.len(), src.first().map_or(0, Vec::len)],
            right: fit.w.shape().to_vec(),
        });
    }
    let w: Tensor<T> = fit.w.cast();
    let mapped: Vec<Vec<T>> = src
        .iter()
        .map(|f| Ok(Tensor::row_vector(f.clone()).matmul(&w)?.into_data()))
        .collect::<Result<_>>()?;
    let mut out = trace.clone();
    match fit.site {
        Site::Ffn => out.ffn = mapped,
        Site::Attn => out.attn = mapped,
        Site::Block => out.block = mapped,
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub held_out_mse: f64,
    pub in_sample_mse: f64,
    pub lambda: f64,
}

/// Fraction of pairs held out from every fit of the sample-size curve.
pub const HELD_OUT_FRACTION: f64 = 0.2;

/// Fits on growing prefixes of a seeded shuffle and scores each fit on a
/// fixed held-out slice that no fit sees.
pub fn mse_vs_samples_curve<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    pairs: &[ParallelExample],
    sizes: &[usize],
    lambda: f64,
    seed: u64,
    site: Site,
) -> Result<Vec<CurvePoint>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::invalid(
            "sizes must be positive and strictly ascending",
        ));
    }
    let n_hold = ((pairs.len() as f64 * HELD_OUT_FRACTION).round() as usize).max(1);
    let pool = pairs.len().saturating_sub(n_hold);
    let largest = *sizes.last().expect("nonempty");
    if largest > pool {
        return Err(Error::invalid(format!(
            "size {largest} exceeds the {pool} pairs left after holding out {n_hold}"
        )));
    }
    let mut order: Vec<&ParallelExample> = pairs.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = bank_from_pairs(params, config, &order[pool..], site)?;
    let train = bank_from_pairs(params, config, &order[..largest], site)?;
    sizes
        .iter()
        .map(|&size| {
            let fit = fit_transform_matrix(&train.examples(0..size)?, lambda)?;
            Ok(CurvePoint {
                size,
                held_out_mse: transform_mse(&held, &fit.w)?,
                in_sample_mse: fit.residual_mse,
                lambda: fit.lambda,
            })
        })
        .collect()
}

/// `size,mse` CSV of held-out errors.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("size,mse\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.size, p.held_out_mse));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bank(a: Vec<f64>, b: Vec<f64>, rows: usize, d: usize) -> ActivationBank {
        ActivationBank::from_parts(
            Tensor::matrix(rows, d, a).unwrap(),
            Tensor::matrix(rows, d, b).unwrap(),
            1,
            Site::Ffn,
        )
        .unwrap()
    }

    #[test]
    fn identical_sides_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..40 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fit = fit_transform_matrix(&bank(a.clone(), a, 40, 5), 0.0).unwrap();
        assert!(fit.w.max_abs_diff(&Tensor::identity(5)) < 1e-8);
        assert!(fit.residual_mse < 1e-12);
        assert_eq!(fit.lambda, 0.0);
    }

    #[test]
    fn planted_diagonal_matrix_recovered() {
        let a = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let b = vec![2.0, 0.0, 0.0, 3.0, 2.0, 3.0];
        let fit = fit_transform_matrix(&bank(a, b, 3, 2), 0.0).unwrap();
        let m = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert!(fit.w.max_abs_diff(&m) < 1e-8);
    }

    #[test]
    fn singular_gram_engages_ridge() {
        let a = vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let b = vec![1.0, 0.0, 2.0, 1.0, 3.0, 1.0];
        let fit = fit_transform_matrix(&bank(a, b, 3, 2), 0.0).unwrap();
        assert!(fit.lambda > 0.0);
        assert!(fit.condition > MAX_CONDITION);
        assert!(fit.w.is_finite());
    }

    #[test]
    fn cholesky_reconstructs() {
        let m = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&m, 2).unwrap();
        let r = [
            l[0] * l[0],
            l[0] * l[2],
            l[2] * l[0],
            l[2] * l[2] + l[3] * l[3],
        ];
        for (x, y) in r.iter().zip(m) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        let mut e = symmetric_eigenvalues(&[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0], 3);
        e.sort_by(f64::total_cmp);
        for (x, y) in e.iter().zip([1.0, 3.0, 5.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (rows, d) = (12, 3);
        let a: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bk = bank(a.clone(), b.clone(), rows, d);
        let got = transform_mse(&bk, &Tensor::matrix(d, d, w.clone()).unwrap()).unwrap();
        let mut total = 0.0;
        for r in 0..rows {
            let mut sq = 0.0;
            for j in 0..d {
                let v: f64 = (0..d).map(|k| a[r * d + k] * w[k * d + j]).sum();
                sq += (v - b[r * d + j]).powi(2);
            }
            total += sq / d as f64;
        }
        assert!((got - total / rows as f64).abs() < 1e-10);
    }

    #[test]
    fn apply_identity_and_zero() {
        let t = ActivationTrace {
            tap_position: 3,
            embedding: vec![1.0, 2.0],
            layer_input: vec![vec![0.0; 2]; 2],
            attn: vec![vec![5.0, 5.0]; 2],
            ffn: vec![vec![1.0, -1.0], vec![0.5, 2.0]],
            block: vec![vec![0.0; 2]; 2],
        };
        let id = TransformFit::fixed(Tensor::identity(2), Site::Ffn);
        assert_eq!(apply_transform(&t, &id).unwrap(), t);
        let zero = TransformFit::fixed(Tensor::zeros(&[2, 2]), Site::Ffn);
        let z = apply_transform(&t, &zero).unwrap();
        assert!(z.ffn.iter().flatten().all(|&x| x == 0.0));
        assert_eq!(
            (z.embedding, z.attn, z.tap_position),
            (t.embedding.clone(), t.attn.clone(), 3)
        );
        let wide = TransformFit::fixed(Tensor::identity(3), Site::Ffn);
        assert!(apply_transform(&t, &wide).is_err());
    }

    #[test]
    fn fit_persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let a = vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let fit = fit_transform_matrix(&bank(a.clone(), a, 3, 2), 0.0).unwrap();
        fit.save(dir.path()).unwrap();
        assert!(dir.path().join("transform.json").exists());
        assert_eq!(TransformFit::load(dir.path()).unwrap(), fit);
    }

    #[test]
    fn empty_or_bad_inputs_rejected() {
        assert!(ActivationBank::from_parts(
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[2, 2]),
            1,
            Site::Ffn
        )
        .is_err());
        assert!(fit_transform_matrix(&bank(vec![0.0; 4], vec![1.0; 4], 2, 2), 0.0).is_err());
        assert!(fit_transform_matrix(&bank(vec![1.0; 4], vec![1.0; 4], 2, 2), -1.0).is_err());
    }
}
