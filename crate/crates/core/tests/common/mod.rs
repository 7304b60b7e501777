// SPDX-License-Identifier: MIT OR Apache-2.0

//! Least-squares oracles and bank builders shared by the integration
//! tests. Everything here goes through nalgebra, never through the
//! crate's own solver.

#![allow(dead_code)]

use cctune::model::Site;
use cctune::transform::ActivationBank;
use cctune::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    let data: Vec<f64> = (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)]))
        .collect();
    Tensor::matrix(m.nrows(), m.ncols(), data).unwrap()
}

pub fn to_dmatrix(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn bank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> ActivationBank {
    ActivationBank::from_parts(to_tensor(a), to_tensor(b), 1, Site::Ffn).unwrap()
}

/// `B = A·M + σ·noise` with Gaussian `A` and `M`.
pub fn planted(
    n: usize,
    d: usize,
    sigma: f64,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = gaussian(n, d, 1.0, &mut rng);
    let m = gaussian(d, d, 1.0, &mut rng);
    let noise = gaussian(n, d, sigma, &mut rng);
    let b = &a * &m + noise;
    (a, m, b)
}

/// Rank-`r` design matrix `U·V` of shape `n×d`.
pub fn low_rank(n: usize, d: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(n, r, 1.0, rng) * gaussian(r, d, 1.0, rng)
}

pub fn pinv_solution(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().pseudo_inverse(1e-10).unwrap() * b
}

/// Plain gradient descent on `½‖AW − B‖²` with step `1/λ_max(AᵀA)`,
/// run until the gradient vanishes.
pub fn gradient_descent_solution(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a.transpose() * a;
    let atb = a.transpose() * b;
    let lmax = gram.clone().symmetric_eigen().eigenvalues.max();
    let step = 1.0 / lmax;
    let mut w = DMatrix::zeros(a.ncols(), b.ncols());
    for _ in 0..200_000 {
        let grad = &gram * &w - &atb;
        if grad.amax() < 1e-13 * lmax {
            break;
        }
        w -= step * grad;
    }
    w
}

pub fn relative_frobenius(x: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (x - reference).norm() / reference.norm()
}
