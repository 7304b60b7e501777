// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference verification of the tape's gradients.

use crate::autograd::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`
    /// over coordinates whose disagreement exceeds the rounding
    /// resolution of the difference quotient.
    pub max_rel_error: f64,
    /// Largest relative error over every coordinate.
    pub max_raw_rel_error: f64,
    /// Coordinates over `tol` whose `|analytic − numeric|` is still below
    /// `4ε·(|f(p+h)| + |f(p−h)|) / 2h`, the size of the rounding error in
    /// the difference quotient itself. Near-zero gradients land here.
    pub resolution_limited: usize,
    /// `(parameter index, flat offset)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(p+h) − f(p−h)) / 2h` for every coordinate of `params`.
///
/// `build` receives a fresh graph with `params` bound as trainable leaves
/// (in order) and returns the scalar loss node. It must be deterministic.
pub fn finite_difference_check<F>(
    mut build: F,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if want_grad {
            g.backward(loss)?;
            for (id, p) in ids.iter().zip(values) {
                grads.push(
                    g.grad(*id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.shape())),
                );
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_raw_rel_error: 0.0,
        resolution_limited: 0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: 0,
        tol,
    };
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = orig - h;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[j];
            let err = relative_error(a, numeric);
            report.coordinates_checked += 1;
            report.max_raw_rel_error = report.max_raw_rel_error.max(err);
            let resolution = 4.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h);
            if err > tol && (a - numeric).abs() <= resolution {
                report.resolution_limited += 1;
                continue;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
