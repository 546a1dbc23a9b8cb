//! Finite-difference checks of every analytic gradient on random
//! instances.

use crate::degrade::NoiseModel;
use crate::error::Result;
use crate::grid::{DenseMatrix, ImageGrid, SubgridId};
use crate::loss::{
    grad_full, grad_mean_diag, grad_variance_diag, selfsup_nll_diag, selfsup_nll_full, EstimatorState, NoiseCovEstimate,
};
use crate::optim::{fd_check, DEFAULT_H_SCHEDULE};
use crate::posterior::PosteriorSummary;
use crate::risk::{risk_closed_form, risk_closed_form_grad, RHatMode, RiskProblem};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientOp {
    MeanDiag,
    VarianceDiag,
    Full,
    ClosedFormRisk,
}

impl GradientOp {
    pub const ALL: [GradientOp; 4] = [GradientOp::MeanDiag, GradientOp::VarianceDiag, GradientOp::Full, GradientOp::ClosedFormRisk];

    pub fn name(self) -> &'static str {
        match self {
            GradientOp::MeanDiag => "grad_mean_diag",
            GradientOp::VarianceDiag => "grad_variance_diag",
            GradientOp::Full => "grad_full",
            GradientOp::ClosedFormRisk => "risk_closed_form_grad",
        }
    }
}

const SHAPES: [(usize, usize); 3] = [(2, 2), (2, 4), (4, 4)];

fn random_grid(h: usize, w: usize, s: &mut Stream, lo: f64, hi: f64) -> ImageGrid {
    ImageGrid::from_fn(h, w, |_, _| s.uniform_range(lo, hi))
}

/// A random SPD matrix `B Bᵀ/n + 0.05 I` with standard normal `B`.
pub fn random_spd(n: usize, s: &mut Stream) -> DenseMatrix {
    let b = DenseMatrix::from_fn(n, n, |_, _| s.normal());
    let g = b.matmul(&b.transpose()).expect("square").scaled(1.0 / n as f64);
    DenseMatrix::from_fn(n, n, |i, j| g.get(i, j) + if i == j { 0.05 } else { 0.0 })
}

/// Worst finite-difference discrepancy of `op` on the random instance
/// derived from `seed`.
pub fn instance_error(op: GradientOp, seed: u64) -> Result<f64> {
    let mut s = Stream::new(seed);
    let (h, w) = SHAPES[s.index(SHAPES.len())];
    let tau = SubgridId::from_index(s.index(4));
    let z = random_grid(h / 2, w / 2, &mut s, -1.0, 1.0);
    let r_hat = NoiseCovEstimate::new(random_grid(h / 2, w / 2, &mut s, 0.05, 0.5))?;
    match op {
        GradientOp::MeanDiag => {
            let nu = random_grid(h, w, &mut s, 0.2, 2.0);
            let point = random_grid(h, w, &mut s, -1.0, 1.0).into_data();
            fd_check(
                |x: &[f64]| {
                    let est = EstimatorState::diagonal(ImageGrid::new(h, w, x.to_vec())?, nu.clone())?;
                    let f = selfsup_nll_diag(&z, &est, tau, &r_hat)?;
                    Ok((f, grad_mean_diag(&z, &est, tau, &r_hat)?.into_data()))
                },
                &point,
                &DEFAULT_H_SCHEDULE,
            )
        }
        GradientOp::VarianceDiag => {
            let mean = random_grid(h, w, &mut s, -1.0, 1.0);
            let point = random_grid(h, w, &mut s, 0.2, 2.0).into_data();
            fd_check(
                |x: &[f64]| {
                    let est = EstimatorState::diagonal(mean.clone(), ImageGrid::new(h, w, x.to_vec())?)?;
                    let f = selfsup_nll_diag(&z, &est, tau, &r_hat)?;
                    Ok((f, grad_variance_diag(&z, &est, tau, &r_hat)?.into_data()))
                },
                &point,
                &DEFAULT_H_SCHEDULE,
            )
        }
        GradientOp::Full => {
            let n = h * w;
            let mut point = random_grid(h, w, &mut s, -1.0, 1.0).into_data();
            let lower: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
            for &(i, j) in &lower {
                point.push(if i == j { s.uniform_range(0.5, 1.5) } else { 0.3 * s.normal() });
            }
            fd_check(
                |x: &[f64]| {
                    let mut l = DenseMatrix::zeros(n, n);
                    for (&(i, j), &v) in lower.iter().zip(&x[n..]) {
                        l.set(i, j, v);
                    }
                    let est = EstimatorState::full(ImageGrid::new(h, w, x[..n].to_vec())?, l)?;
                    let f = selfsup_nll_full(&z, &est, tau, &r_hat)?;
                    let (gm, gl) = grad_full(&z, &est, tau, &r_hat)?;
                    let mut g = gm.into_data();
                    g.extend(lower.iter().map(|&(i, j)| gl.get(i, j)));
                    Ok((f, g))
                },
                &point,
                &DEFAULT_H_SCHEDULE,
            )
        }
        GradientOp::ClosedFormRisk => {
            let n = h * w;
            let posterior = PosteriorSummary::new(random_grid(h, w, &mut s, -1.0, 1.0), random_spd(n, &mut s))?;
            let mode = [RHatMode::ExactDiag, RHatMode::FromMeanEstimate, RHatMode::Zero][s.index(3)];
            let noise = NoiseModel::new(s.uniform_range(0.0, 0.2), s.uniform_range(0.01, 0.2))?;
            let problem = RiskProblem::gaussian(posterior, noise, mode)?;
            // keep û inside the region where g(û) stays above its floor
            let mut point = random_grid(h, w, &mut s, 0.0, 1.0).into_data();
            point.extend(random_grid(h, w, &mut s, 0.2, 2.0).into_data());
            fd_check(
                |x: &[f64]| {
                    let est = EstimatorState::diagonal(ImageGrid::new(h, w, x[..n].to_vec())?, ImageGrid::new(h, w, x[n..].to_vec())?)?;
                    let f = risk_closed_form(&problem, &est)?;
                    let g = risk_closed_form_grad(&problem, &est)?;
                    let mut grad = g.mean.into_data();
                    grad.extend_from_slice(g.variance.data());
                    Ok((f, grad))
                },
                &point,
                &DEFAULT_H_SCHEDULE,
            )
        }
    }
}

/// Worst discrepancy of `op` over `instances` random instances; instance
/// `i` uses seed `derive_seed(seed, i)`.
pub fn suite_error(op: GradientOp, instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        worst = worst.max(instance_error(op, crate::rng::derive_seed(seed, i as u64))?);
    }
    Ok(worst)
}
