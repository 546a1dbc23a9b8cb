//! First-order minimization, finite-difference gradient checks and the
//! amortized affine estimator.

mod affine;

pub use affine::{read_affine, train_affine, write_affine, AffineEstimator, LossKind, TrainConfig, TrainReport, TrainingSample};

use crate::error::{Error, Result};

/// Value and gradient of a differentiable objective.
pub type Evaluation = (f64, Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Stop once the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    pub initial_step: f64,
    pub shrink: f64,
    /// Armijo constant.
    pub sufficient_decrease: f64,
    pub log_variance_floor: f64,
    /// Run a finite-difference spot check of the gradient at `init`.
    pub check_gradient: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-8,
            initial_step: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            log_variance_floor: 1e-12f64.ln(),
            check_gradient: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.grad_tol > 0.0) || !(self.initial_step > 0.0) || !(self.sufficient_decrease > 0.0) {
            return bad("tolerances and steps must be positive");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink must lie in (0, 1)");
        }
        if self.sufficient_decrease >= 1.0 {
            return bad("sufficient_decrease must be below 1");
        }
        if !self.log_variance_floor.is_finite() {
            return bad("log_variance_floor must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub argmin: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Spot-check tolerance applied to the gradient at the starting point.
pub const INIT_CHECK_TOL: f64 = 1e-4;
/// Coordinates spot-checked at the starting point.
const INIT_CHECK_COORDS: usize = 24;
const MIN_STEP: f64 = 1e-16;

/// Gradient descent with Armijo backtracking.
///
/// The first line search starts at `initial_step`; later ones start at the
/// Barzilai-Borwein length `sᵀs / sᵀy` of the last accepted move (or twice
/// the last accepted step when `sᵀy ≤ 0`). Trial points with a non-finite
/// value are rejected like any other failed trial.
pub fn minimize<F>(mut objective: F, init: &[f64], cfg: &OptimConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    cfg.validate()?;
    let mut x = init.to_vec();
    let (mut f, mut g) = objective(&x)?;
    check_evaluation(f, &g, x.len())?;
    if cfg.check_gradient {
        let coords = spread_coords(x.len(), INIT_CHECK_COORDS);
        let err = fd_check_coords(&mut objective, &x, &DEFAULT_H_SCHEDULE, &coords)?;
        if err > INIT_CHECK_TOL {
            return Err(Error::GradientMismatch(err));
        }
    }

    let mut step = cfg.initial_step;
    let mut iterations = 0;
    loop {
        let grad_norm = max_abs(&g);
        if grad_norm <= cfg.grad_tol {
            return Ok(Minimum { argmin: x, value: f, iterations, converged: true, grad_norm });
        }
        if iterations == cfg.max_iters {
            return Ok(Minimum { argmin: x, value: f, iterations, converged: false, grad_norm });
        }
        let slope: f64 = g.iter().map(|v| v * v).sum();
        let mut t = step;
        let accepted = loop {
            if t < MIN_STEP {
                break None;
            }
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            let (ft, gt) = objective(&trial)?;
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                let armijo = ft <= f - cfg.sufficient_decrease * t * slope;
                // Once the predicted decrease is below the rounding of f,
                // values can no longer be compared; accept trials that are
                // level within rounding and shrink the gradient instead.
                let noise = 8.0 * f64::EPSILON * f.abs().max(f64::MIN_POSITIVE);
                let rounding = cfg.sufficient_decrease * t * slope <= noise && ft <= f + noise && max_abs(&gt) < grad_norm;
                if armijo || rounding {
                    break Some((trial, ft, gt));
                }
            }
            t *= cfg.shrink;
        };
        match accepted {
            Some((xn, fn_, gn)) => {
                let (mut ss, mut sy) = (0.0, 0.0);
                for i in 0..x.len() {
                    let (si, yi) = (xn[i] - x[i], gn[i] - g[i]);
                    ss += si * si;
                    sy += si * yi;
                }
                step = if sy > 0.0 && (ss / sy).is_finite() { ss / sy } else { 2.0 * t };
                x = xn;
                f = fn_;
                g = gn;
                iterations += 1;
            }
            None => return Ok(Minimum { argmin: x, value: f, iterations, converged: false, grad_norm }),
        }
    }
}

/// Default relative step sizes for [`fd_check`].
pub const DEFAULT_H_SCHEDULE: [f64; 2] = [1e-4, 1e-6];
/// Discrepancies at or below this absolute size count as agreement.
pub const FD_ABS_FLOOR: f64 = 1e-9;

/// Largest discrepancy between the analytic gradient and central finite
/// differences over all coordinates.
///
/// Per coordinate the step is `h·max(1, |x_i|)` for each `h` in the
/// schedule and the best-agreeing step is kept. The discrepancy is
/// `|g − fd| / max(|g|, |fd|)`, or 0 when `|g − fd| ≤ 1e-9`.
pub fn fd_check<F>(mut objective: F, point: &[f64], h_schedule: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    fd_check_coords(&mut objective, point, h_schedule, &coords)
}

fn fd_check_coords<F>(objective: &mut F, point: &[f64], h_schedule: &[f64], coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    if h_schedule.is_empty() {
        return Err(Error::InvalidParameter("empty finite-difference schedule".into()));
    }
    let (f0, g) = objective(point)?;
    check_evaluation(f0, &g, point.len())?;
    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for &i in coords {
        let scale = point[i].abs().max(1.0);
        let mut best = f64::INFINITY;
        for &h in h_schedule {
            let step = h * scale;
            x[i] = point[i] + step;
            let fp = objective(&x)?.0;
            x[i] = point[i] - step;
            let fm = objective(&x)?.0;
            x[i] = point[i];
            let fd = (fp - fm) / (2.0 * step);
            best = best.min(discrepancy(g[i], fd));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

fn discrepancy(analytic: f64, fd: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff <= FD_ABS_FLOOR {
        0.0
    } else if !diff.is_finite() {
        f64::INFINITY
    } else {
        diff / analytic.abs().max(fd.abs())
    }
}

fn spread_coords(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut out: Vec<usize> = (0..k).map(|j| j * n / k).collect();
    out.dedup();
    out
}

fn check_evaluation(f: f64, g: &[f64], n: usize) -> Result<()> {
    if g.len() != n {
        return Err(Error::Dimension(format!("gradient has {} entries for {n} parameters", g.len())));
    }
    if !f.is_finite() {
        return Err(Error::NonFinite(format!("objective value {f} at the starting point")));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i} at the starting point")));
    }
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `ν = exp(max(s, floor))`.
pub fn variance_from_log(s: f64, floor: f64) -> f64 {
    s.max(floor).exp()
}

/// Chain rule through [`variance_from_log`]: `∂L/∂s = ν·∂L/∂ν` above the
/// floor and 0 below it.
pub fn log_variance_grad(s: f64, floor: f64, grad_nu: f64) -> f64 {
    if s >= floor {
        s.exp() * grad_nu
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<Evaluation> {
        Ok((0.5 * (x[0] - 3.0).powi(2), vec![x[0] - 3.0]))
    }

    fn rosenbrock(x: &[f64]) -> Result<Evaluation> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn quadratic_minimum() {
        let m = minimize(quadratic, &[0.0], &OptimConfig::default()).unwrap();
        assert!(m.converged);
        assert!((m.argmin[0] - 3.0).abs() <= 1e-8);
    }

    #[test]
    fn rosenbrock_minimum() {
        let cfg = OptimConfig { max_iters: 100_000, ..Default::default() };
        let m = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!((m.argmin[0] - 1.0).abs() < 1e-4 && (m.argmin[1] - 1.0).abs() < 1e-4, "{:?}", m);
    }

    #[test]
    fn stationary_start() {
        let m = minimize(quadratic, &[3.0], &OptimConfig::default()).unwrap();
        assert!(m.converged);
        assert!(m.iterations <= 1);
    }

    #[test]
    fn never_increases() {
        let mut values = Vec::new();
        let cfg = OptimConfig { max_iters: 1, check_gradient: false, ..Default::default() };
        let mut x = vec![-1.2, 1.0];
        for _ in 0..500 {
            let m = minimize(rosenbrock, &x, &cfg).unwrap();
            values.push(m.value);
            x = m.argmin;
        }
        assert!(values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let r = minimize(|_: &[f64]| Ok((f64::NAN, vec![0.0])), &[0.0], &OptimConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn broken_gradient_is_caught_at_init() {
        let r = minimize(|x: &[f64]| Ok((0.5 * x[0] * x[0], vec![-x[0]])), &[1.0], &OptimConfig::default());
        assert!(matches!(r, Err(Error::GradientMismatch(e)) if (e - 2.0).abs() < 1e-6));
    }

    #[test]
    fn line_search_failure_reports_not_converged() {
        // gradient points uphill everywhere, so no trial is ever accepted
        let cfg = OptimConfig { check_gradient: false, ..Default::default() };
        let m = minimize(|x: &[f64]| Ok((x[0], vec![-1.0])), &[0.0], &cfg).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 0);
    }

    #[test]
    fn fd_linear_is_exact() {
        let e = fd_check(|x: &[f64]| Ok((3.0 * x[0] - 2.0 * x[1], vec![3.0, -2.0])), &[0.4, 7.0], &DEFAULT_H_SCHEDULE)
            .unwrap();
        assert!(e <= 1e-10);
    }

    #[test]
    fn fd_sign_flip() {
        let e = fd_check(|x: &[f64]| Ok((x[0].powi(2), vec![-2.0 * x[0]])), &[1.5], &DEFAULT_H_SCHEDULE).unwrap();
        assert!((e - 2.0).abs() < 1e-6);
    }

    #[test]
    fn log_variance_floor() {
        let floor = 1e-12f64.ln();
        assert_eq!(variance_from_log(-100.0, floor), (floor).exp());
        assert!(variance_from_log(-100.0, floor) >= 1e-12 * (1.0 - 1e-15));
        assert_eq!(log_variance_grad(-100.0, floor, 5.0), 0.0);
        assert_eq!(log_variance_grad(0.0, floor, 5.0), 5.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { shrink: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig::default().validate().is_ok());
    }
}
