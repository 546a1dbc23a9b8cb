//! The per-input risk `R_v = E_{τ,z|v}[L_NLL]` of the self-supervised loss,
//! its stationarity residuals, and a harness that minimizes it numerically
//! and compares the minimizer with the exact posterior moments.
//!
//! With `τ` uniform over the four subgrids, every HR pixel `k` is sampled by
//! exactly one `τ` (at LR position `l`, `k = 2l+τ`). For a diagonal
//! estimator the risk therefore separates over HR pixels:
//!
//! ```text
//! R_v = ¼ Σ_k [ (C_k + (m_k − û_k)²) / (2 d_k) + ½ ln d_k ],   d_k = ν̂_k + r̂_k
//! ```
//!
//! where `m_k = E[u_k|v]` and `C_k = Σ(v)_kk + R_k` are the mean and variance
//! of the target pixel `z_l` given `v`, and `R_k = g(m_k)` is the generative
//! noise variance (exact whenever the variance clamp is inactive).

use std::sync::OnceLock;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::degrade::{NoiseModel, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::grid::{subgrid_indices, DenseMatrix, ImageGrid, SpdFactor, SubgridId};
use crate::loss::{check_dense_size, estimate_noise_cov, selfsup_nll, EstimatorState, NoiseCovEstimate};
use crate::optim::{log_variance_grad, minimize, variance_from_log, Minimum, OptimConfig};
use crate::posterior::{GaussianSampler, MixturePosterior, PosteriorSummary};
use crate::rng::Stream;

/// How the self-supervised loss estimates the target noise covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RHatMode {
    /// `R̂ = R`, the generative noise variances.
    ExactDiag,
    /// `R̂ = g(A_τ û)`, recomputed from the current mean estimate.
    FromMeanEstimate,
    /// No correction: `R̂` at the `1e-12` floor.
    Zero,
}

impl RHatMode {
    pub fn name(self) -> &'static str {
        match self {
            RHatMode::ExactDiag => "exact_diag",
            RHatMode::FromMeanEstimate => "from_mean_estimate",
            RHatMode::Zero => "zero",
        }
    }
}

/// The distribution of `u | v`.
#[derive(Clone, Debug)]
pub enum PosteriorSource {
    Gaussian(PosteriorSummary),
    Mixture(MixturePosterior),
}

impl PosteriorSource {
    pub fn summary(&self) -> &PosteriorSummary {
        match self {
            PosteriorSource::Gaussian(s) => s,
            PosteriorSource::Mixture(m) => m.summary(),
        }
    }
}

/// Everything the per-input risk depends on.
#[derive(Clone, Debug)]
pub struct RiskProblem {
    source: PosteriorSource,
    noise: NoiseModel,
    mode: RHatMode,
    sampler: OnceLock<GaussianSampler>,
}

impl RiskProblem {
    pub fn new(source: PosteriorSource, noise: NoiseModel, mode: RHatMode) -> Result<Self> {
        let s = source.summary();
        if !s.mean().has_even_shape() {
            return Err(Error::Dimension(format!("posterior shape {:?} is not even", s.shape())));
        }
        Ok(Self { source, noise, mode, sampler: OnceLock::new() })
    }

    pub fn gaussian(posterior: PosteriorSummary, noise: NoiseModel, mode: RHatMode) -> Result<Self> {
        Self::new(PosteriorSource::Gaussian(posterior), noise, mode)
    }

    pub fn with_mode(&self, mode: RHatMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn posterior(&self) -> &PosteriorSummary {
        self.source.summary()
    }

    pub fn source(&self) -> &PosteriorSource {
        &self.source
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn mode(&self) -> RHatMode {
        self.mode
    }

    pub fn shape(&self) -> (usize, usize) {
        self.posterior().shape()
    }

    /// `R_k = g(E[u_k|v])` per HR pixel (0 for the noiseless model).
    pub fn true_noise(&self) -> ImageGrid {
        self.posterior().mean().map(|m| self.noise.generative_variance(m))
    }

    /// The risk as a function of per-pixel target moments.
    pub fn objective(&self) -> MomentRisk {
        let post = self.posterior();
        let z_mean = post.mean().data().to_vec();
        let z_var = post.diag().data().iter().zip(self.true_noise().data()).map(|(s, r)| s + r).collect();
        MomentRisk { shape: self.shape(), z_mean, z_var, exact_r: self.exact_r_hat(), noise: self.noise, mode: self.mode }
    }

    fn exact_r_hat(&self) -> Vec<f64> {
        self.posterior().mean().data().iter().map(|&m| self.noise.variance(m)).collect()
    }

    fn sample_u(&self, stream: &mut Stream) -> ImageGrid {
        match &self.source {
            PosteriorSource::Gaussian(s) => self
                .sampler
                .get_or_init(|| GaussianSampler::new(s.mean(), s.cov()).expect("posterior shape"))
                .sample(stream),
            PosteriorSource::Mixture(m) => m.sample(stream),
        }
    }

    /// `R̂` for subgrid `tau` under the problem's mode.
    pub fn r_hat(&self, mean_estimate: &ImageGrid, tau: SubgridId) -> Result<NoiseCovEstimate> {
        let (h, w) = self.shape();
        match self.mode {
            RHatMode::ExactDiag => {
                let exact = ImageGrid::new(h, w, self.exact_r_hat())?;
                NoiseCovEstimate::new(crate::grid::subgrid_extract(&exact, tau)?)
            }
            RHatMode::FromMeanEstimate => estimate_noise_cov(mean_estimate, tau, &self.noise),
            RHatMode::Zero => Ok(NoiseCovEstimate::floor(h / 2, w / 2)),
        }
    }

    /// One target draw: `z = A_τ u + n` with `u ~ u|v` and `n ~ N(0, g(A_τ u))`.
    pub fn sample_target(&self, tau: SubgridId, stream: &mut Stream) -> Result<ImageGrid> {
        let u = self.sample_u(stream);
        let clean = crate::grid::subgrid_extract(&u, tau)?;
        Ok(crate::degrade::sample_noise_with(&clean, &self.noise, stream))
    }
}

/// Value and gradients of a diagonal-estimator risk.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskGradient {
    pub value: f64,
    pub mean: ImageGrid,
    pub variance: ImageGrid,
}

/// `¼ Σ_k [(C_k + (m_k − û_k)²)/(2 d_k) + ½ ln d_k]` for given per-pixel
/// target moments `m_k`, `C_k`.
///
/// Built either from the exact posterior ([`RiskProblem::objective`]) or
/// from sampled targets ([`EmpiricalRisk`]).
#[derive(Clone, Debug, PartialEq)]
pub struct MomentRisk {
    shape: (usize, usize),
    z_mean: Vec<f64>,
    z_var: Vec<f64>,
    exact_r: Vec<f64>,
    noise: NoiseModel,
    mode: RHatMode,
}

impl MomentRisk {
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn z_mean(&self) -> &[f64] {
        &self.z_mean
    }

    pub fn z_var(&self) -> &[f64] {
        &self.z_var
    }

    pub fn mode(&self) -> RHatMode {
        self.mode
    }

    /// `r̂_k` and `∂r̂_k/∂û_k`.
    fn r_hat(&self, k: usize, mean_k: f64) -> (f64, f64) {
        match self.mode {
            RHatMode::ExactDiag => (self.exact_r[k], 0.0),
            RHatMode::FromMeanEstimate => (self.noise.variance(mean_k), self.noise.variance_slope(mean_k)),
            RHatMode::Zero => (VARIANCE_FLOOR, 0.0),
        }
    }

    pub fn evaluate(&self, mean: &[f64], variance: &[f64]) -> Result<RiskGradient> {
        let n = self.z_mean.len();
        if mean.len() != n || variance.len() != n {
            return Err(Error::Dimension(format!("estimate of length {}/{} for {n} pixels", mean.len(), variance.len())));
        }
        let mut value = 0.0;
        let mut g_mean = vec![0.0; n];
        let mut g_var = vec![0.0; n];
        for k in 0..n {
            let (r, dr) = self.r_hat(k, mean[k]);
            let d = variance[k] + r;
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NonPositiveVariance { index: k, value: d });
            }
            let bias = self.z_mean[k] - mean[k];
            let second = self.z_var[k] + bias * bias;
            value += 0.25 * (second / (2.0 * d) + 0.5 * d.ln());
            let df_dd = 0.5 / d - second / (2.0 * d * d);
            g_var[k] = 0.25 * df_dd;
            g_mean[k] = 0.25 * (-bias / d + df_dd * dr);
        }
        let (h, w) = self.shape;
        Ok(RiskGradient { value, mean: ImageGrid::new(h, w, g_mean)?, variance: ImageGrid::new(h, w, g_var)? })
    }

    /// Objective over `x = [û; s]` with `ν̂ = exp(max(s, floor))`.
    pub fn log_objective(&self, floor: f64) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + '_ {
        move |x: &[f64]| {
            let n = self.z_mean.len();
            let (mean, s) = x.split_at(n);
            let var: Vec<f64> = s.iter().map(|&v| variance_from_log(v, floor)).collect();
            let g = self.evaluate(mean, &var)?;
            let mut grad = g.mean.into_data();
            grad.extend(s.iter().zip(g.variance.data()).map(|(&v, &gv)| log_variance_grad(v, floor, gv)));
            Ok((g.value, grad))
        }
    }

    /// Minimizes over `(û, s)` from the given start.
    pub fn minimize(&self, mean0: &[f64], var0: &[f64], cfg: &OptimConfig) -> Result<(EstimatorState, Minimum)> {
        let floor = cfg.log_variance_floor;
        let mut x0 = mean0.to_vec();
        x0.extend(var0.iter().map(|v| v.max(VARIANCE_FLOOR).ln()));
        let m = minimize(self.log_objective(floor), &x0, cfg)?;
        let est = self.unpack(&m.argmin, floor)?;
        Ok((est, m))
    }

    /// Minimizes over `s` only, with `û` frozen.
    pub fn minimize_variance(&self, mean: &[f64], var0: &[f64], cfg: &OptimConfig) -> Result<(EstimatorState, Minimum)> {
        let floor = cfg.log_variance_floor;
        let n = self.z_mean.len();
        let full = self.log_objective(floor);
        let objective = |s: &[f64]| {
            let mut x = mean.to_vec();
            x.extend_from_slice(s);
            let (f, g) = full(&x)?;
            Ok((f, g[n..].to_vec()))
        };
        let s0: Vec<f64> = var0.iter().map(|v| v.max(VARIANCE_FLOOR).ln()).collect();
        let m = minimize(objective, &s0, cfg)?;
        let mut x = mean.to_vec();
        x.extend_from_slice(&m.argmin);
        Ok((self.unpack(&x, floor)?, m))
    }

    fn unpack(&self, x: &[f64], floor: f64) -> Result<EstimatorState> {
        let (h, w) = self.shape;
        let n = h * w;
        let mean = ImageGrid::new(h, w, x[..n].to_vec())?;
        let var = ImageGrid::new(h, w, x[n..].iter().map(|&s| variance_from_log(s, floor)).collect())?;
        EstimatorState::diagonal(mean, var)
    }

    /// The stationary point in closed form: `û = m`, `ν̂ = C − r̂` (clamped).
    /// Valid for the modes whose `r̂` does not depend on `û`.
    pub fn analytic_minimizer(&self) -> Result<EstimatorState> {
        let (h, w) = self.shape;
        let var = (0..self.z_mean.len())
            .map(|k| (self.z_var[k] - self.r_hat(k, self.z_mean[k]).0).max(VARIANCE_FLOOR))
            .collect();
        EstimatorState::diagonal(ImageGrid::new(h, w, self.z_mean.clone())?, ImageGrid::new(h, w, var)?)
    }
}

fn diag_parts(est: &EstimatorState) -> Result<(&[f64], &[f64])> {
    let var = est
        .diag_variance()
        .ok_or_else(|| Error::InvalidParameter("this risk needs a diagonal estimator".into()))?;
    Ok((est.mean().data(), var.data()))
}

/// Closed-form per-input risk. Diagonal estimators use the separable form;
/// full ones evaluate `¼ Σ_τ ½[tr(M̂ C_τ) + μᵀ M̂ μ + ln det M̂⁻¹]` densely.
pub fn risk_closed_form(problem: &RiskProblem, est: &EstimatorState) -> Result<f64> {
    est.mean().ensure_shape(problem.shape())?;
    if est.is_diagonal() {
        let (m, v) = diag_parts(est)?;
        return Ok(problem.objective().evaluate(m, v)?.value);
    }
    let mut total = 0.0;
    for tau in SubgridId::ALL {
        let t = FullTerms::new(problem, est, tau)?;
        let mhat = t.factor.inverse();
        let c = t.target_cov(problem)?;
        let trace: f64 = mhat.matmul(&c)?.diagonal().iter().sum();
        let mu = t.bias(problem, est);
        let quad: f64 = mu.iter().zip(mhat.matvec(&mu)).map(|(a, b)| a * b).sum();
        total += 0.25 * 0.5 * (trace + quad + t.factor.log_det());
    }
    Ok(total)
}

/// Closed-form risk of a diagonal estimator and its gradients with respect
/// to `û` and `ν̂`.
pub fn risk_closed_form_grad(problem: &RiskProblem, est: &EstimatorState) -> Result<RiskGradient> {
    est.mean().ensure_shape(problem.shape())?;
    let (m, v) = diag_parts(est)?;
    problem.objective().evaluate(m, v)
}

/// Monte-Carlo estimate of the per-input risk and its standard error.
///
/// Draw `i` uses `τ = ALL[i mod 4]` (stratified, so each subgrid gets a
/// quarter of the draws), `u` from the posterior and the target noise from
/// the noise model. Draws are split into 64 fixed batches on disjoint
/// sub-streams and reduced in order.
pub fn risk_monte_carlo(problem: &RiskProblem, est: &EstimatorState, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_samples < 4 {
        return Err(Error::InvalidParameter("need at least 4 Monte-Carlo draws".into()));
    }
    est.mean().ensure_shape(problem.shape())?;
    let r_hats = SubgridId::ALL.iter().map(|&t| problem.r_hat(est.mean(), t)).collect::<Result<Vec<_>>>()?;
    let batches: Vec<Result<[Welford; 4]>> = (0..MC_BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut stream = Stream::substream(seed, b as u64);
            let mut acc = [Welford::default(); 4];
            for i in (b * n_samples / MC_BATCHES)..((b + 1) * n_samples / MC_BATCHES) {
                let tau = SubgridId::from_index(i % 4);
                let z = problem.sample_target(tau, &mut stream)?;
                acc[tau.index()].push(selfsup_nll(&z, est, tau, &r_hats[tau.index()])?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = [Welford::default(); 4];
    for b in batches {
        let b = b?;
        for t in 0..4 {
            total[t].merge(&b[t]);
        }
    }
    let value = total.iter().map(|w| w.mean).sum::<f64>() / 4.0;
    let var = total.iter().map(|w| w.variance() / w.count as f64).sum::<f64>() / 16.0;
    Ok((value, var.sqrt()))
}

const MC_BATCHES: usize = 64;

#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n as f64;
        self.count = n;
    }

    fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

/// The empirical risk over sampled `(τ, z)` pairs.
///
/// Per HR pixel the empirical mean of the loss only involves the first two
/// sample moments of the targets, so the draws are reduced to those and the
/// risk is a [`MomentRisk`] with sampled moments.
#[derive(Clone, Debug)]
pub struct EmpiricalRisk {
    risk: MomentRisk,
    n_samples: usize,
}

impl EmpiricalRisk {
    /// Draws `n_samples` targets as in [`risk_monte_carlo`].
    pub fn sample(problem: &RiskProblem, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples < 4 * MC_BATCHES {
            return Err(Error::InvalidParameter(format!("need at least {} draws", 4 * MC_BATCHES)));
        }
        let (h, w) = problem.shape();
        let n = h * w;
        let batches: Vec<Result<Vec<Welford>>> = (0..MC_BATCHES)
            .into_par_iter()
            .map(|b| {
                let mut stream = Stream::substream(seed, b as u64);
                let mut acc = vec![Welford::default(); n];
                for i in (b * n_samples / MC_BATCHES)..((b + 1) * n_samples / MC_BATCHES) {
                    let tau = SubgridId::from_index(i % 4);
                    let z = problem.sample_target(tau, &mut stream)?;
                    for (&k, &v) in subgrid_indices(h, w, tau).iter().zip(z.data()) {
                        acc[k].push(v);
                    }
                }
                Ok(acc)
            })
            .collect();
        let mut total = vec![Welford::default(); n];
        for b in batches {
            for (t, x) in total.iter_mut().zip(b?) {
                t.merge(&x);
            }
        }
        let mut risk = problem.objective();
        risk.z_mean = total.iter().map(|w| w.mean).collect();
        // the population (1/c) second moment is what the empirical loss sees
        risk.z_var = total.iter().map(|w| w.m2 / w.count as f64).collect();
        Ok(Self { risk, n_samples })
    }

    pub fn risk(&self) -> &MomentRisk {
        &self.risk
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
}

/// Per-subgrid dense terms for full-covariance residuals.
struct FullTerms {
    idx: Vec<usize>,
    factor: SpdFactor,
    r_true: Vec<f64>,
}

impl FullTerms {
    fn new(problem: &RiskProblem, est: &EstimatorState, tau: SubgridId) -> Result<Self> {
        let (h, w) = problem.shape();
        check_dense_size(h * w)?;
        let idx = subgrid_indices(h, w, tau);
        let r_hat = problem.r_hat(est.mean(), tau)?;
        let mut s = est.covariance().principal_submatrix(&idx);
        for (i, r) in r_hat.diag().data().iter().enumerate() {
            s.set(i, i, s.get(i, i) + r);
        }
        let factor = SpdFactor::new(&s.symmetrized())?;
        let r_true = idx.iter().map(|&k| problem.true_noise().data()[k]).collect();
        Ok(Self { idx, factor, r_true })
    }

    /// `C_τ = A_τ Σ(v) A_τᵀ + R_τ`.
    fn target_cov(&self, problem: &RiskProblem) -> Result<DenseMatrix> {
        let mut c = problem.posterior().cov().principal_submatrix(&self.idx);
        for (i, r) in self.r_true.iter().enumerate() {
            c.set(i, i, c.get(i, i) + r);
        }
        Ok(c)
    }

    /// `A_τ(E[u|v] − û)`.
    fn bias(&self, problem: &RiskProblem, est: &EstimatorState) -> Vec<f64> {
        let m = problem.posterior().mean().data();
        let u = est.mean().data();
        self.idx.iter().map(|&k| m[k] - u[k]).collect()
    }
}

/// Max-norm of `Σ_τ A_τᵀ M̂_τ A_τ (û − E[u|v])`; for a diagonal estimator
/// `max_k |û_k − E[u_k|v]| / d_k`.
pub fn stationarity_mean_residual(problem: &RiskProblem, est: &EstimatorState) -> Result<f64> {
    est.mean().ensure_shape(problem.shape())?;
    let post = problem.posterior().mean().data();
    if let Some(var) = est.diag_variance() {
        let obj = problem.objective();
        let mut worst: f64 = 0.0;
        for k in 0..post.len() {
            let u = est.mean().data()[k];
            let d = var.data()[k] + obj.r_hat(k, u).0;
            worst = worst.max((u - post[k]).abs() / d);
        }
        return Ok(worst);
    }
    let mut worst: f64 = 0.0;
    for tau in SubgridId::ALL {
        let t = FullTerms::new(problem, est, tau)?;
        let neg_bias = t.bias(problem, est);
        let v = t.factor.solve(&neg_bias);
        worst = worst.max(v.iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    Ok(worst)
}

/// `max_k |1/d_k − (Σ(v)_kk + R_k)/d_k²|`, the diagonal variance condition
/// evaluated at `û = E[u|v]`.
pub fn stationarity_var_residual_diag(problem: &RiskProblem, est: &EstimatorState) -> Result<f64> {
    est.mean().ensure_shape(problem.shape())?;
    let var = est
        .diag_variance()
        .ok_or_else(|| Error::InvalidParameter("diagonal residual needs a diagonal estimator".into()))?;
    let obj = problem.objective();
    let mut worst: f64 = 0.0;
    for k in 0..var.len() {
        let d = var.data()[k] + obj.r_hat(k, est.mean().data()[k]).0;
        worst = worst.max((1.0 / d - obj.z_var[k] / (d * d)).abs());
    }
    Ok(worst)
}

/// Max-norm of `Σ_τ A_τᵀ(M̂_τ − M̂_τ C_τ M̂_τ)A_τ` with
/// `C_τ = A_τ Σ(v) A_τᵀ + R_τ`. Accepts diagonal estimators too.
pub fn stationarity_cov_residual_full(problem: &RiskProblem, est: &EstimatorState) -> Result<f64> {
    est.mean().ensure_shape(problem.shape())?;
    let mut worst: f64 = 0.0;
    for tau in SubgridId::ALL {
        let t = FullTerms::new(problem, est, tau)?;
        let mhat = t.factor.inverse();
        let c = t.target_cov(problem)?;
        let r = mhat.sub(&mhat.matmul(&c)?.matmul(&mhat)?)?;
        worst = worst.max(r.max_abs());
    }
    Ok(worst)
}

/// Diagonal of the full residual matrix (HR-indexed), for comparing with
/// [`stationarity_var_residual_diag`].
pub fn cov_residual_diagonal(problem: &RiskProblem, est: &EstimatorState) -> Result<ImageGrid> {
    let (h, w) = problem.shape();
    let mut out = ImageGrid::zeros(h, w);
    for tau in SubgridId::ALL {
        let t = FullTerms::new(problem, est, tau)?;
        let mhat = t.factor.inverse();
        let c = t.target_cov(problem)?;
        let r = mhat.sub(&mhat.matmul(&c)?.matmul(&mhat)?)?;
        for (i, &k) in t.idx.iter().enumerate() {
            out.data_mut()[k] = r.get(i, i);
        }
    }
    Ok(out)
}

/// Smallest eigenvalue of `Σ_τ A_τᵀ M̂_τ A_τ` (block diagonal across
/// subgrids). Positive iff the mean stationarity condition pins `û` down.
pub fn mean_operator_min_eigenvalue(problem: &RiskProblem, est: &EstimatorState) -> Result<f64> {
    let mut lowest = f64::INFINITY;
    for tau in SubgridId::ALL {
        let t = FullTerms::new(problem, est, tau)?;
        let eig = SymmetricEigen::new(t.factor.inverse().as_nalgebra().clone());
        lowest = lowest.min(eig.eigenvalues.min());
    }
    Ok(lowest)
}

/// `max_k |a_k − b_k| / |b_k|`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / y.abs()))
}

/// `max_k |a_k − b_k| / max_k |b_k|`; used where `b` may have entries near 0.
pub fn normwise_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// One line of a verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub instance: String,
    pub check: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    /// Passes when `residual ≤ tolerance`.
    pub fn at_most(instance: &str, check: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Self { instance: instance.to_string(), check: check.into(), residual, tolerance, pass: residual <= tolerance }
    }

    /// Passes when `residual > tolerance`.
    pub fn above(instance: &str, check: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        Self { instance: instance.to_string(), check: check.into(), residual, tolerance, pass: residual > tolerance }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prop1Config {
    pub restarts: usize,
    /// Relative tolerance on `û` and `ν̂` in the exact-`R̂` runs.
    pub tolerance: f64,
    /// Relative tolerance of the `R̂ = 0` and frozen-bias runs.
    pub shifted_tolerance: f64,
    /// Stationarity tolerances at the numerical minimizer: the mean
    /// residual of [`stationarity_mean_residual`] and the relative variance
    /// residual `max_k |ν̂_k + r̂_k − C_k| / C_k`.
    pub mean_stationarity_tol: f64,
    pub var_stationarity_tol: f64,
    /// Size of the frozen bias `δ`, relative to the posterior std.
    pub bias_scale: f64,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            restarts: 20,
            tolerance: 1e-4,
            shifted_tolerance: 1e-3,
            mean_stationarity_tol: 1e-6,
            var_stationarity_tol: 1e-5,
            bias_scale: 0.5,
            seed: 0,
            optim: OptimConfig { max_iters: 500_000, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RestartOutcome {
    pub estimate: EstimatorState,
    pub minimum: Minimum,
    pub mean_error: f64,
    pub var_error: f64,
}

#[derive(Clone, Debug)]
pub struct Prop1Report {
    pub rows: Vec<CheckRow>,
    pub restarts: Vec<RestartOutcome>,
}

impl Prop1Report {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// `max_k |d_k − C_k| / C_k`: the variance condition in scale-free form,
/// comparable across instances whose variances differ by orders of
/// magnitude.
fn relative_var_residual(risk: &MomentRisk, est: &EstimatorState) -> f64 {
    let var = est.diag_variance().expect("diagonal");
    (0..var.len()).fold(0.0f64, |m, k| {
        let d = var.data()[k] + risk.r_hat(k, est.mean().data()[k]).0;
        m.max((d - risk.z_var[k]).abs() / risk.z_var[k])
    })
}

/// Random starting point for restart `r`.
fn restart_init(risk: &MomentRisk, seed: u64, r: u64) -> (Vec<f64>, Vec<f64>) {
    let mut s = Stream::substream(seed, r);
    let scale = risk.z_var.iter().fold(0.0f64, |m, v| m.max(v.sqrt())).max(1e-6);
    let mean = risk.z_mean.iter().map(|m| m + scale * s.normal()).collect();
    let level = risk.z_var.iter().sum::<f64>() / risk.z_var.len() as f64;
    let var = risk.z_var.iter().map(|_| level.max(1e-6) * s.normal().exp()).collect();
    (mean, var)
}

/// Minimizes the per-input risk from several random starts and checks the
/// minimizer against the posterior moments:
///
/// * `R̂ = R`: every restart reaches `û = E[u|v]`, `ν̂ = diag Σ(v)`;
/// * `R̂ = 0`: `ν̂ = diag Σ(v) + R`;
/// * `û` frozen at `E[u|v] + δ`: `ν̂ = diag Σ(v) + δ²`.
///
/// Restarts that stop without meeting the gradient tolerance are reported
/// as failed rows; they do not abort the run.
pub fn verify_proposition1(problem: &RiskProblem, instance: &str, cfg: &Prop1Config) -> Result<Prop1Report> {
    if problem.mode() != RHatMode::ExactDiag {
        return Err(Error::InvalidParameter("verification needs r_hat_mode = exact_diag".into()));
    }
    let post = problem.posterior();
    let target_mean = post.mean().data().to_vec();
    let target_var = post.diag().data().to_vec();
    let risk = problem.objective();
    let mut rows = Vec::new();

    let outcomes: Vec<Result<RestartOutcome>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let (m0, v0) = restart_init(&risk, cfg.seed, r as u64);
            let (estimate, minimum) = risk.minimize(&m0, &v0, &cfg.optim)?;
            let mean_error = normwise_relative_error(estimate.mean().data(), &target_mean);
            let var_error = max_relative_error(estimate.diag_variance().expect("diagonal").data(), &target_var);
            Ok(RestartOutcome { estimate, minimum, mean_error, var_error })
        })
        .collect();
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    for (r, o) in outcomes.iter().enumerate() {
        let tag = format!("restart{r:02}");
        rows.push(CheckRow::at_most(instance, format!("{tag}_mean_rel_error"), o.mean_error, cfg.tolerance));
        rows.push(CheckRow::at_most(instance, format!("{tag}_var_rel_error"), o.var_error, cfg.tolerance));
        let mut conv = CheckRow::at_most(instance, format!("{tag}_grad_norm"), o.minimum.grad_norm, cfg.optim.grad_tol);
        conv.pass = o.minimum.converged;
        rows.push(conv);
        rows.push(CheckRow::at_most(
            instance,
            format!("{tag}_mean_stationarity"),
            stationarity_mean_residual(problem, &o.estimate)?,
            cfg.mean_stationarity_tol,
        ));
        rows.push(CheckRow::at_most(
            instance,
            format!("{tag}_var_stationarity"),
            relative_var_residual(&risk, &o.estimate),
            cfg.var_stationarity_tol,
        ));
    }
    if let Some(first) = outcomes.first() {
        let spread = outcomes.iter().fold(0.0f64, |m, o| {
            m.max(normwise_relative_error(o.estimate.mean().data(), first.estimate.mean().data())).max(
                max_relative_error(
                    o.estimate.diag_variance().expect("diagonal").data(),
                    first.estimate.diag_variance().expect("diagonal").data(),
                ),
            )
        });
        rows.push(CheckRow::at_most(instance, "restart_spread", spread, cfg.tolerance));
        let lowest = mean_operator_min_eigenvalue(problem, &first.estimate)?;
        rows.push(CheckRow::above(instance, "mean_operator_min_eigenvalue", lowest, 0.0));
    }

    // No noise correction: the variance absorbs R.
    let zero = problem.with_mode(RHatMode::Zero).objective();
    let (m0, v0) = restart_init(&zero, cfg.seed, cfg.restarts as u64);
    let (est, min) = zero.minimize(&m0, &v0, &cfg.optim)?;
    let inflated: Vec<f64> = target_var.iter().zip(problem.true_noise().data()).map(|(s, r)| s + r).collect();
    rows.push(CheckRow::at_most(
        instance,
        "zero_rhat_var_vs_var_plus_noise",
        max_relative_error(est.diag_variance().expect("diagonal").data(), &inflated),
        cfg.shifted_tolerance,
    ));
    rows.push(CheckRow::at_most(
        instance,
        "zero_rhat_mean_rel_error",
        normwise_relative_error(est.mean().data(), &target_mean),
        cfg.shifted_tolerance,
    ));
    let mut conv = CheckRow::at_most(instance, "zero_rhat_grad_norm", min.grad_norm, cfg.optim.grad_tol);
    conv.pass = min.converged;
    rows.push(conv);

    // Frozen biased mean: the variance absorbs δ².
    let mut s = Stream::substream(cfg.seed, cfg.restarts as u64 + 1);
    let delta: Vec<f64> = target_var.iter().map(|v| cfg.bias_scale * v.sqrt().max(1e-3) * s.normal()).collect();
    let biased: Vec<f64> = target_mean.iter().zip(&delta).map(|(m, d)| m + d).collect();
    let (_, v0) = restart_init(&risk, cfg.seed, cfg.restarts as u64 + 2);
    let (est, min) = risk.minimize_variance(&biased, &v0, &cfg.optim)?;
    let expected: Vec<f64> = target_var.iter().zip(&delta).map(|(v, d)| v + d * d).collect();
    rows.push(CheckRow::at_most(
        instance,
        "biased_mean_var_vs_var_plus_bias2",
        max_relative_error(est.diag_variance().expect("diagonal").data(), &expected),
        cfg.shifted_tolerance,
    ));
    let mut conv = CheckRow::at_most(instance, "biased_mean_grad_norm", min.grad_norm, cfg.optim.grad_tol);
    conv.pass = min.converged;
    rows.push(conv);

    Ok(Prop1Report { rows, restarts: outcomes })
}

/// Minimizes the empirical risk of `n_samples` sampled targets (for any
/// posterior, typically a mixture) from a random start and compares the
/// minimizer with the exact posterior mean and variances.
pub fn verify_sampled_minimizer(
    problem: &RiskProblem,
    instance: &str,
    n_samples: usize,
    tolerance: f64,
    seed: u64,
    optim: &OptimConfig,
) -> Result<Vec<CheckRow>> {
    if problem.mode() != RHatMode::ExactDiag {
        return Err(Error::InvalidParameter("verification needs r_hat_mode = exact_diag".into()));
    }
    let empirical = EmpiricalRisk::sample(problem, n_samples, seed)?;
    let risk = empirical.risk();
    let (m0, v0) = restart_init(risk, seed, u64::MAX);
    let (est, min) = risk.minimize(&m0, &v0, optim)?;
    let post = problem.posterior();
    let mut conv = CheckRow::at_most(instance, "grad_norm", min.grad_norm, optim.grad_tol);
    conv.pass = min.converged;
    Ok(vec![
        CheckRow::at_most(
            instance,
            "mean_rel_error",
            normwise_relative_error(est.mean().data(), post.mean().data()),
            tolerance,
        ),
        CheckRow::at_most(
            instance,
            "var_rel_error",
            max_relative_error(est.diag_variance().expect("diagonal").data(), post.diag().data()),
            tolerance,
        ),
        conv,
    ])
}

/// Exact solution `(E[u|v], diag Σ(v))` as a diagonal estimator.
pub fn posterior_estimator(posterior: &PosteriorSummary) -> Result<EstimatorState> {
    EstimatorState::diagonal(posterior.mean().clone(), posterior.diag().map(|v| v.max(VARIANCE_FLOOR)))
}

/// Exact solution `(E[u|v], Σ(v))` as a full-covariance estimator.
pub fn posterior_estimator_full(posterior: &PosteriorSummary) -> Result<EstimatorState> {
    let factor = SpdFactor::new(posterior.cov())?.lower();
    EstimatorState::full(posterior.mean().clone(), factor)
}
