//! Exact posteriors of `u` given linear observations `v_t = A_t u + n_t`,
//! `n_t ~ N(0, diag r_t)`, under Gaussian and Gaussian-mixture priors, and a
//! brute-force importance-sampling estimate for checking them.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::degrade::LinearOperator;
use crate::error::{Error, Result};
use crate::grid::{DenseMatrix, ImageGrid, SpdFactor};
use crate::loss::check_dense_size;
use crate::rng::Stream;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Draws from `N(mean, cov)` through a symmetric square root of `cov`.
/// Tolerates singular (PSD) covariances.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    sqrt: DMatrix<f64>,
    shape: (usize, usize),
}

impl GaussianSampler {
    pub fn new(mean: &ImageGrid, cov: &DenseMatrix) -> Result<Self> {
        let n = mean.len();
        if cov.rows() != n || cov.cols() != n {
            return Err(Error::ShapeMismatch { expected: (n, n), got: (cov.rows(), cov.cols()) });
        }
        let eig = SymmetricEigen::new(cov.symmetrized().as_nalgebra().clone());
        let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        let sqrt = &eig.eigenvectors * scale;
        Ok(Self { mean: mean.data().to_vec(), sqrt, shape: mean.shape() })
    }

    pub fn sample(&self, stream: &mut Stream) -> ImageGrid {
        let n = self.mean.len();
        let xi = DVector::from_fn(n, |_, _| stream.normal());
        let x = &self.sqrt * xi;
        let data = self.mean.iter().zip(x.iter()).map(|(m, d)| m + d).collect();
        ImageGrid::new(self.shape.0, self.shape.1, data).expect("sampler shape")
    }
}

/// `N(μ₀, Σ₀)` over HR images.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: ImageGrid,
    cov: DenseMatrix,
    sampler: OnceLock<GaussianSampler>,
}

impl GaussianPrior {
    pub fn new(mean: ImageGrid, cov: DenseMatrix) -> Result<Self> {
        let n = mean.len();
        check_dense_size(n)?;
        if cov.rows() != n || cov.cols() != n {
            return Err(Error::ShapeMismatch { expected: (n, n), got: (cov.rows(), cov.cols()) });
        }
        SpdFactor::new(&cov)?;
        Ok(Self { mean, cov: cov.symmetrized(), sampler: OnceLock::new() })
    }

    /// Independent pixels with the given variances.
    pub fn diagonal(mean: ImageGrid, variance: &ImageGrid) -> Result<Self> {
        variance.ensure_shape(mean.shape())?;
        Self::new(mean, DenseMatrix::from_diagonal(variance.data()))
    }

    /// Constant mean and a separable, periodic exponential covariance
    /// `variance·k_r(Δr)·k_c(Δc) + nugget·δ`, where `k` is the exponential
    /// kernel wrapped around the image period (so the covariance is
    /// stationary on the torus and positive definite).
    pub fn stationary_exponential(
        height: usize,
        width: usize,
        mean_value: f64,
        variance: f64,
        corr_len: f64,
        nugget: f64,
    ) -> Result<Self> {
        if !(variance > 0.0) || !(corr_len > 0.0) || !(nugget >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "stationary prior needs variance > 0, corr_len > 0, nugget >= 0 (got {variance}, {corr_len}, {nugget})"
            )));
        }
        let kr = wrapped_exponential(height, corr_len);
        let kc = wrapped_exponential(width, corr_len);
        let n = height * width;
        let cov = DenseMatrix::from_fn(n, n, |i, j| {
            let (ri, ci) = (i / width, i % width);
            let (rj, cj) = (j / width, j % width);
            let dr = ri.abs_diff(rj);
            let dc = ci.abs_diff(cj);
            variance * kr[dr] * kc[dc] + if i == j { nugget } else { 0.0 }
        });
        Self::new(ImageGrid::filled(height, width, mean_value), cov)
    }

    pub fn mean(&self) -> &ImageGrid {
        &self.mean
    }

    pub fn cov(&self) -> &DenseMatrix {
        &self.cov
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    pub fn sample(&self, stream: &mut Stream) -> ImageGrid {
        self.sampler
            .get_or_init(|| GaussianSampler::new(&self.mean, &self.cov).expect("validated prior"))
            .sample(stream)
    }
}

/// `k(Δ) = Σ_j exp(−|Δ + j·n|/ℓ)`, normalized to `k(0) = 1`.
fn wrapped_exponential(n: usize, corr_len: f64) -> Vec<f64> {
    let q = (-(n as f64) / corr_len).exp();
    (0..n)
        .map(|d| {
            let d = d as f64;
            ((-d / corr_len).exp() + (-(n as f64 - d) / corr_len).exp()) / (1.0 + q)
        })
        .collect()
}

/// Mixture of Gaussian priors sharing one image shape.
#[derive(Clone, Debug)]
pub struct GmmPrior {
    weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl GmmPrior {
    /// Weights must be nonnegative and sum to 1 within `1e-12`; zero weights
    /// are allowed and such components never contribute.
    pub fn new(weights: Vec<f64>, components: Vec<GaussianPrior>) -> Result<Self> {
        if components.len() < 2 || weights.len() != components.len() {
            return Err(Error::InvalidParameter(format!(
                "mixture needs at least 2 components and one weight each (got {} weights, {} components)",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}")));
        }
        let shape = components[0].shape();
        if let Some(c) = components.iter().find(|c| c.shape() != shape) {
            return Err(Error::ShapeMismatch { expected: shape, got: c.shape() });
        }
        Ok(Self { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn shape(&self) -> (usize, usize) {
        self.components[0].shape()
    }

    pub fn sample(&self, stream: &mut Stream) -> ImageGrid {
        let c = pick(&self.weights, stream.uniform());
        self.components[c].sample(stream)
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// A linear sensor: operator plus diagonal Gaussian noise variances.
#[derive(Clone, Debug)]
pub struct Sensor {
    operator: Arc<dyn LinearOperator>,
    noise_diag: ImageGrid,
}

impl Sensor {
    pub fn new(operator: Arc<dyn LinearOperator>, noise_diag: ImageGrid) -> Result<Self> {
        noise_diag.ensure_shape(operator.output_shape())?;
        for (index, &value) in noise_diag.data().iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositiveVariance { index, value });
            }
        }
        Ok(Self { operator, noise_diag })
    }

    pub fn operator(&self) -> &Arc<dyn LinearOperator> {
        &self.operator
    }

    pub fn noise_diag(&self) -> &ImageGrid {
        &self.noise_diag
    }

    /// `A u + n` with `n ~ N(0, diag r)`.
    pub fn observe(&self, u: &ImageGrid, stream: &mut Stream) -> Result<Observation> {
        let mut values = self.operator.apply(u)?;
        for (v, r) in values.data_mut().iter_mut().zip(self.noise_diag.data()) {
            *v += r.sqrt() * stream.normal();
        }
        Observation::new(self.clone(), values)
    }
}

/// Observed values from one [`Sensor`].
#[derive(Clone, Debug)]
pub struct Observation {
    sensor: Sensor,
    values: ImageGrid,
}

impl Observation {
    pub fn new(sensor: Sensor, values: ImageGrid) -> Result<Self> {
        values.ensure_shape(sensor.operator.output_shape())?;
        if !values.all_finite() {
            return Err(Error::NonFinite("observation values".into()));
        }
        Ok(Self { sensor, values })
    }

    pub fn sensor(&self) -> &Sensor {
        &self.sensor
    }

    pub fn values(&self) -> &ImageGrid {
        &self.values
    }

    pub fn operator(&self) -> &Arc<dyn LinearOperator> {
        &self.sensor.operator
    }

    pub fn noise_diag(&self) -> &ImageGrid {
        &self.sensor.noise_diag
    }

    /// `Σ_l −(v_l − (A u)_l)²/(2 r_l)`, the log-likelihood up to a constant.
    pub fn log_likelihood(&self, u: &ImageGrid) -> Result<f64> {
        let pred = self.sensor.operator.apply(u)?;
        Ok(self
            .values
            .data()
            .iter()
            .zip(pred.data())
            .zip(self.sensor.noise_diag.data())
            .map(|((v, p), r)| -(v - p).powi(2) / (2.0 * r))
            .sum())
    }
}

/// Mean and covariance of `u | v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    mean: ImageGrid,
    cov: DenseMatrix,
    diag: ImageGrid,
}

impl PosteriorSummary {
    /// Symmetrizes `cov` and clips negative rounding on its diagonal to 0.
    pub fn new(mean: ImageGrid, cov: DenseMatrix) -> Result<Self> {
        let n = mean.len();
        if cov.rows() != n || cov.cols() != n {
            return Err(Error::ShapeMismatch { expected: (n, n), got: (cov.rows(), cov.cols()) });
        }
        let mut cov = cov.symmetrized();
        for i in 0..n {
            cov.set(i, i, cov.get(i, i).max(0.0));
        }
        let (h, w) = mean.shape();
        let diag = ImageGrid::new(h, w, cov.diagonal())?;
        Ok(Self { mean, cov, diag })
    }

    pub fn mean(&self) -> &ImageGrid {
        &self.mean
    }

    pub fn cov(&self) -> &DenseMatrix {
        &self.cov
    }

    /// `diag Σ(v)` as an image.
    pub fn diag(&self) -> &ImageGrid {
        &self.diag
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }
}

/// Linear-Gaussian conditioning for a fixed prior and sensor set.
///
/// Everything except the posterior mean is independent of the observed
/// values, so it is computed once: with the sensors stacked as `A`, `R`,
///
/// ```text
/// S = A Σ₀ Aᵀ + R,   K = Σ₀ Aᵀ S⁻¹,
/// E[u|v] = μ₀ + K (v − A μ₀),   Σ(v) = Σ₀ − K A Σ₀.
/// ```
#[derive(Clone, Debug)]
pub struct GaussianConditioner {
    shape: (usize, usize),
    sensor_shapes: Vec<(usize, usize)>,
    prior_mean: DVector<f64>,
    predicted: DVector<f64>,
    gain: DMatrix<f64>,
    innovation: SpdFactor,
    posterior_cov: DenseMatrix,
}

impl GaussianConditioner {
    pub fn new(prior: &GaussianPrior, sensors: &[Sensor]) -> Result<Self> {
        let shape = prior.shape();
        let n = prior.mean.len();
        let mut rows: Vec<DMatrix<f64>> = Vec::with_capacity(sensors.len());
        let mut noise = Vec::new();
        for s in sensors {
            if s.operator.input_shape() != shape {
                return Err(Error::ShapeMismatch { expected: shape, got: s.operator.input_shape() });
            }
            rows.push(s.operator.to_dense()?.as_nalgebra().clone());
            noise.extend_from_slice(s.noise_diag.data());
        }
        let m = noise.len();
        let mut a = DMatrix::<f64>::zeros(m, n);
        let mut offset = 0;
        for r in &rows {
            a.rows_mut(offset, r.nrows()).copy_from(r);
            offset += r.nrows();
        }
        let sigma0 = prior.cov.as_nalgebra();
        let mu0 = DVector::from_column_slice(prior.mean.data());
        let cross = sigma0 * a.transpose(); // Σ₀Aᵀ, n×m
        let mut s = &a * &cross;
        for (i, r) in noise.iter().enumerate() {
            s[(i, i)] += r;
        }
        let s = DenseMatrix::from_nalgebra(s).symmetrized();
        let innovation = SpdFactor::new(&s)?;
        // K = Σ₀Aᵀ S⁻¹  ⇔  S Kᵀ = A Σ₀
        let kt = innovation.solve_matrix(&DenseMatrix::from_nalgebra(cross.transpose()));
        let gain = kt.as_nalgebra().transpose();
        let posterior_cov = DenseMatrix::from_nalgebra(sigma0 - &gain * cross.transpose()).symmetrized();
        Ok(Self {
            shape,
            sensor_shapes: sensors.iter().map(|s| s.operator.output_shape()).collect(),
            predicted: &a * &mu0,
            prior_mean: mu0,
            gain,
            innovation,
            posterior_cov,
        })
    }

    fn stacked(&self, values: &[&ImageGrid]) -> Result<DVector<f64>> {
        if values.len() != self.sensor_shapes.len() {
            return Err(Error::Dimension(format!(
                "{} observations for {} sensors",
                values.len(),
                self.sensor_shapes.len()
            )));
        }
        let mut out = Vec::with_capacity(self.predicted.len());
        for (v, &shape) in values.iter().zip(&self.sensor_shapes) {
            v.ensure_shape(shape)?;
            out.extend_from_slice(v.data());
        }
        Ok(DVector::from_vec(out))
    }

    /// `E[u|v]`.
    pub fn mean(&self, values: &[&ImageGrid]) -> Result<ImageGrid> {
        let v = self.stacked(values)?;
        let m = &self.prior_mean + &self.gain * (v - &self.predicted);
        ImageGrid::new(self.shape.0, self.shape.1, m.as_slice().to_vec())
    }

    /// `Σ(v)`, the same for every `v`.
    pub fn cov(&self) -> &DenseMatrix {
        &self.posterior_cov
    }

    /// `K`, the map from stacked observations to the posterior mean.
    pub fn gain(&self) -> DenseMatrix {
        DenseMatrix::from_nalgebra(self.gain.clone())
    }

    /// `μ₀ − K A μ₀`, so that `E[u|v] = K v + offset`.
    pub fn offset(&self) -> Vec<f64> {
        (&self.prior_mean - &self.gain * &self.predicted).as_slice().to_vec()
    }

    /// `ln N(v; A μ₀, S)`.
    pub fn log_evidence(&self, values: &[&ImageGrid]) -> Result<f64> {
        let r = self.stacked(values)? - &self.predicted;
        let sr = self.innovation.solve(r.as_slice());
        let quad: f64 = r.iter().zip(&sr).map(|(a, b)| a * b).sum();
        Ok(-0.5 * (quad + self.innovation.log_det() + r.len() as f64 * LN_2PI))
    }

    pub fn condition(&self, values: &[&ImageGrid]) -> Result<PosteriorSummary> {
        PosteriorSummary::new(self.mean(values)?, self.posterior_cov.clone())
    }
}

fn split(observations: &[Observation]) -> (Vec<Sensor>, Vec<&ImageGrid>) {
    (observations.iter().map(|o| o.sensor.clone()).collect(), observations.iter().map(|o| &o.values).collect())
}

/// Exact Gaussian posterior. With no observations this is the prior.
pub fn gaussian_posterior(prior: &GaussianPrior, observations: &[Observation]) -> Result<PosteriorSummary> {
    if observations.is_empty() {
        return PosteriorSummary::new(prior.mean.clone(), prior.cov.clone());
    }
    let (sensors, values) = split(observations);
    GaussianConditioner::new(prior, &sensors)?.condition(&values)
}

/// Posterior under a mixture prior: a mixture of the component posteriors.
#[derive(Clone, Debug)]
pub struct MixturePosterior {
    weights: Vec<f64>,
    components: Vec<PosteriorSummary>,
    summary: PosteriorSummary,
    samplers: OnceLock<Vec<GaussianSampler>>,
}

impl MixturePosterior {
    /// Posterior component weights `∝ π_c · p_c(v)`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[PosteriorSummary] {
        &self.components
    }

    /// Total mean and covariance of the mixture.
    pub fn summary(&self) -> &PosteriorSummary {
        &self.summary
    }

    pub fn sample(&self, stream: &mut Stream) -> ImageGrid {
        let samplers = self.samplers.get_or_init(|| {
            self.components.iter().map(|c| GaussianSampler::new(c.mean(), c.cov()).expect("posterior shape")).collect()
        });
        let c = pick(&self.weights, stream.uniform());
        samplers[c].sample(stream)
    }
}

/// Exact mixture posterior. Component weights are combined in the log
/// domain; zero-weight components are skipped.
pub fn gmm_posterior_mixture(prior: &GmmPrior, observations: &[Observation]) -> Result<MixturePosterior> {
    let (sensors, values) = split(observations);
    let mut log_w = Vec::with_capacity(prior.components.len());
    let mut components = Vec::with_capacity(prior.components.len());
    for (w, c) in prior.weights.iter().zip(&prior.components) {
        if *w == 0.0 {
            log_w.push(f64::NEG_INFINITY);
            components.push(PosteriorSummary::new(c.mean.clone(), c.cov.clone())?);
            continue;
        }
        if observations.is_empty() {
            log_w.push(w.ln());
            components.push(PosteriorSummary::new(c.mean.clone(), c.cov.clone())?);
            continue;
        }
        let cond = GaussianConditioner::new(c, &sensors)?;
        log_w.push(w.ln() + cond.log_evidence(&values)?);
        components.push(cond.condition(&values)?);
    }
    let top = log_w.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::EvidenceUnderflow);
    }
    let raw: Vec<f64> = log_w.iter().map(|l| if l.is_finite() { (l - top).exp() } else { 0.0 }).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();

    let (h, w) = prior.shape();
    let n = h * w;
    let mut mean = vec![0.0; n];
    for (pw, c) in weights.iter().zip(&components) {
        if *pw > 0.0 {
            for (m, x) in mean.iter_mut().zip(c.mean.data()) {
                *m += pw * x;
            }
        }
    }
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for (pw, c) in weights.iter().zip(&components) {
        if *pw > 0.0 {
            let d = DVector::from_iterator(n, c.mean.data().iter().zip(&mean).map(|(a, b)| a - b));
            cov += (c.cov.as_nalgebra() + &d * d.transpose()) * *pw;
        }
    }
    let summary = PosteriorSummary::new(ImageGrid::new(h, w, mean)?, DenseMatrix::from_nalgebra(cov))?;
    Ok(MixturePosterior { weights, components, summary, samplers: OnceLock::new() })
}

/// Exact mean and covariance of the mixture posterior.
pub fn gmm_posterior(prior: &GmmPrior, observations: &[Observation]) -> Result<PosteriorSummary> {
    Ok(gmm_posterior_mixture(prior, observations)?.summary)
}

/// Importance-sampling estimate of posterior moments.
#[derive(Clone, Debug)]
pub struct McPosterior {
    pub summary: PosteriorSummary,
    /// Kish effective sample size `(Σw)²/Σw²`.
    pub ess: f64,
    /// Batch-means standard errors of the mean and of the marginal variances.
    pub mean_se: ImageGrid,
    pub diag_se: ImageGrid,
    /// Set when the effective sample size is below [`MIN_RELIABLE_ESS`].
    pub unreliable: bool,
}

pub const MIN_RELIABLE_ESS: f64 = 50.0;
pub const MIN_MC_SAMPLES: usize = 1000;
const MC_BATCHES: usize = 64;

/// Weighted sums relative to `exp(top)`.
#[derive(Clone, Debug)]
struct WeightedSums {
    top: f64,
    sw: f64,
    sw2: f64,
    swu: Vec<f64>,
    swuu: Vec<f64>,
}

impl WeightedSums {
    fn empty(n: usize) -> Self {
        Self { top: f64::NEG_INFINITY, sw: 0.0, sw2: 0.0, swu: vec![0.0; n], swuu: vec![0.0; n * n] }
    }

    fn rescale(&mut self, top: f64) {
        if top == self.top {
            return;
        }
        let f = if self.top == f64::NEG_INFINITY { 0.0 } else { (self.top - top).exp() };
        self.sw *= f;
        self.sw2 *= f * f;
        self.swu.iter_mut().for_each(|v| *v *= f);
        self.swuu.iter_mut().for_each(|v| *v *= f);
        self.top = top;
    }

    fn push(&mut self, log_w: f64, u: &[f64]) {
        if log_w > self.top {
            self.rescale(log_w);
        }
        let w = (log_w - self.top).exp();
        self.sw += w;
        self.sw2 += w * w;
        let n = u.len();
        for i in 0..n {
            self.swu[i] += w * u[i];
            for j in 0..n {
                self.swuu[i * n + j] += w * u[i] * u[j];
            }
        }
    }

    fn merge(&mut self, other: &Self) {
        let mut other = other.clone();
        let top = self.top.max(other.top);
        self.rescale(top);
        other.rescale(top);
        self.sw += other.sw;
        self.sw2 += other.sw2;
        self.swu.iter_mut().zip(&other.swu).for_each(|(a, b)| *a += b);
        self.swuu.iter_mut().zip(&other.swuu).for_each(|(a, b)| *a += b);
    }

    fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.swu.len();
        let mean: Vec<f64> = self.swu.iter().map(|v| v / self.sw).collect();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = self.swuu[i * n + j] / self.sw - mean[i] * mean[j];
            }
        }
        (mean, cov)
    }
}

/// Self-normalized importance sampling with the prior as proposal.
///
/// Samples are split into 64 fixed batches; batch `b` draws from stream
/// `b` of `seed` and batches are reduced in order, so the result does not
/// depend on the number of worker threads. Standard errors come from the
/// spread of the per-batch estimates.
pub fn mc_posterior<F>(sampler: F, observations: &[Observation], n_samples: usize, seed: u64) -> Result<McPosterior>
where
    F: Fn(&mut Stream) -> ImageGrid + Sync,
{
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidParameter(format!("need at least {MIN_MC_SAMPLES} samples, got {n_samples}")));
    }
    let shape = sampler(&mut Stream::substream(seed, u64::MAX)).shape();
    let n = shape.0 * shape.1;
    let batches: Vec<Result<WeightedSums>> = (0..MC_BATCHES)
        .into_par_iter()
        .map(|b| {
            let lo = b * n_samples / MC_BATCHES;
            let hi = (b + 1) * n_samples / MC_BATCHES;
            let mut stream = Stream::substream(seed, b as u64);
            let mut acc = WeightedSums::empty(n);
            for _ in lo..hi {
                let u = sampler(&mut stream);
                if u.shape() != shape {
                    return Err(Error::ShapeMismatch { expected: shape, got: u.shape() });
                }
                let mut lw = 0.0;
                for o in observations {
                    lw += o.log_likelihood(&u)?;
                }
                acc.push(lw, u.data());
            }
            Ok(acc)
        })
        .collect();
    let batches = batches.into_iter().collect::<Result<Vec<_>>>()?;

    let mut total = WeightedSums::empty(n);
    for b in &batches {
        total.merge(b);
    }
    if !(total.sw > 0.0) {
        return Err(Error::EvidenceUnderflow);
    }
    let (mean, cov) = total.moments();
    let mut mean_sq = vec![0.0; n];
    let mut diag_sq = vec![0.0; n];
    let mut mean_avg = vec![0.0; n];
    let mut diag_avg = vec![0.0; n];
    let per_batch: Vec<(Vec<f64>, Vec<f64>)> = batches
        .iter()
        .map(|b| {
            let (m, c) = b.moments();
            (m, (0..n).map(|i| c[i * n + i]).collect())
        })
        .collect();
    let nb = per_batch.len() as f64;
    for (m, d) in &per_batch {
        for i in 0..n {
            mean_avg[i] += m[i] / nb;
            diag_avg[i] += d[i] / nb;
        }
    }
    for (m, d) in &per_batch {
        for i in 0..n {
            mean_sq[i] += (m[i] - mean_avg[i]).powi(2);
            diag_sq[i] += (d[i] - diag_avg[i]).powi(2);
        }
    }
    let se = |sq: &[f64]| -> Result<ImageGrid> {
        ImageGrid::new(shape.0, shape.1, sq.iter().map(|s| (s / (nb - 1.0) / nb).sqrt()).collect())
    };
    let ess = total.sw * total.sw / total.sw2;
    let summary = PosteriorSummary::new(
        ImageGrid::new(shape.0, shape.1, mean)?,
        DenseMatrix::from_row_major(n, n, &cov)?,
    )?;
    Ok(McPosterior { summary, ess, mean_se: se(&mean_sq)?, diag_se: se(&diag_sq)?, unreliable: ess < MIN_RELIABLE_ESS })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{MatrixOperator, ShiftSubsample, TranslateSubsample};
    use crate::grid::SubgridId;

    fn shift_sensor(h: usize, w: usize, tau: SubgridId, noise: f64) -> Sensor {
        let op = ShiftSubsample::new(tau, h, w).unwrap();
        Sensor::new(Arc::new(op), ImageGrid::filled(h / 2, w / 2, noise)).unwrap()
    }

    fn random_prior(h: usize, w: usize, s: &mut Stream) -> GaussianPrior {
        let n = h * w;
        let b = DenseMatrix::from_fn(n, n, |_, _| s.normal());
        let cov = b.matmul(&b.transpose()).unwrap().scaled(1.0 / n as f64).add(&DenseMatrix::identity(n).scaled(0.1)).unwrap();
        GaussianPrior::new(ImageGrid::from_fn(h, w, |_, _| s.normal()), cov).unwrap()
    }

    fn eigenvalues(m: &DenseMatrix) -> Vec<f64> {
        SymmetricEigen::new(m.symmetrized().as_nalgebra().clone()).eigenvalues.as_slice().to_vec()
    }

    #[test]
    fn scalar_conjugate_update() {
        let prior = GaussianPrior::diagonal(ImageGrid::zeros(4, 4), &ImageGrid::filled(4, 4, 1.0)).unwrap();
        let z = ImageGrid::new(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let obs = Observation::new(shift_sensor(4, 4, SubgridId::EVEN, 1.0), z.clone()).unwrap();
        let post = gaussian_posterior(&prior, &[obs]).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                if r % 2 == 0 && c % 2 == 0 {
                    assert!((post.mean().get(r, c) - z.get(r / 2, c / 2) / 2.0).abs() < 1e-14);
                    assert!((post.diag().get(r, c) - 0.5).abs() < 1e-14);
                } else {
                    assert!(post.mean().get(r, c).abs() < 1e-14);
                    assert!((post.diag().get(r, c) - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn no_observations_returns_prior() {
        let prior = random_prior(2, 2, &mut Stream::new(1));
        let post = gaussian_posterior(&prior, &[]).unwrap();
        assert_eq!(post.mean(), prior.mean());
        assert_eq!(post.cov(), prior.cov());
    }

    #[test]
    fn gaussian_matches_importance_sampling() {
        let mut s = Stream::new(2);
        let prior = random_prior(2, 2, &mut s);
        let u = prior.sample(&mut s);
        let obs: Vec<Observation> = [SubgridId::EVEN, SubgridId::new(1, 1).unwrap()]
            .iter()
            .map(|&t| shift_sensor(2, 2, t, 0.5).observe(&u, &mut s).unwrap())
            .collect();
        let exact = gaussian_posterior(&prior, &obs).unwrap();
        let mc = mc_posterior(|st| prior.sample(st), &obs, 1_000_000, 7).unwrap();
        assert!(!mc.unreliable);
        for k in 0..4 {
            let dm = (mc.summary.mean().data()[k] - exact.mean().data()[k]).abs();
            let dv = (mc.summary.diag().data()[k] - exact.diag().data()[k]).abs();
            assert!(dm <= 3.0 * mc.mean_se.data()[k], "mean {k}: {dm} vs se {}", mc.mean_se.data()[k]);
            assert!(dv <= 3.0 * mc.diag_se.data()[k], "var {k}: {dv} vs se {}", mc.diag_se.data()[k]);
        }
    }

    #[test]
    fn posterior_shrinks_covariance() {
        let mut s = Stream::new(3);
        for _ in 0..10 {
            let prior = random_prior(4, 4, &mut s);
            let u = prior.sample(&mut s);
            let mut obs = Vec::new();
            let mut last = prior.cov().diagonal();
            for tau in SubgridId::ALL {
                obs.push(shift_sensor(4, 4, tau, 0.3).observe(&u, &mut s).unwrap());
                let post = gaussian_posterior(&prior, &obs).unwrap();
                let gap = prior.cov().sub(post.cov()).unwrap();
                assert!(eigenvalues(&gap).iter().all(|&e| e >= -1e-10));
                let diag = post.cov().diagonal();
                assert!(diag.iter().zip(&last).all(|(a, b)| *a <= b + 1e-12));
                last = diag;
            }
        }
    }

    #[test]
    fn stationary_prior_is_valid_and_stationary() {
        let p = GaussianPrior::stationary_exponential(4, 6, 0.5, 2.0, 1.5, 0.01).unwrap();
        assert!(eigenvalues(p.cov()).iter().all(|&e| e > 0.0));
        // translation invariance on the torus
        let w = 6;
        let c = |r0: usize, c0: usize, r1: usize, c1: usize| p.cov().get(r0 * w + c0, r1 * w + c1);
        assert!((c(0, 0, 1, 2) - c(3, 5, 0, 1)).abs() < 1e-14);
        assert!((c(0, 0, 0, 0) - 2.01).abs() < 1e-14);
        assert!(GaussianPrior::stationary_exponential(2, 2, 0.0, -1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn reference_frame_lowers_even_subgrid_variance() {
        let prior = GaussianPrior::stationary_exponential(8, 8, 0.0, 1.0, 2.0, 1e-3).unwrap();
        let mut sensors = vec![shift_sensor(8, 8, SubgridId::EVEN, 0.05)];
        for shift in [(0, 0), (0, -1), (-1, 0), (-1, -1)] {
            let op = TranslateSubsample::new(8, 8, shift, 1.0).unwrap();
            sensors.push(Sensor::new(Arc::new(op), ImageGrid::filled(4, 4, 0.05)).unwrap());
        }
        let cond = GaussianConditioner::new(&prior, &sensors).unwrap();
        let diag = cond.cov().diagonal();
        let mean_of = |tau: SubgridId| {
            crate::grid::subgrid_indices(8, 8, tau).iter().map(|&k| diag[k]).sum::<f64>() / 16.0
        };
        let even = mean_of(SubgridId::EVEN);
        for tau in &SubgridId::ALL[1..] {
            assert!(even < mean_of(*tau));
        }
    }

    #[test]
    fn conditioner_is_affine_in_values() {
        let mut s = Stream::new(4);
        let prior = random_prior(4, 4, &mut s);
        let sensors = vec![shift_sensor(4, 4, SubgridId::EVEN, 0.2), shift_sensor(4, 4, SubgridId::new(0, 1).unwrap(), 0.4)];
        let cond = GaussianConditioner::new(&prior, &sensors).unwrap();
        let a = ImageGrid::from_fn(2, 2, |_, _| s.normal());
        let b = ImageGrid::from_fn(2, 2, |_, _| s.normal());
        let mean = cond.mean(&[&a, &b]).unwrap();
        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let via_gain: Vec<f64> =
            cond.gain().matvec(&stacked).iter().zip(cond.offset()).map(|(x, o)| x + o).collect();
        for (x, y) in mean.data().iter().zip(&via_gain) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn scalar_prior(mean: f64, var: f64) -> GaussianPrior {
        GaussianPrior::new(ImageGrid::filled(1, 1, mean), DenseMatrix::from_diagonal(&[var])).unwrap()
    }

    fn scalar_obs(value: f64, noise: f64) -> Observation {
        let sensor = Sensor::new(Arc::new(MatrixOperator::identity(1, 1)), ImageGrid::filled(1, 1, noise)).unwrap();
        Observation::new(sensor, ImageGrid::filled(1, 1, value)).unwrap()
    }

    #[test]
    fn identical_components_reduce_to_gaussian() {
        let mut s = Stream::new(5);
        let c = random_prior(2, 2, &mut s);
        let gmm = GmmPrior::new(vec![0.3, 0.7], vec![c.clone(), c.clone()]).unwrap();
        let u = c.sample(&mut s);
        let obs = vec![shift_sensor(2, 2, SubgridId::EVEN, 0.1).observe(&u, &mut s).unwrap()];
        let a = gmm_posterior(&gmm, &obs).unwrap();
        let b = gaussian_posterior(&c, &obs).unwrap();
        assert!(a.mean().zip_map(b.mean(), |x, y| x - y).unwrap().max_abs() < 1e-12);
        assert!(a.cov().sub(b.cov()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn symmetric_mixture() {
        let gmm = GmmPrior::new(vec![0.5, 0.5], vec![scalar_prior(-2.0, 0.5), scalar_prior(2.0, 0.5)]).unwrap();
        let post = gmm_posterior(&gmm, &[scalar_obs(0.0, 1.0)]).unwrap();
        assert!(post.mean().data()[0].abs() < 1e-15);
        // each component posterior: var 1/3, mean ±4/3
        let within = 1.0 / 3.0;
        let between = (4.0f64 / 3.0).powi(2);
        assert!((post.diag().data()[0] - (within + between)).abs() < 1e-14);
    }

    #[test]
    fn mixture_matches_importance_sampling() {
        let gmm = GmmPrior::new(vec![0.3, 0.7], vec![scalar_prior(-1.0, 0.4), scalar_prior(1.5, 0.9)]).unwrap();
        let obs = vec![scalar_obs(0.4, 0.5)];
        let exact = gmm_posterior(&gmm, &obs).unwrap();
        let mc = mc_posterior(|s| gmm.sample(s), &obs, 1_000_000, 11).unwrap();
        let dm = (mc.summary.mean().data()[0] - exact.mean().data()[0]).abs();
        let dv = (mc.summary.diag().data()[0] - exact.diag().data()[0]).abs();
        assert!(dm <= 3.0 * mc.mean_se.data()[0]);
        assert!(dv <= 3.0 * mc.diag_se.data()[0]);
    }

    #[test]
    fn unit_weight_selects_first_component_exactly() {
        let mut s = Stream::new(6);
        let a = random_prior(2, 2, &mut s);
        let b = random_prior(2, 2, &mut s);
        let gmm = GmmPrior::new(vec![1.0, 0.0], vec![a.clone(), b]).unwrap();
        let u = a.sample(&mut s);
        let obs = vec![shift_sensor(2, 2, SubgridId::EVEN, 0.2).observe(&u, &mut s).unwrap()];
        assert_eq!(gmm_posterior(&gmm, &obs).unwrap(), gaussian_posterior(&a, &obs).unwrap());
    }

    #[test]
    fn mixture_validation() {
        let c = scalar_prior(0.0, 1.0);
        assert!(GmmPrior::new(vec![1.0], vec![c.clone()]).is_err());
        assert!(GmmPrior::new(vec![0.5, 0.6], vec![c.clone(), c.clone()]).is_err());
        assert!(GmmPrior::new(vec![-0.5, 1.5], vec![c.clone(), c]).is_err());
    }

    #[test]
    fn mixture_evidence_in_log_domain() {
        // evidences around exp(-5e5) would underflow without max-subtraction
        let gmm = GmmPrior::new(vec![0.5, 0.5], vec![scalar_prior(0.0, 1e-6), scalar_prior(1.0, 1e-6)]).unwrap();
        let post = gmm_posterior(&gmm, &[scalar_obs(1000.0, 1e-3)]).unwrap();
        assert!(post.mean().data()[0].is_finite());
        assert!(post.mean().data()[0] > 0.5);
    }

    #[test]
    fn mc_rejects_small_samples_and_zero_noise() {
        let prior = scalar_prior(0.0, 1.0);
        assert!(mc_posterior(|s| prior.sample(s), &[scalar_obs(0.0, 1.0)], 10, 0).is_err());
        let sensor = Sensor::new(Arc::new(MatrixOperator::identity(1, 1)), ImageGrid::filled(1, 1, 0.0));
        assert!(matches!(sensor, Err(Error::NonPositiveVariance { .. })));
    }

    #[test]
    fn mc_flags_low_effective_sample_size() {
        let prior = scalar_prior(0.0, 1.0);
        let mc = mc_posterior(|s| prior.sample(s), &[scalar_obs(3.0, 1e-6)], 1000, 3).unwrap();
        assert!(mc.unreliable);
        assert!(mc.ess < MIN_RELIABLE_ESS);
    }

    #[test]
    fn mc_is_deterministic() {
        let prior = scalar_prior(0.0, 1.0);
        let obs = [scalar_obs(0.3, 0.5)];
        let a = mc_posterior(|s| prior.sample(s), &obs, 5000, 9).unwrap();
        let b = mc_posterior(|s| prior.sample(s), &obs, 5000, 9).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.ess, b.ess);
    }

    #[test]
    fn mc_standard_error_scaling() {
        let prior = scalar_prior(0.0, 1.0);
        let obs = [scalar_obs(0.3, 0.5)];
        let mut ratio = 0.0;
        for rep in 0..50 {
            let small = mc_posterior(|s| prior.sample(s), &obs, 8_000, 1000 + rep).unwrap();
            let large = mc_posterior(|s| prior.sample(s), &obs, 16_000, 2000 + rep).unwrap();
            ratio += small.mean_se.data()[0] / large.mean_se.data()[0] / 50.0;
        }
        let target = 2f64.sqrt();
        assert!((ratio - target).abs() <= 0.2 * target, "ratio {ratio}");
    }
}
