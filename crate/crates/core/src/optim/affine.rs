//! Amortized affine estimator `v ↦ (W v + b, ν̂)` trained on the empirical
//! self-supervised (or supervised) Gaussian NLL.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::degrade::NoiseModel;
use crate::error::{Error, Result};
use crate::grid::raster::{read_raster, write_raster};
use crate::grid::{subgrid_indices, DenseMatrix, ImageGrid, SubgridId};
use crate::loss::estimate_noise_cov;
use crate::rng::Stream;

/// One burst: exposure-normalized input frames (reference excluded), one
/// noisy reference target per subgrid, and the HR ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    inputs: Vec<ImageGrid>,
    targets: Vec<ImageGrid>,
    truth: ImageGrid,
}

impl TrainingSample {
    pub fn new(inputs: Vec<ImageGrid>, targets: Vec<ImageGrid>, truth: ImageGrid) -> Result<Self> {
        let (h, w) = truth.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("HR shape {h}x{w} must be even")));
        }
        if inputs.is_empty() {
            return Err(Error::InvalidParameter("a sample needs at least one input frame".into()));
        }
        if targets.len() != 4 {
            return Err(Error::InvalidParameter(format!("expected 4 targets, got {}", targets.len())));
        }
        for g in inputs.iter().chain(&targets) {
            g.ensure_shape((h / 2, w / 2))?;
        }
        Ok(Self { inputs, targets, truth })
    }

    pub fn inputs(&self) -> &[ImageGrid] {
        &self.inputs
    }

    /// Targets indexed by [`SubgridId::index`].
    pub fn targets(&self) -> &[ImageGrid] {
        &self.targets
    }

    pub fn truth(&self) -> &ImageGrid {
        &self.truth
    }

    fn stacked(&self) -> impl Iterator<Item = f64> + '_ {
        self.inputs.iter().flat_map(|g| g.data().iter().copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// NLL of a randomly drawn reference subgrid, with `R̂` from the noise model.
    SelfSupervised,
    /// NLL of the HR ground truth.
    Supervised,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SelfSupervised => "selfsup",
            LossKind::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step: f64,
    /// Multiplies the step every `epochs / 3` epochs.
    pub decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub log_variance_floor: f64,
    /// Abort once a batch loss exceeds this.
    pub divergence: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            step: 1e-2,
            decay: 0.5,
            seed: 0,
            loss: LossKind::SelfSupervised,
            log_variance_floor: 1e-12f64.ln(),
            divergence: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("epochs and batch_size must be at least 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter(format!("step {} must be positive", self.step)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidParameter(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        if !self.log_variance_floor.is_finite() || !(self.divergence > 0.0) {
            return Err(Error::InvalidParameter("log_variance_floor and divergence must be finite and positive".into()));
        }
        Ok(())
    }

    fn step_at(&self, epoch: usize) -> f64 {
        let period = (self.epochs / 3).max(1);
        self.step * self.decay.powi((epoch / period) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineEstimator {
    hr_shape: (usize, usize),
    frames: usize,
    /// `4HW × N·HW`, acting on the stacked normalized frames.
    weights: DenseMatrix,
    bias: ImageGrid,
    log_variance: ImageGrid,
    log_variance_floor: f64,
}

impl AffineEstimator {
    pub fn new(weights: DenseMatrix, bias: ImageGrid, log_variance: ImageGrid, frames: usize, log_variance_floor: f64) -> Result<Self> {
        let hr_shape = bias.shape();
        log_variance.ensure_shape(hr_shape)?;
        let n = bias.len();
        if frames == 0 || weights.rows() != n || weights.cols() != frames * n / 4 {
            return Err(Error::Dimension(format!(
                "weights {}x{} do not map {frames} frames onto a {}x{} image",
                weights.rows(),
                weights.cols(),
                hr_shape.0,
                hr_shape.1
            )));
        }
        if weights.max_abs().is_nan() || !bias.all_finite() || !log_variance.all_finite() {
            return Err(Error::NonFinite("affine estimator parameters".into()));
        }
        Ok(Self { hr_shape, frames, weights, bias, log_variance, log_variance_floor })
    }

    pub fn hr_shape(&self) -> (usize, usize) {
        self.hr_shape
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn bias(&self) -> &ImageGrid {
        &self.bias
    }

    pub fn log_variance(&self) -> &ImageGrid {
        &self.log_variance
    }

    /// `ν̂ = exp(max(s, floor))`.
    pub fn variance(&self) -> ImageGrid {
        let floor = self.log_variance_floor;
        self.log_variance.map(|s| super::variance_from_log(s, floor))
    }

    pub fn predict(&self, inputs: &[ImageGrid]) -> Result<ImageGrid> {
        if inputs.len() != self.frames {
            return Err(Error::Dimension(format!("expected {} frames, got {}", self.frames, inputs.len())));
        }
        let (h, w) = self.hr_shape;
        let mut x = Vec::with_capacity(self.weights.cols());
        for g in inputs {
            g.ensure_shape((h / 2, w / 2))?;
            x.extend_from_slice(g.data());
        }
        let mut out = self.weights.matvec(&x);
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        ImageGrid::new(h, w, out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub estimator: AffineEstimator,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Inputs whitened over the dataset: `x̃ = T (x − x̄)`.
struct Whitening {
    center: DVector<f64>,
    transform: DMatrix<f64>,
}

impl Whitening {
    fn fit(x: &DMatrix<f64>) -> Self {
        let m = x.nrows() as f64;
        let center = x.row_mean().transpose();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= center.transpose();
        }
        let cov = centered.transpose() * &centered / m;
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-10 * top && top > 0.0).collect();
        let p = x.ncols();
        let transform = DMatrix::from_fn(keep.len(), p, |r, c| {
            let i = keep[r];
            eig.eigenvectors[(c, i)] / eig.eigenvalues[i].sqrt()
        });
        Self { center, transform }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.center.transpose();
        }
        centered * self.transform.transpose()
    }
}

/// Mini-batch training of an [`AffineEstimator`].
///
/// Parameters are the weights and bias acting on whitened inputs and the
/// log-variance `s`. Each step is a gradient step preconditioned by the
/// per-pixel Fisher information of the batch loss: for pixel `k` touched by
/// samples `i` with `d_i = ν̂_k + R̂_i`, the mean gradient is divided by
/// `Σ_i 1/d_i` and the `s` gradient by `Σ_i ν̂²/(2 d_i²)`. The `s` update is
/// capped at 1 in magnitude. `R̂` comes from the noise model at the current
/// prediction and is held fixed within a step. The subgrid of every sample
/// is redrawn every epoch.
pub fn train_affine(dataset: &[TrainingSample], model: &NoiseModel, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let first = dataset.first().ok_or_else(|| Error::InvalidParameter("empty training set".into()))?;
    let (h, w) = first.truth().shape();
    let frames = first.inputs().len();
    let n = h * w;
    let p = frames * n / 4;
    for s in dataset {
        if s.truth().shape() != (h, w) || s.inputs().len() != frames {
            return Err(Error::Dimension("all bursts must share the same geometry".into()));
        }
    }

    let m = dataset.len();
    let raw = DMatrix::from_row_iterator(m, p, dataset.iter().flat_map(|s| s.stacked()));
    let whitening = Whitening::fit(&raw);
    let x = whitening.apply(&raw);
    let k = x.ncols();

    let tau_pixels: Vec<Vec<usize>> = SubgridId::ALL.iter().map(|&t| subgrid_indices(h, w, t)).collect();
    let mut wt = DMatrix::<f64>::zeros(n, k);
    let mut bias = DVector::<f64>::zeros(n);
    let mut s = DVector::<f64>::zeros(n);
    let floor = cfg.log_variance_floor;
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let every_pixel: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let mut stream = Stream::substream(cfg.seed, epoch as u64);
        let taus: Vec<SubgridId> = (0..m).map(|_| SubgridId::from_index(stream.index(4))).collect();
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            order.swap(i, stream.index(i + 1));
        }
        let eta = cfg.step_at(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let xb = DMatrix::from_fn(b, k, |r, c| x[(batch[r], c)]);
            let mut pred = &xb * wt.transpose();
            for mut row in pred.row_iter_mut() {
                row += bias.transpose();
            }
            let nu: Vec<f64> = s.iter().map(|&v| super::variance_from_log(v, floor)).collect();

            // scaled[i, k] = (û_k − t_k)/d_ik on touched pixels, 0 elsewhere
            let mut scaled = DMatrix::<f64>::zeros(b, n);
            let mut mean_info = vec![0.0; n];
            let mut var_grad = vec![0.0; n];
            let mut var_info = vec![0.0; n];
            let mut loss = 0.0;
            let mut touched = 0usize;
            for (r, &i) in batch.iter().enumerate() {
                let sample = &dataset[i];
                let (pixels, targets, r_hat): (&[usize], &[f64], Option<ImageGrid>) = match cfg.loss {
                    LossKind::Supervised => (&every_pixel, sample.truth().data(), None),
                    LossKind::SelfSupervised => {
                        let tau = taus[i];
                        let mean = ImageGrid::new(h, w, pred.row(r).iter().copied().collect())?;
                        let r_hat = estimate_noise_cov(&mean, tau, model)?.diag().clone();
                        (&tau_pixels[tau.index()], sample.targets()[tau.index()].data(), Some(r_hat))
                    }
                };
                for (l, (&px, &t)) in pixels.iter().zip(targets).enumerate() {
                    let rh = r_hat.as_ref().map_or(0.0, |g| g.data()[l]);
                    let d = nu[px] + rh;
                    let res = pred[(r, px)] - t;
                    scaled[(r, px)] = res / d;
                    mean_info[px] += 1.0 / d;
                    var_grad[px] += 0.5 * nu[px] * (1.0 / d - res * res / (d * d));
                    var_info[px] += 0.5 * nu[px] * nu[px] / (d * d);
                    loss += 0.5 * (res * res / d + d.ln());
                }
                touched += pixels.len();
            }
            let batch_loss = loss / touched as f64;
            if !batch_loss.is_finite() || batch_loss > cfg.divergence {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            batches += 1;

            let grad_w = scaled.transpose() * &xb;
            for px in 0..n {
                if mean_info[px] == 0.0 {
                    continue;
                }
                let scale = eta / mean_info[px];
                let mut row = wt.row_mut(px);
                row -= grad_w.row(px) * scale;
                bias[px] -= scale * scaled.column(px).sum();
                if s[px] >= floor {
                    let ds = (eta * var_grad[px] / var_info[px]).clamp(-1.0, 1.0);
                    s[px] = (s[px] - ds).max(floor);
                }
            }
        }
        loss_trace.push(epoch_loss / batches as f64);
    }

    // fold the whitening back: W = W̃ T, b = b̃ − W̃ T x̄
    let weights = &wt * &whitening.transform;
    let shift = &weights * &whitening.center;
    let bias = ImageGrid::new(h, w, bias.iter().zip(shift.iter()).map(|(b, c)| b - c).collect())?;
    let log_variance = ImageGrid::new(h, w, s.iter().copied().collect())?;
    let estimator = AffineEstimator::new(DenseMatrix::from_nalgebra(weights), bias, log_variance, frames, floor)?;
    Ok(TrainReport { estimator, loss_trace })
}

const WEIGHTS_FILE: &str = "weights.f64";
const BIAS_FILE: &str = "bias.f64";
const LOG_VARIANCE_FILE: &str = "log_variance.f64";
const MANIFEST_FILE: &str = "manifest.txt";

/// Writes the estimator as three rasters plus `manifest.txt`. `extra` lines
/// (for example the training seed and configuration) are appended to the
/// manifest verbatim.
pub fn write_affine(dir: &Path, est: &AffineEstimator, extra: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let wm = est.weights();
    write_raster(&dir.join(WEIGHTS_FILE), &ImageGrid::new(wm.rows(), wm.cols(), wm.to_row_major())?)?;
    write_raster(&dir.join(BIAS_FILE), est.bias())?;
    write_raster(&dir.join(LOG_VARIANCE_FILE), est.log_variance())?;
    let mut manifest = String::new();
    let (h, w) = est.hr_shape();
    writeln!(manifest, "hr_height={h}").unwrap();
    writeln!(manifest, "hr_width={w}").unwrap();
    writeln!(manifest, "frames={}", est.frames()).unwrap();
    writeln!(manifest, "log_variance_floor={:e}", est.log_variance_floor).unwrap();
    for (k, v) in extra {
        writeln!(manifest, "{k}={v}").unwrap();
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn read_affine(dir: &Path) -> Result<AffineEstimator> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    let field = |key: &str| -> Result<&str> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Format { path: path.clone(), reason: format!("missing {key}") })
    };
    let frames: usize = field("frames")?
        .parse()
        .map_err(|_| Error::Format { path: path.clone(), reason: "bad frames".into() })?;
    let floor: f64 = field("log_variance_floor")?
        .parse()
        .map_err(|_| Error::Format { path: path.clone(), reason: "bad log_variance_floor".into() })?;
    let wr = read_raster(&dir.join(WEIGHTS_FILE))?;
    let weights = DenseMatrix::from_row_major(wr.height(), wr.width(), wr.data())?;
    let bias = read_raster(&dir.join(BIAS_FILE))?;
    let log_variance = read_raster(&dir.join(LOG_VARIANCE_FILE))?;
    AffineEstimator::new(weights, bias, log_variance, frames, floor)
}
