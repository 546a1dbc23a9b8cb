//! Linear-Gaussian synthetic bursts with a fixed acquisition geometry,
//! together with their exact posterior.
//!
//! Every burst shares the same integer HR shifts and exposures, and the
//! frame noise is homoscedastic, so `E[u|v]` is one affine map of the
//! exposure-normalized frames and `Σ(v)` is the same for every burst.

use std::sync::Arc;

use rayon::prelude::*;

use crate::degrade::{sample_noise_with, NoiseModel, ShiftSubsample, TranslateSubsample};
use crate::error::{Error, Result};
use crate::grid::{subgrid_extract, ImageGrid, SubgridId};
use crate::optim::TrainingSample;
use crate::posterior::{GaussianConditioner, GaussianPrior, Sensor};
use crate::rng::Stream;

/// One input frame: `v_t = e_t·(A_t u) + n_t` with `A_t` an integer HR
/// translation by `shift` followed by ×2 subsampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSpec {
    pub shift: (i64, i64),
    pub exposure: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticSetup {
    pub prior: GaussianPrior,
    /// Input frames; the reference frame is not among them.
    pub frames: Vec<FrameSpec>,
    /// Variance of the raw (un-normalized) frame noise.
    pub input_noise_var: f64,
    /// Noise on the reference frame, which serves as the target `z`.
    pub target_noise: NoiseModel,
}

impl SyntheticSetup {
    pub fn new(prior: GaussianPrior, frames: Vec<FrameSpec>, input_noise_var: f64, target_noise: NoiseModel) -> Result<Self> {
        let (h, w) = prior.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("HR shape {h}x{w} must be even")));
        }
        if frames.is_empty() {
            return Err(Error::InvalidParameter("at least one input frame is required".into()));
        }
        if !(input_noise_var > 0.0) || !input_noise_var.is_finite() {
            return Err(Error::InvalidParameter(format!("input noise variance {input_noise_var} must be positive")));
        }
        if let Some(f) = frames.iter().find(|f| !(f.exposure > 0.0) || !f.exposure.is_finite()) {
            return Err(Error::InvalidParameter(format!("exposure {} must be positive", f.exposure)));
        }
        Ok(Self { prior, frames, input_noise_var, target_noise })
    }

    pub fn hr_shape(&self) -> (usize, usize) {
        self.prior.shape()
    }

    pub fn lr_shape(&self) -> (usize, usize) {
        let (h, w) = self.hr_shape();
        (h / 2, w / 2)
    }

    /// Sensors for the exposure-normalized input frames `v_t / e_t`, whose
    /// noise variance is `σ²/e_t²`.
    pub fn input_sensors(&self) -> Result<Vec<Sensor>> {
        let (h, w) = self.hr_shape();
        self.frames
            .iter()
            .map(|f| {
                let op = TranslateSubsample::new(h, w, f.shift, 1.0)?;
                Sensor::new(Arc::new(op), ImageGrid::filled(h / 2, w / 2, self.input_noise_var / (f.exposure * f.exposure)))
            })
            .collect()
    }

    /// The reference frame `D u + n` as a sensor. Needs homoscedastic
    /// target noise (`a = 0`) for the Gaussian oracle to be exact.
    pub fn reference_sensor(&self) -> Result<Sensor> {
        if self.target_noise.gain() != 0.0 || self.target_noise.is_noiseless() {
            return Err(Error::InvalidParameter(
                "conditioning on the reference frame needs homoscedastic, non-zero target noise".into(),
            ));
        }
        let (h, w) = self.hr_shape();
        let op = ShiftSubsample::new(SubgridId::EVEN, h, w)?;
        Sensor::new(Arc::new(op), ImageGrid::filled(h / 2, w / 2, self.target_noise.floor()))
    }

    /// Exact posterior given the input frames, optionally also given the
    /// reference frame.
    pub fn conditioner(&self, include_reference: bool) -> Result<GaussianConditioner> {
        let mut sensors = self.input_sensors()?;
        if include_reference {
            sensors.push(self.reference_sensor()?);
        }
        GaussianConditioner::new(&self.prior, &sensors)
    }

    /// One burst: `u` from the prior, normalized input frames, and one
    /// independently noisy target per subgrid.
    pub fn draw(&self, stream: &mut Stream) -> Result<TrainingSample> {
        let u = self.prior.sample(stream);
        let (h, w) = self.hr_shape();
        let sigma = self.input_noise_var.sqrt();
        let mut inputs = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let op = TranslateSubsample::new(h, w, f.shift, f.exposure)?;
            let clean = crate::degrade::LinearOperator::apply(&op, &u)?;
            let noisy = clean.map(|s| s + sigma * stream.normal());
            inputs.push(noisy.scaled(1.0 / f.exposure));
        }
        let mut targets = Vec::with_capacity(4);
        for tau in SubgridId::ALL {
            let clean = subgrid_extract(&u, tau)?;
            targets.push(sample_noise_with(&clean, &self.target_noise, stream));
        }
        TrainingSample::new(inputs, targets, u)
    }

    /// `n` bursts; burst `i` draws from stream `i` of `seed`.
    pub fn dataset(&self, n: usize, seed: u64) -> Result<Vec<TrainingSample>> {
        (0..n)
            .into_par_iter()
            .map(|i| self.draw(&mut Stream::substream(seed, i as u64)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect()
    }
}

/// How input-frame shift parities are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParityMode {
    /// Frame `t` lands on subgrid `t mod 4`.
    Balanced,
    /// Each frame lands on a uniformly random subgrid.
    Uniform,
}

/// Draws a random acquisition geometry per burst: shifts, exposures
/// `γ^c` with `γ` uniform on `gamma` and integer `c` uniform on
/// `exponent`, and a reference frame with its own exposure whose
/// normalized noise `σ²/e_ref²` becomes the target noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometrySampler {
    pub frames: usize,
    pub gamma: (f64, f64),
    pub exponent: (i64, i64),
    pub max_even: i64,
    pub parity: ParityMode,
    pub input_noise_var: f64,
}

impl GeometrySampler {
    pub fn sample(&self, prior: &GaussianPrior, stream: &mut Stream) -> Result<SyntheticSetup> {
        if !(self.gamma.0 > 0.0 && self.gamma.0 <= self.gamma.1) || self.exponent.0 > self.exponent.1 {
            return Err(Error::InvalidParameter("empty exposure range".into()));
        }
        let gamma = stream.uniform_range(self.gamma.0, self.gamma.1);
        let reference = random_exposure(gamma, self.exponent, stream);
        let shifts = match self.parity {
            ParityMode::Balanced => parity_balanced_shifts(self.frames, self.max_even, stream),
            ParityMode::Uniform => (0..self.frames)
                .map(|_| {
                    let tau = SubgridId::from_index(stream.index(4));
                    let dy = 2 * stream.int_inclusive(-self.max_even, self.max_even) - tau.row() as i64;
                    let dx = 2 * stream.int_inclusive(-self.max_even, self.max_even) - tau.col() as i64;
                    (dy, dx)
                })
                .collect(),
        };
        let frames = shifts
            .into_iter()
            .map(|shift| FrameSpec { shift, exposure: random_exposure(gamma, self.exponent, stream) })
            .collect();
        let target = NoiseModel::awgn((self.input_noise_var / (reference * reference)).sqrt())?;
        SyntheticSetup::new(prior.clone(), frames, self.input_noise_var, target)
    }
}

/// Per-subgrid averages over a set of bursts, indexed by
/// [`SubgridId::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubgridStats {
    /// Mean oracle posterior variance.
    pub mean_variance: [f64; 4],
    /// Root of the mean squared error of the oracle posterior mean.
    pub rmse: [f64; 4],
}

impl SubgridStats {
    /// True when `τ = (0,0)` is strictly below the other three subgrids in
    /// both statistics.
    pub fn reference_subgrid_smallest(&self) -> bool {
        let even = SubgridId::EVEN.index();
        (0..4).filter(|&i| i != even).all(|i| {
            self.mean_variance[even] < self.mean_variance[i] && self.rmse[even] < self.rmse[i]
        })
    }
}

/// Draws `bursts` bursts, each with its own geometry, conditions on the
/// inputs and (if `include_reference`) on the reference frame, and pools
/// the oracle variances and squared errors per subgrid. Burst `b` uses
/// stream `b` of `seed`.
pub fn subgrid_study(
    prior: &GaussianPrior,
    sampler: &GeometrySampler,
    bursts: usize,
    include_reference: bool,
    seed: u64,
) -> Result<SubgridStats> {
    let (h, w) = prior.shape();
    let per_burst: Vec<Result<([f64; 4], [f64; 4])>> = (0..bursts)
        .into_par_iter()
        .map(|b| {
            let mut stream = Stream::substream(seed, b as u64);
            let setup = sampler.sample(prior, &mut stream)?;
            let sample = setup.draw(&mut stream)?;
            let cond = setup.conditioner(include_reference)?;
            let mut values: Vec<&ImageGrid> = sample.inputs().iter().collect();
            if include_reference {
                values.push(&sample.targets()[SubgridId::EVEN.index()]);
            }
            let mean = cond.mean(&values)?;
            let var = ImageGrid::new(h, w, cond.cov().diagonal())?;
            let sq = mean.zip_map(sample.truth(), |a, b| (a - b).powi(2))?;
            Ok((crate::metrics::subgrid_means(&var)?, crate::metrics::subgrid_means(&sq)?))
        })
        .collect();
    let mut var = [0.0; 4];
    let mut mse = [0.0; 4];
    for r in per_burst {
        let (v, e) = r?;
        for i in 0..4 {
            var[i] += v[i] / bursts as f64;
            mse[i] += e[i] / bursts as f64;
        }
    }
    Ok(SubgridStats { mean_variance: var, rmse: mse.map(f64::sqrt) })
}

/// `n` frames whose shifts cycle through the four subgrid parities, each
/// with a random even offset in `[-2·max_even, 2·max_even]` per axis.
pub fn parity_balanced_shifts(n: usize, max_even: i64, stream: &mut Stream) -> Vec<(i64, i64)> {
    (0..n)
        .map(|i| {
            let tau = SubgridId::from_index(i % 4);
            let dy = 2 * stream.int_inclusive(-max_even, max_even) - tau.row() as i64;
            let dx = 2 * stream.int_inclusive(-max_even, max_even) - tau.col() as i64;
            (dy, dx)
        })
        .collect()
}

/// `γ^c` with `c` uniform on the integer range.
pub fn random_exposure(gamma: f64, range: (i64, i64), stream: &mut Stream) -> f64 {
    gamma.powi(stream.int_inclusive(range.0, range.1) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(frames: usize) -> SyntheticSetup {
        let prior = GaussianPrior::stationary_exponential(4, 4, 0.5, 1.0, 1.5, 1e-3).unwrap();
        let mut s = Stream::new(3);
        let specs = parity_balanced_shifts(frames, 1, &mut s)
            .into_iter()
            .map(|shift| FrameSpec { shift, exposure: random_exposure(1.3, (-5, 5), &mut s) })
            .collect();
        SyntheticSetup::new(prior, specs, 0.01, NoiseModel::awgn(0.05).unwrap()).unwrap()
    }

    #[test]
    fn balanced_shifts_cover_every_parity() {
        let shifts = parity_balanced_shifts(8, 2, &mut Stream::new(1));
        for (i, &(dy, dx)) in shifts.iter().enumerate() {
            let op = TranslateSubsample::new(8, 8, (dy, dx), 1.0).unwrap();
            assert_eq!(op.subgrid(), SubgridId::from_index(i % 4));
            assert!(dy.abs() <= 5 && dx.abs() <= 5);
        }
    }

    #[test]
    fn draws_are_reproducible() {
        let s = setup(4);
        let a = s.dataset(3, 9).unwrap();
        let b = s.dataset(3, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.truth(), y.truth());
            assert_eq!(x.targets(), y.targets());
        }
    }

    #[test]
    fn normalized_noiseless_frames_sample_the_truth() {
        let mut s = setup(4);
        s.input_noise_var = 1e-300;
        s.target_noise = NoiseModel::noiseless();
        let sample = s.draw(&mut Stream::new(4)).unwrap();
        for (f, v) in s.frames.iter().zip(sample.inputs()) {
            let op = TranslateSubsample::new(4, 4, f.shift, 1.0).unwrap();
            let expected = crate::degrade::LinearOperator::apply(&op, sample.truth()).unwrap();
            assert!(v.zip_map(&expected, |a, b| a - b).unwrap().max_abs() < 1e-12);
        }
        for tau in SubgridId::ALL {
            assert_eq!(sample.targets()[tau.index()], subgrid_extract(sample.truth(), tau).unwrap());
        }
    }

    #[test]
    fn subgrid_study_is_reproducible_and_favours_the_reference() {
        let prior = GaussianPrior::stationary_exponential(4, 4, 0.5, 1.0, 1.5, 1e-2).unwrap();
        let sampler = GeometrySampler {
            frames: 8,
            gamma: (1.2, 1.4),
            exponent: (-5, 5),
            max_even: 1,
            parity: ParityMode::Uniform,
            input_noise_var: 0.05,
        };
        let a = subgrid_study(&prior, &sampler, 200, true, 3).unwrap();
        assert_eq!(a, subgrid_study(&prior, &sampler, 200, true, 3).unwrap());
        assert!(a.reference_subgrid_smallest(), "{a:?}");
        let without = subgrid_study(&prior, &sampler, 200, false, 3).unwrap();
        assert!(without.mean_variance[0] > a.mean_variance[0]);
    }

    #[test]
    fn reference_needs_homoscedastic_noise() {
        let mut s = setup(4);
        assert!(s.conditioner(true).is_ok());
        s.target_noise = NoiseModel::new(0.01, 0.001).unwrap();
        assert!(s.conditioner(true).is_err());
        assert!(s.conditioner(false).is_ok());
    }
}
