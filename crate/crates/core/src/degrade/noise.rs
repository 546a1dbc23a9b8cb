use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::Stream;

/// Smallest variance the noise model ever reports.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Signal-dependent Gaussian noise with affine variance `g(s) = a·s + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    a: f64,
    b: f64,
}

impl NoiseModel {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 {
            return Err(Error::InvalidParameter(format!("noise model needs finite a, b >= 0 (got a={a}, b={b})")));
        }
        Ok(Self { a, b })
    }

    /// Homoscedastic noise of standard deviation `sigma`.
    pub fn awgn(sigma: f64) -> Result<Self> {
        Self::new(0.0, sigma * sigma)
    }

    pub fn noiseless() -> Self {
        Self { a: 0.0, b: 0.0 }
    }

    pub fn gain(&self) -> f64 {
        self.a
    }

    pub fn floor(&self) -> f64 {
        self.b
    }

    /// `g(s)`, clamped below at [`VARIANCE_FLOOR`].
    pub fn variance(&self, signal: f64) -> f64 {
        (self.a * signal + self.b).max(VARIANCE_FLOOR)
    }

    /// `dg/ds` where the clamp is inactive, zero otherwise.
    pub fn variance_slope(&self, signal: f64) -> f64 {
        if self.a * signal + self.b > VARIANCE_FLOOR {
            self.a
        } else {
            0.0
        }
    }

    /// Variance of the noise actually drawn at `signal`: `g(s)`, or exactly
    /// 0 for the noiseless model.
    pub fn generative_variance(&self, signal: f64) -> f64 {
        if self.is_noiseless() {
            0.0
        } else {
            self.variance(signal)
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.a == 0.0 && self.b == 0.0
    }
}

pub fn noise_variance(clean: &ImageGrid, model: &NoiseModel) -> ImageGrid {
    clean.map(|s| model.variance(s))
}

/// `clean + ε` with `ε_i ~ N(0, g(clean_i))`, deterministic in `seed`.
pub fn sample_noise(clean: &ImageGrid, model: &NoiseModel, seed: u64) -> ImageGrid {
    sample_noise_with(clean, model, &mut Stream::new(seed))
}

pub fn sample_noise_with(clean: &ImageGrid, model: &NoiseModel, stream: &mut Stream) -> ImageGrid {
    if model.is_noiseless() {
        return clean.clone();
    }
    clean.map(|s| s + model.variance(s).sqrt() * stream.normal())
}
