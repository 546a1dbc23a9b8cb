//! Degradation operators, the signal-dependent noise model and the burst
//! simulator.

mod burst;
mod noise;
mod operator;
mod warp;

pub use burst::{read_burst, render_frame, simulate_burst, write_burst, Burst, BurstConfig};
pub use noise::{noise_variance, sample_noise, sample_noise_with, NoiseModel, VARIANCE_FLOOR};
pub use operator::{
    apply_shift_subsample, apply_shift_subsample_adjoint, LinearOperator, MatrixOperator, ShiftSubsample, TranslateSubsample,
};
pub use warp::warp_translate;
