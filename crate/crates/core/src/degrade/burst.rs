//! Synthetic multi-exposure bursts.
//!
//! Each frame is a randomly translated, ×2 subsampled and exposure-scaled
//! copy of the HR image plus noise. Frame 0 is the reference: it is never
//! shifted. Random draws come from sub-streams of the configured seed:
//! stream 0 for the burst geometry and noise level, stream `1 + t` for the
//! noise of frame `t`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::noise::{sample_noise_with, NoiseModel};
use super::warp::warp_translate;
use crate::error::{Error, Result};
use crate::grid::raster::{read_raster, write_raster};
use crate::grid::{subgrid_extract, ImageGrid, SubgridId};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct BurstConfig {
    /// Frames including the reference.
    pub n_frames: usize,
    pub hr_height: usize,
    pub hr_width: usize,
    /// Exposure base: `e_t = gamma^{c_t}`.
    pub gamma: f64,
    /// Inclusive range of the integer exponent `c_t`.
    pub exposure_exponent_range: (i64, i64),
    /// Range of the per-burst noise standard deviation, in 8-bit units.
    pub awgn_sigma_range: (f64, f64),
    /// Shifts are uniform in `[-max_shift, max_shift]` per axis (pixels).
    pub max_shift: f64,
    /// Replaces the AWGN drawn from `awgn_sigma_range` when set.
    pub noise_override: Option<NoiseModel>,
    pub seed: u64,
}

impl Default for BurstConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            hr_height: 32,
            hr_width: 32,
            gamma: 1.3,
            exposure_exponent_range: (-5, 5),
            awgn_sigma_range: (5.0, 18.0),
            max_shift: 2.0,
            noise_override: None,
            seed: 0,
        }
    }
}

impl BurstConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_frames < 2 {
            return bad(format!("n_frames = {} (need a reference and at least one input)", self.n_frames));
        }
        if self.hr_height == 0 || self.hr_width == 0 || self.hr_height % 2 != 0 || self.hr_width % 2 != 0 {
            return Err(Error::Dimension(format!(
                "HR shape {}x{} must be even and non-empty",
                self.hr_height, self.hr_width
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 1.0) {
            return bad(format!("gamma = {} must be > 1", self.gamma));
        }
        let (lo, hi) = self.exposure_exponent_range;
        if lo > hi {
            return bad(format!("exposure exponent range [{lo}, {hi}] is empty"));
        }
        let (slo, shi) = self.awgn_sigma_range;
        if !(slo.is_finite() && shi.is_finite() && 0.0 <= slo && slo <= shi) {
            return bad(format!("sigma range [{slo}, {shi}] is invalid"));
        }
        if !(self.max_shift.is_finite() && self.max_shift >= 0.0) {
            return bad(format!("max_shift = {} must be >= 0", self.max_shift));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Burst {
    pub frames: Vec<ImageGrid>,
    pub exposures: Vec<f64>,
    /// HR-pixel translation of each frame; the reference has `(0, 0)`.
    pub shifts: Vec<(f64, f64)>,
    pub reference_index: usize,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl Burst {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reference(&self) -> &ImageGrid {
        &self.frames[self.reference_index]
    }

    /// Frames divided by their exposure.
    pub fn normalized_frames(&self) -> Vec<ImageGrid> {
        self.frames.iter().zip(&self.exposures).map(|(f, &e)| f.scaled(1.0 / e)).collect()
    }
}

/// Frame `t` of a burst: `e · D(warp(u, shift)) + n`, with noise drawn from
/// `stream`.
pub fn render_frame(u: &ImageGrid, shift: (f64, f64), exposure: f64, noise: &NoiseModel, stream: &mut Stream) -> Result<ImageGrid> {
    let clean = subgrid_extract(&warp_translate(u, shift), SubgridId::EVEN)?.scaled(exposure);
    Ok(sample_noise_with(&clean, noise, stream))
}

pub fn simulate_burst(u: &ImageGrid, cfg: &BurstConfig) -> Result<Burst> {
    cfg.validate()?;
    u.ensure_shape((cfg.hr_height, cfg.hr_width))?;

    let mut geometry = Stream::substream(cfg.seed, 0);
    let sigma = geometry.uniform_range(cfg.awgn_sigma_range.0, cfg.awgn_sigma_range.1) / 255.0;
    let noise = match cfg.noise_override {
        Some(model) => model,
        None => NoiseModel::awgn(sigma)?,
    };

    let (lo, hi) = cfg.exposure_exponent_range;
    let mut shifts = Vec::with_capacity(cfg.n_frames);
    let mut exposures = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        let shift = if t == 0 {
            (0.0, 0.0)
        } else {
            (
                geometry.uniform_range(-cfg.max_shift, cfg.max_shift),
                geometry.uniform_range(-cfg.max_shift, cfg.max_shift),
            )
        };
        let c = geometry.int_inclusive(lo, hi);
        shifts.push(shift);
        exposures.push(cfg.gamma.powi(c as i32));
    }

    let frames = (0..cfg.n_frames)
        .map(|t| render_frame(u, shifts[t], exposures[t], &noise, &mut Stream::substream(cfg.seed, 1 + t as u64)))
        .collect::<Result<Vec<_>>>()?;

    Ok(Burst { frames, exposures, shifts, reference_index: 0, noise, seed: cfg.seed })
}

fn frame_file(stem: &str, t: usize) -> String {
    format!("{stem}_frame{t:03}.raw")
}

/// Writes one raster per frame and a `<stem>.manifest` text file next to
/// them.
pub fn write_burst(dir: &Path, stem: &str, burst: &Burst) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "seed={}", burst.seed).unwrap();
    writeln!(manifest, "noise_a={:e}", burst.noise.gain()).unwrap();
    writeln!(manifest, "noise_b={:e}", burst.noise.floor()).unwrap();
    writeln!(manifest, "reference_index={}", burst.reference_index).unwrap();
    for (t, frame) in burst.frames.iter().enumerate() {
        let name = frame_file(stem, t);
        write_raster(&dir.join(&name), frame)?;
        writeln!(
            manifest,
            "frame={name} exposure={:e} shift_row={:e} shift_col={:e}",
            burst.exposures[t], burst.shifts[t].0, burst.shifts[t].1
        )
        .unwrap();
    }
    fs::write(dir.join(format!("{stem}.manifest")), manifest)?;
    Ok(())
}

pub fn read_burst(dir: &Path, stem: &str) -> Result<Burst> {
    let path = dir.join(format!("{stem}.manifest"));
    let text = fs::read_to_string(&path)?;
    let bad = |reason: String| Error::Format { path: path.clone(), reason };

    let mut seed = None;
    let (mut a, mut b) = (None, None);
    let mut reference_index = 0;
    let (mut frames, mut exposures, mut shifts) = (Vec::new(), Vec::new(), Vec::new());
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {lineno}: bad number `{s}`")));
        if let Some(rest) = line.strip_prefix("frame=") {
            let mut fields = rest.split_whitespace();
            let name = fields.next().ok_or_else(|| bad(format!("line {lineno}: missing file")))?;
            let mut exposure = None;
            let mut shift = (None, None);
            for field in fields {
                match field.split_once('=') {
                    Some(("exposure", v)) => exposure = Some(num(v)?),
                    Some(("shift_row", v)) => shift.0 = Some(num(v)?),
                    Some(("shift_col", v)) => shift.1 = Some(num(v)?),
                    _ => return Err(bad(format!("line {lineno}: unknown field `{field}`"))),
                }
            }
            let missing = || bad(format!("line {lineno}: incomplete frame entry"));
            frames.push(read_raster(&dir.join(name))?);
            exposures.push(exposure.ok_or_else(missing)?);
            shifts.push((shift.0.ok_or_else(missing)?, shift.1.ok_or_else(missing)?));
            continue;
        }
        match line.split_once('=') {
            Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|_| bad(format!("line {lineno}: bad seed")))?),
            Some(("noise_a", v)) => a = Some(num(v)?),
            Some(("noise_b", v)) => b = Some(num(v)?),
            Some(("reference_index", v)) => {
                reference_index = v.parse().map_err(|_| bad(format!("line {lineno}: bad reference index")))?
            }
            _ if line.trim().is_empty() => {}
            _ => return Err(bad(format!("line {lineno}: unrecognized `{line}`"))),
        }
    }
    let noise = NoiseModel::new(
        a.ok_or_else(|| bad("missing noise_a".into()))?,
        b.ok_or_else(|| bad("missing noise_b".into()))?,
    )?;
    if reference_index >= frames.len() {
        return Err(bad(format!("reference index {reference_index} out of range")));
    }
    Ok(Burst {
        frames,
        exposures,
        shifts,
        reference_index,
        noise,
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(h: usize, w: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, |r, c| 0.5 + 0.3 * ((r as f64 * 0.7).sin() * (c as f64 * 0.4).cos()))
    }

    fn base_cfg() -> BurstConfig {
        BurstConfig { n_frames: 5, hr_height: 8, hr_width: 10, seed: 77, ..BurstConfig::default() }
    }

    #[test]
    fn exposure_formula() {
        assert!((1.3f64.powi(2) - 1.69).abs() < 1e-12);
    }

    #[test]
    fn degenerate_config_gives_subsampled_copies() {
        let u = scene(8, 10);
        let cfg = BurstConfig {
            max_shift: 0.0,
            exposure_exponent_range: (0, 0),
            noise_override: Some(NoiseModel::noiseless()),
            ..base_cfg()
        };
        let burst = simulate_burst(&u, &cfg).unwrap();
        let expected = subgrid_extract(&u, SubgridId::EVEN).unwrap();
        assert_eq!(burst.len(), 5);
        for f in &burst.frames {
            assert_eq!(f, &expected);
        }
    }

    #[test]
    fn normalized_noiseless_frames_agree() {
        let u = scene(8, 10);
        let cfg = BurstConfig { max_shift: 0.0, noise_override: Some(NoiseModel::noiseless()), ..base_cfg() };
        let burst = simulate_burst(&u, &cfg).unwrap();
        let norm = burst.normalized_frames();
        for f in &norm[1..] {
            let diff = f.zip_map(&norm[0], |a, b| a - b).unwrap();
            assert!(diff.max_abs() < 1e-12);
        }
    }

    #[test]
    fn structure_and_determinism() {
        let u = scene(8, 10);
        let cfg = base_cfg();
        let a = simulate_burst(&u, &cfg).unwrap();
        let b = simulate_burst(&u, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shifts[0], (0.0, 0.0));
        assert_eq!(a.exposures.len(), a.frames.len());
        for &e in &a.exposures {
            let c = (e.ln() / cfg.gamma.ln()).round();
            assert!((-5.0..=5.0).contains(&c));
            assert!((cfg.gamma.powi(c as i32) - e).abs() < 1e-12);
        }
        let sigma = a.noise.floor().sqrt() * 255.0;
        assert!((5.0..=18.0).contains(&sigma));
        let other = simulate_burst(&u, &BurstConfig { seed: 78, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn rejects_bad_configs() {
        let u = scene(8, 10);
        assert!(simulate_burst(&u, &BurstConfig { n_frames: 1, ..base_cfg() }).is_err());
        assert!(simulate_burst(&u, &BurstConfig { gamma: 1.0, ..base_cfg() }).is_err());
        assert!(simulate_burst(&u, &BurstConfig { hr_height: 7, ..base_cfg() }).is_err());
        assert!(simulate_burst(&scene(6, 10), &base_cfg()).is_err());
    }

    #[test]
    fn serialization_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let burst = simulate_burst(&scene(8, 10), &base_cfg()).unwrap();
        write_burst(dir.path(), "b0", &burst).unwrap();
        let back = read_burst(dir.path(), "b0").unwrap();
        assert_eq!(back, burst);
    }
}
