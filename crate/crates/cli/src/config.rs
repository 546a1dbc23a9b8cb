//! Strict `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Unknown keys, repeated keys and malformed values are errors that name
//! the offending line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
#[error("{path}:{line}: {message}")]
pub struct ConfigError {
    pub path: String,
    /// 1-based; 0 when the problem is not tied to a line.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Gradcheck,
    Stationarity,
    Prop1,
    TrainAffine,
    CoverageStudy,
    SubgridStudy,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::Stationarity => "stationarity",
            ExperimentKind::Prop1 => "prop1",
            ExperimentKind::TrainAffine => "train_affine",
            ExperimentKind::CoverageStudy => "coverage_study",
            ExperimentKind::SubgridStudy => "subgrid_study",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "gradcheck" => ExperimentKind::Gradcheck,
            "stationarity" => ExperimentKind::Stationarity,
            "prop1" => ExperimentKind::Prop1,
            "train_affine" => ExperimentKind::TrainAffine,
            "coverage_study" => ExperimentKind::CoverageStudy,
            "subgrid_study" => ExperimentKind::SubgridStudy,
            _ => return Err(format!("unknown experiment '{s}'")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Gaussian,
    Gmm,
}

impl FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(PriorKind::Gaussian),
            "gmm" => Ok(PriorKind::Gmm),
            _ => Err(format!("unknown prior '{s}' (expected gaussian or gmm)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Balanced,
    Uniform,
}

impl FromStr for Parity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "balanced" => Ok(Parity::Balanced),
            "uniform" => Ok(Parity::Uniform),
            _ => Err(format!("unknown parity '{s}' (expected balanced or uniform)")),
        }
    }
}

/// Every key with its default value, in canonical order.
const DEFAULTS: &[(&str, &str)] = &[
    ("experiment", ""),
    ("seed", "0"),
    ("out", ""),
    ("instances", "20"),
    ("hr_height", "4"),
    ("hr_width", "4"),
    ("frames", "4"),
    ("prior", "gaussian"),
    ("prior_mean", "0.5"),
    ("prior_variance", "1.0"),
    ("prior_corr_len", "2.0"),
    ("prior_nugget", "0.01"),
    ("gmm_weights", "0.4,0.6"),
    ("gmm_offsets", "-1.0,1.0"),
    ("gmm_scale", "0.3"),
    ("noise_a", "0.0"),
    ("noise_b", "0.05"),
    ("input_noise_var", "0.05"),
    ("gamma_min", "1.2"),
    ("gamma_max", "1.4"),
    ("exponent_min", "-5"),
    ("exponent_max", "5"),
    ("max_even_shift", "1"),
    ("parity", "uniform"),
    ("max_iters", "500000"),
    ("grad_tol", "1e-12"),
    ("initial_step", "1.0"),
    ("shrink", "0.5"),
    ("sufficient_decrease", "1e-4"),
    ("log_variance_floor", "-27.631021115928547"),
    ("restarts", "20"),
    ("tolerance", "1e-4"),
    ("shifted_tolerance", "1e-3"),
    ("bias_scale", "0.5"),
    ("fd_tolerance", "1e-5"),
    ("stationarity_tolerance", "1e-10"),
    ("mc_samples", "1000000"),
    ("mc_tolerance", "0.02"),
    ("epochs", "60"),
    ("batch_size", "1024"),
    ("step", "0.01"),
    ("decay", "0.5"),
    ("train_bursts", "100000"),
    ("test_bursts", "2000"),
    ("mean_tolerance", "0.02"),
    ("var_tolerance", "0.05"),
    ("agreement_tolerance", "0.03"),
    ("coverage_pixels", "1000000"),
    ("coverage_tolerance", "0.005"),
    ("bursts_per_instance", "100"),
    ("include_reference", "true"),
    ("win_fraction", "0.95"),
    ("write_rasters", "false"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub instances: usize,
    pub hr_height: usize,
    pub hr_width: usize,
    /// Input frames per burst, reference excluded.
    pub frames: usize,
    pub prior: PriorKind,
    pub prior_mean: f64,
    pub prior_variance: f64,
    pub prior_corr_len: f64,
    pub prior_nugget: f64,
    pub gmm_weights: Vec<f64>,
    /// Component means are `prior_mean + offset`.
    pub gmm_offsets: Vec<f64>,
    /// Component covariance is `gmm_scale` times the Gaussian prior's.
    pub gmm_scale: f64,
    /// Target noise `g(s) = a·s + b` for the risk experiments.
    pub noise_a: f64,
    pub noise_b: f64,
    /// Raw frame noise variance `σ²`.
    pub input_noise_var: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub exponent_min: i64,
    pub exponent_max: i64,
    pub max_even_shift: i64,
    pub parity: Parity,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub log_variance_floor: f64,
    pub restarts: usize,
    pub tolerance: f64,
    pub shifted_tolerance: f64,
    pub bias_scale: f64,
    pub fd_tolerance: f64,
    pub stationarity_tolerance: f64,
    pub mc_samples: usize,
    pub mc_tolerance: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step: f64,
    pub decay: f64,
    pub train_bursts: usize,
    pub test_bursts: usize,
    pub mean_tolerance: f64,
    pub var_tolerance: f64,
    pub agreement_tolerance: f64,
    pub coverage_pixels: usize,
    pub coverage_tolerance: f64,
    pub bursts_per_instance: usize,
    pub include_reference: bool,
    pub win_fraction: f64,
    pub write_rasters: bool,
    /// Effective `key=value` pairs, used for the manifest and the hash.
    entries: BTreeMap<String, String>,
}

struct Raw<'a> {
    path: &'a str,
    values: BTreeMap<&'static str, (usize, String)>,
}

impl Raw<'_> {
    fn err(&self, key: &str, message: impl Into<String>) -> ConfigError {
        let line = self.values.get(key).map_or(0, |(l, _)| *l);
        ConfigError { path: self.path.to_string(), line, message: message.into() }
    }

    fn text(&self, key: &str) -> &str {
        &self.values[key].1
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let v = self.text(key);
        v.parse().map_err(|_| self.err(key, format!("{key}: cannot parse '{v}'")))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        self.text(key)
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| self.err(key, format!("{key}: cannot parse '{}'", p.trim()))))
            .collect()
    }

    fn parsed<T: FromStr<Err = String>>(&self, key: &str) -> Result<T, ConfigError> {
        self.text(key).parse().map_err(|e: String| self.err(key, format!("{key}: {e}")))
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigFileError::Io(path.to_path_buf(), e))?;
        Self::parse(&text, &path.display().to_string()).map_err(ConfigFileError::Invalid)
    }

    /// Parses `text`; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<&'static str, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |m: String| ConfigError { path: origin.to_string(), line, message: m };
            let (k, v) = content.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{content}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = DEFAULTS
                .iter()
                .map(|(d, _)| *d)
                .find(|d| *d == k)
                .ok_or_else(|| err(format!("unknown key '{k}'")))?;
            if v.is_empty() {
                return Err(err(format!("{key}: empty value")));
            }
            if let Some((first, _)) = values.get(key) {
                return Err(err(format!("{key}: already set on line {first}")));
            }
            values.insert(key, (line, v.to_string()));
        }
        if !values.contains_key("experiment") {
            return Err(ConfigError { path: origin.to_string(), line: 0, message: "missing required key 'experiment'".into() });
        }
        for (k, d) in DEFAULTS {
            values.entry(k).or_insert((0, d.to_string()));
        }
        let raw = Raw { path: origin, values };
        let cfg = Self::from_raw(&raw)?;
        cfg.validate(&raw)?;
        Ok(cfg)
    }

    fn from_raw(r: &Raw) -> Result<Self, ConfigError> {
        let out = r.text("out");
        Ok(Self {
            experiment: r.parsed("experiment")?,
            seed: r.get("seed")?,
            out: (!out.is_empty()).then(|| PathBuf::from(out)),
            instances: r.get("instances")?,
            hr_height: r.get("hr_height")?,
            hr_width: r.get("hr_width")?,
            frames: r.get("frames")?,
            prior: r.parsed("prior")?,
            prior_mean: r.get("prior_mean")?,
            prior_variance: r.get("prior_variance")?,
            prior_corr_len: r.get("prior_corr_len")?,
            prior_nugget: r.get("prior_nugget")?,
            gmm_weights: r.list("gmm_weights")?,
            gmm_offsets: r.list("gmm_offsets")?,
            gmm_scale: r.get("gmm_scale")?,
            noise_a: r.get("noise_a")?,
            noise_b: r.get("noise_b")?,
            input_noise_var: r.get("input_noise_var")?,
            gamma_min: r.get("gamma_min")?,
            gamma_max: r.get("gamma_max")?,
            exponent_min: r.get("exponent_min")?,
            exponent_max: r.get("exponent_max")?,
            max_even_shift: r.get("max_even_shift")?,
            parity: r.parsed("parity")?,
            max_iters: r.get("max_iters")?,
            grad_tol: r.get("grad_tol")?,
            initial_step: r.get("initial_step")?,
            shrink: r.get("shrink")?,
            sufficient_decrease: r.get("sufficient_decrease")?,
            log_variance_floor: r.get("log_variance_floor")?,
            restarts: r.get("restarts")?,
            tolerance: r.get("tolerance")?,
            shifted_tolerance: r.get("shifted_tolerance")?,
            bias_scale: r.get("bias_scale")?,
            fd_tolerance: r.get("fd_tolerance")?,
            stationarity_tolerance: r.get("stationarity_tolerance")?,
            mc_samples: r.get("mc_samples")?,
            mc_tolerance: r.get("mc_tolerance")?,
            epochs: r.get("epochs")?,
            batch_size: r.get("batch_size")?,
            step: r.get("step")?,
            decay: r.get("decay")?,
            train_bursts: r.get("train_bursts")?,
            test_bursts: r.get("test_bursts")?,
            mean_tolerance: r.get("mean_tolerance")?,
            var_tolerance: r.get("var_tolerance")?,
            agreement_tolerance: r.get("agreement_tolerance")?,
            coverage_pixels: r.get("coverage_pixels")?,
            coverage_tolerance: r.get("coverage_tolerance")?,
            bursts_per_instance: r.get("bursts_per_instance")?,
            include_reference: r.get("include_reference")?,
            win_fraction: r.get("win_fraction")?,
            write_rasters: r.get("write_rasters")?,
            entries: r.values.iter().filter(|(k, _)| **k != "out").map(|(k, (_, v))| (k.to_string(), v.clone())).collect(),
        })
    }

    fn validate(&self, r: &Raw) -> Result<(), ConfigError> {
        let positive = [
            ("prior_variance", self.prior_variance),
            ("prior_corr_len", self.prior_corr_len),
            ("gmm_scale", self.gmm_scale),
            ("input_noise_var", self.input_noise_var),
            ("gamma_min", self.gamma_min),
            ("grad_tol", self.grad_tol),
            ("initial_step", self.initial_step),
            ("sufficient_decrease", self.sufficient_decrease),
            ("tolerance", self.tolerance),
            ("shifted_tolerance", self.shifted_tolerance),
            ("bias_scale", self.bias_scale),
            ("fd_tolerance", self.fd_tolerance),
            ("stationarity_tolerance", self.stationarity_tolerance),
            ("mc_tolerance", self.mc_tolerance),
            ("step", self.step),
            ("mean_tolerance", self.mean_tolerance),
            ("var_tolerance", self.var_tolerance),
            ("agreement_tolerance", self.agreement_tolerance),
            ("coverage_tolerance", self.coverage_tolerance),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(r.err(k, format!("{k} must be positive and finite (got {v})")));
            }
        }
        let non_negative =
            [("prior_nugget", self.prior_nugget), ("noise_a", self.noise_a), ("noise_b", self.noise_b)];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(r.err(k, format!("{k} must be non-negative (got {v})")));
            }
        }
        if !self.prior_mean.is_finite() || !self.log_variance_floor.is_finite() {
            return Err(r.err("prior_mean", "prior_mean and log_variance_floor must be finite"));
        }
        for (k, v) in [("hr_height", self.hr_height), ("hr_width", self.hr_width)] {
            if v == 0 || v % 2 != 0 {
                return Err(r.err(k, format!("{k} must be a positive even number (got {v})")));
            }
        }
        if self.hr_height * self.hr_width > 4096 {
            return Err(r.err("hr_height", "at most 4096 HR pixels are supported"));
        }
        let at_least_one = [
            ("instances", self.instances),
            ("frames", self.frames),
            ("max_iters", self.max_iters),
            ("restarts", self.restarts),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("train_bursts", self.train_bursts),
            ("test_bursts", self.test_bursts),
            ("coverage_pixels", self.coverage_pixels),
            ("bursts_per_instance", self.bursts_per_instance),
        ];
        for (k, v) in at_least_one {
            if v == 0 {
                return Err(r.err(k, format!("{k} must be at least 1")));
            }
        }
        if self.mc_samples < 256 {
            return Err(r.err("mc_samples", "mc_samples must be at least 256"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(r.err("shrink", format!("shrink must lie in (0, 1) (got {})", self.shrink)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(r.err("decay", format!("decay must lie in (0, 1] (got {})", self.decay)));
        }
        if !(self.win_fraction > 0.0 && self.win_fraction <= 1.0) {
            return Err(r.err("win_fraction", "win_fraction must lie in (0, 1]"));
        }
        if self.gamma_max < self.gamma_min {
            return Err(r.err("gamma_max", "gamma_max must not be below gamma_min"));
        }
        if self.exponent_max < self.exponent_min {
            return Err(r.err("exponent_max", "exponent_max must not be below exponent_min"));
        }
        if self.max_even_shift < 0 {
            return Err(r.err("max_even_shift", "max_even_shift must be non-negative"));
        }
        if self.gmm_weights.len() != self.gmm_offsets.len() || self.gmm_weights.len() < 2 {
            return Err(r.err("gmm_weights", "gmm_weights and gmm_offsets need the same length, at least 2"));
        }
        let total: f64 = self.gmm_weights.iter().sum();
        if self.gmm_weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(r.err("gmm_weights", "gmm_weights must be non-negative and sum to 1"));
        }
        if self.gmm_offsets.iter().any(|o| !o.is_finite()) {
            return Err(r.err("gmm_offsets", "gmm_offsets must be finite"));
        }
        Ok(())
    }

    /// Replaces the seed, as `--seed` does.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.entries.insert("seed".into(), seed.to_string());
        self
    }

    /// Effective configuration, one sorted `key=value` per line. The output
    /// directory is left out so that it does not change the hash.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigFileError {
    #[error("cannot read {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Invalid(ConfigError),
}
