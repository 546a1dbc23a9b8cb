//! The experiment drivers. Each returns its rows and artifacts in a fixed
//! order; nothing here touches the file system.

use rayon::prelude::*;

use ssnll::degrade::NoiseModel;
use ssnll::gradcheck::{suite_error, GradientOp};
use ssnll::grid::{ImageGrid, SubgridId};
use ssnll::metrics::{calibration_error, default_levels, psnr, sharpness, v_rmse, CoverageCounter};
use ssnll::optim::{train_affine, AffineEstimator, LossKind, OptimConfig, TrainConfig, TrainingSample};
use ssnll::posterior::{gmm_posterior_mixture, GaussianPrior, GmmPrior, PosteriorSummary};
use ssnll::risk::{
    max_relative_error, normwise_relative_error, posterior_estimator, posterior_estimator_full, stationarity_cov_residual_full,
    stationarity_mean_residual, stationarity_var_residual_diag, verify_proposition1, verify_sampled_minimizer, PosteriorSource,
    Prop1Config, RHatMode, RiskProblem,
};
use ssnll::rng::{derive_seed, Stream};
use ssnll::synth::{subgrid_study, GeometrySampler, ParityMode, SyntheticSetup};
use ssnll::{Error, Result};

use crate::config::{ExperimentConfig, ExperimentKind, Parity, PriorKind};
use crate::report::{Check, Row};

pub enum Artifact {
    Table { name: String, header: Vec<String>, records: Vec<Vec<String>> },
    Raster { name: String, image: ImageGrid },
    Affine { name: String, estimator: AffineEstimator },
}

#[derive(Default)]
pub struct Outcome {
    pub rows: Vec<Row>,
    pub artifacts: Vec<Artifact>,
}

/// Progress messages on stderr unless quiet.
#[derive(Clone, Copy)]
pub struct Progress {
    pub quiet: bool,
}

impl Progress {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, progress: Progress) -> Result<Outcome> {
    progress.say(format!("{}: seed {}", cfg.experiment.name(), cfg.seed));
    match cfg.experiment {
        ExperimentKind::Gradcheck => gradcheck(cfg),
        ExperimentKind::Stationarity => stationarity(cfg),
        ExperimentKind::Prop1 => match cfg.prior {
            PriorKind::Gaussian => prop1_gaussian(cfg, progress),
            PriorKind::Gmm => prop1_mixture(cfg, progress),
        },
        ExperimentKind::TrainAffine => train(cfg, progress),
        ExperimentKind::CoverageStudy => coverage_study(cfg),
        ExperimentKind::SubgridStudy => subgrid(cfg),
    }
}

fn instance_name(i: usize) -> String {
    format!("{i:04}")
}

fn prior(cfg: &ExperimentConfig, h: usize, w: usize) -> Result<GaussianPrior> {
    GaussianPrior::stationary_exponential(h, w, cfg.prior_mean, cfg.prior_variance, cfg.prior_corr_len, cfg.prior_nugget)
}

fn target_noise(cfg: &ExperimentConfig) -> Result<NoiseModel> {
    NoiseModel::new(cfg.noise_a, cfg.noise_b)
}

fn sampler(cfg: &ExperimentConfig) -> GeometrySampler {
    GeometrySampler {
        frames: cfg.frames,
        gamma: (cfg.gamma_min, cfg.gamma_max),
        exponent: (cfg.exponent_min, cfg.exponent_max),
        max_even: cfg.max_even_shift,
        parity: match cfg.parity {
            Parity::Balanced => ParityMode::Balanced,
            Parity::Uniform => ParityMode::Uniform,
        },
        input_noise_var: cfg.input_noise_var,
    }
}

fn optim(cfg: &ExperimentConfig) -> OptimConfig {
    OptimConfig {
        max_iters: cfg.max_iters,
        grad_tol: cfg.grad_tol,
        initial_step: cfg.initial_step,
        shrink: cfg.shrink,
        sufficient_decrease: cfg.sufficient_decrease,
        log_variance_floor: cfg.log_variance_floor,
        check_gradient: true,
    }
}

/// A random burst geometry on an `h × w` grid whose targets follow the
/// configured noise model.
fn burst_setup(cfg: &ExperimentConfig, h: usize, w: usize, stream: &mut Stream) -> Result<SyntheticSetup> {
    let mut setup = sampler(cfg).sample(&prior(cfg, h, w)?, stream)?;
    setup.target_noise = target_noise(cfg)?;
    Ok(setup)
}

/// Oracle posterior of one random burst, conditioned on the input frames.
fn burst_posterior(cfg: &ExperimentConfig, h: usize, w: usize, stream: &mut Stream) -> Result<(SyntheticSetup, PosteriorSummary)> {
    let setup = burst_setup(cfg, h, w, stream)?;
    let sample = setup.draw(stream)?;
    let values: Vec<&ImageGrid> = sample.inputs().iter().collect();
    let posterior = setup.conditioner(false)?.condition(&values)?;
    Ok((setup, posterior))
}

fn gradcheck(cfg: &ExperimentConfig) -> Result<Outcome> {
    let errors = GradientOp::ALL
        .par_iter()
        .enumerate()
        .map(|(k, op)| suite_error(*op, cfg.instances, derive_seed(cfg.seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![Row::info("all", "gradcheck", "instances_per_op", cfg.instances as f64)];
    for (op, err) in GradientOp::ALL.iter().zip(errors) {
        rows.push(Row::new("all", "gradcheck", op.name(), err, Check::AtMost(cfg.fd_tolerance)));
    }
    Ok(Outcome { rows, artifacts: Vec::new() })
}

fn stationarity(cfg: &ExperimentConfig) -> Result<Outcome> {
    let per_instance = (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let mut s = Stream::new(derive_seed(cfg.seed, i as u64));
            let h = 2 * (1 + s.index(cfg.hr_height / 2));
            let w = 2 * (1 + s.index(cfg.hr_width / 2));
            let (setup, posterior) = burst_posterior(cfg, h, w, &mut s)?;
            let problem = RiskProblem::gaussian(posterior, setup.target_noise, RHatMode::ExactDiag)?;
            let diag = posterior_estimator(problem.posterior())?;
            let full = posterior_estimator_full(problem.posterior())?;
            let name = instance_name(i);
            let tol = Check::AtMost(cfg.stationarity_tolerance);
            Ok(vec![
                Row::info(&name, "stationarity", "hr_height", h as f64),
                Row::info(&name, "stationarity", "hr_width", w as f64),
                Row::new(&name, "stationarity", "mean_residual_diag", stationarity_mean_residual(&problem, &diag)?, tol),
                Row::new(&name, "stationarity", "var_residual_diag", stationarity_var_residual_diag(&problem, &diag)?, tol),
                Row::new(&name, "stationarity", "mean_residual_full", stationarity_mean_residual(&problem, &full)?, tol),
                Row::new(&name, "stationarity", "cov_residual_full", stationarity_cov_residual_full(&problem, &full)?, tol),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Outcome { rows: per_instance.into_iter().flatten().collect(), artifacts: Vec::new() })
}

fn prop1_gaussian(cfg: &ExperimentConfig, progress: Progress) -> Result<Outcome> {
    let mut rows = Vec::new();
    for i in 0..cfg.instances {
        let seed = derive_seed(cfg.seed, i as u64);
        let mut s = Stream::new(seed);
        let (setup, posterior) = burst_posterior(cfg, cfg.hr_height, cfg.hr_width, &mut s)?;
        let problem = RiskProblem::gaussian(posterior, setup.target_noise, RHatMode::ExactDiag)?;
        let p1 = Prop1Config {
            restarts: cfg.restarts,
            tolerance: cfg.tolerance,
            shifted_tolerance: cfg.shifted_tolerance,
            bias_scale: cfg.bias_scale,
            seed: derive_seed(seed, 1),
            optim: optim(cfg),
            ..Default::default()
        };
        let report = verify_proposition1(&problem, &instance_name(i), &p1)?;
        progress.say(format!("instance {}/{}: {}", i + 1, cfg.instances, if report.all_pass() { "pass" } else { "FAIL" }));
        rows.extend(report.rows.into_iter().map(|r| Row::from(("prop1_gaussian", r))));
    }
    Ok(Outcome { rows, artifacts: Vec::new() })
}

fn gmm_prior(cfg: &ExperimentConfig) -> Result<GmmPrior> {
    let base = prior(cfg, cfg.hr_height, cfg.hr_width)?;
    let components = cfg
        .gmm_offsets
        .iter()
        .map(|o| GaussianPrior::new(base.mean().map(|m| m + o), base.cov().scaled(cfg.gmm_scale)))
        .collect::<Result<Vec<_>>>()?;
    GmmPrior::new(cfg.gmm_weights.clone(), components)
}

fn prop1_mixture(cfg: &ExperimentConfig, progress: Progress) -> Result<Outcome> {
    let gmm = gmm_prior(cfg)?;
    let mut rows = Vec::new();
    for i in 0..cfg.instances {
        let seed = derive_seed(cfg.seed, i as u64);
        let mut s = Stream::new(seed);
        let setup = sampler(cfg).sample(&gmm.components()[0], &mut s)?;
        let u = gmm.sample(&mut s);
        let observations = setup.input_sensors()?.iter().map(|sensor| sensor.observe(&u, &mut s)).collect::<Result<Vec<_>>>()?;
        let mixture = gmm_posterior_mixture(&gmm, &observations)?;
        let name = instance_name(i);
        for (k, w) in mixture.weights().iter().enumerate() {
            rows.push(Row::info(&name, "prop1_mixture", format!("posterior_weight{k}"), *w));
        }
        let problem = RiskProblem::new(PosteriorSource::Mixture(mixture), target_noise(cfg)?, RHatMode::ExactDiag)?;
        let checks = verify_sampled_minimizer(&problem, &name, cfg.mc_samples, cfg.mc_tolerance, derive_seed(seed, 1), &optim(cfg))?;
        let pass = checks.iter().all(|r| r.pass);
        progress.say(format!("instance {}/{}: {}", i + 1, cfg.instances, if pass { "pass" } else { "FAIL" }));
        rows.extend(checks.into_iter().map(|r| Row::from(("prop1_mixture", r))));
    }
    Ok(Outcome { rows, artifacts: Vec::new() })
}

/// Oracle moments of one test burst.
struct OracleBurst {
    mean: ImageGrid,
    sample: TrainingSample,
}

fn sq_dist(a: &ImageGrid, b: &ImageGrid) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn train(cfg: &ExperimentConfig, progress: Progress) -> Result<Outcome> {
    let (h, w) = (cfg.hr_height, cfg.hr_width);
    let setup = burst_setup(cfg, h, w, &mut Stream::substream(cfg.seed, 0))?;
    let mut out = Outcome::default();
    for (k, f) in setup.frames.iter().enumerate() {
        out.rows.push(Row::info("all", "geometry", format!("frame{k}_shift_y"), f.shift.0 as f64));
        out.rows.push(Row::info("all", "geometry", format!("frame{k}_shift_x"), f.shift.1 as f64));
        out.rows.push(Row::info("all", "geometry", format!("frame{k}_exposure"), f.exposure));
    }
    progress.say(format!("simulating {} training and {} test bursts", cfg.train_bursts, cfg.test_bursts));
    let train_set = setup.dataset(cfg.train_bursts, derive_seed(cfg.seed, 1))?;
    let test_set = setup.dataset(cfg.test_bursts, derive_seed(cfg.seed, 2))?;
    let cond = setup.conditioner(false)?;
    let oracle_var = ImageGrid::new(h, w, cond.cov().diagonal())?;
    let test: Vec<OracleBurst> = test_set
        .into_par_iter()
        .map(|sample| {
            let values: Vec<&ImageGrid> = sample.inputs().iter().collect();
            Ok(OracleBurst { mean: cond.mean(&values)?, sample })
        })
        .collect::<Result<Vec<_>>>()?;
    let prior_mean = setup.prior.mean();
    let signal: f64 = test.iter().map(|b| sq_dist(&b.mean, prior_mean)).sum();

    let mut predictions = Vec::new();
    let mut trace_records = Vec::new();
    out.rows.extend(quality_rows("oracle", &test, |b| Ok((b.mean.clone(), oracle_var.clone())))?);
    for loss in [LossKind::SelfSupervised, LossKind::Supervised] {
        let tc = TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            step: cfg.step,
            decay: cfg.decay,
            seed: derive_seed(cfg.seed, 3),
            loss,
            log_variance_floor: cfg.log_variance_floor,
            ..Default::default()
        };
        progress.say(format!("training ({})", loss.name()));
        let report = match train_affine(&train_set, &setup.target_noise, &tc) {
            Ok(r) => r,
            Err(Error::Diverged { epoch, loss: value }) => {
                out.rows.push(Row::new("all", loss.name(), "diverged_at_epoch", epoch as f64, Check::Given(0.0, false)));
                progress.say(format!("training ({}) diverged with loss {value:e}", loss.name()));
                continue;
            }
            Err(e) => return Err(e),
        };
        for (epoch, v) in report.loss_trace.iter().enumerate() {
            trace_records.push(vec![loss.name().to_string(), epoch.to_string(), format!("{v:e}")]);
        }
        let est = report.estimator;
        let means = test.iter().map(|b| est.predict(b.sample.inputs())).collect::<Result<Vec<_>>>()?;
        let nu = est.variance();
        let mean_err: f64 = test.iter().zip(&means).map(|(b, m)| sq_dist(m, &b.mean)).sum();
        out.rows.push(Row::new("all", loss.name(), "mean_rel_rmse_vs_oracle", (mean_err / signal).sqrt(), Check::AtMost(cfg.mean_tolerance)));
        out.rows.push(Row::new(
            "all",
            loss.name(),
            "var_rel_error_vs_oracle",
            normwise_relative_error(nu.data(), oracle_var.data()),
            Check::AtMost(cfg.var_tolerance),
        ));
        out.rows.push(Row::info("all", loss.name(), "var_max_rel_error_vs_oracle", max_relative_error(nu.data(), oracle_var.data())));
        let mut idx = 0;
        out.rows.extend(quality_rows(loss.name(), &test, |_| {
            idx += 1;
            Ok((means[idx - 1].clone(), nu.clone()))
        })?);
        if cfg.write_rasters {
            let first = &test[0];
            out.artifacts.push(Artifact::Raster { name: format!("{}_mean.raw", loss.name()), image: means[0].clone() });
            out.artifacts.push(Artifact::Raster { name: format!("{}_variance.raw", loss.name()), image: nu.clone() });
            out.artifacts.push(Artifact::Raster {
                name: format!("{}_sq_error.raw", loss.name()),
                image: means[0].zip_map(first.sample.truth(), |a, b| (a - b).powi(2))?,
            });
        }
        out.artifacts.push(Artifact::Affine { name: format!("estimator_{}", loss.name()), estimator: est });
        predictions.push((means, nu));
    }
    if let [(ms, vs), (mp, vp)] = predictions.as_slice() {
        let gap: f64 = ms.iter().zip(mp).map(|(a, b)| sq_dist(a, b)).sum();
        out.rows.push(Row::new("all", "agreement", "mean_rel_rmse", (gap / signal).sqrt(), Check::AtMost(cfg.agreement_tolerance)));
        out.rows.push(Row::new(
            "all",
            "agreement",
            "var_rel_error",
            normwise_relative_error(vs.data(), vp.data()),
            Check::AtMost(cfg.agreement_tolerance),
        ));
    }
    if cfg.write_rasters {
        let first = &test[0];
        out.artifacts.push(Artifact::Raster { name: "truth.raw".into(), image: first.sample.truth().clone() });
        out.artifacts.push(Artifact::Raster { name: "oracle_mean.raw".into(), image: first.mean.clone() });
        out.artifacts.push(Artifact::Raster { name: "oracle_variance.raw".into(), image: oracle_var.clone() });
        out.artifacts.push(Artifact::Raster {
            name: "oracle_sq_error.raw".into(),
            image: first.mean.zip_map(first.sample.truth(), |a, b| (a - b).powi(2))?,
        });
    }
    out.artifacts.push(Artifact::Table {
        name: "loss_trace.csv".into(),
        header: vec!["loss".into(), "epoch".into(), "value".into()],
        records: trace_records,
    });
    Ok(out)
}

/// Test-set PSNR (peak 1), V-RMSE, calibration error and 90% sharpness of
/// the predictions `f(burst)`, as documentation rows.
fn quality_rows(scope: &str, test: &[OracleBurst], mut f: impl FnMut(&OracleBurst) -> Result<(ImageGrid, ImageGrid)>) -> Result<Vec<Row>> {
    let mut counter = CoverageCounter::new(&default_levels())?;
    let (mut p, mut v, mut sharp) = (0.0, 0.0, 0.0);
    for b in test {
        let (mean, nu) = f(b)?;
        let truth = b.sample.truth();
        p += psnr(truth, &mean, 1.0)?;
        v += v_rmse(&nu, &mean, truth)?;
        sharp += sharpness(&nu, 0.9)?;
        counter.add(truth, &mean, &nu)?;
    }
    let n = test.len() as f64;
    Ok(vec![
        Row::info("all", scope, "psnr", p / n),
        Row::info("all", scope, "v_rmse", v / n),
        Row::info("all", scope, "calibration_error", calibration_error(&counter.curve()?)),
        Row::info("all", scope, "sharpness90", sharp / n),
    ])
}

/// Bursts per parallel work unit of the coverage study.
const COVERAGE_CHUNK: usize = 256;

fn coverage_study(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (h, w) = (cfg.hr_height, cfg.hr_width);
    let setup = burst_setup(cfg, h, w, &mut Stream::substream(cfg.seed, 0))?;
    let cond = setup.conditioner(false)?;
    let nu = ImageGrid::new(h, w, cond.cov().diagonal())?;
    let levels = default_levels();
    let bursts = cfg.coverage_pixels.div_ceil(h * w);
    let seed = derive_seed(cfg.seed, 1);
    let chunks = (0..bursts.div_ceil(COVERAGE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut counter = CoverageCounter::new(&levels)?;
            for b in c * COVERAGE_CHUNK..((c + 1) * COVERAGE_CHUNK).min(bursts) {
                let sample = setup.draw(&mut Stream::substream(seed, b as u64))?;
                let values: Vec<&ImageGrid> = sample.inputs().iter().collect();
                counter.add(sample.truth(), &cond.mean(&values)?, &nu)?;
            }
            Ok(counter)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = CoverageCounter::new(&levels)?;
    for c in &chunks {
        total.merge(c)?;
    }
    let curve = total.curve()?;
    let tol = Check::AtMost(cfg.coverage_tolerance);
    let mut rows = vec![Row::info("all", "coverage", "pixels", total.total() as f64)];
    let mut records = Vec::new();
    for (nom, emp) in curve.nominal().iter().zip(curve.empirical()) {
        rows.push(Row::new("all", "coverage", format!("deviation_at_{nom:.2}"), (emp - nom).abs(), tol));
        records.push(vec![format!("{nom:e}"), format!("{emp:e}")]);
    }
    rows.push(Row::new("all", "coverage", "calibration_error", calibration_error(&curve), tol));
    let table = Artifact::Table { name: "coverage.csv".into(), header: vec!["nominal".into(), "empirical".into()], records };
    Ok(Outcome { rows, artifacts: vec![table] })
}

fn subgrid(cfg: &ExperimentConfig) -> Result<Outcome> {
    let prior = prior(cfg, cfg.hr_height, cfg.hr_width)?;
    let sampler = sampler(cfg);
    let stats = (0..cfg.instances)
        .into_par_iter()
        .map(|i| subgrid_study(&prior, &sampler, cfg.bursts_per_instance, cfg.include_reference, derive_seed(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut wins = 0;
    for (i, st) in stats.iter().enumerate() {
        let name = instance_name(i);
        for tau in SubgridId::ALL {
            rows.push(Row::info(&name, "subgrid", format!("mean_variance_{}", tau.label()), st.mean_variance[tau.index()]));
            rows.push(Row::info(&name, "subgrid", format!("rmse_{}", tau.label()), st.rmse[tau.index()]));
        }
        let win = st.reference_subgrid_smallest();
        wins += win as usize;
        rows.push(Row::info(&name, "subgrid", "reference_smallest", win as u8 as f64));
    }
    rows.push(Row::new("all", "subgrid", "win_fraction", wins as f64 / cfg.instances as f64, Check::AtLeast(cfg.win_fraction)));
    Ok(Outcome { rows, artifacts: Vec::new() })
}
