//! Reconstruction and calibration metrics: PSNR, V-RMSE, coverage curves,
//! calibration error, sharpness and per-subgrid breakdowns.

use crate::error::{Error, Result};
use crate::grid::{subgrid_extract, ImageGrid, SubgridId};
use crate::normal::two_sided_quantile;

/// `10·log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr(reference: &ImageGrid, test: &ImageGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak {peak} must be positive")));
    }
    let mse = mse(reference, test)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    let diff = a.zip_map(b, |x, y| x - y)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

pub fn rmse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Root-mean-square gap between predicted variances and realized squared
/// errors, `sqrt(mean_k (ν̂_k − (û_k − u_k)²)²)`.
pub fn v_rmse(nu_hat: &ImageGrid, mean: &ImageGrid, u: &ImageGrid) -> Result<f64> {
    nu_hat.ensure_shape(u.shape())?;
    mean.ensure_shape(u.shape())?;
    let sum: f64 = nu_hat
        .data()
        .iter()
        .zip(mean.data())
        .zip(u.data())
        .map(|((v, m), x)| (v - (m - x).powi(2)).powi(2))
        .sum();
    Ok((sum / u.len() as f64).sqrt())
}

/// Nominal levels `0.05, 0.10, …, 0.95`.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|j| j as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageCurve {
    nominal: Vec<f64>,
    empirical: Vec<f64>,
}

impl CoverageCurve {
    pub fn new(nominal: Vec<f64>, empirical: Vec<f64>) -> Result<Self> {
        if nominal.is_empty() || nominal.len() != empirical.len() {
            return Err(Error::InvalidParameter(format!(
                "coverage curve needs equal, nonzero lengths (got {} and {})",
                nominal.len(),
                empirical.len()
            )));
        }
        validate_levels(&nominal)?;
        if empirical.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter("empirical levels must lie in [0, 1]".into()));
        }
        Ok(Self { nominal, empirical })
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    pub fn empirical(&self) -> &[f64] {
        &self.empirical
    }

    /// Largest `|p_j − p̂_j|`.
    pub fn max_deviation(&self) -> f64 {
        self.nominal.iter().zip(&self.empirical).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }
}

fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidParameter("no coverage levels".into()));
    }
    if levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidParameter("coverage levels must lie in (0, 1)".into()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("coverage levels must be strictly increasing".into()));
    }
    Ok(())
}

/// Accumulates interval hits over any number of images so that a dataset
/// curve is an exact pooled count, independent of how the pixels are split.
#[derive(Clone, Debug)]
pub struct CoverageCounter {
    levels: Vec<f64>,
    quantiles: Vec<f64>,
    hits: Vec<u64>,
    total: u64,
}

impl CoverageCounter {
    pub fn new(levels: &[f64]) -> Result<Self> {
        validate_levels(levels)?;
        Ok(Self {
            levels: levels.to_vec(),
            quantiles: levels.iter().map(|&a| two_sided_quantile(a)).collect(),
            hits: vec![0; levels.len()],
            total: 0,
        })
    }

    pub fn add(&mut self, u: &ImageGrid, mean: &ImageGrid, nu_hat: &ImageGrid) -> Result<()> {
        mean.ensure_shape(u.shape())?;
        nu_hat.ensure_shape(u.shape())?;
        for ((&x, &m), &v) in u.data().iter().zip(mean.data()).zip(nu_hat.data()) {
            self.add_pixel(x, m, v)?;
        }
        Ok(())
    }

    pub fn add_pixel(&mut self, u: f64, mean: f64, nu_hat: f64) -> Result<()> {
        if !(nu_hat > 0.0) {
            return Err(Error::NonPositiveVariance { index: self.total as usize, value: nu_hat });
        }
        let z = (u - mean).abs() / nu_hat.sqrt();
        for (h, &q) in self.hits.iter_mut().zip(&self.quantiles) {
            if z <= q {
                *h += 1;
            }
        }
        self.total += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CoverageCounter) -> Result<()> {
        if self.levels != other.levels {
            return Err(Error::InvalidParameter("cannot merge counters with different levels".into()));
        }
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn curve(&self) -> Result<CoverageCurve> {
        if self.total == 0 {
            return Err(Error::InvalidParameter("coverage of zero pixels".into()));
        }
        let empirical = self.hits.iter().map(|&h| h as f64 / self.total as f64).collect();
        CoverageCurve::new(self.levels.clone(), empirical)
    }
}

/// Fraction of pixels with `|u − û| ≤ q(α)·√ν̂` for each level `α`.
pub fn coverage(u: &ImageGrid, mean: &ImageGrid, nu_hat: &ImageGrid, levels: &[f64]) -> Result<CoverageCurve> {
    let mut counter = CoverageCounter::new(levels)?;
    counter.add(u, mean, nu_hat)?;
    counter.curve()
}

/// Mean absolute gap between nominal and empirical coverage.
pub fn calibration_error(curve: &CoverageCurve) -> f64 {
    let sum: f64 = curve.nominal.iter().zip(&curve.empirical).map(|(p, q)| (p - q).abs()).sum();
    sum / curve.nominal.len() as f64
}

/// Mean length `2·q(α)·√ν̂` of the level-`α` intervals.
pub fn sharpness(nu_hat: &ImageGrid, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("level {alpha} must lie in (0, 1)")));
    }
    if let Some(i) = nu_hat.data().iter().position(|v| !(*v > 0.0)) {
        return Err(Error::NonPositiveVariance { index: i, value: nu_hat.data()[i] });
    }
    let q = two_sided_quantile(alpha);
    Ok(2.0 * q * nu_hat.data().iter().map(|v| v.sqrt()).sum::<f64>() / nu_hat.len() as f64)
}

/// Applies `metric` to the restriction of every input to each subgrid.
/// The result is indexed by [`SubgridId::index`].
pub fn per_subgrid<F>(inputs: &[&ImageGrid], metric: F) -> Result<[f64; 4]>
where
    F: Fn(&[&ImageGrid]) -> Result<f64>,
{
    let mut out = [0.0; 4];
    for tau in SubgridId::ALL {
        let parts = inputs.iter().map(|g| subgrid_extract(g, tau)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageGrid> = parts.iter().collect();
        out[tau.index()] = metric(&refs)?;
    }
    Ok(out)
}

/// Per-subgrid mean of one image.
pub fn subgrid_means(img: &ImageGrid) -> Result<[f64; 4]> {
    per_subgrid(&[img], |g| Ok(g[0].mean()))
}

/// Per-subgrid reconstruction RMSE.
pub fn subgrid_rmse(truth: &ImageGrid, estimate: &ImageGrid) -> Result<[f64; 4]> {
    per_subgrid(&[truth, estimate], |g| rmse(g[0], g[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_relative_eq;

    fn residual_field(n: usize, nu: &ImageGrid, seed: u64) -> (ImageGrid, ImageGrid) {
        let mut s = Stream::new(seed);
        let mean = ImageGrid::from_fn(1, n, |_, _| s.uniform());
        let u = ImageGrid::from_fn(1, n, |_, c| mean.get(0, c) + nu.get(0, c).sqrt() * s.normal());
        (u, mean)
    }

    #[test]
    fn psnr_examples() {
        let a = ImageGrid::zeros(2, 2);
        let b = ImageGrid::filled(2, 2, 0.01);
        assert_relative_eq!(psnr(&a, &b, 1.0).unwrap(), 40.0, epsilon = 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 0.0).is_err());
        assert!(psnr(&a, &ImageGrid::zeros(2, 4), 1.0).is_err());
    }

    #[test]
    fn v_rmse_examples() {
        let one = |v| ImageGrid::filled(1, 1, v);
        assert_relative_eq!(v_rmse(&one(0.01), &one(0.3), &one(0.3)).unwrap(), 0.01);
        let mut s = Stream::new(1);
        let u = ImageGrid::from_fn(3, 3, |_, _| s.normal());
        let m = ImageGrid::from_fn(3, 3, |_, _| s.normal());
        let nu = u.zip_map(&m, |a, b| (a - b).powi(2)).unwrap();
        assert_eq!(v_rmse(&nu, &m, &u).unwrap(), 0.0);
    }

    #[test]
    fn v_rmse_is_permutation_invariant() {
        let mut s = Stream::new(2);
        let n = 50;
        let (u, m, nu) = (
            ImageGrid::from_fn(1, n, |_, _| s.normal()),
            ImageGrid::from_fn(1, n, |_, _| s.normal()),
            ImageGrid::from_fn(1, n, |_, _| s.uniform()),
        );
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, s.index(i + 1));
        }
        let p = |g: &ImageGrid| ImageGrid::from_fn(1, n, |_, c| g.get(0, perm[c]));
        assert_relative_eq!(v_rmse(&nu, &m, &u).unwrap(), v_rmse(&p(&nu), &p(&m), &p(&u)).unwrap(), max_relative = 1e-14);
    }

    #[test]
    fn zero_residuals_are_always_covered() {
        let m = ImageGrid::filled(3, 3, 0.2);
        let curve = coverage(&m, &m, &ImageGrid::filled(3, 3, 1e-6), &default_levels()).unwrap();
        assert!(curve.empirical().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn calibrated_residuals_give_nominal_coverage() {
        let n = 1_000_000;
        let mut s = Stream::new(3);
        let nu = ImageGrid::from_fn(1, n, |_, _| 0.01 + s.uniform());
        let (u, m) = residual_field(n, &nu, 4);
        let curve = coverage(&u, &m, &nu, &default_levels()).unwrap();
        let at90 = curve.empirical()[17];
        assert!((0.898..=0.902).contains(&at90), "{at90}");
        assert!(calibration_error(&curve) <= 0.005);
        assert!(curve.empirical().windows(2).all(|w| w[0] <= w[1]));

        let halved = nu.scaled(0.5);
        let under = coverage(&u, &m, &halved, &[0.9]).unwrap();
        assert!(under.empirical()[0] < 0.9);
    }

    #[test]
    fn pooled_counts_do_not_depend_on_splitting() {
        let n = 1000;
        let nu = ImageGrid::filled(1, n, 0.5);
        let (u, m) = residual_field(n, &nu, 5);
        let levels = default_levels();
        let whole = coverage(&u, &m, &nu, &levels).unwrap();
        let mut a = CoverageCounter::new(&levels).unwrap();
        let mut b = CoverageCounter::new(&levels).unwrap();
        for c in 0..n {
            let target = if c % 3 == 0 { &mut a } else { &mut b };
            target.add_pixel(u.get(0, c), m.get(0, c), nu.get(0, c)).unwrap();
        }
        a.merge(&b).unwrap();
        assert_eq!(a.curve().unwrap(), whole);
    }

    #[test]
    fn calibration_error_example() {
        let curve = CoverageCurve::new(vec![0.5, 0.9], vec![0.4, 0.95]).unwrap();
        assert_relative_eq!(calibration_error(&curve), 0.075, epsilon = 1e-15);
        let exact = CoverageCurve::new(default_levels(), default_levels()).unwrap();
        assert_eq!(calibration_error(&exact), 0.0);
    }

    #[test]
    fn curve_validation() {
        assert!(CoverageCurve::new(vec![], vec![]).is_err());
        assert!(CoverageCurve::new(vec![0.9, 0.5], vec![0.9, 0.5]).is_err());
        assert!(CoverageCurve::new(vec![0.5], vec![1.2]).is_err());
        assert!(CoverageCurve::new(vec![1.0], vec![1.0]).is_err());
        assert!(coverage(&ImageGrid::zeros(1, 1), &ImageGrid::zeros(1, 1), &ImageGrid::zeros(1, 1), &[0.5]).is_err());
    }

    #[test]
    fn sharpness_examples() {
        let s1 = sharpness(&ImageGrid::filled(2, 2, 1.0), 0.9).unwrap();
        assert_relative_eq!(s1, 3.289_707_253_902_945, max_relative = 1e-12);
        let mut s = Stream::new(6);
        let nu = ImageGrid::from_fn(4, 4, |_, _| 0.1 + s.uniform());
        assert_relative_eq!(sharpness(&nu.scaled(4.0), 0.9).unwrap(), 2.0 * sharpness(&nu, 0.9).unwrap(), max_relative = 1e-14);
        assert!(sharpness(&ImageGrid::zeros(1, 1), 0.9).is_err());
    }

    #[test]
    fn subgrid_breakdowns() {
        let flat = ImageGrid::filled(4, 6, 0.7);
        assert!(subgrid_means(&flat).unwrap().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let planted = ImageGrid::from_fn(4, 6, |r, c| if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 });
        let rm = subgrid_rmse(&planted, &ImageGrid::zeros(4, 6)).unwrap();
        assert_eq!(rm, [1.0, 0.0, 0.0, 0.0]);

        let counts = per_subgrid(&[&flat], |g| Ok(g[0].len() as f64)).unwrap();
        assert_eq!(counts.iter().sum::<f64>(), flat.len() as f64);
    }
}
