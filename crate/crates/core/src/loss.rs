//! Gaussian negative log-likelihoods and their analytic gradients.
//!
//! The self-supervised loss scores an HR estimate `(û, Σ̂)` against an LR
//! target `z = A_τ u + n` through the predicted distribution of `z`:
//!
//! ```text
//! L = ½ (z − A_τ û)ᵀ (A_τ Σ̂ A_τᵀ + R̂)⁻¹ (z − A_τ û) + ½ ln det(A_τ Σ̂ A_τᵀ + R̂)
//! ```
//!
//! Constant `½·dim·ln 2π` terms are omitted everywhere. For diagonal `Σ̂`
//! the matrix `A_τ Σ̂ A_τᵀ + R̂` is diagonal with entries
//! `d_l = ν̂_{2l+τ} + r̂_l`, so that path never forms a matrix.

use crate::degrade::{apply_shift_subsample, apply_shift_subsample_adjoint, NoiseModel, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::grid::{subgrid_embed, subgrid_indices, DenseMatrix, ImageGrid, SpdFactor, SubgridId};

/// Smallest admissible diagonal entry of a covariance factor.
pub const FACTOR_DIAG_FLOOR: f64 = 1e-8;

/// Largest number of HR unknowns handled by dense (full-covariance) code.
pub const MAX_DENSE_UNKNOWNS: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub enum VarianceParam {
    /// Per-pixel variances `ν̂`.
    Diagonal(ImageGrid),
    /// Lower-triangular `L` with `Σ̂ = L·Lᵀ`.
    Full(DenseMatrix),
}

/// An HR estimate: mean image plus a variance parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    mean: ImageGrid,
    variance: VarianceParam,
}

impl EstimatorState {
    /// Diagonal estimator. Variances must be finite and positive; values
    /// below `1e-12` are raised to it.
    pub fn diagonal(mean: ImageGrid, diag_variance: ImageGrid) -> Result<Self> {
        diag_variance.ensure_shape(mean.shape())?;
        check_positive(diag_variance.data())?;
        let diag_variance = diag_variance.map(|v| v.max(VARIANCE_FLOOR));
        Ok(Self { mean, variance: VarianceParam::Diagonal(diag_variance) })
    }

    /// Full-covariance estimator from a lower-triangular factor (entries
    /// above the diagonal are discarded).
    pub fn full(mean: ImageGrid, cov_factor: DenseMatrix) -> Result<Self> {
        let n = mean.len();
        check_dense_size(n)?;
        if cov_factor.rows() != n || cov_factor.cols() != n {
            return Err(Error::ShapeMismatch { expected: (n, n), got: (cov_factor.rows(), cov_factor.cols()) });
        }
        for i in 0..n {
            let d = cov_factor.get(i, i);
            if !(d >= FACTOR_DIAG_FLOOR) {
                return Err(Error::InvalidParameter(format!(
                    "covariance factor diagonal {d} at {i} is below {FACTOR_DIAG_FLOOR}"
                )));
            }
        }
        Ok(Self { mean, variance: VarianceParam::Full(cov_factor.lower_triangle()) })
    }

    /// Full-covariance estimator equal to the diagonal one with variances
    /// `diag_variance`.
    pub fn full_from_diagonal(mean: ImageGrid, diag_variance: &ImageGrid) -> Result<Self> {
        let factor = DenseMatrix::from_diagonal(&diag_variance.data().iter().map(|v| v.sqrt()).collect::<Vec<_>>());
        Self::full(mean, factor)
    }

    pub fn mean(&self) -> &ImageGrid {
        &self.mean
    }

    pub fn variance(&self) -> &VarianceParam {
        &self.variance
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.variance, VarianceParam::Diagonal(_))
    }

    pub fn diag_variance(&self) -> Option<&ImageGrid> {
        match &self.variance {
            VarianceParam::Diagonal(v) => Some(v),
            VarianceParam::Full(_) => None,
        }
    }

    pub fn cov_factor(&self) -> Option<&DenseMatrix> {
        match &self.variance {
            VarianceParam::Full(l) => Some(l),
            VarianceParam::Diagonal(_) => None,
        }
    }

    /// `Σ̂` as a dense matrix.
    pub fn covariance(&self) -> DenseMatrix {
        match &self.variance {
            VarianceParam::Diagonal(v) => DenseMatrix::from_diagonal(v.data()),
            VarianceParam::Full(l) => l.lower_gram(),
        }
    }

    /// `diag Σ̂` as an image.
    pub fn marginal_variance(&self) -> ImageGrid {
        match &self.variance {
            VarianceParam::Diagonal(v) => v.clone(),
            VarianceParam::Full(l) => {
                let (h, w) = self.mean.shape();
                let n = h * w;
                ImageGrid::from_fn(h, w, |r, c| {
                    let i = r * w + c;
                    (0..n).map(|j| l.get(i, j).powi(2)).sum()
                })
            }
        }
    }
}

/// Diagonal of the estimated observation-noise covariance `R̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseCovEstimate {
    diag: ImageGrid,
}

impl NoiseCovEstimate {
    /// Entries must be finite and positive; values below `1e-12` are
    /// raised to it.
    pub fn new(diag: ImageGrid) -> Result<Self> {
        check_positive(diag.data())?;
        Ok(Self { diag: diag.map(|v| v.max(VARIANCE_FLOOR)) })
    }

    /// The "no correction" estimate: every entry at the `1e-12` floor.
    pub fn floor(height: usize, width: usize) -> Self {
        Self { diag: ImageGrid::filled(height, width, VARIANCE_FLOOR) }
    }

    pub fn diag(&self) -> &ImageGrid {
        &self.diag
    }
}

/// `R̂ = diag(g(A_τ û))`: the noise model evaluated on the subsampled mean.
pub fn estimate_noise_cov(mean: &ImageGrid, tau: SubgridId, model: &NoiseModel) -> Result<NoiseCovEstimate> {
    let lr = apply_shift_subsample(mean, tau)?;
    Ok(NoiseCovEstimate { diag: lr.map(|s| model.variance(s)) })
}

/// Supervised per-pixel Gaussian NLL `Σ (u − û)²/(2ν̂) + ½ ln ν̂`.
pub fn supervised_nll(u: &ImageGrid, mean: &ImageGrid, diag_variance: &ImageGrid) -> Result<f64> {
    mean.ensure_shape(u.shape())?;
    diag_variance.ensure_shape(u.shape())?;
    check_positive(diag_variance.data())?;
    Ok(u.data()
        .iter()
        .zip(mean.data())
        .zip(diag_variance.data())
        .map(|((&x, &m), &v)| (x - m).powi(2) / (2.0 * v) + 0.5 * v.ln())
        .sum())
}

/// Gradients of [`supervised_nll`] with respect to the mean and the
/// variances.
pub fn supervised_nll_grad(u: &ImageGrid, mean: &ImageGrid, diag_variance: &ImageGrid) -> Result<(ImageGrid, ImageGrid)> {
    mean.ensure_shape(u.shape())?;
    diag_variance.ensure_shape(u.shape())?;
    check_positive(diag_variance.data())?;
    let g_mean = mean.zip_map(u, |m, x| m - x)?.zip_map(diag_variance, |r, v| r / v)?;
    let g_var = mean
        .zip_map(u, |m, x| (m - x).powi(2))?
        .zip_map(diag_variance, |r2, v| 0.5 * (1.0 / v - r2 / (v * v)))?;
    Ok((g_mean, g_var))
}

/// Per-LR-pixel residual `z − A_τ û` and predicted variance `d`.
struct DiagTerms {
    residual: ImageGrid,
    total_var: ImageGrid,
}

fn diag_terms(z: &ImageGrid, est: &EstimatorState, tau: SubgridId, r_hat: &NoiseCovEstimate) -> Result<DiagTerms> {
    let nu = est
        .diag_variance()
        .ok_or_else(|| Error::InvalidParameter("diagonal loss needs a diagonal estimator".into()))?;
    let predicted = apply_shift_subsample(est.mean(), tau)?;
    z.ensure_shape(predicted.shape())?;
    r_hat.diag.ensure_shape(predicted.shape())?;
    let residual = z.zip_map(&predicted, |a, b| a - b)?;
    let total_var = apply_shift_subsample(nu, tau)?.zip_map(&r_hat.diag, |a, b| a + b)?;
    check_positive(total_var.data())?;
    Ok(DiagTerms { residual, total_var })
}

/// Self-supervised NLL for a diagonal estimator:
/// `Σ_l r_l²/(2 d_l) + ½ ln d_l`.
pub fn selfsup_nll_diag(z: &ImageGrid, est: &EstimatorState, tau: SubgridId, r_hat: &NoiseCovEstimate) -> Result<f64> {
    let t = diag_terms(z, est, tau, r_hat)?;
    Ok(t.residual
        .data()
        .iter()
        .zip(t.total_var.data())
        .map(|(&r, &d)| r * r / (2.0 * d) + 0.5 * d.ln())
        .sum())
}

/// `∂L/∂û = A_τᵀ[(A_τ û − z)/d]`.
pub fn grad_mean_diag(z: &ImageGrid, est: &EstimatorState, tau: SubgridId, r_hat: &NoiseCovEstimate) -> Result<ImageGrid> {
    let t = diag_terms(z, est, tau, r_hat)?;
    let lr = t.residual.zip_map(&t.total_var, |r, d| -r / d)?;
    Ok(apply_shift_subsample_adjoint(&lr, tau))
}

/// `∂L/∂ν̂ = ½ A_τᵀ[1/d − r²/d²]`.
pub fn grad_variance_diag(z: &ImageGrid, est: &EstimatorState, tau: SubgridId, r_hat: &NoiseCovEstimate) -> Result<ImageGrid> {
    let t = diag_terms(z, est, tau, r_hat)?;
    let lr = t.residual.zip_map(&t.total_var, |r, d| 0.5 * (1.0 / d - r * r / (d * d)))?;
    Ok(apply_shift_subsample_adjoint(&lr, tau))
}

struct FullTerms {
    idx: Vec<usize>,
    residual: Vec<f64>,
    factor: SpdFactor,
}

fn full_terms(z: &ImageGrid, est: &EstimatorState, tau: SubgridId, r_hat: &NoiseCovEstimate) -> Result<FullTerms> {
    let l = est
        .cov_factor()
        .ok_or_else(|| Error::InvalidParameter("full-covariance loss needs a factor".into()))?;
    check_dense_size(est.mean().len())?;
    let predicted = apply_shift_subsample(est.mean(), tau)?;
    z.ensure_shape(predicted.shape())?;
    r_hat.diag.ensure_shape(predicted.shape())?;
    let (h, w) = est.mean().shape();
    let idx = subgrid_indices(h, w, tau);
    let mut s = l.lower_gram().principal_submatrix(&idx);
    for (i, &r) in r_hat.diag.data().iter().enumerate() {
        s.set(i, i, s.get(i, i) + r);
    }
    let factor = SpdFactor::new(&s.symmetrized())?;
    let residual = z.data().iter().zip(predicted.data()).map(|(a, b)| a - b).collect();
    Ok(FullTerms { idx, residual, factor })
}

/// Self-supervised NLL for a full covariance `Σ̂ = L·Lᵀ`:
/// `½ rᵀ M̂ r + ½ ln det M̂⁻¹` with `M̂⁻¹ = A_τ Σ̂ A_τᵀ + R̂`.
pub fn selfsup_nll_full(z: &ImageGrid, est: &EstimatorState, tau: SubgridId, r_hat: &NoiseCovEstimate) -> Result<f64> {
    let t = full_terms(z, est, tau, r_hat)?;
    let mr = t.factor.solve(&t.residual);
    let quad: f64 = t.residual.iter().zip(&mr).map(|(a, b)| a * b).sum();
    Ok(0.5 * quad + 0.5 * t.factor.log_det())
}

/// Dispatches on the estimator's variance parameterization.
pub fn selfsup_nll(z: &ImageGrid, est: &EstimatorState, tau: SubgridId, r_hat: &NoiseCovEstimate) -> Result<f64> {
    if est.is_diagonal() {
        selfsup_nll_diag(z, est, tau, r_hat)
    } else {
        selfsup_nll_full(z, est, tau, r_hat)
    }
}

/// Gradients of [`selfsup_nll_full`]: with respect to `û`, and with respect
/// to the lower-triangular factor `L`.
///
/// `∂L/∂Σ̂ = ½ A_τᵀ(M̂ − M̂ r rᵀ M̂)A_τ =: G` and, through `Σ̂ = L·Lᵀ`,
/// `∂L/∂L = tril((G + Gᵀ)·L)`.
pub fn grad_full(
    z: &ImageGrid,
    est: &EstimatorState,
    tau: SubgridId,
    r_hat: &NoiseCovEstimate,
) -> Result<(ImageGrid, DenseMatrix)> {
    let t = full_terms(z, est, tau, r_hat)?;
    let l = est.cov_factor().expect("checked by full_terms");
    let (h, w) = est.mean().shape();
    let n = h * w;
    let m = t.idx.len();

    let mr = t.factor.solve(&t.residual);
    let lr = ImageGrid::new(h / 2, w / 2, mr.iter().map(|v| -v).collect())?;
    let g_mean = subgrid_embed(&lr, tau);

    // G restricted to the sampled rows/columns.
    let m_hat = t.factor.inverse();
    let g_small = DenseMatrix::from_fn(m, m, |i, j| 0.5 * (m_hat.get(i, j) - mr[i] * mr[j]));
    let l_rows = DenseMatrix::from_fn(m, n, |i, j| l.get(t.idx[i], j));
    let gl = g_small.matmul(&l_rows)?;
    let mut g_factor = DenseMatrix::zeros(n, n);
    for (i, &row) in t.idx.iter().enumerate() {
        for col in 0..=row {
            g_factor.set(row, col, 2.0 * gl.get(i, col));
        }
    }
    Ok((g_mean, g_factor))
}

fn check_positive(values: &[f64]) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveVariance { index, value });
        }
    }
    Ok(())
}

pub(crate) fn check_dense_size(n: usize) -> Result<()> {
    if n > MAX_DENSE_UNKNOWNS {
        return Err(Error::TooLarge { dim: n, limit: MAX_DENSE_UNKNOWNS });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn grid(h: usize, w: usize, s: &mut Stream, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid::from_fn(h, w, |_, _| f(s.normal()))
    }

    fn one(v: f64) -> ImageGrid {
        ImageGrid::filled(1, 1, v)
    }

    /// Scalar-like setup: 2×2 HR, τ = (0,0), one LR pixel.
    fn scalar_case(mean0: f64, nu0: f64) -> EstimatorState {
        let mean = ImageGrid::new(2, 2, vec![mean0, 0.0, 0.0, 0.0]).unwrap();
        let nu = ImageGrid::new(2, 2, vec![nu0, 1.0, 1.0, 1.0]).unwrap();
        EstimatorState::diagonal(mean, nu).unwrap()
    }

    #[test]
    fn supervised_examples() {
        let g = ImageGrid::filled(2, 2, 0.3);
        assert_eq!(supervised_nll(&g, &g, &ImageGrid::filled(2, 2, 1.0)).unwrap(), 0.0);
        assert!((supervised_nll(&one(1.0), &one(0.0), &one(1.0)).unwrap() - 0.5).abs() < 1e-15);
        let v = supervised_nll(&one(2.0), &one(0.0), &one(2.0)).unwrap();
        assert!((v - (1.0 + 0.5 * 2f64.ln())).abs() < 1e-15);
        assert!((v - 1.3466).abs() < 1e-4);
    }

    #[test]
    fn supervised_errors() {
        assert!(matches!(
            supervised_nll(&one(0.0), &one(0.0), &one(0.0)),
            Err(Error::NonPositiveVariance { .. })
        ));
        assert!(supervised_nll(&one(0.0), &ImageGrid::zeros(1, 2), &one(1.0)).is_err());
    }

    #[test]
    fn noise_cov_examples() {
        let mut s = Stream::new(1);
        let mean = grid(4, 4, &mut s, |x| x);
        let homo = NoiseModel::new(0.0, 0.04).unwrap();
        for tau in SubgridId::ALL {
            assert_eq!(estimate_noise_cov(&mean, tau, &homo).unwrap().diag(), &ImageGrid::filled(2, 2, 0.04));
        }
        let shot = NoiseModel::new(0.01, 1e-4).unwrap();
        let r = estimate_noise_cov(&ImageGrid::filled(2, 2, 0.5), SubgridId::EVEN, &shot).unwrap();
        assert!((r.diag().get(0, 0) - 0.0051).abs() < 1e-15);
        let clamp = NoiseModel::new(1.0, 0.0).unwrap();
        let r = estimate_noise_cov(&ImageGrid::filled(2, 2, -10.0), SubgridId::EVEN, &clamp).unwrap();
        assert_eq!(r.diag().get(0, 0), 1e-12);
    }

    #[test]
    fn diag_examples() {
        // r = 2, ν̂ + r̂ = 2
        let est = scalar_case(0.0, 1.5);
        let r_hat = NoiseCovEstimate::new(one(0.5)).unwrap();
        let v = selfsup_nll_diag(&one(2.0), &est, SubgridId::EVEN, &r_hat).unwrap();
        assert!((v - (1.0 + 0.5 * 2f64.ln())).abs() < 1e-14);

        let mut s = Stream::new(3);
        let mean = grid(4, 4, &mut s, |x| x);
        let est = EstimatorState::diagonal(mean.clone(), ImageGrid::filled(4, 4, 0.5)).unwrap();
        let r_hat = NoiseCovEstimate::new(ImageGrid::filled(2, 2, 0.5)).unwrap();
        for tau in SubgridId::ALL {
            let z = apply_shift_subsample(&mean, tau).unwrap();
            assert_eq!(selfsup_nll_diag(&z, &est, tau, &r_hat).unwrap(), 0.0);
            assert_eq!(grad_mean_diag(&z, &est, tau, &r_hat).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn diag_gradient_examples() {
        // û − z = 1, d = 1
        let est = scalar_case(1.0, 0.5);
        let r_hat = NoiseCovEstimate::new(one(0.5)).unwrap();
        let g = grad_mean_diag(&one(0.0), &est, SubgridId::EVEN, &r_hat).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
        // r² = d = 1 → 0
        let gv = grad_variance_diag(&one(0.0), &est, SubgridId::EVEN, &r_hat).unwrap();
        assert_eq!(gv.data(), &[0.0, 0.0, 0.0, 0.0]);
        // r = 0, d = 1 → ½
        let gv = grad_variance_diag(&one(1.0), &est, SubgridId::EVEN, &r_hat).unwrap();
        assert_eq!(gv.data(), &[0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_identity_example() {
        let mean = ImageGrid::new(2, 2, vec![0.3, -0.2, 0.7, 1.1]).unwrap();
        let est = EstimatorState::full(mean.clone(), DenseMatrix::identity(4)).unwrap();
        let r_hat = NoiseCovEstimate::new(one(1.0)).unwrap();
        for tau in SubgridId::ALL {
            let z = apply_shift_subsample(&mean, tau).unwrap();
            let v = selfsup_nll_full(&z, &est, tau, &r_hat).unwrap();
            assert!((v - 0.5 * 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_and_full_paths_agree() {
        let mut s = Stream::new(5);
        for trial in 0..20 {
            let mean = grid(4, 4, &mut s, |x| x);
            let nu = grid(4, 4, &mut s, |x| 0.2 + x.abs());
            let z = grid(2, 2, &mut s, |x| x);
            let r_hat = NoiseCovEstimate::new(grid(2, 2, &mut s, |x| 0.1 + 0.5 * x.abs())).unwrap();
            let diag = EstimatorState::diagonal(mean.clone(), nu.clone()).unwrap();
            let full = EstimatorState::full_from_diagonal(mean, &nu).unwrap();
            let tau = SubgridId::from_index(trial % 4);
            let a = selfsup_nll_diag(&z, &diag, tau, &r_hat).unwrap();
            let b = selfsup_nll_full(&z, &full, tau, &r_hat).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            let ga = grad_mean_diag(&z, &diag, tau, &r_hat).unwrap();
            let (gb, gl) = grad_full(&z, &full, tau, &r_hat).unwrap();
            assert!(ga.zip_map(&gb, |x, y| x - y).unwrap().max_abs() <= 1e-10);
            // dL/dL_kk = 2 L_kk dL/dν̂_k on the diagonal
            let gv = grad_variance_diag(&z, &diag, tau, &r_hat).unwrap();
            for k in 0..16 {
                let expect = 2.0 * nu.data()[k].sqrt() * gv.data()[k];
                assert!((gl.get(k, k) - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn full_matches_explicit_dense_evaluation() {
        let mut s = Stream::new(8);
        for _ in 0..10 {
            let n = 16;
            let mean = grid(4, 4, &mut s, |x| x);
            let mut l = DenseMatrix::from_fn(n, n, |_, _| 0.3 * s.normal());
            for i in 0..n {
                l.set(i, i, 0.5 + l.get(i, i).abs());
            }
            let est = EstimatorState::full(mean.clone(), l.clone()).unwrap();
            let z = grid(2, 2, &mut s, |x| x);
            let r_hat = NoiseCovEstimate::new(grid(2, 2, &mut s, |x| 0.1 + x.abs())).unwrap();
            for tau in SubgridId::ALL {
                // Explicit A_τ, explicit inverse via Gauss-Jordan on nalgebra.
                let a = crate::degrade::ShiftSubsample::new(tau, 4, 4).unwrap();
                let a = crate::degrade::LinearOperator::to_dense(&a).unwrap();
                let sigma = l.lower_triangle().matmul(&l.lower_triangle().transpose()).unwrap();
                let cov = a
                    .matmul(&sigma)
                    .unwrap()
                    .matmul(&a.transpose())
                    .unwrap()
                    .add(&DenseMatrix::from_diagonal(r_hat.diag().data()))
                    .unwrap();
                let inv = cov.as_nalgebra().clone().try_inverse().unwrap();
                let r = nalgebra::DVector::from_iterator(
                    4,
                    z.data().iter().zip(a.matvec(mean.data())).map(|(x, y)| x - y),
                );
                let expected = 0.5 * (r.transpose() * &inv * &r)[(0, 0)] + 0.5 * cov.as_nalgebra().determinant().ln();
                let got = selfsup_nll_full(&z, &est, tau, &r_hat).unwrap();
                assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
            }
        }
    }

    #[test]
    fn full_matched_residual_has_zero_covariance_gradient() {
        // One LR pixel: r² = d makes M̂ − M̂ r rᵀ M̂ vanish.
        let mean = ImageGrid::zeros(2, 2);
        let l = DenseMatrix::from_diagonal(&[0.6f64.sqrt(), 1.0, 1.0, 1.0]);
        let est = EstimatorState::full(mean, l).unwrap();
        let r_hat = NoiseCovEstimate::new(one(0.4)).unwrap();
        let (_, g) = grad_full(&one(1.0), &est, SubgridId::EVEN, &r_hat).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn loss_lower_bound() {
        let mut s = Stream::new(12);
        for _ in 0..50 {
            let mean = grid(4, 6, &mut s, |x| x);
            let nu = grid(4, 6, &mut s, |x| 0.05 + x.abs());
            let est = EstimatorState::diagonal(mean, nu.clone()).unwrap();
            let r_hat = NoiseCovEstimate::new(grid(2, 3, &mut s, |x| 0.01 + x.abs())).unwrap();
            let z = grid(2, 3, &mut s, |x| x);
            for tau in SubgridId::ALL {
                let bound: f64 = apply_shift_subsample(&nu, tau)
                    .unwrap()
                    .zip_map(r_hat.diag(), |a, b| 0.5 * (a + b).ln())
                    .unwrap()
                    .sum();
                assert!(selfsup_nll_diag(&z, &est, tau, &r_hat).unwrap() >= bound);
            }
        }
    }

    #[test]
    fn four_subgrids_touch_every_variance_once() {
        let mut s = Stream::new(13);
        let mean = grid(4, 4, &mut s, |x| x);
        let est = EstimatorState::diagonal(mean, ImageGrid::filled(4, 4, 0.3)).unwrap();
        let r_hat = NoiseCovEstimate::new(ImageGrid::filled(2, 2, 0.2)).unwrap();
        let z = ImageGrid::zeros(2, 2);
        let mut touched = ImageGrid::zeros(4, 4);
        for tau in SubgridId::ALL {
            let g = grad_variance_diag(&z, &est, tau, &r_hat).unwrap();
            touched = touched.zip_map(&g, |t, g| t + if g != 0.0 { 1.0 } else { 0.0 }).unwrap();
        }
        assert_eq!(touched, ImageGrid::filled(4, 4, 1.0));
    }

    #[test]
    fn estimator_validation() {
        let mean = ImageGrid::zeros(2, 2);
        assert!(EstimatorState::diagonal(mean.clone(), ImageGrid::filled(2, 2, -1.0)).is_err());
        let tiny = EstimatorState::diagonal(mean.clone(), ImageGrid::filled(2, 2, 1e-20)).unwrap();
        assert_eq!(tiny.diag_variance().unwrap().get(0, 0), 1e-12);
        assert!(EstimatorState::full(mean.clone(), DenseMatrix::from_diagonal(&[1.0, 1e-9, 1.0, 1.0])).is_err());
        assert!(EstimatorState::full(mean, DenseMatrix::identity(3)).is_err());
        let big = ImageGrid::zeros(66, 64);
        assert!(matches!(
            EstimatorState::full(big, DenseMatrix::identity(1)),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn marginal_variance_of_full_factor() {
        let l = DenseMatrix::from_row_major(4, 4, &[
            1.0, 0.0, 0.0, 0.0, //
            0.5, 2.0, 0.0, 0.0, //
            0.1, 0.2, 0.3, 0.0, //
            0.0, 0.0, 1.0, 1.0,
        ])
        .unwrap();
        let est = EstimatorState::full(ImageGrid::zeros(2, 2), l).unwrap();
        let cov = est.covariance();
        assert_eq!(est.marginal_variance().data(), cov.diagonal().as_slice());
    }
}
