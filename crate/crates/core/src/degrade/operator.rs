use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::grid::{subgrid_embed, subgrid_extract, DenseMatrix, ImageGrid, SubgridId};

/// A linear map between rasters, applied matrix-free.
pub trait LinearOperator: Debug + Send + Sync {
    fn input_shape(&self) -> (usize, usize);
    fn output_shape(&self) -> (usize, usize);
    fn apply(&self, u: &ImageGrid) -> Result<ImageGrid>;
    fn apply_adjoint(&self, w: &ImageGrid) -> Result<ImageGrid>;

    /// Materializes the operator (output pixels × input pixels) by
    /// applying it to the canonical basis.
    fn to_dense(&self) -> Result<DenseMatrix> {
        let (h, w) = self.input_shape();
        let (oh, ow) = self.output_shape();
        let n = h * w;
        let mut out = DenseMatrix::zeros(oh * ow, n);
        let mut basis = ImageGrid::zeros(h, w);
        for k in 0..n {
            basis.data_mut()[k] = 1.0;
            let col = self.apply(&basis)?;
            for (i, &v) in col.data().iter().enumerate() {
                if v != 0.0 {
                    out.set(i, k, v);
                }
            }
            basis.data_mut()[k] = 0.0;
        }
        Ok(out)
    }
}

/// `A_τ = D·S_τ`: one-pixel shift by `tau` then ×2 subsampling, i.e.
/// `(A_τ u)_l = u_{2l+τ}`.
pub fn apply_shift_subsample(u: &ImageGrid, tau: SubgridId) -> Result<ImageGrid> {
    subgrid_extract(u, tau)
}

/// `A_τᵀ`: zero-insertion upsampling onto subgrid `tau`.
pub fn apply_shift_subsample_adjoint(w: &ImageGrid, tau: SubgridId) -> ImageGrid {
    subgrid_embed(w, tau)
}

/// An explicit matrix acting on row-major rasters.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixOperator {
    matrix: DenseMatrix,
    input_shape: (usize, usize),
    output_shape: (usize, usize),
}

impl MatrixOperator {
    pub fn new(matrix: DenseMatrix, input_shape: (usize, usize), output_shape: (usize, usize)) -> Result<Self> {
        if matrix.rows() != output_shape.0 * output_shape.1 || matrix.cols() != input_shape.0 * input_shape.1 {
            return Err(Error::Dimension(format!(
                "{}x{} matrix cannot map {input_shape:?} to {output_shape:?}",
                matrix.rows(),
                matrix.cols()
            )));
        }
        Ok(Self { matrix, input_shape, output_shape })
    }

    /// Identity on rasters of the given shape.
    pub fn identity(height: usize, width: usize) -> Self {
        Self { matrix: DenseMatrix::identity(height * width), input_shape: (height, width), output_shape: (height, width) }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }
}

impl LinearOperator for MatrixOperator {
    fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }

    fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }

    fn apply(&self, u: &ImageGrid) -> Result<ImageGrid> {
        u.ensure_shape(self.input_shape)?;
        ImageGrid::new(self.output_shape.0, self.output_shape.1, self.matrix.matvec(u.data()))
    }

    fn apply_adjoint(&self, w: &ImageGrid) -> Result<ImageGrid> {
        w.ensure_shape(self.output_shape)?;
        ImageGrid::new(self.input_shape.0, self.input_shape.1, self.matrix.transpose().matvec(w.data()))
    }

    fn to_dense(&self) -> Result<DenseMatrix> {
        Ok(self.matrix.clone())
    }
}

/// [`apply_shift_subsample`] as an operator object of fixed HR shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSubsample {
    pub tau: SubgridId,
    hr_height: usize,
    hr_width: usize,
}

impl ShiftSubsample {
    pub fn new(tau: SubgridId, hr_height: usize, hr_width: usize) -> Result<Self> {
        check_even(hr_height, hr_width)?;
        Ok(Self { tau, hr_height, hr_width })
    }
}

impl LinearOperator for ShiftSubsample {
    fn input_shape(&self) -> (usize, usize) {
        (self.hr_height, self.hr_width)
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.hr_height / 2, self.hr_width / 2)
    }

    fn apply(&self, u: &ImageGrid) -> Result<ImageGrid> {
        u.ensure_shape(self.input_shape())?;
        subgrid_extract(u, self.tau)
    }

    fn apply_adjoint(&self, w: &ImageGrid) -> Result<ImageGrid> {
        w.ensure_shape(self.output_shape())?;
        Ok(subgrid_embed(w, self.tau))
    }
}

/// Integer circular HR translation by `shift` (content moves by `+shift`),
/// ×2 subsampling and a scalar `gain` (exposure):
/// `out_l = gain · u[(2l − shift) mod (2H, 2W)]`.
///
/// Equals `gain · D(warp_translate(u, shift))` for integer shifts; with
/// `shift = −τ` and unit gain it is `A_τ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranslateSubsample {
    hr_height: usize,
    hr_width: usize,
    shift: (i64, i64),
    gain: f64,
}

impl TranslateSubsample {
    pub fn new(hr_height: usize, hr_width: usize, shift: (i64, i64), gain: f64) -> Result<Self> {
        check_even(hr_height, hr_width)?;
        if !gain.is_finite() || gain <= 0.0 {
            return Err(Error::InvalidParameter(format!("gain {gain} must be positive")));
        }
        Ok(Self { hr_height, hr_width, shift, gain })
    }

    pub fn shift(&self) -> (i64, i64) {
        self.shift
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// The HR subgrid this operator samples.
    pub fn subgrid(&self) -> SubgridId {
        SubgridId::of_pixel((-self.shift.0).rem_euclid(2) as usize, (-self.shift.1).rem_euclid(2) as usize)
    }

    fn source_index(&self, lr_row: usize, lr_col: usize) -> usize {
        let r = (2 * lr_row as i64 - self.shift.0).rem_euclid(self.hr_height as i64) as usize;
        let c = (2 * lr_col as i64 - self.shift.1).rem_euclid(self.hr_width as i64) as usize;
        r * self.hr_width + c
    }
}

impl LinearOperator for TranslateSubsample {
    fn input_shape(&self) -> (usize, usize) {
        (self.hr_height, self.hr_width)
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.hr_height / 2, self.hr_width / 2)
    }

    fn apply(&self, u: &ImageGrid) -> Result<ImageGrid> {
        u.ensure_shape(self.input_shape())?;
        let (h, w) = self.output_shape();
        Ok(ImageGrid::from_fn(h, w, |r, c| self.gain * u.data()[self.source_index(r, c)]))
    }

    fn apply_adjoint(&self, w: &ImageGrid) -> Result<ImageGrid> {
        w.ensure_shape(self.output_shape())?;
        let mut out = ImageGrid::zeros(self.hr_height, self.hr_width);
        for r in 0..w.height() {
            for c in 0..w.width() {
                out.data_mut()[self.source_index(r, c)] += self.gain * w.get(r, c);
            }
        }
        Ok(out)
    }
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("HR shape {h}x{w} must be even and non-empty")));
    }
    Ok(())
}
