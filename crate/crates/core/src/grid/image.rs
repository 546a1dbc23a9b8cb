use std::fmt;

use crate::error::{Error, Result};

/// A 2-D raster of `f64` values stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    /// Builds a grid from row-major data. Rejects empty shapes, a data
    /// length that does not match, and non-finite values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty grid {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {i} of {height}x{width} grid")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn has_even_shape(&self) -> bool {
        self.height % 2 == 0 && self.width % 2 == 0
    }

    pub fn ensure_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::ShapeMismatch { expected: shape, got: self.shape() });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        other.ensure_shape(self.shape())?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { height: self.height, width: self.width, data })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        other.ensure_shape(self.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for ImageGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| format!("{:.6}", self.get(r, c))).collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

/// One of the four interleaved HR lattices, selected by the one-pixel shift
/// `(tau_row, tau_col)` applied before ×2 subsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubgridId {
    row: u8,
    col: u8,
}

impl SubgridId {
    /// The four subgrids in canonical order: (0,0), (0,1), (1,0), (1,1).
    pub const ALL: [SubgridId; 4] = [
        SubgridId { row: 0, col: 0 },
        SubgridId { row: 0, col: 1 },
        SubgridId { row: 1, col: 0 },
        SubgridId { row: 1, col: 1 },
    ];

    pub const EVEN: SubgridId = SubgridId { row: 0, col: 0 };

    pub fn new(row: u8, col: u8) -> Result<Self> {
        if row > 1 || col > 1 {
            return Err(Error::InvalidParameter(format!("subgrid offset ({row},{col}) outside {{0,1}}^2")));
        }
        Ok(Self { row, col })
    }

    pub fn row(self) -> usize {
        self.row as usize
    }

    pub fn col(self) -> usize {
        self.col as usize
    }

    /// Position in [`SubgridId::ALL`].
    pub fn index(self) -> usize {
        2 * self.row as usize + self.col as usize
    }

    pub fn from_index(index: usize) -> Self {
        Self::ALL[index]
    }

    /// The subgrid an HR pixel belongs to.
    pub fn of_pixel(row: usize, col: usize) -> Self {
        Self { row: (row % 2) as u8, col: (col % 2) as u8 }
    }

    pub fn label(self) -> &'static str {
        ["tau00", "tau01", "tau10", "tau11"][self.index()]
    }
}

impl fmt::Display for SubgridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Maps an LR pixel of subgrid `tau` to its HR row-major index. `hr_width`
/// is the HR width.
pub(crate) fn hr_index(lr_row: usize, lr_col: usize, tau: SubgridId, hr_width: usize) -> usize {
    (2 * lr_row + tau.row()) * hr_width + 2 * lr_col + tau.col()
}

/// Samples the pixels `2l + tau` of an even-sized image.
pub fn subgrid_extract(img: &ImageGrid, tau: SubgridId) -> Result<ImageGrid> {
    if !img.has_even_shape() {
        return Err(Error::Dimension(format!(
            "subgrid extraction needs even dimensions, got {}x{}",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height / 2, img.width / 2);
    Ok(ImageGrid::from_fn(h, w, |r, c| img.data[hr_index(r, c, tau, img.width)]))
}

/// Adjoint of [`subgrid_extract`]: places the values at `2l + tau` of a
/// zero image twice the size.
pub fn subgrid_embed(img: &ImageGrid, tau: SubgridId) -> ImageGrid {
    let mut out = ImageGrid::zeros(2 * img.height, 2 * img.width);
    let hr_width = out.width;
    for r in 0..img.height {
        for c in 0..img.width {
            out.data[hr_index(r, c, tau, hr_width)] = img.get(r, c);
        }
    }
    out
}

/// HR row-major indices of the pixels in subgrid `tau`, ordered by LR index.
pub fn subgrid_indices(hr_height: usize, hr_width: usize, tau: SubgridId) -> Vec<usize> {
    let (h, w) = (hr_height / 2, hr_width / 2);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(hr_index(r, c, tau, hr_width));
        }
    }
    out
}
