//! Rasters, subgrid indexing and small dense linear algebra.

mod image;
mod matrix;
pub mod raster;

pub use image::{subgrid_embed, subgrid_extract, subgrid_indices, ImageGrid, SubgridId};
pub use matrix::{spd_solve, DenseMatrix, SpdFactor, SpdSolution};
