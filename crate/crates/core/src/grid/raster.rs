//! Raw raster files: little-endian `f64` values in row-major order, with a
//! one-line `height width` sidecar of the same basename and extension
//! `.hdr`.

use std::fs;
use std::path::{Path, PathBuf};

use super::ImageGrid;
use crate::error::{Error, Result};

pub fn header_path(raster: &Path) -> PathBuf {
    raster.with_extension("hdr")
}

pub fn write_raster(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * img.len());
    for v in img.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(header_path(path), format!("{} {}\n", img.height(), img.width()))?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<ImageGrid> {
    let hdr_path = header_path(path);
    let header = fs::read_to_string(&hdr_path)?;
    let bad = |reason: &str| Error::Format { path: hdr_path.clone(), reason: reason.to_string() };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(bad("expected `height width`"));
    }
    let height: usize = fields[0].parse().map_err(|_| bad("height is not an integer"))?;
    let width: usize = fields[1].parse().map_err(|_| bad("width is not an integer"))?;

    let bytes = fs::read(path)?;
    if bytes.len() != 8 * height * width {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes for a {height}x{width} raster", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ImageGrid::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.raw");
        let img = ImageGrid::from_fn(3, 5, |r, c| (r as f64 + 0.1).powf(c as f64 + 0.3) - 1e-300);
        write_raster(&path, &img).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("img.hdr")).unwrap(), "3 5\n");
        assert_eq!(fs::read(&path).unwrap().len(), 3 * 5 * 8);
        let back = read_raster(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.raw");
        write_raster(&path, &ImageGrid::new(1, 2, vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[8..], &(-2.5f64).to_le_bytes());
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.raw");
        fs::write(&path, [0u8; 16]).unwrap();
        fs::write(dir.path().join("bad.hdr"), "3 3\n").unwrap();
        assert!(matches!(read_raster(&path), Err(Error::Format { .. })));
    }
}
