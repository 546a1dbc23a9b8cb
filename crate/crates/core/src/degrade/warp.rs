use crate::grid::ImageGrid;

/// Translates `img` by `shift = (rows, cols)` pixels: the output at `p` is
/// the bilinear sample of the input at `p − shift`, with periodic
/// boundaries. Integer shifts are exact circular shifts.
pub fn warp_translate(img: &ImageGrid, shift: (f64, f64)) -> ImageGrid {
    let (h, w) = img.shape();
    let (hi, wi) = (h as i64, w as i64);
    ImageGrid::from_fn(h, w, |r, c| {
        let y = r as f64 - shift.0;
        let x = c as f64 - shift.1;
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let r0 = (y0 as i64).rem_euclid(hi) as usize;
        let c0 = (x0 as i64).rem_euclid(wi) as usize;
        let r1 = (r0 + 1) % h;
        let c1 = (c0 + 1) % w;
        let top = if fx == 0.0 { img.get(r0, c0) } else { (1.0 - fx) * img.get(r0, c0) + fx * img.get(r0, c1) };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 { img.get(r1, c0) } else { (1.0 - fx) * img.get(r1, c0) + fx * img.get(r1, c1) };
        (1.0 - fy) * top + fy * bottom
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_identity() {
        let img = ImageGrid::from_fn(3, 4, |r, c| (r * 7 + c) as f64 * 0.3);
        assert_eq!(warp_translate(&img, (0.0, 0.0)), img);
    }

    #[test]
    fn integer_shift_is_circular() {
        let row = ImageGrid::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(warp_translate(&row, (0.0, 1.0)).data(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(warp_translate(&row, (0.0, -1.0)).data(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(warp_translate(&row, (0.0, 4.0)), row);
    }

    #[test]
    fn half_pixel_averages() {
        let row = ImageGrid::new(1, 4, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(warp_translate(&row, (0.0, 0.5)).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn preserves_sum_and_linearity() {
        let a = ImageGrid::from_fn(5, 6, |r, c| ((r * 13 + c * 7) % 5) as f64);
        let b = ImageGrid::from_fn(5, 6, |r, c| (r as f64 - c as f64).sin());
        let shift = (0.37, -1.81);
        let wa = warp_translate(&a, shift);
        assert!((wa.sum() - a.sum()).abs() < 1e-10);
        let lhs = warp_translate(&a.zip_map(&b, |x, y| 2.0 * x + y).unwrap(), shift);
        let rhs = wa.zip_map(&warp_translate(&b, shift), |x, y| 2.0 * x + y).unwrap();
        assert!(lhs.zip_map(&rhs, |x, y| x - y).unwrap().max_abs() < 1e-12);
    }
}
