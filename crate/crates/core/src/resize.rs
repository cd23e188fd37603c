//! Image resampling with half-pixel center alignment (no corner
//! alignment). Bilinear is used for image channels, nearest neighbor for
//! masks so binary values survive resizing.

use ndarray::{Array2, Array3};

#[inline]
fn src_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5
}

/// Bilinear resample of an `(H, W, C)` image, channels independent.
pub fn bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let fy = src_coord(oy, h, out_h);
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1i = ((y0 as isize) + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..out_w {
            let fx = src_coord(ox, w, out_w);
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1i = ((x0 as isize) + 1).clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                let top = src[[y0i, x0i, ch]] * (1.0 - tx) + src[[y0i, x1i, ch]] * tx;
                let bot = src[[y1i, x0i, ch]] * (1.0 - tx) + src[[y1i, x1i, ch]] * tx;
                out[[oy, ox, ch]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Nearest-neighbor resample of an `(H, W)` plane.
pub fn nearest(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = (src_coord(oy, h, out_h) + 0.5).floor().clamp(0.0, h as f64 - 1.0) as usize;
        for ox in 0..out_w {
            let sx = (src_coord(ox, w, out_w) + 0.5).floor().clamp(0.0, w as f64 - 1.0) as usize;
            out[[oy, ox]] = src[[sy, sx]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn bilinear_half_pixel_hand_example() {
        // 1x2 image [0, 1] doubled -> [0, 0.25, 0.75, 1]
        let mut src = Array3::<f64>::zeros((1, 2, 1));
        src[[0, 1, 0]] = 1.0;
        let out = bilinear(&src, 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (i, e) in expect.iter().enumerate() {
            assert!((out[[0, i, 0]] - e).abs() < 1e-12, "i={i}: {}", out[[0, i, 0]]);
        }
    }

    #[test]
    fn bilinear_preserves_constants() {
        let src = Array3::<f64>::from_elem((3, 5, 2), 0.3);
        let out = bilinear(&src, 6, 10);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn nearest_doubling_expands_blocks() {
        let src = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = nearest(&src, 4, 4);
        let expect = arr2(&[
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0],
        ]);
        assert_eq!(out, expect);
    }

    #[test]
    fn nearest_keeps_values_binary() {
        let src = arr2(&[[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        for (h, w) in [(2, 2), (5, 7), (9, 4)] {
            let out = nearest(&src, h, w);
            assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
