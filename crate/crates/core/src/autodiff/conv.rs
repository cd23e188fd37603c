//! Spatial ops for the tape: convolution (im2col + GEMM), group
//! normalization, nearest upsampling, and pooling.

use super::{accumulate, BackFn, NodeId, Tape};
use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView3, ArrayViewMut3, Axis, Ix1, Ix4};

fn conv_out_side(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

fn im2col(
    x: ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut Array2<f64>,
) {
    let (c_in, h, w) = x.dim();
    let ho = conv_out_side(h, k, stride, pad);
    let wo = conv_out_side(w, k, stride, pad);
    debug_assert_eq!(out.dim(), (c_in * k * k, ho * wo));
    for c in 0..c_in {
        let plane = x.index_axis(Axis(0), c);
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut out_row = out.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..wo {
                            out_row[oy * wo + ox] = 0.0;
                        }
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        out_row[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &Array2<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    mut out: ArrayViewMut3<'_, f64>,
) {
    let (c_in, h, w) = out.dim();
    let ho = conv_out_side(h, k, stride, pad);
    let wo = conv_out_side(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c_in * k * k, ho * wo));
    for c in 0..c_in {
        let mut plane = out.index_axis_mut(Axis(0), c);
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((c * k + ki) * k + kj);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[[iy as usize, ix as usize]] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn conv_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (bsz, c_in, h, wd) = x.dim();
    let (c_out, c_in2, k, k2) = w.dim();
    assert_eq!(c_in, c_in2, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernels are square");
    let ho = conv_out_side(h, k, stride, pad);
    let wo = conv_out_side(wd, k, stride, pad);
    let w2 = w.view().into_shape_with_order((c_out, c_in * k * k)).unwrap();
    let mut y = Array4::<f64>::zeros((bsz, c_out, ho, wo));
    let mut cols = Array2::<f64>::zeros((c_in * k * k, ho * wo));
    for bi in 0..bsz {
        let yb = if k == 1 && stride == 1 && pad == 0 {
            let xmat = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c_in, h * wd))
                .unwrap();
            w2.dot(&xmat)
        } else {
            im2col(x.index_axis(Axis(0), bi), k, stride, pad, &mut cols);
            w2.dot(&cols)
        };
        let mut dst = y.index_axis_mut(Axis(0), bi);
        for c in 0..c_out {
            let bias = b[c];
            let src = yb.row(c);
            let mut plane = dst.index_axis_mut(Axis(0), c);
            for (o, s) in plane.iter_mut().zip(src.iter()) {
                *o = s + bias;
            }
        }
    }
    y
}

impl Tape {
    /// 2-D convolution with square kernel, zero padding, and bias:
    /// `x (B, Cin, H, W) * w (Cout, Cin, k, k) + b (Cout)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let bv = self.values[b.0].view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let y = conv_forward(&xv, &wv, &bv, stride, pad);
        let back: BackFn = Box::new(move |vals, g, grads| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let xv = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
            let wv = vals[w.0].view().into_dimensionality::<Ix4>().unwrap();
            let (bsz, c_in, h, wd) = xv.dim();
            let (c_out, _, k, _) = wv.dim();
            let (ho, wo) = (g4.dim().2, g4.dim().3);
            let w2 = wv.into_shape_with_order((c_out, c_in * k * k)).unwrap();

            let mut dw2 = Array2::<f64>::zeros((c_out, c_in * k * k));
            let mut db = Array1::<f64>::zeros(c_out);
            let mut dx = Array4::<f64>::zeros((bsz, c_in, h, wd));
            let mut cols = Array2::<f64>::zeros((c_in * k * k, ho * wo));
            for bi in 0..bsz {
                let gb = g4
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c_out, ho * wo))
                    .unwrap();
                for c in 0..c_out {
                    db[c] += gb.row(c).sum();
                }
                if k == 1 && stride == 1 && pad == 0 {
                    let xmat = xv
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((c_in, h * wd))
                        .unwrap();
                    general_mat_mul(1.0, &gb, &xmat.t(), 1.0, &mut dw2);
                    let dxb = w2.t().dot(&gb);
                    dx.index_axis_mut(Axis(0), bi)
                        .into_shape_with_order((c_in, h * wd))
                        .unwrap()
                        .assign(&dxb);
                } else {
                    im2col(xv.index_axis(Axis(0), bi), k, stride, pad, &mut cols);
                    general_mat_mul(1.0, &gb, &cols.t(), 1.0, &mut dw2);
                    let dcols = w2.t().dot(&gb);
                    col2im(&dcols, k, stride, pad, dx.index_axis_mut(Axis(0), bi));
                }
            }
            let dw = dw2.into_shape_with_order((c_out, c_in, k, k)).unwrap();
            accumulate(&mut grads[x.0], dx.into_dyn());
            accumulate(&mut grads[w.0], dw.into_dyn());
            accumulate(&mut grads[b.0], db.into_dyn());
        });
        self.push(y.into_dyn(), Some(back))
    }

    /// Group normalization over `(B, C, H, W)` with learned per-channel
    /// scale and shift. `groups` must divide `C`.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        assert!(groups >= 1 && c % groups == 0, "groups must divide channels");
        let gsize = c / groups;
        let n = (gsize * h * w) as f64;
        let gv = self.values[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.values[beta.0].view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);

        let mut y = Array4::<f64>::zeros((bsz, c, h, w));
        let mut means = Array2::<f64>::zeros((bsz, groups));
        let mut inv_stds = Array2::<f64>::zeros((bsz, groups));
        for bi in 0..bsz {
            for g in 0..groups {
                let chs = g * gsize..(g + 1) * gsize;
                let block = xv.slice(ndarray::s![bi, chs.clone(), .., ..]);
                let mean = block.sum() / n;
                let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + eps).sqrt();
                means[[bi, g]] = mean;
                inv_stds[[bi, g]] = inv_std;
                for ch in chs {
                    let ga = gv[ch];
                    let be = bv[ch];
                    let src = xv.slice(ndarray::s![bi, ch, .., ..]);
                    let mut dst = y.slice_mut(ndarray::s![bi, ch, .., ..]);
                    ndarray::Zip::from(&mut dst)
                        .and(&src)
                        .for_each(|d, &s| *d = (s - mean) * inv_std * ga + be);
                }
            }
        }

        let back: BackFn = Box::new(move |vals, g, grads| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let xv = vals[x.0].view().into_dimensionality::<Ix4>().unwrap();
            let gv = vals[gamma.0].view().into_dimensionality::<Ix1>().unwrap();
            let (bsz, c, h, w) = xv.dim();
            let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for bi in 0..bsz {
                for gi in 0..groups {
                    let chs = gi * gsize..(gi + 1) * gsize;
                    let mean = means[[bi, gi]];
                    let inv_std = inv_stds[[bi, gi]];
                    // accumulate the two reduction terms of the standard
                    // normalization backward pass
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ch in chs.clone() {
                        let ga = gv[ch];
                        let gb = g4.slice(ndarray::s![bi, ch, .., ..]);
                        let xb = xv.slice(ndarray::s![bi, ch, .., ..]);
                        for (gvv, xvv) in gb.iter().zip(xb.iter()) {
                            let xhat = (xvv - mean) * inv_std;
                            let dxhat = gvv * ga;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgamma[ch] += gvv * xhat;
                            dbeta[ch] += gvv;
                        }
                    }
                    for ch in chs {
                        let ga = gv[ch];
                        let gb = g4.slice(ndarray::s![bi, ch, .., ..]);
                        let xb = xv.slice(ndarray::s![bi, ch, .., ..]);
                        let mut db = dx.slice_mut(ndarray::s![bi, ch, .., ..]);
                        ndarray::Zip::from(&mut db).and(&gb).and(&xb).for_each(
                            |d, &gvv, &xvv| {
                                let xhat = (xvv - mean) * inv_std;
                                let dxhat = gvv * ga;
                                *d = inv_std
                                    * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                            },
                        );
                    }
                }
            }
            accumulate(&mut grads[x.0], dx.into_dyn());
            accumulate(&mut grads[gamma.0], dgamma.into_dyn());
            accumulate(&mut grads[beta.0], dbeta.into_dyn());
        });
        self.push(y.into_dyn(), Some(back))
    }

    /// Nearest-neighbor 2x upsampling of `(B, C, H, W)`.
    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = xv.dim();
        let mut y = Array4::<f64>::zeros((bsz, c, 2 * h, 2 * w));
        for bi in 0..bsz {
            for ch in 0..c {
                let src = xv.slice(ndarray::s![bi, ch, .., ..]);
                let mut dst = y.slice_mut(ndarray::s![bi, ch, .., ..]);
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dst[[i, j]] = src[[i / 2, j / 2]];
                    }
                }
            }
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_vals, g, grads| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (bsz, c, h2, w2) = g4.dim();
                let mut dx = Array4::<f64>::zeros((bsz, c, h2 / 2, w2 / 2));
                for bi in 0..bsz {
                    for ch in 0..c {
                        let src = g4.slice(ndarray::s![bi, ch, .., ..]);
                        let mut dst = dx.slice_mut(ndarray::s![bi, ch, .., ..]);
                        for i in 0..h2 {
                            for j in 0..w2 {
                                dst[[i / 2, j / 2]] += src[[i, j]];
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            })),
        )
    }

    /// Global average pool `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let (_bsz, _c, h, w) = xv.dim();
        let n = (h * w) as f64;
        let y = xv.sum_axis(Axis(3)).sum_axis(Axis(2)) / n;
        self.push(
            y.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let xs = vals[x.0].shape();
                let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
                for bi in 0..bsz {
                    for ch in 0..c {
                        let val = g2[[bi, ch]] / n;
                        dx.slice_mut(ndarray::s![bi, ch, .., ..]).fill(val);
                    }
                }
                accumulate(&mut grads[x.0], dx.into_dyn());
            })),
        )
    }
}
