//! im2col-based 2D convolution kernels (odd square kernels, same padding).
//!
//! The column buffer is laid out `[Cin*k*k, Ho*Wo]` so stride-1 gathers and
//! scatters reduce to contiguous row copies, and the matrix products run
//! through ndarray's gemm.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4};

/// Output spatial size for same-padded convolution.
pub fn out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * (kernel / 2) - kernel) / stride + 1
}

/// Gathers `x` ([Cin, H, W]) into `col` ([Cin*k*k, Ho*Wo]).
fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, col: &mut Array2<f64>) {
    let (cin, h, w) = x.dim();
    let pad = k / 2;
    let (ho, wo) = (out_dim(h, k, stride), out_dim(w, k, stride));
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().expect("contiguous col");
    let out_len = ho * wo;
    for ci in 0..cin {
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut cs[(ci * k * k + dy * k + dx) * out_len..][..out_len];
                if stride == 1 {
                    // valid output x-range for this tap is one contiguous run per row
                    if dy == 0 || dx == 0 || dy + 1 == k || dx + 1 == k {
                        row.fill(0.0);
                    }
                    let y0 = pad.saturating_sub(dy);
                    let y1 = (h + pad - dy).min(h);
                    let x0 = pad.saturating_sub(dx);
                    let x1 = (w + pad - dx).min(w);
                    for y in y0..y1 {
                        let sy = y + dy - pad;
                        let src = &xs[ci * h * w + sy * w + (x0 + dx - pad)..][..x1 - x0];
                        row[y * w + x0..y * w + x1].copy_from_slice(src);
                    }
                } else {
                    for oy in 0..ho {
                        let sy = (oy * stride + dy) as isize - pad as isize;
                        for ox in 0..wo {
                            let sx = (ox * stride + dx) as isize - pad as isize;
                            row[oy * wo + ox] = if sy >= 0
                                && (sy as usize) < h
                                && sx >= 0
                                && (sx as usize) < w
                            {
                                xs[ci * h * w + sy as usize * w + sx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` gradients back onto the input gradient.
fn col2im_add(dcol: &Array2<f64>, k: usize, stride: usize, dx: &mut ndarray::ArrayViewMut3<f64>) {
    let (cin, h, w) = dx.dim();
    let pad = k / 2;
    let (ho, wo) = (out_dim(h, k, stride), out_dim(w, k, stride));
    let cs = dcol.as_slice().expect("contiguous col");
    let xs = dx.as_slice_mut().expect("contiguous grad");
    let out_len = ho * wo;
    for ci in 0..cin {
        for dy in 0..k {
            for dx_ in 0..k {
                let row = &cs[(ci * k * k + dy * k + dx_) * out_len..][..out_len];
                if stride == 1 {
                    let y0 = pad.saturating_sub(dy);
                    let y1 = (h + pad - dy).min(h);
                    let x0 = pad.saturating_sub(dx_);
                    let x1 = (w + pad - dx_).min(w);
                    for y in y0..y1 {
                        let sy = y + dy - pad;
                        let dst = &mut xs[ci * h * w + sy * w + (x0 + dx_ - pad)..][..x1 - x0];
                        for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                            *d += s;
                        }
                    }
                } else {
                    for oy in 0..ho {
                        let sy = (oy * stride + dy) as isize - pad as isize;
                        for ox in 0..wo {
                            let sx = (ox * stride + dx_) as isize - pad as isize;
                            if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                                xs[ci * h * w + sy as usize * w + sx as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded convolution of `x` ([B, Cin, H, W]) with `w`
/// ([Cout, Cin, k, k]) and per-channel bias.
pub fn forward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: &Array1<f64>,
    stride: usize,
) -> Array4<f64> {
    let (batch, cin, h, wd) = x.dim();
    let (cout, cin_w, k, k2) = w.dim();
    assert_eq!(cin, cin_w, "conv input channels");
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(b.len(), cout);
    let (ho, wo) = (out_dim(h, k, stride), out_dim(wd, k, stride));
    let kk = cin * k * k;
    let w_mat = w.to_shape((cout, kk)).expect("weight reshape");

    let mut out = Array4::zeros((batch, cout, ho, wo));
    let mut col = Array2::zeros((kk, ho * wo));
    for bi in 0..batch {
        im2col(&x.index_axis(ndarray::Axis(0), bi), k, stride, &mut col);
        let y = w_mat.dot(&col); // [Cout, Ho*Wo]
        let mut dst = out.index_axis_mut(ndarray::Axis(0), bi);
        let dsts = dst.as_slice_mut().unwrap();
        let ys = y.as_slice().unwrap();
        for co in 0..cout {
            let bias = b[co];
            for (d, s) in dsts[co * ho * wo..][..ho * wo].iter_mut().zip(&ys[co * ho * wo..][..ho * wo]) {
                *d = s + bias;
            }
        }
    }
    out
}

/// Gradients of [`forward`] w.r.t. input, weight and bias.
///
/// The column buffer is regenerated per element rather than cached, trading
/// a second gather pass for bounded memory.
pub fn backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    stride: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (batch, cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (ho, wo) = (out_dim(h, k, stride), out_dim(wd, k, stride));
    assert_eq!(dy.dim(), (batch, cout, ho, wo), "conv grad shape");
    let kk = cin * k * k;
    let w_mat = w.to_shape((cout, kk)).expect("weight reshape");

    let mut dx = Array4::zeros((batch, cin, h, wd));
    let mut dw_mat = Array2::<f64>::zeros((cout, kk));
    let mut db = Array1::<f64>::zeros(cout);
    let mut col = Array2::zeros((kk, ho * wo));
    for bi in 0..batch {
        let dy_b = dy.index_axis(ndarray::Axis(0), bi);
        let dy_mat = dy_b.to_shape((cout, ho * wo)).expect("grad reshape");
        im2col(&x.index_axis(ndarray::Axis(0), bi), k, stride, &mut col);
        dw_mat = dw_mat + dy_mat.dot(&col.t());
        let dcol = w_mat.t().dot(&dy_mat);
        col2im_add(&dcol, k, stride, &mut dx.index_axis_mut(ndarray::Axis(0), bi));
        for co in 0..cout {
            db[co] += dy_mat.row(co).sum();
        }
    }
    let dw = dw_mat
        .into_shape_with_order((cout, cin, k, k))
        .expect("weight grad reshape");
    (dx, dw, db)
}
