//! Dense numeric kernels shared by the graph ops: matmul with transpose
//! flags, im2col convolution with its backward pieces, nearest-neighbor
//! upsampling, and group/layer normalization forward + backward.
//!
//! All of them are plain functions over `ndarray` arrays with no tape
//! involvement, which keeps them independently testable.

use crate::elem::Elem;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn};

/// Copy into a fresh standard-layout array with a new shape. Uses logical
/// (row-major) element order, so it is layout-safe for any input view.
pub fn reshaped<E: Elem>(a: &ArrayD<E>, shape: &[usize]) -> ArrayD<E> {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape {:?} -> {:?}: element count differs", a.shape(), shape);
    let v: Vec<E> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("checked length")
}

/// `op(a) . op(b)` where `op` transposes when the flag is set. 2-D only.
pub fn matmul<E: Elem>(a: &ArrayD<E>, b: &ArrayD<E>, ta: bool, tb: bool) -> ArrayD<E> {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
    let a2 = if ta { a2.reversed_axes() } else { a2 };
    let b2 = if tb { b2.reversed_axes() } else { b2 };
    assert_eq!(
        a2.ncols(),
        b2.nrows(),
        "matmul inner dims differ: {:?} x {:?}",
        a2.dim(),
        b2.dim()
    );
    a2.dot(&b2).into_dyn()
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "conv kernel {k} larger than padded input {len}+2*{pad}");
    (len + 2 * pad - k) / stride + 1
}

/// Unfold `(C, H, W)` into `(C*KH*KW, OH*OW)` patches.
pub fn im2col<E: Elem>(
    x: ArrayView3<E>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<E> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let owned;
    let xs: &[E] = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().expect("owned array is contiguous")
        }
    };
    let mut col = vec![E::zero(); c * kh * kw * oh * ow];
    for ci in 0..c {
        let xc = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out_base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let in_row = &xc[ii as usize * w..(ii as usize + 1) * w];
                    let ob = out_base + oi * ow;
                    if stride == 1 {
                        // Contiguous span: jj = oj + kj - pad stays in [0, w).
                        let oj_lo = pad.saturating_sub(kj);
                        let oj_hi = (w + pad - kj).min(ow);
                        if oj_lo < oj_hi {
                            let src_lo = oj_lo + kj - pad;
                            col[ob + oj_lo..ob + oj_hi]
                                .copy_from_slice(&in_row[src_lo..src_lo + (oj_hi - oj_lo)]);
                        }
                    } else {
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            col[ob + oj] = in_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kh * kw, oh * ow), col).expect("computed length")
}

/// Fold `(C*KH*KW, OH*OW)` patch gradients back onto `(C, H, W)`.
pub fn col2im<E: Elem>(
    col: ArrayView2<E>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<E> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    assert_eq!(col.dim(), (c * kh * kw, oh * ow), "col2im shape mismatch");
    let owned;
    let cs: &[E] = match col.as_slice() {
        Some(s) => s,
        None => {
            owned = col.to_owned();
            owned.as_slice().expect("owned array is contiguous")
        }
    };
    let mut xs = vec![E::zero(); c * h * w];
    for ci in 0..c {
        let xc = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let in_base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let x_row = &mut xc[ii as usize * w..(ii as usize + 1) * w];
                    let ib = in_base + oi * ow;
                    if stride == 1 {
                        let oj_lo = pad.saturating_sub(kj);
                        let oj_hi = (w + pad - kj).min(ow);
                        if oj_lo < oj_hi {
                            let dst_lo = oj_lo + kj - pad;
                            let src = &cs[ib + oj_lo..ib + oj_hi];
                            let dst = &mut x_row[dst_lo..dst_lo + src.len()];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    } else {
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            x_row[jj as usize] = x_row[jj as usize] + cs[ib + oj];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), xs).expect("computed length")
}

/// Convolution forward: x `(C,H,W)`, w `(Cout,Cin,KH,KW)` -> `(Cout,OH,OW)`.
pub fn conv2d<E: Elem>(x: &ArrayD<E>, w: &ArrayD<E>, stride: usize, pad: usize) -> ArrayD<E> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("conv input must be (C,H,W)");
    let (c, h, wd) = x3.dim();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be (Cout,Cin,KH,KW)");
    let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, c, "conv weight expects {cin} input channels, got {c}");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    let col = im2col(x3, kh, kw, stride, pad);
    let w2 = reshaped(w, &[cout, cin * kh * kw]);
    let w2 = w2.view().into_dimensionality::<Ix2>().expect("2-d");
    let y2 = w2.dot(&col);
    reshaped(&y2.into_dyn(), &[cout, oh, ow])
}

/// Convolution backward: returns `(dX, dW)`; the patch matrix is recomputed.
pub fn conv2d_backward<E: Elem>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    dy: &ArrayD<E>,
    stride: usize,
    pad: usize,
) -> (ArrayD<E>, ArrayD<E>) {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("conv input must be (C,H,W)");
    let (c, h, wd) = x3.dim();
    let ws = w.shape();
    let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(wd, kw, stride, pad);
    assert_eq!(dy.shape(), &[cout, oh, ow], "conv dY shape mismatch");

    let col = im2col(x3, kh, kw, stride, pad);
    let dy2 = reshaped(dy, &[cout, oh * ow]);
    let dy2 = dy2.view().into_dimensionality::<Ix2>().expect("2-d");

    let dw2 = dy2.dot(&col.t());
    let dw = reshaped(&dw2.into_dyn(), &[cout, cin, kh, kw]);

    let w2 = reshaped(w, &[cout, cin * kh * kw]);
    let w2 = w2.view().into_dimensionality::<Ix2>().expect("2-d");
    let dcol = w2.t().dot(&dy2);
    let dx = col2im(dcol.view(), c, h, wd, kh, kw, stride, pad);
    (dx.into_dyn(), dw)
}

/// Nearest-neighbor 2x upsampling of `(C,H,W)`.
pub fn upsample2x<E: Elem>(x: &ArrayD<E>) -> ArrayD<E> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("upsample input must be (C,H,W)");
    let (c, h, w) = x3.dim();
    let mut y = Array3::<E>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x3[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    y.into_dyn()
}

/// Gradient of [`upsample2x`]: sum each 2x2 block.
pub fn upsample2x_backward<E: Elem>(dy: &ArrayD<E>) -> ArrayD<E> {
    let d3 = dy.view().into_dimensionality::<Ix3>().expect("(C,2H,2W)");
    let (c, h2, w2) = d3.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "upsample grad dims must be even");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<E>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[(ci, i, j)] = d3[(ci, 2 * i, 2 * j)]
                    + d3[(ci, 2 * i + 1, 2 * j)]
                    + d3[(ci, 2 * i, 2 * j + 1)]
                    + d3[(ci, 2 * i + 1, 2 * j + 1)];
            }
        }
    }
    dx.into_dyn()
}

/// Group normalization over `(C,H,W)` with per-channel affine.
pub fn group_norm<E: Elem>(
    x: &ArrayD<E>,
    gamma: &ArrayD<E>,
    beta: &ArrayD<E>,
    groups: usize,
    eps: f64,
) -> ArrayD<E> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("(C,H,W)");
    let (c, h, w) = x3.dim();
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    assert_eq!(gamma.len(), c, "gamma length");
    assert_eq!(beta.len(), c, "beta length");
    let per = c / groups;
    let n = E::from_f64((per * h * w) as f64);
    let epse = E::from_f64(eps);
    let mut y = Array3::<E>::zeros((c, h, w));
    for g in 0..groups {
        let sl = x3.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
        let mean = sl.sum() / n;
        let mut var = E::zero();
        for &v in sl.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let istd = E::one() / (var + epse).sqrt();
        for ci in 0..per {
            let ch = g * per + ci;
            let ga = gamma[[ch]];
            let be = beta[[ch]];
            for i in 0..h {
                for j in 0..w {
                    let xh = (x3[(ch, i, j)] - mean) * istd;
                    y[(ch, i, j)] = ga * xh + be;
                }
            }
        }
    }
    y.into_dyn()
}

/// Backward of [`group_norm`]: returns `(dX, dGamma, dBeta)`.
pub fn group_norm_backward<E: Elem>(
    x: &ArrayD<E>,
    gamma: &ArrayD<E>,
    dy: &ArrayD<E>,
    groups: usize,
    eps: f64,
) -> (ArrayD<E>, ArrayD<E>, ArrayD<E>) {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("(C,H,W)");
    let d3 = dy.view().into_dimensionality::<Ix3>().expect("(C,H,W)");
    let (c, h, w) = x3.dim();
    let per = c / groups;
    let n = E::from_f64((per * h * w) as f64);
    let epse = E::from_f64(eps);
    let mut dx = Array3::<E>::zeros((c, h, w));
    let mut dgamma = ndarray::Array1::<E>::zeros(c);
    let mut dbeta = ndarray::Array1::<E>::zeros(c);
    for g in 0..groups {
        let sl = x3.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
        let mean = sl.sum() / n;
        let mut var = E::zero();
        for &v in sl.iter() {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let istd = E::one() / (var + epse).sqrt();

        // First pass: per-channel affine grads and the two group means that
        // the dx formula needs.
        let mut mean_dxhat = E::zero();
        let mut mean_dxhat_xhat = E::zero();
        for ci in 0..per {
            let ch = g * per + ci;
            let ga = gamma[[ch]];
            for i in 0..h {
                for j in 0..w {
                    let xh = (x3[(ch, i, j)] - mean) * istd;
                    let gy = d3[(ch, i, j)];
                    dgamma[ch] = dgamma[ch] + gy * xh;
                    dbeta[ch] = dbeta[ch] + gy;
                    let dxh = gy * ga;
                    mean_dxhat = mean_dxhat + dxh;
                    mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh;
                }
            }
        }
        mean_dxhat = mean_dxhat / n;
        mean_dxhat_xhat = mean_dxhat_xhat / n;

        for ci in 0..per {
            let ch = g * per + ci;
            let ga = gamma[[ch]];
            for i in 0..h {
                for j in 0..w {
                    let xh = (x3[(ch, i, j)] - mean) * istd;
                    let dxh = d3[(ch, i, j)] * ga;
                    dx[(ch, i, j)] = istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                }
            }
        }
    }
    (dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn())
}

/// Row-wise layer norm over `(R,D)` with shared affine `(D)`.
pub fn layer_norm_rows<E: Elem>(
    x: &ArrayD<E>,
    gamma: &ArrayD<E>,
    beta: &ArrayD<E>,
    eps: f64,
) -> ArrayD<E> {
    let x2 = x.view().into_dimensionality::<Ix2>().expect("(R,D)");
    let (r, d) = x2.dim();
    assert_eq!(gamma.len(), d);
    assert_eq!(beta.len(), d);
    let n = E::from_f64(d as f64);
    let epse = E::from_f64(eps);
    let mut y = Array2::<E>::zeros((r, d));
    for i in 0..r {
        let row = x2.row(i);
        let mean = row.sum() / n;
        let mut var = E::zero();
        for &v in row.iter() {
            let dv = v - mean;
            var = var + dv * dv;
        }
        var = var / n;
        let istd = E::one() / (var + epse).sqrt();
        for j in 0..d {
            y[(i, j)] = gamma[[j]] * (row[j] - mean) * istd + beta[[j]];
        }
    }
    y.into_dyn()
}

/// Backward of [`layer_norm_rows`]: returns `(dX, dGamma, dBeta)`.
pub fn layer_norm_rows_backward<E: Elem>(
    x: &ArrayD<E>,
    gamma: &ArrayD<E>,
    dy: &ArrayD<E>,
    eps: f64,
) -> (ArrayD<E>, ArrayD<E>, ArrayD<E>) {
    let x2 = x.view().into_dimensionality::<Ix2>().expect("(R,D)");
    let d2 = dy.view().into_dimensionality::<Ix2>().expect("(R,D)");
    let (r, d) = x2.dim();
    let n = E::from_f64(d as f64);
    let epse = E::from_f64(eps);
    let mut dx = Array2::<E>::zeros((r, d));
    let mut dgamma = ndarray::Array1::<E>::zeros(d);
    let mut dbeta = ndarray::Array1::<E>::zeros(d);
    for i in 0..r {
        let row = x2.row(i);
        let mean = row.sum() / n;
        let mut var = E::zero();
        for &v in row.iter() {
            let dv = v - mean;
            var = var + dv * dv;
        }
        var = var / n;
        let istd = E::one() / (var + epse).sqrt();
        let mut mean_dxhat = E::zero();
        let mut mean_dxhat_xhat = E::zero();
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            let gy = d2[(i, j)];
            dgamma[j] = dgamma[j] + gy * xh;
            dbeta[j] = dbeta[j] + gy;
            let dxh = gy * gamma[[j]];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh;
        }
        mean_dxhat = mean_dxhat / n;
        mean_dxhat_xhat = mean_dxhat_xhat / n;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            let dxh = d2[(i, j)] * gamma[[j]];
            dx[(i, j)] = istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    (dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn())
}

/// Numerically stable row softmax of `(R,C)`.
pub fn softmax_rows<E: Elem>(x: &ArrayD<E>) -> ArrayD<E> {
    let x2 = x.view().into_dimensionality::<Ix2>().expect("(R,C)");
    let (r, c) = x2.dim();
    let mut y = Array2::<E>::zeros((r, c));
    for i in 0..r {
        let row = x2.row(i);
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut z = E::zero();
        for j in 0..c {
            let e = (row[j] - mx).exp();
            y[(i, j)] = e;
            z = z + e;
        }
        for j in 0..c {
            y[(i, j)] = y[(i, j)] / z;
        }
    }
    y.into_dyn()
}

/// Mean over all but the channel axis is not needed; this sums `(C,H,W)`
/// gradients per channel for the bias backward.
pub fn sum_per_channel<E: Elem>(dy: &ArrayD<E>) -> ArrayD<E> {
    let d3 = dy.view().into_dimensionality::<Ix3>().expect("(C,H,W)");
    let (c, _, _) = d3.dim();
    let mut out = ndarray::Array1::<E>::zeros(c);
    for ci in 0..c {
        out[ci] = d3.index_axis(Axis(0), ci).sum();
    }
    out.into_dyn()
}
