//! Convolution and pooling kernels.
//!
//! Convolution ships in two deliberately independent implementations: a
//! direct loop nest and an im2col expansion feeding the matrix product
//! kernels. The tape uses im2col; the direct path stays available as an
//! internal oracle and the two are required to agree to 1e-6.

use crate::linalg::{matmul, matmul_nt, matmul_tn, sum_rows};
use crate::{Error, Real, Result, Tensor};

/// Output spatial extents for one axis, or an error when non-positive.
fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {} does not fit input {} with pad {}", k, input, pad),
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = out_extent(h, kh, stride, pad)?;
    let wo = out_extent(wd, kw, stride, pad)?;
    Ok((b, c, h, wd, o, kh.max(kw), ho, wo))
}

/// Direct loop-nest convolution. `x [B,C,H,W]`, `w [O,C,k,k]`, optional
/// per-channel bias `[O]`; zero padding, square kernels.
pub fn conv2d_direct<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, wd, o, k, ho, wo) = conv_shapes(x, w, stride, pad)?;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            let base_b = bias.map(|t| t.data()[oi]).unwrap_or_else(T::zero);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = base_b;
                    for ci in 0..c {
                        for ki in 0..k {
                            let ih = oh * stride + ki;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let ih = ih - pad;
                            for kj in 0..k {
                                let iw = ow * stride + kj;
                                if iw < pad || iw - pad >= wd {
                                    continue;
                                }
                                let iw = iw - pad;
                                let xv = xd[((bi * c + ci) * h + ih) * wd + iw];
                                let wv = wdat[((oi * c + ci) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], out)
}

/// Patch matrix `[B*Ho*Wo, C*k*k]` for im2col convolution.
fn im2col<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let xd = x.data();
    let cols = c * k * k;
    let mut p = vec![T::zero(); b * ho * wo * cols];
    for bi in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((bi * ho + oh) * wo + ow) * cols;
                for ci in 0..c {
                    for ki in 0..k {
                        let ih = oh * stride + ki;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let ih = ih - pad;
                        for kj in 0..k {
                            let iw = ow * stride + kj;
                            if iw < pad || iw - pad >= wd {
                                continue;
                            }
                            let iw = iw - pad;
                            p[row + (ci * k + ki) * k + kj] =
                                xd[((bi * c + ci) * h + ih) * wd + iw];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * ho * wo, cols], p).expect("patch buffer length")
}

/// Scatter-add of patch gradients back into input layout.
fn col2im<T: Real>(
    dp: &Tensor<T>,
    xshape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let (b, c, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let cols = c * k * k;
    let dpd = dp.data();
    let mut dx = vec![T::zero(); b * c * h * wd];
    for bi in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((bi * ho + oh) * wo + ow) * cols;
                for ci in 0..c {
                    for ki in 0..k {
                        let ih = oh * stride + ki;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let ih = ih - pad;
                        for kj in 0..k {
                            let iw = ow * stride + kj;
                            if iw < pad || iw - pad >= wd {
                                continue;
                            }
                            let iw = iw - pad;
                            dx[((bi * c + ci) * h + ih) * wd + iw] +=
                                dpd[row + (ci * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(xshape.to_vec(), dx).expect("input gradient length")
}

/// Permute `[B,O,Ho,Wo] <-> [B*Ho*Wo, O]`.
fn to_mat<T: Real>(y: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let (b, o, ho, wo) = (s[0], s[1], s[2], s[3]);
    let yd = y.data();
    let mut m = vec![T::zero(); b * ho * wo * o];
    for bi in 0..b {
        for oi in 0..o {
            for oh in 0..ho {
                for ow in 0..wo {
                    m[((bi * ho + oh) * wo + ow) * o + oi] =
                        yd[((bi * o + oi) * ho + oh) * wo + ow];
                }
            }
        }
    }
    Tensor::new(vec![b * ho * wo, o], m).expect("matrix length")
}

fn from_mat<T: Real>(m: &Tensor<T>, b: usize, o: usize, ho: usize, wo: usize) -> Tensor<T> {
    let md = m.data();
    let mut y = vec![T::zero(); b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            for oh in 0..ho {
                for ow in 0..wo {
                    y[((bi * o + oi) * ho + oh) * wo + ow] =
                        md[((bi * ho + oh) * wo + ow) * o + oi];
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], y).expect("output length")
}

/// im2col convolution; the tape's forward path.
pub fn conv2d_im2col<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (b, c, _h, _wd, o, k, ho, wo) = conv_shapes(x, w, stride, pad)?;
    let p = im2col(x, k, stride, pad, ho, wo);
    let km = w.reshaped(vec![o, c * k * k])?;
    let mut ymat = matmul_nt(&p, &km)?;
    if let Some(bt) = bias {
        ymat = crate::linalg::add_bias_rows(&ymat, bt)?;
    }
    Ok(from_mat(&ymat, b, o, ho, wo))
}

/// Gradients of the convolution wrt input, weights, and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, _h, _wd, o, k, ho, wo) = conv_shapes(x, w, stride, pad)?;
    let dymat = to_mat(dy);
    let p = im2col(x, k, stride, pad, ho, wo);
    let km = w.reshaped(vec![o, c * k * k])?;

    let dkm = matmul_tn(&dymat, &p)?; // [O, C*k*k]
    let dw = dkm.reshaped(vec![o, c, k, k])?;
    let dp = matmul(&dymat, &km)?; // [B*Ho*Wo, C*k*k]
    let dx = col2im(&dp, x.shape(), k, stride, pad, ho, wo);
    let db = sum_rows(&dymat)?;
    let _ = (b, ho, wo);
    Ok((dx, dw, db))
}

// ---- pooling ---------------------------------------------------------------

/// 2x2 max pooling with stride 2. Trailing odd rows/columns are dropped.
/// Returns the pooled tensor and the flat input index of each maximum.
pub fn maxpool2x2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::invalid(
            "maxpool2x2",
            format!("needs [B,C,H>=2,W>=2], got {:?}", s),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for bi in 0..b {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_idx = ((bi * c + ci) * h + oh * 2) * w + ow * 2;
                    let mut best = xd[best_idx];
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((bi * c + ci) * h + oh * 2 + di) * w + ow * 2 + dj;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = ((bi * c + ci) * ho + oh) * wo + ow;
                    out[oidx] = best;
                    arg[oidx] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ho, wo], out)?, arg))
}

pub fn maxpool2x2_backward<T: Real>(
    xshape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = vec![T::zero(); xshape.iter().product()];
    for (o, &src) in argmax.iter().enumerate() {
        dx[src] += dy.data()[o];
    }
    Tensor::new(xshape.to_vec(), dx).expect("pool gradient length")
}

/// Global average pooling `[B,C,H,W] -> [B,C]`.
pub fn avgpool_global<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(
            "avgpool_global",
            format!("needs [B,C,H,W], got {:?}", s),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = T::zero();
            let base = ((bi * c + ci) * h) * w;
            for i in 0..h * w {
                acc += xd[base + i];
            }
            out[bi * c + ci] = acc * inv;
        }
    }
    Tensor::new(vec![b, c], out)
}

pub fn avgpool_global_backward<T: Real>(xshape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut dx = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let g = dy.data()[bi * c + ci] * inv;
            let base = ((bi * c + ci) * h) * w;
            for i in 0..h * w {
                dx[base + i] = g;
            }
        }
    }
    Tensor::new(xshape.to_vec(), dx).expect("pool gradient length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use proptest::prelude::*;

    fn ones(shape: Vec<usize>) -> Tensor<f64> {
        Tensor::filled(shape, 1.0)
    }

    #[test]
    fn center_one_kernel_is_identity() {
        let x = Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64 + 1.0);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::new(vec![1, 1, 3, 3], w).unwrap();
        let y = conv2d_direct(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
        let y2 = conv2d_im2col(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y2.data(), x.data());
    }

    #[test]
    fn all_ones_window_counts_overlap() {
        let x = ones(vec![1, 1, 3, 3]);
        let w = ones(vec![1, 1, 3, 3]);
        let y = conv2d_direct(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_input_zero_output() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 4, 4]);
        let w = Tensor::from_fn(vec![5, 3, 3, 3], |i| (i % 7) as f64 - 3.0);
        let y = conv2d_im2col(&x, &w, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![2, 4, 3, 3]);
        assert!(conv2d_direct(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        assert!(conv2d_direct(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn stride_two_downsample_shape() {
        let x = Tensor::<f64>::zeros(vec![2, 4, 8, 8]);
        let w = Tensor::<f64>::zeros(vec![8, 4, 3, 3]);
        let y = conv2d_im2col(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
        // 1x1 stride-2 projection.
        let p = Tensor::<f64>::zeros(vec![8, 4, 1, 1]);
        let y = conv2d_im2col(&x, &p, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
    }

    #[test]
    fn maxpool_tracks_argmax_and_drops_odd_edges() {
        let x = Tensor::new(
            vec![1, 1, 3, 3],
            vec![1.0, 5.0, 9.0, 2.0, 3.0, 7.0, 8.0, 4.0, 6.0],
        )
        .unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![1]);
        let dy = Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let dx = maxpool2x2_backward(&[1, 1, 3, 3], &arg, &dy);
        assert_eq!(dx.data()[1], 2.5);
        assert_eq!(dx.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn global_average_pool() {
        let x = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64);
        let y = avgpool_global(&x).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5]);
        let dy = Tensor::new(vec![1, 2], vec![4.0, 8.0]).unwrap();
        let dx = avgpool_global_backward(&[1, 2, 2, 2], &dy);
        assert_eq!(dx.data()[0], 1.0);
        assert_eq!(dx.data()[7], 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// The two convolution routes must agree to 1e-6.
        #[test]
        fn direct_and_im2col_agree(
            b in 1usize..3,
            c in 1usize..4,
            o in 1usize..4,
            hw in 3usize..7,
            stride in 1usize..3,
            k_is_three in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let (k, pad) = if k_is_three { (3, 1) } else { (1, 0) };
            let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
            let mut next = move || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s as f64 / u64::MAX as f64) * 2.0 - 1.0
            };
            let x = Tensor::from_fn(vec![b, c, hw, hw], |_| next());
            let w = Tensor::from_fn(vec![o, c, k, k], |_| next());
            let bias = Tensor::from_fn(vec![o], |_| next());
            let y1 = conv2d_direct(&x, &w, Some(&bias), stride, pad).unwrap();
            let y2 = conv2d_im2col(&x, &w, Some(&bias), stride, pad).unwrap();
            prop_assert!(max_abs_diff(&y1, &y2) <= 1e-6);
        }
    }
}
