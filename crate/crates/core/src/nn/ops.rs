//! Forward/backward kernels for the ops used by the segmentation networks.
//!
//! Convolutions go through im2col + a single matrix product so the bulk of
//! the arithmetic runs inside `ndarray`'s gemm. The column buffer is rebuilt
//! during the backward pass instead of being stored on the tape; that keeps
//! per-sample memory bounded by the activations alone.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView4, Axis};

use super::Tensor;

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Lays out `kh*kw` shifted copies of `x` as rows of a `(c_in*kh*kw, h*w)`
/// matrix. Out-of-bounds taps are zero.
fn im2col(x: &Tensor, kh: usize, kw: usize, pad: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, h * w));
    let x_slice = x.as_slice().expect("input must be contiguous");
    let cols_slice = cols.as_slice_mut().expect("cols is contiguous");
    for ci in 0..c_in {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let row_base = row * h * w;
                for i in 0..h {
                    let src_i = i as isize + di as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    // Destination j range for which 0 <= j + dj - pad < w.
                    let off = dj as isize - pad as isize;
                    let j_lo = (-off).max(0) as usize;
                    let j_hi = ((w as isize - off).min(w as isize)) as usize;
                    if j_lo >= j_hi {
                        continue;
                    }
                    let src_base = (ci * h + src_i as usize) * w;
                    let src_lo = (j_lo as isize + off) as usize;
                    let dst_base = row_base + i * w;
                    cols_slice[dst_base + j_lo..dst_base + j_hi]
                        .copy_from_slice(&x_slice[src_base + src_lo..src_base + src_lo + (j_hi - j_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image grid.
fn col2im(
    gcols: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Tensor {
    let mut gx = Array3::<f64>::zeros((c_in, h, w));
    let g_slice = gcols.as_slice().expect("gcols is contiguous");
    let gx_slice = gx.as_slice_mut().expect("gx is contiguous");
    for ci in 0..c_in {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let row_base = row * h * w;
                for i in 0..h {
                    let src_i = i as isize + di as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    let off = dj as isize - pad as isize;
                    let j_lo = (-off).max(0) as usize;
                    let j_hi = ((w as isize - off).min(w as isize)) as usize;
                    if j_lo >= j_hi {
                        continue;
                    }
                    let dst_base = (ci * h + src_i as usize) * w;
                    let dst_lo = (j_lo as isize + off) as usize;
                    let src_base = row_base + i * w;
                    for j in 0..(j_hi - j_lo) {
                        gx_slice[dst_base + dst_lo + j] += g_slice[src_base + j_lo + j];
                    }
                }
            }
        }
    }
    gx
}

/// Same-padded stride-1 convolution: `(c_in,h,w) -> (c_out,h,w)`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &ArrayView4<'_, f64>,
    bias: &ArrayView1<'_, f64>,
    pad: usize,
) -> Tensor {
    let (c_in, h, w) = x.dim();
    let (c_out, wc_in, kh, kw) = weight.dim();
    assert_eq!(c_in, wc_in, "conv input channels mismatch");
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("weight reshape");
    let out_mat = if kh == 1 && kw == 1 {
        let x_mat = x.to_shape((c_in, h * w)).expect("input reshape");
        w_mat.dot(&x_mat)
    } else {
        let cols = im2col(x, kh, kw, pad);
        w_mat.dot(&cols)
    };
    let mut out = out_mat
        .into_shape_with_order((c_out, h, w))
        .expect("output reshape");
    for (mut ch, &b) in out.outer_iter_mut().zip(bias.iter()) {
        ch += b;
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &ArrayView4<'_, f64>,
    gout: &Tensor,
    pad: usize,
) -> (Tensor, Array4<f64>, Array1<f64>) {
    let (c_in, h, w) = x.dim();
    let (c_out, _, kh, kw) = weight.dim();
    let w_mat = weight
        .to_shape((c_out, c_in * kh * kw))
        .expect("weight reshape");
    let gout_mat = gout.to_shape((c_out, h * w)).expect("gout reshape");

    let gb = gout.sum_axis(Axis(2)).sum_axis(Axis(1));

    if kh == 1 && kw == 1 {
        let x_mat = x.to_shape((c_in, h * w)).expect("input reshape");
        let gw_mat = gout_mat.dot(&x_mat.t());
        let gx_mat = w_mat.t().dot(&gout_mat);
        let gw = gw_mat
            .into_shape_with_order((c_out, c_in, 1, 1))
            .expect("gw reshape");
        let gx = gx_mat
            .into_shape_with_order((c_in, h, w))
            .expect("gx reshape");
        return (gx, gw, gb);
    }

    let cols = im2col(x, kh, kw, pad);
    let gw_mat = gout_mat.dot(&cols.t());
    let gw = gw_mat
        .into_shape_with_order((c_out, c_in, kh, kw))
        .expect("gw reshape");
    let gcols = w_mat.t().dot(&gout_mat);
    let gx = col2im(&gcols, c_in, h, w, kh, kw, pad);
    (gx, gw, gb)
}

/// Transposed 2x2 stride-2 convolution: `(c_in,h,w) -> (c_out,2h,2w)`.
///
/// Weight layout is `(c_out, c_in, 2, 2)`. Because stride equals kernel size
/// the output blocks do not overlap.
pub fn upconv2x2_forward(
    x: &Tensor,
    weight: &ArrayView4<'_, f64>,
    bias: &ArrayView1<'_, f64>,
) -> Tensor {
    let (c_in, h, w) = x.dim();
    let (c_out, wc_in, _, _) = weight.dim();
    assert_eq!(c_in, wc_in, "upconv input channels mismatch");
    // (c_out*4, c_in) matrix with rows ordered (co, di, dj).
    let mut w_mat = Array2::<f64>::zeros((c_out * 4, c_in));
    for co in 0..c_out {
        for ci in 0..c_in {
            for di in 0..2 {
                for dj in 0..2 {
                    w_mat[(co * 4 + di * 2 + dj, ci)] = weight[(co, ci, di, dj)];
                }
            }
        }
    }
    let x_mat = x.to_shape((c_in, h * w)).expect("input reshape");
    let prod = w_mat.dot(&x_mat); // (c_out*4, h*w)
    let mut out = Array3::<f64>::zeros((c_out, 2 * h, 2 * w));
    for co in 0..c_out {
        let b = bias[co];
        for di in 0..2 {
            for dj in 0..2 {
                let prow = prod.row(co * 4 + di * 2 + dj);
                for i in 0..h {
                    for j in 0..w {
                        out[(co, 2 * i + di, 2 * j + dj)] = prow[i * w + j] + b;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`upconv2x2_forward`].
pub fn upconv2x2_backward(
    x: &Tensor,
    weight: &ArrayView4<'_, f64>,
    gout: &Tensor,
) -> (Tensor, Array4<f64>, Array1<f64>) {
    let (c_in, h, w) = x.dim();
    let (c_out, _, _, _) = weight.dim();
    let mut gprod = Array2::<f64>::zeros((c_out * 4, h * w));
    for co in 0..c_out {
        for di in 0..2 {
            for dj in 0..2 {
                let mut grow = gprod.row_mut(co * 4 + di * 2 + dj);
                for i in 0..h {
                    for j in 0..w {
                        grow[i * w + j] = gout[(co, 2 * i + di, 2 * j + dj)];
                    }
                }
            }
        }
    }
    let x_mat = x.to_shape((c_in, h * w)).expect("input reshape");
    let gw_mat = gprod.dot(&x_mat.t()); // (c_out*4, c_in)
    let mut gw = Array4::<f64>::zeros((c_out, c_in, 2, 2));
    for co in 0..c_out {
        for ci in 0..c_in {
            for di in 0..2 {
                for dj in 0..2 {
                    gw[(co, ci, di, dj)] = gw_mat[(co * 4 + di * 2 + dj, ci)];
                }
            }
        }
    }
    let mut w_mat = Array2::<f64>::zeros((c_out * 4, c_in));
    for co in 0..c_out {
        for ci in 0..c_in {
            for di in 0..2 {
                for dj in 0..2 {
                    w_mat[(co * 4 + di * 2 + dj, ci)] = weight[(co, ci, di, dj)];
                }
            }
        }
    }
    let gx_mat = w_mat.t().dot(&gprod);
    let gx = gx_mat
        .into_shape_with_order((c_in, h, w))
        .expect("gx reshape");
    let gb = gout.sum_axis(Axis(2)).sum_axis(Axis(1));
    (gx, gw, gb)
}

/// 2x2 stride-2 max pooling; also returns the in-window argmax (0..=3) used
/// by the backward pass. Spatial dims must be even.
pub fn maxpool2x2_forward(x: &Tensor) -> (Tensor, Array3<u8>) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dimensions");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut idx = Array3::<u8>::zeros((c, oh, ow));
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0u8;
                for k in 0..4u8 {
                    let (di, dj) = ((k / 2) as usize, (k % 2) as usize);
                    let v = x[(ci, 2 * i + di, 2 * j + dj)];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                out[(ci, i, j)] = best;
                idx[(ci, i, j)] = best_k;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2x2_backward(
    input_dim: (usize, usize, usize),
    idx: &Array3<u8>,
    gout: &Tensor,
) -> Tensor {
    let mut gx = Array3::<f64>::zeros(input_dim);
    let (c, oh, ow) = gout.dim();
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let k = idx[(ci, i, j)];
                let (di, dj) = ((k / 2) as usize, (k % 2) as usize);
                gx[(ci, 2 * i + di, 2 * j + dj)] += gout[(ci, i, j)];
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling (parameter-free).
pub fn nearest_up2_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[(ci, i, j)] = x[(ci, i / 2, j / 2)];
            }
        }
    }
    out
}

pub fn nearest_up2_backward(gout: &Tensor) -> Tensor {
    let (c, h2, w2) = gout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                gx[(ci, i / 2, j / 2)] += gout[(ci, i, j)];
            }
        }
    }
    gx
}

/// Stacks tensors along the channel axis.
pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    let (_, h, w) = xs[0].dim();
    let total_c: usize = xs.iter().map(|x| x.dim().0).sum();
    let mut out = Array3::<f64>::zeros((total_c, h, w));
    let mut offset = 0;
    for x in xs {
        let c = x.dim().0;
        out.slice_mut(s![offset..offset + c, .., ..]).assign(x);
        offset += c;
    }
    out
}

/// Channel-wise softmax with the usual max-shift for stability.
pub fn softmax_channels_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(x[(ci, i, j)]);
            }
            let mut denom = 0.0;
            for ci in 0..c {
                let e = (x[(ci, i, j)] - max).exp();
                out[(ci, i, j)] = e;
                denom += e;
            }
            for ci in 0..c {
                out[(ci, i, j)] /= denom;
            }
        }
    }
    out
}

/// `gz_c = p_c * (g_c - sum_k g_k p_k)` per pixel.
pub fn softmax_channels_backward(p: &Tensor, gout: &Tensor) -> Tensor {
    let (c, h, w) = p.dim();
    let mut gx = Array3::<f64>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            for ci in 0..c {
                dot += gout[(ci, i, j)] * p[(ci, i, j)];
            }
            for ci in 0..c {
                gx[(ci, i, j)] = p[(ci, i, j)] * (gout[(ci, i, j)] - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let x = array![[[1.0, 2.0], [3.0, 4.0]]];
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let b = Array1::zeros(1);
        let y = conv2d_forward(&x, &w.view(), &b.view(), 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let x = Array3::from_shape_fn((3, 7, 6), |_| next());
        let w = Array4::from_shape_fn((4, 3, 3, 3), |_| next());
        let b = Array1::from_shape_fn(4, |_| next());
        let y = conv2d_forward(&x, &w.view(), &b.view(), 1);

        for co in 0..4 {
            for i in 0..7 {
                for j in 0..6 {
                    let mut acc = b[co];
                    for ci in 0..3 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let si = i as isize + di as isize - 1;
                                let sj = j as isize + dj as isize - 1;
                                if si >= 0 && si < 7 && sj >= 0 && sj < 6 {
                                    acc += w[(co, ci, di, dj)]
                                        * x[(ci, si as usize, sj as usize)];
                                }
                            }
                        }
                    }
                    assert!((y[(co, i, j)] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upconv_matches_naive_scatter() {
        let x = array![[[1.0, 2.0], [3.0, 4.0]], [[0.5, -1.0], [2.0, 0.0]]];
        let w = Array4::from_shape_fn((3, 2, 2, 2), |(co, ci, di, dj)| {
            (co * 8 + ci * 4 + di * 2 + dj) as f64 * 0.1 - 0.4
        });
        let b = array![0.1, -0.2, 0.0];
        let y = upconv2x2_forward(&x, &w.view(), &b.view());
        assert_eq!(y.dim(), (3, 4, 4));
        for co in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    for di in 0..2 {
                        for dj in 0..2 {
                            let mut acc = b[co];
                            for ci in 0..2 {
                                acc += w[(co, ci, di, dj)] * x[(ci, i, j)];
                            }
                            assert!((y[(co, 2 * i + di, 2 * j + dj)] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_maximum_and_routes_gradient() {
        let x = array![[
            [1.0, 5.0, 0.0, 0.0],
            [2.0, 3.0, 0.0, 7.0],
            [0.0, 0.0, 9.0, 0.0],
            [0.0, 0.0, 0.0, 1.0]
        ]];
        let (y, idx) = maxpool2x2_forward(&x);
        assert_eq!(y, array![[[5.0, 7.0], [0.0, 9.0]]]);
        let gout = array![[[1.0, 2.0], [3.0, 4.0]]];
        let gx = maxpool2x2_backward((1, 4, 4), &idx, &gout);
        assert_eq!(gx[(0, 0, 1)], 1.0);
        assert_eq!(gx[(0, 1, 3)], 2.0);
        assert_eq!(gx[(0, 2, 2)], 4.0);
    }

    #[test]
    fn nearest_up_down_roundtrip_sums() {
        let x = array![[[1.0, 2.0], [3.0, 4.0]]];
        let up = nearest_up2_forward(&x);
        assert_eq!(up[(0, 0, 0)], 1.0);
        assert_eq!(up[(0, 1, 1)], 1.0);
        assert_eq!(up[(0, 3, 3)], 4.0);
        let back = nearest_up2_backward(&up);
        assert_eq!(back, array![[[4.0, 8.0], [12.0, 16.0]]]);
    }
}
