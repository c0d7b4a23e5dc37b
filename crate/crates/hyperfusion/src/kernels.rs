//! Raw numeric kernels behind the differentiable ops.
//!
//! These are plain functions over flat f64 slices; the tape wraps them with
//! shape checking and gradient bookkeeping. Inner loops run over contiguous
//! output rows so the compiler can vectorize.

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T
pub fn matmul_tb(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// Spatial size of a conv/pool output dimension.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 2D convolution, NCHW layout, zero padding.
/// x: [n, c_in, h, w], kernel: [c_out, c_in, kh, kw], out: [n, c_out, ho, wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    out.fill(0.0);
    for img in 0..n {
        for co in 0..c_out {
            let out_base = (img * c_out + co) * ho * wo;
            for ci in 0..c_in {
                let x_base = (img * c_in + ci) * h * w;
                let k_base = (co * c_in + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let kv = kernel[k_base + ki * kw + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let o_row = out_base + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[o_row + ox] += kv * x[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input- and kernel-gradients for `conv2d`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    d_x: &mut [f64],
    d_kernel: &mut [f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    for img in 0..n {
        for co in 0..c_out {
            let out_base = (img * c_out + co) * ho * wo;
            for ci in 0..c_in {
                let x_base = (img * c_in + ci) * h * w;
                let k_base = (co * c_in + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let kv = kernel[k_base + ki * kw + kj];
                        let mut kgrad = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let o_row = out_base + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let g = d_out[o_row + ox];
                                kgrad += g * x[x_row + ix as usize];
                                d_x[x_row + ix as usize] += g * kv;
                            }
                        }
                        d_kernel[k_base + ki * kw + kj] += kgrad;
                    }
                }
            }
        }
    }
}

/// Max pool, NCHW. Returns argmax (flat input index per output element) and
/// the smallest margin between the winner and the runner-up across windows,
/// used by the gradient checker to detect ties near a kink.
#[allow(clippy::too_many_arguments)]
pub fn max_pool2d(
    x: &[f64],
    out: &mut [f64],
    argmax: &mut [usize],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> f64 {
    let ho = conv_out_dim(h, k, stride, 0);
    let wo = conv_out_dim(w, k, stride, 0);
    let mut min_margin = f64::INFINITY;
    for img in 0..n {
        for ch in 0..c {
            let x_base = (img * c + ch) * h * w;
            let o_base = (img * c + ch) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ki in 0..k {
                        let iy = oy * stride + ki;
                        for kj in 0..k {
                            let ix = ox * stride + kj;
                            let v = x[x_base + iy * w + ix];
                            if v > best {
                                second = best;
                                best = v;
                                best_idx = x_base + iy * w + ix;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    out[o_base + oy * wo + ox] = best;
                    argmax[o_base + oy * wo + ox] = best_idx;
                    if second.is_finite() {
                        min_margin = min_margin.min(best - second);
                    }
                }
            }
        }
    }
    min_margin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_tb_matches_transposed_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, -1.0, 1.0, 3.0]; // 2x3, used as b^T (3x2)
        let mut out = [0.0; 4];
        matmul_tb(&a, &b, &mut out, 2, 3, 2);
        // row0 . row0 = 1+0+6=7 ; row0 . row1 = -1+2+9=10
        assert_eq!(out, [7.0, 10.0, 16.0, 19.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1x1x1 kernel of value 1 reproduces the input.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut out = vec![0.0; 9];
        conv2d(&x, &[1.0], &mut out, 1, 1, 3, 3, 1, 1, 1, 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv2d_known_3x3() {
        // 2x2 mean-like kernel over a 3x3 image, stride 1, no pad.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let k = [1.0, 1.0, 1.0, 1.0];
        let mut out = vec![0.0; 4];
        conv2d(&x, &k, &mut out, 1, 1, 3, 3, 1, 2, 2, 1, 0);
        assert_eq!(out, vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn max_pool_tracks_argmax() {
        let x = [1.0, 3.0, 2.0, 4.0];
        let mut out = vec![0.0; 1];
        let mut arg = vec![0usize; 1];
        let margin = max_pool2d(&x, &mut out, &mut arg, 1, 1, 2, 2, 2, 2);
        assert_eq!(out[0], 4.0);
        assert_eq!(arg[0], 3);
        assert!((margin - 1.0).abs() < 1e-12);
    }
}
