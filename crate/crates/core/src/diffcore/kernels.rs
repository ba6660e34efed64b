//! Dense kernels shared by the forward and backward passes. All image tensors
//! are NCHW. Per-item work is independent; anything reduced across the batch
//! is summed sequentially in item order so results never depend on the
//! thread count.

use rayon::prelude::*;

use super::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Row-major `[m,k] x [k,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), &mut c, n as isize, 1);
    c
}

/// Gradients of `c = a b` given `dc`.
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let da = need_a.then(|| {
        let mut da = vec![T::zero(); m * k];
        // dc [m,n] x b^T [n,k]
        T::gemm(m, n, k, T::one(), dc, n as isize, 1, b, 1, n as isize, T::zero(), &mut da, k as isize, 1);
        da
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); k * n];
        // a^T [k,m] x dc [m,n]
        T::gemm(k, m, n, T::one(), a, 1, k as isize, dc, n as isize, 1, T::zero(), &mut db, n as isize, 1);
        db
    });
    (da, db)
}

/// Unfolds a batch of CHW images into one `[C*k*k, N*Ho*Wo]` patch matrix;
/// item `n` owns columns `n*Ho*Wo..(n+1)*Ho*Wo`.
fn im2col<T: Real>(x: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, p) = (g.kernel, g.positions());
    let plane = g.height * g.width;
    let in_len = g.channels * plane;
    let ld = batch * p;
    let mut cols = vec![T::zero(); g.patch_len() * ld];
    cols.par_chunks_mut(ld.max(1)).enumerate().for_each(|(row, dst)| {
        let (c, ky, kx) = (row / (k * k), row / k % k, row % k);
        for n in 0..batch {
            let src = &x[n * in_len + c * plane..n * in_len + (c + 1) * plane];
            for oy in 0..ho {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                let line = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                let out = &mut dst[n * p + oy * wo..n * p + (oy + 1) * wo];
                for (ox, v) in out.iter_mut().enumerate() {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.width as isize {
                        *v = line[ix as usize];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back into a zeroed batch.
fn col2im<T: Real>(cols: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (k, p) = (g.kernel, g.positions());
    let plane = g.height * g.width;
    let in_len = g.channels * plane;
    let ld = batch * p;
    let mut x = vec![T::zero(); batch * in_len];
    x.par_chunks_mut(in_len.max(1)).enumerate().for_each(|(n, item)| {
        for row in 0..g.patch_len() {
            let (c, ky, kx) = (row / (k * k), row / k % k, row % k);
            let src = &cols[row * ld + n * p..row * ld + (n + 1) * p];
            let dst = &mut item[c * plane..(c + 1) * plane];
            for oy in 0..ho {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                let base = iy as usize * g.width;
                for ox in 0..wo {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.width {
                        dst[base + ix as usize] = dst[base + ix as usize] + src[oy * wo + ox];
                    }
                }
            }
        }
    });
    x
}

/// `[N, C, P]` -> `[C, N*P]`.
fn channel_major<T: Real>(x: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[c * batch * p + n * p..c * batch * p + (n + 1) * p].copy_from_slice(&x[(n * channels + c) * p..(n * channels + c + 1) * p]);
        }
    }
    out
}

/// `[C, N*P]` -> `[N, C, P]`.
fn batch_major<T: Real>(x: &[T], batch: usize, channels: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[(n * channels + c) * p..(n * channels + c + 1) * p].copy_from_slice(&x[c * batch * p + n * p..c * batch * p + (n + 1) * p]);
        }
    }
    out
}

/// `[m, k] x [k, n]` with `b` read transposed when `bt` is set.
fn gemm_into<T: Real>(a: &[T], at: bool, b: &[T], bt: bool, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, T::zero(), &mut c, n as isize, 1);
    c
}

/// `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]` -> `[N, Co, Ho, Wo]`.
pub fn conv2d<T: Real>(x: &[T], w: &[T], batch: usize, out_channels: usize, g: &ConvGeom) -> Vec<T> {
    let (kk, p) = (g.patch_len(), g.positions());
    let cols = im2col(x, batch, g);
    let y = gemm_into(w, false, &cols, false, out_channels, kk, batch * p);
    batch_major(&y, batch, out_channels, p)
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    out_channels: usize,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (kk, p) = (g.patch_len(), g.positions());
    let dy = channel_major(dy, batch, out_channels, p);
    // w^T [kk, Co] x dy [Co, N*P]
    let dx = need_x.then(|| col2im(&gemm_into(w, true, &dy, false, kk, out_channels, batch * p), batch, g));
    // dy [Co, N*P] x cols^T [N*P, kk]
    let dw = need_w.then(|| gemm_into(&dy, false, &im2col(x, batch, g), true, out_channels, batch * p, kk));
    (dx, dw)
}

/// Geometry of the convolution whose adjoint is the transposed convolution
/// from `[Ci, h, w]` to `[Co, Ho, Wo]`.
pub fn transpose_geom(out_channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<ConvGeom> {
    let oh = ((h - 1) * stride + kernel).checked_sub(2 * pad)?;
    let ow = ((w - 1) * stride + kernel).checked_sub(2 * pad)?;
    let g = ConvGeom {
        channels: out_channels,
        height: oh,
        width: ow,
        kernel,
        stride,
        pad,
    };
    (g.out_height() == h && g.out_width() == w).then_some(g)
}

/// `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]` -> `[N, Co, Ho, Wo]` where `g`
/// describes the output-side convolution geometry.
pub fn conv_transpose2d<T: Real>(x: &[T], w: &[T], batch: usize, in_channels: usize, g: &ConvGeom) -> Vec<T> {
    let (kk, p) = (g.patch_len(), g.positions());
    let x = channel_major(x, batch, in_channels, p);
    // w^T [kk, Ci] x x [Ci, N*P]
    col2im(&gemm_into(w, true, &x, false, kk, in_channels, batch * p), batch, g)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    in_channels: usize,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (kk, p) = (g.patch_len(), g.positions());
    let cols = im2col(dy, batch, g);
    let dx = need_x.then(|| batch_major(&gemm_into(w, false, &cols, false, in_channels, kk, batch * p), batch, in_channels, p));
    // x [Ci, N*P] x cols^T [N*P, kk]
    let dw = need_w.then(|| gemm_into(&channel_major(x, batch, in_channels, p), false, &cols, true, in_channels, batch * p, kk));
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], ci: usize, co: usize, h: usize, wd: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[(c * h + iy as usize) * wd + ix as usize] * w[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        let (ci, co, h, w, k) = (2, 3, 7, 6, 3);
        for &(s, p) in &[(1, 1), (2, 1), (2, 0), (1, 0)] {
            let x = ramp(ci * h * w, 0.1);
            let wt = ramp(co * ci * k * k, 0.05);
            let g = ConvGeom { channels: ci, height: h, width: w, kernel: k, stride: s, pad: p };
            let got = conv2d(&x, &wt, 1, co, &g);
            let want = naive_conv(&x, &wt, ci, co, h, w, k, s, p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(u), v> == <u, conv_t(v)> for matching geometry
        let (ci, co, k, s, p) = (3, 2, 4, 2, 1);
        let g = transpose_geom(co, 4, 4, k, s, p).unwrap();
        assert_eq!((g.height, g.width), (8, 8));
        // conv maps [co, 8, 8] -> [ci, 4, 4] with weight [ci, co, k, k]
        let u = ramp(co * 64, 0.3);
        let v = ramp(ci * 16, 0.7);
        let wt = ramp(ci * co * k * k, 0.11);
        let cu = conv2d(&u, &wt, 1, ci, &g);
        let tv = conv_transpose2d(&v, &wt, 1, ci, &g);
        let lhs: f64 = cu.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&tv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
    }
}
