//! Raw numeric kernels on flat `f64` slices. Layout is row-major; images are NCHW.
//!
//! These are pure functions: shape validation happens in the op layer, kernels
//! assume conforming inputs.

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T (row-by-row dot products, no transpose copy).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Which of the three gradients of the convolution trilinear form to compute.
///
/// With y = conv(x, w) and an output-shaped tensor u, the scalar
/// T = <conv(x, w), u> is linear in each argument, so conv itself and both of
/// its input gradients share one index loop and remain closed under
/// differentiation.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// y[b,co,oh,ow] += x[b,ci,ih,iw] * w[co,ci,i,j]
    Forward,
    /// gx[b,ci,ih,iw] += u[b,co,oh,ow] * w[co,ci,i,j]
    GradInput,
    /// gw[co,ci,i,j] += x[b,ci,ih,iw] * u[b,co,oh,ow]
    GradWeight,
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }
}

/// Valid output-column range for kernel column `j`: the `ow` values with
/// `0 <= ow*s + j - p < w`.
fn ow_range(j: usize, d: &ConvDims, out_w: usize) -> (usize, usize) {
    let (s, p, w) = (d.stride as i64, d.pad as i64, d.in_w as i64);
    let off = j as i64 - p;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((w - 1 - off) / s + 1).clamp(0, out_w as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Valid output-row range for kernel row `i` (same arithmetic on H).
fn oh_range(i: usize, d: &ConvDims, out_h: usize) -> (usize, usize) {
    let (s, p, h) = (d.stride as i64, d.pad as i64, d.in_h as i64);
    let off = i as i64 - p;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((h - 1 - off) / s + 1).clamp(0, out_h as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Dispatch over the three gradients of the convolution trilinear form.
/// Bounds are hoisted out of the inner loops, which run over contiguous (or
/// constant-stride) rows.
pub fn conv2d(mode: ConvMode, first: &[f64], second: &[f64], d: &ConvDims) -> Vec<f64> {
    match mode {
        ConvMode::Forward => conv_forward(first, second, d),
        ConvMode::GradInput => conv_grad_input(first, second, d),
        ConvMode::GradWeight => conv_grad_weight(first, second, d),
    }
}

fn conv_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.batch * d.c_out * oh_n * ow_n];
    let s = d.stride;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let y_plane = &mut out[((b * d.c_out + co) * oh_n * ow_n)..][..oh_n * ow_n];
            for ci in 0..d.c_in {
                let x_plane = &x[((b * d.c_in + ci) * d.in_h * d.in_w)..][..d.in_h * d.in_w];
                let w_base = (co * d.c_in + ci) * d.k_h * d.k_w;
                for i in 0..d.k_h {
                    let (oh_lo, oh_hi) = oh_range(i, d, oh_n);
                    for j in 0..d.k_w {
                        let wv = w[w_base + i * d.k_w + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ow_range(j, d, ow_n);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + i - d.pad;
                            let x_row = &x_plane[ih * d.in_w..][..d.in_w];
                            let y_row = &mut y_plane[oh * ow_n..][..ow_n];
                            if s == 1 {
                                let xs = &x_row[ow_lo + j - d.pad..][..ow_hi - ow_lo];
                                for (y, xv) in y_row[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *y += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    y_row[ow] += wv * x_row[ow * s + j - d.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_grad_input(u: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.batch * d.c_in * d.in_h * d.in_w];
    let s = d.stride;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let u_plane = &u[((b * d.c_out + co) * oh_n * ow_n)..][..oh_n * ow_n];
            for ci in 0..d.c_in {
                let gx_plane =
                    &mut out[((b * d.c_in + ci) * d.in_h * d.in_w)..][..d.in_h * d.in_w];
                let w_base = (co * d.c_in + ci) * d.k_h * d.k_w;
                for i in 0..d.k_h {
                    let (oh_lo, oh_hi) = oh_range(i, d, oh_n);
                    for j in 0..d.k_w {
                        let wv = w[w_base + i * d.k_w + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ow_range(j, d, ow_n);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + i - d.pad;
                            let u_row = &u_plane[oh * ow_n..][..ow_n];
                            let gx_row = &mut gx_plane[ih * d.in_w..][..d.in_w];
                            if s == 1 {
                                let gxs = &mut gx_row[ow_lo + j - d.pad..][..ow_hi - ow_lo];
                                for (g, uv) in gxs.iter_mut().zip(&u_row[ow_lo..ow_hi]) {
                                    *g += wv * uv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    gx_row[ow * s + j - d.pad] += wv * u_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_grad_weight(x: &[f64], u: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh_n, ow_n) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.c_out * d.c_in * d.k_h * d.k_w];
    let s = d.stride;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let u_plane = &u[((b * d.c_out + co) * oh_n * ow_n)..][..oh_n * ow_n];
            for ci in 0..d.c_in {
                let x_plane = &x[((b * d.c_in + ci) * d.in_h * d.in_w)..][..d.in_h * d.in_w];
                let w_base = (co * d.c_in + ci) * d.k_h * d.k_w;
                for i in 0..d.k_h {
                    let (oh_lo, oh_hi) = oh_range(i, d, oh_n);
                    for j in 0..d.k_w {
                        let (ow_lo, ow_hi) = ow_range(j, d, ow_n);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + i - d.pad;
                            let u_row = &u_plane[oh * ow_n..][..ow_n];
                            let x_row = &x_plane[ih * d.in_w..][..d.in_w];
                            if s == 1 {
                                let xs = &x_row[ow_lo + j - d.pad..][..ow_hi - ow_lo];
                                acc += u_row[ow_lo..ow_hi]
                                    .iter()
                                    .zip(xs)
                                    .map(|(u, x)| u * x)
                                    .sum::<f64>();
                            } else {
                                for ow in ow_lo..ow_hi {
                                    acc += u_row[ow] * x_row[ow * s + j - d.pad];
                                }
                            }
                        }
                        out[w_base + i * d.k_w + j] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Mean over non-overlapping k-by-k windows, stride k.
pub fn avg_pool2d(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
        for r in 0..oh {
            for col in 0..ow {
                let mut s = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        s += src[(r * k + i) * w + (col * k + j)];
                    }
                }
                dst[r * ow + col] = s * inv;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2d`]: spread each value over its window, scaled 1/k^2.
pub fn avg_unpool2d(g: &[f64], n: usize, c: usize, oh: usize, ow: usize, k: usize) -> Vec<f64> {
    let (h, w) = (oh * k, ow * k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for img in 0..n * c {
        let src = &g[img * oh * ow..(img + 1) * oh * ow];
        let dst = &mut out[img * h * w..(img + 1) * h * w];
        for r in 0..oh {
            for col in 0..ow {
                let v = src[r * ow + col] * inv;
                for i in 0..k {
                    for j in 0..k {
                        dst[(r * k + i) * w + (col * k + j)] = v;
                    }
                }
            }
        }
    }
    out
}

/// NCHW -> per-channel sum over batch and spatial dims.
pub fn sum_channels(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            out[ch] += x[base..base + hw].iter().sum::<f64>();
        }
    }
    out
}

/// C-vector -> NCHW, each channel value replicated.
pub fn broadcast_channels(v: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            out[base..base + hw].fill(v[ch]);
        }
    }
    out
}

/// Row differences along H: y[.., h, ..] = x[.., h+1, ..] - x[.., h, ..]
pub fn diff_rows(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * (h - 1) * w];
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * (h - 1) * w..(p + 1) * (h - 1) * w];
        for r in 0..h - 1 {
            for c in 0..w {
                dst[r * w + c] = src[(r + 1) * w + c] - src[r * w + c];
            }
        }
    }
    out
}

pub fn diff_rows_adjoint(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * (h - 1) * w..];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h - 1 {
            for c in 0..w {
                let v = src[r * w + c];
                dst[(r + 1) * w + c] += v;
                dst[r * w + c] -= v;
            }
        }
    }
    out
}

/// Column differences along W: y[.., w] = x[.., w+1] - x[.., w]
pub fn diff_cols(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * (w - 1)];
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * h * (w - 1)..(p + 1) * h * (w - 1)];
        for r in 0..h {
            for c in 0..w - 1 {
                dst[r * (w - 1) + c] = src[r * w + c + 1] - src[r * w + c];
            }
        }
    }
    out
}

pub fn diff_cols_adjoint(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * h * (w - 1)..];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w - 1 {
                let v = src[r * (w - 1) + c];
                dst[r * w + c + 1] += v;
                dst[r * w + c] -= v;
            }
        }
    }
    out
}
