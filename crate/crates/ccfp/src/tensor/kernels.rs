//! Dense compute kernels behind the graph operations.
//!
//! Convolution lowers to im2col plus an `ikj` matmul; gradients use gather
//! formulations so each output element is one fixed-order reduction. Batch
//! items are independent, which is where the data parallelism lives.

use super::par::{for_each_chunk_mut, map_indexed};
use super::Real;

/// `c += a @ b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> ConvDims {
        let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (o, kh, kw) = (kernel_shape[0], kernel_shape[2], kernel_shape[3]);
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        ConvDims { batch: b, in_ch: c, h, w, out_ch: o, kh, kw, stride, padding, out_h, out_w }
    }

    fn cols_width(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Expand one image into `[out_h*out_w, in_ch*kh*kw]` patch rows.
fn im2col<T: Real>(img: &[T], d: &ConvDims, cols: &mut [T]) {
    let ckk = d.cols_width();
    let (h, w, kw) = (d.h, d.w, d.kw);
    let mut row = 0;
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let dst = &mut cols[row * ckk..(row + 1) * ckk];
            for c in 0..d.in_ch {
                let plane = &img[c * h * w..(c + 1) * h * w];
                for i in 0..d.kh {
                    let q0 = (c * d.kh + i) * kw;
                    let seg = &mut dst[q0..q0 + kw];
                    let iy = (oy * d.stride + i) as isize - d.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let base = (ox * d.stride) as isize - d.padding as isize;
                    // valid j: 0 <= base + j < w
                    let j_lo = (-base).clamp(0, kw as isize) as usize;
                    let j_hi = (w as isize - base).clamp(0, kw as isize) as usize;
                    seg[..j_lo].fill(T::zero());
                    seg[j_hi.max(j_lo)..].fill(T::zero());
                    if j_lo < j_hi {
                        let start = (base + j_lo as isize) as usize;
                        seg[j_lo..j_hi].copy_from_slice(&src_row[start..start + (j_hi - j_lo)]);
                    }
                }
            }
            row += 1;
        }
    }
}

/// Scatter patch-row gradients back onto one image plane set (inverse of
/// `im2col`, accumulating).
fn col2im_acc<T: Real>(dcols: &[T], d: &ConvDims, dimg: &mut [T]) {
    let ckk = d.cols_width();
    let (h, w, kw) = (d.h, d.w, d.kw);
    let mut row = 0;
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let src = &dcols[row * ckk..(row + 1) * ckk];
            for c in 0..d.in_ch {
                let plane = &mut dimg[c * h * w..(c + 1) * h * w];
                for i in 0..d.kh {
                    let q0 = (c * d.kh + i) * kw;
                    let seg = &src[q0..q0 + kw];
                    let iy = (oy * d.stride + i) as isize - d.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let base = (ox * d.stride) as isize - d.padding as isize;
                    let j_lo = (-base).clamp(0, kw as isize) as usize;
                    let j_hi = (w as isize - base).clamp(0, kw as isize) as usize;
                    if j_lo < j_hi {
                        let start = (base + j_lo as isize) as usize;
                        for (dv, &sv) in
                            dst_row[start..start + (j_hi - j_lo)].iter_mut().zip(&seg[j_lo..j_hi])
                        {
                            *dv = *dv + sv;
                        }
                    }
                }
            }
            row += 1;
        }
    }
}

/// Cross-correlation forward: `input [B,C,H,W] * kernel [O,C,kh,kw]`, lowered
/// to im2col plus a matmul per image; batch items run in parallel.
pub fn conv2d_forward<T: Real>(input: &[T], kernel: &[T], d: &ConvDims) -> Vec<T> {
    let ckk = d.cols_width();
    let opl = d.out_plane();
    // kernel transposed once to [ckk, O] so the matmul inner loop is contiguous
    let mut kt = vec![T::zero(); ckk * d.out_ch];
    for o in 0..d.out_ch {
        for q in 0..ckk {
            kt[q * d.out_ch + o] = kernel[o * ckk + q];
        }
    }
    let img_in = d.in_ch * d.h * d.w;
    let img_out = d.out_ch * opl;
    let mut out = vec![T::zero(); d.batch * img_out];
    for_each_chunk_mut(&mut out, img_out, |b, out_img| {
        let img = &input[b * img_in..(b + 1) * img_in];
        let mut cols = vec![T::zero(); opl * ckk];
        im2col(img, d, &mut cols);
        let mut out2 = vec![T::zero(); opl * d.out_ch];
        matmul_acc(&cols, &kt, &mut out2, opl, ckk, d.out_ch);
        // out2 is [pos, O]; transpose into the [O, pos] plane layout
        for o in 0..d.out_ch {
            let plane = &mut out_img[o * opl..(o + 1) * opl];
            for (pos, dv) in plane.iter_mut().enumerate() {
                *dv = out2[pos * d.out_ch + o];
            }
        }
    });
    out
}

/// Gradients of conv2d. Either output may be skipped when not needed.
/// Per-image partials combine in index order, so the result is independent
/// of the number of worker threads.
pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    d: &ConvDims,
    dout: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ckk = d.cols_width();
    let opl = d.out_plane();
    let img_in = d.in_ch * d.h * d.w;
    let img_out = d.out_ch * opl;

    let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = map_indexed(d.batch, |b| {
        let dout_img = &dout[b * img_out..(b + 1) * img_out];

        let mut dout2 = vec![T::zero(); opl * d.out_ch];
        for o in 0..d.out_ch {
            let plane = &dout_img[o * opl..(o + 1) * opl];
            for (pos, &sv) in plane.iter().enumerate() {
                dout2[pos * d.out_ch + o] = sv;
            }
        }

        let din = if need_input {
            // d_cols = dout2 @ kernel, scattered back through col2im.
            let mut dcols = vec![T::zero(); opl * ckk];
            matmul_acc(&dout2, kernel, &mut dcols, opl, d.out_ch, ckk);
            let mut dimg = vec![T::zero(); img_in];
            col2im_acc(&dcols, d, &mut dimg);
            Some(dimg)
        } else {
            None
        };

        let dkt = if need_kernel {
            let img = &input[b * img_in..(b + 1) * img_in];
            let mut cols = vec![T::zero(); opl * ckk];
            im2col(img, d, &mut cols);
            // dkt[q, o] += sum_pos cols[pos, q] * dout2[pos, o]
            let mut dkt = vec![T::zero(); ckk * d.out_ch];
            for pos in 0..opl {
                let crow = &cols[pos * ckk..(pos + 1) * ckk];
                let drow = &dout2[pos * d.out_ch..(pos + 1) * d.out_ch];
                for (q, &cv) in crow.iter().enumerate() {
                    let dst = &mut dkt[q * d.out_ch..(q + 1) * d.out_ch];
                    for (dv, &gv) in dst.iter_mut().zip(drow) {
                        *dv = *dv + cv * gv;
                    }
                }
            }
            Some(dkt)
        } else {
            None
        };
        (din, dkt)
    });

    let dinput = need_input.then(|| {
        let mut di = vec![T::zero(); d.batch * img_in];
        for (b, (part, _)) in parts.iter().enumerate() {
            let src = part.as_ref().unwrap();
            di[b * img_in..(b + 1) * img_in].copy_from_slice(src);
        }
        di
    });

    let dkernel = need_kernel.then(|| {
        let mut dkt_sum = vec![T::zero(); ckk * d.out_ch];
        for (_, part) in &parts {
            for (s, &p) in dkt_sum.iter_mut().zip(part.as_ref().unwrap()) {
                *s = *s + p;
            }
        }
        let mut dk = vec![T::zero(); d.out_ch * ckk];
        for o in 0..d.out_ch {
            for q in 0..ckk {
                dk[o * ckk + q] = dkt_sum[q * d.out_ch + o];
            }
        }
        dk
    });

    (dinput, dkernel)
}

/// Max pooling over `[B,C,H,W]`, window/stride without padding. Returns the
/// pooled values and the flat input index of each selected element (first
/// occurrence in row-major scan order on ties).
pub fn maxpool_forward<T: Real>(
    input: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let planes = b * c;
    let opl = out_h * out_w;
    let mut out = vec![T::zero(); planes * opl];
    let mut arg = vec![0u32; planes * opl];
    for p in 0..planes {
        let plane = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for i in 0..window {
                    let iy = oy * stride + i;
                    for j in 0..window {
                        let ix = ox * stride + j;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                out[p * opl + oy * out_w + ox] = best;
                arg[p * opl + oy * out_w + ox] = (p * h * w + best_idx) as u32;
            }
        }
    }
    (out, arg, out_h, out_w)
}

/// `x [B,D] @ w [D,K] + bias [K]`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], bias: &[T], b: usize, d: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * k];
    for row in out.chunks_mut(k) {
        row.copy_from_slice(bias);
    }
    matmul_acc(x, w, &mut out, b, d, k);
    out
}

/// Per-sample Gram matrix of `[B,C,H,W]`: `G[b,i,j] = <ch_i, ch_j> / (C*H*W)`.
/// The mirror copy makes the output exactly symmetric.
pub fn gram_forward<T: Real>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let norm = T::from_f64((c * hw) as f64);
    let mut out = vec![T::zero(); b * c * c];
    let gsz = c * c;
    for_each_chunk_mut(&mut out, gsz, |bi, g| {
        let sample = &x[bi * c * hw..(bi + 1) * c * hw];
        for i in 0..c {
            let chi = &sample[i * hw..(i + 1) * hw];
            for j in i..c {
                let chj = &sample[j * hw..(j + 1) * hw];
                let mut acc = T::zero();
                for (a, bb) in chi.iter().zip(chj) {
                    acc = acc + *a * *bb;
                }
                let v = acc / norm;
                g[i * c + j] = v;
                g[j * c + i] = v;
            }
        }
    });
    out
}

/// Gradient of `gram_forward` with respect to its input.
pub fn gram_backward<T: Real>(x: &[T], dg: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let norm = T::from_f64((c * hw) as f64);
    let mut dx = vec![T::zero(); b * c * hw];
    let gsz = c * c;
    for_each_chunk_mut(&mut dx, c * hw, |bi, dxs| {
        let sample = &x[bi * c * hw..(bi + 1) * c * hw];
        let g = &dg[bi * gsz..(bi + 1) * gsz];
        for i in 0..c {
            let drow = &mut dxs[i * hw..(i + 1) * hw];
            for j in 0..c {
                let coef = (g[i * c + j] + g[j * c + i]) / norm;
                let chj = &sample[j * hw..(j + 1) * hw];
                for (d, &v) in drow.iter_mut().zip(chj) {
                    *d = *d + coef * v;
                }
            }
        }
    });
    dx
}
