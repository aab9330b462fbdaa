//! Spatial ops for the tape: 2-d convolution, nearest upsampling, max pool.
//!
//! Convolution is im2col + gemm per image (columns stay cache-resident),
//! parallelized over the batch. Partial weight gradients are collected per
//! image chunk and reduced in chunk order so results do not depend on
//! thread scheduling.

use rayon::prelude::*;

use crate::graph::{nchw, Graph, Var};
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

pub(crate) fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col<T: Elem>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    debug_assert_eq!(col.len(), d.cin * d.kh * d.kw * oh * ow);
    for ci in 0..d.cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = ((ci * d.kh + kh) * d.kw + kw) * oh * ow;
                for ohi in 0..oh {
                    let ih = (ohi * d.stride + kh) as isize - d.pad as isize;
                    let dst = &mut col[row + ohi * ow..row + (ohi + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let xrow = &xc[ih as usize * w..(ih as usize + 1) * w];
                    if d.stride == 1 {
                        // iw = owi + kw - pad: one shifted slice copy
                        let shift = kw as isize - d.pad as isize;
                        if shift == 0 {
                            dst.copy_from_slice(&xrow[..ow]);
                        } else if shift > 0 {
                            let sh = shift as usize;
                            let len = ow.min(w - sh);
                            dst[..len].copy_from_slice(&xrow[sh..sh + len]);
                            dst[len..].fill(T::zero());
                        } else {
                            let sh = (-shift) as usize;
                            dst[..sh].fill(T::zero());
                            dst[sh..].copy_from_slice(&xrow[..ow - sh]);
                        }
                    } else {
                        // strided gather with a precomputed valid range
                        let off = kw as isize - d.pad as isize;
                        let lo = if off < 0 { (((-off) + d.stride as isize - 1) / d.stride as isize) as usize } else { 0 };
                        let hi_excl = (((w as isize - off - 1) / d.stride as isize) + 1).clamp(0, ow as isize) as usize;
                        dst[..lo.min(ow)].fill(T::zero());
                        for (owi, o) in dst[lo..hi_excl].iter_mut().enumerate() {
                            let iw = ((lo + owi) * d.stride) as isize + off;
                            *o = xrow[iw as usize];
                        }
                        dst[hi_excl..].fill(T::zero());
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Elem>(col: &[T], d: &ConvDims, dx: &mut [T]) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    for ci in 0..d.cin {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = ((ci * d.kh + kh) * d.kw + kw) * oh * ow;
                for ohi in 0..oh {
                    let ih = (ohi * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &col[row + ohi * ow..row + (ohi + 1) * ow];
                    let xrow = &mut xc[ih as usize * w..(ih as usize + 1) * w];
                    if d.stride == 1 {
                        let shift = kw as isize - d.pad as isize;
                        if shift == 0 {
                            for (o, &v) in xrow[..ow].iter_mut().zip(src) {
                                *o += v;
                            }
                        } else if shift > 0 {
                            let sh = shift as usize;
                            let len = ow.min(w - sh);
                            for (o, &v) in xrow[sh..sh + len].iter_mut().zip(&src[..len]) {
                                *o += v;
                            }
                        } else {
                            let sh = (-shift) as usize;
                            for (o, &v) in xrow[..ow - sh].iter_mut().zip(&src[sh..]) {
                                *o += v;
                            }
                        }
                    } else {
                        let off = kw as isize - d.pad as isize;
                        let lo = if off < 0 { (((-off) + d.stride as isize - 1) / d.stride as isize) as usize } else { 0 };
                        let hi_excl = (((w as isize - off - 1) / d.stride as isize) + 1).clamp(0, ow as isize) as usize;
                        for (owi, &v) in src[lo..hi_excl].iter().enumerate() {
                            let iw = ((lo + owi) * d.stride) as isize + off;
                            xrow[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn batch_chunks(b: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    b.div_ceil(threads * 4).max(1)
}

impl<T: Elem> Graph<T> {
    /// 2-d convolution, NCHW x (Cout, Cin, KH, KW) + bias (Cout), with
    /// same-style padding (kernel-1)/2 and the given stride.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let bv = self.value(bias).clone();
        let (b, cin, h, w) = nchw(xv.shape());
        let ws = wv.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d");
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv2d: input channels {cin} vs weight {wcin}");
        assert_eq!(bv.shape(), &[cout], "conv2d bias shape");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d expects odd kernels");
        let pad = (kh - 1) / 2;
        let d = ConvDims {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: conv_out_dim(h, kh, stride, pad),
            ow: conv_out_dim(w, kw, stride, pad),
        };
        let ckk = cin * kh * kw;
        let oplane = d.oh * d.ow;
        let in_img = cin * h * w;
        let out_img = cout * oplane;
        let direct1 = kh == 1 && kw == 1 && stride == 1;
        let chunk = batch_chunks(b);

        let mut out = vec![T::zero(); b * out_img];
        if direct1 {
            out.par_chunks_mut(out_img).enumerate().for_each(|(n, o_img)| {
                let x_img = &xv.data()[n * in_img..(n + 1) * in_img];
                T::gemm(cout, cin, oplane, T::one(), wv.data(), x_img, T::zero(), o_img);
                for co in 0..cout {
                    let bias_v = bv.data()[co];
                    for v in &mut o_img[co * oplane..(co + 1) * oplane] {
                        *v += bias_v;
                    }
                }
            });
        } else {
            out.par_chunks_mut(chunk * out_img)
                .enumerate()
                .for_each(|(i, o_chunk)| {
                    let mut col = vec![T::zero(); ckk * oplane];
                    for (j, o_img) in o_chunk.chunks_mut(out_img).enumerate() {
                        let n = i * chunk + j;
                        im2col(&xv.data()[n * in_img..(n + 1) * in_img], &d, &mut col);
                        T::gemm(cout, ckk, oplane, T::one(), wv.data(), &col, T::zero(), o_img);
                        for co in 0..cout {
                            let bias_v = bv.data()[co];
                            for v in &mut o_img[co * oplane..(co + 1) * oplane] {
                                *v += bias_v;
                            }
                        }
                    }
                });
        }

        let out = Tensor::from_vec(vec![b, cout, d.oh, d.ow], out);
        self.op(out, &[x, weight, bias], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * in_img];
            let mut dw = Tensor::zeros(ws.clone());
            let mut db = Tensor::zeros(vec![cout]);
            if direct1 {
                dx.par_chunks_mut(in_img).enumerate().for_each(|(n, dx_img)| {
                    // dx = wᵀ (Cin, Cout) * g (Cout, HW)
                    T::gemm_tn(cin, cout, oplane, T::one(), wv.data(), &gd[n * out_img..(n + 1) * out_img], T::zero(), dx_img);
                });
                let partials: Vec<(Vec<T>, Vec<T>)> = (0..b)
                    .collect::<Vec<_>>()
                    .par_chunks(chunk)
                    .map(|ns| {
                        let mut dw_p = vec![T::zero(); cout * cin];
                        let mut db_p = vec![T::zero(); cout];
                        for &n in ns {
                            let g_img = &gd[n * out_img..(n + 1) * out_img];
                            T::gemm_nt(cout, oplane, cin, T::one(), g_img, &xv.data()[n * in_img..(n + 1) * in_img], T::one(), &mut dw_p);
                            for co in 0..cout {
                                db_p[co] += g_img[co * oplane..(co + 1) * oplane].iter().copied().sum::<T>();
                            }
                        }
                        (dw_p, db_p)
                    })
                    .collect();
                for (pw, pb) in partials {
                    for (a, v) in dw.data_mut().iter_mut().zip(pw) {
                        *a += v;
                    }
                    for (a, v) in db.data_mut().iter_mut().zip(pb) {
                        *a += v;
                    }
                }
            } else {
                // Per-chunk partials, reduced in chunk order below.
                let partials: Vec<(Vec<T>, Vec<T>)> = dx
                    .par_chunks_mut(chunk * in_img)
                    .enumerate()
                    .map(|(i, dx_chunk)| {
                        let mut col = vec![T::zero(); ckk * oplane];
                        let mut dcol = vec![T::zero(); ckk * oplane];
                        let mut dw_p = vec![T::zero(); cout * ckk];
                        let mut db_p = vec![T::zero(); cout];
                        for (j, dx_img) in dx_chunk.chunks_mut(in_img).enumerate() {
                            let n = i * chunk + j;
                            let g_img = &gd[n * out_img..(n + 1) * out_img];
                            im2col(&xv.data()[n * in_img..(n + 1) * in_img], &d, &mut col);
                            // dW += g (Cout, OHOW) * colᵀ (OHOW, CKK)
                            T::gemm_nt(cout, oplane, ckk, T::one(), g_img, &col, T::one(), &mut dw_p);
                            // dcol = Wᵀ (CKK, Cout) * g (Cout, OHOW)
                            T::gemm_tn(ckk, cout, oplane, T::one(), wv.data(), g_img, T::zero(), &mut dcol);
                            col2im_add(&dcol, &d, dx_img);
                            for co in 0..cout {
                                db_p[co] += g_img[co * oplane..(co + 1) * oplane].iter().copied().sum::<T>();
                            }
                        }
                        (dw_p, db_p)
                    })
                    .collect();
                for (pw, pb) in partials {
                    for (a, v) in dw.data_mut().iter_mut().zip(pw) {
                        *a += v;
                    }
                    for (a, v) in db.data_mut().iter_mut().zip(pb) {
                        *a += v;
                    }
                }
            }
            vec![
                (x, Tensor::from_vec(vec![b, cin, h, w], dx)),
                (weight, dw),
                (bias, db),
            ]
        })
    }

    /// Nearest-neighbor 2x upsampling of NCHW.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (b, c, h, w) = nchw(x.shape());
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * oh * ow];
        let src = x.data();
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(img, o)| {
            let s = &src[img * h * w..(img + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = s[i * w + j];
                    o[(2 * i) * ow + 2 * j] = v;
                    o[(2 * i) * ow + 2 * j + 1] = v;
                    o[(2 * i + 1) * ow + 2 * j] = v;
                    o[(2 * i + 1) * ow + 2 * j + 1] = v;
                }
            }
        });
        self.op(Tensor::from_vec(vec![b, c, oh, ow], out), &[a], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(img, o)| {
                let go = &gd[img * oh * ow..(img + 1) * oh * ow];
                for i in 0..h {
                    for j in 0..w {
                        o[i * w + j] = go[(2 * i) * ow + 2 * j]
                            + go[(2 * i) * ow + 2 * j + 1]
                            + go[(2 * i + 1) * ow + 2 * j]
                            + go[(2 * i + 1) * ow + 2 * j + 1];
                    }
                }
            });
            vec![(a, Tensor::from_vec(vec![b, c, h, w], dx))]
        })
    }

    /// 2x2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn maxpool2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (b, c, h, w) = nchw(x.shape());
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh >= 1 && ow >= 1, "maxpool2 on {h}x{w}");
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut arg = vec![0u32; b * c * oh * ow];
        let src = x.data();
        out.par_chunks_mut(oh * ow)
            .zip(arg.par_chunks_mut(oh * ow))
            .enumerate()
            .for_each(|(img, (o, am))| {
                let s = &src[img * h * w..(img + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = (2 * i) * w + 2 * j;
                        let mut best = s[best_idx];
                        for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                            let idx = (2 * i + di) * w + 2 * j + dj;
                            if s[idx] > best {
                                best = s[idx];
                                best_idx = idx;
                            }
                        }
                        o[i * ow + j] = best;
                        am[i * ow + j] = best_idx as u32;
                    }
                }
            });
        self.op(Tensor::from_vec(vec![b, c, oh, ow], out), &[a], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(img, o)| {
                let go = &gd[img * oh * ow..(img + 1) * oh * ow];
                let am = &arg[img * oh * ow..(img + 1) * oh * ow];
                for p in 0..oh * ow {
                    o[am[p] as usize] += go[p];
                }
            });
            vec![(a, Tensor::from_vec(vec![b, c, h, w], dx))]
        })
    }
}
