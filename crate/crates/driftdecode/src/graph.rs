//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Each operation appends a node holding its forward value and, when any
//! input requires a gradient, a one-shot backward closure. Nodes built from
//! constants record nothing, so frozen branches (ground-truth features, the
//! feature extractor itself) cost no tape memory and structurally receive
//! zero gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<(Var, Tensor<T>)> + Send>;

struct Node<T: Elem> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    backward: Option<BackFn<T>>,
}

pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Trainable input: gradients are accumulated and kept after `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Frozen input: no gradient ever flows into or out of it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated at `v` (leaves only, after `backward`).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, backward: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Record an op: `value` plus a backward closure used only if some input
    /// needs a gradient.
    pub(crate) fn op(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl FnOnce(&Tensor<T>) -> Vec<(Var, Tensor<T>)> + Send + 'static,
    ) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if needs {
            self.push(value, true, Some(Box::new(backward)))
        } else {
            self.push(value, false, None)
        }
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&contrib),
            None => node.grad = Some(contrib),
        }
    }

    /// Reverse sweep from a scalar root. Interior gradients are dropped as
    /// soon as they have been consumed; leaf gradients remain readable.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward root must be scalar");
        self.nodes[root.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let Some(back) = self.nodes[i].backward.take() else {
                continue;
            };
            let g = self.nodes[i].grad.take().expect("grad present");
            for (v, contrib) in back(&g) {
                debug_assert!(v.0 < i, "backward edge must point to an earlier node");
                self.accumulate(v, contrib);
            }
        }
    }

    // ---- elementwise and scalar ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = {
            let mut o = va.clone();
            o.add_assign(vb);
            o
        };
        self.op(out, &[a, b], move |g| vec![(a, g.clone()), (b, g.clone())])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.op(out, &[a], move |g| vec![(a, g.map(|v| v * s))])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let out = par_map(&x, |v| v * sigmoid_scalar(v));
        self.op(out, &[a], move |g| {
            let mut dx = g.clone();
            dx.data_mut()
                .par_chunks_mut(PAR_CHUNK)
                .zip(x.data().par_chunks(PAR_CHUNK))
                .for_each(|(dc, xc)| {
                    for (d, &xv) in dc.iter_mut().zip(xc) {
                        let s = sigmoid_scalar(xv);
                        *d *= s * (T::one() + xv * (T::one() - s));
                    }
                });
            vec![(a, dx)]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = par_map(self.value(a), sigmoid_scalar);
        let y = out.clone();
        self.op(out, &[a], move |g| {
            let mut dx = g.clone();
            dx.data_mut()
                .par_chunks_mut(PAR_CHUNK)
                .zip(y.data().par_chunks(PAR_CHUNK))
                .for_each(|(dc, yc)| {
                    for (d, &yv) in dc.iter_mut().zip(yc) {
                        *d *= yv * (T::one() - yv);
                    }
                });
            vec![(a, dx)]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.op(out, &[a], move |g| {
            let mut dx = g.clone();
            for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                if xv <= T::zero() {
                    *d = T::zero();
                }
            }
            vec![(a, dx)]
        })
    }

    /// Scalar node `sum_i w_i * terms_i` from scalar terms.
    pub fn weighted_sum_scalars(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, w) in terms {
            acc += self.value(v).item() * w;
        }
        let terms_owned: Vec<(Var, T)> = terms.to_vec();
        let inputs: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        self.op(Tensor::scalar(acc), &inputs, move |g| {
            let g0 = g.item();
            terms_owned
                .iter()
                .map(|&(v, w)| (v, Tensor::scalar(g0 * w)))
                .collect()
        })
    }

    /// Scalar node `scale * sum(x)`.
    pub fn sum_all(&mut self, a: Var, scale: T) -> Var {
        let total: T = self.value(a).data().iter().copied().sum();
        let shape = self.value(a).shape().to_vec();
        self.op(Tensor::scalar(total * scale), &[a], move |g| {
            vec![(a, Tensor::full(shape, g.item() * scale))]
        })
    }

    /// Scalar node `scale * sum((x - target)^2)` against a frozen target.
    pub fn sq_diff_sum(&mut self, a: Var, target: &Tensor<T>, scale: T) -> Var {
        let x = self.value(a).clone();
        assert_eq!(x.shape(), target.shape(), "sq_diff_sum shape mismatch");
        let mut acc = 0.0f64;
        for (&xv, &tv) in x.data().iter().zip(target.data()) {
            let d = (xv - tv).as_f64();
            acc += d * d;
        }
        let out = Tensor::scalar(T::from_f64(acc) * scale);
        let target = target.clone();
        self.op(out, &[a], move |g| {
            let c = T::from_f64(2.0) * scale * g.item();
            let mut dx = x.clone();
            for (d, &tv) in dx.data_mut().iter_mut().zip(target.data()) {
                *d = (*d - tv) * c;
            }
            vec![(a, dx)]
        })
    }

    // ---- structural ops ----

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(a).reshaped(shape);
        let back_shape = self.value(a).shape().to_vec();
        self.op(out, &[a], move |g| vec![(a, g.reshaped(back_shape))])
    }

    /// Slice `[0..m]` of the last dimension.
    pub fn narrow_last(&mut self, a: Var, m: usize) -> Var {
        self.narrow_last_from(a, 0, m)
    }

    /// Slice `[offset..offset+m]` of the last dimension.
    pub fn narrow_last_from(&mut self, a: Var, offset: usize, m: usize) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let l = *shape.last().expect("narrow_last on 0-d tensor");
        assert!(offset + m <= l, "narrow_last: [{offset}, {}) exceeds last dim {l}", offset + m);
        let rows = x.numel() / l;
        let mut out = vec![T::zero(); rows * m];
        for r in 0..rows {
            out[r * m..(r + 1) * m].copy_from_slice(&x.data()[r * l + offset..r * l + offset + m]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = m;
        self.op(Tensor::from_vec(out_shape, out), &[a], move |g| {
            let mut dx = Tensor::zeros(shape.clone());
            {
                let dd = dx.data_mut();
                for r in 0..rows {
                    dd[r * l + offset..r * l + offset + m].copy_from_slice(&g.data()[r * m..(r + 1) * m]);
                }
            }
            vec![(a, dx)]
        })
    }

    /// Concatenate along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let b = self.value(parts[0]).shape()[0];
        let h = self.value(parts[0]).shape()[2];
        let w = self.value(parts[0]).shape()[3];
        let plane = h * w;
        let chans: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!((s[0], s[2], s[3]), (b, h, w), "concat_channels spatial mismatch");
        }
        let c_total: usize = chans.iter().sum();
        let mut out = vec![T::zero(); b * c_total * plane];
        for n in 0..b {
            let mut off = 0;
            for (i, &p) in parts.iter().enumerate() {
                let src = self.value(p).data();
                let len = chans[i] * plane;
                out[(n * c_total + off) * plane..(n * c_total + off) * plane + len]
                    .copy_from_slice(&src[n * len..(n + 1) * len]);
                off += chans[i];
            }
        }
        let parts_owned: Vec<Var> = parts.to_vec();
        self.op(
            Tensor::from_vec(vec![b, c_total, h, w], out),
            parts,
            move |g| {
                let mut grads: Vec<(Var, Tensor<T>)> = Vec::with_capacity(parts_owned.len());
                let mut off = 0;
                for (i, &p) in parts_owned.iter().enumerate() {
                    let len = chans[i] * plane;
                    let mut dp = vec![T::zero(); b * len];
                    for n in 0..b {
                        dp[n * len..(n + 1) * len].copy_from_slice(
                            &g.data()[(n * c_total + off) * plane..(n * c_total + off) * plane + len],
                        );
                    }
                    grads.push((p, Tensor::from_vec(vec![b, chans[i], h, w], dp)));
                    off += chans[i];
                }
                grads
            },
        )
    }

    /// (B, C, H, W) -> (B, K=H*W, C): spatial locations become rows.
    pub fn nchw_to_nkc(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (b, c, h, w) = nchw(x.shape());
        let k = h * w;
        let mut out = vec![T::zero(); b * k * c];
        let src = x.data();
        for n in 0..b {
            for ci in 0..c {
                let base = (n * c + ci) * k;
                for p in 0..k {
                    out[(n * k + p) * c + ci] = src[base + p];
                }
            }
        }
        self.op(Tensor::from_vec(vec![b, k, c], out), &[a], move |g| {
            let mut dx = vec![T::zero(); b * c * k];
            let gd = g.data();
            for n in 0..b {
                for ci in 0..c {
                    let base = (n * c + ci) * k;
                    for p in 0..k {
                        dx[base + p] = gd[(n * k + p) * c + ci];
                    }
                }
            }
            vec![(a, Tensor::from_vec(vec![b, c, h, w], dx))]
        })
    }

    // ---- linear algebra ----

    /// x (N, D) * w (D, E) + bias (E).
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(bias);
        let (n, d) = mat(xv.shape());
        let (dw, e) = mat(wv.shape());
        assert_eq!(d, dw, "linear: inner dims disagree");
        assert_eq!(bv.shape(), &[e], "linear: bias shape");
        let mut out = vec![T::zero(); n * e];
        T::gemm(n, d, e, T::one(), xv.data(), wv.data(), T::zero(), &mut out);
        for r in 0..n {
            for c in 0..e {
                out[r * e + c] += bv.data()[c];
            }
        }
        self.op(Tensor::from_vec(vec![n, e], out), &[x, w, bias], move |g| {
            let mut dx = vec![T::zero(); n * d];
            T::gemm_nt(n, e, d, T::one(), g.data(), wv.data(), T::zero(), &mut dx);
            let mut dw = vec![T::zero(); d * e];
            T::gemm_tn(d, n, e, T::one(), xv.data(), g.data(), T::zero(), &mut dw);
            let mut db = vec![T::zero(); e];
            for r in 0..n {
                for c in 0..e {
                    db[c] += g.data()[r * e + c];
                }
            }
            vec![
                (x, Tensor::from_vec(vec![n, d], dx)),
                (w, Tensor::from_vec(vec![d, e], dw)),
                (bias, Tensor::from_vec(vec![e], db)),
            ]
        })
    }

    // ---- normalization and modulation ----

    /// Group normalization over NCHW without learned affine parameters.
    pub fn group_norm(&mut self, a: Var, groups: usize, eps: T) -> Var {
        let x = self.value(a);
        let (b, c, h, w) = nchw(x.shape());
        assert!(groups >= 1 && c % groups == 0, "group_norm: C = {c} not divisible by {groups}");
        let gsize = (c / groups) * h * w;
        let src = x.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); b * groups];
        xhat.par_chunks_mut(gsize)
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(gidx, (dst, istd_out))| {
                let off = gidx * gsize;
                let sl = &src[off..off + gsize];
                let len = T::from_f64(gsize as f64);
                let mean = sl.iter().copied().sum::<T>() / len;
                let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
                let istd = T::one() / (var + eps).sqrt();
                *istd_out = istd;
                for (o, &v) in dst.iter_mut().zip(sl) {
                    *o = (v - mean) * istd;
                }
            });
        let out = Tensor::from_vec(vec![b, c, h, w], xhat);
        let xhat_t = out.clone();
        self.op(out, &[a], move |g| {
            let gd = g.data();
            let xh = xhat_t.data();
            let mut dx = vec![T::zero(); gd.len()];
            let len = T::from_f64(gsize as f64);
            dx.par_chunks_mut(gsize).enumerate().for_each(|(gidx, dst)| {
                let off = gidx * gsize;
                let istd = inv_std[gidx];
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for i in off..off + gsize {
                    sum_g += gd[i];
                    sum_gx += gd[i] * xh[i];
                }
                let mean_g = sum_g / len;
                let mean_gx = sum_gx / len;
                for (j, o) in dst.iter_mut().enumerate() {
                    let i = off + j;
                    *o = istd * (gd[i] - mean_g - xh[i] * mean_gx);
                }
            });
            vec![(a, Tensor::from_vec(vec![b, c, h, w], dx))]
        })
    }

    /// FiLM: y = x * (1 + scale) + shift with per-(batch, channel) parameters
    /// broadcast over space.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x).clone();
        let (b, c, h, w) = nchw(xv.shape());
        let plane = h * w;
        let sv = self.value(scale).clone();
        assert_eq!(sv.shape(), &[b, c], "film scale shape");
        assert_eq!(self.value(shift).shape(), &[b, c], "film shift shape");
        let tv = self.value(shift);
        let mut out = vec![T::zero(); xv.numel()];
        let tv_data = tv.data();
        out.par_chunks_mut(plane).enumerate().for_each(|(pc, dst)| {
            let m = T::one() + sv.data()[pc];
            let t = tv_data[pc];
            let off = pc * plane;
            for (j, o) in dst.iter_mut().enumerate() {
                *o = xv.data()[off + j] * m + t;
            }
        });
        self.op(Tensor::from_vec(vec![b, c, h, w], out), &[x, scale, shift], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut ds = vec![T::zero(); b * c];
            let mut dt = vec![T::zero(); b * c];
            dx.par_chunks_mut(plane)
                .zip(ds.par_iter_mut().zip(dt.par_iter_mut()))
                .enumerate()
                .for_each(|(pc, (dst, (ds_o, dt_o)))| {
                    let m = T::one() + sv.data()[pc];
                    let off = pc * plane;
                    let mut acc_s = T::zero();
                    let mut acc_t = T::zero();
                    for (j, o) in dst.iter_mut().enumerate() {
                        *o = gd[off + j] * m;
                        acc_s += gd[off + j] * xv.data()[off + j];
                        acc_t += gd[off + j];
                    }
                    *ds_o = acc_s;
                    *dt_o = acc_t;
                });
            vec![
                (x, Tensor::from_vec(vec![b, c, h, w], dx)),
                (scale, Tensor::from_vec(vec![b, c], ds)),
                (shift, Tensor::from_vec(vec![b, c], dt)),
            ]
        })
    }

    /// Fixed per-channel affine y = x * scale_c + shift_c (frozen constants).
    pub fn channel_affine_const(&mut self, x: Var, scale: &[T], shift: &[T]) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = nchw(xv.shape());
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let plane = h * w;
        let mut out = vec![T::zero(); xv.numel()];
        for n in 0..b {
            for ci in 0..c {
                let off = (n * c + ci) * plane;
                for p in 0..plane {
                    out[off + p] = xv.data()[off + p] * scale[ci] + shift[ci];
                }
            }
        }
        let scale_owned = scale.to_vec();
        self.op(Tensor::from_vec(vec![b, c, h, w], out), &[x], move |g| {
            let mut dx = g.clone();
            let dd = dx.data_mut();
            for n in 0..b {
                for ci in 0..c {
                    let off = (n * c + ci) * plane;
                    for p in 0..plane {
                        dd[off + p] *= scale_owned[ci];
                    }
                }
            }
            vec![(x, dx)]
        })
    }

    /// Rows of the last dimension scaled to near-unit norm:
    /// y = x / (||x|| + eps), applied over every leading index.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a).clone();
        let shape = x.shape().to_vec();
        let c = *shape.last().expect("l2_normalize_rows on 0-d tensor");
        let rows = x.numel() / c;
        let mut out = vec![T::zero(); x.numel()];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let sl = &x.data()[r * c..(r + 1) * c];
            let n = sl.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = n;
            let inv = T::one() / (n + eps);
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(sl) {
                *o = v * inv;
            }
        }
        self.op(Tensor::from_vec(shape.clone(), out), &[a], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            for r in 0..rows {
                let n = norms[r];
                let r_inv = T::one() / (n + eps);
                let sl = &x.data()[r * c..(r + 1) * c];
                let gsl = &gd[r * c..(r + 1) * c];
                let dot: T = sl.iter().zip(gsl).map(|(&xv, &gv)| xv * gv).sum();
                // d/dx [x * r(n)] = r*I + x (dr/dn)(x/n)ᵀ, dr/dn = -1/(n+eps)²
                let coef = if n > T::from_f64(1e-300) {
                    dot / (n * (n + eps) * (n + eps))
                } else {
                    T::zero()
                };
                for i in 0..c {
                    dx[r * c + i] = gsl[i] * r_inv - sl[i] * coef;
                }
            }
            vec![(a, Tensor::from_vec(shape.clone(), dx))]
        })
    }

    // ---- signal packing and channel arithmetic ----

    /// Per-row power normalization of interleaved complex rows (B, 2M):
    /// each row is scaled by s = sqrt(p_z * M / sum(x^2)) so the per-symbol
    /// average power is exactly p_z.
    pub fn normalize_power_rows(&mut self, a: Var, p_z: T) -> Result<Var> {
        let x = self.value(a).clone();
        let (b, l) = mat(x.shape());
        if l < 2 || l % 2 != 0 {
            return Err(Error::shape("normalize_power", format!("row length {l} is not 2M")));
        }
        let m = T::from_f64((l / 2) as f64);
        let mut out = vec![T::zero(); x.numel()];
        let mut scales = vec![T::zero(); b];
        let mut qs = vec![T::zero(); b];
        for r in 0..b {
            let sl = &x.data()[r * l..(r + 1) * l];
            let q = sl.iter().map(|&v| v * v).sum::<T>();
            if q == T::zero() {
                return Err(Error::DegenerateSignal);
            }
            let s = (p_z * m / q).sqrt();
            scales[r] = s;
            qs[r] = q;
            for (o, &v) in out[r * l..(r + 1) * l].iter_mut().zip(sl) {
                *o = v * s;
            }
        }
        Ok(self.op(Tensor::from_vec(vec![b, l], out), &[a], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            for r in 0..b {
                let s = scales[r];
                let q = qs[r];
                let sl = &x.data()[r * l..(r + 1) * l];
                let gsl = &gd[r * l..(r + 1) * l];
                let dot: T = sl.iter().zip(gsl).map(|(&xv, &gv)| xv * gv).sum();
                // y = s(q) x, ds/dq = -s/(2q)  =>  dx = s g - (s/q) x (x·g)
                let coef = s * dot / q;
                for i in 0..l {
                    dx[r * l + i] = gsl[i] * s - sl[i] * coef;
                }
            }
            vec![(a, Tensor::from_vec(vec![b, l], dx))]
        }))
    }

    /// Multiply each interleaved complex row (B, 2M) by a fixed complex
    /// scalar `h_row`; the adjoint multiplies by the conjugate.
    pub fn complex_scale_rows(&mut self, a: Var, h: &[(T, T)]) -> Var {
        let x = self.value(a);
        let (b, l) = mat(x.shape());
        assert_eq!(h.len(), b, "complex_scale_rows: one h per row");
        assert_eq!(l % 2, 0);
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..b {
            let (hr, hi) = h[r];
            let sl = &x.data()[r * l..(r + 1) * l];
            let o = &mut out[r * l..(r + 1) * l];
            for p in 0..l / 2 {
                let (xr, xi) = (sl[2 * p], sl[2 * p + 1]);
                o[2 * p] = hr * xr - hi * xi;
                o[2 * p + 1] = hr * xi + hi * xr;
            }
        }
        let h_owned = h.to_vec();
        self.op(Tensor::from_vec(vec![b, l], out), &[a], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            for r in 0..b {
                let (hr, hi) = h_owned[r];
                let gsl = &gd[r * l..(r + 1) * l];
                let o = &mut dx[r * l..(r + 1) * l];
                for p in 0..l / 2 {
                    let (gr, gi) = (gsl[2 * p], gsl[2 * p + 1]);
                    o[2 * p] = hr * gr + hi * gi;
                    o[2 * p + 1] = hr * gi - hi * gr;
                }
            }
            vec![(a, Tensor::from_vec(vec![b, l], dx))]
        })
    }

    /// De-interleave complex rows (B, 2M) into an NCHW grid with real parts
    /// in the first `c_half` channels and imaginary parts in the next
    /// `c_half`, zero-padding the tail beyond M entries per group.
    pub fn pack_complex_grid(&mut self, a: Var, c_half: usize, gh: usize, gw: usize) -> Var {
        let x = self.value(a);
        let (b, l) = mat(x.shape());
        let m = l / 2;
        let cap = c_half * gh * gw;
        assert!(cap >= m, "pack_complex_grid: grid too small for {m} symbols");
        let mut out = vec![T::zero(); b * 2 * cap];
        for n in 0..b {
            let sl = &x.data()[n * l..(n + 1) * l];
            let o = &mut out[n * 2 * cap..(n + 1) * 2 * cap];
            for p in 0..m {
                o[p] = sl[2 * p];
                o[cap + p] = sl[2 * p + 1];
            }
        }
        self.op(
            Tensor::from_vec(vec![b, 2 * c_half, gh, gw], out),
            &[a],
            move |g| {
                let gd = g.data();
                let mut dx = vec![T::zero(); b * l];
                for n in 0..b {
                    let gsl = &gd[n * 2 * cap..(n + 1) * 2 * cap];
                    let o = &mut dx[n * l..(n + 1) * l];
                    for p in 0..m {
                        o[2 * p] = gsl[p];
                        o[2 * p + 1] = gsl[cap + p];
                    }
                }
                vec![(a, Tensor::from_vec(vec![b, l], dx))]
            },
        )
    }

    /// Sinusoidal features of a per-row scalar: (B, 1) -> (B, 2D) laid out
    /// as [cos(w_1 g) .. cos(w_D g) | sin(w_1 g) .. sin(w_D g)].
    pub fn sinusoidal(&mut self, a: Var, freqs: &[T]) -> Var {
        let x = self.value(a).clone();
        let (b, one) = mat(x.shape());
        assert_eq!(one, 1, "sinusoidal expects (B, 1)");
        let d = freqs.len();
        let mut out = vec![T::zero(); b * 2 * d];
        for r in 0..b {
            let gamma = x.data()[r];
            for (j, &w) in freqs.iter().enumerate() {
                out[r * 2 * d + j] = (w * gamma).cos();
                out[r * 2 * d + d + j] = (w * gamma).sin();
            }
        }
        let freqs_owned = freqs.to_vec();
        self.op(Tensor::from_vec(vec![b, 2 * d], out), &[a], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b];
            for r in 0..b {
                let gamma = x.data()[r];
                let mut acc = T::zero();
                for (j, &w) in freqs_owned.iter().enumerate() {
                    acc += -w * (w * gamma).sin() * gd[r * 2 * d + j];
                    acc += w * (w * gamma).cos() * gd[r * 2 * d + d + j];
                }
                dx[r] = acc;
            }
            vec![(a, Tensor::from_vec(vec![b, 1], dx))]
        })
    }
}

const PAR_CHUNK: usize = 1 << 15;

fn par_map<T: Elem>(x: &Tensor<T>, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
    let mut out = vec![T::zero(); x.numel()];
    out.par_chunks_mut(PAR_CHUNK)
        .zip(x.data().par_chunks(PAR_CHUNK))
        .for_each(|(oc, xc)| {
            for (o, &v) in oc.iter_mut().zip(xc) {
                *o = f(v);
            }
        });
    Tensor::from_vec(x.shape().to_vec(), out)
}

fn sigmoid_scalar<T: Elem>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

pub(crate) fn mat(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected 2-d, got {shape:?}");
    (shape[0], shape[1])
}
