//! Reconstruction quality metrics: PSNR, MS-SSIM (with the -10 log10(1-v)
//! dB transform), an extractor-based perceptual distance, and CBR
//! bookkeeping. All metrics are pure functions of their inputs.

use crate::driftfield::{normalize_rows, to_rows};
use crate::error::{Error, Result};
use crate::features::Extractor;
use crate::tensor::{Elem, Tensor};

/// Reports are capped here so CSVs stay finite.
pub const DB_CAP: f64 = 99.0;

/// Standard MS-SSIM scale weights (finest to coarsest).
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Aggregated metrics over a set of images at one evaluation point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub snr_db: f64,
    pub psnr_db: f64,
    pub msssim: f64,
    pub msssim_db: f64,
    pub feat_dist: f64,
    pub n_images: usize,
}

/// 10 log10(peak^2 / MSE), capped at [`DB_CAP`].
pub fn psnr<T: Elem>(x: &Tensor<T>, xhat: &Tensor<T>, peak: f64) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", x.shape(), xhat.shape())));
    }
    if peak <= 0.0 {
        return Err(Error::invalid("psnr", "peak must be positive"));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in x.data().iter().zip(xhat.data()) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    let mse = acc / x.numel() as f64;
    if mse == 0.0 {
        return Ok(DB_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(DB_CAP))
}

/// -10 log10(1 - v), capped at [`DB_CAP`]; v must lie in [0, 1].
pub fn msssim_db(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid("msssim_db", format!("value {v} outside [0, 1]")));
    }
    if v >= 1.0 {
        return Ok(DB_CAP);
    }
    Ok((-10.0 * (1.0 - v).log10()).min(DB_CAP))
}

/// Largest scale count the standard construction supports for this size,
/// prefering 5 scales for large inputs and 3 for 32x32-class inputs.
pub fn default_n_scales(h: usize, w: usize) -> usize {
    let m = h.min(w);
    if m >= 176 {
        5
    } else if m >= 32 {
        3
    } else {
        let mut n = 1;
        while m / (1 << n) >= 4 && n < 4 {
            n += 1;
        }
        n
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Separable valid-mode convolution of an (h, w) plane with a 1-d window.
fn blur_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &wv) in win.iter().enumerate() {
                acc += img[r * w + c + i] * wv;
            }
            tmp[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &wv) in win.iter().enumerate() {
                acc += tmp[(r + i) * ow + c] * wv;
            }
            out[r * ow + c] = acc;
        }
    }
    (out, oh, ow)
}

fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = 0.25
                * (img[(2 * r) * w + 2 * c]
                    + img[(2 * r) * w + 2 * c + 1]
                    + img[(2 * r + 1) * w + 2 * c]
                    + img[(2 * r + 1) * w + 2 * c + 1]);
        }
    }
    (out, oh, ow)
}

/// Luminance and contrast-structure terms of one plane pair at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    // Window shrinks with the plane so coarse scales of small images stay
    // defined; sigma scales with it.
    let k = 11.min(if h.min(w) % 2 == 0 { h.min(w) - 1 } else { h.min(w) });
    let win = gaussian_window(k, 1.5 * k as f64 / 11.0);
    let (mu_a, oh, ow) = blur_valid(a, h, w, &win);
    let (mu_b, _, _) = blur_valid(b, h, w, &win);
    let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (raw_aa, _, _) = blur_valid(&sq(a), h, w, &win);
    let (raw_bb, _, _) = blur_valid(&sq(b), h, w, &win);
    let (raw_ab, _, _) = blur_valid(&prod, h, w, &win);
    let n = oh * ow;
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = (raw_aa[i] - ma * ma).max(0.0);
        let vb = (raw_bb[i] - mb * mb).max(0.0);
        let cov = raw_ab[i] - ma * mb;
        lum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (lum / n as f64, cs / n as f64)
}

/// Multi-scale SSIM: contrast-structure at every scale, luminance at the
/// coarsest, combined with the standard exponent weights renormalized to
/// the scale count.
pub fn ms_ssim<T: Elem>(x: &Tensor<T>, xhat: &Tensor<T>, n_scales: usize) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::shape("ms_ssim", format!("{:?} vs {:?}", x.shape(), xhat.shape())));
    }
    if x.shape().len() != 3 {
        return Err(Error::shape("ms_ssim", format!("expected CHW, got {:?}", x.shape())));
    }
    if !(1..=5).contains(&n_scales) {
        return Err(Error::invalid("ms_ssim", "n_scales must be in 1..=5"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h.min(w) / (1 << (n_scales - 1)) < 4 {
        return Err(Error::invalid(
            "ms_ssim",
            format!(
                "image {h}x{w} too small for {n_scales} scales; try n_scales = {}",
                default_n_scales(h, w)
            ),
        ));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..n_scales].iter().sum();
    let weights: Vec<f64> = MSSSIM_WEIGHTS[..n_scales].iter().map(|v| v / wsum).collect();

    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor<T>| -> Vec<f64> {
            t.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|v| v.as_f64())
                .collect()
        };
        let (mut a, mut b) = (plane(x), plane(xhat));
        let (mut ph, mut pw) = (h, w);
        let mut score = 1.0f64;
        for (scale, &wt) in weights.iter().enumerate() {
            let (lum, cs) = ssim_terms(&a, &b, ph, pw);
            if scale + 1 == n_scales {
                score *= lum.max(0.0).powf(wt) * cs.max(0.0).powf(wt);
            } else {
                score *= cs.max(0.0).powf(wt);
                let (na, nh, nw) = downsample2(&a, ph, pw);
                let (nb, _, _) = downsample2(&b, ph, pw);
                a = na;
                b = nb;
                ph = nh;
                pw = nw;
            }
        }
        total += score;
    }
    Ok((total / c as f64).min(1.0))
}

/// Mean squared distance between unit-normalized feature pyramids. This is
/// the in-repo perceptual proxy (labeled feat_dist); it is not LPIPS.
pub fn feature_distance<T: Elem>(
    x: &Tensor<T>,
    xhat: &Tensor<T>,
    extractor: &Extractor<T>,
) -> Result<f64> {
    let pa = extractor.extract(x)?;
    let pb = extractor.extract(xhat)?;
    let eps = T::from_f64(1e-8);
    let mut total = 0.0;
    for (la, lb) in pa.levels.iter().zip(&pb.levels) {
        let fa = normalize_rows(&to_rows(&la.features), eps)?;
        let fb = normalize_rows(&to_rows(&lb.features), eps)?;
        let k = fa.k();
        let mut acc = 0.0f64;
        for (&a, &b) in fa.rows().data().iter().zip(fb.rows().data()) {
            let d = a.as_f64() - b.as_f64();
            acc += d * d;
        }
        total += acc / k as f64;
    }
    Ok(total / pa.levels.len() as f64)
}

/// Header of the evaluation CSV written by the CLI and tests.
pub fn eval_csv_header() -> &'static str {
    "snr_db,channel,psnr_db,msssim_db,feat_dist,n"
}

/// Channel bandwidth ratio M / (C H W).
pub fn cbr(m: usize, c: usize, h: usize, w: usize) -> f64 {
    m as f64 / (c * h * w) as f64
}
