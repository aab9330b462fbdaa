//! Physical-layer simulation: power normalization, AWGN and Rayleigh block
//! fading, zero-forcing equalization, and SNR bookkeeping.
//!
//! Conventions:
//! - A length-M complex symbol vector is packed from 2M reals interleaved as
//!   (real, imag) pairs.
//! - "Complex noise variance σ²" means E|n|² = σ², i.e. each real component
//!   has variance σ²/2.
//! - One scalar coefficient h per transmitted image (block fading). AWGN is
//!   h = 1 exactly.
//! - Zero-forcing needs |h| above [`H_FLOOR`]; below it the draw is a deep
//!   fade and the caller re-draws (training) or records an outage (eval).

pub use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floor on |h| below which zero-forcing is refused.
pub const H_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Some(ChannelKind::Awgn),
            "rayleigh" => Some(ChannelKind::Rayleigh),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

/// Length-M complex channel-symbol vector with its declared average power.
#[derive(Debug, Clone)]
pub struct ComplexSignal {
    pub symbols: Vec<Complex64>,
    pub declared_power: f64,
}

impl ComplexSignal {
    /// Measured per-symbol average power (1/M) Σ |z_m|².
    pub fn average_power(&self) -> f64 {
        self.symbols.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }

    /// Interleave back to 2M reals as (real, imag) pairs.
    pub fn to_interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.symbols.len());
        for z in &self.symbols {
            out.push(z.re);
            out.push(z.im);
        }
        out
    }
}

/// One channel draw: coefficient, SNR, derived noise variance.
#[derive(Debug, Clone, Copy)]
pub struct ChannelRealization {
    pub h: Complex64,
    pub snr_db: f64,
    pub noise_var: f64,
    pub kind: ChannelKind,
}

impl ChannelRealization {
    /// Draw a realization for the given SNR against a signal of power `p_z`.
    pub fn sample(kind: ChannelKind, snr_db: f64, p_z: f64, rng: &mut impl Rng) -> Self {
        ChannelRealization {
            h: sample_channel(kind, rng),
            snr_db,
            noise_var: noise_variance(snr_db, p_z),
            kind,
        }
    }

    pub fn is_deep_fade(&self) -> bool {
        self.h.norm() < H_FLOOR
    }
}

/// Equalized receive vector with its effective post-equalization SNR.
#[derive(Debug, Clone)]
pub struct EqualizedSignal {
    pub symbols: Vec<Complex64>,
    pub effective_snr_db: f64,
}

impl EqualizedSignal {
    pub fn to_interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.symbols.len());
        for z in &self.symbols {
            out.push(z.re);
            out.push(z.im);
        }
        out
    }
}

/// Pack 2M interleaved reals into M complex symbols scaled so the
/// per-symbol average power is exactly `p_z`. The scale is the single
/// positive scalar s = sqrt(p_z · M / Σ|z|²).
pub fn normalize_power(raw: &[f64], p_z: f64) -> Result<ComplexSignal> {
    if raw.len() < 2 || raw.len() % 2 != 0 {
        return Err(Error::shape(
            "normalize_power",
            format!("need 2M reals with M >= 1, got length {}", raw.len()),
        ));
    }
    if p_z <= 0.0 {
        return Err(Error::invalid("normalize_power", format!("p_z = {p_z} must be > 0")));
    }
    let m = raw.len() / 2;
    let sq: f64 = raw.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(Error::DegenerateSignal);
    }
    let s = (p_z * m as f64 / sq).sqrt();
    let symbols = raw
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0] * s, p[1] * s))
        .collect();
    Ok(ComplexSignal { symbols, declared_power: p_z })
}

/// σ² = p_z · 10^(−SNR_dB/10).
pub fn noise_variance(snr_db: f64, p_z: f64) -> f64 {
    p_z * 10f64.powf(-snr_db / 10.0)
}

/// AWGN: h = 1. Rayleigh: h ~ CN(0, 1), i.e. independent N(0, 1/2)
/// components, so E|h|² = 1.
pub fn sample_channel(kind: ChannelKind, rng: &mut impl Rng) -> Complex64 {
    match kind {
        ChannelKind::Awgn => Complex64::new(1.0, 0.0),
        ChannelKind::Rayleigh => {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            let s = 0.5f64.sqrt();
            Complex64::new(re * s, im * s)
        }
    }
}

/// Draw n complex Gaussian noise samples with E|n|² = noise_var.
pub fn sample_noise(n: usize, noise_var: f64, rng: &mut impl Rng) -> Vec<Complex64> {
    let s = (noise_var / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re * s, im * s)
        })
        .collect()
}

/// y = h z + n.
pub fn transmit(z: &ComplexSignal, ch: &ChannelRealization, rng: &mut impl Rng) -> Vec<Complex64> {
    let noise = sample_noise(z.symbols.len(), ch.noise_var, rng);
    z.symbols
        .iter()
        .zip(noise)
        .map(|(&zs, ns)| ch.h * zs + ns)
        .collect()
}

/// Zero-forcing: ỹ = y / h, with effective SNR γ_eff = |h|² · SNR reported
/// in dB. For AWGN (h = 1) the signal passes through unchanged.
pub fn equalize_zf(y: &[Complex64], ch: &ChannelRealization) -> Result<EqualizedSignal> {
    let h_abs = ch.h.norm();
    if h_abs < H_FLOOR {
        return Err(Error::DeepFade { h_abs, floor: H_FLOOR });
    }
    let symbols = if ch.kind == ChannelKind::Awgn {
        y.to_vec()
    } else {
        let inv = ch.h.conj() / ch.h.norm_sqr();
        y.iter().map(|&v| v * inv).collect()
    };
    let effective_snr_db = effective_snr_db(ch.h, ch.snr_db);
    Ok(EqualizedSignal { symbols, effective_snr_db })
}

/// γ_eff in dB: snr_db + 10·log10(|h|²). Exactly snr_db when h = 1.
pub fn effective_snr_db(h: Complex64, snr_db: f64) -> f64 {
    let g = h.norm_sqr();
    if g == 1.0 {
        snr_db
    } else {
        snr_db + 10.0 * g.log10()
    }
}
