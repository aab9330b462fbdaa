//! Trainable networks: the JSCC encoder and the SNR-conditioned one-step
//! U-Net decoder, plus shared geometry and FLOP accounting.

mod blocks;
mod codec;

pub use blocks::{groups_for, snr_frequencies, FilmHead, ResBlock, SnrEmbed};
pub use codec::{Decoder, Encoder, JsccSystem, P_Z};

use crate::error::{Error, Result};

/// Architecture configuration for one encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Source image shape.
    pub image_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Channel bandwidth ratio M / (C H W).
    pub cbr: f64,
    /// U-Net width at the finest level.
    pub base_width: usize,
    /// Number of U-Net downsampling levels.
    pub depth: usize,
    /// Residual blocks per U-Net level.
    pub blocks_per_level: usize,
    /// SNR embedding dimension D (also the sinusoidal frequency count).
    pub embed_dim: usize,
    /// Hidden width of the shared FiLM trunk.
    pub film_hidden: usize,
    /// Encoder stage width.
    pub enc_width: usize,
    /// How many of the four encoder stages use stride 2.
    pub enc_downsamples: usize,
    /// Decoder stem width (latent grid up to image resolution).
    pub stem_width: usize,
}

impl ModelConfig {
    /// Defaults for 32x32 grayscale sources.
    pub fn mnist() -> Self {
        ModelConfig {
            image_channels: 1,
            image_h: 32,
            image_w: 32,
            cbr: 1.0,
            base_width: 32,
            depth: 2,
            blocks_per_level: 2,
            embed_dim: 64,
            film_hidden: 64,
            enc_width: 16,
            enc_downsamples: 2,
            stem_width: 32,
        }
    }

    /// Number of complex channel symbols M = round(cbr * C * H * W), >= 1.
    pub fn m_symbols(&self) -> usize {
        let m = (self.cbr * (self.image_channels * self.image_h * self.image_w) as f64).round();
        (m as usize).max(1)
    }

    /// Latent grid spatial size after the encoder's strided stages.
    pub fn latent_hw(&self) -> (usize, usize) {
        let f = 1usize << self.enc_downsamples;
        (self.image_h / f, self.image_w / f)
    }

    /// Channels of the encoder head: smallest count whose flattened grid
    /// holds 2M reals.
    pub fn head_channels(&self) -> usize {
        let (gh, gw) = self.latent_hw();
        (2 * self.m_symbols()).div_ceil(gh * gw)
    }

    /// Half the decoder input channels: real and imaginary parts each get
    /// this many channels on the latent grid.
    pub fn latent_half_channels(&self) -> usize {
        let (gh, gw) = self.latent_hw();
        self.m_symbols().div_ceil(gh * gw)
    }

    pub fn unet_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::invalid("ModelConfig", "image shape must be positive"));
        }
        if self.cbr <= 0.0 {
            return Err(Error::invalid("ModelConfig", "cbr must be positive"));
        }
        if self.depth < 1 {
            return Err(Error::invalid("ModelConfig", "depth must be >= 1"));
        }
        if self.blocks_per_level < 1 {
            return Err(Error::invalid("ModelConfig", "blocks_per_level must be >= 1"));
        }
        for (name, v) in [
            ("base_width", self.base_width),
            ("embed_dim", self.embed_dim),
            ("film_hidden", self.film_hidden),
            ("enc_width", self.enc_width),
            ("stem_width", self.stem_width),
        ] {
            if v == 0 {
                return Err(Error::invalid("ModelConfig", format!("{name} must be >= 1")));
            }
        }
        if self.enc_downsamples > 4 {
            return Err(Error::invalid("ModelConfig", "enc_downsamples must be <= 4 (encoder has 4 stages)"));
        }
        let fe = 1usize << self.enc_downsamples;
        if self.image_h % fe != 0 || self.image_w % fe != 0 {
            return Err(Error::invalid(
                "ModelConfig",
                format!("image {}x{} not divisible by 2^enc_downsamples = {fe}", self.image_h, self.image_w),
            ));
        }
        let fd = 1usize << self.depth;
        if self.image_h % fd != 0 || self.image_w % fd != 0 {
            return Err(Error::invalid(
                "ModelConfig",
                format!("image {}x{} not divisible by 2^depth = {fd}", self.image_h, self.image_w),
            ));
        }
        Ok(())
    }
}

/// One gemm-backed layer for FLOP accounting (per image).
#[derive(Debug, Clone, Copy)]
pub(crate) enum LayerCost {
    Conv { cin: usize, cout: usize, k: usize, oh: usize, ow: usize },
    Linear { din: usize, dout: usize },
}

impl LayerCost {
    fn flops(&self) -> u64 {
        match *self {
            LayerCost::Conv { cin, cout, k, oh, ow } => {
                2 * (k * k * cin * cout * oh * ow) as u64
            }
            LayerCost::Linear { din, dout } => 2 * (din * dout) as u64,
        }
    }
}

/// Multiply-accumulate counts x2 from layer shape arithmetic, per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopReport {
    pub encoder_gflops: f64,
    pub decoder_gflops: f64,
}

/// Estimate encoder/decoder FLOPs for one image (gemm work only; bias,
/// normalization, and activations excluded).
pub fn count_flops(config: &ModelConfig) -> Result<FlopReport> {
    config.validate()?;
    let enc: u64 = codec::encoder_layers(config).iter().map(LayerCost::flops).sum();
    let dec: u64 = codec::decoder_layers(config).iter().map(LayerCost::flops).sum();
    Ok(FlopReport {
        encoder_gflops: enc as f64 / 1e9,
        decoder_gflops: dec as f64 / 1e9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_symbol_count() {
        let cfg = ModelConfig::mnist();
        assert_eq!(cfg.m_symbols(), 1024);
        assert_eq!(cfg.latent_hw(), (8, 8));
        assert_eq!(cfg.head_channels(), 32);
        assert_eq!(cfg.latent_half_channels(), 16);
    }

    #[test]
    fn large_image_symbol_count() {
        let cfg = ModelConfig {
            image_channels: 3,
            image_h: 256,
            image_w: 256,
            cbr: 0.5,
            enc_downsamples: 4,
            depth: 3,
            ..ModelConfig::mnist()
        };
        assert_eq!(cfg.m_symbols(), 98304);
    }

    #[test]
    fn single_conv_flops_example() {
        // 3x3 conv, 16 -> 16 channels, 32x32 output: 2 * 9*16*16*1024
        let cost = LayerCost::Conv { cin: 16, cout: 16, k: 3, oh: 32, ow: 32 };
        assert_eq!(cost.flops(), 4_718_592);
    }

    #[test]
    fn conv_flops_scale_quadratically_with_spatial_size() {
        let small = LayerCost::Conv { cin: 8, cout: 8, k: 3, oh: 16, ow: 16 };
        let big = LayerCost::Conv { cin: 8, cout: 8, k: 3, oh: 32, ow: 32 };
        assert_eq!(big.flops(), 4 * small.flops());
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut cfg = ModelConfig::mnist();
        cfg.image_h = 30;
        assert!(cfg.validate().is_err());
        let mut cfg2 = ModelConfig::mnist();
        cfg2.depth = 0;
        assert!(cfg2.validate().is_err());
    }
}
