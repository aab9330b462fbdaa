//! The JSCC encoder and the SNR-conditioned one-step U-Net decoder.
//!
//! Encoder: four 3x3 convolutional stages (the first `enc_downsamples` use
//! stride 2), a head conv sized so the flattened grid holds 2M reals, then
//! truncation to exactly 2M and per-image power normalization.
//!
//! Decoder: the equalized symbols are de-interleaved onto the latent grid
//! (real and imaginary channel groups), upsampled back to image resolution
//! by the stem, then refined by a U-Net whose residual blocks are all FiLM
//! conditioned on the sinusoidal SNR embedding. One forward pass per decode,
//! counted.

use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;

use super::blocks::{BuildCtx, ResBlock, SnrEmbed};
use super::{groups_for, LayerCost, ModelConfig};
use crate::channel::{ComplexSignal, EqualizedSignal};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, Params};
use crate::tensor::{Elem, Tensor};

/// Transmit power target for every encoded signal.
pub const P_Z: f64 = 1.0;

pub struct Encoder {
    stages: Vec<((ParamId, ParamId), usize)>,
    head: (ParamId, ParamId),
}

fn encoder_stage_plan(cfg: &ModelConfig) -> Vec<(usize, usize, usize)> {
    // (cin, cout, stride) for the four stages
    let w = cfg.enc_width;
    let widths = [w, 2 * w, 2 * w, 2 * w];
    let mut plan = Vec::with_capacity(4);
    let mut cin = cfg.image_channels;
    for (i, &cout) in widths.iter().enumerate() {
        let stride = if i < cfg.enc_downsamples { 2 } else { 1 };
        plan.push((cin, cout, stride));
        cin = cout;
    }
    plan
}

impl Encoder {
    fn new<T: Elem>(ctx: &mut BuildCtx<T>, cfg: &ModelConfig) -> Self {
        let mut stages = Vec::new();
        let (mut h, mut w) = (cfg.image_h, cfg.image_w);
        for (i, (cin, cout, stride)) in encoder_stage_plan(cfg).into_iter().enumerate() {
            if stride == 2 {
                h /= 2;
                w /= 2;
            }
            stages.push((ctx.conv(&format!("enc.stage{i}"), cin, cout, 3, h, w, false), stride));
        }
        let head = ctx.conv("enc.head", 2 * cfg.enc_width, cfg.head_channels(), 3, h, w, false);
        Encoder { stages, head }
    }

    /// x: (B, C, H, W) in [0, 1] -> power-normalized (B, 2M).
    pub fn forward<T: Elem>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        cfg: &ModelConfig,
        x: Var,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let want = [cfg.image_channels, cfg.image_h, cfg.image_w];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(
                "encode",
                format!("expected (B, {}, {}, {}), got {shape:?}", want[0], want[1], want[2]),
            ));
        }
        let mut h = x;
        for &((w, b), stride) in &self.stages {
            h = g.conv2d(h, bind.var(w), bind.var(b), stride);
            h = g.silu(h);
        }
        h = g.conv2d(h, bind.var(self.head.0), bind.var(self.head.1), 1);
        let b = shape[0];
        let flat = g.value(h).numel() / b;
        let h = g.reshape(h, vec![b, flat]);
        let h = g.narrow_last(h, 2 * cfg.m_symbols());
        g.normalize_power_rows(h, T::from_f64(P_Z))
    }
}

struct DownLevel {
    blocks: Vec<ResBlock>,
    down: (ParamId, ParamId),
}

struct UpLevel {
    up_conv: (ParamId, ParamId),
    blocks: Vec<ResBlock>,
}

pub struct Decoder {
    embed: SnrEmbed,
    trunk: (ParamId, ParamId),
    stem_in: (ParamId, ParamId),
    stem_ups: Vec<(ParamId, ParamId)>,
    in_conv: (ParamId, ParamId),
    down: Vec<DownLevel>,
    bottleneck: Vec<ResBlock>,
    up: Vec<UpLevel>,
    head: (ParamId, ParamId),
    forward_count: AtomicU64,
}

impl Decoder {
    fn new<T: Elem>(ctx: &mut BuildCtx<T>, cfg: &ModelConfig) -> Self {
        let embed = SnrEmbed::new(ctx, "dec.embed", cfg.embed_dim);
        let trunk = ctx.linear("dec.film_trunk", cfg.embed_dim, cfg.film_hidden, false);
        let (gh, gw) = cfg.latent_hw();
        let sw = cfg.stem_width;
        let stem_in = ctx.conv("dec.stem.in", 2 * cfg.latent_half_channels(), sw, 3, gh, gw, false);
        let mut stem_ups = Vec::new();
        let (mut h, mut w) = (gh, gw);
        for i in 0..cfg.enc_downsamples {
            h *= 2;
            w *= 2;
            stem_ups.push(ctx.conv(&format!("dec.stem.up{i}"), sw, sw, 3, h, w, false));
        }
        debug_assert_eq!((h, w), (cfg.image_h, cfg.image_w));
        let in_conv = ctx.conv("dec.in", sw, cfg.base_width, 3, h, w, false);

        let fh = cfg.film_hidden;
        let mut down = Vec::new();
        for d in 0..cfg.depth {
            let wd = cfg.unet_width(d);
            let (lh, lw) = (cfg.image_h >> d, cfg.image_w >> d);
            let blocks = (0..cfg.blocks_per_level)
                .map(|i| ResBlock::new(ctx, &format!("dec.down{d}.block{i}"), fh, wd, wd, lh, lw))
                .collect();
            let down_conv = ctx.conv(
                &format!("dec.down{d}.down"),
                wd,
                cfg.unet_width(d + 1),
                3,
                lh / 2,
                lw / 2,
                false,
            );
            down.push(DownLevel { blocks, down: down_conv });
        }
        let wb = cfg.unet_width(cfg.depth);
        let (bh, bw_) = (cfg.image_h >> cfg.depth, cfg.image_w >> cfg.depth);
        let bottleneck = (0..cfg.blocks_per_level)
            .map(|i| ResBlock::new(ctx, &format!("dec.mid.block{i}"), fh, wb, wb, bh, bw_))
            .collect();
        let mut up = Vec::new();
        for d in (0..cfg.depth).rev() {
            let wd = cfg.unet_width(d);
            let (lh, lw) = (cfg.image_h >> d, cfg.image_w >> d);
            let up_conv = ctx.conv(&format!("dec.up{d}.conv"), cfg.unet_width(d + 1), wd, 3, lh, lw, false);
            let mut blocks = Vec::new();
            blocks.push(ResBlock::new(ctx, &format!("dec.up{d}.block0"), fh, 2 * wd, wd, lh, lw));
            for i in 1..cfg.blocks_per_level {
                blocks.push(ResBlock::new(ctx, &format!("dec.up{d}.block{i}"), fh, wd, wd, lh, lw));
            }
            up.push(UpLevel { up_conv, blocks });
        }
        let head = ctx.conv("dec.head", cfg.base_width, cfg.image_channels, 3, cfg.image_h, cfg.image_w, false);
        Decoder {
            embed,
            trunk,
            stem_in,
            stem_ups,
            in_conv,
            down,
            bottleneck,
            up,
            head,
            forward_count: AtomicU64::new(0),
        }
    }

    /// Network forward passes performed so far (one per decode).
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    /// The SNR embedding e_gamma for per-row gammas (B, 1) in dB.
    pub fn embed_snr<T: Elem>(&self, g: &mut Graph<T>, bind: &Binding, gammas: Var) -> Var {
        self.embed.forward(g, bind, gammas)
    }

    /// y_eq: (B, 2M) equalized interleaved reals; gammas: (B, 1) in dB.
    /// One forward pass producing (B, C, H, W) in [0, 1].
    pub fn forward<T: Elem>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        cfg: &ModelConfig,
        y_eq: Var,
        gammas: Var,
    ) -> Result<Var> {
        let shape = g.value(y_eq).shape().to_vec();
        let m2 = 2 * cfg.m_symbols();
        if shape.len() != 2 || shape[1] != m2 {
            return Err(Error::shape("decode", format!("expected (B, {m2}), got {shape:?}")));
        }
        if !g.value(gammas).is_finite() {
            return Err(Error::NonFinite("decode gamma"));
        }
        self.forward_count.fetch_add(1, Ordering::Relaxed);

        let e = self.embed.forward(g, bind, gammas);
        let trunk = g.linear(e, bind.var(self.trunk.0), bind.var(self.trunk.1));
        let trunk = g.silu(trunk);

        let (gh, gw) = cfg.latent_hw();
        let mut h = g.pack_complex_grid(y_eq, cfg.latent_half_channels(), gh, gw);
        h = g.conv2d(h, bind.var(self.stem_in.0), bind.var(self.stem_in.1), 1);
        h = g.silu(h);
        for &(w, b) in &self.stem_ups {
            h = g.upsample2x(h);
            h = g.conv2d(h, bind.var(w), bind.var(b), 1);
            h = g.silu(h);
        }
        h = g.conv2d(h, bind.var(self.in_conv.0), bind.var(self.in_conv.1), 1);

        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            for block in &level.blocks {
                h = block.forward(g, bind, h, trunk);
            }
            skips.push(h);
            h = g.conv2d(h, bind.var(level.down.0), bind.var(level.down.1), 2);
        }
        for block in &self.bottleneck {
            h = block.forward(g, bind, h, trunk);
        }
        for level in &self.up {
            h = g.upsample2x(h);
            h = g.conv2d(h, bind.var(level.up_conv.0), bind.var(level.up_conv.1), 1);
            let skip = skips.pop().expect("skip per level");
            h = g.concat_channels(&[h, skip]);
            for block in &level.blocks {
                h = block.forward(g, bind, h, trunk);
            }
        }
        h = g.group_norm(h, groups_for(cfg.base_width), T::from_f64(1e-5));
        h = g.silu(h);
        h = g.conv2d(h, bind.var(self.head.0), bind.var(self.head.1), 1);
        Ok(g.sigmoid(h))
    }
}

/// Encoder/decoder pair sharing one parameter arena.
pub struct JsccSystem<T: Elem> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl<T: Elem> JsccSystem<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new(seed);
        let mut ctx = BuildCtx::new(&mut params);
        let encoder = Encoder::new(&mut ctx, &config);
        let decoder = Decoder::new(&mut ctx, &config);
        Ok(JsccSystem { config, params, encoder, decoder })
    }

    /// Encode one (C, H, W) image into a power-normalized symbol vector,
    /// forward only.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<ComplexSignal> {
        let s = image.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("encode", format!("expected CHW, got {s:?}")));
        }
        let mut g = Graph::new();
        let bind = Binding::bind(&self.params, &mut g, false);
        let x = g.constant(image.reshaped(vec![1, s[0], s[1], s[2]]));
        let z = self.encoder.forward(&mut g, &bind, &self.config, x)?;
        let row = g.value(z);
        let symbols = row
            .data()
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0].as_f64(), p[1].as_f64()))
            .collect();
        Ok(ComplexSignal { symbols, declared_power: P_Z })
    }

    /// Decode one equalized signal, forward only (one network pass).
    pub fn decode_signal(&self, y: &EqualizedSignal) -> Result<Tensor<T>> {
        self.decode_signal_with(&self.params, y)
    }

    /// Decode with an explicit parameter arena (e.g. the EMA shadow).
    pub fn decode_signal_with(&self, params: &Params<T>, y: &EqualizedSignal) -> Result<Tensor<T>> {
        let m = self.config.m_symbols();
        if y.symbols.len() != m {
            return Err(Error::shape(
                "decode",
                format!("expected {m} symbols, got {}", y.symbols.len()),
            ));
        }
        if !y.effective_snr_db.is_finite() {
            return Err(Error::NonFinite("decode gamma"));
        }
        let mut g = Graph::new();
        let bind = Binding::bind(params, &mut g, false);
        let mut row = Vec::with_capacity(2 * m);
        for z in &y.symbols {
            row.push(T::from_f64(z.re));
            row.push(T::from_f64(z.im));
        }
        let y_var = g.constant(Tensor::from_vec(vec![1, 2 * m], row));
        let gamma = g.constant(Tensor::from_vec(vec![1, 1], vec![T::from_f64(y.effective_snr_db)]));
        let x = self.decoder.forward(&mut g, &bind, &self.config, y_var, gamma)?;
        let s = g.value(x).shape().to_vec();
        Ok(g.value(x).reshaped(vec![s[1], s[2], s[3]]))
    }
}

pub(crate) fn encoder_layers(cfg: &ModelConfig) -> Vec<LayerCost> {
    let mut params = Params::<f32>::new(0);
    let mut ctx = BuildCtx::new(&mut params);
    let _ = Encoder::new(&mut ctx, cfg);
    ctx.costs
}

pub(crate) fn decoder_layers(cfg: &ModelConfig) -> Vec<LayerCost> {
    let mut params = Params::<f32>::new(0);
    let mut ctx = BuildCtx::new(&mut params);
    let _ = Decoder::new(&mut ctx, cfg);
    ctx.costs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            image_channels: 1,
            image_h: 8,
            image_w: 8,
            cbr: 0.125,
            base_width: 4,
            depth: 1,
            blocks_per_level: 1,
            embed_dim: 8,
            film_hidden: 8,
            enc_width: 4,
            enc_downsamples: 2,
            stem_width: 4,
        }
    }

    #[test]
    fn encode_decode_shapes_round_trip() {
        let cfg = micro_config();
        assert_eq!(cfg.m_symbols(), 8);
        let sys: JsccSystem<f32> = JsccSystem::new(cfg, 7).unwrap();
        let img = Tensor::full(vec![1, 8, 8], 0.4f32);
        let z = sys.encode_image(&img).unwrap();
        assert_eq!(z.symbols.len(), 8);
        assert!((z.average_power() - 1.0).abs() < 1e-5);
        let eq = EqualizedSignal { symbols: z.symbols.clone(), effective_snr_db: 10.0 };
        let x = sys.decode_signal(&eq).unwrap();
        assert_eq!(x.shape(), &[1, 8, 8]);
        for &v in x.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn decode_is_deterministic_and_counted() {
        let cfg = micro_config();
        let sys: JsccSystem<f32> = JsccSystem::new(cfg, 7).unwrap();
        let img = Tensor::full(vec![1, 8, 8], 0.6f32);
        let z = sys.encode_image(&img).unwrap();
        let eq = EqualizedSignal { symbols: z.symbols, effective_snr_db: 5.0 };
        let before = sys.decoder.forward_count();
        let a = sys.decode_signal(&eq).unwrap();
        let b = sys.decode_signal(&eq).unwrap();
        assert_eq!(sys.decoder.forward_count(), before + 2);
        assert_eq!(a.data(), b.data(), "same inputs and params must be bit-identical");
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let sys: JsccSystem<f32> = JsccSystem::new(micro_config(), 7).unwrap();
        let eq = EqualizedSignal { symbols: vec![Complex64::new(0.1, 0.0); 5], effective_snr_db: 5.0 };
        assert!(sys.decode_signal(&eq).is_err());
    }

    #[test]
    fn snr_conditioning_changes_output() {
        let sys: JsccSystem<f32> = JsccSystem::new(micro_config(), 3).unwrap();
        let img = Tensor::from_vec(vec![1, 8, 8], (0..64).map(|i| (i % 7) as f32 / 7.0).collect());
        let z = sys.encode_image(&img).unwrap();
        let out = |snr: f64| {
            let eq = EqualizedSignal { symbols: z.symbols.clone(), effective_snr_db: snr };
            sys.decode_signal(&eq).unwrap()
        };
        let a = out(0.0);
        let b = out(18.0);
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((x - y) as f64).abs())
            .sum();
        assert!(diff > 0.0, "changing gamma must change the decode");
    }

    #[test]
    fn flop_report_is_positive_and_matches_construction() {
        let cfg = ModelConfig::mnist();
        let report = super::super::count_flops(&cfg).unwrap();
        assert!(report.encoder_gflops > 0.0);
        assert!(report.decoder_gflops > report.encoder_gflops);
    }
}
