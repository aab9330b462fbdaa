//! Building blocks: sinusoidal SNR embedding, FiLM projections, residual
//! blocks with FiLM-modulated group normalization.

use super::LayerCost;
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamId, Params};
use crate::tensor::Elem;

/// Largest group count in {8, 4, 2, 1} dividing the channel count.
pub fn groups_for(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

const GN_EPS: f64 = 1e-5;

/// Construction context: the parameter arena plus a per-image cost ledger
/// that the FLOP estimator reads, so arithmetic and accounting cannot drift
/// apart.
pub(crate) struct BuildCtx<'a, T: Elem> {
    pub params: &'a mut Params<T>,
    pub costs: Vec<LayerCost>,
}

impl<'a, T: Elem> BuildCtx<'a, T> {
    pub fn new(params: &'a mut Params<T>) -> Self {
        BuildCtx { params, costs: Vec::new() }
    }

    pub fn conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        oh: usize,
        ow: usize,
        small_init: bool,
    ) -> (ParamId, ParamId) {
        // Residual-tail convs start near (but not at) zero so fresh blocks
        // are close to the identity while every path stays trainable and
        // the FiLM conditioning is live from step 0.
        let gain = if small_init { 0.02 } else { 2.0 };
        let w = self
            .params
            .add_normal(format!("{prefix}.weight"), vec![cout, cin, k, k], cin * k * k, gain);
        let b = self.params.add_zeros(format!("{prefix}.bias"), vec![cout]);
        self.costs.push(LayerCost::Conv { cin, cout, k, oh, ow });
        (w, b)
    }

    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize, small_init: bool) -> (ParamId, ParamId) {
        let gain = if small_init { 0.01 } else { 2.0 };
        let w = self.params.add_normal(format!("{prefix}.weight"), vec![din, dout], din, gain);
        let b = self.params.add_zeros(format!("{prefix}.bias"), vec![dout]);
        self.costs.push(LayerCost::Linear { din, dout });
        (w, b)
    }
}

/// Geometrically spaced sinusoidal frequencies covering the 0-20 dB SNR
/// range with sub-dB resolution: 2*pi/40 up to 2*pi*4.
pub fn snr_frequencies<T: Elem>(d: usize) -> Vec<T> {
    let lo = 2.0 * std::f64::consts::PI / 40.0;
    let hi = 2.0 * std::f64::consts::PI * 4.0;
    (0..d)
        .map(|j| {
            let t = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.0 };
            T::from_f64(lo * (hi / lo).powf(t))
        })
        .collect()
}

/// gamma (dB) -> e_gamma: sinusoidal features through a 2-layer MLP.
pub struct SnrEmbed {
    dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SnrEmbed {
    pub(crate) fn new<T: Elem>(ctx: &mut BuildCtx<T>, prefix: &str, dim: usize) -> Self {
        let (w1, b1) = ctx.linear(&format!("{prefix}.mlp1"), 2 * dim, dim, false);
        let (w2, b2) = ctx.linear(&format!("{prefix}.mlp2"), dim, dim, false);
        SnrEmbed { dim, w1, b1, w2, b2 }
    }

    /// gammas: (B, 1) -> (B, D).
    pub fn forward<T: Elem>(&self, g: &mut Graph<T>, bind: &Binding, gammas: Var) -> Var {
        let freqs = snr_frequencies::<T>(self.dim);
        let sin = g.sinusoidal(gammas, &freqs);
        let h = g.linear(sin, bind.var(self.w1), bind.var(self.b1));
        let h = g.silu(h);
        g.linear(h, bind.var(self.w2), bind.var(self.b2))
    }
}

/// Small-scale projection film_hidden -> (scale, shift) for one
/// normalization site; near-zero weights keep FiLM near the identity at
/// initialization without decoupling it from gamma.
pub struct FilmHead {
    channels: usize,
    w: ParamId,
    b: ParamId,
}

impl FilmHead {
    pub(crate) fn new<T: Elem>(ctx: &mut BuildCtx<T>, prefix: &str, film_hidden: usize, channels: usize) -> Self {
        let (w, b) = ctx.linear(prefix, film_hidden, 2 * channels, true);
        FilmHead { channels, w, b }
    }

    /// Normalize `x` over groups, then apply the conditioned affine.
    /// `trunk`: (B, film_hidden).
    pub fn norm_film<T: Elem>(&self, g: &mut Graph<T>, bind: &Binding, x: Var, trunk: Var) -> Var {
        let c = self.channels;
        let n = g.group_norm(x, groups_for(c), T::from_f64(GN_EPS));
        let proj = g.linear(trunk, bind.var(self.w), bind.var(self.b));
        let scale = g.narrow_last(proj, c);
        let shift = g.narrow_last_from(proj, c, c);
        g.film(n, scale, shift)
    }
}

/// Pre-activation residual block: two (GN -> FiLM -> SiLU -> conv3x3)
/// stages plus a shortcut (1x1 conv when the width changes). The second
/// conv starts near zero so a fresh block is close to the identity.
pub struct ResBlock {
    cin: usize,
    cout: usize,
    film1: FilmHead,
    conv1: (ParamId, ParamId),
    film2: FilmHead,
    conv2: (ParamId, ParamId),
    shortcut: Option<(ParamId, ParamId)>,
}

impl ResBlock {
    pub(crate) fn new<T: Elem>(
        ctx: &mut BuildCtx<T>,
        prefix: &str,
        film_hidden: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) -> Self {
        let film1 = FilmHead::new(ctx, &format!("{prefix}.film1"), film_hidden, cin);
        let conv1 = ctx.conv(&format!("{prefix}.conv1"), cin, cout, 3, h, w, false);
        let film2 = FilmHead::new(ctx, &format!("{prefix}.film2"), film_hidden, cout);
        let conv2 = ctx.conv(&format!("{prefix}.conv2"), cout, cout, 3, h, w, true);
        let shortcut = if cin != cout {
            Some(ctx.conv(&format!("{prefix}.shortcut"), cin, cout, 1, h, w, false))
        } else {
            None
        };
        ResBlock { cin, cout, film1, conv1, film2, conv2, shortcut }
    }

    pub fn forward<T: Elem>(&self, g: &mut Graph<T>, bind: &Binding, x: Var, trunk: Var) -> Var {
        debug_assert_eq!(g.value(x).shape()[1], self.cin);
        let h = self.film1.norm_film(g, bind, x, trunk);
        let h = g.silu(h);
        let h = g.conv2d(h, bind.var(self.conv1.0), bind.var(self.conv1.1), 1);
        let h = self.film2.norm_film(g, bind, h, trunk);
        let h = g.silu(h);
        let h = g.conv2d(h, bind.var(self.conv2.0), bind.var(self.conv2.1), 1);
        let sc = match self.shortcut {
            Some((w, b)) => g.conv2d(x, bind.var(w), bind.var(b), 1),
            None => x,
        };
        debug_assert_eq!(g.value(h).shape()[1], self.cout);
        g.add(h, sc)
    }
}
