//! Frozen perceptual feature pyramids for the drift loss.
//!
//! Two extractor kinds sit behind one interface:
//! - `FixedRandom`: a 3-stage convolutional pyramid (3x3 stride-2 convs,
//!   widths 16/32/64, SiLU), weights drawn once from a seeded normal scaled
//!   by fan-in. Bit-reproducible from the seed; no external files.
//! - `PretrainedArchive`: a VGG-19-shaped chain loaded from a named-tensor
//!   archive, layer names `conv{block}_{index}`, features tapped after the
//!   ReLU of each requested layer.
//!
//! Extractors are frozen: their weights enter every graph as constants, so
//! gradients flow through them to the input but never into them.

use std::path::PathBuf;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{stream, Domain};
use crate::tensor::{Elem, Tensor};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ExtractorKind {
    FixedRandom,
    PretrainedArchive,
}

/// Declarative description of a feature extractor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    /// Ordered tap identifiers: `stage1..stage3` for FixedRandom,
    /// `conv{b}_{i}` for archives.
    pub layers: Vec<String>,
    /// Weight seed (FixedRandom only).
    pub seed: u64,
    /// Archive location (PretrainedArchive only).
    pub archive_path: Option<PathBuf>,
    /// Declared pixel range of inputs before internal normalization.
    pub input_range: (f64, f64),
}

impl ExtractorSpec {
    pub fn fixed_random(seed: u64) -> Self {
        ExtractorSpec {
            kind: ExtractorKind::FixedRandom,
            layers: vec!["stage1".into(), "stage2".into(), "stage3".into()],
            seed,
            archive_path: None,
            input_range: (0.0, 1.0),
        }
    }

    pub fn pretrained(path: impl Into<PathBuf>, layers: Vec<String>) -> Self {
        ExtractorSpec {
            kind: ExtractorKind::PretrainedArchive,
            layers,
            seed: 0,
            archive_path: Some(path.into()),
            input_range: (0.0, 1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("build_extractor", "layer list is empty"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].contains(l) {
                return Err(Error::invalid("build_extractor", format!("duplicate layer {l}")));
            }
        }
        Ok(())
    }
}

const FIXED_WIDTHS: [usize; 3] = [16, 32, 64];
const FIXED_STAGES: [&str; 3] = ["stage1", "stage2", "stage3"];

/// VGG-19 convolutional trunk: (name, in, out); pools come after each block.
fn vgg19_convs() -> Vec<(String, usize, usize)> {
    let widths = [64usize, 128, 256, 512, 512];
    let counts = [2usize, 2, 4, 4, 4];
    let mut out = Vec::new();
    let mut cin = 3;
    for b in 0..5 {
        for i in 0..counts[b] {
            out.push((format!("conv{}_{}", b + 1, i + 1), cin, widths[b]));
            cin = widths[b];
        }
    }
    out
}

enum Link<T: Elem> {
    Conv { weight: Tensor<T>, bias: Tensor<T>, stride: usize },
    Relu,
    Silu,
    MaxPool,
    /// Record the current activation under this tap name.
    Tap(String),
}

/// A frozen feature extractor.
pub struct Extractor<T: Elem> {
    spec: ExtractorSpec,
    chain: Vec<Link<T>>,
    /// Per-channel (scale, shift) applied after channel replication.
    norm: Option<(Vec<T>, Vec<T>)>,
    in_channels: usize,
}

/// One level of a [`FeaturePyramid`].
pub struct PyramidLevel<T: Elem> {
    pub name: String,
    /// (C, H, W) feature map.
    pub features: Tensor<T>,
    /// Number of spatial locations H*W.
    pub k: usize,
}

/// Per-layer feature maps of one image, finite by construction, with
/// strictly non-increasing spatial extent.
pub struct FeaturePyramid<T: Elem> {
    pub levels: Vec<PyramidLevel<T>>,
}

impl<T: Elem> FeaturePyramid<T> {
    fn new(levels: Vec<PyramidLevel<T>>) -> Result<Self> {
        let mut prev = usize::MAX;
        for l in &levels {
            if !l.features.is_finite() {
                return Err(Error::NonFinite("feature pyramid"));
            }
            let hw = l.features.shape()[1] * l.features.shape()[2];
            if hw > prev {
                return Err(Error::invalid(
                    "extract",
                    format!("layer {} grows spatially ({hw} > {prev})", l.name),
                ));
            }
            prev = hw;
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Build a frozen extractor from its spec.
pub fn build_extractor<T: Elem>(spec: &ExtractorSpec) -> Result<Extractor<T>> {
    spec.validate()?;
    match spec.kind {
        ExtractorKind::FixedRandom => build_fixed_random(spec),
        ExtractorKind::PretrainedArchive => build_from_archive(spec),
    }
}

fn draw_conv<T: Elem>(seed: u64, idx: u64, cout: usize, cin: usize, k: usize) -> (Tensor<T>, Tensor<T>) {
    let mut rng = stream(seed, Domain::Extractor, idx, 0);
    let fan_in = cin * k * k;
    let std = (1.0 / fan_in as f64).sqrt();
    let n = cout * cin * k * k;
    let w: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z * std)
        })
        .collect();
    (
        Tensor::from_vec(vec![cout, cin, k, k], w),
        Tensor::zeros(vec![cout]),
    )
}

fn build_fixed_random<T: Elem>(spec: &ExtractorSpec) -> Result<Extractor<T>> {
    for l in &spec.layers {
        if !FIXED_STAGES.contains(&l.as_str()) {
            return Err(Error::LayerNotFound(l.clone()));
        }
    }
    let deepest = spec
        .layers
        .iter()
        .map(|l| FIXED_STAGES.iter().position(|s| s == l).unwrap())
        .max()
        .unwrap();
    let mut chain = Vec::new();
    let mut cin = 3;
    for (i, &width) in FIXED_WIDTHS.iter().enumerate().take(deepest + 1) {
        let (weight, bias) = draw_conv::<T>(spec.seed, i as u64, width, cin, 3);
        chain.push(Link::Conv { weight, bias, stride: 2 });
        chain.push(Link::Silu);
        if spec.layers.iter().any(|l| l == FIXED_STAGES[i]) {
            chain.push(Link::Tap(FIXED_STAGES[i].to_string()));
        }
        cin = width;
    }
    Ok(Extractor { spec: spec.clone(), chain, norm: None, in_channels: 3 })
}

fn build_from_archive<T: Elem>(spec: &ExtractorSpec) -> Result<Extractor<T>> {
    let path = spec
        .archive_path
        .as_ref()
        .ok_or_else(|| Error::invalid("build_extractor", "archive_path missing"))?;
    let archive = Archive::load(path)?;
    let convs = vgg19_convs();
    for l in &spec.layers {
        if !convs.iter().any(|(name, _, _)| name == l) {
            return Err(Error::LayerNotFound(l.clone()));
        }
    }
    let deepest = spec
        .layers
        .iter()
        .map(|l| convs.iter().position(|(name, _, _)| name == l).unwrap())
        .max()
        .unwrap();
    let mut chain = Vec::new();
    for (idx, (name, cin, cout)) in convs.iter().enumerate().take(deepest + 1) {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        if !archive.contains(&wname) || !archive.contains(&bname) {
            return Err(Error::LayerNotFound(name.clone()));
        }
        let weight: Tensor<T> = archive.tensor(&wname, &[*cout, *cin, 3, 3])?;
        let bias: Tensor<T> = archive.tensor(&bname, &[*cout])?;
        chain.push(Link::Conv { weight, bias, stride: 1 });
        chain.push(Link::Relu);
        if spec.layers.iter().any(|l| l == name) {
            chain.push(Link::Tap(name.clone()));
        }
        // Pool after the last conv of each block.
        let last_of_block = matches!(name.as_str(), "conv1_2" | "conv2_2" | "conv3_4" | "conv4_4" | "conv5_4");
        if last_of_block && idx < deepest {
            chain.push(Link::MaxPool);
        }
    }
    let norm = match (archive.get("input.mean"), archive.get("input.std")) {
        (Some(m), Some(s)) => {
            let mean: Tensor<T> = m.to_tensor();
            let std: Tensor<T> = s.to_tensor();
            if mean.numel() != 3 || std.numel() != 3 {
                return Err(Error::Checkpoint("input.mean/input.std must have 3 entries".into()));
            }
            // (x - mean) / std  ==  x * (1/std) + (-mean/std)
            let scale: Vec<T> = std.data().iter().map(|&v| T::one() / v).collect();
            let shift: Vec<T> = mean
                .data()
                .iter()
                .zip(std.data())
                .map(|(&m, &s)| -m / s)
                .collect();
            Some((scale, shift))
        }
        _ => None,
    };
    Ok(Extractor { spec: spec.clone(), chain, norm, in_channels: 3 })
}

impl<T: Elem> Extractor<T> {
    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    /// Number of pyramid levels this extractor produces.
    pub fn num_levels(&self) -> usize {
        self.spec.layers.len()
    }

    /// Serialize all weights (for frozen-ness checks and inspection).
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for link in &self.chain {
            if let Link::Conv { weight, bias, .. } = link {
                for &v in weight.data().iter().chain(bias.data()) {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        out
    }

    /// Run the chain on a batched NCHW input already living in `g`.
    /// Returns one Var per requested layer, ordered as `spec.layers`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("extract", format!("expected NCHW, got {shape:?}")));
        }
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite("extract input"));
        }
        let (lo, hi) = self.spec.input_range;
        let tol = T::from_f64(1e-6);
        for &v in g.value(x).data() {
            if v < T::from_f64(lo) - tol || v > T::from_f64(hi) + tol {
                return Err(Error::invalid(
                    "extract",
                    format!("input value {v} outside declared range [{lo}, {hi}]"),
                ));
            }
        }
        let mut h = x;
        if shape[1] == 1 && self.in_channels == 3 {
            h = g.concat_channels(&[x, x, x]);
        } else if shape[1] != self.in_channels {
            return Err(Error::shape(
                "extract",
                format!("input has {} channels, extractor expects {}", shape[1], self.in_channels),
            ));
        }
        if let Some((scale, shift)) = &self.norm {
            h = g.channel_affine_const(h, scale, shift);
        }
        let mut taps: Vec<(String, Var)> = Vec::new();
        for link in &self.chain {
            match link {
                Link::Conv { weight, bias, stride } => {
                    let w = g.constant(weight.clone());
                    let b = g.constant(bias.clone());
                    h = g.conv2d(h, w, b, *stride);
                }
                Link::Relu => h = g.relu(h),
                Link::Silu => h = g.silu(h),
                Link::MaxPool => h = g.maxpool2(h),
                Link::Tap(name) => taps.push((name.clone(), h)),
            }
        }
        let mut out = Vec::with_capacity(self.spec.layers.len());
        for want in &self.spec.layers {
            let var = taps
                .iter()
                .find(|(name, _)| name == want)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::LayerNotFound(want.clone()))?;
            out.push(var);
        }
        Ok(out)
    }

    /// Extract the pyramid of a single (C, H, W) image, forward only.
    pub fn extract(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let shape = image.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("extract", format!("expected CHW, got {shape:?}")));
        }
        let mut g = Graph::new();
        let x = g.constant(image.reshaped(vec![1, shape[0], shape[1], shape[2]]));
        let vars = self.forward(&mut g, x)?;
        let mut levels = Vec::new();
        for (name, var) in self.spec.layers.iter().zip(vars) {
            let v = g.value(var);
            let s = v.shape();
            let (c, h, w) = (s[1], s[2], s[3]);
            levels.push(PyramidLevel {
                name: name.clone(),
                features: v.reshaped(vec![c, h, w]),
                k: h * w,
            });
        }
        FeaturePyramid::new(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_random_is_bit_reproducible() {
        let spec = ExtractorSpec::fixed_random(7);
        let a: Extractor<f32> = build_extractor(&spec).unwrap();
        let b: Extractor<f32> = build_extractor(&spec).unwrap();
        assert_eq!(a.weight_bytes(), b.weight_bytes());
        let c: Extractor<f32> = build_extractor(&ExtractorSpec::fixed_random(8)).unwrap();
        assert_ne!(a.weight_bytes(), c.weight_bytes());
    }

    #[test]
    fn fixed_random_pyramid_shapes() {
        let spec = ExtractorSpec::fixed_random(7);
        let ex: Extractor<f32> = build_extractor(&spec).unwrap();
        let img = Tensor::full(vec![1, 32, 32], 0.5);
        let pyr = ex.extract(&img).unwrap();
        let dims: Vec<(usize, usize)> = pyr
            .levels
            .iter()
            .map(|l| (l.features.shape()[1], l.features.shape()[0]))
            .collect();
        assert_eq!(dims, vec![(16, 16), (8, 32), (4, 64)]);
        assert_eq!(pyr.levels[0].k, 256);
    }

    #[test]
    fn extract_is_deterministic() {
        let spec = ExtractorSpec::fixed_random(3);
        let ex: Extractor<f64> = build_extractor(&spec).unwrap();
        let img = Tensor::from_vec(vec![1, 8, 8], (0..64).map(|i| i as f64 / 64.0).collect());
        let a = ex.extract(&img).unwrap();
        let b = ex.extract(&img).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.features.data(), lb.features.data());
        }
    }

    #[test]
    fn rejects_unknown_layer() {
        let mut spec = ExtractorSpec::fixed_random(1);
        spec.layers.push("stage9".into());
        match build_extractor::<f32>(&spec) {
            Err(e) => assert_eq!(e.to_string(), "layer stage9 not found"),
            Ok(_) => panic!("expected an error"),
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let spec = ExtractorSpec::fixed_random(1);
        let ex: Extractor<f32> = build_extractor(&spec).unwrap();
        let img = Tensor::full(vec![1, 8, 8], f32::NAN);
        assert!(ex.extract(&img).is_err());
    }
}
