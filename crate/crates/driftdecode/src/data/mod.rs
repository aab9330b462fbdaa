//! Dataset ingestion: MNIST-style IDX files and PNG folders with
//! deterministic augmentation, plus epoch-seeded batch iteration.

pub mod synth;

use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images are padded up to this square size on load.
pub const MNIST_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn image_file(&self) -> &'static str {
        match self {
            Split::Train => "train-images-idx3-ubyte",
            Split::Test => "t10k-images-idx3-ubyte",
        }
    }

    pub fn label_file(&self) -> &'static str {
        match self {
            Split::Train => "train-labels-idx1-ubyte",
            Split::Test => "t10k-labels-idx1-ubyte",
        }
    }
}

/// Raw IDX image payload.
#[derive(Debug)]
pub struct IdxImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Parse an IDX image file: magic 0x00000803, big-endian dims, raw u8 rows.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "IDX image header needs 16 bytes"));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    let height = BigEndian::read_u32(&bytes[8..12]) as usize;
    let width = BigEndian::read_u32(&bytes[12..16]) as usize;
    if height == 0 || width == 0 || height > 64 || width > 64 {
        return Err(Error::format(8, format!("unsupported image size {height}x{width}")));
    }
    let want = count
        .checked_mul(height * width)
        .ok_or_else(|| Error::format(4, "image count overflows"))?;
    let have = bytes.len() - 16;
    if have != want {
        return Err(Error::format(
            16,
            format!("payload is {have} bytes, header promises {want}"),
        ));
    }
    Ok(IdxImages { count, height, width, pixels: bytes[16..].to_vec() })
}

/// Parse an IDX label file: magic 0x00000801, big-endian count, raw u8.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "IDX label header needs 8 bytes"));
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    if bytes.len() - 8 != count {
        return Err(Error::format(8, format!("payload is {} bytes, header promises {count}", bytes.len() - 8)));
    }
    Ok(bytes[8..].to_vec())
}

/// MNIST-style images held as raw u8, emitted as 1 x 32 x 32 in [0, 1]
/// (zero-padded and centered when the source is smaller).
pub struct MnistData {
    images: IdxImages,
}

impl MnistData {
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let img_path = dir.join(split.image_file());
        let bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let images = parse_idx_images(&bytes)?;
        if images.height > MNIST_SIDE || images.width > MNIST_SIDE {
            return Err(Error::format(8, format!("images {}x{} exceed {MNIST_SIDE}", images.height, images.width)));
        }
        // Cross-check against the label file when present.
        let lbl_path = dir.join(split.label_file());
        if lbl_path.exists() {
            let lb = std::fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?;
            let labels = parse_idx_labels(&lb)?;
            if labels.len() != images.count {
                return Err(Error::format(
                    4,
                    format!("{} labels for {} images", labels.len(), images.count),
                ));
            }
        }
        Ok(MnistData { images })
    }

    pub fn len(&self) -> usize {
        self.images.count
    }

    pub fn is_empty(&self) -> bool {
        self.images.count == 0
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (1, MNIST_SIDE, MNIST_SIDE)
    }

    pub fn get(&self, index: usize) -> Tensor<f32> {
        assert!(index < self.images.count);
        let (h, w) = (self.images.height, self.images.width);
        let top = (MNIST_SIDE - h) / 2;
        let left = (MNIST_SIDE - w) / 2;
        let mut out = vec![0.0f32; MNIST_SIDE * MNIST_SIDE];
        let src = &self.images.pixels[index * h * w..(index + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                out[(top + r) * MNIST_SIDE + left + c] = src[r * w + c] as f32 / 255.0;
            }
        }
        Tensor::from_vec(vec![1, MNIST_SIDE, MNIST_SIDE], out)
    }
}

/// Folder of PNG images with deterministic per-(index, epoch) augmentation.
pub struct ImageFolder {
    files: Vec<PathBuf>,
    skipped: Vec<PathBuf>,
    channels: usize,
    crop: Option<(usize, usize)>,
    hflip: bool,
    seed: u64,
}

impl ImageFolder {
    pub fn open(
        dir: &Path,
        channels: usize,
        crop: Option<(usize, usize)>,
        hflip: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut files = Vec::new();
        let mut skipped = Vec::new();
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        entries.sort();
        for p in entries {
            match image::open(&p) {
                Ok(_) => files.push(p),
                Err(e) => {
                    eprintln!("warning: skipping undecodable {}: {e}", p.display());
                    skipped.push(p);
                }
            }
        }
        if files.is_empty() {
            return Err(Error::invalid("load_image_folder", format!("no decodable PNGs in {}", dir.display())));
        }
        Ok(ImageFolder { files, skipped, channels, crop, hflip, seed })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Files that failed to decode at open time.
    pub fn skipped(&self) -> &[PathBuf] {
        &self.skipped
    }

    pub fn image_shape(&self) -> Result<(usize, usize, usize)> {
        match self.crop {
            Some((h, w)) => Ok((self.channels, h, w)),
            None => {
                let img = image::open(&self.files[0])
                    .map_err(|e| Error::ImageDecode { path: self.files[0].clone(), detail: e.to_string() })?;
                Ok((self.channels, img.height() as usize, img.width() as usize))
            }
        }
    }

    pub fn get(&self, index: usize, epoch: u64) -> Result<Tensor<f32>> {
        let path = &self.files[index];
        let img = image::open(path)
            .map_err(|e| Error::ImageDecode { path: path.clone(), detail: e.to_string() })?;
        let (h, w) = (img.height() as usize, img.width() as usize);
        let mut rng = stream(self.seed, Domain::Augment, index as u64, epoch);
        let mut out = decode_pixels(&img, self.channels);
        let (mut oh, mut ow) = (h, w);
        if let Some((ch, cw)) = self.crop {
            if ch > h || cw > w {
                return Err(Error::invalid(
                    "load_image_folder",
                    format!("crop {ch}x{cw} exceeds image {h}x{w} ({})", path.display()),
                ));
            }
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            out = crop(&out, self.channels, h, w, top, left, ch, cw);
            oh = ch;
            ow = cw;
        }
        if self.hflip && rng.random_range(0..2u32) == 1 {
            out = hflip(&out, self.channels, oh, ow);
        }
        Ok(Tensor::from_vec(vec![self.channels, oh, ow], out))
    }
}

/// Decode one PNG into a CHW tensor in [0, 1].
pub fn load_png(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), detail: e.to_string() })?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    Ok(Tensor::from_vec(vec![channels, h, w], decode_pixels(&img, channels)))
}

fn decode_pixels(img: &image::DynamicImage, channels: usize) -> Vec<f32> {
    let (h, w) = (img.height() as usize, img.width() as usize);
    match channels {
        1 => img.to_luma8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8().into_raw();
            let mut out = vec![0.0f32; 3 * h * w];
            for p in 0..h * w {
                for c in 0..3 {
                    out[c * h * w + p] = rgb[3 * p + c] as f32 / 255.0;
                }
            }
            out
        }
        n => panic!("unsupported channel count {n}"),
    }
}

fn crop(data: &[f32], c: usize, h: usize, w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * ch * cw];
    for ci in 0..c {
        for r in 0..ch {
            let src = ci * h * w + (top + r) * w + left;
            let dst = ci * ch * cw + r * cw;
            out[dst..dst + cw].copy_from_slice(&data[src..src + cw]);
        }
    }
    out
}

/// Horizontal mirror of CHW data.
pub fn hflip(data: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[ci * h * w + r * w + col] = data[ci * h * w + r * w + (w - 1 - col)];
            }
        }
    }
    out
}

/// Epoch-seeded shuffled batches over `n` indices; the last partial batch is
/// kept. Order depends only on (seed, epoch).
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, Domain::Shuffle, epoch, 0);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let bs = batches(10, 3, 1, 0);
        let sizes: Vec<usize> = bs.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_reproducible_and_epoch_dependent() {
        assert_eq!(batches(100, 7, 3, 2), batches(100, 7, 3, 2));
        assert_ne!(batches(100, 7, 3, 2), batches(100, 7, 3, 3));
    }

    #[test]
    fn hflip_is_involution() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
        let once = hflip(&data, 2, 3, 4);
        let twice = hflip(&once, 2, 3, 4);
        assert_eq!(twice, data);
    }

    #[test]
    fn idx_parser_rejects_bad_magic_and_truncation() {
        let mut bytes = vec![0u8; 16];
        BigEndian::write_u32(&mut bytes[0..4], 0xdead_beef);
        match parse_idx_images(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
        let mut ok = vec![0u8; 16 + 4];
        BigEndian::write_u32(&mut ok[0..4], IDX_IMAGES_MAGIC);
        BigEndian::write_u32(&mut ok[4..8], 1);
        BigEndian::write_u32(&mut ok[8..12], 2);
        BigEndian::write_u32(&mut ok[12..16], 2);
        assert!(parse_idx_images(&ok).is_ok());
        match parse_idx_images(&ok[..18]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
    }
}
