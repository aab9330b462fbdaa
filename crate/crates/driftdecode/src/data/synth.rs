//! Synthetic handwritten-digit stand-in dataset, written in the IDX byte
//! format. Used when no real MNIST files are available: glyph skeletons per
//! class are jittered, stroked with varying thickness, lightly blurred and
//! noised, giving structured 28x28 grayscale images with enough local
//! texture for perceptual losses to bite.

use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

const SIDE: usize = 28;

/// Polyline skeletons per digit class in a unit box (x right, y down).
fn skeleton(class: u8) -> Vec<Vec<(f32, f32)>> {
    match class {
        0 => vec![vec![
            (0.50, 0.10), (0.75, 0.20), (0.82, 0.50), (0.75, 0.80), (0.50, 0.90),
            (0.25, 0.80), (0.18, 0.50), (0.25, 0.20), (0.50, 0.10),
        ]],
        1 => vec![vec![(0.35, 0.25), (0.55, 0.10), (0.55, 0.90)]],
        2 => vec![vec![
            (0.22, 0.28), (0.35, 0.12), (0.65, 0.12), (0.78, 0.30), (0.55, 0.55),
            (0.22, 0.88), (0.80, 0.88),
        ]],
        3 => vec![vec![
            (0.25, 0.15), (0.65, 0.12), (0.75, 0.30), (0.50, 0.48), (0.75, 0.66),
            (0.65, 0.88), (0.25, 0.85),
        ]],
        4 => vec![
            vec![(0.65, 0.10), (0.20, 0.62), (0.82, 0.62)],
            vec![(0.65, 0.10), (0.65, 0.90)],
        ],
        5 => vec![vec![
            (0.75, 0.12), (0.28, 0.12), (0.25, 0.45), (0.60, 0.42), (0.78, 0.62),
            (0.68, 0.86), (0.25, 0.88),
        ]],
        6 => vec![vec![
            (0.70, 0.12), (0.35, 0.35), (0.24, 0.65), (0.40, 0.88), (0.68, 0.84),
            (0.76, 0.62), (0.55, 0.48), (0.28, 0.58),
        ]],
        7 => vec![vec![(0.20, 0.14), (0.80, 0.14), (0.45, 0.90)]],
        8 => vec![vec![
            (0.50, 0.12), (0.72, 0.25), (0.55, 0.46), (0.30, 0.28), (0.50, 0.12),
        ], vec![
            (0.55, 0.46), (0.78, 0.68), (0.55, 0.90), (0.28, 0.72), (0.55, 0.46),
        ]],
        _ => vec![vec![
            (0.72, 0.40), (0.48, 0.50), (0.26, 0.34), (0.42, 0.12), (0.70, 0.18),
            (0.72, 0.40), (0.66, 0.90),
        ]],
    }
}

fn dist_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Render one 28x28 glyph for `(seed, index)`; the class cycles through 0-9.
pub fn synth_image(seed: u64, index: u64) -> [u8; SIDE * SIDE] {
    let mut rng = stream(seed, Domain::Synth, index, 0);
    let class = (index % 10) as u8;
    let strokes = skeleton(class);
    // jitter: shift, scale, slant
    let dx = rng.random_range(-0.08f32..0.08);
    let dy = rng.random_range(-0.08f32..0.08);
    let scale = rng.random_range(0.82f32..1.08);
    let slant = rng.random_range(-0.18f32..0.18);
    let thick = rng.random_range(0.045f32..0.085);
    let warp = |(x, y): (f32, f32)| -> (f32, f32) {
        let cx = (x - 0.5) * scale + slant * (y - 0.5);
        let cy = (y - 0.5) * scale;
        ((cx + 0.5 + dx) * SIDE as f32, (cy + 0.5 + dy) * SIDE as f32)
    };
    let segs: Vec<((f32, f32), (f32, f32))> = strokes
        .iter()
        .flat_map(|line| line.windows(2).map(|p| (warp(p[0]), warp(p[1]))).collect::<Vec<_>>())
        .collect();
    let th_px = thick * SIDE as f32;
    let mut img = [0f32; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let p = (c as f32 + 0.5, r as f32 + 0.5);
            let mut best = f32::INFINITY;
            for &(a, b) in &segs {
                let d = dist_to_segment(p, a, b);
                if d < best {
                    best = d;
                }
            }
            let v = ((th_px - best) / (0.45 * th_px)).clamp(0.0, 1.0);
            img[r * SIDE + c] = v;
        }
    }
    // 3x3 binomial blur for soft edges
    let mut blurred = [0f32; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (dr, wr) in [(-1i32, 1.0f32), (0, 2.0), (1, 1.0)] {
                for (dc, wc) in [(-1i32, 1.0f32), (0, 2.0), (1, 1.0)] {
                    let rr = r as i32 + dr;
                    let cc = c as i32 + dc;
                    if rr >= 0 && rr < SIDE as i32 && cc >= 0 && cc < SIDE as i32 {
                        acc += img[rr as usize * SIDE + cc as usize] * wr * wc;
                        wsum += wr * wc;
                    }
                }
            }
            blurred[r * SIDE + c] = acc / wsum;
        }
    }
    let mut out = [0u8; SIDE * SIDE];
    for i in 0..SIDE * SIDE {
        let noise = rng.random_range(-6.0f32..6.0);
        out[i] = (blurred[i] * 235.0 + noise).clamp(0.0, 255.0) as u8;
    }
    out
}

fn write_images(path: &Path, seed: u64, offset: u64, count: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + count * SIDE * SIDE);
    let mut hdr = [0u8; 16];
    BigEndian::write_u32(&mut hdr[0..4], super::IDX_IMAGES_MAGIC);
    BigEndian::write_u32(&mut hdr[4..8], count as u32);
    BigEndian::write_u32(&mut hdr[8..12], SIDE as u32);
    BigEndian::write_u32(&mut hdr[12..16], SIDE as u32);
    bytes.extend_from_slice(&hdr);
    for i in 0..count {
        bytes.extend_from_slice(&synth_image(seed, offset + i as u64));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_labels(path: &Path, offset: u64, count: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + count);
    let mut hdr = [0u8; 8];
    BigEndian::write_u32(&mut hdr[0..4], super::IDX_LABELS_MAGIC);
    BigEndian::write_u32(&mut hdr[4..8], count as u32);
    bytes.extend_from_slice(&hdr);
    bytes.extend((0..count).map(|i| ((offset + i as u64) % 10) as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write a full train/test IDX quartet under `dir`. Test images use a
/// disjoint index range so the splits never overlap.
pub fn write_synth_idx(dir: &Path, seed: u64, n_train: usize, n_test: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_images(&dir.join(Split::Train.image_file()), seed, 0, n_train)?;
    write_labels(&dir.join(Split::Train.label_file()), 0, n_train)?;
    write_images(&dir.join(Split::Test.image_file()), seed, n_train as u64, n_test)?;
    write_labels(&dir.join(Split::Test.label_file()), n_train as u64, n_test)?;
    Ok(())
}

use super::Split;
