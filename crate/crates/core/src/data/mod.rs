//! Synthetic low-contrast blob images and on-disk datasets.
//!
//! Each sample is a smooth textured background with one to three smooth,
//! non-touching star-shaped blobs that are slightly brighter and redder than
//! their surroundings. Blob outlines are ellipses with low-order radial
//! harmonics, so their masks never fill their bounding rectangles.

mod io;

pub use io::{
    load_dataset, load_sample, read_boxes, read_pgm, read_ppm, save_dataset, write_boxes, write_map_pgm, write_pgm,
    write_ppm, DataSample, Manifest, ManifestEntry,
};

use std::f64::consts::TAU;

use crate::boxops::BoxRect;
use crate::components::label;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 32;
pub const MAX_BLOBS: usize = 3;
/// Added blob colour per unit contrast; channel mean is one.
const BLOB_TINT: [f64; 3] = [1.3, 0.9, 0.8];
/// Blobs keep at least this Chebyshev gap from each other and the border.
const GAP: usize = 2;

/// Base blob radius range as a fraction of the image side.
const RADIUS: (f64, f64) = (0.09, 0.2);
/// Blob intensity offset range.
const DELTA: (f64, f64) = (0.1, 0.2);
const TEXTURE_AMPLITUDE: f64 = 0.04;
const NOISE_AMPLITUDE: f64 = 0.015;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `3 x S x S`, every value a multiple of 1/255.
    pub image: Tensor<f64>,
    /// Binary `S x S`.
    pub mask: Tensor<f64>,
    pub boxes: Vec<BoxRect>,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn size(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn to_data_sample(&self, name: impl Into<String>) -> DataSample {
        DataSample {
            name: name.into(),
            image: self.image.clone(),
            mask: Some(self.mask.clone()),
            boxes: Some(self.boxes.clone()),
        }
    }
}

/// Draws one sample. With `n_blobs = None` the count is uniform in 1..=3.
pub fn gen_sample(seed: u64, size: usize, n_blobs: Option<usize>) -> Result<SyntheticSample> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("image size {size} is below {MIN_SIZE}")));
    }
    let mut rng = SplitMix64::new(seed);
    let count = match n_blobs {
        Some(n) if (1..=MAX_BLOBS).contains(&n) => n,
        Some(n) => return Err(Error::Config(format!("blob count {n} is outside 1..={MAX_BLOBS}"))),
        None => 1 + rng.below(MAX_BLOBS as u64) as usize,
    };

    let n = size * size;
    let mut occupied = vec![false; n];
    let mut mask = vec![false; n];
    let mut deltas = Vec::with_capacity(count);
    let mut placed = 0;
    let mut attempts = 0usize;
    while placed < count {
        let shrink = 1.0 / (1.0 + (attempts / 100) as f64);
        attempts += 1;
        let blob = draw_blob(&mut rng, size, shrink);
        let Some(cells) = blob else { continue };
        if cells.iter().any(|&k| occupied[k]) {
            continue;
        }
        for &k in &cells {
            mask[k] = true;
            let (y, x) = (k / size, k % size);
            for yy in y.saturating_sub(GAP)..=(y + GAP).min(size - 1) {
                for xx in x.saturating_sub(GAP)..=(x + GAP).min(size - 1) {
                    occupied[yy * size + xx] = true;
                }
            }
        }
        deltas.push((cells, rng.uniform(DELTA.0, DELTA.1)));
        placed += 1;
    }

    let background = background_texture(&mut rng, size);
    let mut image = vec![0.0; 3 * n];
    for ch in 0..3 {
        let plane = &mut image[ch * n..(ch + 1) * n];
        for (px, &bg) in plane.iter_mut().zip(&background[ch]) {
            *px = bg;
        }
        for (cells, delta) in &deltas {
            for &k in cells {
                plane[k] += delta * BLOB_TINT[ch];
            }
        }
    }
    for px in image.iter_mut() {
        let v = *px + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE);
        *px = quantize(v);
    }

    let mask_t = Tensor::new(&[size, size], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    let boxes = mask_to_boxes(&mask_t)?;
    Ok(SyntheticSample {
        image: Tensor::new(&[3, size, size], image)?,
        mask: mask_t,
        boxes,
        seed,
    })
}

/// Samples `derive_seed(base, 0..count)`.
pub fn gen_dataset(base_seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    (0..count)
        .map(|i| gen_sample(derive_seed(base_seed, i as u64), size, None))
        .collect()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Cells of one blob, or `None` when the draw is rejected.
fn draw_blob(rng: &mut SplitMix64, size: usize, shrink: f64) -> Option<Vec<usize>> {
    let s = size as f64;
    let r0 = rng.uniform(RADIUS.0, RADIUS.1) * s * shrink;
    let aspect = rng.uniform(0.7, 1.4);
    let phi = rng.uniform(0.0, TAU);
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.uniform(0.0, 0.12), rng.uniform(0.0, TAU)))
        .collect();
    let cx = rng.uniform(0.0, s);
    let cy = rng.uniform(0.0, s);

    let (sin_p, cos_p) = phi.sin_cos();
    let inside = |x: usize, y: usize| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let u = (dx * cos_p + dy * sin_p) / aspect;
        let w = (-dx * sin_p + dy * cos_p) * aspect;
        let theta = w.atan2(u);
        let radius = r0 * (1.0 + harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).cos()).sum::<f64>());
        (u * u + w * w).sqrt() <= radius
    };
    let mut grid = vec![false; size * size];
    let mut cells = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if inside(x, y) {
                if x < GAP || y < GAP || x + GAP >= size || y + GAP >= size {
                    return None;
                }
                grid[y * size + x] = true;
                cells.push(y * size + x);
            }
        }
    }
    if cells.len() < 16 {
        return None;
    }
    let comps = label(&grid, size, size);
    if comps.len() != 1 || comps[0].rectangularity() >= 0.95 {
        return None;
    }
    Some(cells)
}

fn background_texture(rng: &mut SplitMix64, size: usize) -> [Vec<f64>; 3] {
    let s = size as f64;
    let base = rng.uniform(0.35, 0.55);
    let cast = [rng.uniform(0.0, 0.06), 0.0, rng.uniform(-0.04, 0.0)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.uniform(0.5, 2.0) * TAU / s;
            let dir = rng.uniform(0.0, TAU);
            (freq * dir.cos(), freq * dir.sin(), rng.uniform(0.0, TAU), rng.uniform(0.3, 1.0))
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.3).sum();
    let mut plane = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let v: f64 = waves
                .iter()
                .map(|&(kx, ky, p, a)| a * (kx * x as f64 + ky * y as f64 + p).cos())
                .sum();
            plane[y * size + x] = base + TEXTURE_AMPLITUDE * v / total;
        }
    }
    cast.map(|c| plane.iter().map(|v| v + c).collect())
}

/// Tight inclusive rectangle of every 8-connected component of `mask`
/// (values above 0.5), in raster order of first pixel.
pub fn mask_to_boxes<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<BoxRect>> {
    let (h, w) = mask.hw()?;
    let cells: Vec<bool> = mask.data().iter().map(|&v| v > T::lit(0.5)).collect();
    Ok(label(&cells, h, w).into_iter().map(|c| c.bbox).collect())
}

/// Mean channel intensity inside the mask minus outside it.
pub fn blob_contrast(sample: &SyntheticSample) -> f64 {
    let n = sample.mask.len();
    let img = sample.image.data();
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (k, &m) in sample.mask.data().iter().enumerate() {
        let v = (img[k] + img[n + k] + img[2 * n + k]) / 3.0;
        if m > 0.5 {
            fg += v;
            nf += 1;
        } else {
            bg += v;
            nb += 1;
        }
    }
    fg / nf as f64 - bg / nb as f64
}
