//! Seeded synthetic "photo-like" images and corpora.
//!
//! Images combine a smooth two-colour gradient, soft-edged ellipses and
//! rectangles, multi-octave value-noise texture and a light sensor grain.
//! They stand in for natural photographs in fixtures and smoke tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{write_manifest, CorpusEntry, ManifestError};
use crate::image::{quantize_sample, save_image, ImageBuffer, ImageError, ImageFormat};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Bilinearly interpolated lattice noise in [-1, 1].
struct ValueNoise {
    cell: f64,
    gw: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(w: usize, h: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let gw = (w as f64 / cell) as usize + 2;
        let gh = (h as f64 / cell) as usize + 2;
        let grid = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cell, gw, grid }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        // smoothstep keeps the texture free of lattice creases
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let g = |i: usize, j: usize| self.grid[j * self.gw + i];
        let top = g(ix, iy) * (1.0 - sx) + g(ix + 1, iy) * sx;
        let bot = g(ix, iy + 1) * (1.0 - sx) + g(ix + 1, iy + 1) * sx;
        top * (1.0 - sy) + bot * sy
    }
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    /// Signed distance-like value: negative inside, in pixels.
    fn distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
                (d - 1.0) * rx.min(ry)
            }
            Shape::Rect { x0, y0, x1, y1 } => {
                let dx = (x0 - x).max(x - x1);
                let dy = (y0 - y).max(y - y1);
                dx.max(dy)
            }
        }
    }
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0)]
}

/// Deterministic photo-like image for `seed`.
pub fn photo_like(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let c0 = random_colour(&mut rng);
    let c1 = random_colour(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());

    let n_shapes = rng.gen_range(4..9);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let shape = if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                rx: rng.gen_range(0.06..0.3) * w,
                ry: rng.gen_range(0.06..0.3) * h,
            }
        } else {
            let (x0, y0) = (rng.gen_range(-0.1..0.8) * w, rng.gen_range(-0.1..0.8) * h);
            Shape::Rect { x0, y0, x1: x0 + rng.gen_range(0.1..0.45) * w, y1: y0 + rng.gen_range(0.1..0.45) * h }
        };
        let colour = random_colour(&mut rng);
        let softness = rng.gen_range(0.6..2.5);
        let texture = rng.gen_range(0.0..18.0);
        shapes.push((shape, colour, softness, texture));
    }
    let octaves: Vec<(ValueNoise, f64)> = [(24.0, 14.0), (8.0, 8.0), (3.0, 5.0)]
        .iter()
        .map(|&(cell, amp)| (ValueNoise::new(width, height, cell, &mut rng), amp))
        .collect();
    let grain = Normal::new(0.0, 1.2).expect("valid sigma");

    ImageBuffer::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = (((fx / w - 0.5) * ca + (fy / h - 0.5) * sa) + 0.7).clamp(0.0, 1.4) / 1.4;
        let mut px = [0.0f64; 3];
        for c in 0..3 {
            px[c] = c0[c] * (1.0 - t) + c1[c] * t;
        }
        let tex: f64 = octaves.iter().map(|(n, a)| a * n.at(fx, fy)).sum();
        for (shape, colour, softness, texture) in &shapes {
            let d = shape.distance(fx, fy);
            let alpha = 1.0 / (1.0 + (d / softness).exp());
            if alpha > 1e-4 {
                for c in 0..3 {
                    let v = colour[c] + texture / 18.0 * tex;
                    px[c] = px[c] * (1.0 - alpha) + v * alpha;
                }
            }
        }
        let g = grain.sample(&mut rng);
        std::array::from_fn(|c| quantize_sample(px[c] + 0.5 * tex + g))
    })
}

/// Add i.i.d. Gaussian noise independently to every sample.
pub fn add_gaussian_noise(img: &ImageBuffer, sigma: f64, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = quantize_sample(*v as f64 + normal.sample(&mut rng));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    /// Fraction of images assigned to the `test` split (taken from the end).
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { count: 10, width: 96, height: 64, noise_sigma: 10.0, test_fraction: 0.2, seed: 7 }
    }
}

/// Clean image `i` of a corpus (before noise).
pub fn corpus_clean_image(spec: &CorpusSpec, i: usize) -> ImageBuffer {
    photo_like(spec.width, spec.height, spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
}

/// Write `count` noisy PNGs plus `manifest.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<Vec<CorpusEntry>, SynthError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let n_test = (spec.count as f64 * spec.test_fraction).round() as usize;
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let clean = corpus_clean_image(spec, i);
        let noisy = add_gaussian_noise(&clean, spec.noise_sigma, spec.seed ^ (0x9e37_79b9 + i as u64));
        let rel = format!("images/img{i:03}.png");
        save_image(&noisy, dir.join(&rel), ImageFormat::Png)?;
        let split = if i + n_test >= spec.count { "test" } else { "train" };
        entries.push(CorpusEntry { id: format!("img{i:03}"), path: rel.into(), split: split.into() });
    }
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    Ok(entries
        .into_iter()
        .map(|mut e| {
            e.path = dir.join(&e.path);
            e
        })
        .collect())
}
