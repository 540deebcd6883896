//! Fixtures and literal-formula reference implementations shared by the
//! integration tests. Nothing here calls into the library's metric or
//! scoring code.
#![allow(dead_code)]

use imgprep_core::image::ImageBuffer;
use imgprep_core::synth::photo_like;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The five photo-like fixtures used by the codec and metric checks.
pub fn photo_fixtures() -> Vec<ImageBuffer> {
    [(96, 80, 11), (128, 96, 12), (64, 64, 13), (100, 75, 14), (176, 144, 15)]
        .into_iter()
        .map(|(w, h, s)| photo_like(w, h, s))
        .collect()
}

pub fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

/// `b` = `a` plus bounded random perturbation, clamped to 8 bits.
pub fn perturbed(a: &ImageBuffer, amp: i32, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = a.data().iter().map(|&v| (v as i32 + rng.gen_range(-amp..=amp)).clamp(0, 255) as u8).collect();
    ImageBuffer::new(a.width(), a.height(), data).unwrap()
}

pub fn oracle_psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = a.data().len() as f64;
    let mut sse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = *x as f64 - *y as f64;
        sse += d * d;
    }
    let mse = sse / n;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (255.0 * 255.0 / mse).log10()).min(99.0)
    }
}

fn luma(img: &ImageBuffer) -> Vec<Vec<f64>> {
    (0..img.height())
        .map(|y| {
            (0..img.width())
                .map(|x| {
                    let p = img.pixel(x, y);
                    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
                })
                .collect()
        })
        .collect()
}

/// 11×11 Gaussian weights built directly in 2-D and normalized as a whole.
fn window() -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; 11]; 11];
    let mut total = 0.0;
    for (v, row) in w.iter_mut().enumerate() {
        for (u, c) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            *c = (-(du * du + dv * dv) / (2.0 * 1.5 * 1.5)).exp();
            total += *c;
        }
    }
    for c in w.iter_mut().flatten() {
        *c /= total;
    }
    w
}

/// Mean SSIM map value and mean contrast-structure value over every fully
/// contained window position.
fn ssim_terms(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let win = window();
    let (h, w) = (a.len(), a[0].len());
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (mut s_sum, mut cs_sum, mut count) = (0.0, 0.0, 0.0);
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for v in 0..11 {
                for u in 0..11 {
                    ma += win[v][u] * a[y0 + v][x0 + u];
                    mb += win[v][u] * b[y0 + v][x0 + u];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for v in 0..11 {
                for u in 0..11 {
                    let da = a[y0 + v][x0 + u] - ma;
                    let db = b[y0 + v][x0 + u] - mb;
                    va += win[v][u] * da * da;
                    vb += win[v][u] * db * db;
                    cov += win[v][u] * da * db;
                }
            }
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            s_sum += l * cs;
            cs_sum += cs;
            count += 1.0;
        }
    }
    (s_sum / count, cs_sum / count)
}

pub fn oracle_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    ssim_terms(&luma(a), &luma(b)).0
}

fn halve(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..p.len() / 2)
        .map(|y| (0..p[0].len() / 2).map(|x| (p[2 * y][2 * x] + p[2 * y][2 * x + 1] + p[2 * y + 1][2 * x] + p[2 * y + 1][2 * x + 1]) / 4.0).collect())
        .collect()
}

pub fn oracle_ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (mut pa, mut pb) = (luma(a), luma(b));
    let mut out = 1.0;
    for (s, wgt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&pa, &pb);
        let term: f64 = if s == 4 { ssim } else { cs };
        out *= term.max(0.0).powf(*wgt);
        pa = halve(&pa);
        pb = halve(&pb);
    }
    out
}

/// Population z-scores; a constant column maps to zeros.
pub fn oracle_z(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if values.iter().all(|v| *v == values[0]) || var == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / var.sqrt()).collect()
}

/// Winner by highest `z_q - z_bpp`, then lower raw bpp, then lower index.
pub fn oracle_winner(quality: &[f64], bpp: &[f64]) -> usize {
    let zq = oracle_z(quality);
    let zb = oracle_z(bpp);
    let mut best = 0;
    for j in 1..quality.len() {
        let (sj, sb) = (zq[j] - zb[j], zq[best] - zb[best]);
        if sj > sb || (sj == sb && bpp[j] < bpp[best]) {
            best = j;
        }
    }
    best
}
