//! Quality metrics.
//!
//! Full-reference: PSNR, SSIM and MS-SSIM (luma). No-reference: a
//! deterministic sharpness/blockiness/noise proxy scored on [0, 100]. Any
//! scorer can be plugged into the labeling loop through [`QualityMetric`].

use std::sync::Arc;

use thiserror::Error;

use crate::image::ImageBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("image {0:?} too small: need at least {1}x{1}")]
    TooSmall((usize, usize), usize),
    #[error("metric `{0}` needs a reference image")]
    MissingReference(String),
    #[error("unknown metric `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    NoReference,
    FullReference,
}

pub trait QualityMetric: Send + Sync {
    fn name(&self) -> &str;
    fn mode(&self) -> MetricMode;
    /// `reference` is ignored by no-reference metrics.
    fn score(&self, img: &ImageBuffer, reference: Option<&ImageBuffer>) -> Result<f64, MetricError>;
}

/// PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let sum: u64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok(sum as f64 / a.data().len() as f64)
}

/// `10·log10(255² / MSE)` over all channels, capped at 99 dB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / m).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_L: f64 = 255.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest side MS-SSIM accepts: the coarsest of 5 dyadic scales must still
/// hold one 11-tap window.
pub const MS_SSIM_MIN_DIM: usize = SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1);

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Luma plane with its dimensions.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn luma(img: &ImageBuffer) -> Self {
        Plane { w: img.width(), h: img.height(), data: img.luma() }
    }

    /// 2×2 box average, dropping an odd trailing row/column.
    fn downsample(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                data[y * w + x] =
                    (self.data[i] + self.data[i + 1] + self.data[i + self.w] + self.data[i + self.w + 1]) * 0.25;
            }
        }
        Plane { w, h, data }
    }
}

/// Valid-region separable filtering with the Gaussian window.
fn filter_valid(p: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let row = &p[y * w + x..y * w + x + SSIM_WINDOW];
            horiz[y * ow + x] = row.iter().zip(taps).map(|(a, t)| a * t).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| horiz[(y + k) * ow + x] * taps[k]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM and mean contrast-structure term for one scale.
fn ssim_components(a: &Plane, b: &Plane) -> (f64, f64) {
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
    let prod: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(&a.data, a.w, a.h, &taps);
    let (mu_b, _, _) = filter_valid(&b.data, b.w, b.h, &taps);
    let (e_aa, _, _) = filter_valid(&sq(&a.data), a.w, a.h, &taps);
    let (e_bb, _, _) = filter_valid(&sq(&b.data), b.w, b.h, &taps);
    let (e_ab, _, _) = filter_valid(&prod, a.w, a.h, &taps);
    let n = (ow * oh) as f64;
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / n, cs_sum / n)
}

/// Single-scale SSIM on BT.601 luma.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(MetricError::TooSmall(a.dims(), SSIM_WINDOW));
    }
    Ok(ssim_components(&Plane::luma(a), &Plane::luma(b)).0)
}

/// Five-scale MS-SSIM on luma. Negative contrast-structure terms are clamped
/// to zero before exponentiation.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    if a.width().min(a.height()) < MS_SSIM_MIN_DIM {
        return Err(MetricError::TooSmall(a.dims(), MS_SSIM_MIN_DIM));
    }
    let (mut pa, mut pb) = (Plane::luma(a), Plane::luma(b));
    let mut result = 1.0;
    for (scale, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (s, cs) = ssim_components(&pa, &pb);
        if scale + 1 == MS_SSIM_WEIGHTS.len() {
            result *= s.max(0.0).powf(weight);
        } else {
            result *= cs.max(0.0).powf(weight);
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(result)
}

/// Weights of the no-reference proxy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProxyWeights {
    pub sharpness: f64,
    pub blockiness: f64,
    pub noise: f64,
    pub bias: f64,
}

impl Default for ProxyWeights {
    fn default() -> Self {
        Self { sharpness: 1.0, blockiness: 4.0, noise: 2.0, bias: 0.0 }
    }
}

/// The three statistics behind the proxy score, all on the 0–255 luma scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyStats {
    /// `ln(1 + var(3×3 Laplacian))`.
    pub sharpness: f64,
    /// Grid-line luma discontinuity in excess of the off-grid baseline.
    pub blockiness: f64,
    /// Robust noise sigma of the finest diagonal detail band.
    pub noise: f64,
}

pub const PROXY_MIN_DIM: usize = 16;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean |difference| across boundaries at `period`-aligned positions versus
/// all other positions, for a grid anchored at the start (`from_end == false`)
/// or at the end of the axis. `diff(k)` is the step between samples k−1 and k.
fn grid_excess(len: usize, from_end: bool, diff: &dyn Fn(usize) -> f64) -> f64 {
    let (mut on, mut on_n, mut off, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    for k in 1..len {
        let aligned = if from_end { (len - k) % 8 == 0 } else { k % 8 == 0 };
        if aligned {
            on += diff(k);
            on_n += 1;
        } else {
            off += diff(k);
            off_n += 1;
        }
    }
    if on_n == 0 || off_n == 0 {
        return 0.0;
    }
    on / on_n as f64 - off / off_n as f64
}

pub fn proxy_stats(img: &ImageBuffer) -> Result<ProxyStats, MetricError> {
    let (w, h) = img.dims();
    if w < PROXY_MIN_DIM || h < PROXY_MIN_DIM {
        return Err(MetricError::TooSmall((w, h), PROXY_MIN_DIM));
    }
    let y = img.luma();
    let at = |x: usize, yy: usize| y[yy * w + x];

    let mut lap = Vec::with_capacity((w - 2) * (h - 2));
    for yy in 1..h - 1 {
        for x in 1..w - 1 {
            lap.push(at(x - 1, yy) + at(x + 1, yy) + at(x, yy - 1) + at(x, yy + 1) - 4.0 * at(x, yy));
        }
    }
    let mean = lap.iter().sum::<f64>() / lap.len() as f64;
    let var = lap.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lap.len() as f64;
    let sharpness = var.ln_1p();

    // Column steps averaged over rows, row steps averaged over columns.
    let col_step = |k: usize| (0..h).map(|yy| (at(k, yy) - at(k - 1, yy)).abs()).sum::<f64>() / h as f64;
    let row_step = |k: usize| (0..w).map(|x| (at(x, k) - at(x, k - 1)).abs()).sum::<f64>() / w as f64;
    let horiz = grid_excess(w, false, &col_step).max(grid_excess(w, true, &col_step));
    let vert = grid_excess(h, false, &row_step).max(grid_excess(h, true, &row_step));
    let blockiness = 0.5 * (horiz + vert);

    let mut hh = Vec::with_capacity((w - 1) * (h - 1));
    for yy in 0..h - 1 {
        for x in 0..w - 1 {
            hh.push(0.5 * (at(x, yy) - at(x + 1, yy) - at(x, yy + 1) + at(x + 1, yy + 1)));
        }
    }
    let med = median(&mut hh.clone());
    let mut dev: Vec<f64> = hh.iter().map(|v| (v - med).abs()).collect();
    let noise = 1.4826 * median(&mut dev);

    Ok(ProxyStats { sharpness, blockiness, noise })
}

/// `100 · logistic(w_s·S − w_b·B − w_n·N + w_0)`.
pub fn proxy_nr_score(img: &ImageBuffer, weights: &ProxyWeights) -> Result<f64, MetricError> {
    let s = proxy_stats(img)?;
    let z = weights.sharpness * s.sharpness - weights.blockiness * s.blockiness - weights.noise * s.noise + weights.bias;
    Ok(100.0 / (1.0 + (-z).exp()))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ProxyNr {
    pub weights: ProxyWeights,
}

impl QualityMetric for ProxyNr {
    fn name(&self) -> &str {
        "proxy-nr"
    }

    fn mode(&self) -> MetricMode {
        MetricMode::NoReference
    }

    fn score(&self, img: &ImageBuffer, _reference: Option<&ImageBuffer>) -> Result<f64, MetricError> {
        proxy_nr_score(img, &self.weights)
    }
}

macro_rules! full_reference_metric {
    ($ty:ident, $name:literal, $f:path) => {
        #[derive(Debug, Clone, Copy, Default)]
        pub struct $ty;

        impl QualityMetric for $ty {
            fn name(&self) -> &str {
                $name
            }

            fn mode(&self) -> MetricMode {
                MetricMode::FullReference
            }

            fn score(&self, img: &ImageBuffer, reference: Option<&ImageBuffer>) -> Result<f64, MetricError> {
                let r = reference.ok_or_else(|| MetricError::MissingReference($name.into()))?;
                $f(img, r)
            }
        }
    };
}

full_reference_metric!(Psnr, "psnr", psnr);
full_reference_metric!(Ssim, "ssim", ssim);
full_reference_metric!(MsSsim, "ms-ssim", ms_ssim);

pub fn metric_by_name(name: &str, weights: ProxyWeights) -> Result<Arc<dyn QualityMetric>, MetricError> {
    Ok(match name {
        "proxy-nr" | "proxy" => Arc::new(ProxyNr { weights }),
        "psnr" => Arc::new(Psnr),
        "ssim" => Arc::new(Ssim),
        "ms-ssim" | "msssim" => Arc::new(MsSsim),
        other => return Err(MetricError::Unknown(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let base = ImageBuffer::filled(4, 4, [100, 100, 100]);
        let off = ImageBuffer::filled(4, 4, [110, 90, 110]);
        let expected = 10.0 * (65025.0f64 / 100.0).log10();
        assert!((psnr(&base, &off).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 28.13).abs() < 0.005);
        let black = ImageBuffer::filled(3, 3, [0, 0, 0]);
        let white = ImageBuffer::filled(3, 3, [255, 255, 255]);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        assert!(matches!(psnr(&black, &base), Err(MetricError::DimensionMismatch(..))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_image(32, 32, 2);
        let b = random_image(32, 32, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 0.5);
        assert!(matches!(ssim(&random_image(8, 8, 1), &random_image(8, 8, 2)), Err(MetricError::TooSmall(..))));
    }

    #[test]
    fn ms_ssim_limits() {
        assert_eq!(MS_SSIM_MIN_DIM, 176);
        let a = random_image(176, 180, 4);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        let small = random_image(175, 200, 4);
        assert!(matches!(ms_ssim(&small, &small), Err(MetricError::TooSmall(..))));
    }

    #[test]
    fn gaussian_taps_normalized() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn proxy_is_mirror_invariant() {
        for (w, h, seed) in [(37, 29, 1u64), (64, 48, 2), (50, 50, 3)] {
            let img = random_image(w, h, seed);
            let a = proxy_nr_score(&img, &ProxyWeights::default()).unwrap();
            let b = proxy_nr_score(&img.mirror_horizontal(), &ProxyWeights::default()).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn proxy_range_and_size_check() {
        let s = proxy_nr_score(&random_image(20, 20, 5), &ProxyWeights::default()).unwrap();
        assert!((0.0..=100.0).contains(&s));
        assert!(proxy_nr_score(&random_image(15, 40, 5), &ProxyWeights::default()).is_err());
    }

    #[test]
    fn blockiness_detects_grid() {
        let blocky = ImageBuffer::from_fn(64, 64, |x, y| {
            let v = (((x / 8) * 37 + (y / 8) * 53) % 200) as u8 + 20;
            [v, v, v]
        });
        let stats = proxy_stats(&blocky).unwrap();
        assert!(stats.blockiness > 10.0, "{stats:?}");
        let smooth = ImageBuffer::from_fn(64, 64, |x, y| [(x * 3 + y) as u8, 0, 0]);
        assert!(proxy_stats(&smooth).unwrap().blockiness.abs() < 1e-9);
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(metric_by_name("psnr", ProxyWeights::default()).unwrap().name(), "psnr");
        assert_eq!(metric_by_name("proxy-nr", ProxyWeights::default()).unwrap().mode(), MetricMode::NoReference);
        assert!(metric_by_name("vqscore", ProxyWeights::default()).is_err());
        let a = random_image(16, 16, 1);
        let fr = metric_by_name("ssim", ProxyWeights::default()).unwrap();
        assert!(matches!(fr.score(&a, None), Err(MetricError::MissingReference(_))));
    }
}
