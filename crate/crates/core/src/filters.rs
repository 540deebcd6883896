//! Preprocessing operator pool and series composition.
//!
//! Pool members:
//! - `nlm`: non-local means denoising
//! - `detail`: 3×3 high-pass detail enhancement
//! - `deblock`: grid-boundary blend, standing in for a learned artifact
//!   remover
//! - `reencode`: JPEG encode/decode round trip, standing in for a perceptual
//!   re-encoder

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{jpeg, CodecError};
use crate::image::{quantize_sample, ImageBuffer};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot compose an empty operator sequence")]
    EmptyComposition,
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("duplicate operator id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A pure, deterministic, dimension-preserving image transform.
pub trait PreprocOperator: Send + Sync {
    fn id(&self) -> String;
    fn parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError>;
}

pub type SharedOperator = Arc<dyn PreprocOperator>;

/// Leaves the image untouched; used as the "Original" row in evaluations.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl PreprocOperator for Identity {
    fn id(&self) -> String {
        "identity".into()
    }

    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError> {
        Ok(img.clone())
    }
}

/// Non-local means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlmDenoise {
    /// Filter strength on the 0–255 scale.
    pub h: f64,
    pub template: usize,
    pub search: usize,
    /// Noise level subtracted (as 2σ²) from patch distances.
    pub sigma: f64,
}

impl Default for NlmDenoise {
    fn default() -> Self {
        Self { h: 10.0, template: 7, search: 21, sigma: 0.0 }
    }
}

impl NlmDenoise {
    pub fn new(h: f64, template: usize, search: usize) -> Result<Self, FilterError> {
        let op = Self { h, template, search, sigma: 0.0 };
        op.validate()?;
        Ok(op)
    }

    fn validate(&self) -> Result<(), FilterError> {
        if self.template % 2 == 0 || self.search % 2 == 0 {
            return Err(FilterError::InvalidParameter("NLM windows must be odd".into()));
        }
        if self.template > self.search {
            return Err(FilterError::InvalidParameter("NLM template larger than search window".into()));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(FilterError::InvalidParameter("NLM strength must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(FilterError::InvalidParameter("NLM sigma must be non-negative".into()));
        }
        Ok(())
    }

    #[inline]
    fn weight(&self, ssd: u64, count: u64) -> f64 {
        let d2 = ssd as f64 / count as f64;
        let excess = (d2 - 2.0 * self.sigma * self.sigma).max(0.0);
        (-excess / (self.h * self.h)).exp()
    }
}

/// Edge-replicated copy of `img` with `pad` extra pixels on every side, as
/// i32 samples.
fn replicate_padded(img: &ImageBuffer, pad: usize) -> (Vec<i32>, usize) {
    let (w, h) = img.dims();
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let mut out = vec![0i32; pw * ph * 3];
    for y in 0..ph {
        for x in 0..pw {
            let p = img.pixel_clamped(x as isize - pad as isize, y as isize - pad as isize);
            let i = (y * pw + x) * 3;
            out[i] = p[0] as i32;
            out[i + 1] = p[1] as i32;
            out[i + 2] = p[2] as i32;
        }
    }
    (out, pw)
}

impl PreprocOperator for NlmDenoise {
    fn id(&self) -> String {
        "nlm".into()
    }

    fn parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("h".into(), self.h),
            ("template".into(), self.template as f64),
            ("search".into(), self.search as f64),
            ("sigma".into(), self.sigma),
        ])
    }

    /// The centre pixel is weighted by the largest weight among the other
    /// search positions, so an isolated outlier cannot vote only for itself.
    ///
    /// Patch distances come from per-offset integral images of integer
    /// squared differences, so they are exact and the float accumulation
    /// order per pixel is the search-window raster order.
    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError> {
        self.validate()?;
        let (w, h) = img.dims();
        let tr = self.template / 2;
        let sr = self.search / 2;
        let pad = tr + sr;
        let (src, pw) = replicate_padded(img, pad);
        let count = (self.template * self.template * 3) as u64;

        let n = w * h;
        let mut acc = vec![[0.0f64; 3]; n];
        let mut wsum = vec![0.0f64; n];
        let mut wmax = vec![0.0f64; n];
        // Squared differences over the region that template windows of
        // output pixels can touch: [sr, sr + w + 2tr) × [sr, sr + h + 2tr).
        let rw = w + 2 * tr;
        let rh = h + 2 * tr;
        let mut integral = vec![0u64; (rw + 1) * (rh + 1)];
        for dy in -(sr as isize)..=sr as isize {
            for dx in -(sr as isize)..=sr as isize {
                if dx == 0 && dy == 0 {
                    continue;
                }
                for y in 0..rh {
                    let mut row_sum = 0u64;
                    let py = y + sr;
                    let qy = (py as isize + dy) as usize;
                    for x in 0..rw {
                        let px = x + sr;
                        let qx = (px as isize + dx) as usize;
                        let a = (py * pw + px) * 3;
                        let b = (qy * pw + qx) * 3;
                        let mut d = 0u64;
                        for c in 0..3 {
                            let diff = (src[a + c] - src[b + c]) as i64;
                            d += (diff * diff) as u64;
                        }
                        row_sum += d;
                        integral[(y + 1) * (rw + 1) + x + 1] = integral[y * (rw + 1) + x + 1] + row_sum;
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        // template window in region coords: [x, x + 2tr] × [y, y + 2tr]
                        let (x0, y0, x1, y1) = (x, y, x + 2 * tr + 1, y + 2 * tr + 1);
                        let ssd = integral[y1 * (rw + 1) + x1] + integral[y0 * (rw + 1) + x0]
                            - integral[y0 * (rw + 1) + x1]
                            - integral[y1 * (rw + 1) + x0];
                        let wgt = self.weight(ssd, count);
                        let qx = (x + pad) as isize + dx;
                        let qy = (y + pad) as isize + dy;
                        let q = (qy as usize * pw + qx as usize) * 3;
                        let i = y * w + x;
                        wsum[i] += wgt;
                        wmax[i] = wmax[i].max(wgt);
                        for c in 0..3 {
                            acc[i][c] += wgt * src[q + c] as f64;
                        }
                    }
                }
            }
        }
        let mut out = img.clone();
        for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
            let center = if sr == 0 { 1.0 } else { wmax[i] };
            let total = wsum[i] + center;
            if total > 0.0 {
                for c in 0..3 {
                    px[c] = quantize_sample((acc[i][c] + center * px[c] as f64) / total);
                }
            }
        }
        Ok(out)
    }
}

pub const DETAIL_KERNEL: [[i32; 3]; 3] = [[0, -1, 0], [-1, 10, -1], [0, -1, 0]];
pub const DETAIL_DIVISOR: i32 = 6;

/// Sharpening convolution with [`DETAIL_KERNEL`] / 6.
#[derive(Debug, Clone, Copy, Default)]
pub struct DetailFilter;

/// `round_half_up(num / den)` for positive `den`, in exact integer arithmetic.
#[inline]
pub(crate) fn div_round_half_up(num: i32, den: i32) -> i32 {
    (2 * num + den).div_euclid(2 * den)
}

impl PreprocOperator for DetailFilter {
    fn id(&self) -> String {
        "detail".into()
    }

    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError> {
        let (w, h) = img.dims();
        let mut out = img.clone();
        let data = img.data();
        let at = |x: usize, y: usize, c: usize| data[(y * w + x) * 3 + c] as i32;
        for y in 0..h {
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                for c in 0..3 {
                    let s = 10 * at(x, y, c) - at(x, yu, c) - at(x, yd, c) - at(xl, y, c) - at(xr, y, c);
                    out.data_mut()[(y * w + x) * 3 + c] = div_round_half_up(s, DETAIL_DIVISOR).clamp(0, 255) as u8;
                }
            }
        }
        Ok(out)
    }
}

/// Blends the two pixels straddling every 8-pixel grid line: vertical lines
/// first, then horizontal lines on the result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeblockFilter {
    pub strength: f64,
}

impl Default for DeblockFilter {
    fn default() -> Self {
        Self { strength: 0.5 }
    }
}

impl PreprocOperator for DeblockFilter {
    fn id(&self) -> String {
        "deblock".into()
    }

    fn parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("strength".into(), self.strength)])
    }

    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(FilterError::InvalidParameter("deblock strength must be in [0, 1]".into()));
        }
        let (w, h) = img.dims();
        let s = self.strength;
        let blend = |p: u8, q: u8| -> (u8, u8) {
            let (p, q) = (p as f64, q as f64);
            (quantize_sample(p + s * (q - p) / 2.0), quantize_sample(q + s * (p - q) / 2.0))
        };
        let mut out = img.clone();
        let data = out.data_mut();
        for y in 0..h {
            for x in (8..w).step_by(8) {
                for c in 0..3 {
                    let (i, j) = ((y * w + x - 1) * 3 + c, (y * w + x) * 3 + c);
                    (data[i], data[j]) = blend(data[i], data[j]);
                }
            }
        }
        for y in (8..h).step_by(8) {
            for x in 0..w {
                for c in 0..3 {
                    let (i, j) = (((y - 1) * w + x) * 3 + c, (y * w + x) * 3 + c);
                    (data[i], data[j]) = blend(data[i], data[j]);
                }
            }
        }
        Ok(out)
    }
}

/// Encode→decode through the internal baseline JPEG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReencodeOperator {
    pub quality: u8,
}

impl Default for ReencodeOperator {
    fn default() -> Self {
        Self { quality: 84 }
    }
}

impl PreprocOperator for ReencodeOperator {
    fn id(&self) -> String {
        "reencode".into()
    }

    fn parameters(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("quality".into(), self.quality as f64)])
    }

    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError> {
        let bytes = jpeg::encode(img, self.quality)?;
        Ok(jpeg::decode(&bytes)?)
    }
}

/// Operators applied left to right.
#[derive(Clone)]
pub struct Composite {
    ops: Vec<SharedOperator>,
}

impl Composite {
    pub fn members(&self) -> &[SharedOperator] {
        &self.ops
    }
}

impl PreprocOperator for Composite {
    fn id(&self) -> String {
        self.ops.iter().map(|op| op.id()).collect::<Vec<_>>().join("+")
    }

    fn parameters(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for op in &self.ops {
            let id = op.id();
            for (k, v) in op.parameters() {
                out.insert(format!("{id}.{k}"), v);
            }
        }
        out
    }

    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError> {
        let mut cur = self.ops[0].apply(img)?;
        for op in &self.ops[1..] {
            cur = op.apply(&cur)?;
        }
        Ok(cur)
    }
}

pub fn compose(ops: &[SharedOperator]) -> Result<Composite, FilterError> {
    if ops.is_empty() {
        return Err(FilterError::EmptyComposition);
    }
    Ok(Composite { ops: ops.to_vec() })
}

/// Ordered, id-addressable operator pool. Registration order defines group
/// enumeration order.
#[derive(Clone, Default)]
pub struct OperatorRegistry {
    ops: Vec<SharedOperator>,
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `nlm`, `detail`, `deblock`, `reencode` with default parameters.
    pub fn default_pool() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(NlmDenoise::default())).unwrap();
        r.register(Arc::new(DetailFilter)).unwrap();
        r.register(Arc::new(DeblockFilter::default())).unwrap();
        r.register(Arc::new(ReencodeOperator::default())).unwrap();
        r
    }

    pub fn register(&mut self, op: SharedOperator) -> Result<(), FilterError> {
        let id = op.id();
        if self.get(&id).is_some() {
            return Err(FilterError::DuplicateId(id));
        }
        self.ops.push(op);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SharedOperator> {
        self.ops.iter().find(|op| op.id() == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.ops.iter().map(|op| op.id()).collect()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn operators(&self) -> &[SharedOperator] {
        &self.ops
    }

    /// Compose the listed ids in order.
    pub fn chain(&self, ids: &[String]) -> Result<Composite, FilterError> {
        let ops = ids
            .iter()
            .map(|id| self.get(id).cloned().ok_or_else(|| FilterError::UnknownOperator(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        compose(&ops)
    }
}
