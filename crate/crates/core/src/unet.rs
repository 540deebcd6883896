//! Three-level residual U-Net in f64 with hand-written reverse mode.
//!
//! Layout for base width `B` (every conv but the last is followed by ReLU):
//!
//! ```text
//! e1 = conv(B→B, conv(3→B, x))                         H
//! e2 = conv(B→2B, conv_s2(B→B, e1))                    H/2
//! e3 = conv(2B→4B, conv_s2(2B→2B, e2))                 H/4
//! d3 = conv(4B→4B, conv(8B→4B, [up_s1(4B→4B, e3), e3])) H/4
//! d2 = conv(2B→2B, conv(4B→2B, [up_s2(4B→2B, d3), e2])) H/2
//! d1 = conv(B→B,   conv(2B→B,  [up_s2(2B→B,  d2), e1])) H
//! y  = x + proj(B→3, d1)
//! ```
//!
//! `up_s*` are 2×2 transposed convolutions cropped to `stride · input`.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{FilterError, PreprocOperator};
use crate::image::{crop_back, pad_to_multiple, quantize_sample, slice_patches, ImageBuffer, PatchSpec};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, UNetError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(UNetError::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// `[1, 3, H, W]` with samples scaled to [0, 1].
    pub fn from_image(img: &ImageBuffer) -> Self {
        let planes = img.to_float();
        Self { shape: [1, 3, img.height(), img.width()], data: planes.data }
    }

    /// Batch element `n` back to 8-bit, clamped.
    pub fn to_image(&self, n: usize) -> ImageBuffer {
        let [_, c, h, w] = self.shape;
        assert_eq!(c, 3, "to_image needs 3 channels");
        let plane = h * w;
        let base = n * 3 * plane;
        ImageBuffer::from_fn(w, h, |x, y| {
            let i = y * w + x;
            [0, 1, 2].map(|ch| quantize_sample(self.data[base + ch * plane + i] * 255.0))
        })
    }

    /// Concatenate `[1, C, H, W]` samples along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self, UNetError> {
        let first = items.first().ok_or(UNetError::EmptyDataset)?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(UNetError::Shape(format!("cannot stack {:?} with {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w);
        Ok(Self { shape: [n, c, h, w], data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        let [n, ca, h, w] = a.shape;
        let cb = b.shape[1];
        debug_assert_eq!((b.shape[0], b.shape[2], b.shape[3]), (n, h, w));
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&a.data[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&b.data[i * sb..(i + 1) * sb]);
        }
        Tensor { shape: [n, ca + cb, h, w], data }
    }

    fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        let cb = c - ca;
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut a = Vec::with_capacity(n * sa);
        let mut b = Vec::with_capacity(n * sb);
        for i in 0..n {
            let s = &self.data[i * (sa + sb)..(i + 1) * (sa + sb)];
            a.extend_from_slice(&s[..sa]);
            b.extend_from_slice(&s[sa..]);
        }
        (Tensor { shape: [n, ca, h, w], data: a }, Tensor { shape: [n, cb, h, w], data: b })
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Mean of squared differences over every element.
pub fn mse_loss(pred: &Tensor, label: &Tensor) -> Result<f64, UNetError> {
    if pred.shape != label.shape {
        return Err(UNetError::Shape(format!("loss between {:?} and {:?}", pred.shape, label.shape)));
    }
    let sum: f64 = pred.data.iter().zip(&label.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::with_base(16)
    }
}

impl UNetConfig {
    pub fn with_base(base_channels: usize) -> Self {
        Self { levels: 3, base_channels, in_channels: 3, out_channels: 3, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        if self.levels != 3 {
            return Err(UNetError::Config(format!("levels must be 3, got {}", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(UNetError::Config("base_channels must be >= 1".into()));
        }
        if self.in_channels != 3 || self.out_channels != 3 {
            return Err(UNetError::Config("in/out channels must be 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Conv,
    Transposed,
}

/// One convolution layer. Conv weights are `[cout, cin, k, k]`, transposed
/// weights `[cin, cout, k, k]`.
#[derive(Debug, Clone, PartialEq)]
struct Conv {
    kind: Kind,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    relu: bool,
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Range of output indices `o` with `0 <= o*s + off < n_in`, capped at `n_out`.
fn conv_range(off: isize, s: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (n_in as isize - off + s - 1).div_euclid(s).max(0);
    (lo as usize, (hi as usize).min(n_out))
}

impl Conv {
    fn new(kind: Kind, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> Self {
        Self { kind, cin, cout, k, stride, relu, w: vec![0.0; cin * cout * k * k], b: vec![0.0; cout] }
    }

    fn pad(&self) -> usize {
        match self.kind {
            Kind::Conv => self.k / 2,
            Kind::Transposed => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            Kind::Conv => self.cin * self.k * self.k,
            Kind::Transposed => self.cin * self.k.div_ceil(self.stride).pow(2),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            Kind::Conv => {
                let p = self.pad();
                ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
            }
            Kind::Transposed => (h * self.stride, w * self.stride),
        }
    }

    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        match self.kind {
            Kind::Conv => ((o * self.cin + i) * self.k + ky) * self.k + kx,
            Kind::Transposed => ((i * self.cout + o) * self.k + ky) * self.k + kx,
        }
    }

    /// Visit every (output row, input row, column span) touched by tap
    /// `(ky, kx)`. For conv: `ox ∈ [lo, hi)` reads `ix = ox*s + kx - p`.
    /// For transposed: `ix ∈ [lo, hi)` writes `ox = ix*s + kx`.
    fn for_rows(&self, h: usize, w: usize, ho: usize, wo: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (s, p) = (self.stride, self.pad() as isize);
        match self.kind {
            Kind::Conv => {
                let (ylo, yhi) = conv_range(ky as isize - p, s, h, ho);
                let (xlo, xhi) = conv_range(kx as isize - p, s, w, wo);
                for oy in ylo..yhi {
                    let iy = (oy * s) as isize + ky as isize - p;
                    f(oy, iy as usize, xlo, xhi);
                }
            }
            Kind::Transposed => {
                let yhi = h.min((ho + s - 1 - ky.min(ho)) / s);
                let xhi = w.min((wo + s - 1 - kx.min(wo)) / s);
                if xhi == 0 {
                    return;
                }
                for iy in 0..yhi {
                    f(iy * s + ky, iy, 0, xhi);
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        debug_assert_eq!(c, self.cin);
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Tensor::zeros([n, self.cout, ho, wo]);
        let (s, p, k) = (self.stride, self.pad(), self.k);
        let (ip, op) = (h * w, ho * wo);
        out.data.par_chunks_mut(op).enumerate().for_each(|(plane, o_plane)| {
            let (bn, co) = (plane / self.cout, plane % self.cout);
            o_plane.fill(self.b[co]);
            for ci in 0..self.cin {
                let i_plane = &x.data[(bn * self.cin + ci) * ip..][..ip];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.w[self.widx(co, ci, ky, kx)];
                        self.for_rows(h, w, ho, wo, ky, kx, |oy, iy, lo, hi| {
                            let in_row = &i_plane[iy * w..][..w];
                            let out_row = &mut o_plane[oy * wo..][..wo];
                            match self.kind {
                                Kind::Conv if s == 1 => {
                                    let off = kx as isize - p as isize;
                                    let src = &in_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                    for (o, i) in out_row[lo..hi].iter_mut().zip(src) {
                                        *o += wv * i;
                                    }
                                }
                                Kind::Conv => {
                                    for ox in lo..hi {
                                        out_row[ox] += wv * in_row[ox * s + kx - p];
                                    }
                                }
                                Kind::Transposed => {
                                    for ix in lo..hi {
                                        out_row[ix * s + kx] += wv * in_row[ix];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            if self.relu {
                for v in o_plane.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        });
        out
    }

    /// Gradients w.r.t. input, weights and bias given `g` = dL/d(pre-activation).
    fn backward(&self, x: &Tensor, g: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let [n, _, h, w] = x.shape;
        let [_, _, ho, wo] = g.shape;
        let (s, p, k) = (self.stride, self.pad(), self.k);
        let (ip, op) = (h * w, ho * wo);

        let mut gb = vec![0.0; self.cout];
        for bn in 0..n {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += g.data[(bn * self.cout + co) * op..][..op].iter().sum::<f64>();
            }
        }

        // weight gradient: one task per output channel
        let per_co = self.cin * k * k;
        let mut gw_co: Vec<Vec<f64>> = (0..self.cout)
            .into_par_iter()
            .map(|co| {
                let mut acc = vec![0.0; per_co];
                for bn in 0..n {
                    let g_plane = &g.data[(bn * self.cout + co) * op..][..op];
                    for ci in 0..self.cin {
                        let i_plane = &x.data[(bn * self.cin + ci) * ip..][..ip];
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut sum = 0.0;
                                self.for_rows(h, w, ho, wo, ky, kx, |oy, iy, lo, hi| {
                                    let in_row = &i_plane[iy * w..][..w];
                                    let g_row = &g_plane[oy * wo..][..wo];
                                    match self.kind {
                                        Kind::Conv if s == 1 => {
                                            let off = kx as isize - p as isize;
                                            let src = &in_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                            sum += g_row[lo..hi].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                        }
                                        Kind::Conv => {
                                            for ox in lo..hi {
                                                sum += g_row[ox] * in_row[ox * s + kx - p];
                                            }
                                        }
                                        Kind::Transposed => {
                                            for ix in lo..hi {
                                                sum += g_row[ix * s + kx] * in_row[ix];
                                            }
                                        }
                                    }
                                });
                                acc[(ci * k + ky) * k + kx] += sum;
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut gw = vec![0.0; self.w.len()];
        for (co, acc) in gw_co.iter_mut().enumerate() {
            for ci in 0..self.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        gw[self.widx(co, ci, ky, kx)] = acc[(ci * k + ky) * k + kx];
                    }
                }
            }
        }

        // input gradient: one task per input plane
        let mut gx = Tensor::zeros(x.shape);
        gx.data.par_chunks_mut(ip).enumerate().for_each(|(plane, gi_plane)| {
            let (bn, ci) = (plane / self.cin, plane % self.cin);
            for co in 0..self.cout {
                let g_plane = &g.data[(bn * self.cout + co) * op..][..op];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.w[self.widx(co, ci, ky, kx)];
                        self.for_rows(h, w, ho, wo, ky, kx, |oy, iy, lo, hi| {
                            let gi_row = &mut gi_plane[iy * w..][..w];
                            let g_row = &g_plane[oy * wo..][..wo];
                            match self.kind {
                                Kind::Conv if s == 1 => {
                                    let off = kx as isize - p as isize;
                                    let dst = &mut gi_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                    for (d, gv) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                        *d += wv * gv;
                                    }
                                }
                                Kind::Conv => {
                                    for ox in lo..hi {
                                        gi_row[ox * s + kx - p] += wv * g_row[ox];
                                    }
                                }
                                Kind::Transposed => {
                                    for ix in lo..hi {
                                        gi_row[ix] += wv * g_row[ix * s + kx];
                                    }
                                }
                            }
                        });
                    }
                }
            }
        });
        (gx, gw, gb)
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Node(usize),
    Concat(usize, usize),
}

/// Input wiring per layer. Node 0 is the network input, node `l + 1` the
/// output of layer `l`.
const WIRING: [Source; 16] = [
    Source::Node(0),
    Source::Node(1),
    Source::Node(2),
    Source::Node(3),
    Source::Node(4),
    Source::Node(5),
    Source::Node(6),
    Source::Concat(7, 6),
    Source::Node(8),
    Source::Node(9),
    Source::Concat(10, 4),
    Source::Node(11),
    Source::Node(12),
    Source::Concat(13, 2),
    Source::Node(14),
    Source::Node(15),
];

/// Per-layer weight and bias gradients, same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
    }

    fn zeros_like(net: &UNet) -> Self {
        Self { layers: net.layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect() }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, v) in w.iter_mut().zip(ow) {
                *a += s * v;
            }
            for (a, v) in b.iter_mut().zip(ob) {
                *a += s * v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    layers: Vec<Conv>,
}

impl UNet {
    /// All-zero parameters.
    pub fn zeros(config: UNetConfig) -> Result<Self, UNetError> {
        config.validate()?;
        let b = config.base_channels;
        let c = |cin, cout| Conv::new(Kind::Conv, cin, cout, 3, 1, true);
        let down = |cin, cout| Conv::new(Kind::Conv, cin, cout, 3, 2, true);
        let up = |cin, cout, stride| Conv::new(Kind::Transposed, cin, cout, 2, stride, true);
        let layers = vec![
            c(3, b),
            c(b, b),
            down(b, b),
            c(b, 2 * b),
            down(2 * b, 2 * b),
            c(2 * b, 4 * b),
            up(4 * b, 4 * b, 1),
            c(8 * b, 4 * b),
            c(4 * b, 4 * b),
            up(4 * b, 2 * b, 2),
            c(4 * b, 2 * b),
            c(2 * b, 2 * b),
            up(2 * b, b, 2),
            c(2 * b, b),
            c(b, b),
            Conv::new(Kind::Conv, b, 3, 3, 1, false),
        ];
        Ok(Self { config, layers })
    }

    /// He-normal weights (σ = √(2 / fan_in)), zero biases, drawn in
    /// declaration order from a seeded ChaCha8 stream.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, UNetError> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in net.layers.iter_mut() {
            let normal = Normal::new(0.0, (2.0 / l.fan_in() as f64).sqrt()).expect("positive sigma");
            for w in l.w.iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters in declaration order (per layer: weights, then biases).
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<(), UNetError> {
        if values.len() != self.param_count() {
            return Err(UNetError::Shape(format!("expected {} parameters, got {}", self.param_count(), values.len())));
        }
        let mut it = values.iter().copied();
        for l in self.layers.iter_mut() {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Zero the final projection so the network is the identity map.
    pub fn zero_projection(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(0.0);
    }

    /// Output channels of the encoder levels.
    pub fn encoder_channels(&self) -> [usize; 3] {
        [self.layers[1].cout, self.layers[3].cout, self.layers[5].cout]
    }

    fn check_input(&self, x: &Tensor) -> Result<(), UNetError> {
        let [n, c, h, w] = x.shape;
        if n == 0 || c != self.config.in_channels {
            return Err(UNetError::Shape(format!("input {:?} needs batch >= 1 and {} channels", x.shape, self.config.in_channels)));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(UNetError::Shape(format!("spatial dims {h}x{w} must be positive multiples of 4")));
        }
        Ok(())
    }

    fn layer_input(nodes: &[Tensor], src: Source) -> std::borrow::Cow<'_, Tensor> {
        match src {
            Source::Node(i) => std::borrow::Cow::Borrowed(&nodes[i]),
            Source::Concat(a, b) => std::borrow::Cow::Owned(Tensor::concat_channels(&nodes[a], &nodes[b])),
        }
    }

    /// Node 0 is the input, node `l + 1` the output of layer `l`.
    fn trace(&self, x: &Tensor) -> Vec<Tensor> {
        let mut nodes = Vec::with_capacity(self.layers.len() + 1);
        nodes.push(x.clone());
        for (layer, &src) in self.layers.iter().zip(WIRING.iter()) {
            let out = layer.forward(&Self::layer_input(&nodes, src));
            nodes.push(out);
        }
        nodes
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, UNetError> {
        self.check_input(x)?;
        let mut nodes = self.trace(x);
        let mut out = nodes.pop().unwrap();
        out.add_assign(x);
        Ok(out)
    }

    /// On/off state of every rectifier for input `x`, in layer order.
    pub fn activation_pattern(&self, x: &Tensor) -> Result<Vec<bool>, UNetError> {
        self.check_input(x)?;
        let nodes = self.trace(x);
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.relu)
            .flat_map(|(i, _)| nodes[i + 1].data.iter().map(|&v| v > 0.0))
            .collect())
    }

    /// Loss, parameter gradients and input gradient of `mse(forward(x), label)`.
    pub fn backward(&self, x: &Tensor, label: &Tensor) -> Result<(f64, Gradients, Tensor), UNetError> {
        self.check_input(x)?;
        let nodes = self.trace(x);
        let mut out = nodes.last().unwrap().clone();
        out.add_assign(x);
        let loss = mse_loss(&out, label)?;
        let scale = 2.0 / out.data.len() as f64;
        let g_out = Tensor { shape: out.shape, data: out.data.iter().zip(&label.data).map(|(o, l)| scale * (o - l)).collect() };

        let mut grads = Gradients::zeros_like(self);
        let mut node_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        node_grads[self.layers.len()] = Some(g_out.clone());
        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            Some(t) => t.add_assign(&g),
            None => *slot = Some(g),
        };
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let Some(mut g) = node_grads[l + 1].take() else { continue };
            if layer.relu {
                for (gv, a) in g.data.iter_mut().zip(&nodes[l + 1].data) {
                    if *a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = Self::layer_input(&nodes, WIRING[l]);
            let (gx, gw, gb) = layer.backward(&input, &g);
            grads.layers[l] = (gw, gb);
            match WIRING[l] {
                Source::Node(i) => accumulate(&mut node_grads[i], gx),
                Source::Concat(a, b) => {
                    let (ga, gb) = gx.split_channels(nodes[a].shape[1]);
                    accumulate(&mut node_grads[a], ga);
                    accumulate(&mut node_grads[b], gb);
                }
            }
        }
        let mut g_input = node_grads[0].take().unwrap_or_else(|| Tensor::zeros(x.shape));
        g_input.add_assign(&g_out);
        Ok((loss, grads, g_input))
    }

    /// Pad to a multiple of 4 by reflection, run, clamp and crop back.
    pub fn infer(&self, img: &ImageBuffer) -> ImageBuffer {
        let (padded, dims) = pad_to_multiple(img, 4);
        let out = self.forward(&Tensor::from_image(&padded)).expect("padded input is valid");
        crop_back(&out.to_image(0), dims)
    }

    const MAGIC: [u8; 8] = *b"IPUNETCK";
    const VERSION: u32 = 1;

    /// `magic | version u32 | config JSON length u32 | config JSON |
    /// parameter count u64 | parameters as f32`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let params = self.flat_params();
        let mut out = Vec::with_capacity(24 + config.len() + 4 * params.len());
        out.extend_from_slice(&Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, UNetError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], UNetError> {
            let chunk = bytes.get(pos..pos + n).ok_or_else(|| UNetError::Checkpoint("truncated".into()))?;
            pos += n;
            Ok(chunk)
        };
        if take(8)? != Self::MAGIC {
            return Err(UNetError::Checkpoint("wrong magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != Self::VERSION {
            return Err(UNetError::Checkpoint(format!("unsupported version {version}")));
        }
        let clen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config: UNetConfig = serde_json::from_slice(take(clen)?).map_err(|e| UNetError::Checkpoint(e.to_string()))?;
        let mut net = Self::zeros(config)?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if count != net.param_count() {
            return Err(UNetError::Checkpoint(format!("{count} parameters, config needs {}", net.param_count())));
        }
        let params: Vec<f64> = take(4 * count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if take(1).is_ok() {
            return Err(UNetError::Checkpoint("trailing bytes".into()));
        }
        net.set_flat_params(&params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), UNetError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, UNetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Bias-corrected Adam over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(param_count: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; param_count], v: vec![0.0; param_count] }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    pub fn step_net(&mut self, net: &mut UNet, grads: &Gradients) {
        let mut p = net.flat_params();
        self.update(&mut p, &grads.flatten());
        net.set_flat_params(&p).expect("same layout");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 4, lr: AdamState::DEFAULT_LR, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// One Adam step on a batch. Per-sample gradients are computed in parallel
/// and reduced in sample order. Returns the mean loss.
pub fn train_step(net: &mut UNet, adam: &mut AdamState, batch: &[&(Tensor, Tensor)]) -> Result<f64, UNetError> {
    let results: Vec<_> = batch.par_iter().map(|(x, y)| net.backward(x, y)).collect();
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let s = 1.0 / batch.len() as f64;
    for r in results {
        let (l, g, _) = r?;
        loss += l * s;
        total.add_scaled(&g, s);
    }
    adam.step_net(net, &total);
    Ok(loss)
}

/// Train on `(input, label)` pairs of shape `[1, 3, H, W]`. Each epoch
/// shuffles with a stream seeded from `cfg.seed`.
pub fn train(
    net: &mut UNet,
    pairs: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport, UNetError> {
    let first = pairs.first().ok_or(UNetError::EmptyDataset)?;
    for (x, y) in pairs {
        if x.shape != first.0.shape || y.shape != first.0.shape || x.shape[0] != 1 {
            return Err(UNetError::Shape(format!("pair shapes {:?}/{:?} differ from {:?}", x.shape, y.shape, first.0.shape)));
        }
    }
    net.check_input(&first.0)?;
    let mut adam = AdamState::new(net.param_count(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = TrainReport { epoch_losses: Vec::new(), steps: 0 };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<_> = chunk.iter().map(|&i| &pairs[i]).collect();
            sum += train_step(net, &mut adam, &batch)? * chunk.len() as f64;
            report.steps += 1;
        }
        let mean = sum / pairs.len() as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(report)
}

/// Aligned `(input, label)` patch tensors cut from one image pair.
pub fn patch_pairs(input: &ImageBuffer, label: &ImageBuffer, spec: PatchSpec) -> Result<Vec<(Tensor, Tensor)>, UNetError> {
    if input.dims() != label.dims() {
        return Err(UNetError::Shape(format!("input {:?} vs label {:?}", input.dims(), label.dims())));
    }
    if spec.patch_width % 4 != 0 || spec.patch_height % 4 != 0 {
        return Err(UNetError::Shape(format!("patch {}x{} must be a multiple of 4", spec.patch_width, spec.patch_height)));
    }
    let a = slice_patches(input, spec, "input");
    let b = slice_patches(label, spec, "label");
    Ok(a.iter().zip(&b).map(|(p, q)| (Tensor::from_image(&p.buffer), Tensor::from_image(&q.buffer))).collect())
}

/// A trained network used as a pool operator.
#[derive(Clone)]
pub struct UNetOperator {
    net: Arc<UNet>,
}

impl UNetOperator {
    pub fn new(net: UNet) -> Self {
        Self { net: Arc::new(net) }
    }
}

impl PreprocOperator for UNetOperator {
    fn id(&self) -> String {
        "unet".into()
    }

    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, FilterError> {
        Ok(self.net.infer(img))
    }
}
