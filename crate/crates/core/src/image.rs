//! Raster type, file I/O and patch slicing.
//!
//! Everything in the pipeline consumes [`ImageBuffer`]: 8-bit RGB,
//! row-major, interleaved. PPM (P6, maxval 255) is the bit-exact fixture
//! format; PNG is supported for corpus convenience.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("corrupt image stream: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid dimensions {width}x{height} for {len} bytes")]
    Dimensions { width: usize, height: usize, len: usize },
}

/// 3-channel 8-bit raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(ImageError::Dimensions { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    /// Image where every pixel is `rgb`. Panics on zero dimensions.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel lookup with coordinates clamped to the border (edge replication).
    #[inline]
    pub fn pixel_clamped(&self, x: isize, y: isize) -> [u8; 3] {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.pixel(cx, cy)
    }

    /// Copy of the `w`×`h` region starting at (`x`, `y`). Panics when out of bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> ImageBuffer {
        assert!(w > 0 && h > 0 && x + w <= self.width && y + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        ImageBuffer { width: w, height: h, data }
    }

    pub fn mirror_horizontal(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, |x, y| self.pixel(self.width - 1 - x, y))
    }

    /// BT.601 luma on the 0–255 scale, unrounded.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn to_float(&self) -> FloatPlanes {
        let n = self.pixel_count();
        let mut data = vec![0.0; n * 3];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f64 / 255.0;
            }
        }
        FloatPlanes { width: self.width, height: self.height, data }
    }
}

/// Round half up and clamp to the 8-bit range.
#[inline]
pub fn quantize_sample(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Planar float image with samples nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatPlanes {
    pub width: usize,
    pub height: usize,
    /// Plane-major: all R samples, then G, then B.
    pub data: Vec<f64>,
}

impl FloatPlanes {
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Multiply by 255, round half up, clamp.
    pub fn to_image(&self) -> ImageBuffer {
        let n = self.width * self.height;
        let mut data = vec![0u8; n * 3];
        for i in 0..n {
            for c in 0..3 {
                data[i * 3 + c] = quantize_sample(self.data[c * n + i] * 255.0);
            }
        }
        ImageBuffer { width: self.width, height: self.height, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Guess from the file extension; anything but `.png` is written as PPM.
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(ext) if ext == "png" => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ImageError::Unreadable { path: path.display().to_string(), source })?;
    decode_image(&bytes)
}

/// Decode an in-memory PPM/PGM or PNG stream.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(bytes)
    } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else {
        Err(ImageError::Unsupported("expected binary PPM (P6/P5) or PNG".into()))
    }
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>, format: ImageFormat) -> Result<(), ImageError> {
    let bytes = encode_image(img, format)?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn encode_image(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>, ImageError> {
    match format {
        ImageFormat::Ppm => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&img.data);
            Ok(out)
        }
        ImageFormat::Png => {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
                enc.set_color(png::ColorType::Rgb);
                enc.set_depth(png::BitDepth::Eight);
                let mut writer = enc.write_header().map_err(|e| ImageError::Corrupt(e.to_string()))?;
                writer.write_image_data(&img.data).map_err(|e| ImageError::Corrupt(e.to_string()))?;
            }
            Ok(out)
        }
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let gray = bytes[1] == b'5';
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(ImageError::Corrupt("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Corrupt("malformed PPM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Corrupt("malformed PPM header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::Unsupported(format!("PPM maxval {maxval} (only 255 supported)")));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Corrupt("zero PPM dimensions".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Corrupt("missing raster separator".into()));
    }
    pos += 1;
    let channels = if gray { 1 } else { 3 };
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| ImageError::Corrupt(format!("PPM raster truncated: need {need} bytes")))?;
    let data = if gray { raster.iter().flat_map(|&v| [v, v, v]).collect() } else { raster.to_vec() };
    ImageBuffer::new(width, height, data)
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| ImageError::Corrupt(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Corrupt(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ImageError::Unsupported("unexpanded indexed PNG".into())),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf.chunks_exact(stride).take(h) {
        for px in row[..w * channels].chunks_exact(channels) {
            match channels {
                1 | 2 => data.extend_from_slice(&[px[0], px[0], px[0]]),
                _ => data.extend_from_slice(&px[..3]),
            }
        }
    }
    ImageBuffer::new(w, h, data)
}

/// Training patch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub patch_width: usize,
    pub patch_height: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { patch_width: 320, patch_height: 180, stride: 160 }
    }
}

impl PatchSpec {
    pub fn new(patch_width: usize, patch_height: usize, stride: usize) -> Self {
        assert!(patch_width >= 1 && patch_height >= 1 && stride >= 1, "patch dims and stride must be >= 1");
        Self { patch_width, patch_height, stride }
    }

    pub fn square(size: usize, stride: usize) -> Self {
        Self::new(size, size, stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub source_id: String,
    pub origin_x: usize,
    pub origin_y: usize,
    pub buffer: ImageBuffer,
}

/// Window offsets along one axis: `0, s, 2s, …` with the last one moved flush
/// to the border, so the count is `floor((len - patch) / s) + 1`.
pub fn patch_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len < patch {
        return Vec::new();
    }
    let span = len - patch;
    let count = span / stride + 1;
    let mut offsets: Vec<usize> = (0..count).map(|k| k * stride).collect();
    if let Some(last) = offsets.last_mut() {
        *last = span;
    }
    offsets
}

pub fn slice_patches(img: &ImageBuffer, spec: PatchSpec, source_id: &str) -> Vec<Patch> {
    let xs = patch_offsets(img.width, spec.patch_width, spec.stride);
    let ys = patch_offsets(img.height, spec.patch_height, spec.stride);
    let mut patches = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            patches.push(Patch {
                source_id: source_id.to_string(),
                origin_x: x,
                origin_y: y,
                buffer: img.crop(x, y, spec.patch_width, spec.patch_height),
            });
        }
    }
    patches
}

/// Symmetric reflection (`… c b a | a b c …`), valid for any index.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Pad right/bottom by edge reflection so both dims become multiples of `m`.
/// Returns the padded image and the original `(width, height)`.
pub fn pad_to_multiple(img: &ImageBuffer, m: usize) -> (ImageBuffer, (usize, usize)) {
    assert!(m >= 1, "pad multiple must be >= 1");
    let (w, h) = img.dims();
    let pw = w.div_ceil(m) * m;
    let ph = h.div_ceil(m) * m;
    if (pw, ph) == (w, h) {
        return (img.clone(), (w, h));
    }
    let padded = ImageBuffer::from_fn(pw, ph, |x, y| {
        img.pixel(reflect_index(x as isize, w), reflect_index(y as isize, h))
    });
    (padded, (w, h))
}

pub fn crop_back(img: &ImageBuffer, original: (usize, usize)) -> ImageBuffer {
    if img.dims() == original {
        return img.clone();
    }
    img.crop(0, 0, original.0, original.1)
}
