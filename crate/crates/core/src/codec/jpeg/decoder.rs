//! Baseline sequential (Huffman, 8-bit) JPEG decoder.
//!
//! Handles any sampling factors, interleaved or single-component scans,
//! restart intervals and 8/16-bit quantization tables. Progressive,
//! lossless and arithmetic-coded streams are rejected.

use super::dct::inverse_dct;
use super::tables::ZIGZAG;
use crate::codec::CodecError;
use crate::image::{quantize_sample, ImageBuffer};

#[derive(Clone)]
struct HuffmanDecodeTable {
    maxcode: [i32; 18],
    valptr: [i32; 17],
    mincode: [i32; 17],
    vals: Vec<u8>,
}

impl HuffmanDecodeTable {
    fn new(bits: &[u8; 16], vals: Vec<u8>) -> Self {
        let mut maxcode = [-1i32; 18];
        let mut valptr = [0i32; 17];
        let mut mincode = [0i32; 17];
        let mut code = 0i32;
        let mut k = 0i32;
        for l in 1..=16 {
            let n = bits[l - 1] as i32;
            if n > 0 {
                valptr[l] = k;
                mincode[l] = code;
                code += n;
                k += n;
                maxcode[l] = code - 1;
            }
            code <<= 1;
        }
        maxcode[17] = i32::MAX;
        Self { maxcode, valptr, mincode, vals }
    }
}

#[derive(Clone)]
struct Component {
    id: u8,
    h: usize,
    v: usize,
    tq: usize,
    /// Plane holding decoded samples, sized in whole MCUs.
    plane: Vec<u8>,
    stride: usize,
    rows: usize,
}

struct Frame {
    width: usize,
    height: usize,
    components: Vec<Component>,
    hmax: usize,
    vmax: usize,
    mcux: usize,
    mcuy: usize,
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
    /// Set once a marker (or the end of data) has been reached.
    exhausted: bool,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8], pos: usize) -> Self {
        Self { data, pos, acc: 0, nbits: 0, exhausted: false }
    }

    fn fill(&mut self) -> Result<(), CodecError> {
        if self.exhausted {
            return Err(CodecError::Truncated);
        }
        match self.data.get(self.pos) {
            None => {
                self.exhausted = true;
                Err(CodecError::Truncated)
            }
            Some(&0xff) => match self.data.get(self.pos + 1) {
                Some(0x00) => {
                    self.pos += 2;
                    self.acc = (self.acc << 8) | 0xff;
                    self.nbits += 8;
                    Ok(())
                }
                _ => {
                    self.exhausted = true;
                    Err(CodecError::Truncated)
                }
            },
            Some(&b) => {
                self.pos += 1;
                self.acc = (self.acc << 8) | b as u32;
                self.nbits += 8;
                Ok(())
            }
        }
    }

    fn bit(&mut self) -> Result<u32, CodecError> {
        if self.nbits == 0 {
            self.fill()?;
        }
        self.nbits -= 1;
        Ok((self.acc >> self.nbits) & 1)
    }

    fn bits(&mut self, n: u8) -> Result<u32, CodecError> {
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }

    fn decode(&mut self, table: &HuffmanDecodeTable) -> Result<u8, CodecError> {
        let mut code = self.bit()? as i32;
        let mut l = 1;
        while code > table.maxcode[l] {
            code = (code << 1) | self.bit()? as i32;
            l += 1;
            if l > 16 {
                return Err(CodecError::Malformed("invalid Huffman code".into()));
            }
        }
        let idx = table.valptr[l] + code - table.mincode[l];
        table
            .vals
            .get(idx as usize)
            .copied()
            .ok_or_else(|| CodecError::Malformed("Huffman value index out of range".into()))
    }

    /// Drop partial-byte bits and consume an expected RSTn marker.
    fn restart(&mut self) -> Result<(), CodecError> {
        self.acc = 0;
        self.nbits = 0;
        self.exhausted = false;
        match (self.data.get(self.pos), self.data.get(self.pos + 1)) {
            (Some(0xff), Some(m)) if (0xd0..=0xd7).contains(m) => {
                self.pos += 2;
                Ok(())
            }
            (None, _) | (Some(_), None) => Err(CodecError::Truncated),
            _ => Err(CodecError::Malformed("missing restart marker".into())),
        }
    }
}

fn extend(v: u32, size: u8) -> i32 {
    if size == 0 {
        return 0;
    }
    let v = v as i32;
    if v < (1 << (size - 1)) {
        v - (1 << size) + 1
    } else {
        v
    }
}

fn read_u16(data: &[u8], pos: usize) -> Result<usize, CodecError> {
    data.get(pos..pos + 2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as usize)
        .ok_or(CodecError::Truncated)
}

pub fn decode(data: &[u8]) -> Result<ImageBuffer, CodecError> {
    if data.len() < 2 {
        return Err(CodecError::Truncated);
    }
    if data[0] != 0xff || data[1] != 0xd8 {
        return Err(CodecError::Malformed("missing SOI marker".into()));
    }
    let mut pos = 2;
    let mut qts: [Option<[u16; 64]>; 4] = [None; 4];
    let mut dc_tables: [Option<HuffmanDecodeTable>; 4] = Default::default();
    let mut ac_tables: [Option<HuffmanDecodeTable>; 4] = Default::default();
    let mut restart_interval = 0usize;
    let mut frame: Option<Frame> = None;

    loop {
        // marker, skipping fill bytes
        while data.get(pos) == Some(&0xff) && data.get(pos + 1) == Some(&0xff) {
            pos += 1;
        }
        let marker = match (data.get(pos), data.get(pos + 1)) {
            (Some(0xff), Some(&m)) => m,
            (None, _) | (Some(_), None) => return Err(CodecError::Truncated),
            _ => return Err(CodecError::Malformed(format!("expected marker at byte {pos}"))),
        };
        pos += 2;
        match marker {
            0xd9 => break,
            0xd0..=0xd7 | 0x01 => continue,
            _ => {}
        }
        let len = read_u16(data, pos)?;
        if len < 2 {
            return Err(CodecError::Malformed("segment length < 2".into()));
        }
        let seg = data.get(pos + 2..pos + len).ok_or(CodecError::Truncated)?;
        match marker {
            0xc0 | 0xc1 => frame = Some(parse_sof(seg)?),
            0xc2 | 0xc6 | 0xca | 0xce => return Err(CodecError::Progressive),
            0xc3 | 0xc7 | 0xcb | 0xcf => {
                return Err(CodecError::Unsupported("lossless JPEG".into()))
            }
            0xc5 => return Err(CodecError::Unsupported("hierarchical JPEG".into())),
            0xc9 | 0xcd | 0xcc => return Err(CodecError::Arithmetic),
            0xdb => parse_dqt(seg, &mut qts)?,
            0xc4 => parse_dht(seg, &mut dc_tables, &mut ac_tables)?,
            0xdd => {
                if seg.len() < 2 {
                    return Err(CodecError::Truncated);
                }
                restart_interval = u16::from_be_bytes([seg[0], seg[1]]) as usize;
            }
            0xda => {
                let f = frame.as_mut().ok_or_else(|| CodecError::Malformed("scan before frame header".into()))?;
                pos = decode_scan(data, pos + len, seg, f, &qts, &dc_tables, &ac_tables, restart_interval)?;
                continue;
            }
            _ => {} // APPn, COM, DNL and friends
        }
        pos += len;
    }
    let frame = frame.ok_or_else(|| CodecError::Malformed("no frame header".into()))?;
    Ok(to_rgb(&frame))
}

fn parse_sof(seg: &[u8]) -> Result<Frame, CodecError> {
    if seg.len() < 6 {
        return Err(CodecError::Truncated);
    }
    if seg[0] != 8 {
        return Err(CodecError::Unsupported(format!("{}-bit sample precision", seg[0])));
    }
    let height = u16::from_be_bytes([seg[1], seg[2]]) as usize;
    let width = u16::from_be_bytes([seg[3], seg[4]]) as usize;
    let n = seg[5] as usize;
    if width == 0 || height == 0 {
        return Err(CodecError::Unsupported("zero or DNL-deferred dimensions".into()));
    }
    if n != 1 && n != 3 {
        return Err(CodecError::Unsupported(format!("{n} colour components")));
    }
    if seg.len() < 6 + 3 * n {
        return Err(CodecError::Truncated);
    }
    let mut components = Vec::with_capacity(n);
    for c in 0..n {
        let b = &seg[6 + 3 * c..9 + 3 * c];
        let (h, v) = ((b[1] >> 4) as usize, (b[1] & 15) as usize);
        if !(1..=4).contains(&h) || !(1..=4).contains(&v) || b[2] > 3 {
            return Err(CodecError::Malformed("bad component parameters".into()));
        }
        components.push(Component { id: b[0], h, v, tq: b[2] as usize, plane: Vec::new(), stride: 0, rows: 0 });
    }
    let hmax = components.iter().map(|c| c.h).max().unwrap_or(1);
    let vmax = components.iter().map(|c| c.v).max().unwrap_or(1);
    let mcux = width.div_ceil(8 * hmax);
    let mcuy = height.div_ceil(8 * vmax);
    for c in components.iter_mut() {
        c.stride = mcux * c.h * 8;
        c.rows = mcuy * c.v * 8;
        c.plane = vec![0; c.stride * c.rows];
    }
    Ok(Frame { width, height, components, hmax, vmax, mcux, mcuy })
}

fn parse_dqt(mut seg: &[u8], qts: &mut [Option<[u16; 64]>; 4]) -> Result<(), CodecError> {
    while !seg.is_empty() {
        let (pq, tq) = (seg[0] >> 4, (seg[0] & 15) as usize);
        if tq > 3 || pq > 1 {
            return Err(CodecError::Malformed("bad DQT header".into()));
        }
        let size = if pq == 0 { 64 } else { 128 };
        let body = seg.get(1..1 + size).ok_or(CodecError::Truncated)?;
        let mut table = [0u16; 64];
        for (k, &n) in ZIGZAG.iter().enumerate() {
            table[n] = if pq == 0 { body[k] as u16 } else { u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) };
        }
        qts[tq] = Some(table);
        seg = &seg[1 + size..];
    }
    Ok(())
}

fn parse_dht(
    mut seg: &[u8],
    dc: &mut [Option<HuffmanDecodeTable>; 4],
    ac: &mut [Option<HuffmanDecodeTable>; 4],
) -> Result<(), CodecError> {
    while !seg.is_empty() {
        if seg.len() < 17 {
            return Err(CodecError::Truncated);
        }
        let (class, id) = (seg[0] >> 4, (seg[0] & 15) as usize);
        if class > 1 || id > 3 {
            return Err(CodecError::Malformed("bad DHT header".into()));
        }
        let mut bits = [0u8; 16];
        bits.copy_from_slice(&seg[1..17]);
        let total: usize = bits.iter().map(|&b| b as usize).sum();
        let vals = seg.get(17..17 + total).ok_or(CodecError::Truncated)?.to_vec();
        let table = HuffmanDecodeTable::new(&bits, vals);
        if class == 0 {
            dc[id] = Some(table);
        } else {
            ac[id] = Some(table);
        }
        seg = &seg[17 + total..];
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn decode_scan(
    data: &[u8],
    start: usize,
    header: &[u8],
    frame: &mut Frame,
    qts: &[Option<[u16; 64]>; 4],
    dc_tables: &[Option<HuffmanDecodeTable>; 4],
    ac_tables: &[Option<HuffmanDecodeTable>; 4],
    restart_interval: usize,
) -> Result<usize, CodecError> {
    let ns = *header.first().ok_or(CodecError::Truncated)? as usize;
    if header.len() < 1 + 2 * ns + 3 || ns == 0 {
        return Err(CodecError::Truncated);
    }
    let (ss, se, ahal) = (header[1 + 2 * ns], header[2 + 2 * ns], header[3 + 2 * ns]);
    if ss != 0 || se != 63 || ahal != 0 {
        return Err(CodecError::Progressive);
    }
    struct ScanComp {
        index: usize,
        dc: HuffmanDecodeTable,
        ac: HuffmanDecodeTable,
        qt: [u16; 64],
    }
    let mut comps = Vec::with_capacity(ns);
    for s in 0..ns {
        let (cid, tables) = (header[1 + 2 * s], header[2 + 2 * s]);
        let index = frame
            .components
            .iter()
            .position(|c| c.id == cid)
            .ok_or_else(|| CodecError::Malformed(format!("scan references unknown component {cid}")))?;
        let missing = || CodecError::Malformed("scan references undefined table".into());
        let dc = dc_tables[(tables >> 4) as usize & 3].clone().ok_or_else(missing)?;
        let ac = ac_tables[(tables & 15) as usize & 3].clone().ok_or_else(missing)?;
        let qt = qts[frame.components[index].tq].ok_or_else(missing)?;
        comps.push(ScanComp { index, dc, ac, qt });
    }

    // A single-component scan is non-interleaved: one block per MCU over
    // that component's own block grid.
    let (units_x, units_y) = if ns == 1 {
        let c = &frame.components[comps[0].index];
        let cw = (frame.width * c.h).div_ceil(frame.hmax);
        let ch = (frame.height * c.v).div_ceil(frame.vmax);
        (cw.div_ceil(8), ch.div_ceil(8))
    } else {
        (frame.mcux, frame.mcuy)
    };

    let mut reader = BitReader::new(data, start);
    let mut preds = vec![0i32; ns];
    let total_units = units_x * units_y;
    for unit in 0..total_units {
        if restart_interval > 0 && unit > 0 && unit % restart_interval == 0 {
            reader.restart()?;
            preds.iter_mut().for_each(|p| *p = 0);
        }
        let (ux, uy) = (unit % units_x, unit / units_x);
        for (s, sc) in comps.iter().enumerate() {
            let comp = &mut frame.components[sc.index];
            let (bh, bv) = if ns == 1 { (1, 1) } else { (comp.h, comp.v) };
            for by in 0..bv {
                for bx in 0..bh {
                    let mut coeffs = [0.0f64; 64];
                    decode_block(&mut reader, &sc.dc, &sc.ac, &sc.qt, &mut preds[s], &mut coeffs)?;
                    let pixels = inverse_dct(&coeffs);
                    let x0 = (ux * bh + bx) * 8;
                    let y0 = (uy * bv + by) * 8;
                    for r in 0..8 {
                        let row = (y0 + r) * comp.stride + x0;
                        for c in 0..8 {
                            comp.plane[row + c] = quantize_sample(pixels[r * 8 + c] + 128.0);
                        }
                    }
                }
            }
        }
    }
    // Skip to the next marker that is not a restart marker or stuffed byte.
    let mut pos = reader.pos;
    loop {
        match (data.get(pos), data.get(pos + 1)) {
            (Some(0xff), Some(0x00)) | (Some(0xff), Some(0xd0..=0xd7)) => pos += 2,
            (Some(0xff), Some(0xff)) => pos += 1,
            (Some(0xff), Some(_)) => return Ok(pos),
            (Some(_), _) => pos += 1,
            (None, _) => return Err(CodecError::Truncated),
        }
    }
}

fn decode_block(
    reader: &mut BitReader,
    dc: &HuffmanDecodeTable,
    ac: &HuffmanDecodeTable,
    qt: &[u16; 64],
    pred: &mut i32,
    out: &mut [f64; 64],
) -> Result<(), CodecError> {
    let size = reader.decode(dc)?;
    if size > 11 {
        return Err(CodecError::Malformed("DC magnitude category out of range".into()));
    }
    let diff = extend(reader.bits(size)?, size);
    *pred += diff;
    out[0] = (*pred * qt[0] as i32) as f64;
    let mut k = 1;
    while k < 64 {
        let rs = reader.decode(ac)?;
        let (run, size) = ((rs >> 4) as usize, rs & 15);
        if size == 0 {
            if run == 15 {
                k += 16;
                continue;
            }
            break;
        }
        k += run;
        if k > 63 {
            return Err(CodecError::Malformed("AC run past end of block".into()));
        }
        let n = ZIGZAG[k];
        out[n] = (extend(reader.bits(size)?, size) * qt[n] as i32) as f64;
        k += 1;
    }
    Ok(())
}

fn to_rgb(frame: &Frame) -> ImageBuffer {
    let (w, h) = (frame.width, frame.height);
    let sample = |c: &Component, x: usize, y: usize| -> f64 {
        let sx = x * c.h / frame.hmax;
        let sy = y * c.v / frame.vmax;
        c.plane[sy * c.stride + sx] as f64
    };
    if frame.components.len() == 1 {
        let c = &frame.components[0];
        return ImageBuffer::from_fn(w, h, |x, y| {
            let v = sample(c, x, y) as u8;
            [v, v, v]
        });
    }
    let [yc, cb, cr] = [&frame.components[0], &frame.components[1], &frame.components[2]];
    ImageBuffer::from_fn(w, h, |x, y| {
        let yy = sample(yc, x, y);
        let b = sample(cb, x, y) - 128.0;
        let r = sample(cr, x, y) - 128.0;
        [
            quantize_sample(yy + 1.402 * r),
            quantize_sample(yy - 0.344136 * b - 0.714136 * r),
            quantize_sample(yy + 1.772 * b),
        ]
    })
}
