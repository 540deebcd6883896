use super::tables::*;
use super::dct::forward_dct;
use crate::codec::CodecError;
use crate::image::ImageBuffer;

struct HuffmanEncodeTable {
    /// Indexed by symbol value.
    codes: [(u16, u8); 256],
}

impl HuffmanEncodeTable {
    fn new(bits: &[u8; 16], vals: &[u8]) -> Self {
        let mut codes = [(0u16, 0u8); 256];
        for (&v, code) in vals.iter().zip(canonical_codes(bits)) {
            codes[v as usize] = code;
        }
        Self { codes }
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        Self { out, acc: 0, nbits: 0 }
    }

    fn put(&mut self, code: u16, len: u8) {
        debug_assert!(len <= 16);
        self.acc = (self.acc << len) | (code as u32 & ((1u32 << len) - 1));
        self.nbits += len as u32;
        while self.nbits >= 8 {
            let byte = (self.acc >> (self.nbits - 8)) as u8;
            self.out.push(byte);
            if byte == 0xff {
                self.out.push(0x00);
            }
            self.nbits -= 8;
        }
        self.acc &= (1u32 << self.nbits) - 1;
    }

    /// Pad the final partial byte with 1-bits.
    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            let pad = 8 - self.nbits as u8;
            self.put((1u16 << pad) - 1, pad);
        }
        self.out
    }
}

/// Magnitude category and the low bits to append (Annex F.1.2.1).
fn category(v: i32) -> (u8, u16) {
    if v == 0 {
        return (0, 0);
    }
    let size = 32 - v.unsigned_abs().leading_zeros();
    let bits = if v < 0 { (v - 1) as u32 & ((1 << size) - 1) } else { v as u32 };
    (size as u8, bits as u16)
}

fn write_marker_segment(out: &mut Vec<u8>, marker: u8, payload: &[u8]) {
    out.extend_from_slice(&[0xff, marker]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
}

fn dht_payload(class_id: u8, bits: &[u8; 16], vals: &[u8]) -> Vec<u8> {
    let mut p = vec![class_id];
    p.extend_from_slice(bits);
    p.extend_from_slice(vals);
    p
}

/// Baseline sequential JPEG, 4:2:0, Annex K tables scaled to `quality`.
pub fn encode(img: &ImageBuffer, quality: u8) -> Result<Vec<u8>, CodecError> {
    if !(1..=100).contains(&quality) {
        return Err(CodecError::InvalidQuality(quality as i64));
    }
    let (w, h) = img.dims();
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(CodecError::Malformed(format!("{w}x{h} exceeds JPEG dimension limit")));
    }
    let luma_qt = scaled_table(&BASE_LUMA_QT, quality);
    let chroma_qt = scaled_table(&BASE_CHROMA_QT, quality);

    let mut out = Vec::with_capacity(w * h / 2 + 1024);
    out.extend_from_slice(&[0xff, 0xd8]);
    write_marker_segment(&mut out, 0xe0, b"JFIF\0\x01\x01\x00\x00\x01\x00\x01\x00\x00");
    for (id, table) in [(0u8, &luma_qt), (1u8, &chroma_qt)] {
        let mut p = vec![id];
        p.extend(ZIGZAG.iter().map(|&n| table[n] as u8));
        write_marker_segment(&mut out, 0xdb, &p);
    }
    let mut sof = vec![8];
    sof.extend_from_slice(&(h as u16).to_be_bytes());
    sof.extend_from_slice(&(w as u16).to_be_bytes());
    sof.extend_from_slice(&[3, 1, 0x22, 0, 2, 0x11, 1, 3, 0x11, 1]);
    write_marker_segment(&mut out, 0xc0, &sof);
    write_marker_segment(&mut out, 0xc4, &dht_payload(0x00, &DC_LUMA_BITS, &DC_LUMA_VALS));
    write_marker_segment(&mut out, 0xc4, &dht_payload(0x10, &AC_LUMA_BITS, &AC_LUMA_VALS));
    write_marker_segment(&mut out, 0xc4, &dht_payload(0x01, &DC_CHROMA_BITS, &DC_CHROMA_VALS));
    write_marker_segment(&mut out, 0xc4, &dht_payload(0x11, &AC_CHROMA_BITS, &AC_CHROMA_VALS));
    write_marker_segment(&mut out, 0xda, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);

    let tables = [
        (HuffmanEncodeTable::new(&DC_LUMA_BITS, &DC_LUMA_VALS), HuffmanEncodeTable::new(&AC_LUMA_BITS, &AC_LUMA_VALS)),
        (
            HuffmanEncodeTable::new(&DC_CHROMA_BITS, &DC_CHROMA_VALS),
            HuffmanEncodeTable::new(&AC_CHROMA_BITS, &AC_CHROMA_VALS),
        ),
    ];

    // Colour conversion on the edge-replicated, MCU-padded canvas.
    let pw = w.div_ceil(16) * 16;
    let ph = h.div_ceil(16) * 16;
    let mut y_plane = vec![0.0f64; pw * ph];
    let mut cb_full = vec![0.0f64; pw * ph];
    let mut cr_full = vec![0.0f64; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            let [r, g, b] = img.pixel(x.min(w - 1), y.min(h - 1)).map(|v| v as f64);
            let i = y * pw + x;
            y_plane[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb_full[i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            cr_full[i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
    }
    let (cw, ch) = (pw / 2, ph / 2);
    let subsample = |full: &[f64]| -> Vec<f64> {
        let mut s = vec![0.0; cw * ch];
        for y in 0..ch {
            for x in 0..cw {
                let i = 2 * y * pw + 2 * x;
                s[y * cw + x] = (full[i] + full[i + 1] + full[i + pw] + full[i + pw + 1]) * 0.25;
            }
        }
        s
    };
    let cb_plane = subsample(&cb_full);
    let cr_plane = subsample(&cr_full);

    let mut writer = BitWriter::new(out);
    let mut prev_dc = [0i32; 3];
    let mut block = [0.0f64; 64];
    for my in 0..ph / 16 {
        for mx in 0..pw / 16 {
            for (by, bx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                load_block(&y_plane, pw, mx * 16 + bx * 8, my * 16 + by * 8, &mut block);
                encode_block(&mut writer, &block, &luma_qt, &tables[0], &mut prev_dc[0]);
            }
            load_block(&cb_plane, cw, mx * 8, my * 8, &mut block);
            encode_block(&mut writer, &block, &chroma_qt, &tables[1], &mut prev_dc[1]);
            load_block(&cr_plane, cw, mx * 8, my * 8, &mut block);
            encode_block(&mut writer, &block, &chroma_qt, &tables[1], &mut prev_dc[2]);
        }
    }
    let mut out = writer.finish();
    out.extend_from_slice(&[0xff, 0xd9]);
    Ok(out)
}

fn load_block(plane: &[f64], stride: usize, x0: usize, y0: usize, block: &mut [f64; 64]) {
    for r in 0..8 {
        let row = &plane[(y0 + r) * stride + x0..(y0 + r) * stride + x0 + 8];
        for c in 0..8 {
            block[r * 8 + c] = row[c] - 128.0;
        }
    }
}

fn encode_block(
    writer: &mut BitWriter,
    block: &[f64; 64],
    qt: &[u16; 64],
    (dc_table, ac_table): &(HuffmanEncodeTable, HuffmanEncodeTable),
    prev_dc: &mut i32,
) {
    let coeffs = forward_dct(block);
    let mut q = [0i32; 64];
    for (k, &n) in ZIGZAG.iter().enumerate() {
        q[k] = (coeffs[n] / qt[n] as f64).round() as i32;
    }
    let diff = q[0] - *prev_dc;
    *prev_dc = q[0];
    let (size, bits) = category(diff);
    let (code, len) = dc_table.codes[size as usize];
    writer.put(code, len);
    if size > 0 {
        writer.put(bits, size);
    }
    let mut run = 0u8;
    for &v in &q[1..] {
        if v == 0 {
            run += 1;
            continue;
        }
        while run >= 16 {
            let (code, len) = ac_table.codes[0xf0];
            writer.put(code, len);
            run -= 16;
        }
        let (size, bits) = category(v);
        let (code, len) = ac_table.codes[((run << 4) | size) as usize];
        writer.put(code, len);
        writer.put(bits, size);
        run = 0;
    }
    if run > 0 {
        let (code, len) = ac_table.codes[0x00];
        writer.put(code, len);
    }
}
