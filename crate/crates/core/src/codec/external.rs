//! Subprocess adapters for codecs implemented by external executables.
//!
//! Hand-off protocol: every call gets its own temporary directory. `encode`
//! writes the raster to `in.<input_ext>`, runs the encode template and reads
//! `out.<encoded_ext>` back as the payload. `decode` writes the payload to
//! `in.<encoded_ext>`, runs the decode template and loads
//! `out.<decoded_ext>` (PNG or PPM). Templates are whitespace-separated argv
//! lists with the placeholders `{input}`, `{output}`, `{q}` (1–100) and
//! `{crf}` (0–51, derived from q for HEVC-style encoders).

use std::path::{Path, PathBuf};
use std::process::Command;

use super::{Codec, CodecError};
use crate::image::{decode_image, save_image, ImageBuffer, ImageFormat};

pub const HEVC_ENCODER_ENV: &str = "KUCHEN_HEVC_ENCODER";
pub const WEBP_ENCODER_ENV: &str = "KUCHEN_WEBP_ENCODER";

#[derive(Debug, Clone)]
pub struct ExternalCodec {
    name: String,
    encode_template: Vec<String>,
    decode_template: Vec<String>,
    input_format: ImageFormat,
    encoded_ext: String,
    decoded_format: ImageFormat,
}

/// Map a 1–100 quality to the 0–51 CRF scale (100 → 0, 1 → 51).
pub fn quality_to_crf(q: u8) -> u8 {
    let q = q.clamp(1, 100) as u32;
    ((51 * (100 - q) + 49) / 99) as u8
}

/// Substitute placeholders in every argument.
pub fn render_template(template: &[String], input: &Path, output: &Path, quality: u8) -> Vec<String> {
    let input = input.display().to_string();
    let output = output.display().to_string();
    let q = quality.to_string();
    let crf = quality_to_crf(quality).to_string();
    template
        .iter()
        .map(|arg| {
            arg.replace("{input}", &input)
                .replace("{output}", &output)
                .replace("{q}", &q)
                .replace("{crf}", &crf)
        })
        .collect()
}

fn split_template(t: &str) -> Vec<String> {
    t.split_whitespace().map(str::to_string).collect()
}

/// Resolve a program name against `PATH` (or check it directly when it
/// contains a path separator).
pub fn resolve_program(program: &str) -> Option<PathBuf> {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths).map(|dir| dir.join(program)).find(|candidate| candidate.is_file())
    })
}

impl ExternalCodec {
    pub fn new(
        name: &str,
        encode_cmd: &str,
        decode_cmd: &str,
        encoded_ext: &str,
    ) -> Self {
        Self {
            name: name.to_string(),
            encode_template: split_template(encode_cmd),
            decode_template: split_template(decode_cmd),
            input_format: ImageFormat::Png,
            encoded_ext: encoded_ext.trim_start_matches('.').to_string(),
            decoded_format: ImageFormat::Png,
        }
    }

    pub fn with_formats(mut self, input: ImageFormat, decoded: ImageFormat) -> Self {
        self.input_format = input;
        self.decoded_format = decoded;
        self
    }

    /// `cwebp`/`dwebp`. The encoder path comes from `KUCHEN_WEBP_ENCODER`
    /// (default `cwebp`); `dwebp` is looked up next to it.
    pub fn webp_from_env() -> Self {
        let encoder = std::env::var(WEBP_ENCODER_ENV).unwrap_or_else(|_| "cwebp".into());
        let decoder = sibling(&encoder, "cwebp", "dwebp");
        Self::new(
            "webp",
            &format!("{encoder} -quiet -q {{q}} {{input}} -o {{output}}"),
            &format!("{decoder} -quiet {{input}} -ppm -o {{output}}"),
            "webp",
        )
        .with_formats(ImageFormat::Png, ImageFormat::Ppm)
    }

    /// HEVC through an ffmpeg build with libx265. The binary comes from
    /// `KUCHEN_HEVC_ENCODER` (default `ffmpeg`) and is also used to decode.
    pub fn hevc_from_env() -> Self {
        let ffmpeg = std::env::var(HEVC_ENCODER_ENV).unwrap_or_else(|_| "ffmpeg".into());
        Self::new(
            "hevc",
            &format!(
                "{ffmpeg} -loglevel error -y -i {{input}} -c:v libx265 -x265-params log-level=error \
                 -pix_fmt yuv420p -crf {{crf}} -frames:v 1 -f hevc {{output}}"
            ),
            &format!("{ffmpeg} -loglevel error -y -i {{input}} -frames:v 1 {{output}}"),
            "hevc",
        )
    }

    pub fn is_available(&self) -> bool {
        self.encode_template.first().and_then(|p| resolve_program(p)).is_some()
            && self.decode_template.first().and_then(|p| resolve_program(p)).is_some()
    }

    fn run(&self, argv: &[String]) -> Result<(), CodecError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| CodecError::Unavailable(format!("{}: empty command template", self.name)))?;
        if resolve_program(program).is_none() {
            return Err(CodecError::Unavailable(format!("{}: `{program}` not found", self.name)));
        }
        let output = Command::new(program).args(args).output().map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                CodecError::Unavailable(format!("{}: {e}", self.name))
            }
            _ => CodecError::Io(e),
        })?;
        if !output.status.success() {
            return Err(CodecError::CommandFailed {
                command: argv.join(" "),
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        Ok(())
    }
}

fn sibling(encoder: &str, from: &str, to: &str) -> String {
    let p = Path::new(encoder);
    match p.file_name().and_then(|f| f.to_str()) {
        Some(f) if f.contains(from) => {
            p.with_file_name(f.replace(from, to)).display().to_string()
        }
        _ => to.to_string(),
    }
}

fn read_output(path: &Path) -> Result<Vec<u8>, CodecError> {
    std::fs::read(path).map_err(|_| CodecError::MissingOutput(path.display().to_string()))
}

impl Codec for ExternalCodec {
    fn name(&self) -> &str {
        &self.name
    }

    fn encode(&self, img: &ImageBuffer, quality: u8) -> Result<Vec<u8>, CodecError> {
        if !(1..=100).contains(&quality) {
            return Err(CodecError::InvalidQuality(quality as i64));
        }
        let dir = tempfile::tempdir()?;
        let input = dir.path().join(format!("in.{}", self.input_format.extension()));
        let output = dir.path().join(format!("out.{}", self.encoded_ext));
        save_image(img, &input, self.input_format)?;
        self.run(&render_template(&self.encode_template, &input, &output, quality))?;
        read_output(&output)
    }

    fn decode(&self, bytes: &[u8]) -> Result<ImageBuffer, CodecError> {
        let dir = tempfile::tempdir()?;
        let input = dir.path().join(format!("in.{}", self.encoded_ext));
        let output = dir.path().join(format!("out.{}", self.decoded_format.extension()));
        std::fs::write(&input, bytes)?;
        self.run(&render_template(&self.decode_template, &input, &output, 100))?;
        Ok(decode_image(&read_output(&output)?)?)
    }
}
