//! Evaluation harness: size/quality summary tables per codec and
//! preprocessor, and quality-factor sweeps (rate/quality curves).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{compress, compression_ratio, Codec, CodecError};
use crate::filters::SharedOperator;
use crate::image::ImageBuffer;
use crate::metrics::{MetricMode, QualityMetric};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("quality factor list is empty")]
    NoQualityFactors,
    #[error("baseline for codec `{codec}` failed: {reason}")]
    Baseline { codec: String, reason: String },
    #[error("unknown export format `{0}`")]
    UnknownFormat(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Name of the unpreprocessed baseline row.
pub const ORIGINAL: &str = "Original";

/// A named preprocessing step; `None` is the baseline.
#[derive(Clone)]
pub struct Preprocessor {
    pub name: String,
    pub op: Option<SharedOperator>,
}

impl Preprocessor {
    pub fn original() -> Self {
        Self { name: ORIGINAL.into(), op: None }
    }

    pub fn new(op: SharedOperator) -> Self {
        Self { name: op.id(), op: Some(op) }
    }

    pub fn named(name: &str, op: SharedOperator) -> Self {
        Self { name: name.into(), op: Some(op) }
    }

    fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, String> {
        match &self.op {
            None => Ok(img.clone()),
            Some(op) => op.apply(img).map_err(|e| e.to_string()),
        }
    }
}

/// One summary row. CSV columns are the field names in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub codec: String,
    pub preprocessor: String,
    pub total_bytes: u64,
    /// Percent saved vs the codec's Original row.
    pub compression_ratio_pct: Option<f64>,
    pub mean_quality: Option<f64>,
    pub image_count: usize,
    /// `ok`, `skipped: …` or `failed: …`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub qf: u8,
    pub mean_bpp: f64,
    pub mean_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub preprocessor: String,
    /// Sorted by `mean_bpp`.
    pub points: Vec<RDPoint>,
    pub failures: Vec<String>,
}

struct Measurement {
    bytes: u64,
    bpp: f64,
    quality: f64,
}

enum Failure {
    Unavailable(String),
    Other(String),
}

/// Encode the preprocessed `input` and score the decoded result
/// (full-reference metrics compare against the unprocessed `original`).
fn measure(
    original: &ImageBuffer,
    input: &ImageBuffer,
    codec: &dyn Codec,
    qf: u8,
    metric: &dyn QualityMetric,
) -> Result<Measurement, Failure> {
    let codec_err = |e: CodecError| if e.is_unavailable() { Failure::Unavailable(e.to_string()) } else { Failure::Other(e.to_string()) };
    let artifact = compress(codec, input, qf).map_err(codec_err)?;
    let decoded = codec.decode(&artifact.payload).map_err(codec_err)?;
    let reference = (metric.mode() == MetricMode::FullReference).then_some(original);
    let quality = metric.score(&decoded, reference).map_err(|e| Failure::Other(e.to_string()))?;
    Ok(Measurement { bytes: artifact.payload.len() as u64, bpp: artifact.bpp, quality })
}

/// Run every image through one (preprocessor, codec, qf) cell, in parallel,
/// keeping results in image order.
fn run_cell(images: &[ImageBuffer], pre: &Preprocessor, codec: &dyn Codec, qf: u8, metric: &dyn QualityMetric) -> Vec<Result<Measurement, Failure>> {
    images
        .par_iter()
        .map(|img| {
            let input = pre.apply(img).map_err(Failure::Other)?;
            measure(img, &input, codec, qf, metric)
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Summary table: per codec an Original row, then one row per
/// preprocessor with its size saving relative to that Original row.
/// Codecs that are not installed yield a single `skipped` row.
pub fn summarize(
    images: &[ImageBuffer],
    preprocessors: &[Preprocessor],
    codecs: &[Arc<dyn Codec>],
    qf: u8,
    metric: &dyn QualityMetric,
) -> Result<Vec<EvalRow>, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut rows = Vec::new();
    for codec in codecs {
        let base = run_cell(images, &Preprocessor::original(), codec.as_ref(), qf, metric);
        if let Some(Err(Failure::Unavailable(reason))) = base.iter().find(|r| r.is_err()) {
            log::warn!("skipping codec {}: {reason}", codec.name());
            rows.push(EvalRow {
                codec: codec.name().into(),
                preprocessor: ORIGINAL.into(),
                total_bytes: 0,
                compression_ratio_pct: None,
                mean_quality: None,
                image_count: 0,
                status: format!("skipped: {reason}"),
            });
            continue;
        }
        let base: Vec<Measurement> = base
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(|f| EvalError::Baseline {
                codec: codec.name().into(),
                reason: match f {
                    Failure::Unavailable(r) | Failure::Other(r) => r,
                },
            })?;
        let base_total: u64 = base.iter().map(|m| m.bytes).sum();
        rows.push(EvalRow {
            codec: codec.name().into(),
            preprocessor: ORIGINAL.into(),
            total_bytes: base_total,
            compression_ratio_pct: Some(0.0),
            mean_quality: Some(mean(base.iter().map(|m| m.quality))),
            image_count: base.len(),
            status: "ok".into(),
        });
        for pre in preprocessors.iter().filter(|p| p.op.is_some()) {
            let cell = run_cell(images, pre, codec.as_ref(), qf, metric);
            let row = match cell.into_iter().collect::<Result<Vec<_>, _>>() {
                Ok(ms) => {
                    let total: u64 = ms.iter().map(|m| m.bytes).sum();
                    EvalRow {
                        codec: codec.name().into(),
                        preprocessor: pre.name.clone(),
                        total_bytes: total,
                        compression_ratio_pct: compression_ratio(base_total as f64, total as f64).ok(),
                        mean_quality: Some(mean(ms.iter().map(|m| m.quality))),
                        image_count: ms.len(),
                        status: "ok".into(),
                    }
                }
                Err(Failure::Unavailable(r) | Failure::Other(r)) => EvalRow {
                    codec: codec.name().into(),
                    preprocessor: pre.name.clone(),
                    total_bytes: 0,
                    compression_ratio_pct: None,
                    mean_quality: None,
                    image_count: 0,
                    status: format!("failed: {r}"),
                },
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Default sweep grid: 10, 20, …, 90, 95.
pub fn default_qf_grid() -> Vec<u8> {
    (1..=9).map(|k| 10 * k).chain([95]).collect()
}

/// One curve per preprocessor (the baseline included when listed), one
/// point per quality factor. A failing point is recorded and skipped.
pub fn sweep_qf(
    images: &[ImageBuffer],
    preprocessors: &[Preprocessor],
    codec: &dyn Codec,
    qfs: &[u8],
    metric: &dyn QualityMetric,
) -> Result<Vec<Curve>, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if qfs.is_empty() {
        return Err(EvalError::NoQualityFactors);
    }
    let mut curves = Vec::new();
    for pre in preprocessors {
        // preprocessing does not depend on qf, so do it once
        let inputs: Vec<Result<ImageBuffer, String>> = images.par_iter().map(|img| pre.apply(img)).collect();
        let mut curve = Curve { preprocessor: pre.name.clone(), points: Vec::new(), failures: Vec::new() };
        for &qf in qfs {
            let results: Vec<Result<Measurement, Failure>> = images
                .par_iter()
                .zip(&inputs)
                .map(|(img, input)| {
                    let input = input.as_ref().map_err(|e| Failure::Other(e.clone()))?;
                    measure(img, input, codec, qf, metric)
                })
                .collect();
            match results.into_iter().collect::<Result<Vec<_>, _>>() {
                Ok(ms) => curve.points.push(RDPoint {
                    qf,
                    mean_bpp: mean(ms.iter().map(|m| m.bpp)),
                    mean_quality: mean(ms.iter().map(|m| m.quality)),
                }),
                Err(Failure::Unavailable(r) | Failure::Other(r)) => curve.failures.push(format!("qf {qf}: {r}")),
            }
        }
        curve.points.sort_by(|a, b| a.mean_bpp.total_cmp(&b.mean_bpp).then(a.qf.cmp(&b.qf)));
        curves.push(curve);
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ExportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            other => Err(EvalError::UnknownFormat(other.into())),
        }
    }
}

impl ExportFormat {
    pub fn from_path(path: &Path) -> Result<Self, EvalError> {
        path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase().parse()
    }
}

/// CSV header for summary tables.
pub const TABLE_CSV_HEADER: &str = "codec,preprocessor,total_bytes,compression_ratio_pct,mean_quality,image_count,status";
/// CSV header for sweep curves.
pub const CURVE_CSV_HEADER: &str = "preprocessor,qf,mean_bpp,mean_quality";

fn write_csv<T: Serialize>(path: &Path, header: &str, rows: impl Iterator<Item = T>) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table_csv(path: &Path) -> Result<Vec<EvalRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveCsvRow {
    pub preprocessor: String,
    pub qf: u8,
    pub mean_bpp: f64,
    pub mean_quality: f64,
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveCsvRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn export_table(rows: &[EvalRow], path: &Path, format: ExportFormat) -> Result<(), EvalError> {
    match format {
        ExportFormat::Csv => write_csv(path, TABLE_CSV_HEADER, rows.iter()),
        ExportFormat::Json => Ok(std::fs::write(path, serde_json::to_string_pretty(rows)? + "\n")?),
        ExportFormat::Svg => Ok(std::fs::write(path, table_svg(rows))?),
    }
}

pub fn export_curves(curves: &[Curve], path: &Path, format: ExportFormat) -> Result<(), EvalError> {
    match format {
        ExportFormat::Csv => write_csv(
            path,
            CURVE_CSV_HEADER,
            curves.iter().flat_map(|c| {
                c.points.iter().map(|p| CurveCsvRow { preprocessor: c.preprocessor.clone(), qf: p.qf, mean_bpp: p.mean_bpp, mean_quality: p.mean_quality })
            }),
        ),
        ExportFormat::Json => Ok(std::fs::write(path, serde_json::to_string_pretty(curves)? + "\n")?),
        ExportFormat::Svg => Ok(std::fs::write(path, curves_svg(curves))?),
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Quality vs bpp line chart with one polyline per curve and a legend.
pub fn curves_svg(curves: &[Curve]) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let pts = curves.iter().flat_map(|c| &c.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.mean_bpp);
        x1 = x1.max(p.mean_bpp);
        y0 = y0.min(p.mean_quality);
        y1 = y1.max(p.mean_quality);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bpp</text>"#, w / 2.0, h - 16.0).unwrap();
    writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">quality</text>"#, h / 2.0, h / 2.0).unwrap();
    writeln!(s, r#"<text x="{m}" y="{}" text-anchor="middle">{x0:.3}</text>"#, h - m + 16.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, w - m, h - m + 16.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.2}</text>"#, m - 4.0, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{m}" text-anchor="end">{y1:.2}</text>"#, m - 4.0).unwrap();
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.mean_bpp), sy(p.mean_quality))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#, coords.join(" "), escape(&c.preprocessor)).unwrap();
        let ly = m + 18.0 * i as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - m - 150.0, w - m - 130.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - m - 124.0, ly + 4.0, escape(&c.preprocessor)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars of the compression ratio per (codec, preprocessor).
pub fn table_svg(rows: &[EvalRow]) -> String {
    let (w, bar_h, m) = (640.0, 20.0, 16.0);
    let h = m * 2.0 + bar_h * rows.len().max(1) as f64;
    let max = rows.iter().filter_map(|r| r.compression_ratio_pct).map(f64::abs).fold(1.0, f64::max);
    let mid = 320.0;
    let scale = (w - mid - m) / max;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let y = m + bar_h * i as f64;
        let label = format!("{} / {}", r.codec, r.preprocessor);
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, mid - 8.0, y + 14.0, escape(&label)).unwrap();
        match r.compression_ratio_pct {
            Some(v) => {
                let len = v.abs() * scale;
                let x = if v >= 0.0 { mid } else { mid - len };
                writeln!(s, r#"<rect x="{x:.2}" y="{}" width="{len:.2}" height="{}" fill="{}"/>"#, y + 3.0, bar_h - 6.0, PALETTE[0]).unwrap();
                writeln!(s, r#"<text x="{:.2}" y="{}">{v:.2}%</text>"#, mid + len.max(0.0) + 4.0, y + 14.0).unwrap();
            }
            None => writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, mid + 4.0, y + 14.0, escape(&r.status)).unwrap(),
        }
    }
    s.push_str("</svg>\n");
    s
}
