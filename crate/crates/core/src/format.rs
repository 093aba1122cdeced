//! Line formats: YOLO box and polygon label files, inferred-detection files
//! and MOT-style CSV ground truth.
//!
//! Numbers are written in 6-decimal fixed notation, rounded half-up, and
//! every line is newline-terminated.

use thiserror::Error;

use crate::model::{ModelError, NormBox, PolygonLabel, SeedAnnotation};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: class {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange {
        line: usize,
        class_id: u32,
        num_classes: usize,
    },
}

/// Half-up rounding to 6 decimals.
pub fn fixed6(v: f64) -> String {
    let scaled = (v * 1e6).round() as i64;
    let sign = if scaled < 0 { "-" } else { "" };
    let a = scaled.unsigned_abs();
    format!("{sign}{}.{:06}", a / 1_000_000, a % 1_000_000)
}

/// `class cx cy w h`, no trailing newline.
pub fn format_box_line(b: &NormBox) -> String {
    format!(
        "{} {} {} {} {}",
        b.class_id,
        fixed6(b.cx),
        fixed6(b.cy),
        fixed6(b.w),
        fixed6(b.h)
    )
}

/// `class x1 y1 x2 y2 ...`, no trailing newline.
pub fn format_polygon_line(p: &PolygonLabel) -> String {
    let mut s = p.class_id.to_string();
    for &(x, y) in &p.vertices {
        s.push(' ');
        s.push_str(&fixed6(x));
        s.push(' ');
        s.push_str(&fixed6(y));
    }
    s
}

/// `class cx cy w h conf`, the box line with a trailing confidence.
pub fn format_detection_line(b: &NormBox, confidence: f64) -> String {
    format!("{} {}", format_box_line(b), fixed6(confidence))
}

pub fn write_box_lines(boxes: &[NormBox]) -> String {
    boxes
        .iter()
        .map(|b| format_box_line(b) + "\n")
        .collect()
}

pub fn write_polygon_lines(polys: &[PolygonLabel]) -> String {
    polys
        .iter()
        .map(|p| format_polygon_line(p) + "\n")
        .collect()
}

fn parse_f64(tok: &str) -> Result<f64, String> {
    let v: f64 = tok
        .parse()
        .map_err(|_| format!("`{tok}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("`{tok}` is not finite"));
    }
    Ok(v)
}

fn parse_class(tok: &str) -> Result<u32, String> {
    tok.parse()
        .map_err(|_| format!("`{tok}` is not a class index"))
}

fn model_msg(e: ModelError) -> String {
    e.to_string()
}

pub fn parse_box_line(line: &str) -> Result<NormBox, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(format!("expected 5 fields `class cx cy w h`, found {}", toks.len()));
    }
    let class_id = parse_class(toks[0])?;
    let v: Vec<f64> = toks[1..]
        .iter()
        .map(|t| parse_f64(t))
        .collect::<Result<_, _>>()?;
    NormBox::new(class_id, v[0], v[1], v[2], v[3]).map_err(model_msg)
}

pub fn parse_detection_line(line: &str) -> Result<(NormBox, f64), String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(format!(
            "expected 6 fields `class cx cy w h conf`, found {}",
            toks.len()
        ));
    }
    let b = parse_box_line(&toks[..5].join(" "))?;
    let conf = parse_f64(toks[5])?;
    if !(0.0..=1.0).contains(&conf) {
        return Err(format!("confidence {conf} outside [0,1]"));
    }
    Ok((b, conf))
}

pub fn parse_polygon_line(line: &str) -> Result<PolygonLabel, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() < 7 || toks.len() % 2 == 0 {
        return Err(format!(
            "expected `class x1 y1 ...` with at least 3 vertices, found {} fields",
            toks.len()
        ));
    }
    let class_id = parse_class(toks[0])?;
    let coords: Vec<f64> = toks[1..]
        .iter()
        .map(|t| parse_f64(t))
        .collect::<Result<_, _>>()?;
    let vertices = coords.chunks(2).map(|c| (c[0], c[1])).collect();
    PolygonLabel::new(class_id, vertices).map_err(model_msg)
}

fn parse_lines<T>(
    text: &str,
    num_classes: Option<usize>,
    parse: impl Fn(&str) -> Result<T, String>,
    class_of: impl Fn(&T) -> u32,
) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let item = parse(raw).map_err(|message| FormatError::Malformed { line, message })?;
        if let Some(n) = num_classes {
            let class_id = class_of(&item);
            if class_id as usize >= n {
                return Err(FormatError::ClassOutOfRange {
                    line,
                    class_id,
                    num_classes: n,
                });
            }
        }
        out.push(item);
    }
    Ok(out)
}

pub fn parse_box_file(text: &str, num_classes: Option<usize>) -> Result<Vec<NormBox>, FormatError> {
    parse_lines(text, num_classes, parse_box_line, |b| b.class_id)
}

pub fn parse_polygon_file(
    text: &str,
    num_classes: Option<usize>,
) -> Result<Vec<PolygonLabel>, FormatError> {
    parse_lines(text, num_classes, parse_polygon_line, |p| p.class_id)
}

pub fn parse_detection_file(
    text: &str,
    num_classes: Option<usize>,
) -> Result<Vec<(NormBox, f64)>, FormatError> {
    parse_lines(text, num_classes, parse_detection_line, |d| d.0.class_id)
}

/// One MOT CSV row: `frame,id,x,y,w,h[,conf,class,vis,...]` with a 1-based
/// frame number and a top-left pixel box.
#[derive(Debug, Clone, PartialEq)]
pub struct MotRow {
    /// 1-based source line.
    pub line: usize,
    pub frame: u32,
    pub id: i64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    /// Columns after the sixth, kept verbatim.
    pub extra: Vec<String>,
}

impl MotRow {
    /// 0-based frame index.
    pub fn frame_index(&self) -> u32 {
        self.frame - 1
    }
}

pub fn parse_mot_csv(text: &str) -> Result<Vec<MotRow>, FormatError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let bad = |message: String| FormatError::Malformed { line, message };
        let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cols.len() < 6 {
            return Err(bad(format!(
                "expected at least 6 columns `frame,id,x,y,w,h`, found {}",
                cols.len()
            )));
        }
        let frame: u32 = cols[0]
            .parse()
            .map_err(|_| bad(format!("`{}` is not a frame number", cols[0])))?;
        if frame == 0 {
            return Err(bad("frame numbers are 1-based".into()));
        }
        let id: i64 = cols[1]
            .parse()
            .or_else(|_| cols[1].parse::<f64>().map(|v| v as i64))
            .map_err(|_| bad(format!("`{}` is not a track id", cols[1])))?;
        let nums: Vec<f64> = cols[2..6]
            .iter()
            .map(|t| parse_f64(t))
            .collect::<Result<_, _>>()
            .map_err(bad)?;
        if nums[2] <= 0.0 || nums[3] <= 0.0 {
            return Err(bad(format!("non-positive box size {}x{}", nums[2], nums[3])));
        }
        rows.push(MotRow {
            line,
            frame,
            id,
            x: nums[0],
            y: nums[1],
            w: nums[2],
            h: nums[3],
            extra: cols[6..].iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(rows)
}

pub const SEED_FILE_VERSION: u32 = 1;

#[derive(serde::Serialize)]
struct SeedFileOut<'a> {
    version: u32,
    #[serde(flatten)]
    seed: &'a SeedAnnotation,
}

#[derive(serde::Deserialize)]
struct SeedFileIn {
    version: u32,
    #[serde(flatten)]
    seed: SeedAnnotation,
}

/// Seed annotation file: the annotation's fields plus a leading `version`.
pub fn write_seed_file(seed: &SeedAnnotation) -> String {
    let mut out = serde_json::to_string_pretty(&SeedFileOut {
        version: SEED_FILE_VERSION,
        seed,
    })
    .expect("seed serializes");
    out.push('\n');
    out
}

/// Parses and validates a seed file.
pub fn read_seed_file(text: &str) -> Result<SeedAnnotation, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    match v.get("version").and_then(|v| v.as_u64()) {
        Some(n) if n == u64::from(SEED_FILE_VERSION) => {}
        other => return Err(format!("seed file version {other:?}, expected {SEED_FILE_VERSION}")),
    }
    let f: SeedFileIn = serde_json::from_value(v).map_err(|e| e.to_string())?;
    debug_assert_eq!(f.version, SEED_FILE_VERSION);
    f.seed.validate().map_err(|e| e.to_string())?;
    Ok(f.seed)
}
