//! Dataset model and JSONL persistence.
//!
//! A dataset file is JSON-lines: the first line is a [`DatasetHeader`]
//! fixing the descriptor dimensions and the mode, every following line is
//! one [`VideoRecord`]. Labels are strings on disk and are interned to
//! dense ids in [`LabelSpaces`] at load time; videos are ordered by
//! `video_id` so the interning is deterministic.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name reserved for the parsing background label, which always interns to
/// id 0. Input files may not use it for annotations.
pub const BACKGROUND_LABEL: &str = "__background__";

pub const SIMPLEX_TOL: f64 = 1e-6;
const BBOX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid json: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: field {field}: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("line {line}: field {field}: dimension {found} does not match header {expected}")]
    Dimension { line: usize, field: String, expected: usize, found: usize },
    #[error("dataset mode is {found:?} but {expected:?} was requested")]
    ModeMismatch { expected: DatasetMode, found: DatasetMode },
    #[error("cannot aggregate an empty member list")]
    EmptyAggregate,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    Recognition,
    Parsing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    /// Appearance histogram dimension.
    pub d_a: usize,
    /// Bag-of-words dimension of `local_bow`.
    pub d_b: usize,
    /// Shape masks are k-by-k binary grids.
    pub k: usize,
    pub mode: DatasetMode,
}

/// Axis-aligned box in normalized image coordinates, serialized as
/// `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalDescriptor {
    pub frame_index: usize,
    pub bbox: BBox,
    /// Probability histogram over appearance codewords; sums to 1.
    pub appearance_hist: Vec<f64>,
    /// Row-major k*k binary occupancy mask.
    pub shape_feature: Vec<u8>,
    /// Nonnegative motion-codeword counts.
    pub local_bow: Vec<f64>,
    pub objectness_score: f64,
    pub motion_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseInterval {
    pub label: String,
    pub start_frame: usize,
    /// Inclusive end frame.
    pub end_frame: usize,
    /// Composition depth of the annotation; base instances are level 1.
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_annotations: Option<Vec<ParseInterval>>,
    pub proposals: Vec<ProposalDescriptor>,
}

/// Interned label tables. Action ids and parse-label ids are dense and
/// assigned in sorted string order; parse label 0 is always the reserved
/// background label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSpaces {
    pub actions: Vec<String>,
    pub parse_labels: Vec<String>,
}

impl LabelSpaces {
    pub fn from_videos(videos: &[VideoRecord]) -> Self {
        let mut actions: BTreeSet<String> = BTreeSet::new();
        let mut parse: BTreeSet<String> = BTreeSet::new();
        for v in videos {
            if let Some(a) = &v.action_label {
                actions.insert(a.clone());
            }
            if let Some(ann) = &v.parse_annotations {
                for p in ann {
                    parse.insert(p.label.clone());
                }
            }
        }
        let mut parse_labels = vec![BACKGROUND_LABEL.to_string()];
        parse_labels.extend(parse);
        LabelSpaces { actions: actions.into_iter().collect(), parse_labels }
    }

    pub fn action_id(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }

    pub fn parse_label_id(&self, name: &str) -> Option<usize> {
        self.parse_labels.iter().position(|l| l == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub videos: Vec<VideoRecord>,
    pub labels: LabelSpaces,
}

/// Loads and validates a dataset, checking the header mode against
/// `expected_mode`. Videos come back sorted by `video_id`.
pub fn load_dataset(path: impl AsRef<Path>, expected_mode: DatasetMode) -> Result<Dataset, DataError> {
    let ds = load_dataset_any(path)?;
    if ds.header.mode != expected_mode {
        return Err(DataError::ModeMismatch { expected: expected_mode, found: ds.header.mode });
    }
    Ok(ds)
}

/// Loads and validates a dataset in whatever mode its header declares.
pub fn load_dataset_any(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Invalid("empty file: missing header line".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Json { line: 1, message: e.to_string() })?;
    validate_header(&header)?;

    let mut videos = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let video: VideoRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Json { line: line_no, message: e.to_string() })?;
        validate_video(&video, &header, line_no)?;
        videos.push(video);
    }
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    for w in videos.windows(2) {
        if w[0].video_id == w[1].video_id {
            return Err(DataError::Invalid(format!("duplicate video_id {:?}", w[0].video_id)));
        }
    }
    let labels = LabelSpaces::from_videos(&videos);
    Ok(Dataset { header, videos, labels })
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &dataset.header)
        .map_err(|e| DataError::Invalid(format!("serialize header: {e}")))?;
    w.write_all(b"\n")?;
    for v in &dataset.videos {
        serde_json::to_writer(&mut w, v)
            .map_err(|e| DataError::Invalid(format!("serialize video {}: {e}", v.video_id)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn validate_header(h: &DatasetHeader) -> Result<(), DataError> {
    for (name, v) in [("d_a", h.d_a), ("d_b", h.d_b), ("k", h.k)] {
        if v == 0 {
            return Err(DataError::Schema {
                line: 1,
                field: name.into(),
                message: "must be positive".into(),
            });
        }
    }
    Ok(())
}

fn validate_video(v: &VideoRecord, h: &DatasetHeader, line: usize) -> Result<(), DataError> {
    let schema = |field: &str, message: String| DataError::Schema {
        line,
        field: field.into(),
        message,
    };
    if v.video_id.is_empty() {
        return Err(schema("video_id", "must be non-empty".into()));
    }
    if v.num_frames == 0 {
        return Err(schema("num_frames", "must be positive".into()));
    }
    for (pi, p) in v.proposals.iter().enumerate() {
        let field = |name: &str| format!("proposals[{pi}].{name}");
        if p.frame_index >= v.num_frames {
            return Err(schema(
                &field("frame_index"),
                format!("{} is outside the {} frames", p.frame_index, v.num_frames),
            ));
        }
        let b = &p.bbox;
        let in_unit = |v: f64| (-BBOX_TOL..=1.0 + BBOX_TOL).contains(&v);
        if !(in_unit(b.x) && in_unit(b.y) && in_unit(b.w) && in_unit(b.h))
            || b.x + b.w > 1.0 + BBOX_TOL
            || b.y + b.h > 1.0 + BBOX_TOL
        {
            return Err(schema(
                &field("bbox"),
                format!("[{}, {}, {}, {}] is not inside the unit square", b.x, b.y, b.w, b.h),
            ));
        }
        if p.appearance_hist.len() != h.d_a {
            return Err(DataError::Dimension {
                line,
                field: field("appearance_hist"),
                expected: h.d_a,
                found: p.appearance_hist.len(),
            });
        }
        let mut sum = 0.0;
        for &x in &p.appearance_hist {
            if !x.is_finite() || x < 0.0 {
                return Err(schema(&field("appearance_hist"), format!("entry {x} is invalid")));
            }
            sum += x;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(schema(&field("appearance_hist"), format!("sums to {sum}, expected 1")));
        }
        if p.shape_feature.len() != h.k * h.k {
            return Err(DataError::Dimension {
                line,
                field: field("shape_feature"),
                expected: h.k * h.k,
                found: p.shape_feature.len(),
            });
        }
        if let Some(bad) = p.shape_feature.iter().find(|&&c| c > 1) {
            return Err(schema(&field("shape_feature"), format!("cell value {bad} is not 0/1")));
        }
        if p.local_bow.len() != h.d_b {
            return Err(DataError::Dimension {
                line,
                field: field("local_bow"),
                expected: h.d_b,
                found: p.local_bow.len(),
            });
        }
        if let Some(bad) = p.local_bow.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(schema(&field("local_bow"), format!("entry {bad} is invalid")));
        }
        for (name, s) in [("objectness_score", p.objectness_score), ("motion_score", p.motion_score)] {
            if !s.is_finite() {
                return Err(schema(&field(name), format!("{s} is not finite")));
            }
        }
    }
    if let Some(ann) = &v.parse_annotations {
        for (ai, a) in ann.iter().enumerate() {
            let field = |name: &str| format!("parse_annotations[{ai}].{name}");
            if a.label.is_empty() {
                return Err(schema(&field("label"), "must be non-empty".into()));
            }
            if a.label == BACKGROUND_LABEL {
                return Err(schema(&field("label"), format!("{BACKGROUND_LABEL} is reserved")));
            }
            if a.start_frame > a.end_frame || a.end_frame >= v.num_frames {
                return Err(schema(
                    &field("start_frame"),
                    format!(
                        "interval ({}, {}) is not within the {} frames",
                        a.start_frame, a.end_frame, v.num_frames
                    ),
                ));
            }
            if a.level == 0 {
                return Err(schema(&field("level"), "must be at least 1".into()));
            }
        }
    }
    Ok(())
}

/// L1-normalized sum of the members' bag-of-words vectors. An all-zero sum
/// falls back to the uniform distribution with a warning.
pub fn aggregate_bow<'a>(
    members: impl IntoIterator<Item = &'a ProposalDescriptor>,
) -> Result<Vec<f64>, DataError> {
    let mut iter = members.into_iter();
    let first = iter.next().ok_or(DataError::EmptyAggregate)?;
    let mut sum = first.local_bow.clone();
    for p in iter {
        if p.local_bow.len() != sum.len() {
            return Err(DataError::Dimension {
                line: 0,
                field: "local_bow".into(),
                expected: sum.len(),
                found: p.local_bow.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(&p.local_bow) {
            *s += v;
        }
    }
    normalize_bow(&mut sum);
    Ok(sum)
}

/// L1-normalizes in place, with the same uniform fallback as
/// [`aggregate_bow`] for an all-zero vector.
pub fn normalize_bow(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        for x in v.iter_mut() {
            *x /= total;
        }
    } else {
        warn!("all-zero bag-of-words vector; falling back to the uniform distribution");
        let u = 1.0 / v.len() as f64;
        for x in v.iter_mut() {
            *x = u;
        }
    }
}
