//! Shared plumbing for the subcommands: error-to-exit-code mapping, config
//! files with flag override, run manifests, and the prediction/detection
//! file formats that connect the pipeline stages.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mael::data::Dataset;
use mael::eval::TruthInterval;
use mael::hierarchy::SegmentTree;

/// Failures that should end the process with exit code 1 (bad input or
/// usage) or 2 (a bug or broken environment).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Library errors all report malformed inputs, files, or configuration,
/// so they map to validation failures.
macro_rules! validation_from {
    ($($ty:ty),+ $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::Validation(e.to_string())
            }
        })+
    };
}

validation_from!(
    mael::data::DataError,
    mael::discovery::DiscoveryError,
    mael::eval::EvalError,
    mael::hierarchy::HierarchyError,
    mael::model::ModelError,
    mael::numerics::NumError,
    mael::synth::SynthError,
    mael::training::TrainError,
);

pub fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub fn internal(msg: impl Into<String>) -> CliError {
    CliError::Internal(msg.into())
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

/// Key/value configuration loaded from `--config`. Keys use the long flag
/// names without the leading dashes; values given as command-line flags
/// take precedence. Every key must be consumed by the subcommand that
/// runs, so typos and misplaced keys fail loudly.
pub struct Cfg {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl Cfg {
    pub fn empty() -> Cfg {
        Cfg { entries: BTreeMap::new(), used: RefCell::new(BTreeSet::new()) }
    }

    /// Loads a JSON object (when the file starts with `{`) or flat
    /// `key=value` lines with `#` comments.
    pub fn load(path: Option<&Path>) -> Result<Cfg> {
        let Some(path) = path else {
            return Ok(Cfg::empty());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("config file {}: {e}", path.display())))?;
        let entries = if text.trim_start().starts_with('{') {
            parse_json_config(&text)
                .map_err(|e| validation(format!("config file {}: {e}", path.display())))?
        } else {
            parse_flat_config(&text)
                .map_err(|e| validation(format!("config file {}: {e}", path.display())))?
        };
        Ok(Cfg { entries, used: RefCell::new(BTreeSet::new()) })
    }

    /// Typed lookup; marks the key as consumed even when a flag later
    /// overrides it.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.used.borrow_mut().insert(key.to_string());
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| validation(format!("config key {key}: cannot parse {raw:?}: {e}"))),
        }
    }

    pub fn get_string(&self, key: &str) -> Option<String> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).cloned()
    }

    /// Rejects config keys no resolver asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|k| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(validation(format!(
                "unknown config key(s) for this subcommand: {}",
                unknown.join(", ")
            )))
        }
    }
}

fn parse_flat_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut entries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key=value, got {line:?}", lineno + 1));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(format!("line {}: empty key", lineno + 1));
        }
        if entries.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key {key:?}", lineno + 1));
        }
    }
    Ok(entries)
}

fn parse_json_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let serde_json::Value::Object(map) = value else {
        return Err("top-level JSON value must be an object".into());
    };
    let mut entries = BTreeMap::new();
    for (key, v) in map {
        let rendered = match v {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            serde_json::Value::Array(items) => {
                let mut parts = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        serde_json::Value::Number(n) => parts.push(n.to_string()),
                        serde_json::Value::String(s) => parts.push(s),
                        other => {
                            return Err(format!(
                                "key {key:?}: array elements must be numbers or strings, got {other}"
                            ))
                        }
                    }
                }
                parts.join(",")
            }
            other => return Err(format!("key {key:?}: unsupported value {other}")),
        };
        entries.insert(key, rendered);
    }
    Ok(entries)
}

/// Flag value, else config value, else default.
pub fn resolve<T: FromStr>(flag: Option<T>, cfg: &Cfg, key: &str, default: T) -> Result<T>
where
    T::Err: fmt::Display,
{
    let from_cfg = cfg.get::<T>(key)?;
    Ok(flag.or(from_cfg).unwrap_or(default))
}

/// Same precedence for values that need a custom parser (enums, lists).
pub fn resolve_with<T>(
    flag: Option<String>,
    cfg: &Cfg,
    key: &str,
    default: T,
    parser: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    match flag.or_else(|| cfg.get_string(key)) {
        Some(raw) => parser(&raw),
        None => Ok(default),
    }
}

pub fn parse_usize_list(raw: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<usize>()
                .map_err(|e| validation(format!("invalid integer {part:?} in list: {e}")))?,
        );
    }
    if out.is_empty() {
        return Err(validation(format!("empty integer list {raw:?}")));
    }
    Ok(out)
}

pub fn parse_f64_list(raw: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<f64>()
                .map_err(|e| validation(format!("invalid number {part:?} in list: {e}")))?,
        );
    }
    if out.is_empty() {
        return Err(validation(format!("empty number list {raw:?}")));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Provenance record written next to every output file. Reruns with the
/// same inputs, config, and seed reproduce every field except the two
/// timing ones.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub output: String,
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub wall_time_ms: u128,
    pub created_unix_ms: u128,
}

/// Collects what a subcommand run read and resolved, then stamps
/// manifests for its outputs.
pub struct RunInfo {
    command: &'static str,
    inputs: BTreeMap<String, String>,
    config: serde_json::Value,
    seed: Option<u64>,
    started: Instant,
}

impl RunInfo {
    pub fn new(command: &'static str) -> RunInfo {
        RunInfo {
            command,
            inputs: BTreeMap::new(),
            config: serde_json::Value::Null,
            seed: None,
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.insert(role.to_string(), path.display().to_string());
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config(&mut self, value: &impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(value)
            .map_err(|e| internal(format!("cannot record resolved config: {e}")))?;
        Ok(())
    }

    pub fn write_manifest(&self, output: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| internal(format!("cannot hash config: {e}")))?;
        let manifest = Manifest {
            command: self.command.to_string(),
            output: output.display().to_string(),
            inputs: self.inputs.clone(),
            config: self.config.clone(),
            config_hash: sha256_hex(&config_json),
            seed: self.seed,
            versions: BTreeMap::from([
                ("mael".to_string(), mael::VERSION.to_string()),
                ("mael-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ]),
            wall_time_ms: self.started.elapsed().as_millis(),
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        };
        let path = manifest_path(output);
        let file = File::create(&path)
            .map_err(|e| validation(format!("create manifest {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &manifest)
            .map_err(|e| internal(format!("serialize manifest: {e}")))?;
        w.write_all(b"\n")
            .and_then(|()| w.flush())
            .map_err(|e| internal(format!("write manifest {}: {e}", path.display())))?;
        Ok(())
    }
}

/// `<file>.manifest.json`, appended to the full file name so outputs
/// sharing a stem cannot collide.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut os = output.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

pub fn sha256_hex(content: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(content.as_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Prediction and detection files
// ---------------------------------------------------------------------------

/// First line of every prediction or detection file: which task produced
/// it and the fingerprint of the vocabulary behind the scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionHeader {
    pub mode: String,
    pub vocab_hash: String,
}

/// One recognized video: the best class, its joint score, and the
/// per-node element assignment behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognitionPrediction {
    pub video_id: String,
    pub action: String,
    pub score: f64,
    /// `(node id, element id)` pairs in node order.
    pub node_elements: Vec<(usize, usize)>,
}

/// One temporal detection with its label name, for evaluation against
/// ground-truth intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub label: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub score: f64,
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    header: &PredictionHeader,
    rows: &[T],
) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| validation(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| internal(format!("write {}: {e}", path.display()));
    let ser_err = |e: serde_json::Error| internal(format!("write {}: {e}", path.display()));
    serde_json::to_writer(&mut w, header).map_err(ser_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(ser_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(PredictionHeader, Vec<T>)> {
    let file = File::open(path)
        .map_err(|e| validation(format!("open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| validation(format!("{}: empty file, missing header line", path.display())))?
        .map_err(|e| validation(format!("read {}: {e}", path.display())))?;
    let header: PredictionHeader = serde_json::from_str(&header_line)
        .map_err(|e| validation(format!("{}: line 1: invalid header: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| validation(format!("read {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line)
            .map_err(|e| validation(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// Minimal CSV writer for the metric tables; fields are plain names and
/// numbers, so no quoting is needed (enforced).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| validation(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let mut emit = |fields: &[String]| -> Result<()> {
        for f in fields {
            if f.contains(',') || f.contains('"') || f.contains('\n') {
                return Err(internal(format!("CSV field needs quoting: {f:?}")));
            }
        }
        writeln!(w, "{}", fields.join(","))
            .map_err(|e| internal(format!("write {}: {e}", path.display())))
    };
    emit(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    for row in rows {
        emit(row)?;
    }
    w.flush().map_err(|e| internal(format!("write {}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared pipeline helpers
// ---------------------------------------------------------------------------

/// Background-first parsing label space from tree annotations, matching
/// the dataset loader's labeling rule.
pub fn parse_label_space(trees: &[SegmentTree]) -> Result<Vec<String>> {
    let mut set = BTreeSet::new();
    let mut any = false;
    for t in trees {
        for a in t.parse_annotations.as_deref().unwrap_or(&[]) {
            if a.label == mael::data::BACKGROUND_LABEL {
                return Err(validation(format!(
                    "video {}: annotation uses the reserved background label",
                    t.video_id
                )));
            }
            set.insert(a.label.clone());
            any = true;
        }
    }
    if !any {
        return Err(validation("no tree carries parse annotations"));
    }
    let mut labels = vec![mael::data::BACKGROUND_LABEL.to_string()];
    labels.extend(set);
    Ok(labels)
}

/// Ground-truth intervals from tree annotations under a given label
/// space (all annotation levels included).
pub fn tree_truth_intervals(
    trees: &[SegmentTree],
    labels: &[String],
) -> Result<Vec<TruthInterval>> {
    let id_of: BTreeMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut out = Vec::new();
    for t in trees {
        for a in t.parse_annotations.as_deref().unwrap_or(&[]) {
            let label = *id_of.get(a.label.as_str()).ok_or_else(|| {
                validation(format!(
                    "video {}: annotation label {:?} is outside the label space",
                    t.video_id, a.label
                ))
            })?;
            out.push(TruthInterval {
                video_id: t.video_id.clone(),
                label,
                start_frame: a.start_frame,
                end_frame: a.end_frame,
            });
        }
    }
    Ok(out)
}

/// Ground-truth intervals from a parsing dataset's own label space.
pub fn dataset_truth_intervals(ds: &Dataset) -> Result<Vec<TruthInterval>> {
    let mut out = Vec::new();
    for v in &ds.videos {
        for a in v.parse_annotations.as_deref().unwrap_or(&[]) {
            let label = ds.labels.parse_label_id(&a.label).ok_or_else(|| {
                validation(format!(
                    "video {}: annotation label {:?} is outside the dataset label space",
                    v.video_id, a.label
                ))
            })?;
            out.push(TruthInterval {
                video_id: v.video_id.clone(),
                label,
                start_frame: a.start_frame,
                end_frame: a.end_frame,
            });
        }
    }
    Ok(out)
}

/// Per-class accuracy table: one row per class, then overall and
/// mean-per-class summary rows. Returns (overall, mean per class).
pub fn write_accuracy_csv(
    path: &Path,
    class_names: &[String],
    truth: &[usize],
    predicted: &[usize],
) -> Result<(f64, f64)> {
    let k = class_names.len();
    let mut total = vec![0usize; k];
    let mut correct = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        total[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let mut rows = Vec::with_capacity(k + 2);
    for c in 0..k {
        let acc = if total[c] > 0 {
            format!("{}", correct[c] as f64 / total[c] as f64)
        } else {
            String::new()
        };
        rows.push(vec![
            class_names[c].clone(),
            total[c].to_string(),
            correct[c].to_string(),
            acc,
        ]);
    }
    let n: usize = total.iter().sum();
    let n_correct: usize = correct.iter().sum();
    let overall = n_correct as f64 / n.max(1) as f64;
    let mean = mael::eval::per_class_accuracy(truth, predicted, k)?;
    rows.push(vec![
        "__overall__".into(),
        n.to_string(),
        n_correct.to_string(),
        format!("{overall}"),
    ]);
    rows.push(vec!["__mean_per_class__".into(), String::new(), String::new(), format!("{mean}")]);
    write_csv(path, &["class", "total", "correct", "accuracy"], &rows)?;
    Ok((overall, mean))
}
