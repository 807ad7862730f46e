//! Synthetic descriptor-level datasets with planted ground truth, plus
//! exhaustive-search oracles for checking inference and learning.
//!
//! Videos are generated directly at the proposal-descriptor level: each
//! planted element is a contiguous blob track whose bag-of-words sits on
//! its own codeword chunk and whose box drifts inside an assigned cell of
//! the 5x5 spatial grid. Distractor proposals with low objectness and
//! motion scores are mixed in at a rate controlled by `noise`. A sidecar
//! metadata structure records, per proposal, whether it belongs to a
//! planted track and which one, so recovery metrics can be computed
//! without re-deriving the construction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    BBox, DataError, Dataset, DatasetHeader, DatasetMode, LabelSpaces, ParseInterval,
    ProposalDescriptor, VideoRecord,
};
use crate::hierarchy::{SegmentTree, SpatioTemporalSegment};
use crate::inference::{Inferred, ParsedLabels};
use crate::model::{score, score_parsing, Labeling, ModelError, ModelParams, ModelSpaces, ScoreTable};
use crate::numerics::rng_from;

/// Largest labeling-space size the exhaustive oracles will enumerate.
pub const BRUTE_FORCE_CAP: f64 = 1e7;

const SHAPE_GRID: usize = 3;
const BLOB_SIZE: f64 = 0.1;
const CELL_JITTER: f64 = 0.04;
const FG_OBJECTNESS: f64 = 1.2;
const FG_MOTION: f64 = 1.0;
const SCORE_JITTER: f64 = 0.15;
const BOW_BASE: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

/// Where the class signal of a recognition set lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSignal {
    /// All classes share the same track bow prototypes; classes differ only
    /// in which spatial cells the tracks occupy. Whole-video bags are then
    /// statistically identical across classes.
    Structure,
    /// Each class gets its own bow prototypes, so whole-video bags alone
    /// separate the classes.
    Bow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionSynthConfig {
    pub num_classes: usize,
    pub videos_per_class: usize,
    /// Planted blob tracks (and expected recurring elements) per class.
    pub maes_per_class: usize,
    /// In [0, 1): bow perturbation scale and distractor-proposal rate.
    pub noise: f64,
    pub seed: u64,
    pub class_signal: ClassSignal,
    pub frames_per_prototype: usize,
}

impl Default for RecognitionSynthConfig {
    fn default() -> Self {
        RecognitionSynthConfig {
            num_classes: 2,
            videos_per_class: 10,
            maes_per_class: 2,
            noise: 0.1,
            seed: 0,
            class_signal: ClassSignal::Structure,
            frames_per_prototype: 8,
        }
    }
}

impl RecognitionSynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("videos_per_class", self.videos_per_class),
            ("maes_per_class", self.maes_per_class),
        ] {
            if v == 0 {
                return Err(SynthError::Invalid(format!("{name} must be at least 1")));
            }
        }
        if self.frames_per_prototype < 2 {
            return Err(SynthError::Invalid("frames_per_prototype must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(SynthError::Invalid(format!("noise must be in [0, 1), got {}", self.noise)));
        }
        if self.class_signal == ClassSignal::Structure
            && (self.num_classes > 5 || self.maes_per_class > 5)
        {
            return Err(SynthError::Invalid(
                "structure signal supports at most 5 classes and 5 elements per class \
                 (distinct cell arrangements on the 5x5 grid)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Origin of one proposal, aligned by index with `VideoRecord.proposals`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalProvenance {
    pub foreground: bool,
    /// Class-local planted track index for foreground proposals.
    pub prototype: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedVideo {
    pub video_id: String,
    pub class_id: usize,
    pub proposals: Vec<ProposalProvenance>,
}

/// Sidecar ground truth for a generated recognition set. `videos` is
/// aligned with the dataset's video order (ids sort in generation order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMetadata {
    pub class_names: Vec<String>,
    pub videos: Vec<PlantedVideo>,
}

impl PlantedMetadata {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let file = File::create(path.as_ref())
            .map_err(|e| SynthError::Invalid(format!("create metadata file: {e}")))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| SynthError::Invalid(format!("serialize metadata: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PlantedMetadata, SynthError> {
        let file = File::open(path.as_ref())
            .map_err(|e| SynthError::Invalid(format!("open metadata file: {e}")))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| SynthError::Invalid(format!("parse metadata: {e}")))
    }

    pub fn video(&self, video_id: &str) -> Option<&PlantedVideo> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }
}

/// Planted track id backed by a strict majority of the member proposals,
/// if any: more than half of `members` must carry the same prototype.
pub fn node_prototype(video: &PlantedVideo, members: &[usize]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &m in members {
        if let Some(p) = video.proposals.get(m).and_then(|q| q.prototype) {
            *counts.entry(p).or_default() += 1;
        }
    }
    counts.into_iter().find(|&(_, c)| 2 * c > members.len()).map(|(p, _)| p)
}

/// Bow prototype for planted direction `dir`: a rotation of a fixed weight
/// pattern on the direction's own 4-codeword chunk.
fn proto_bow(dir: usize, d_b: usize) -> Vec<f64> {
    let mut v = vec![0.0; d_b];
    for i in 0..4 {
        v[4 * dir + i] = BOW_BASE[(i + dir) % 4];
    }
    v
}

fn proto_appearance(dir: usize, d_a: usize) -> Vec<f64> {
    let rest = 0.15 / (d_a - 1) as f64;
    let mut v = vec![rest; d_a];
    v[dir] = 0.85;
    v
}

fn noisy_bow(proto: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    if noise == 0.0 {
        return proto.to_vec();
    }
    let mut v: Vec<f64> = proto.iter().map(|&p| p + noise * rng.gen_range(0.0..1.0)).collect();
    crate::data::normalize_bow(&mut v);
    v
}

fn blob_bbox(cx: f64, cy: f64) -> BBox {
    BBox {
        x: (cx - BLOB_SIZE / 2.0).clamp(0.0, 1.0 - BLOB_SIZE),
        y: (cy - BLOB_SIZE / 2.0).clamp(0.0, 1.0 - BLOB_SIZE),
        w: BLOB_SIZE,
        h: BLOB_SIZE,
    }
}

fn cell_center(row: usize, col: usize) -> (f64, f64) {
    (col as f64 * 0.2 + 0.1, row as f64 * 0.2 + 0.1)
}

fn foreground_proposal(
    frame: usize,
    row: usize,
    col: usize,
    dir: usize,
    d_a: usize,
    d_b: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> ProposalDescriptor {
    let (cx, cy) = cell_center(row, col);
    let jx = rng.gen_range(-CELL_JITTER..=CELL_JITTER);
    let jy = rng.gen_range(-CELL_JITTER..=CELL_JITTER);
    ProposalDescriptor {
        frame_index: frame,
        bbox: blob_bbox(cx + jx, cy + jy),
        appearance_hist: proto_appearance(dir, d_a),
        shape_feature: vec![1; SHAPE_GRID * SHAPE_GRID],
        local_bow: noisy_bow(&proto_bow(dir, d_b), noise, rng),
        objectness_score: FG_OBJECTNESS + SCORE_JITTER * rng.gen_range(-1.0..=1.0),
        motion_score: FG_MOTION + SCORE_JITTER * rng.gen_range(-1.0..=1.0),
    }
}

fn background_proposal(
    num_frames: usize,
    bg_dir: usize,
    d_a: usize,
    d_b: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> ProposalDescriptor {
    let cx = rng.gen_range(0.1..0.9);
    let cy = rng.gen_range(0.1..0.9);
    let mut mask = vec![0; SHAPE_GRID * SHAPE_GRID];
    for cell in mask.iter_mut().take(SHAPE_GRID) {
        *cell = 1;
    }
    ProposalDescriptor {
        frame_index: rng.gen_range(0..num_frames),
        bbox: blob_bbox(cx, cy),
        appearance_hist: proto_appearance(bg_dir, d_a),
        shape_feature: mask,
        local_bow: noisy_bow(&proto_bow(bg_dir, d_b), noise.max(0.2), rng),
        objectness_score: -FG_OBJECTNESS + SCORE_JITTER * rng.gen_range(-1.0..=1.0),
        motion_score: -FG_MOTION + SCORE_JITTER * rng.gen_range(-1.0..=1.0),
    }
}

fn distractor_count(num_foreground: usize, noise: f64) -> usize {
    (num_foreground as f64 * noise / (1.0 - noise)).round() as usize
}

/// Generates a recognition dataset of planted blob tracks, one track per
/// class element, together with its provenance sidecar.
pub fn generate_recognition_set(
    cfg: &RecognitionSynthConfig,
) -> Result<(Dataset, PlantedMetadata), SynthError> {
    cfg.validate()?;
    let p_n = cfg.maes_per_class;
    let dirs = match cfg.class_signal {
        ClassSignal::Structure => p_n,
        ClassSignal::Bow => cfg.num_classes * p_n,
    };
    let d_b = 4 * (dirs + 1);
    let d_a = dirs + 1;
    let class_names: Vec<String> = (0..cfg.num_classes).map(|c| format!("act{c:02}")).collect();
    let num_frames = p_n * cfg.frames_per_prototype;

    let mut videos = Vec::new();
    let mut planted = Vec::new();
    for c in 0..cfg.num_classes {
        for v in 0..cfg.videos_per_class {
            let mut rng =
                rng_from(cfg.seed, 0x5717_0000 ^ ((c as u64) << 12) ^ v as u64);
            let video_id = format!("c{c:02}_v{v:03}");
            let mut proposals = Vec::new();
            let mut provenance = Vec::new();
            for p in 0..p_n {
                let dir = match cfg.class_signal {
                    ClassSignal::Structure => p,
                    ClassSignal::Bow => c * p_n + p,
                };
                let (row, col) = (p % 5, (p + c) % 5);
                for frame in p * cfg.frames_per_prototype..(p + 1) * cfg.frames_per_prototype {
                    proposals.push(foreground_proposal(
                        frame, row, col, dir, d_a, d_b, cfg.noise, &mut rng,
                    ));
                    provenance.push(ProposalProvenance { foreground: true, prototype: Some(p) });
                }
            }
            for _ in 0..distractor_count(proposals.len(), cfg.noise) {
                proposals.push(background_proposal(
                    num_frames, dirs, d_a, d_b, cfg.noise, &mut rng,
                ));
                provenance.push(ProposalProvenance { foreground: false, prototype: None });
            }
            videos.push(VideoRecord {
                video_id: video_id.clone(),
                num_frames,
                action_label: Some(class_names[c].clone()),
                parse_annotations: None,
                proposals,
            });
            planted.push(PlantedVideo { video_id, class_id: c, proposals: provenance });
        }
    }
    let labels = LabelSpaces::from_videos(&videos);
    let header = DatasetHeader { d_a, d_b, k: SHAPE_GRID, mode: DatasetMode::Recognition };
    Ok((Dataset { header, videos, labels }, PlantedMetadata { class_names, videos: planted }))
}

/// Largest per-codeword two-sample t statistic between any two classes'
/// per-video foreground bags. Small values certify that whole-video bags
/// carry no class signal.
pub fn bag_separation(dataset: &Dataset, meta: &PlantedMetadata) -> Result<f64, SynthError> {
    let mut bags: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for video in &dataset.videos {
        let planted = meta
            .video(&video.video_id)
            .ok_or_else(|| SynthError::Invalid(format!("no metadata for {}", video.video_id)))?;
        if planted.proposals.len() != video.proposals.len() {
            return Err(SynthError::Invalid(format!(
                "metadata for {} covers {} proposals, video has {}",
                video.video_id,
                planted.proposals.len(),
                video.proposals.len()
            )));
        }
        let fg = video
            .proposals
            .iter()
            .zip(&planted.proposals)
            .filter(|(_, p)| p.foreground)
            .map(|(d, _)| d);
        let bag = crate::data::aggregate_bow(fg)?;
        bags.entry(planted.class_id).or_default().push(bag);
    }
    let classes: Vec<usize> = bags.keys().copied().collect();
    if classes.len() < 2 {
        return Err(SynthError::Invalid("bag separation needs at least two classes".into()));
    }
    let d_b = dataset.header.d_b;
    let stats: BTreeMap<usize, (usize, Vec<f64>, Vec<f64>)> = bags
        .iter()
        .map(|(&c, group)| {
            let n = group.len();
            if n < 2 {
                return Err(SynthError::Invalid(format!(
                    "bag separation needs at least 2 videos per class, class {c} has {n}"
                )));
            }
            let mut mean = vec![0.0; d_b];
            for bag in group {
                for (m, x) in mean.iter_mut().zip(bag) {
                    *m += x / n as f64;
                }
            }
            let mut var = vec![0.0; d_b];
            for bag in group {
                for ((v, x), m) in var.iter_mut().zip(bag).zip(&mean) {
                    *v += (x - m) * (x - m) / (n - 1) as f64;
                }
            }
            Ok((c, (n, mean, var)))
        })
        .collect::<Result<_, SynthError>>()?;
    let mut worst: f64 = 0.0;
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            let (na, ma, va) = &stats[&a];
            let (nb, mb, vb) = &stats[&b];
            for d in 0..d_b {
                let t = (ma[d] - mb[d])
                    / (va[d] / *na as f64 + vb[d] / *nb as f64 + 1e-12).sqrt();
                worst = worst.max(t.abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsingSynthConfig {
    /// Base label vocabulary size; labels are named `L01`, `L02`, ...
    pub label_vocab_size: usize,
    pub sequences: usize,
    pub mean_instances_per_sequence: usize,
    pub noise: f64,
    pub seed: u64,
    /// How many sequences open with an adjacent `L01`,`L02` instance pair.
    pub planted_pair_count: usize,
    /// Contiguous label n-grams occurring strictly more often than this
    /// across the set become composed annotations.
    pub composition_min_support: usize,
    pub composition_max_len: usize,
}

impl Default for ParsingSynthConfig {
    fn default() -> Self {
        ParsingSynthConfig {
            label_vocab_size: 3,
            sequences: 60,
            mean_instances_per_sequence: 3,
            noise: 0.1,
            seed: 0,
            planted_pair_count: 12,
            composition_min_support: 10,
            composition_max_len: 4,
        }
    }
}

impl ParsingSynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.label_vocab_size == 0 || self.label_vocab_size > 25 {
            return Err(SynthError::Invalid(
                "label_vocab_size must be between 1 and 25 (one grid cell per label)".into(),
            ));
        }
        if self.sequences == 0 || self.mean_instances_per_sequence == 0 {
            return Err(SynthError::Invalid(
                "sequences and mean_instances_per_sequence must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(SynthError::Invalid(format!("noise must be in [0, 1), got {}", self.noise)));
        }
        if self.planted_pair_count > 0 && self.label_vocab_size < 2 {
            return Err(SynthError::Invalid("planted pairs need at least 2 labels".into()));
        }
        if self.planted_pair_count > self.sequences {
            return Err(SynthError::Invalid(
                "planted_pair_count cannot exceed the number of sequences".into(),
            ));
        }
        if self.composition_max_len < 2 {
            return Err(SynthError::Invalid("composition_max_len must be at least 2".into()));
        }
        Ok(())
    }
}

fn parse_label_name(label: usize) -> String {
    format!("L{label:02}")
}

/// Instance length per label; all values avoid the default sliding-window
/// grid lengths so window quantization is visible in baseline comparisons.
pub fn instance_length(label: usize) -> usize {
    [12, 15, 18][(label - 1) % 3]
}

struct PlannedInstance {
    label: usize,
    start: usize,
    end: usize,
}

/// Generates a parsing dataset: per sequence, non-overlapping labeled
/// instances separated by gaps, with the configured number of sequences
/// opening on an adjacent instance pair. Contiguous n-grams frequent
/// across the whole set are annotated as composed labels spanning their
/// constituents.
pub fn generate_parsing_set(cfg: &ParsingSynthConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let v_n = cfg.label_vocab_size;
    let d_b = 4 * (v_n + 1);
    let d_a = v_n + 1;

    let mut plans: Vec<(Vec<PlannedInstance>, usize)> = Vec::new();
    for s in 0..cfg.sequences {
        let mut rng = rng_from(cfg.seed, 0x9A25_0000 ^ s as u64);
        let planted_pair = s < cfg.planted_pair_count;
        let min_count = if planted_pair { 2 } else { 1 };
        let n_inst =
            (cfg.mean_instances_per_sequence + rng.gen_range(0..=2)).saturating_sub(1).max(min_count);
        let mut labels = Vec::with_capacity(n_inst);
        if planted_pair {
            labels.push(1);
            labels.push(2);
        }
        while labels.len() < n_inst {
            labels.push(rng.gen_range(1..=v_n));
        }
        let mut instances = Vec::with_capacity(n_inst);
        let mut cursor = rng.gen_range(2..5);
        for (i, &label) in labels.iter().enumerate() {
            let len = instance_length(label);
            instances.push(PlannedInstance { label, start: cursor, end: cursor + len - 1 });
            cursor += len;
            if !(planted_pair && i == 0) {
                cursor += rng.gen_range(3..6);
            }
        }
        let num_frames = instances.last().map(|i| i.end).unwrap_or(0) + rng.gen_range(3..5);
        plans.push((instances, num_frames));
    }

    // Composed labels: count contiguous n-grams across the whole set, then
    // annotate every occurrence of the frequent ones.
    let mut ngram_support: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut occurrences: Vec<(usize, Vec<usize>, usize, usize)> = Vec::new();
    for (s, (instances, _)) in plans.iter().enumerate() {
        let mut run_start = 0;
        for i in 0..=instances.len() {
            let adjacent = i > 0
                && i < instances.len()
                && instances[i].start == instances[i - 1].end + 1;
            if !adjacent {
                let run = &instances[run_start..i];
                for n in 2..=cfg.composition_max_len.min(run.len()) {
                    for w in run.windows(n) {
                        let key: Vec<usize> = w.iter().map(|inst| inst.label).collect();
                        *ngram_support.entry(key.clone()).or_default() += 1;
                        occurrences.push((s, key, w[0].start, w[n - 1].end));
                    }
                }
                run_start = i;
            }
        }
    }

    let mut videos = Vec::new();
    for (s, (instances, num_frames)) in plans.iter().enumerate() {
        let mut rng = rng_from(cfg.seed, 0xB0D5_0000 ^ s as u64);
        let mut proposals = Vec::new();
        let mut annotations = Vec::new();
        for inst in instances {
            let cell = (inst.label - 1) % 25;
            let (row, col) = (cell / 5, cell % 5);
            for frame in inst.start..=inst.end {
                proposals.push(foreground_proposal(
                    frame,
                    row,
                    col,
                    inst.label - 1,
                    d_a,
                    d_b,
                    cfg.noise,
                    &mut rng,
                ));
            }
            annotations.push(ParseInterval {
                label: parse_label_name(inst.label),
                start_frame: inst.start,
                end_frame: inst.end,
                level: 1,
            });
        }
        for _ in 0..distractor_count(proposals.len(), cfg.noise) {
            proposals.push(background_proposal(*num_frames, v_n, d_a, d_b, cfg.noise, &mut rng));
        }
        for (seq, key, start, end) in occurrences.iter().filter(|(seq, ..)| *seq == s) {
            debug_assert_eq!(*seq, s);
            if ngram_support[key] > cfg.composition_min_support {
                let name: Vec<String> = key.iter().map(|&l| parse_label_name(l)).collect();
                annotations.push(ParseInterval {
                    label: name.join("-"),
                    start_frame: *start,
                    end_frame: *end,
                    level: key.len(),
                });
            }
        }
        annotations.sort_by(|a, b| {
            (a.start_frame, a.end_frame, a.level, &a.label)
                .cmp(&(b.start_frame, b.end_frame, b.level, &b.label))
        });
        videos.push(VideoRecord {
            video_id: format!("s{s:03}"),
            num_frames: *num_frames,
            action_label: None,
            parse_annotations: Some(annotations),
            proposals,
        });
    }
    let labels = LabelSpaces::from_videos(&videos);
    let header = DatasetHeader { d_a, d_b, k: SHAPE_GRID, mode: DatasetMode::Parsing };
    Ok(Dataset { header, videos, labels })
}

fn random_simplex(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= total;
    }
    v
}

/// Root plus `m` leaf children with random spans, centers, and bows.
fn random_flat_tree(m: usize, num_frames: usize, d_b: usize, rng: &mut impl Rng) -> SegmentTree {
    let mut nodes = vec![SpatioTemporalSegment {
        segment_id: 0,
        member_proposals: (0..m).collect(),
        time_span: (0, num_frames - 1),
        mean_bbox: BBox { x: 0.25, y: 0.25, w: 0.5, h: 0.5 },
        bow: random_simplex(d_b, rng),
        appearance: vec![1.0],
    }];
    let mut parent = vec![None];
    for i in 0..m {
        let a = rng.gen_range(0..num_frames);
        let b = rng.gen_range(a..num_frames);
        let cx: f64 = rng.gen_range(0.05..0.95);
        let cy: f64 = rng.gen_range(0.05..0.95);
        nodes.push(SpatioTemporalSegment {
            segment_id: i + 1,
            member_proposals: vec![i],
            time_span: (a, b),
            mean_bbox: blob_bbox(cx, cy),
            bow: random_simplex(d_b, rng),
            appearance: vec![1.0],
        });
        parent.push(Some(0));
    }
    SegmentTree {
        video_id: "rand".into(),
        num_frames,
        action_label: None,
        parse_annotations: None,
        nodes,
        parent,
    }
}

/// A random small recognition problem: label spaces, parameters in
/// [-1, 1], a flat tree of at most 8 nodes, and a random score table.
pub struct RandomRecognitionInstance {
    pub spaces: ModelSpaces,
    pub params: ModelParams,
    pub d_b: usize,
    pub tree: SegmentTree,
    pub table: ScoreTable,
    pub truth_action: usize,
}

pub fn random_recognition_instance(rng: &mut impl Rng) -> RandomRecognitionInstance {
    let num_actions = rng.gen_range(1..=3);
    let mut counts: Vec<usize> = (0..num_actions).map(|_| rng.gen_range(0..=4)).collect();
    if counts.iter().all(|&c| c == 0) {
        counts[0] = 1;
    }
    let mut mae_names = Vec::new();
    let mut mae_owner = Vec::new();
    for (y, &count) in counts.iter().enumerate() {
        for j in 0..count {
            mae_names.push(format!("a{y}:{j}"));
            mae_owner.push(y);
        }
    }
    let spaces = ModelSpaces {
        actions: (0..num_actions).map(|y| format!("a{y}")).collect(),
        mae_names,
        mae_owner,
    };
    let nm = spaces.num_maes();
    let d_b = rng.gen_range(2..=4);
    let m = rng.gen_range(1..=7);
    let tree = random_flat_tree(m, rng.gen_range(6..=12), d_b, rng);
    let table =
        ScoreTable::new(m, nm, (0..m * nm).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let dim = ModelParams::weight_len(num_actions, nm, d_b);
    let wv: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = ModelParams::from_weight_vec(&wv, num_actions, nm, d_b).unwrap();
    let truth_action = rng.gen_range(0..num_actions);
    RandomRecognitionInstance { spaces, params, d_b, tree, table, truth_action }
}

/// A random small parsing problem over a flat label space.
pub struct RandomParsingInstance {
    pub params: ModelParams,
    pub num_labels: usize,
    pub tree: SegmentTree,
    pub table: ScoreTable,
    pub truth: Vec<usize>,
}

pub fn random_parsing_instance(rng: &mut impl Rng) -> RandomParsingInstance {
    let num_labels = rng.gen_range(2..=4);
    let m = rng.gen_range(1..=7);
    let tree = random_flat_tree(m, rng.gen_range(6..=12), 3, rng);
    let table = ScoreTable::new(
        m,
        num_labels,
        (0..m * num_labels).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let dim = ModelParams::weight_len(0, num_labels, 0);
    let wv: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = ModelParams::from_weight_vec(&wv, 0, num_labels, 0).unwrap();
    let truth: Vec<usize> = (0..m).map(|_| rng.gen_range(0..num_labels)).collect();
    RandomParsingInstance { params, num_labels, tree, table, truth }
}

/// Number of feasible joint labelings of `tree` under `spaces`.
pub fn num_feasible_labelings(spaces: &ModelSpaces, tree: &SegmentTree) -> f64 {
    let m = tree.num_non_root() as i32;
    (0..spaces.num_actions())
        .map(|y| {
            let owned = spaces.maes_of_action(y).len();
            if owned == 0 {
                1.0
            } else {
                (owned as f64).powi(m)
            }
        })
        .sum()
}

fn advance(idx: &mut [usize], base: usize) -> bool {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < base {
            return true;
        }
        idx[i] = 0;
    }
    false
}

/// Exhaustive search for the best joint labeling, enumerating classes and
/// assignments in ascending order and accepting only strict improvements,
/// so ties resolve identically to the fast search. With `loss_truth` set,
/// a unit class loss is added to every labeling of a different class.
pub fn brute_force_map(
    spaces: &ModelSpaces,
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    loss_truth: Option<usize>,
) -> Result<Inferred, SynthError> {
    let count = num_feasible_labelings(spaces, tree);
    if count > BRUTE_FORCE_CAP {
        return Err(SynthError::Invalid(format!(
            "labeling space of size {count:.0} exceeds the {BRUTE_FORCE_CAP:.0} oracle cap"
        )));
    }
    let m = tree.num_non_root();
    let mut best: Option<Inferred> = None;
    let consider = |labeling: Labeling, best: &mut Option<Inferred>| -> Result<(), SynthError> {
        let mut s = score(spaces, params, tree, table, &labeling)?;
        if let Some(truth) = loss_truth {
            if labeling.action != truth {
                s += 1.0;
            }
        }
        if best.as_ref().is_none_or(|b| s > b.score) {
            *best = Some(Inferred { labeling, score: s });
        }
        Ok(())
    };
    for y in 0..spaces.num_actions() {
        let owned = spaces.maes_of_action(y);
        if owned.is_empty() || m == 0 {
            consider(Labeling { action: y, mae: BTreeMap::new() }, &mut best)?;
            continue;
        }
        let mut idx = vec![0usize; m];
        loop {
            let labeling = Labeling {
                action: y,
                mae: idx.iter().enumerate().map(|(i, &j)| (i + 1, owned[j])).collect(),
            };
            consider(labeling, &mut best)?;
            if !advance(&mut idx, owned.len()) {
                break;
            }
        }
    }
    best.ok_or_else(|| SynthError::Invalid("empty class space".into()))
}

/// Exhaustive search for the best per-node label vector; with
/// `loss_truth`, per-node losses of `1/m` are added for disagreements,
/// accumulated in node order like the fast search.
pub fn brute_force_parsing(
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    num_labels: usize,
    loss_truth: Option<&[usize]>,
) -> Result<ParsedLabels, SynthError> {
    if num_labels == 0 {
        return Err(SynthError::Invalid("empty label space".into()));
    }
    let m = tree.num_non_root();
    let count = (num_labels as f64).powi(m as i32);
    if count > BRUTE_FORCE_CAP {
        return Err(SynthError::Invalid(format!(
            "labeling space of size {count:.0} exceeds the {BRUTE_FORCE_CAP:.0} oracle cap"
        )));
    }
    if let Some(truth) = loss_truth {
        if truth.len() != m {
            return Err(SynthError::Invalid(format!(
                "truth covers {} nodes, tree has {m}",
                truth.len()
            )));
        }
    }
    let per_node_loss = if m == 0 { 0.0 } else { 1.0 / m as f64 };
    let mut labels = vec![0usize; m];
    let mut best: Option<ParsedLabels> = None;
    loop {
        let base = score_parsing(params, tree, table, &labels)?;
        let mut loss = 0.0;
        if let Some(truth) = loss_truth {
            for (a, b) in labels.iter().zip(truth) {
                if a != b {
                    loss += per_node_loss;
                }
            }
        }
        let s = base + loss;
        if best.as_ref().is_none_or(|b| s > b.score) {
            best = Some(ParsedLabels { labels: labels.clone(), score: s });
        }
        if m == 0 || !advance(&mut labels, num_labels) {
            break;
        }
    }
    Ok(best.expect("at least one assignment is always enumerated"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{
        infer, infer_loss_augmented_recognition, infer_parsing, infer_parsing_loss_augmented,
    };

    #[test]
    fn recognition_generator_is_deterministic_and_valid() {
        let cfg = RecognitionSynthConfig {
            num_classes: 2,
            videos_per_class: 3,
            maes_per_class: 2,
            noise: 0.1,
            seed: 5,
            ..RecognitionSynthConfig::default()
        };
        let (ds1, meta1) = generate_recognition_set(&cfg).unwrap();
        let (ds2, meta2) = generate_recognition_set(&cfg).unwrap();
        assert_eq!(ds1, ds2);
        assert_eq!(meta1, meta2);
        assert_eq!(ds1.videos.len(), 6);
        for (video, planted) in ds1.videos.iter().zip(&meta1.videos) {
            assert_eq!(video.video_id, planted.video_id);
            assert_eq!(video.proposals.len(), planted.proposals.len());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        crate::data::save_dataset(&path, &ds1).unwrap();
        let back = crate::data::load_dataset(&path, DatasetMode::Recognition).unwrap();
        assert_eq!(back.videos, ds1.videos);
        let mpath = dir.path().join("rec.meta.json");
        meta1.save(&mpath).unwrap();
        assert_eq!(PlantedMetadata::load(&mpath).unwrap(), meta1);
    }

    #[test]
    fn zero_noise_tracks_reproduce_prototypes_exactly() {
        let cfg = RecognitionSynthConfig {
            num_classes: 2,
            videos_per_class: 2,
            maes_per_class: 3,
            noise: 0.0,
            seed: 9,
            class_signal: ClassSignal::Bow,
            ..RecognitionSynthConfig::default()
        };
        let (ds, meta) = generate_recognition_set(&cfg).unwrap();
        for (video, planted) in ds.videos.iter().zip(&meta.videos) {
            assert!(planted.proposals.iter().all(|p| p.foreground), "no distractors at zero noise");
            for p in 0..cfg.maes_per_class {
                let members = video
                    .proposals
                    .iter()
                    .zip(&planted.proposals)
                    .filter(|(_, q)| q.prototype == Some(p))
                    .map(|(d, _)| d);
                let bag = crate::data::aggregate_bow(members).unwrap();
                let dir = planted.class_id * cfg.maes_per_class + p;
                let proto = proto_bow(dir, ds.header.d_b);
                for (a, b) in bag.iter().zip(&proto) {
                    assert!((a - b).abs() < 1e-12, "bag {a} vs prototype {b}");
                }
            }
        }
    }

    #[test]
    fn structure_signal_hides_classes_from_bags_and_bow_signal_exposes_them() {
        // With the structure signal, per-class bags are draws from one
        // distribution; max |t| over all codewords then stays within the
        // multiple-testing range of a null statistic. The bow signal moves
        // bag means by whole codeword chunks, so |t| explodes.
        let base = RecognitionSynthConfig {
            num_classes: 2,
            videos_per_class: 24,
            maes_per_class: 2,
            noise: 0.05,
            seed: 11,
            ..RecognitionSynthConfig::default()
        };
        let (ds, meta) = generate_recognition_set(&base).unwrap();
        let hidden = bag_separation(&ds, &meta).unwrap();
        assert!(hidden <= 5.0, "structure-signal bags separate with |t| = {hidden}");

        let bow_cfg =
            RecognitionSynthConfig { class_signal: ClassSignal::Bow, ..base };
        let (ds, meta) = generate_recognition_set(&bow_cfg).unwrap();
        let exposed = bag_separation(&ds, &meta).unwrap();
        assert!(exposed > 20.0, "bow-signal bags only reach |t| = {exposed}");
    }

    #[test]
    fn generator_configs_are_validated() {
        for cfg in [
            RecognitionSynthConfig { num_classes: 0, ..RecognitionSynthConfig::default() },
            RecognitionSynthConfig { noise: 1.0, ..RecognitionSynthConfig::default() },
            RecognitionSynthConfig { noise: -0.1, ..RecognitionSynthConfig::default() },
            RecognitionSynthConfig { num_classes: 6, ..RecognitionSynthConfig::default() },
        ] {
            assert!(generate_recognition_set(&cfg).is_err());
        }
        for cfg in [
            ParsingSynthConfig { label_vocab_size: 0, ..ParsingSynthConfig::default() },
            ParsingSynthConfig { sequences: 0, ..ParsingSynthConfig::default() },
            ParsingSynthConfig { noise: 1.0, ..ParsingSynthConfig::default() },
            ParsingSynthConfig { planted_pair_count: 99, sequences: 10, ..ParsingSynthConfig::default() },
        ] {
            assert!(generate_parsing_set(&cfg).is_err());
        }
    }

    #[test]
    fn parsing_set_plants_instances_and_frequent_compositions() {
        let cfg = ParsingSynthConfig {
            label_vocab_size: 3,
            sequences: 20,
            mean_instances_per_sequence: 3,
            noise: 0.1,
            seed: 3,
            planted_pair_count: 12,
            ..ParsingSynthConfig::default()
        };
        let ds = generate_parsing_set(&cfg).unwrap();
        assert_eq!(generate_parsing_set(&cfg).unwrap(), ds);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("parse.jsonl");
        crate::data::save_dataset(&path, &ds).unwrap();
        crate::data::load_dataset(&path, DatasetMode::Parsing).unwrap();

        let mut composed_total = 0;
        for video in &ds.videos {
            let ann = video.parse_annotations.as_ref().unwrap();
            let mut instances: Vec<&ParseInterval> =
                ann.iter().filter(|a| a.level == 1).collect();
            instances.sort_by_key(|a| a.start_frame);
            for w in instances.windows(2) {
                assert!(w[1].start_frame > w[0].end_frame, "instances overlap in {}", video.video_id);
            }
            for inst in &instances {
                let len = inst.end_frame - inst.start_frame + 1;
                assert!([12, 15, 18].contains(&len), "unexpected instance length {len}");
            }
            for comp in ann.iter().filter(|a| a.level > 1) {
                assert_eq!(comp.label, "L01-L02");
                assert_eq!(comp.level, 2);
                let first = instances
                    .iter()
                    .find(|i| i.start_frame == comp.start_frame && i.label == "L01")
                    .expect("composed annotation starts on an L01 instance");
                let second = instances
                    .iter()
                    .find(|i| i.end_frame == comp.end_frame && i.label == "L02")
                    .expect("composed annotation ends on an L02 instance");
                assert_eq!(second.start_frame, first.end_frame + 1, "constituents are adjacent");
                composed_total += 1;
            }
        }
        assert_eq!(composed_total, 12, "every planted pair is annotated");
    }

    #[test]
    fn pair_support_at_or_below_threshold_is_excluded() {
        let cfg = ParsingSynthConfig {
            sequences: 20,
            planted_pair_count: 9,
            seed: 3,
            ..ParsingSynthConfig::default()
        };
        let ds = generate_parsing_set(&cfg).unwrap();
        for video in &ds.videos {
            for a in video.parse_annotations.as_ref().unwrap() {
                assert_eq!(a.level, 1, "support 9 must not compose, found {}", a.label);
            }
        }
        let at_threshold = ParsingSynthConfig { planted_pair_count: 10, ..cfg };
        let ds = generate_parsing_set(&at_threshold).unwrap();
        for video in &ds.videos {
            for a in video.parse_annotations.as_ref().unwrap() {
                assert_eq!(a.level, 1, "support exactly 10 must not compose");
            }
        }
    }

    #[test]
    fn zero_noise_parsing_instances_are_trivially_recoverable() {
        let cfg = ParsingSynthConfig {
            label_vocab_size: 2,
            sequences: 3,
            mean_instances_per_sequence: 1,
            noise: 0.0,
            seed: 7,
            planted_pair_count: 0,
            ..ParsingSynthConfig::default()
        };
        let ds = generate_parsing_set(&cfg).unwrap();
        for video in &ds.videos {
            for ann in video.parse_annotations.as_ref().unwrap() {
                assert_eq!(ann.level, 1);
                let label: usize = ann.label[1..].parse().unwrap();
                let proto = proto_bow(label - 1, ds.header.d_b);
                let covered: Vec<&ProposalDescriptor> = video
                    .proposals
                    .iter()
                    .filter(|p| p.frame_index >= ann.start_frame && p.frame_index <= ann.end_frame)
                    .collect();
                assert_eq!(covered.len(), ann.end_frame - ann.start_frame + 1);
                for p in covered {
                    for (a, b) in p.local_bow.iter().zip(&proto) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn feasible_labeling_count_matches_hand_example() {
        let mut rng = rng_from(1, 0);
        let spaces = ModelSpaces {
            actions: vec!["a0".into(), "a1".into()],
            mae_names: vec!["a0:0".into(), "a0:1".into(), "a1:0".into(), "a1:1".into()],
            mae_owner: vec![0, 0, 1, 1],
        };
        let tree = random_flat_tree(1, 8, 3, &mut rng);
        assert_eq!(num_feasible_labelings(&spaces, &tree), 4.0);
    }

    #[test]
    fn brute_force_agrees_with_fast_recognition_inference() {
        let mut rng = rng_from(42, 1);
        for _ in 0..60 {
            let inst = random_recognition_instance(&mut rng);
            let fast = infer(&inst.spaces, &inst.params, &inst.tree, &inst.table).unwrap();
            let slow =
                brute_force_map(&inst.spaces, &inst.params, &inst.tree, &inst.table, None).unwrap();
            assert_eq!(fast.labeling, slow.labeling);
            assert_eq!(fast.score, slow.score);

            let fast = infer_loss_augmented_recognition(
                &inst.spaces,
                &inst.params,
                &inst.tree,
                &inst.table,
                inst.truth_action,
            )
            .unwrap();
            let slow = brute_force_map(
                &inst.spaces,
                &inst.params,
                &inst.tree,
                &inst.table,
                Some(inst.truth_action),
            )
            .unwrap();
            assert_eq!(fast.labeling, slow.labeling);
            assert_eq!(fast.score, slow.score);
        }
    }

    #[test]
    fn brute_force_agrees_with_fast_parsing_inference() {
        let mut rng = rng_from(42, 2);
        for _ in 0..40 {
            let inst = random_parsing_instance(&mut rng);
            let fast = infer_parsing(&inst.params, &inst.tree, &inst.table).unwrap();
            let slow =
                brute_force_parsing(&inst.params, &inst.tree, &inst.table, inst.num_labels, None)
                    .unwrap();
            assert_eq!(fast.labels, slow.labels);
            assert_eq!(fast.score, slow.score);

            let fast = infer_parsing_loss_augmented(
                &inst.params,
                &inst.tree,
                &inst.table,
                &inst.truth,
            )
            .unwrap();
            let slow = brute_force_parsing(
                &inst.params,
                &inst.tree,
                &inst.table,
                inst.num_labels,
                Some(&inst.truth),
            )
            .unwrap();
            assert_eq!(fast.labels, slow.labels);
            assert_eq!(fast.score, slow.score);
        }
    }

    #[test]
    fn oversized_labeling_spaces_are_refused() {
        let mut rng = rng_from(1, 3);
        let spaces = ModelSpaces {
            actions: (0..3).map(|y| format!("a{y}")).collect(),
            mae_names: (0..3)
                .flat_map(|y| (0..4).map(move |j| format!("a{y}:{j}")))
                .collect(),
            mae_owner: (0..3).flat_map(|y| [y; 4]).collect(),
        };
        let tree = random_flat_tree(12, 16, 3, &mut rng);
        let table = ScoreTable::new(12, 12, vec![0.0; 144]).unwrap();
        let params = ModelParams::zeros(3, 12, 3);
        assert!(num_feasible_labelings(&spaces, &tree) > BRUTE_FORCE_CAP);
        assert!(brute_force_map(&spaces, &params, &tree, &table, None).is_err());
    }

    #[test]
    fn node_prototype_requires_a_strict_majority() {
        let video = PlantedVideo {
            video_id: "v".into(),
            class_id: 0,
            proposals: vec![
                ProposalProvenance { foreground: true, prototype: Some(0) },
                ProposalProvenance { foreground: true, prototype: Some(0) },
                ProposalProvenance { foreground: true, prototype: Some(1) },
                ProposalProvenance { foreground: false, prototype: None },
            ],
        };
        assert_eq!(node_prototype(&video, &[0, 1, 2, 3]), None);
        assert_eq!(node_prototype(&video, &[0, 1, 2]), Some(0));
        assert_eq!(node_prototype(&video, &[2]), Some(1));
        assert_eq!(node_prototype(&video, &[3]), None);
    }
}
