//! Evaluation metrics and reference baselines: per-class accuracy,
//! temporal intersection-over-union, localization mean average precision,
//! a sliding-window detection baseline, a whole-video-feature ablation,
//! and the adjusted Rand index for clustering quality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::SegmentTree;
use crate::numerics::{svm_score, train_linear_svm, LinearSvmModel, NumError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("numerics: {0}")]
    Num(#[from] NumError),
    #[error("{0}")]
    Invalid(String),
}

/// Macro-averaged per-class accuracy. Classes absent from the truth are
/// excluded from the mean with a warning. Lengths must match.
pub fn per_class_accuracy(
    truth: &[usize],
    predicted: &[usize],
    num_classes: usize,
) -> Result<f64, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::Invalid(format!(
            "{} truth labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(EvalError::Invalid("no examples to score".into()));
    }
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(EvalError::Invalid(format!("label out of range: truth {t}, predicted {p}")));
        }
        total[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if total[c] == 0 {
            log::warn!("class {c} has no truth examples; excluded from per-class accuracy");
            continue;
        }
        sum += correct[c] as f64 / total[c] as f64;
        present += 1;
    }
    if present == 0 {
        return Err(EvalError::Invalid("no class has truth examples".into()));
    }
    Ok(sum / present as f64)
}

/// Intersection-over-union of two inclusive frame intervals.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter_lo = a.0.max(b.0);
    let inter_hi = a.1.min(b.1);
    if inter_lo > inter_hi {
        return 0.0;
    }
    let inter = (inter_hi - inter_lo + 1) as f64;
    let len_a = (a.1 - a.0 + 1) as f64;
    let len_b = (b.1 - b.0 + 1) as f64;
    inter / (len_a + len_b - inter)
}

/// One scored temporal detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub label: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    pub score: f64,
}

/// One ground-truth temporal interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthInterval {
    pub video_id: String,
    pub label: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub mean_ap: f64,
    /// Per-label average precision for labels with at least one truth
    /// interval, keyed by label id.
    pub per_label_ap: BTreeMap<usize, f64>,
}

/// Sorts one label's detections for matching: score descending, then
/// (video_id, start, end) ascending so equal scores rank deterministically.
fn sort_detections(dets: &mut [&Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("detection scores are finite")
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.start_frame.cmp(&b.start_frame))
            .then_with(|| a.end_frame.cmp(&b.end_frame))
    });
}

/// All-points interpolated average precision from a ranked true/false
/// vector and the number of truth intervals: at each true position, the
/// recall step times the best precision at or beyond that rank.
fn interpolated_ap(is_tp: &[bool], num_truth: usize) -> f64 {
    if num_truth == 0 {
        return 0.0;
    }
    let n = is_tp.len();
    let mut precision = vec![0.0; n];
    let mut tp = 0usize;
    for i in 0..n {
        if is_tp[i] {
            tp += 1;
        }
        precision[i] = tp as f64 / (i + 1) as f64;
    }
    // Best precision at or beyond each rank.
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let step = 1.0 / num_truth as f64;
    let mut ap = 0.0;
    for i in 0..n {
        if is_tp[i] {
            ap += step * precision[i];
        }
    }
    ap
}

/// Localization mean average precision at one IoU threshold. Detections
/// are ranked per label, greedily matched to the unmatched same-video
/// truth interval of highest IoU when that IoU reaches the threshold, and
/// scored by all-points interpolated average precision. Labels without
/// truth intervals are excluded from the mean with a warning.
pub fn localization_map(
    detections: &[Detection],
    truth: &[TruthInterval],
    iou_threshold: f64,
) -> Result<MapResult, EvalError> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(EvalError::Invalid(format!("IoU threshold {iou_threshold} outside [0, 1]")));
    }
    for d in detections {
        if !d.score.is_finite() {
            return Err(EvalError::Invalid(format!(
                "detection in video {} has a non-finite score",
                d.video_id
            )));
        }
        if d.start_frame > d.end_frame {
            return Err(EvalError::Invalid(format!(
                "detection in video {} has an inverted span",
                d.video_id
            )));
        }
    }
    for t in truth {
        if t.start_frame > t.end_frame {
            return Err(EvalError::Invalid(format!(
                "truth interval in video {} has an inverted span",
                t.video_id
            )));
        }
    }

    let mut labels: Vec<usize> = truth.iter().map(|t| t.label).collect();
    labels.extend(detections.iter().map(|d| d.label));
    labels.sort_unstable();
    labels.dedup();

    let mut per_label_ap = BTreeMap::new();
    for &label in &labels {
        let truth_idx: Vec<usize> =
            (0..truth.len()).filter(|&i| truth[i].label == label).collect();
        if truth_idx.is_empty() {
            log::warn!("label {label} has detections but no truth intervals; excluded from mAP");
            continue;
        }
        let mut dets: Vec<&Detection> =
            detections.iter().filter(|d| d.label == label).collect();
        sort_detections(&mut dets);

        let mut matched = vec![false; truth_idx.len()];
        let mut is_tp = Vec::with_capacity(dets.len());
        for d in &dets {
            let mut best: Option<(f64, usize)> = None;
            for (j, &ti) in truth_idx.iter().enumerate() {
                let t = &truth[ti];
                if matched[j] || t.video_id != d.video_id {
                    continue;
                }
                let iou =
                    temporal_iou((d.start_frame, d.end_frame), (t.start_frame, t.end_frame));
                if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    matched[j] = true;
                    is_tp.push(true);
                }
                None => is_tp.push(false),
            }
        }
        per_label_ap.insert(label, interpolated_ap(&is_tp, truth_idx.len()));
    }
    if per_label_ap.is_empty() {
        return Err(EvalError::Invalid("no label has truth intervals".into()));
    }
    let mean_ap = per_label_ap.values().sum::<f64>() / per_label_ap.len() as f64;
    Ok(MapResult { mean_ap, per_label_ap })
}

/// Greedy non-maximum suppression within one video and label: keep
/// detections in score order, dropping any whose IoU with an already kept
/// detection exceeds `iou_threshold`. Returns kept indices into `dets`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("detection scores are finite")
            .then_with(|| dets[a].start_frame.cmp(&dets[b].start_frame))
            .then_with(|| dets[a].end_frame.cmp(&dets[b].end_frame))
            .then_with(|| a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].video_id == dets[i].video_id
                && dets[k].label == dets[i].label
                && temporal_iou(
                    (dets[k].start_frame, dets[k].end_frame),
                    (dets[i].start_frame, dets[i].end_frame),
                ) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Turns a parsed tree into scored detections: every non-root node with a
/// non-background label becomes a candidate spanning the node's frames,
/// scored by that node's labeled unary term, and candidates then pass
/// through the same per-label suppression the window baseline gets.
pub fn parse_to_detections(
    params: &crate::model::ModelParams,
    tree: &SegmentTree,
    table: &crate::model::ScoreTable,
    labels: &[usize],
    nms_iou: f64,
) -> Result<Vec<Detection>, EvalError> {
    if labels.len() != tree.num_non_root() {
        return Err(EvalError::Invalid(format!(
            "label vector covers {} nodes, tree has {}",
            labels.len(),
            tree.num_non_root()
        )));
    }
    let mut candidates = Vec::new();
    for node in 1..tree.nodes.len() {
        let label = labels[node - 1];
        if label == 0 {
            continue;
        }
        let (start, end) = tree.nodes[node].time_span;
        candidates.push(Detection {
            video_id: tree.video_id.clone(),
            label,
            start_frame: start,
            end_frame: end,
            score: crate::model::node_unary(params, tree, table, node, label),
        });
    }
    let kept = nms(&candidates, nms_iou);
    Ok(kept.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Configuration of the sliding-window detection baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowConfig {
    /// Window lengths in frames.
    pub window_lengths: Vec<usize>,
    /// Step between window starts as a fraction of the window length.
    pub step_fraction: f64,
    /// IoU above which overlapping windows are suppressed.
    pub nms_iou: f64,
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub seed: u64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            window_lengths: vec![8, 16, 32],
            step_fraction: 0.5,
            nms_iou: 0.5,
            svm_c: 10.0,
            svm_epochs: 120,
            seed: 0,
        }
    }
}

/// Per-label window classifiers for the sliding-window baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowModel {
    pub config: SlidingWindowConfig,
    /// One classifier per non-background label id, keyed by label.
    pub classifiers: BTreeMap<usize, LinearSvmModel>,
}

fn window_bow(tree: &SegmentTree, span: (usize, usize), d_b: usize) -> Vec<f64> {
    // Aggregate leaf bags whose spans overlap the window, weighted by
    // their raw (unnormalized) contribution; leaves partition proposals.
    let children = tree.children();
    let mut sum = vec![0.0; d_b];
    let mut any = false;
    for node in 0..tree.nodes.len() {
        if !children[node].is_empty() {
            continue;
        }
        let (a, b) = tree.nodes[node].time_span;
        if a.max(span.0) <= b.min(span.1) {
            let m = tree.nodes[node].member_proposals.len() as f64;
            for (s, v) in sum.iter_mut().zip(&tree.nodes[node].bow) {
                *s += v * m;
            }
            any = true;
        }
    }
    if !any {
        return vec![1.0 / d_b as f64; d_b];
    }
    let total: f64 = sum.iter().sum();
    if total > 0.0 {
        for v in sum.iter_mut() {
            *v /= total;
        }
    } else {
        sum.fill(1.0 / d_b as f64);
    }
    sum
}

fn windows_of(num_frames: usize, cfg: &SlidingWindowConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &len in &cfg.window_lengths {
        if len == 0 || len > num_frames {
            continue;
        }
        let step = ((len as f64 * cfg.step_fraction).round() as usize).max(1);
        let mut start = 0;
        loop {
            out.push((start, start + len - 1));
            if start + len >= num_frames {
                break;
            }
            start = (start + step).min(num_frames - len);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Trains the sliding-window baseline: per non-background label, positives
/// are window bags overlapping a truth interval of that label by more than
/// the suppression IoU, negatives are all other windows.
pub fn train_sliding_window(
    trees: &[SegmentTree],
    truth: &[TruthInterval],
    d_b: usize,
    cfg: &SlidingWindowConfig,
) -> Result<SlidingWindowModel, EvalError> {
    validate_window_config(cfg)?;
    let mut labels: Vec<usize> = truth.iter().map(|t| t.label).collect();
    labels.sort_unstable();
    labels.dedup();
    labels.retain(|&l| l != 0);
    if labels.is_empty() {
        return Err(EvalError::Invalid("no non-background truth labels to train on".into()));
    }
    let mut classifiers = BTreeMap::new();
    for &label in &labels {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for tree in trees {
            let vid_truth: Vec<&TruthInterval> = truth
                .iter()
                .filter(|t| t.video_id == tree.video_id && t.label == label)
                .collect();
            for span in windows_of(tree.num_frames, cfg) {
                let feat = window_bow(tree, span, d_b);
                let hit = vid_truth
                    .iter()
                    .any(|t| temporal_iou(span, (t.start_frame, t.end_frame)) > cfg.nms_iou);
                if hit {
                    pos.push(feat);
                } else {
                    neg.push(feat);
                }
            }
        }
        if pos.is_empty() || neg.is_empty() {
            log::warn!("label {label}: no separable window sample; skipping its classifier");
            continue;
        }
        let model = train_linear_svm(
            &pos,
            &neg,
            cfg.svm_c,
            cfg.svm_epochs,
            crate::numerics::mix_seed(cfg.seed, 0x51D0 + label as u64),
        )?;
        classifiers.insert(label, model);
    }
    if classifiers.is_empty() {
        return Err(EvalError::Invalid("no label produced a window classifier".into()));
    }
    Ok(SlidingWindowModel { config: cfg.clone(), classifiers })
}

/// Scores every window of every video with every label classifier and
/// suppresses overlaps, returning a flat detection list.
pub fn predict_sliding_window(
    model: &SlidingWindowModel,
    trees: &[SegmentTree],
    d_b: usize,
) -> Result<Vec<Detection>, EvalError> {
    let mut all = Vec::new();
    for tree in trees {
        let mut per_video = Vec::new();
        for span in windows_of(tree.num_frames, &model.config) {
            let feat = window_bow(tree, span, d_b);
            for (&label, clf) in &model.classifiers {
                per_video.push(Detection {
                    video_id: tree.video_id.clone(),
                    label,
                    start_frame: span.0,
                    end_frame: span.1,
                    score: svm_score(clf, &feat)?,
                });
            }
        }
        let kept = nms(&per_video, model.config.nms_iou);
        all.extend(kept.into_iter().map(|i| per_video[i].clone()));
    }
    Ok(all)
}

fn validate_window_config(cfg: &SlidingWindowConfig) -> Result<(), EvalError> {
    if cfg.window_lengths.is_empty() {
        return Err(EvalError::Invalid("window_lengths is empty".into()));
    }
    if !(cfg.step_fraction > 0.0 && cfg.step_fraction <= 1.0) {
        return Err(EvalError::Invalid(format!(
            "step_fraction {} outside (0, 1]",
            cfg.step_fraction
        )));
    }
    if !(0.0..=1.0).contains(&cfg.nms_iou) {
        return Err(EvalError::Invalid(format!("nms_iou {} outside [0, 1]", cfg.nms_iou)));
    }
    Ok(())
}

/// One-vs-rest linear classifiers on the whole-video root feature alone:
/// the ablation that measures how much the tree structure adds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootOnlyModel {
    pub classifiers: Vec<LinearSvmModel>,
}

pub fn train_root_only(
    trees: &[SegmentTree],
    labels: &[usize],
    num_classes: usize,
    svm_c: f64,
    svm_epochs: usize,
    seed: u64,
) -> Result<RootOnlyModel, EvalError> {
    if trees.len() != labels.len() {
        return Err(EvalError::Invalid(format!(
            "{} trees vs {} labels",
            trees.len(),
            labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(EvalError::Invalid("need at least two classes".into()));
    }
    let mut classifiers = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let pos: Vec<Vec<f64>> = trees
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(t, _)| t.root_feature().to_vec())
            .collect();
        let neg: Vec<Vec<f64>> = trees
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l != c)
            .map(|(t, _)| t.root_feature().to_vec())
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(EvalError::Invalid(format!(
                "class {c} lacks positives or negatives for the ablation"
            )));
        }
        classifiers.push(train_linear_svm(
            &pos,
            &neg,
            svm_c,
            svm_epochs,
            crate::numerics::mix_seed(seed, 0x2007 + c as u64),
        )?);
    }
    Ok(RootOnlyModel { classifiers })
}

/// Argmax over the one-vs-rest scores; ties pick the lowest class id.
pub fn predict_root_only(model: &RootOnlyModel, tree: &SegmentTree) -> Result<usize, EvalError> {
    let mut best = 0usize;
    let mut best_s = f64::NEG_INFINITY;
    for (c, clf) in model.classifiers.iter().enumerate() {
        let s = svm_score(clf, tree.root_feature())?;
        if s > best_s {
            best_s = s;
            best = c;
        }
    }
    Ok(best)
}

/// Adjusted Rand index between two clusterings of the same items: 1 for
/// identical partitions, near 0 for independent ones.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "clusterings must cover the same items");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |m: usize| (m * (m.saturating_sub(1)) / 2) as f64;
    let sum_ij: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let total = c2(n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0; // both partitions are all-singletons or one block
    }
    (sum_ij - expected) / (max_index - expected)
}
