//! Per-video segment hierarchy construction.
//!
//! Three steps: [`score_and_prune_proposals`] drops likely-background
//! proposals with a per-video appearance SVM seeded from objectness+motion
//! scores, [`pool_spatiotemporal_segments`] spectrally clusters the
//! survivors into spatiotemporal segments, and [`build_hierarchy`] greedily
//! agglomerates the segments into a binary tree, then trims redundant
//! parents. The root node always aggregates every kept proposal, so its
//! bag-of-words vector doubles as the whole-video feature.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    aggregate_bow, BBox, DataError, Dataset, DatasetMode, ParseInterval, VideoRecord,
};
use crate::numerics::{
    mix_seed, spectral_cluster, svm_score, train_linear_svm, NumError, SymMatrix,
};

const PRUNE_SVM_C: f64 = 10.0;
const PRUNE_SVM_EPOCHS: usize = 80;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("numerics: {0}")]
    Num(#[from] NumError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterCount {
    /// max(20, ceil(kept / 15)), capped at the number of kept proposals.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub color: f64,
    pub shape: f64,
    pub xyt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    /// Keep proposals whose SVM decision value is strictly above this.
    pub foreground_threshold: f64,
    /// Seed positives per frame for the pruning SVM.
    pub top_n_seed_positives: usize,
    pub num_st_clusters: ClusterCount,
    /// A non-root parent sharing more than this fraction of its member
    /// proposals with one child is removed.
    pub trim_overlap: f64,
    pub distance_weights: DistanceWeights,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            foreground_threshold: -1.0,
            top_n_seed_positives: 2,
            num_st_clusters: ClusterCount::Auto,
            trim_overlap: 0.8,
            distance_weights: DistanceWeights { color: 1.0, shape: 1.0, xyt: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalSegment {
    /// Node id inside its tree; the root is always 0.
    pub segment_id: usize,
    /// Indices into the originating video's proposal list, sorted.
    pub member_proposals: Vec<usize>,
    /// Inclusive (first, last) frame over the members.
    pub time_span: (usize, usize),
    pub mean_bbox: BBox,
    /// L1-normalized sum of member bag-of-words vectors.
    pub bow: Vec<f64>,
    /// Mean of member appearance histograms.
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTree {
    pub video_id: String,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_annotations: Option<Vec<ParseInterval>>,
    /// Node 0 is the root; `nodes[i].segment_id == i`.
    pub nodes: Vec<SpatioTemporalSegment>,
    /// `parent[i]` is the parent node id; `parent[0]` is `None`.
    pub parent: Vec<Option<usize>>,
}

impl SegmentTree {
    pub fn num_non_root(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Whole-video feature: the root's aggregated bag of words.
    pub fn root_feature(&self) -> &[f64] {
        &self.nodes[0].bow
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.nodes.len()];
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                ch[*p].push(i);
            }
        }
        ch
    }

    /// Structural invariants: single root at id 0, acyclic parent links,
    /// ids equal to indices, parent spans containing child spans, internal
    /// members equal to the union of child members, and no non-root parent
    /// sharing more than `trim_overlap` of its members with a child. The
    /// root is exempt from the overlap bound: it can be neither removed (a
    /// tree keeps one root) nor can its leaves be (leaves are the pooled
    /// segments), so the bound is unenforceable there.
    pub fn validate(&self, trim_overlap: f64) -> Result<(), String> {
        let n = self.nodes.len();
        if n == 0 {
            return Err("tree has no nodes".into());
        }
        if self.parent.len() != n {
            return Err("parent table length differs from node count".into());
        }
        if self.parent[0].is_some() {
            return Err("node 0 must be the root".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.segment_id != i {
                return Err(format!("node {i} carries segment_id {}", node.segment_id));
            }
            if node.member_proposals.is_empty() {
                return Err(format!("node {i} has no members"));
            }
            if node.member_proposals.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("node {i} members are not sorted unique"));
            }
            if node.time_span.0 > node.time_span.1 || node.time_span.1 >= self.num_frames {
                return Err(format!("node {i} span {:?} is invalid", node.time_span));
            }
            if i > 0 {
                let p = match self.parent[i] {
                    Some(p) if p < n && p != i => p,
                    _ => return Err(format!("node {i} has an invalid parent")),
                };
                let ps = self.nodes[p].time_span;
                if ps.0 > node.time_span.0 || ps.1 < node.time_span.1 {
                    return Err(format!("parent {p} span does not contain node {i}"));
                }
            }
        }
        // Acyclic and connected: every node walks up to the root.
        for mut i in 1..n {
            let mut steps = 0;
            while let Some(p) = self.parent[i] {
                i = p;
                steps += 1;
                if steps > n {
                    return Err("parent chain contains a cycle".into());
                }
            }
            if i != 0 {
                return Err("node does not reach the root".into());
            }
        }
        let children = self.children();
        for (i, ch) in children.iter().enumerate() {
            if ch.is_empty() {
                continue;
            }
            let mut union: BTreeSet<usize> = BTreeSet::new();
            for &c in ch {
                union.extend(self.nodes[c].member_proposals.iter().copied());
            }
            let mine: BTreeSet<usize> = self.nodes[i].member_proposals.iter().copied().collect();
            if union != mine {
                return Err(format!("node {i} members differ from the union of its children"));
            }
            if i != 0 {
                for &c in ch {
                    let share = self.nodes[c].member_proposals.len() as f64
                        / self.nodes[i].member_proposals.len() as f64;
                    if share > trim_overlap {
                        return Err(format!("untrimmed parent {i} shares {share} with child {c}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeds a per-video foreground SVM from the top-N objectness+motion
/// proposals per frame (equal-count uniform negatives from the rest) and
/// keeps every proposal whose appearance decision value is strictly above
/// the configured threshold. Degenerate videos that cannot form both
/// classes are returned whole with a warning.
pub fn score_and_prune_proposals(
    video: &VideoRecord,
    cfg: &HierarchyConfig,
    seed: u64,
) -> Result<Vec<usize>, HierarchyError> {
    let n = video.proposals.len();
    let all = || (0..n).collect::<Vec<_>>();
    if n < 2 {
        warn!("video {}: fewer than 2 proposals, keeping all", video.video_id);
        return Ok(all());
    }
    if cfg.top_n_seed_positives == 0 {
        return Err(HierarchyError::Invalid("top_n_seed_positives must be at least 1".into()));
    }

    let mut frames: Vec<usize> = video.proposals.iter().map(|p| p.frame_index).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut positives: Vec<usize> = Vec::new();
    for f in frames {
        let mut in_frame: Vec<usize> =
            (0..n).filter(|&i| video.proposals[i].frame_index == f).collect();
        in_frame.sort_by(|&a, &b| {
            let sa = video.proposals[a].objectness_score + video.proposals[a].motion_score;
            let sb = video.proposals[b].objectness_score + video.proposals[b].motion_score;
            sb.partial_cmp(&sa).expect("scores are finite").then(a.cmp(&b))
        });
        positives.extend(in_frame.into_iter().take(cfg.top_n_seed_positives));
    }
    positives.sort_unstable();
    let pos_set: BTreeSet<usize> = positives.iter().copied().collect();
    let mut remaining: Vec<usize> = (0..n).filter(|i| !pos_set.contains(i)).collect();
    if remaining.is_empty() {
        warn!("video {}: every proposal is a seed positive, keeping all", video.video_id);
        return Ok(all());
    }

    let mut rng = crate::numerics::rng_from(seed, 0x9205);
    remaining.shuffle(&mut rng);
    let mut negatives: Vec<usize> = remaining.into_iter().take(positives.len()).collect();
    negatives.sort_unstable();

    let pos_feats: Vec<Vec<f64>> =
        positives.iter().map(|&i| video.proposals[i].appearance_hist.clone()).collect();
    let neg_feats: Vec<Vec<f64>> =
        negatives.iter().map(|&i| video.proposals[i].appearance_hist.clone()).collect();
    let model =
        train_linear_svm(&pos_feats, &neg_feats, PRUNE_SVM_C, PRUNE_SVM_EPOCHS, mix_seed(seed, 1))?;

    let mut kept = Vec::new();
    for (i, p) in video.proposals.iter().enumerate() {
        if svm_score(&model, &p.appearance_hist)? > cfg.foreground_threshold {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        warn!("video {}: pruning removed everything, keeping all", video.video_id);
        return Ok(all());
    }
    Ok(kept)
}

/// Chi-squared histogram distance `0.5 * sum (a-b)^2 / (a+b)`.
pub fn chi2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut d = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let s = x + y;
        if s > 0.0 {
            d += (x - y) * (x - y) / s;
        }
    }
    0.5 * d
}

/// Clusters the kept proposals of one video into spatiotemporal segments.
/// The affinity is `exp(-(w_c * d_color + w_s * d_shape + w_t * d_xyt))`
/// with each distance divided by its per-video mean, which makes the
/// affinity scale-free across videos.
pub fn pool_spatiotemporal_segments(
    video: &VideoRecord,
    kept: &[usize],
    cfg: &HierarchyConfig,
    seed: u64,
) -> Result<Vec<SpatioTemporalSegment>, HierarchyError> {
    if kept.is_empty() {
        return Err(HierarchyError::Invalid("kept proposal list is empty".into()));
    }
    for &i in kept {
        if i >= video.proposals.len() {
            return Err(HierarchyError::Invalid(format!("kept index {i} is out of range")));
        }
    }
    let m = kept.len();
    if m == 1 {
        return Ok(vec![make_segment(video, kept.to_vec(), 0)?]);
    }

    let npairs = m * (m - 1) / 2;
    let mut d_color = vec![0.0; npairs];
    let mut d_shape = vec![0.0; npairs];
    let mut d_xyt = vec![0.0; npairs];
    let coords: Vec<[f64; 3]> = kept
        .iter()
        .map(|&i| {
            let p = &video.proposals[i];
            let (cx, cy) = p.bbox.center();
            [cx, cy, p.frame_index as f64 / video.num_frames as f64]
        })
        .collect();
    let mut idx = 0;
    for a in 0..m {
        let pa = &video.proposals[kept[a]];
        for b in (a + 1)..m {
            let pb = &video.proposals[kept[b]];
            d_color[idx] = chi2_distance(&pa.appearance_hist, &pb.appearance_hist);
            let disagree =
                pa.shape_feature.iter().zip(&pb.shape_feature).filter(|(x, y)| x != y).count();
            d_shape[idx] = disagree as f64 / pa.shape_feature.len() as f64;
            d_xyt[idx] = crate::numerics::dist_sq(&coords[a], &coords[b]).sqrt();
            idx += 1;
        }
    }
    for d in [&mut d_color, &mut d_shape, &mut d_xyt] {
        let mean = d.iter().sum::<f64>() / npairs as f64;
        if mean > 0.0 {
            for v in d.iter_mut() {
                *v /= mean;
            }
        }
    }

    let w = &cfg.distance_weights;
    let mut flat = vec![0.0; m * m];
    let mut idx = 0;
    for a in 0..m {
        flat[a * m + a] = 1.0;
        for b in (a + 1)..m {
            let v = (-(w.color * d_color[idx] + w.shape * d_shape[idx] + w.xyt * d_xyt[idx])).exp();
            flat[a * m + b] = v;
            flat[b * m + a] = v;
            idx += 1;
        }
    }
    let affinity = SymMatrix::from_fn(m, |i, j| flat[i * m + j]);

    let k = match cfg.num_st_clusters {
        ClusterCount::Auto => (m as f64 / 15.0).ceil().max(20.0) as usize,
        ClusterCount::Fixed(k) => {
            if k == 0 {
                return Err(HierarchyError::Invalid("num_st_clusters must be at least 1".into()));
            }
            k
        }
    }
    .min(m);
    let labels = spectral_cluster(&affinity, k, mix_seed(seed, 2))?;

    let num_clusters = labels.iter().max().map(|&l| l + 1).unwrap_or(0);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
    for (local, &c) in labels.iter().enumerate() {
        clusters[c].push(kept[local]);
    }
    clusters.retain(|c| !c.is_empty());
    clusters.sort_by_key(|c| c[0]);
    clusters
        .into_iter()
        .enumerate()
        .map(|(id, members)| make_segment(video, members, id))
        .collect()
}

fn make_segment(
    video: &VideoRecord,
    mut members: Vec<usize>,
    id: usize,
) -> Result<SpatioTemporalSegment, HierarchyError> {
    members.sort_unstable();
    members.dedup();
    let props: Vec<&crate::data::ProposalDescriptor> =
        members.iter().map(|&i| &video.proposals[i]).collect();
    let lo = props.iter().map(|p| p.frame_index).min().expect("members non-empty");
    let hi = props.iter().map(|p| p.frame_index).max().expect("members non-empty");
    let n = props.len() as f64;
    let mean_bbox = BBox {
        x: props.iter().map(|p| p.bbox.x).sum::<f64>() / n,
        y: props.iter().map(|p| p.bbox.y).sum::<f64>() / n,
        w: props.iter().map(|p| p.bbox.w).sum::<f64>() / n,
        h: props.iter().map(|p| p.bbox.h).sum::<f64>() / n,
    };
    let bow = aggregate_bow(props.iter().copied())?;
    let d_a = props[0].appearance_hist.len();
    let mut appearance = vec![0.0; d_a];
    for p in &props {
        for (s, v) in appearance.iter_mut().zip(&p.appearance_hist) {
            *s += v;
        }
    }
    for v in appearance.iter_mut() {
        *v /= n;
    }
    Ok(SpatioTemporalSegment {
        segment_id: id,
        member_proposals: members,
        time_span: (lo, hi),
        mean_bbox,
        bow,
        appearance,
    })
}

/// Greedy binary agglomeration of one video's segments under the similarity
/// `exp(-(d_color + d_xyt + d_fit))`, where `d_fit` is the mean Euclidean
/// distance between member (w, h) pairs across the two segments. Ties pick
/// the lowest segment-id pair. Afterward, any non-root parent sharing more
/// than `trim_overlap` of its members with a child is spliced out and its
/// children re-attach to the grandparent.
pub fn build_hierarchy(
    video: &VideoRecord,
    segments: Vec<SpatioTemporalSegment>,
    cfg: &HierarchyConfig,
) -> Result<SegmentTree, HierarchyError> {
    if segments.is_empty() {
        return Err(HierarchyError::Invalid("cannot build a tree from zero segments".into()));
    }
    if !(0.0..=1.0).contains(&cfg.trim_overlap) {
        return Err(HierarchyError::Invalid(format!(
            "trim_overlap {} is outside [0, 1]",
            cfg.trim_overlap
        )));
    }

    struct Work {
        creation_id: usize,
        seg: SpatioTemporalSegment,
        children: Vec<usize>, // creation ids
    }
    let mut pool: Vec<Work> = segments
        .into_iter()
        .enumerate()
        .map(|(i, mut seg)| {
            seg.segment_id = i;
            Work { creation_id: i, seg, children: vec![] }
        })
        .collect();
    let mut next_id = pool.len();
    let mut active: Vec<usize> = (0..pool.len()).collect(); // indexes into pool

    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for ai in 0..active.len() {
            for bi in (ai + 1)..active.len() {
                let sa = &pool[active[ai]];
                let sb = &pool[active[bi]];
                let sim = merge_similarity(video, &sa.seg, &sb.seg);
                let key = (sa.creation_id.min(sb.creation_id), sa.creation_id.max(sb.creation_id));
                let better = match &best {
                    None => true,
                    Some((bs, i, j)) => {
                        let bkey = (
                            pool[active[*i]].creation_id.min(pool[active[*j]].creation_id),
                            pool[active[*i]].creation_id.max(pool[active[*j]].creation_id),
                        );
                        sim > *bs || (sim == *bs && key < bkey)
                    }
                };
                if better {
                    best = Some((sim, ai, bi));
                }
            }
        }
        let (_, ai, bi) = best.expect("at least one pair");
        let (ia, ib) = (active[ai], active[bi]);
        let mut members = pool[ia].seg.member_proposals.clone();
        members.extend_from_slice(&pool[ib].seg.member_proposals);
        let seg = make_segment(video, members, next_id)?;
        let (ca, cb) = (pool[ia].creation_id, pool[ib].creation_id);
        pool.push(Work {
            creation_id: next_id,
            seg,
            children: vec![ca.min(cb), ca.max(cb)],
        });
        // Remove the higher position first to keep indices valid.
        active.remove(bi);
        active.remove(ai);
        active.push(pool.len() - 1);
        next_id += 1;
    }

    // Creation-id indexed views.
    let by_creation: Vec<usize> = {
        let mut v = vec![0; pool.len()];
        for (i, w) in pool.iter().enumerate() {
            v[w.creation_id] = i;
        }
        v
    };
    let root_creation = pool[active[0]].creation_id;
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); pool.len()];
    for w in &pool {
        children[w.creation_id] = w.children.clone();
    }
    let mut parent: Vec<Option<usize>> = vec![None; pool.len()];
    for w in &pool {
        for &c in &w.children {
            parent[c] = Some(w.creation_id);
        }
    }

    // Trim: splice out violating non-root internal parents, lowest creation
    // id first, rescanning until stable.
    loop {
        let mut removed = None;
        'scan: for id in 0..pool.len() {
            if id == root_creation || children[id].is_empty() || parent[id].is_none() {
                continue;
            }
            let psize = pool[by_creation[id]].seg.member_proposals.len() as f64;
            for &c in &children[id] {
                let share = pool[by_creation[c]].seg.member_proposals.len() as f64 / psize;
                if share > cfg.trim_overlap {
                    removed = Some(id);
                    break 'scan;
                }
            }
        }
        match removed {
            None => break,
            Some(id) => {
                let gp = parent[id].expect("non-root");
                let kids = std::mem::take(&mut children[id]);
                let pos = children[gp].iter().position(|&c| c == id).expect("child link");
                children[gp].splice(pos..pos + 1, kids.iter().copied());
                for &c in &kids {
                    parent[c] = Some(gp);
                }
                parent[id] = None;
            }
        }
    }

    // Re-index reachable nodes breadth-first from the root.
    let mut order = vec![root_creation];
    let mut qi = 0;
    while qi < order.len() {
        let id = order[qi];
        qi += 1;
        order.extend(children[id].iter().copied());
    }
    let mut new_id = vec![usize::MAX; pool.len()];
    for (ni, &cid) in order.iter().enumerate() {
        new_id[cid] = ni;
    }
    let mut nodes = Vec::with_capacity(order.len());
    let mut out_parent = Vec::with_capacity(order.len());
    for &cid in &order {
        let mut seg = pool[by_creation[cid]].seg.clone();
        seg.segment_id = new_id[cid];
        nodes.push(seg);
        out_parent.push(if cid == root_creation { None } else { parent[cid].map(|p| new_id[p]) });
    }

    let tree = SegmentTree {
        video_id: video.video_id.clone(),
        num_frames: video.num_frames,
        action_label: video.action_label.clone(),
        parse_annotations: video.parse_annotations.clone(),
        nodes,
        parent: out_parent,
    };
    debug_assert_eq!(tree.validate(cfg.trim_overlap), Ok(()));
    Ok(tree)
}

fn merge_similarity(
    video: &VideoRecord,
    a: &SpatioTemporalSegment,
    b: &SpatioTemporalSegment,
) -> f64 {
    let d_color = chi2_distance(&a.appearance, &b.appearance);
    let (ax, ay) = a.mean_bbox.center();
    let (bx, by) = b.mean_bbox.center();
    let at = (a.time_span.0 + a.time_span.1) as f64 / 2.0 / video.num_frames as f64;
    let bt = (b.time_span.0 + b.time_span.1) as f64 / 2.0 / video.num_frames as f64;
    let d_xyt = ((ax - bx).powi(2) + (ay - by).powi(2) + (at - bt).powi(2)).sqrt();
    let mut d_fit = 0.0;
    for &i in &a.member_proposals {
        let pa = &video.proposals[i].bbox;
        for &j in &b.member_proposals {
            let pb = &video.proposals[j].bbox;
            d_fit += ((pa.w - pb.w).powi(2) + (pa.h - pb.h).powi(2)).sqrt();
        }
    }
    d_fit /= (a.member_proposals.len() * b.member_proposals.len()) as f64;
    (-(d_color + d_xyt + d_fit)).exp()
}

/// prune -> pool -> agglomerate for one video.
pub fn build_video_tree(
    video: &VideoRecord,
    cfg: &HierarchyConfig,
    seed: u64,
) -> Result<SegmentTree, HierarchyError> {
    let kept = score_and_prune_proposals(video, cfg, seed)?;
    let segments = pool_spatiotemporal_segments(video, &kept, cfg, seed)?;
    build_hierarchy(video, segments, cfg)
}

/// Builds every video's tree; the per-video seed mixes the base seed with
/// the video's position so results do not depend on evaluation order.
pub fn build_all_trees(
    dataset: &Dataset,
    cfg: &HierarchyConfig,
    seed: u64,
) -> Result<Vec<SegmentTree>, HierarchyError> {
    let results: Vec<Result<SegmentTree, HierarchyError>> = dataset
        .videos
        .par_iter()
        .enumerate()
        .map(|(i, v)| build_video_tree(v, cfg, mix_seed(seed, 0xF0E5_7000 + i as u64)))
        .collect();
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFileHeader {
    pub mode: DatasetMode,
    pub d_a: usize,
    pub d_b: usize,
    pub k: usize,
    pub trim_overlap: f64,
}

pub fn save_trees(
    path: impl AsRef<Path>,
    header: &TreeFileHeader,
    trees: &[SegmentTree],
) -> Result<(), HierarchyError> {
    let file = File::create(path.as_ref()).map_err(DataError::Io)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)
        .map_err(|e| HierarchyError::Invalid(format!("serialize header: {e}")))?;
    w.write_all(b"\n").map_err(DataError::Io)?;
    for t in trees {
        serde_json::to_writer(&mut w, t)
            .map_err(|e| HierarchyError::Invalid(format!("serialize tree {}: {e}", t.video_id)))?;
        w.write_all(b"\n").map_err(DataError::Io)?;
    }
    w.flush().map_err(DataError::Io)?;
    Ok(())
}

pub fn load_trees(path: impl AsRef<Path>) -> Result<(TreeFileHeader, Vec<SegmentTree>), HierarchyError> {
    let file = File::open(path.as_ref()).map_err(DataError::Io)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| HierarchyError::Invalid("empty file: missing header line".into()))?
        .map_err(DataError::Io)?;
    let header: TreeFileHeader = serde_json::from_str(&header_line)
        .map_err(|e| HierarchyError::Invalid(format!("line 1: invalid header: {e}")))?;
    let mut trees = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(DataError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let tree: SegmentTree = serde_json::from_str(&line)
            .map_err(|e| HierarchyError::Invalid(format!("line {}: invalid tree: {e}", i + 2)))?;
        tree.validate(header.trim_overlap)
            .map_err(|e| HierarchyError::Invalid(format!("line {}: {e}", i + 2)))?;
        trees.push(tree);
    }
    Ok((header, trees))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetHeader, ProposalDescriptor};

    fn blob_proposal(
        frame: usize,
        cx: f64,
        cy: f64,
        wh: f64,
        app_dim: usize,
        d_a: usize,
        fg: bool,
    ) -> ProposalDescriptor {
        let mut hist = vec![0.0; d_a];
        hist[app_dim] = 1.0;
        ProposalDescriptor {
            frame_index: frame,
            bbox: BBox { x: cx - wh / 2.0, y: cy - wh / 2.0, w: wh, h: wh },
            appearance_hist: hist,
            shape_feature: vec![u8::from(fg); 4],
            local_bow: vec![1.0, 0.0, 0.0],
            objectness_score: if fg { 1.0 } else { -1.0 },
            motion_score: if fg { 0.5 } else { -0.5 },
        }
    }

    fn two_track_video() -> VideoRecord {
        let mut proposals = Vec::new();
        for f in 0..10 {
            proposals.push(blob_proposal(f, 0.2, 0.2, 0.1, 0, 4, true));
        }
        for f in 10..20 {
            proposals.push(blob_proposal(f, 0.8, 0.8, 0.1, 1, 4, true));
        }
        VideoRecord {
            video_id: "v0".into(),
            num_frames: 20,
            action_label: None,
            parse_annotations: None,
            proposals,
        }
    }

    #[test]
    fn neg_infinity_threshold_keeps_everything() {
        let mut video = two_track_video();
        for f in 0..20 {
            video.proposals.push(blob_proposal(f, 0.5, 0.5, 0.3, 3, 4, false));
        }
        let cfg = HierarchyConfig {
            foreground_threshold: f64::NEG_INFINITY,
            ..HierarchyConfig::default()
        };
        let kept = score_and_prune_proposals(&video, &cfg, 1).unwrap();
        assert_eq!(kept.len(), video.proposals.len());
    }

    #[test]
    fn separable_appearance_keeps_seeds_and_drops_negatives() {
        let mut video = two_track_video();
        let fg_count = video.proposals.len();
        for f in 0..20 {
            video.proposals.push(blob_proposal(f, 0.5, 0.5, 0.3, 3, 4, false));
        }
        let cfg = HierarchyConfig {
            foreground_threshold: -0.5,
            top_n_seed_positives: 1,
            ..HierarchyConfig::default()
        };
        let kept = score_and_prune_proposals(&video, &cfg, 7).unwrap();
        for i in 0..fg_count {
            assert!(kept.contains(&i), "foreground proposal {i} was pruned");
        }
        for i in fg_count..video.proposals.len() {
            assert!(!kept.contains(&i), "background proposal {i} survived");
        }
    }

    #[test]
    fn single_proposal_video_keeps_all_with_warning() {
        let video = VideoRecord {
            video_id: "tiny".into(),
            num_frames: 3,
            action_label: None,
            parse_annotations: None,
            proposals: vec![blob_proposal(0, 0.5, 0.5, 0.2, 0, 4, true)],
        };
        let kept =
            score_and_prune_proposals(&video, &HierarchyConfig::default(), 0).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn pool_recovers_two_disjoint_tracks() {
        let video = two_track_video();
        let kept: Vec<usize> = (0..video.proposals.len()).collect();
        let cfg = HierarchyConfig {
            num_st_clusters: ClusterCount::Fixed(2),
            ..HierarchyConfig::default()
        };
        let segs = pool_spatiotemporal_segments(&video, &kept, &cfg, 5).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].member_proposals, (0..10).collect::<Vec<_>>());
        assert_eq!(segs[1].member_proposals, (10..20).collect::<Vec<_>>());
        assert_eq!(segs[0].time_span, (0, 9));
        assert_eq!(segs[1].time_span, (10, 19));
        let sum: f64 = segs[0].bow.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pool_with_k_equal_members_gives_singletons() {
        let video = two_track_video();
        let kept: Vec<usize> = (0..4).collect();
        let cfg = HierarchyConfig {
            num_st_clusters: ClusterCount::Fixed(4),
            ..HierarchyConfig::default()
        };
        let segs = pool_spatiotemporal_segments(&video, &kept, &cfg, 3).unwrap();
        assert_eq!(segs.len(), 4);
        assert!(segs.iter().all(|s| s.member_proposals.len() == 1));
    }

    #[test]
    fn singleton_segment_gives_root_only_tree() {
        let video = two_track_video();
        let seg = make_segment(&video, vec![0, 1, 2], 0).unwrap();
        let tree = build_hierarchy(&video, vec![seg], &HierarchyConfig::default()).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.parent, vec![None]);
        assert_eq!(tree.validate(0.8), Ok(()));
    }

    #[test]
    fn two_segments_give_root_with_two_children() {
        let video = two_track_video();
        let a = make_segment(&video, (0..10).collect(), 0).unwrap();
        let b = make_segment(&video, (10..20).collect(), 1).unwrap();
        let tree = build_hierarchy(&video, vec![a, b], &HierarchyConfig::default()).unwrap();
        assert_eq!(tree.nodes.len(), 3);
        assert_eq!(tree.parent[1], Some(0));
        assert_eq!(tree.parent[2], Some(0));
        assert_eq!(tree.nodes[0].member_proposals, (0..20).collect::<Vec<_>>());
        assert_eq!(tree.root_feature().len(), 3);
    }

    #[test]
    fn planted_pairs_merge_before_cross_pairs_and_match_naive_greedy() {
        // Four segments forming two similar pairs far apart in appearance,
        // space, and time.
        let mut proposals = Vec::new();
        for f in 0..4 {
            proposals.push(blob_proposal(f, 0.15, 0.15, 0.10, 0, 4, true));
        }
        for f in 4..8 {
            proposals.push(blob_proposal(f, 0.21, 0.21, 0.11, 0, 4, true));
        }
        for f in 12..16 {
            proposals.push(blob_proposal(f, 0.80, 0.80, 0.30, 1, 4, true));
        }
        for f in 16..20 {
            proposals.push(blob_proposal(f, 0.86, 0.86, 0.31, 1, 4, true));
        }
        let video = VideoRecord {
            video_id: "pairs".into(),
            num_frames: 20,
            action_label: None,
            parse_annotations: None,
            proposals,
        };
        let segs: Vec<SpatioTemporalSegment> = (0..4)
            .map(|s| make_segment(&video, (s * 4..(s + 1) * 4).collect(), s).unwrap())
            .collect();

        // Independent naive greedy: recompute all pair similarities from
        // scratch each round and merge the argmax.
        let mut groups: Vec<(usize, Vec<usize>)> =
            segs.iter().map(|s| (s.segment_id, s.member_proposals.clone())).collect();
        let mut naive_merges: Vec<(usize, usize)> = Vec::new();
        let mut next = 4;
        while groups.len() > 1 {
            let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
            for i in 0..groups.len() {
                for j in (i + 1)..groups.len() {
                    let sa = make_segment(&video, groups[i].1.clone(), 0).unwrap();
                    let sb = make_segment(&video, groups[j].1.clone(), 0).unwrap();
                    let sim = merge_similarity(&video, &sa, &sb);
                    let key = (groups[i].0.min(groups[j].0), groups[i].0.max(groups[j].0));
                    let better = match &best {
                        None => true,
                        Some((bs, bkey, _, _)) => sim > *bs || (sim == *bs && key < *bkey),
                    };
                    if better {
                        best = Some((sim, key, i, j));
                    }
                }
            }
            let (_, key, i, j) = best.unwrap();
            naive_merges.push(key);
            let mut members = groups[i].1.clone();
            members.extend(groups[j].1.clone());
            let (i, j) = (i.min(j), i.max(j));
            groups.remove(j);
            groups.remove(i);
            groups.push((next, members));
            next += 1;
        }
        // Both planted pairs merge before any cross-pair merge; which pair
        // goes first depends on sub-ulp similarity differences.
        let mut first_two = naive_merges[..2].to_vec();
        first_two.sort_unstable();
        assert_eq!(first_two, vec![(0, 1), (2, 3)]);

        let tree = build_hierarchy(&video, segs, &HierarchyConfig::default()).unwrap();
        assert_eq!(tree.validate(0.8), Ok(()));
        // Leaves of each planted pair share a parent that is not the root.
        let leaf = |members: &Vec<usize>| {
            tree.nodes.iter().position(|n| &n.member_proposals == members).unwrap()
        };
        let l0 = leaf(&(0..4).collect());
        let l1 = leaf(&(4..8).collect());
        let l2 = leaf(&(8..12).collect());
        let l3 = leaf(&(12..16).collect());
        assert_eq!(tree.parent[l0], tree.parent[l1]);
        assert_eq!(tree.parent[l2], tree.parent[l3]);
        assert_ne!(tree.parent[l0], tree.parent[l2]);
    }

    #[test]
    fn overgrown_parent_is_trimmed() {
        // Segments sized 8, 1, 1: the first merge of (8, 1) creates a parent
        // sharing 8/9 > 0.8 with its big child, which must be spliced out.
        let mut proposals = Vec::new();
        for f in 0..8 {
            proposals.push(blob_proposal(f, 0.2 + 0.01 * f as f64, 0.2, 0.1, 0, 4, true));
        }
        proposals.push(blob_proposal(8, 0.25, 0.25, 0.1, 0, 4, true));
        proposals.push(blob_proposal(18, 0.8, 0.8, 0.3, 1, 4, true));
        let video = VideoRecord {
            video_id: "trim".into(),
            num_frames: 20,
            action_label: None,
            parse_annotations: None,
            proposals,
        };
        let segs = vec![
            make_segment(&video, (0..8).collect(), 0).unwrap(),
            make_segment(&video, vec![8], 1).unwrap(),
            make_segment(&video, vec![9], 2).unwrap(),
        ];
        let tree = build_hierarchy(&video, segs, &HierarchyConfig::default()).unwrap();
        assert_eq!(tree.validate(0.8), Ok(()));
        // The intermediate 9-member parent is gone: root plus three leaves.
        assert_eq!(tree.nodes.len(), 4);
        for i in 1..4 {
            assert_eq!(tree.parent[i], Some(0));
        }
    }

    #[test]
    fn tree_file_round_trip() {
        let video = two_track_video();
        let a = make_segment(&video, (0..10).collect(), 0).unwrap();
        let b = make_segment(&video, (10..20).collect(), 1).unwrap();
        let tree = build_hierarchy(&video, vec![a, b], &HierarchyConfig::default()).unwrap();
        let header = TreeFileHeader {
            mode: DatasetMode::Recognition,
            d_a: 4,
            d_b: 3,
            k: 2,
            trim_overlap: 0.8,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trees.jsonl");
        save_trees(&path, &header, std::slice::from_ref(&tree)).unwrap();
        let (h2, back) = load_trees(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(back, vec![tree]);
    }

    #[test]
    fn build_all_trees_is_deterministic() {
        let mut videos = Vec::new();
        for v in 0..4 {
            let mut video = two_track_video();
            video.video_id = format!("v{v}");
            videos.push(video);
        }
        let labels = crate::data::LabelSpaces::from_videos(&videos);
        let ds = Dataset {
            header: DatasetHeader { d_a: 4, d_b: 3, k: 2, mode: DatasetMode::Recognition },
            videos,
            labels,
        };
        let cfg = HierarchyConfig {
            num_st_clusters: ClusterCount::Fixed(3),
            ..HierarchyConfig::default()
        };
        let a = build_all_trees(&ds, &cfg, 11).unwrap();
        let b = build_all_trees(&ds, &cfg, 11).unwrap();
        assert_eq!(a, b);
    }
}
