//! Discovery of mid-level action elements and the parsing label vocabulary.
//!
//! For each action class, the non-root segments of its training trees are
//! pooled and clustered on bag-of-words plus spatial cues. Each initial
//! cluster trains a classifier against other-action segments; clusters
//! whose classifiers fire on the same sibling clusters are merged by
//! spectral clustering on that co-firing affinity, and each merged group
//! becomes one element with a freshly trained classifier. Parsing mode
//! instead builds one classifier per annotated label (background included)
//! from nodes associated to labels by maximum temporal overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hierarchy::SegmentTree;
use crate::model::{ModelError, ModelSpaces, ScoreTable};
use crate::numerics::{
    mix_seed, rng_from, spectral_cluster, svm_score, train_linear_svm, LinearSvmModel, NumError,
    SymMatrix,
};

const DISCOVERY_SVM_C: f64 = 10.0;
const DISCOVERY_SVM_EPOCHS: usize = 100;
/// Negatives are capped at this multiple of the positive count.
const NEGATIVE_CAP_FACTOR: usize = 10;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("numerics: {0}")]
    Num(#[from] NumError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeCount {
    /// One third of the initial cluster count, rounded up.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub init_clusters_per_action: usize,
    /// Initial clusters below this size are discarded.
    pub min_cluster_size: usize,
    /// Detections each cluster classifier contributes to the co-firing
    /// affinity.
    pub top_k_detections: usize,
    pub final_maes_per_action: MaeCount,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            init_clusters_per_action: 50,
            min_cluster_size: 5,
            top_k_detections: 5,
            final_maes_per_action: MaeCount::Auto,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if self.init_clusters_per_action == 0 {
            return Err(DiscoveryError::Invalid("init_clusters_per_action must be positive".into()));
        }
        if self.min_cluster_size < 2 {
            return Err(DiscoveryError::Invalid("min_cluster_size must be at least 2".into()));
        }
        if self.top_k_detections == 0 {
            return Err(DiscoveryError::Invalid("top_k_detections must be positive".into()));
        }
        if let MaeCount::Fixed(0) = self.final_maes_per_action {
            return Err(DiscoveryError::Invalid("final_maes_per_action must be positive".into()));
        }
        Ok(())
    }
}

/// One pooled non-root segment with the cues discovery clusters on.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSegment {
    pub tree_index: usize,
    pub video_id: String,
    pub node_id: usize,
    pub action: usize,
    pub bow: Vec<f64>,
    /// (center x, center y, height, width) of the mean bounding box.
    pub spatial: [f64; 4],
}

/// Flattens every non-root node of every tree, in tree order then node-id
/// order; `actions[t]` is the action id of tree `t`.
pub fn pool_segments(trees: &[SegmentTree], actions: &[usize]) -> Vec<PooledSegment> {
    assert_eq!(trees.len(), actions.len(), "one action id per tree");
    let mut pool = Vec::new();
    for (t, tree) in trees.iter().enumerate() {
        for node in 1..tree.nodes.len() {
            let seg = &tree.nodes[node];
            let (cx, cy) = seg.mean_bbox.center();
            pool.push(PooledSegment {
                tree_index: t,
                video_id: tree.video_id.clone(),
                node_id: node,
                action: actions[t],
                bow: seg.bow.clone(),
                spatial: [cx, cy, seg.mean_bbox.h, seg.mean_bbox.w],
            });
        }
    }
    pool
}

/// `1 - sum_d min(a[d], b[d])` on L1-normalized histograms.
pub fn hist_intersection_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    1.0 - a.iter().zip(b).map(|(&x, &y)| x.min(y)).sum::<f64>()
}

/// An initial cluster: member indices into the pooled segment list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitCluster {
    pub members: Vec<usize>,
}

/// Clusters one action's pooled segments on bag-of-words plus spatial
/// cues with affinity `exp(-d_bow - d_spatial)`, then discards clusters
/// below the minimum size. Too few segments yield zero clusters.
pub fn init_clusters(
    pool: &[PooledSegment],
    action: usize,
    cfg: &DiscoveryConfig,
    seed: u64,
) -> Result<Vec<InitCluster>, DiscoveryError> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].action == action).collect();
    if idx.len() < cfg.min_cluster_size {
        warn!(
            "action {action}: only {} segments, below the minimum cluster size; no clusters",
            idx.len()
        );
        return Ok(Vec::new());
    }
    let n = idx.len();
    let affinity = SymMatrix::from_fn(n, |a, b| {
        if a == b {
            return 1.0;
        }
        let sa = &pool[idx[a]];
        let sb = &pool[idx[b]];
        let d_bow = hist_intersection_distance(&sa.bow, &sb.bow);
        let d_spatial = sa
            .spatial
            .iter()
            .zip(&sb.spatial)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        (-(d_bow + d_spatial)).exp()
    });
    let k = cfg.init_clusters_per_action.min(n);
    let labels = spectral_cluster(&affinity, k, mix_seed(seed, 0xD15C + action as u64))?;
    let num = labels.iter().max().map(|&l| l + 1).unwrap_or(0);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); num];
    for (local, &c) in labels.iter().enumerate() {
        clusters[c].push(idx[local]);
    }
    clusters.retain(|c| c.len() >= cfg.min_cluster_size);
    clusters.sort_by_key(|c| c[0]);
    Ok(clusters.into_iter().map(|members| InitCluster { members }).collect())
}

/// One discovered element: its owner action, member segments, and the
/// classifier scoring new segments against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeCluster {
    pub mae_id: usize,
    pub owner_action: usize,
    /// (video_id, node id) of every member segment.
    pub member_segments: Vec<(String, usize)>,
    pub classifier: LinearSvmModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MAEVocabulary {
    pub actions: Vec<String>,
    pub d_b: usize,
    pub maes: Vec<MaeCluster>,
}

impl MAEVocabulary {
    /// Index spaces for the joint model; element names are synthesized as
    /// `action:ordinal`.
    pub fn spaces(&self) -> ModelSpaces {
        let mut per_action = vec![0usize; self.actions.len()];
        let mut names = Vec::with_capacity(self.maes.len());
        let mut owners = Vec::with_capacity(self.maes.len());
        for m in &self.maes {
            names.push(format!("{}:{}", self.actions[m.owner_action], per_action[m.owner_action]));
            owners.push(m.owner_action);
            per_action[m.owner_action] += 1;
        }
        ModelSpaces { actions: self.actions.clone(), mae_names: names, mae_owner: owners }
    }

    /// Stable content hash of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("vocabulary serializes");
        hex_digest(&json)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiscoveryError> {
        let file = File::create(path.as_ref())
            .map_err(|e| DiscoveryError::Invalid(format!("create vocabulary file: {e}")))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| DiscoveryError::Invalid(format!("serialize vocabulary: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MAEVocabulary, DiscoveryError> {
        let file = File::open(path.as_ref())
            .map_err(|e| DiscoveryError::Invalid(format!("open vocabulary file: {e}")))?;
        let vocab: MAEVocabulary = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DiscoveryError::Invalid(format!("parse vocabulary: {e}")))?;
        vocab.check()?;
        Ok(vocab)
    }

    fn check(&self) -> Result<(), DiscoveryError> {
        for (i, m) in self.maes.iter().enumerate() {
            if m.mae_id != i {
                return Err(DiscoveryError::Invalid(format!(
                    "element {i} carries id {}",
                    m.mae_id
                )));
            }
            if m.owner_action >= self.actions.len() {
                return Err(DiscoveryError::Invalid(format!(
                    "element {i} owned by unknown action {}",
                    m.owner_action
                )));
            }
            if m.classifier.weights.len() != self.d_b {
                return Err(DiscoveryError::Invalid(format!(
                    "element {i} classifier has {} weights, expected {}",
                    m.classifier.weights.len(),
                    self.d_b
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(content: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(content.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn subsampled_negatives(
    pool: &[PooledSegment],
    own_action: usize,
    cap: usize,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<f64>> {
    let mut idx: Vec<usize> =
        (0..pool.len()).filter(|&i| pool[i].action != own_action).collect();
    if idx.len() > cap {
        idx.shuffle(rng);
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx.into_iter().map(|i| pool[i].bow.clone()).collect()
}

fn train_cluster_classifier(
    pool: &[PooledSegment],
    members: &[usize],
    own_action: usize,
    seed: u64,
) -> Result<LinearSvmModel, DiscoveryError> {
    let pos: Vec<Vec<f64>> = members.iter().map(|&i| pool[i].bow.clone()).collect();
    let mut rng = rng_from(seed, 0x4E6A);
    let neg = subsampled_negatives(pool, own_action, NEGATIVE_CAP_FACTOR * pos.len(), &mut rng);
    if neg.is_empty() {
        return Err(DiscoveryError::Invalid(format!(
            "action {own_action} has no other-action segments to train against"
        )));
    }
    Ok(train_linear_svm(&pos, &neg, DISCOVERY_SVM_C, DISCOVERY_SVM_EPOCHS, mix_seed(seed, 0x7A1))?)
}

/// Co-firing affinity between one action's initial clusters: each
/// classifier scores every segment of its sibling clusters (never its own)
/// and keeps its overall top-K by score, ties to the lower pooled index;
/// entry (i, j) counts the clusters that received top-K detections from
/// both i and j. The diagonal is zero.
pub fn co_fire_affinity(
    pool: &[PooledSegment],
    clusters: &[InitCluster],
    classifiers: &[LinearSvmModel],
    top_k: usize,
) -> Result<SymMatrix, DiscoveryError> {
    let n = clusters.len();
    if classifiers.len() != n {
        return Err(DiscoveryError::Invalid(format!(
            "{} classifiers for {n} clusters",
            classifiers.len()
        )));
    }
    let mut cluster_of: BTreeMap<usize, usize> = BTreeMap::new();
    for (c, cl) in clusters.iter().enumerate() {
        for &m in &cl.members {
            cluster_of.insert(m, c);
        }
    }
    let mut fired: Vec<BTreeSet<usize>> = Vec::with_capacity(n);
    for (c, clf) in classifiers.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = Vec::new();
        for (other, cl) in clusters.iter().enumerate() {
            if other == c {
                continue;
            }
            for &m in &cl.members {
                scored.push((svm_score(clf, &pool[m].bow)?, m));
            }
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).expect("scores are finite").then(a.1.cmp(&b.1))
        });
        let hits: BTreeSet<usize> =
            scored.iter().take(top_k).map(|&(_, m)| cluster_of[&m]).collect();
        fired.push(hits);
    }
    let flat: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            if i == j {
                0.0
            } else {
                fired[i].intersection(&fired[j]).count() as f64
            }
        })
        .collect();
    Ok(SymMatrix::from_fn(n, |i, j| flat[i * n + j]))
}

/// Merges each action's initial clusters into the final element
/// vocabulary. An action with a single initial cluster keeps it as its
/// single element. Elements are numbered by (owner action, earliest pooled
/// member) so ids are stable across runs.
pub fn discriminative_merge(
    pool: &[PooledSegment],
    init_by_action: &[Vec<InitCluster>],
    action_names: &[String],
    d_b: usize,
    cfg: &DiscoveryConfig,
    seed: u64,
) -> Result<MAEVocabulary, DiscoveryError> {
    cfg.validate()?;
    if init_by_action.len() != action_names.len() {
        return Err(DiscoveryError::Invalid(format!(
            "{} cluster lists for {} actions",
            init_by_action.len(),
            action_names.len()
        )));
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new(); // (action, member pool indices)
    for (action, init) in init_by_action.iter().enumerate() {
        if init.is_empty() {
            warn!("action {}: no initial clusters; it owns no elements", action_names[action]);
            continue;
        }
        if init.len() == 1 {
            groups.push((action, init[0].members.clone()));
            continue;
        }
        // Train the per-cluster classifiers in parallel.
        let classifiers: Vec<LinearSvmModel> = init
            .par_iter()
            .enumerate()
            .map(|(c, cl)| {
                train_cluster_classifier(
                    pool,
                    &cl.members,
                    action,
                    mix_seed(seed, ((action as u64) << 20) | c as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        let affinity = co_fire_affinity(pool, init, &classifiers, cfg.top_k_detections)?;
        let k = match cfg.final_maes_per_action {
            MaeCount::Auto => (init.len() as f64 / 3.0).ceil() as usize,
            MaeCount::Fixed(k) => k,
        }
        .clamp(1, init.len());
        let labels =
            spectral_cluster(&affinity, k, mix_seed(seed, 0x3E26 + action as u64))?;
        let num = labels.iter().max().map(|&l| l + 1).unwrap_or(0);
        let mut merged: Vec<Vec<usize>> = vec![Vec::new(); num];
        for (c, &g) in labels.iter().enumerate() {
            merged[g].extend(init[c].members.iter().copied());
        }
        merged.retain(|m| !m.is_empty());
        for m in merged.iter_mut() {
            m.sort_unstable();
        }
        groups.extend(merged.into_iter().map(|m| (action, m)));
    }
    if groups.is_empty() {
        return Err(DiscoveryError::Invalid("no action produced any element".into()));
    }
    groups.sort_by_key(|(action, members)| (*action, members[0]));

    let classifiers: Vec<LinearSvmModel> = groups
        .par_iter()
        .enumerate()
        .map(|(g, (action, members))| {
            train_cluster_classifier(pool, members, *action, mix_seed(seed, 0xF17A + g as u64))
        })
        .collect::<Result<_, _>>()?;
    let maes = groups
        .into_iter()
        .zip(classifiers)
        .enumerate()
        .map(|(id, ((action, members), classifier))| MaeCluster {
            mae_id: id,
            owner_action: action,
            member_segments: members
                .iter()
                .map(|&m| (pool[m].video_id.clone(), pool[m].node_id))
                .collect(),
            classifier,
        })
        .collect();
    Ok(MAEVocabulary { actions: action_names.to_vec(), d_b, maes })
}

/// Full discovery driver: pool, cluster per action, merge.
pub fn discover_maes(
    trees: &[SegmentTree],
    actions: &[usize],
    action_names: &[String],
    d_b: usize,
    cfg: &DiscoveryConfig,
    seed: u64,
) -> Result<MAEVocabulary, DiscoveryError> {
    if trees.is_empty() {
        return Err(DiscoveryError::Invalid("no training trees".into()));
    }
    let pool = pool_segments(trees, actions);
    let init_by_action: Vec<Vec<InitCluster>> = (0..action_names.len())
        .map(|a| init_clusters(&pool, a, cfg, mix_seed(seed, 0x1817 + a as u64)))
        .collect::<Result<_, _>>()?;
    discriminative_merge(&pool, &init_by_action, action_names, d_b, cfg, seed)
}

/// Scores every non-root node of a tree with every element classifier.
pub fn assign_mae_scores(
    vocab: &MAEVocabulary,
    tree: &SegmentTree,
) -> Result<ScoreTable, DiscoveryError> {
    let nm = vocab.maes.len();
    let m = tree.num_non_root();
    let mut scores = Vec::with_capacity(m * nm);
    for node in 1..tree.nodes.len() {
        let bow = &tree.nodes[node].bow;
        for mae in &vocab.maes {
            scores.push(svm_score(&mae.classifier, bow)?);
        }
    }
    Ok(ScoreTable::new(m, nm, scores)?)
}

/// Fraction of training segments lying within histogram-intersection
/// distance 0.5 of at least one member of a same-action element. Reported
/// as a dataset diagnostic, never asserted.
pub fn inclusivity_fraction(
    vocab: &MAEVocabulary,
    trees: &[SegmentTree],
    actions: &[usize],
) -> f64 {
    let by_video: BTreeMap<&str, &SegmentTree> =
        trees.iter().map(|t| (t.video_id.as_str(), t)).collect();
    let mut member_bows: Vec<Vec<&[f64]>> = vec![Vec::new(); vocab.actions.len()];
    for mae in &vocab.maes {
        for (vid, node) in &mae.member_segments {
            if let Some(t) = by_video.get(vid.as_str()) {
                member_bows[mae.owner_action].push(&t.nodes[*node].bow);
            }
        }
    }
    let mut covered = 0usize;
    let mut total = 0usize;
    for (tree, &action) in trees.iter().zip(actions) {
        for node in 1..tree.nodes.len() {
            total += 1;
            let bow = &tree.nodes[node].bow;
            if member_bows[action]
                .iter()
                .any(|m| hist_intersection_distance(bow, m) <= 0.5)
            {
                covered += 1;
            }
        }
    }
    if total == 0 {
        return 1.0;
    }
    covered as f64 / total as f64
}

// ---------------------------------------------------------------------------
// Parsing label vocabulary
// ---------------------------------------------------------------------------

/// Per-label classifiers over a flat parsing label space. Label 0 is the
/// background and has its own classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsingVocabulary {
    pub labels: Vec<String>,
    pub d_b: usize,
    pub classifiers: Vec<LinearSvmModel>,
}

impl ParsingVocabulary {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("vocabulary serializes");
        hex_digest(&json)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiscoveryError> {
        let file = File::create(path.as_ref())
            .map_err(|e| DiscoveryError::Invalid(format!("create vocabulary file: {e}")))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| DiscoveryError::Invalid(format!("serialize vocabulary: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParsingVocabulary, DiscoveryError> {
        let file = File::open(path.as_ref())
            .map_err(|e| DiscoveryError::Invalid(format!("open vocabulary file: {e}")))?;
        let vocab: ParsingVocabulary = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DiscoveryError::Invalid(format!("parse vocabulary: {e}")))?;
        if vocab.classifiers.len() != vocab.labels.len() {
            return Err(DiscoveryError::Invalid(format!(
                "{} classifiers for {} labels",
                vocab.classifiers.len(),
                vocab.labels.len()
            )));
        }
        Ok(vocab)
    }

    /// Scores every non-root node with every label classifier.
    pub fn assign_scores(&self, tree: &SegmentTree) -> Result<ScoreTable, DiscoveryError> {
        let nm = self.classifiers.len();
        let m = tree.num_non_root();
        let mut scores = Vec::with_capacity(m * nm);
        for node in 1..tree.nodes.len() {
            for clf in &self.classifiers {
                scores.push(svm_score(clf, &tree.nodes[node].bow)?);
            }
        }
        Ok(ScoreTable::new(m, nm, scores)?)
    }
}

fn span_overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        0
    } else {
        hi - lo + 1
    }
}

/// Associates each non-root node with the annotated label of maximum
/// temporal overlap; ties pick the longer interval, then the lower label
/// id. Nodes overlapping nothing take label 0 (background).
pub fn associate_parse_labels(
    tree: &SegmentTree,
    labels: &[String],
) -> Result<Vec<usize>, DiscoveryError> {
    let id_of: BTreeMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let annotations = tree.parse_annotations.as_deref().unwrap_or(&[]);
    let resolved: Vec<(usize, (usize, usize))> = annotations
        .iter()
        .map(|a| {
            let id = *id_of.get(a.label.as_str()).ok_or_else(|| {
                DiscoveryError::Invalid(format!(
                    "video {}: annotation label {:?} is not in the label space",
                    tree.video_id, a.label
                ))
            })?;
            Ok((id, (a.start_frame, a.end_frame)))
        })
        .collect::<Result<_, DiscoveryError>>()?;
    let mut out = Vec::with_capacity(tree.num_non_root());
    for node in 1..tree.nodes.len() {
        let span = tree.nodes[node].time_span;
        let mut best: Option<(usize, usize, usize)> = None; // (overlap, length, label)
        for &(label, aspan) in &resolved {
            let ov = span_overlap(span, aspan);
            if ov == 0 {
                continue;
            }
            let len = aspan.1 - aspan.0 + 1;
            let better = match best {
                None => true,
                Some((bo, bl, blab)) => {
                    ov > bo || (ov == bo && (len > bl || (len == bl && label < blab)))
                }
            };
            if better {
                best = Some((ov, len, label));
            }
        }
        out.push(best.map(|(_, _, label)| label).unwrap_or(0));
    }
    Ok(out)
}

/// Trains one classifier per parsing label from associated node bags.
/// Labels with no associated nodes get a constant low-scoring classifier
/// with a warning so the table stays rectangular.
pub fn build_parsing_vocabulary(
    trees: &[SegmentTree],
    labels: &[String],
    d_b: usize,
    seed: u64,
) -> Result<ParsingVocabulary, DiscoveryError> {
    if labels.is_empty() {
        return Err(DiscoveryError::Invalid("empty parsing label space".into()));
    }
    if trees.is_empty() {
        return Err(DiscoveryError::Invalid("no training trees".into()));
    }
    let mut bows_by_label: Vec<Vec<Vec<f64>>> = vec![Vec::new(); labels.len()];
    for tree in trees {
        let assoc = associate_parse_labels(tree, labels)?;
        for node in 1..tree.nodes.len() {
            bows_by_label[assoc[node - 1]].push(tree.nodes[node].bow.clone());
        }
    }
    let classifiers: Vec<LinearSvmModel> = (0..labels.len())
        .into_par_iter()
        .map(|l| -> Result<LinearSvmModel, DiscoveryError> {
            let pos = &bows_by_label[l];
            if pos.is_empty() {
                warn!("parsing label {:?} has no associated nodes; constant classifier", labels[l]);
                return Ok(LinearSvmModel { weights: vec![0.0; d_b], bias: -1.0, c: DISCOVERY_SVM_C });
            }
            let mut neg: Vec<Vec<f64>> = Vec::new();
            for (other, bows) in bows_by_label.iter().enumerate() {
                if other != l {
                    neg.extend(bows.iter().cloned());
                }
            }
            let cap = NEGATIVE_CAP_FACTOR * pos.len();
            if neg.len() > cap {
                let mut order: Vec<usize> = (0..neg.len()).collect();
                let mut rng = rng_from(seed, 0xBA55 + l as u64);
                order.shuffle(&mut rng);
                order.truncate(cap);
                order.sort_unstable();
                neg = order.into_iter().map(|i| neg[i].clone()).collect();
            }
            if neg.is_empty() {
                warn!("parsing label {:?} has no negatives; constant classifier", labels[l]);
                return Ok(LinearSvmModel { weights: vec![0.0; d_b], bias: 1.0, c: DISCOVERY_SVM_C });
            }
            Ok(train_linear_svm(
                pos,
                &neg,
                DISCOVERY_SVM_C,
                DISCOVERY_SVM_EPOCHS,
                mix_seed(seed, 0xC1A5 + l as u64),
            )?)
        })
        .collect::<Result<_, _>>()?;
    Ok(ParsingVocabulary { labels: labels.to_vec(), d_b, classifiers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;
    use crate::hierarchy::SpatioTemporalSegment;

    fn seg(pool_action: usize, bow: Vec<f64>, cx: f64, cy: f64) -> PooledSegment {
        PooledSegment {
            tree_index: 0,
            video_id: "v".into(),
            node_id: 1,
            action: pool_action,
            bow,
            spatial: [cx, cy, 0.1, 0.1],
        }
    }

    #[test]
    fn intersection_distance_examples() {
        let a = vec![0.5, 0.5, 0.0];
        assert!(hist_intersection_distance(&a, &a).abs() < 1e-12);
        let b = vec![0.0, 0.0, 1.0];
        assert!((hist_intersection_distance(&a, &b) - 1.0).abs() < 1e-12);
        let c = vec![0.5, 0.0, 0.5];
        assert!((hist_intersection_distance(&a, &c) - 0.5).abs() < 1e-12);
    }

    fn style_bow(style: usize) -> Vec<f64> {
        let mut b = vec![0.0; 6];
        b[style * 2] = 0.7;
        b[style * 2 + 1] = 0.3;
        b
    }

    fn planted_pool(per_style: usize) -> (Vec<PooledSegment>, Vec<usize>) {
        // Three styles of one action plus other-action filler, with
        // deterministic small jitter on the spatial cue.
        let mut pool = Vec::new();
        let mut styles = Vec::new();
        let centers = [(0.2, 0.2), (0.8, 0.2), (0.5, 0.8)];
        for style in 0..3 {
            for i in 0..per_style {
                let (cx, cy) = centers[style];
                let jitter = (i % 5) as f64 * 0.01;
                pool.push(seg(0, style_bow(style), cx + jitter, cy - jitter));
                styles.push(style);
            }
        }
        for i in 0..12 {
            let mut b = vec![0.0; 6];
            b[i % 6] = 1.0;
            pool.push(seg(1, b, 0.5, 0.5));
            styles.push(99);
        }
        (pool, styles)
    }

    #[test]
    fn init_clusters_recover_planted_styles() {
        let (pool, styles) = planted_pool(20);
        let cfg = DiscoveryConfig {
            init_clusters_per_action: 6,
            ..DiscoveryConfig::default()
        };
        let clusters = init_clusters(&pool, 0, &cfg, 9).unwrap();
        assert!(clusters.len() >= 3, "got {} clusters", clusters.len());
        let mut seen_styles = BTreeSet::new();
        for cl in &clusters {
            let mut counts = BTreeMap::new();
            for &m in &cl.members {
                *counts.entry(styles[m]).or_insert(0usize) += 1;
            }
            let (&maj, &cnt) = counts.iter().max_by_key(|(_, &c)| c).unwrap();
            let purity = cnt as f64 / cl.members.len() as f64;
            assert!(purity >= 0.9, "cluster purity {purity} below 0.9");
            seen_styles.insert(maj);
        }
        assert_eq!(seen_styles.len(), 3, "some planted style has no pure cluster");
    }

    #[test]
    fn too_few_segments_give_zero_clusters() {
        let pool = vec![seg(0, style_bow(0), 0.2, 0.2); 3];
        let cfg = DiscoveryConfig::default(); // min size 5
        assert!(init_clusters(&pool, 0, &cfg, 1).unwrap().is_empty());
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        let mut cfg = DiscoveryConfig::default();
        cfg.min_cluster_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = DiscoveryConfig::default();
        cfg.final_maes_per_action = MaeCount::Fixed(0);
        assert!(cfg.validate().is_err());
    }

    fn constant_classifier(d: usize, bias: f64) -> LinearSvmModel {
        LinearSvmModel { weights: vec![0.0; d], bias, c: 1.0 }
    }

    #[test]
    fn identical_firing_maximizes_affinity_and_disjoint_firing_zeroes_it() {
        // Four clusters; classifiers 0 and 1 both score cluster-2 members
        // highest (co-fire on {2}); classifier 3 fires on cluster 0 only.
        let mut pool = Vec::new();
        for c in 0..4 {
            for i in 0..2 {
                let mut bow = vec![0.0; 4];
                bow[c] = 1.0;
                let mut s = seg(0, bow, 0.1 * (c as f64 + 1.0), 0.5);
                s.node_id = c * 2 + i + 1;
                pool.push(s);
            }
        }
        let clusters: Vec<InitCluster> =
            (0..4).map(|c| InitCluster { members: vec![c * 2, c * 2 + 1] }).collect();
        // Classifier k scores a bow by its weight on the target dimension.
        let mk = |target: usize| {
            let mut w = vec![0.0; 4];
            w[target] = 1.0;
            LinearSvmModel { weights: w, bias: 0.0, c: 1.0 }
        };
        let classifiers = vec![mk(2), mk(2), mk(0), mk(0)];
        let a = co_fire_affinity(&pool, &clusters, &classifiers, 2).unwrap();
        assert_eq!(a.get(0, 1), 1.0); // both fire on cluster 2
        assert_eq!(a.get(2, 3), 1.0); // both fire on cluster 0
        assert_eq!(a.get(0, 2), 0.0);
        assert_eq!(a.get(1, 3), 0.0);
        assert_eq!(a.get(0, 0), 0.0); // zero diagonal
    }

    #[test]
    fn single_cluster_action_becomes_its_only_element() {
        let (pool, _) = planted_pool(4);
        let init = vec![
            vec![InitCluster { members: (0..12).collect() }],
            vec![InitCluster { members: (12..24).collect() }],
        ];
        let vocab = discriminative_merge(
            &pool,
            &init,
            &["a".into(), "b".into()],
            6,
            &DiscoveryConfig::default(),
            3,
        )
        .unwrap();
        assert_eq!(vocab.maes.len(), 2);
        assert_eq!(vocab.maes[0].owner_action, 0);
        assert_eq!(vocab.maes[1].owner_action, 1);
        assert_eq!(vocab.maes[0].member_segments.len(), 12);
        let spaces = vocab.spaces();
        spaces.validate().unwrap();
        assert_eq!(spaces.mae_names, vec!["a:0".to_string(), "b:0".to_string()]);
    }

    #[test]
    fn vocabulary_round_trip_and_fingerprint_stability() {
        let (pool, _) = planted_pool(4);
        let init = vec![
            vec![InitCluster { members: (0..12).collect() }],
            vec![InitCluster { members: (12..24).collect() }],
        ];
        let vocab = discriminative_merge(
            &pool,
            &init,
            &["a".into(), "b".into()],
            6,
            &DiscoveryConfig::default(),
            3,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        vocab.save(&path).unwrap();
        let back = MAEVocabulary::load(&path).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.fingerprint(), vocab.fingerprint());
        let mut altered = vocab.clone();
        altered.maes[0].classifier.bias += 1e-9;
        assert_ne!(altered.fingerprint(), vocab.fingerprint());
    }

    fn leaf_tree(video_id: &str, spans: &[(usize, usize)], num_frames: usize) -> SegmentTree {
        // Root + one leaf per span; bows are one-hot by leaf index.
        let d_b = spans.len().max(2);
        let mut nodes = vec![SpatioTemporalSegment {
            segment_id: 0,
            member_proposals: (0..spans.len()).collect(),
            time_span: (0, num_frames - 1),
            mean_bbox: BBox { x: 0.25, y: 0.25, w: 0.5, h: 0.5 },
            bow: vec![1.0 / d_b as f64; d_b],
            appearance: vec![1.0],
        }];
        let mut parent = vec![None];
        for (i, &span) in spans.iter().enumerate() {
            let mut bow = vec![0.0; d_b];
            bow[i % d_b] = 1.0;
            nodes.push(SpatioTemporalSegment {
                segment_id: i + 1,
                member_proposals: vec![i],
                time_span: span,
                mean_bbox: BBox { x: 0.4, y: 0.4, w: 0.2, h: 0.2 },
                bow,
                appearance: vec![1.0],
            });
            parent.push(Some(0));
        }
        SegmentTree {
            video_id: video_id.into(),
            num_frames,
            action_label: None,
            parse_annotations: None,
            nodes,
            parent,
        }
    }

    #[test]
    fn association_picks_max_overlap_then_longer_then_lower_id() {
        use crate::data::ParseInterval;
        let mut tree = leaf_tree("p", &[(0, 9), (20, 29), (40, 49)], 60);
        tree.parse_annotations = Some(vec![
            // Leaf 1 overlaps this by 6 frames and the next by 4.
            ParseInterval { label: "x".into(), start_frame: 0, end_frame: 5, level: 1 },
            ParseInterval { label: "y".into(), start_frame: 6, end_frame: 9, level: 1 },
            // Leaf 2 is covered by both: equal overlap, the longer wins.
            ParseInterval { label: "y".into(), start_frame: 20, end_frame: 29, level: 1 },
            ParseInterval { label: "x".into(), start_frame: 15, end_frame: 34, level: 2 },
        ]);
        let labels = vec!["__background__".into(), "x".into(), "y".into()];
        let assoc = associate_parse_labels(&tree, &labels).unwrap();
        assert_eq!(assoc[0], 1); // 6-frame overlap with "x" beats 4 with "y"
        assert_eq!(assoc[1], 1); // tie at 10 frames: 20-frame "x" interval wins
        assert_eq!(assoc[2], 0); // overlaps nothing: background
    }

    #[test]
    fn association_tie_on_length_picks_lower_label_id() {
        use crate::data::ParseInterval;
        let mut tree = leaf_tree("p", &[(10, 19)], 40);
        tree.parse_annotations = Some(vec![
            ParseInterval { label: "y".into(), start_frame: 10, end_frame: 19, level: 1 },
            ParseInterval { label: "x".into(), start_frame: 10, end_frame: 19, level: 1 },
        ]);
        let labels = vec!["__background__".into(), "x".into(), "y".into()];
        let assoc = associate_parse_labels(&tree, &labels).unwrap();
        assert_eq!(assoc[0], 1);
    }

    #[test]
    fn parsing_vocabulary_separates_planted_labels() {
        use crate::data::ParseInterval;
        let mut trees = Vec::new();
        for v in 0..6 {
            let mut t = leaf_tree(&format!("v{v}"), &[(0, 9), (20, 29)], 40);
            t.parse_annotations = Some(vec![
                ParseInterval { label: "x".into(), start_frame: 0, end_frame: 9, level: 1 },
                ParseInterval { label: "y".into(), start_frame: 20, end_frame: 29, level: 1 },
            ]);
            trees.push(t);
        }
        let labels = vec!["__background__".into(), "x".into(), "y".into()];
        let vocab = build_parsing_vocabulary(&trees, &labels, 2, 5).unwrap();
        assert_eq!(vocab.classifiers.len(), 3);
        let table = vocab.assign_scores(&trees[0]).unwrap();
        // Leaf 1 carries the "x" bow: its "x" score beats its "y" score.
        assert!(table.get(1, 1) > table.get(1, 2));
        assert!(table.get(2, 2) > table.get(2, 1));
    }

    #[test]
    fn score_table_has_contract_shape_and_bias_column() {
        let (pool, _) = planted_pool(4);
        let tree = leaf_tree("v", &[(0, 9), (10, 19), (20, 29)], 30);
        let init = vec![
            vec![InitCluster { members: (0..12).collect() }],
            vec![InitCluster { members: (12..24).collect() }],
        ];
        let mut vocab = discriminative_merge(
            &pool,
            &init,
            &["a".into(), "b".into()],
            6,
            &DiscoveryConfig::default(),
            3,
        )
        .unwrap();
        // A zero-weight classifier with bias contributes a constant column.
        vocab.maes[1].classifier = constant_classifier(6, 0.75);
        let tree6 = {
            let mut t = tree.clone();
            for n in t.nodes.iter_mut() {
                t_pad(&mut n.bow, 6);
            }
            t
        };
        let table = assign_mae_scores(&vocab, &tree6).unwrap();
        assert_eq!(table.num_nodes, 3);
        assert_eq!(table.num_maes, 2);
        for node in 1..=3 {
            assert_eq!(table.get(node, 1), 0.75);
        }
    }

    fn t_pad(bow: &mut Vec<f64>, d: usize) {
        bow.resize(d, 0.0);
    }

    #[test]
    fn inclusivity_fraction_counts_covered_segments() {
        // Leaf bows are one-hot: node 1 is itself a member (distance 0),
        // node 2 has disjoint support (distance 1 > 0.5).
        let tree = leaf_tree("v0", &[(0, 9), (20, 29)], 40);
        let vocab = MAEVocabulary {
            actions: vec!["a".into()],
            d_b: 2,
            maes: vec![MaeCluster {
                mae_id: 0,
                owner_action: 0,
                member_segments: vec![("v0".into(), 1)],
                classifier: constant_classifier(2, 0.0),
            }],
        };
        let f = inclusivity_fraction(&vocab, &[tree], &[0]);
        assert!((f - 0.5).abs() < 1e-12);
        assert_eq!(inclusivity_fraction(&vocab, &[], &[]), 1.0);
    }
}
