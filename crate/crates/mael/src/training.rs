//! Structured-SVM learning by cutting planes with margin rescaling.
//!
//! Both recognition (video class + element labels, 0/1 class loss) and
//! parsing (per-node labels, normalized Hamming loss) train the same way:
//! repeatedly find each video's most violated constraint with
//! loss-augmented inference, add it to an active set (one slack per
//! video), and re-solve the active-set objective exactly in its dual by
//! block-coordinate Frank-Wolfe with closed-form line search, until no
//! constraint is violated beyond the tolerance.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetMode;
use crate::hierarchy::SegmentTree;
use crate::inference::{infer_loss_augmented_recognition, infer_parsing_loss_augmented};
use crate::model::{
    bin_s_index, bin_t, Labeling, ModelError, ModelParams, ModelSpaces, ScoreTable,
    NUM_SPATIAL_BINS, NUM_TEMPORAL_BINS,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Regularization trade-off: weight of the total slack.
    pub c: f64,
    /// A constraint violated by no more than this is considered satisfied.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Coordinate sweeps per active-set re-solve.
    pub qp_inner: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { c: 10.0, tolerance: 1e-3, max_iterations: 100, qp_inner: 400, seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(TrainError::Invalid(format!("c must be positive, got {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(TrainError::Invalid(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 || self.qp_inner == 0 {
            return Err(TrainError::Invalid(
                "max_iterations and qp_inner must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    /// Fingerprint of the vocabulary the score tables came from.
    pub vocab_hash: String,
    /// Accepted (improving) values of the regularized objective.
    pub objective_trace: Vec<f64>,
    pub mode: DatasetMode,
}

impl TrainedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let file = File::create(path.as_ref())
            .map_err(|e| TrainError::Invalid(format!("create model file: {e}")))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| TrainError::Invalid(format!("serialize model: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel, TrainError> {
        let file = File::open(path.as_ref())
            .map_err(|e| TrainError::Invalid(format!("open model file: {e}")))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| TrainError::Invalid(format!("parse model: {e}")))
    }
}

/// One row of the per-iteration convergence log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Regularized objective of the current iterate (raw, not monotone).
    pub objective: f64,
    /// Largest constraint violation found this iteration.
    pub max_violation: f64,
    pub num_constraints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub converged: bool,
    pub iterations: usize,
    pub iteration_log: Vec<IterationRecord>,
    /// Final slack per training video under the active constraint set.
    pub final_slacks: Vec<f64>,
}

/// One recognition training video: its tree, detection scores, class, and
/// the element assignment fixed by discovery.
#[derive(Debug, Clone)]
pub struct RecognitionSample<'a> {
    pub tree: &'a SegmentTree,
    pub table: &'a ScoreTable,
    pub action: usize,
    pub truth: Labeling,
}

/// One parsing training video: its tree, label scores, and the per-node
/// reference labels from ground-truth association.
#[derive(Debug, Clone)]
pub struct ParsingSample<'a> {
    pub tree: &'a SegmentTree,
    pub table: &'a ScoreTable,
    pub truth: Vec<usize>,
}

/// Feature map linearizing the joint score: `score = params . phi` for any
/// feasible labeling, with blocks laid out exactly as the flat parameter
/// vector (detection pairs, spatial cells, temporal bins, then per-action
/// whole-video features).
pub fn joint_feature_map(
    spaces: &ModelSpaces,
    tree: &SegmentTree,
    table: &ScoreTable,
    labeling: &Labeling,
    d_b: usize,
) -> Result<Vec<f64>, TrainError> {
    let na = spaces.num_actions();
    let nm = spaces.num_maes();
    if labeling.action >= na {
        return Err(TrainError::Invalid(format!("action {} is out of range", labeling.action)));
    }
    let mut phi = vec![0.0; ModelParams::weight_len(na, nm, d_b)];
    let owned_empty = spaces.maes_of_action(labeling.action).is_empty();
    if !(labeling.mae.is_empty() && owned_empty) {
        if labeling.mae.len() != tree.num_non_root() {
            return Err(TrainError::Invalid(format!(
                "labeling covers {} nodes, tree has {}",
                labeling.mae.len(),
                tree.num_non_root()
            )));
        }
        for node in 1..tree.nodes.len() {
            let h = *labeling
                .mae
                .get(&node)
                .ok_or_else(|| TrainError::Invalid(format!("node {node} is unlabeled")))?;
            if h >= nm {
                return Err(TrainError::Invalid(format!("element {h} is out of range")));
            }
            if spaces.mae_owner[h] != labeling.action {
                return Err(TrainError::Invalid(format!(
                    "element {h} is not owned by action {}",
                    labeling.action
                )));
            }
            phi[2 * h] += table.get(node, h);
            phi[2 * h + 1] += 1.0;
            phi[2 * nm + NUM_SPATIAL_BINS * h + bin_s_index(tree, node)] += 1.0;
            phi[(2 + NUM_SPATIAL_BINS) * nm + NUM_TEMPORAL_BINS * h + bin_t(tree, node) as usize] +=
                1.0;
        }
    }
    let eta_base = (2 + NUM_SPATIAL_BINS + NUM_TEMPORAL_BINS) * nm + labeling.action * d_b;
    let x0 = tree.root_feature();
    if x0.len() != d_b {
        return Err(TrainError::Invalid(format!(
            "root feature has {} dims, expected {d_b}",
            x0.len()
        )));
    }
    phi[eta_base..eta_base + d_b].copy_from_slice(x0);
    Ok(phi)
}

/// Parsing feature map: the same detection/spatial/temporal blocks keyed
/// by node label, with no whole-video block.
pub fn parsing_feature_map(
    tree: &SegmentTree,
    table: &ScoreTable,
    labels: &[usize],
    num_labels: usize,
) -> Result<Vec<f64>, TrainError> {
    if labels.len() != tree.num_non_root() {
        return Err(TrainError::Invalid(format!(
            "label vector covers {} nodes, tree has {}",
            labels.len(),
            tree.num_non_root()
        )));
    }
    let mut phi = vec![0.0; ModelParams::weight_len(0, num_labels, 0)];
    for node in 1..tree.nodes.len() {
        let z = labels[node - 1];
        if z >= num_labels {
            return Err(TrainError::Invalid(format!("label {z} is out of range")));
        }
        phi[2 * z] += table.get(node, z);
        phi[2 * z + 1] += 1.0;
        phi[2 * num_labels + NUM_SPATIAL_BINS * z + bin_s_index(tree, node)] += 1.0;
        phi[(2 + NUM_SPATIAL_BINS) * num_labels
            + NUM_TEMPORAL_BINS * z
            + bin_t(tree, node) as usize] += 1.0;
    }
    Ok(phi)
}

/// Builds each training video's fixed element assignment: nodes recorded
/// as members of a same-action element keep it; uncovered nodes take the
/// highest-scoring element of the video's action (ties to the lower id).
/// Videos of an action owning no elements get an empty assignment.
pub fn assign_training_maes(
    vocab: &crate::discovery::MAEVocabulary,
    spaces: &ModelSpaces,
    trees: &[SegmentTree],
    actions: &[usize],
    tables: &[ScoreTable],
) -> Result<Vec<Labeling>, TrainError> {
    if trees.len() != actions.len() || trees.len() != tables.len() {
        return Err(TrainError::Invalid("trees, actions, and tables must align".into()));
    }
    let mut membership: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for mae in &vocab.maes {
        for (vid, node) in &mae.member_segments {
            membership.insert((vid.as_str(), *node), mae.mae_id);
        }
    }
    let mut out = Vec::with_capacity(trees.len());
    for ((tree, &action), table) in trees.iter().zip(actions).zip(tables) {
        let owned = spaces.maes_of_action(action);
        let mut mae = BTreeMap::new();
        if !owned.is_empty() {
            for node in 1..tree.nodes.len() {
                let assigned = membership
                    .get(&(tree.video_id.as_str(), node))
                    .copied()
                    .filter(|h| spaces.mae_owner[*h] == action);
                let h = assigned.unwrap_or_else(|| {
                    let mut best = owned[0];
                    let mut best_s = table.get(node, best);
                    for &cand in &owned[1..] {
                        let s = table.get(node, cand);
                        if s > best_s {
                            best_s = s;
                            best = cand;
                        }
                    }
                    best
                });
                mae.insert(node, h);
            }
        }
        out.push(Labeling { action, mae });
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One cut: `w . dphi >= loss - slack` for the owning video.
struct Cut {
    dphi: Vec<f64>,
    loss: f64,
}

fn slack_of(cuts: &[Cut], w: &[f64]) -> f64 {
    cuts.iter().map(|c| c.loss - dot(w, &c.dphi)).fold(0.0, f64::max)
}

/// Re-solves the active-set objective through its dual: each video's dual
/// mass lives on the simplex of its cuts scaled by `c` (an implicit zero
/// cut absorbs unused mass, realizing the hinge), and the weight vector is
/// the mass-weighted sum of cut differences. One block step moves a
/// video's mass toward its single most promising cut with the closed-form
/// optimal step, so the dual objective never decreases and the solve is
/// deterministic. `alpha` (one mass per cut, aligned with `per_video`)
/// persists across calls, warm starting every re-solve.
fn solve_active_set(
    per_video: &[Vec<Cut>],
    alpha: &mut [Vec<f64>],
    c: f64,
    sweeps: usize,
) -> Vec<f64> {
    let dim = per_video
        .iter()
        .flat_map(|cuts| cuts.iter())
        .map(|cut| cut.dphi.len())
        .next()
        .unwrap_or(0);
    // Block contributions are rebuilt from the mass itself on every call so
    // the incremental updates below cannot accumulate drift across calls.
    let mut blocks: Vec<Vec<f64>> = per_video
        .iter()
        .zip(alpha.iter())
        .map(|(cuts, mass)| {
            let mut wi = vec![0.0; dim];
            for (cut, &a) in cuts.iter().zip(mass) {
                if a != 0.0 {
                    for (x, d) in wi.iter_mut().zip(&cut.dphi) {
                        *x += a * d;
                    }
                }
            }
            wi
        })
        .collect();
    let mut w = vec![0.0; dim];
    for wi in &blocks {
        for (x, y) in w.iter_mut().zip(wi) {
            *x += y;
        }
    }
    for _ in 0..sweeps {
        let mut total_gap = 0.0;
        for (i, cuts) in per_video.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            // Frank-Wolfe vertex: all mass on the cut of largest positive
            // violation, or on the zero cut when none is violated.
            let mut best: Option<(usize, f64)> = None;
            for (k, cut) in cuts.iter().enumerate() {
                let g = cut.loss - dot(&w, &cut.dphi);
                if g > 0.0 && best.is_none_or(|(_, bg)| g > bg) {
                    best = Some((k, g));
                }
            }
            let held: f64 = alpha[i].iter().zip(cuts).map(|(a, cut)| a * cut.loss).sum::<f64>()
                - dot(&w, &blocks[i]);
            let gap = best.map_or(0.0, |(_, g)| c * g) - held;
            if gap <= 0.0 {
                continue;
            }
            total_gap += gap;
            // Direction toward the vertex in weight space, then the exact
            // maximizer of the concave quadratic along it.
            let wi = &mut blocks[i];
            let mut dir_sq = 0.0;
            for (j, x) in wi.iter().enumerate() {
                let target = best.map_or(0.0, |(k, _)| c * cuts[k].dphi[j]);
                let d = target - x;
                dir_sq += d * d;
            }
            let step = if dir_sq > 0.0 { (gap / dir_sq).clamp(0.0, 1.0) } else { 1.0 };
            for a in alpha[i].iter_mut() {
                *a *= 1.0 - step;
            }
            if let Some((k, _)) = best {
                alpha[i][k] += step * c;
            }
            for (j, x) in wi.iter_mut().enumerate() {
                let target = best.map_or(0.0, |(k, _)| c * cuts[k].dphi[j]);
                let d = step * (target - *x);
                *x += d;
                w[j] += d;
            }
        }
        if total_gap <= 1e-9 {
            break;
        }
    }
    w
}

/// The most-violated-constraint search and truth features for one mode.
enum Oracle<'a> {
    Recognition { spaces: &'a ModelSpaces, samples: &'a [RecognitionSample<'a>], d_b: usize },
    Parsing { samples: &'a [ParsingSample<'a>], num_labels: usize },
}

impl<'a> Oracle<'a> {
    fn len(&self) -> usize {
        match self {
            Oracle::Recognition { samples, .. } => samples.len(),
            Oracle::Parsing { samples, .. } => samples.len(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Oracle::Recognition { spaces, d_b, .. } => {
                ModelParams::weight_len(spaces.num_actions(), spaces.num_maes(), *d_b)
            }
            Oracle::Parsing { num_labels, .. } => ModelParams::weight_len(0, *num_labels, 0),
        }
    }

    fn params_of(&self, w: &[f64]) -> Result<ModelParams, TrainError> {
        let p = match self {
            Oracle::Recognition { spaces, d_b, .. } => {
                ModelParams::from_weight_vec(w, spaces.num_actions(), spaces.num_maes(), *d_b)?
            }
            Oracle::Parsing { num_labels, .. } => {
                ModelParams::from_weight_vec(w, 0, *num_labels, 0)?
            }
        };
        Ok(p)
    }

    fn truth_phi(&self, i: usize) -> Result<Vec<f64>, TrainError> {
        match self {
            Oracle::Recognition { spaces, samples, d_b } => {
                let s = &samples[i];
                joint_feature_map(spaces, s.tree, s.table, &s.truth, *d_b)
            }
            Oracle::Parsing { samples, num_labels } => {
                let s = &samples[i];
                parsing_feature_map(s.tree, s.table, &s.truth, *num_labels)
            }
        }
    }

    /// Returns the feature vector and loss of the loss-augmented
    /// maximizer for sample `i` under `params`.
    fn most_violated(
        &self,
        i: usize,
        params: &ModelParams,
    ) -> Result<(Vec<f64>, f64), TrainError> {
        match self {
            Oracle::Recognition { spaces, samples, d_b } => {
                let s = &samples[i];
                let hit = infer_loss_augmented_recognition(spaces, params, s.tree, s.table, s.action)?;
                let loss = if hit.labeling.action == s.action { 0.0 } else { 1.0 };
                let phi = joint_feature_map(spaces, s.tree, s.table, &hit.labeling, *d_b)?;
                Ok((phi, loss))
            }
            Oracle::Parsing { samples, num_labels } => {
                let s = &samples[i];
                let hit = infer_parsing_loss_augmented(params, s.tree, s.table, &s.truth)?;
                let m = s.truth.len().max(1);
                let wrong =
                    hit.labels.iter().zip(&s.truth).filter(|(a, b)| a != b).count();
                let loss = wrong as f64 / m as f64;
                let phi = parsing_feature_map(s.tree, s.table, &hit.labels, *num_labels)?;
                Ok((phi, loss))
            }
        }
    }
}

fn run_cutting_plane(
    oracle: &Oracle<'_>,
    cfg: &TrainConfig,
    vocab_hash: &str,
    mode: DatasetMode,
) -> Result<(TrainedModel, TrainingReport), TrainError> {
    cfg.validate()?;
    let n = oracle.len();
    if n == 0 {
        return Err(TrainError::Invalid("empty training set".into()));
    }
    let dim = oracle.dim();
    let truth_phis: Vec<Vec<f64>> =
        (0..n).map(|i| oracle.truth_phi(i)).collect::<Result<_, _>>()?;

    let mut w = vec![0.0; dim];
    let mut per_video: Vec<Vec<Cut>> = (0..n).map(|_| Vec::new()).collect();
    let mut alpha: Vec<Vec<f64>> = (0..n).map(|_| Vec::new()).collect();
    let mut trace: Vec<f64> = Vec::new();
    let mut log = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iterations {
        iterations = iter;
        let params = oracle.params_of(&w)?;
        let found: Vec<(Vec<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|i| oracle.most_violated(i, &params))
            .collect::<Result<_, _>>()?;

        // True regularized objective from the exact searches.
        let mut total_hinge = 0.0;
        let mut max_violation: f64 = 0.0;
        let mut additions: Vec<(usize, Cut)> = Vec::new();
        for (i, (phi_pred, loss)) in found.iter().enumerate() {
            let truth_score = dot(&w, &truth_phis[i]);
            let aug = dot(&w, phi_pred) + loss;
            total_hinge += (aug - truth_score).max(0.0);
            let violation = (aug - truth_score) - slack_of(&per_video[i], &w);
            if violation > max_violation {
                max_violation = violation;
            }
            if violation > cfg.tolerance {
                let dphi: Vec<f64> =
                    truth_phis[i].iter().zip(phi_pred).map(|(t, p)| t - p).collect();
                additions.push((i, Cut { dphi, loss: *loss }));
            }
        }
        let objective = 0.5 * dot(&w, &w) + cfg.c * total_hinge;
        if trace.last().is_none_or(|&prev| objective < prev) {
            trace.push(objective);
        }
        log.push(IterationRecord {
            iteration: iter,
            objective,
            max_violation,
            num_constraints: per_video.iter().map(Vec::len).sum::<usize>() + additions.len(),
        });

        if additions.is_empty() {
            converged = true;
            break;
        }
        for (i, cut) in additions {
            per_video[i].push(cut);
            alpha[i].push(0.0);
        }
        w = solve_active_set(&per_video, &mut alpha, cfg.c, cfg.qp_inner);
    }
    if !converged {
        log::warn!(
            "training stopped at max_iterations={} with constraints still violated",
            cfg.max_iterations
        );
    }

    let final_slacks: Vec<f64> = per_video.iter().map(|cuts| slack_of(cuts, &w)).collect();
    let model = TrainedModel {
        params: oracle.params_of(&w)?,
        vocab_hash: vocab_hash.to_string(),
        objective_trace: trace,
        mode,
    };
    let report = TrainingReport { converged, iterations, iteration_log: log, final_slacks };
    Ok((model, report))
}

/// Trains the recognition model. Every sample needs its class and a full
/// truth assignment (see [`assign_training_maes`]).
pub fn train_recognition(
    spaces: &ModelSpaces,
    samples: &[RecognitionSample<'_>],
    d_b: usize,
    vocab_hash: &str,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainingReport), TrainError> {
    spaces.validate()?;
    for s in samples {
        if s.action >= spaces.num_actions() {
            return Err(TrainError::Invalid(format!(
                "video {}: action {} is out of range",
                s.tree.video_id, s.action
            )));
        }
        if s.truth.action != s.action {
            return Err(TrainError::Invalid(format!(
                "video {}: truth labeling carries a different action",
                s.tree.video_id
            )));
        }
    }
    let oracle = Oracle::Recognition { spaces, samples, d_b };
    run_cutting_plane(&oracle, cfg, vocab_hash, DatasetMode::Recognition)
}

/// Trains the parsing model over a flat node label space.
pub fn train_parsing(
    samples: &[ParsingSample<'_>],
    num_labels: usize,
    vocab_hash: &str,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainingReport), TrainError> {
    if num_labels == 0 {
        return Err(TrainError::Invalid("empty label space".into()));
    }
    for s in samples {
        if s.truth.len() != s.tree.num_non_root() {
            return Err(TrainError::Invalid(format!(
                "video {}: truth covers {} nodes, tree has {}",
                s.tree.video_id,
                s.truth.len(),
                s.tree.num_non_root()
            )));
        }
    }
    let oracle = Oracle::Parsing { samples, num_labels };
    run_cutting_plane(&oracle, cfg, vocab_hash, DatasetMode::Parsing)
}

/// Largest audit violation over the training set: how far any video's
/// most-violated constraint exceeds its recorded slack under `params`.
pub fn audit_recognition_constraints(
    spaces: &ModelSpaces,
    samples: &[RecognitionSample<'_>],
    d_b: usize,
    params: &ModelParams,
    slacks: &[f64],
) -> Result<f64, TrainError> {
    if slacks.len() != samples.len() {
        return Err(TrainError::Invalid("one slack per sample required".into()));
    }
    let w = params.to_weight_vec();
    let mut worst = f64::NEG_INFINITY;
    for (i, s) in samples.iter().enumerate() {
        let hit = infer_loss_augmented_recognition(spaces, params, s.tree, s.table, s.action)?;
        let loss = if hit.labeling.action == s.action { 0.0 } else { 1.0 };
        let phi_pred = joint_feature_map(spaces, s.tree, s.table, &hit.labeling, d_b)?;
        let phi_truth = joint_feature_map(spaces, s.tree, s.table, &s.truth, d_b)?;
        let violation = (dot(&w, &phi_pred) + loss - dot(&w, &phi_truth)) - slacks[i];
        if violation > worst {
            worst = violation;
        }
    }
    Ok(worst)
}

/// Parsing twin of [`audit_recognition_constraints`].
pub fn audit_parsing_constraints(
    samples: &[ParsingSample<'_>],
    num_labels: usize,
    params: &ModelParams,
    slacks: &[f64],
) -> Result<f64, TrainError> {
    if slacks.len() != samples.len() {
        return Err(TrainError::Invalid("one slack per sample required".into()));
    }
    let w = params.to_weight_vec();
    let mut worst = f64::NEG_INFINITY;
    for (i, s) in samples.iter().enumerate() {
        let hit = infer_parsing_loss_augmented(params, s.tree, s.table, &s.truth)?;
        let m = s.truth.len().max(1);
        let wrong = hit.labels.iter().zip(&s.truth).filter(|(a, b)| a != b).count();
        let loss = wrong as f64 / m as f64;
        let phi_pred = parsing_feature_map(s.tree, s.table, &hit.labels, num_labels)?;
        let phi_truth = parsing_feature_map(s.tree, s.table, &s.truth, num_labels)?;
        let violation = (dot(&w, &phi_pred) + loss - dot(&w, &phi_truth)) - slacks[i];
        if violation > worst {
            worst = violation;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::infer;
    use crate::model::test_support::{toy_tree, two_action_spaces};
    use crate::model::{score, score_parsing};
    use rand::Rng;

    #[test]
    fn feature_map_reproduces_the_scorer() {
        let spaces = two_action_spaces();
        let mut rng = crate::numerics::rng_from(17, 0);
        for _ in 0..100 {
            let num_leaves = rng.gen_range(1..4);
            let leaves: Vec<((f64, f64), (usize, usize))> = (0..num_leaves)
                .map(|_| {
                    let a = rng.gen_range(0..10);
                    ((rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)), (a, rng.gen_range(a..10)))
                })
                .collect();
            let mut tree = toy_tree(10, 3, &leaves);
            for node in 0..tree.nodes.len() {
                let bow: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = bow.iter().sum();
                tree.nodes[node].bow = bow.iter().map(|v| v / s).collect();
            }
            let table = ScoreTable::new(
                num_leaves,
                3,
                (0..num_leaves * 3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let y = rng.gen_range(0..2);
            let owned = spaces.maes_of_action(y);
            let labeling = Labeling {
                action: y,
                mae: (1..=num_leaves)
                    .map(|n| (n, owned[rng.gen_range(0..owned.len())]))
                    .collect(),
            };
            let dim = ModelParams::weight_len(2, 3, 3);
            let wv: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let params = ModelParams::from_weight_vec(&wv, 2, 3, 3).unwrap();
            let phi = joint_feature_map(&spaces, &tree, &table, &labeling, 3).unwrap();
            let s_model = score(&spaces, &params, &tree, &table, &labeling).unwrap();
            assert!((dot(&wv, &phi) - s_model).abs() < 1e-10);
        }
    }

    #[test]
    fn parsing_feature_map_reproduces_the_parsing_scorer() {
        let mut rng = crate::numerics::rng_from(18, 0);
        for _ in 0..100 {
            let num_leaves = rng.gen_range(1..4);
            let leaves: Vec<((f64, f64), (usize, usize))> = (0..num_leaves)
                .map(|_| {
                    let a = rng.gen_range(0..10);
                    ((rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)), (a, rng.gen_range(a..10)))
                })
                .collect();
            let tree = toy_tree(10, 3, &leaves);
            let nl = 4;
            let table = ScoreTable::new(
                num_leaves,
                nl,
                (0..num_leaves * nl).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let labels: Vec<usize> = (0..num_leaves).map(|_| rng.gen_range(0..nl)).collect();
            let dim = ModelParams::weight_len(0, nl, 0);
            let wv: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let params = ModelParams::from_weight_vec(&wv, 0, nl, 0).unwrap();
            let phi = parsing_feature_map(&tree, &table, &labels, nl).unwrap();
            let s_model = score_parsing(&params, &tree, &table, &labels).unwrap();
            assert!((dot(&wv, &phi) - s_model).abs() < 1e-10);
        }
    }

    #[test]
    fn feature_map_rejects_ownership_violations() {
        let spaces = two_action_spaces();
        let tree = toy_tree(10, 3, &[((0.5, 0.5), (0, 9))]);
        let table = ScoreTable::new(1, 3, vec![0.0; 3]).unwrap();
        let bad = Labeling { action: 1, mae: [(1, 0)].into_iter().collect() };
        assert!(joint_feature_map(&spaces, &tree, &table, &bad, 3).is_err());
    }

    /// 20 separable videos: class decided by which half of the bag
    /// carries mass, with per-class element score patterns.
    fn separable_recognition_fixture() -> (
        ModelSpaces,
        Vec<SegmentTree>,
        Vec<ScoreTable>,
        Vec<usize>,
    ) {
        let spaces = two_action_spaces();
        let mut trees = Vec::new();
        let mut tables = Vec::new();
        let mut actions = Vec::new();
        for i in 0..20 {
            let class = i % 2;
            let mut tree = toy_tree(10, 4, &[((0.2, 0.2), (0, 4)), ((0.8, 0.8), (5, 9))]);
            tree.video_id = format!("v{i}");
            let tilt = 0.05 * (i / 2) as f64;
            tree.nodes[0].bow = if class == 0 {
                vec![0.6 - tilt, 0.4 + tilt, 0.0, 0.0]
            } else {
                vec![0.0, 0.0, 0.4 + tilt, 0.6 - tilt]
            };
            let table = ScoreTable::new(
                2,
                3,
                if class == 0 {
                    vec![2.0, -1.0, -2.0, -1.0, 2.0, -2.0]
                } else {
                    vec![-2.0, -2.0, 2.0, -2.0, -2.0, 2.0]
                },
            )
            .unwrap();
            trees.push(tree);
            tables.push(table);
            actions.push(class);
        }
        (spaces, trees, tables, actions)
    }

    #[test]
    fn separable_set_trains_to_zero_error_with_satisfied_constraints() {
        let (spaces, trees, tables, actions) = separable_recognition_fixture();
        let samples: Vec<RecognitionSample> = trees
            .iter()
            .zip(&tables)
            .zip(&actions)
            .map(|((tree, table), &action)| {
                let owned = spaces.maes_of_action(action);
                RecognitionSample {
                    tree,
                    table,
                    action,
                    truth: Labeling {
                        action,
                        mae: (1..=2).map(|n| (n, owned[(n - 1) % owned.len()])).collect(),
                    },
                }
            })
            .collect();
        let cfg = TrainConfig { c: 10.0, max_iterations: 60, qp_inner: 600, ..TrainConfig::default() };
        let (model, report) = train_recognition(&spaces, &samples, 4, "hash", &cfg).unwrap();
        assert!(report.converged, "training did not converge");

        // 100% training accuracy.
        for (s, &action) in samples.iter().zip(&actions) {
            let out = infer(&spaces, &model.params, s.tree, s.table).unwrap();
            assert_eq!(out.labeling.action, action, "video {} misclassified", s.tree.video_id);
        }
        // Constraint audit within tolerance + 1e-6.
        let worst = audit_recognition_constraints(
            &spaces,
            &samples,
            4,
            &model.params,
            &report.final_slacks,
        )
        .unwrap();
        assert!(
            worst <= cfg.tolerance + 1e-6,
            "audit violation {worst} exceeds {}",
            cfg.tolerance + 1e-6
        );
        // Objective trace non-increasing within 1e-6.
        for pair in model.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "trace rose: {} -> {}", pair[0], pair[1]);
        }
        // Determinism.
        let (model2, _) = train_recognition(&spaces, &samples, 4, "hash", &cfg).unwrap();
        assert_eq!(model2.params, model.params);
    }

    #[test]
    fn single_video_objective_bounded_by_c() {
        let (spaces, trees, tables, actions) = separable_recognition_fixture();
        let owned = spaces.maes_of_action(actions[0]);
        let samples = vec![RecognitionSample {
            tree: &trees[0],
            table: &tables[0],
            action: actions[0],
            truth: Labeling {
                action: actions[0],
                mae: (1..=2).map(|n| (n, owned[0])).collect(),
            },
        }];
        let cfg = TrainConfig { c: 5.0, max_iterations: 40, ..TrainConfig::default() };
        let (model, report) = train_recognition(&spaces, &samples, 4, "h", &cfg).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 10, "took {} cuts", report.iterations);
        let last = *model.objective_trace.last().unwrap();
        assert!(last <= cfg.c + 1e-9, "objective {last} above the slack-only bound {}", cfg.c);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (spaces, trees, tables, actions) = separable_recognition_fixture();
        let owned = spaces.maes_of_action(actions[0]);
        let samples = vec![RecognitionSample {
            tree: &trees[0],
            table: &tables[0],
            action: actions[0],
            truth: Labeling {
                action: actions[0],
                mae: (1..=2).map(|n| (n, owned[0])).collect(),
            },
        }];
        for cfg in [
            TrainConfig { c: 0.0, ..TrainConfig::default() },
            TrainConfig { c: -1.0, ..TrainConfig::default() },
            TrainConfig { tolerance: 0.0, ..TrainConfig::default() },
            TrainConfig { max_iterations: 0, ..TrainConfig::default() },
        ] {
            assert!(train_recognition(&spaces, &samples, 4, "h", &cfg).is_err());
        }
        assert!(train_recognition(&spaces, &[], 4, "h", &TrainConfig::default()).is_err());
    }

    #[test]
    fn separable_parsing_set_trains_to_zero_hamming() {
        // Nodes carry label identity in the score table; truth follows it.
        let mut trees = Vec::new();
        let mut tables = Vec::new();
        let mut truths = Vec::new();
        let mut rng = crate::numerics::rng_from(3, 9);
        for i in 0..10 {
            let mut tree =
                toy_tree(20, 2, &[((0.2, 0.2), (0, 9)), ((0.8, 0.8), (10, 19))]);
            tree.video_id = format!("p{i}");
            let z1 = rng.gen_range(0..3);
            let z2 = rng.gen_range(0..3);
            let mut scores = vec![-1.0; 6];
            scores[z1] = 1.0;
            scores[3 + z2] = 1.0;
            tables.push(ScoreTable::new(2, 3, scores).unwrap());
            trees.push(tree);
            truths.push(vec![z1, z2]);
        }
        let samples: Vec<ParsingSample> = trees
            .iter()
            .zip(&tables)
            .zip(&truths)
            .map(|((tree, table), truth)| ParsingSample { tree, table, truth: truth.clone() })
            .collect();
        let cfg = TrainConfig { max_iterations: 60, qp_inner: 500, ..TrainConfig::default() };
        let (model, report) = train_parsing(&samples, 3, "ph", &cfg).unwrap();
        assert!(report.converged);
        for s in &samples {
            let out = crate::inference::infer_parsing(&model.params, s.tree, s.table).unwrap();
            assert_eq!(out.labels, s.truth, "video {}", s.tree.video_id);
        }
        let worst =
            audit_parsing_constraints(&samples, 3, &model.params, &report.final_slacks).unwrap();
        assert!(worst <= cfg.tolerance + 1e-6);
    }

    #[test]
    fn assignment_prefers_membership_then_argmax() {
        let spaces = two_action_spaces();
        let tree = toy_tree(10, 2, &[((0.2, 0.2), (0, 4)), ((0.8, 0.8), (5, 9))]);
        let vocab = crate::discovery::MAEVocabulary {
            actions: vec!["a".into(), "b".into()],
            d_b: 2,
            maes: vec![
                crate::discovery::MaeCluster {
                    mae_id: 0,
                    owner_action: 0,
                    member_segments: vec![("toy".into(), 2)],
                    classifier: crate::numerics::LinearSvmModel {
                        weights: vec![0.0; 2],
                        bias: 0.0,
                        c: 1.0,
                    },
                },
                crate::discovery::MaeCluster {
                    mae_id: 1,
                    owner_action: 0,
                    member_segments: vec![],
                    classifier: crate::numerics::LinearSvmModel {
                        weights: vec![0.0; 2],
                        bias: 0.0,
                        c: 1.0,
                    },
                },
                crate::discovery::MaeCluster {
                    mae_id: 2,
                    owner_action: 1,
                    member_segments: vec![],
                    classifier: crate::numerics::LinearSvmModel {
                        weights: vec![0.0; 2],
                        bias: 0.0,
                        c: 1.0,
                    },
                },
            ],
        };
        // Node 1 is unassigned: element 1 outscores element 0 there.
        // Node 2 is a recorded member of element 0 despite scores.
        let table = ScoreTable::new(2, 3, vec![0.1, 0.9, 0.0, 0.1, 0.9, 0.0]).unwrap();
        let out =
            assign_training_maes(&vocab, &spaces, std::slice::from_ref(&tree), &[0], &[table]).unwrap();
        assert_eq!(out[0].action, 0);
        assert_eq!(out[0].mae, [(1, 1), (2, 0)].into_iter().collect());
    }
}
