//! Tree-structured joint scoring model.
//!
//! A video is scored against an action class together with an assignment of
//! mid-level element labels to its non-root tree nodes. Each labeled node
//! contributes a detection term (classifier score with a bias), a spatial
//! location term over a 5x5 grid of bounding-box centers, and a temporal
//! order term relating the node's span to its parent's. The root
//! contributes a class-specific linear term on the whole-video bag of
//! words. Because every per-node term depends only on that node's own
//! label (given the class), exact maximization decomposes over nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::SegmentTree;

/// Side length of the spatial grid over bounding-box centers.
pub const SPATIAL_GRID: usize = 5;
pub const NUM_SPATIAL_BINS: usize = SPATIAL_GRID * SPATIAL_GRID;
pub const NUM_TEMPORAL_BINS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    Invalid(String),
}

/// Index spaces shared by parameters, inference, and training: the action
/// vocabulary and the mid-level element vocabulary with its per-action
/// ownership partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpaces {
    pub actions: Vec<String>,
    pub mae_names: Vec<String>,
    /// `mae_owner[h]` is the action id owning element `h`.
    pub mae_owner: Vec<usize>,
}

impl ModelSpaces {
    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_maes(&self) -> usize {
        self.mae_names.len()
    }

    /// Element ids owned by action `y`, ascending.
    pub fn maes_of_action(&self, y: usize) -> Vec<usize> {
        (0..self.num_maes()).filter(|&h| self.mae_owner[h] == y).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.actions.is_empty() {
            return Err(ModelError::Invalid("no actions".into()));
        }
        if self.mae_names.len() != self.mae_owner.len() {
            return Err(ModelError::Invalid("mae_names and mae_owner lengths differ".into()));
        }
        for &o in &self.mae_owner {
            if o >= self.actions.len() {
                return Err(ModelError::Invalid(format!("owner action {o} is out of range")));
            }
        }
        Ok(())
    }
}

/// Model parameters. Layout of the flat weight vector (used by training):
/// detection pairs for every element, then spatial blocks, then temporal
/// blocks, then per-action whole-video blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Per-element (scale, bias) applied to the detection score.
    pub alpha: Vec<[f64; 2]>,
    /// Per-element weights over the 25 spatial cells.
    pub beta_spatial: Vec<[f64; NUM_SPATIAL_BINS]>,
    /// Per-element weights over before / co-occur / after.
    pub beta_temporal: Vec<[f64; NUM_TEMPORAL_BINS]>,
    /// Per-action weights over the whole-video bag of words.
    pub eta: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(num_actions: usize, num_maes: usize, d_b: usize) -> ModelParams {
        ModelParams {
            alpha: vec![[0.0; 2]; num_maes],
            beta_spatial: vec![[0.0; NUM_SPATIAL_BINS]; num_maes],
            beta_temporal: vec![[0.0; NUM_TEMPORAL_BINS]; num_maes],
            eta: vec![vec![0.0; d_b]; num_actions],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d_b = self.eta.first().map(|e| e.len()).unwrap_or(0);
        (self.eta.len(), self.alpha.len(), d_b)
    }

    pub fn weight_len(num_actions: usize, num_maes: usize, d_b: usize) -> usize {
        num_maes * (2 + NUM_SPATIAL_BINS + NUM_TEMPORAL_BINS) + num_actions * d_b
    }

    /// Flattens to the layout documented on the type.
    pub fn to_weight_vec(&self) -> Vec<f64> {
        let (num_actions, num_maes, d_b) = self.dims();
        let mut w = Vec::with_capacity(Self::weight_len(num_actions, num_maes, d_b));
        for a in &self.alpha {
            w.extend_from_slice(a);
        }
        for b in &self.beta_spatial {
            w.extend_from_slice(b);
        }
        for b in &self.beta_temporal {
            w.extend_from_slice(b);
        }
        for e in &self.eta {
            w.extend_from_slice(e);
        }
        w
    }

    pub fn from_weight_vec(
        w: &[f64],
        num_actions: usize,
        num_maes: usize,
        d_b: usize,
    ) -> Result<ModelParams, ModelError> {
        let expect = Self::weight_len(num_actions, num_maes, d_b);
        if w.len() != expect {
            return Err(ModelError::Invalid(format!(
                "weight vector has {} entries, expected {expect}",
                w.len()
            )));
        }
        let mut params = ModelParams::zeros(num_actions, num_maes, d_b);
        let mut i = 0;
        for a in params.alpha.iter_mut() {
            a.copy_from_slice(&w[i..i + 2]);
            i += 2;
        }
        for b in params.beta_spatial.iter_mut() {
            b.copy_from_slice(&w[i..i + NUM_SPATIAL_BINS]);
            i += NUM_SPATIAL_BINS;
        }
        for b in params.beta_temporal.iter_mut() {
            b.copy_from_slice(&w[i..i + NUM_TEMPORAL_BINS]);
            i += NUM_TEMPORAL_BINS;
        }
        for e in params.eta.iter_mut() {
            e.copy_from_slice(&w[i..i + d_b]);
            i += d_b;
        }
        Ok(params)
    }
}

/// A joint hypothesis: one action class plus element labels for a subset of
/// the non-root nodes. Absent nodes are unlabeled, which is only legal when
/// the action owns no elements at all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub action: usize,
    /// node id (1-based within the tree, root excluded) -> element id.
    pub mae: BTreeMap<usize, usize>,
}

/// Detection scores for every (non-root node, element) pair of one tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub num_nodes: usize,
    pub num_maes: usize,
    /// Row-major `[node-1][element]`.
    pub scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(num_non_root: usize, num_maes: usize, scores: Vec<f64>) -> Result<ScoreTable, ModelError> {
        if scores.len() != num_non_root * num_maes {
            return Err(ModelError::Invalid(format!(
                "score table has {} entries, expected {num_non_root}x{num_maes}",
                scores.len()
            )));
        }
        Ok(ScoreTable { num_nodes: num_non_root, num_maes, scores })
    }

    /// Detection score of element `h` on non-root node `node` (node >= 1).
    pub fn get(&self, node: usize, h: usize) -> f64 {
        debug_assert!(node >= 1 && node <= self.num_nodes);
        debug_assert!(h < self.num_maes);
        self.scores[(node - 1) * self.num_maes + h]
    }
}

/// Cell of the 5x5 grid containing a segment's mean bounding-box center,
/// clamped to the grid (row-major: `col + 5 * row`).
pub fn bin_s_index(tree: &SegmentTree, node: usize) -> usize {
    let (cx, cy) = tree.nodes[node].mean_bbox.center();
    let g = SPATIAL_GRID as f64;
    let col = ((cx * g).floor() as isize).clamp(0, SPATIAL_GRID as isize - 1) as usize;
    let row = ((cy * g).floor() as isize).clamp(0, SPATIAL_GRID as isize - 1) as usize;
    col + SPATIAL_GRID * row
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalBin {
    Before = 0,
    CoOccur = 1,
    After = 2,
}

/// Relation of a node's span midpoint to its parent's inclusive span:
/// strictly before it, inside it (boundaries included), or strictly after.
/// The root has no parent and no temporal term.
pub fn bin_t(tree: &SegmentTree, node: usize) -> TemporalBin {
    let parent = tree.parent[node].expect("bin_t is defined for non-root nodes");
    let (lo, hi) = tree.nodes[parent].time_span;
    let (a, b) = tree.nodes[node].time_span;
    let mid = (a + b) as f64 / 2.0;
    if mid < lo as f64 {
        TemporalBin::Before
    } else if mid > hi as f64 {
        TemporalBin::After
    } else {
        TemporalBin::CoOccur
    }
}

/// Contribution of labeling non-root node `node` with element `h`:
/// detection term plus spatial term plus temporal term.
pub fn node_unary(
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    node: usize,
    h: usize,
) -> f64 {
    let det = params.alpha[h][0] * table.get(node, h) + params.alpha[h][1];
    let sp = params.beta_spatial[h][bin_s_index(tree, node)];
    let tm = params.beta_temporal[h][bin_t(tree, node) as usize];
    det + sp + tm
}

fn check_shapes(
    spaces: &ModelSpaces,
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
) -> Result<(), ModelError> {
    let (na, nm, d_b) = params.dims();
    if na != spaces.num_actions() || nm != spaces.num_maes() {
        return Err(ModelError::Invalid(format!(
            "parameters sized for {na} actions / {nm} elements, spaces have {} / {}",
            spaces.num_actions(),
            spaces.num_maes()
        )));
    }
    if tree.root_feature().len() != d_b {
        return Err(ModelError::Invalid(format!(
            "root feature has {} dims, parameters expect {d_b}",
            tree.root_feature().len()
        )));
    }
    if table.num_nodes != tree.num_non_root() || table.num_maes != nm {
        return Err(ModelError::Invalid(format!(
            "score table is {}x{}, tree/vocabulary need {}x{nm}",
            table.num_nodes,
            table.num_maes,
            tree.num_non_root()
        )));
    }
    Ok(())
}

/// Joint score of `labeling` on `tree`. Returns negative infinity when any
/// labeled node uses an element not owned by the hypothesized action.
/// A labeling must cover every non-root node, except that an action owning
/// no elements is scored from the whole-video term alone with an empty map.
pub fn score(
    spaces: &ModelSpaces,
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    labeling: &Labeling,
) -> Result<f64, ModelError> {
    check_shapes(spaces, params, tree, table)?;
    if labeling.action >= spaces.num_actions() {
        return Err(ModelError::Invalid(format!("action {} is out of range", labeling.action)));
    }
    let owned_empty = spaces.maes_of_action(labeling.action).is_empty();
    if labeling.mae.is_empty() && owned_empty {
        let x0 = tree.root_feature();
        return Ok(params.eta[labeling.action].iter().zip(x0).map(|(w, x)| w * x).sum());
    }
    if labeling.mae.len() != tree.num_non_root() {
        return Err(ModelError::Invalid(format!(
            "labeling covers {} nodes, tree has {} non-root nodes",
            labeling.mae.len(),
            tree.num_non_root()
        )));
    }

    let x0 = tree.root_feature();
    let mut total: f64 =
        params.eta[labeling.action].iter().zip(x0).map(|(w, x)| w * x).sum();
    for node in 1..tree.nodes.len() {
        let h = *labeling.mae.get(&node).ok_or_else(|| {
            ModelError::Invalid(format!("node {node} is unlabeled"))
        })?;
        if h >= spaces.num_maes() {
            return Err(ModelError::Invalid(format!("element {h} is out of range")));
        }
        if spaces.mae_owner[h] != labeling.action {
            return Ok(f64::NEG_INFINITY);
        }
        total += node_unary(params, tree, table, node, h);
    }
    Ok(total)
}

/// Per-node label assignment for parsing: every non-root node carries one
/// label from a flat label space (0 is background). There is no action
/// variable and no whole-video term.
pub fn score_parsing(
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    labels: &[usize],
) -> Result<f64, ModelError> {
    let (_, nm, _) = params.dims();
    if table.num_nodes != tree.num_non_root() || table.num_maes != nm {
        return Err(ModelError::Invalid(format!(
            "score table is {}x{}, tree/label space need {}x{nm}",
            table.num_nodes,
            table.num_maes,
            tree.num_non_root()
        )));
    }
    if labels.len() != tree.num_non_root() {
        return Err(ModelError::Invalid(format!(
            "label vector covers {} nodes, tree has {} non-root nodes",
            labels.len(),
            tree.num_non_root()
        )));
    }
    let mut total = 0.0;
    for node in 1..tree.nodes.len() {
        let z = labels[node - 1];
        if z >= nm {
            return Err(ModelError::Invalid(format!("label {z} is out of range")));
        }
        total += node_unary(params, tree, table, node, z);
    }
    Ok(total)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::data::BBox;
    use crate::hierarchy::SpatioTemporalSegment;

    /// Hand-built tree: root spanning the video plus `n` leaf children with
    /// chosen centers and spans.
    pub fn toy_tree(
        num_frames: usize,
        d_b: usize,
        leaves: &[((f64, f64), (usize, usize))],
    ) -> SegmentTree {
        let mut nodes = Vec::new();
        let mut parent = vec![None];
        let all: Vec<usize> = (0..leaves.len()).collect();
        let root_bow = vec![1.0 / d_b as f64; d_b];
        nodes.push(SpatioTemporalSegment {
            segment_id: 0,
            member_proposals: all,
            time_span: (0, num_frames - 1),
            mean_bbox: BBox { x: 0.25, y: 0.25, w: 0.5, h: 0.5 },
            bow: root_bow.clone(),
            appearance: vec![1.0],
        });
        for (i, &((cx, cy), span)) in leaves.iter().enumerate() {
            nodes.push(SpatioTemporalSegment {
                segment_id: i + 1,
                member_proposals: vec![i],
                time_span: span,
                mean_bbox: BBox { x: cx - 0.05, y: cy - 0.05, w: 0.1, h: 0.1 },
                bow: root_bow.clone(),
                appearance: vec![1.0],
            });
            parent.push(Some(0));
        }
        SegmentTree {
            video_id: "toy".into(),
            num_frames,
            action_label: None,
            parse_annotations: None,
            nodes,
            parent,
        }
    }

    pub fn two_action_spaces() -> ModelSpaces {
        ModelSpaces {
            actions: vec!["a".into(), "b".into()],
            mae_names: vec!["a:0".into(), "a:1".into(), "b:0".into()],
            mae_owner: vec![0, 0, 1],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn spatial_bin_examples() {
        let tree = toy_tree(
            10,
            2,
            &[((0.1, 0.1), (0, 4)), ((0.9, 0.9), (5, 9)), ((0.5, 0.1), (0, 9))],
        );
        assert_eq!(bin_s_index(&tree, 1), 0);
        assert_eq!(bin_s_index(&tree, 2), 24);
        // cx = 0.5 falls in column 2 of 5.
        assert_eq!(bin_s_index(&tree, 3), 2);
    }

    #[test]
    fn spatial_bin_clamps_boundary_centers() {
        let mut tree = toy_tree(10, 2, &[((0.95, 0.95), (0, 9))]);
        // Push the center exactly to 1.0, the grid edge.
        tree.nodes[1].mean_bbox.x = 0.95;
        tree.nodes[1].mean_bbox.w = 0.1;
        assert_eq!(bin_s_index(&tree, 1), 24);
    }

    #[test]
    fn temporal_bins_against_parent_span() {
        // Root spans (0, 19); children at various midpoints.
        let mut tree = toy_tree(
            20,
            2,
            &[((0.5, 0.5), (0, 19)), ((0.5, 0.5), (0, 0)), ((0.5, 0.5), (19, 19))],
        );
        assert_eq!(bin_t(&tree, 1), TemporalBin::CoOccur);
        assert_eq!(bin_t(&tree, 2), TemporalBin::CoOccur); // midpoint 0 == lo
        assert_eq!(bin_t(&tree, 3), TemporalBin::CoOccur); // midpoint 19 == hi
        // Shrink the root span so child 3 falls strictly after it.
        tree.nodes[0].time_span = (0, 10);
        assert_eq!(bin_t(&tree, 3), TemporalBin::After);
        tree.nodes[0].time_span = (5, 19);
        assert_eq!(bin_t(&tree, 2), TemporalBin::Before);
    }

    #[test]
    fn zero_params_score_zero_everywhere() {
        let spaces = two_action_spaces();
        let tree = toy_tree(10, 4, &[((0.2, 0.2), (0, 4)), ((0.8, 0.8), (5, 9))]);
        let params = ModelParams::zeros(2, 3, 4);
        let table = ScoreTable::new(2, 3, vec![1.0; 6]).unwrap();
        let labeling = Labeling {
            action: 0,
            mae: [(1, 0), (2, 1)].into_iter().collect(),
        };
        let s = score(&spaces, &params, &tree, &table, &labeling).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn ownership_violation_is_infeasible() {
        let spaces = two_action_spaces();
        let tree = toy_tree(10, 4, &[((0.2, 0.2), (0, 4))]);
        let params = ModelParams::zeros(2, 3, 4);
        let table = ScoreTable::new(1, 3, vec![0.0; 3]).unwrap();
        let labeling = Labeling { action: 1, mae: [(1, 0)].into_iter().collect() };
        let s = score(&spaces, &params, &tree, &table, &labeling).unwrap();
        assert_eq!(s, f64::NEG_INFINITY);
    }

    #[test]
    fn single_node_score_matches_hand_sum() {
        let spaces = two_action_spaces();
        let tree = toy_tree(10, 2, &[((0.1, 0.1), (2, 7))]);
        let mut params = ModelParams::zeros(2, 3, 2);
        params.alpha[1] = [2.0, 0.5];
        params.beta_spatial[1][0] = 0.25; // cell of center (0.1, 0.1)
        params.beta_temporal[1][TemporalBin::CoOccur as usize] = -0.125;
        params.eta[0] = vec![1.0, 3.0];
        let table = ScoreTable::new(1, 3, vec![0.0, 4.0, 0.0]).unwrap();
        let labeling = Labeling { action: 0, mae: [(1, 1)].into_iter().collect() };
        let s = score(&spaces, &params, &tree, &table, &labeling).unwrap();
        // eta . x0 = (1 + 3) * 0.5 = 2; detection 2 * 4 + 0.5 = 8.5;
        // spatial 0.25; temporal -0.125.
        assert!((s - (2.0 + 8.5 + 0.25 - 0.125)).abs() < 1e-12);
    }

    #[test]
    fn empty_label_map_requires_elementless_action() {
        let spaces = ModelSpaces {
            actions: vec!["a".into(), "empty".into()],
            mae_names: vec!["a:0".into()],
            mae_owner: vec![0],
        };
        let tree = toy_tree(10, 2, &[((0.5, 0.5), (0, 9))]);
        let params = ModelParams::zeros(2, 1, 2);
        let table = ScoreTable::new(1, 1, vec![0.0]).unwrap();
        // Action 1 owns nothing: empty map is the degenerate hypothesis.
        let s = score(
            &spaces,
            &params,
            &tree,
            &table,
            &Labeling { action: 1, mae: BTreeMap::new() },
        )
        .unwrap();
        assert_eq!(s, 0.0);
        // Action 0 owns an element: an empty map is a coverage error.
        assert!(score(
            &spaces,
            &params,
            &tree,
            &table,
            &Labeling { action: 0, mae: BTreeMap::new() },
        )
        .is_err());
    }

    #[test]
    fn weight_vec_round_trip_preserves_params() {
        let mut params = ModelParams::zeros(2, 3, 4);
        params.alpha[0] = [1.0, -2.0];
        params.beta_spatial[2][7] = 3.5;
        params.beta_temporal[1][2] = -0.5;
        params.eta[1] = vec![0.1, 0.2, 0.3, 0.4];
        let w = params.to_weight_vec();
        assert_eq!(w.len(), ModelParams::weight_len(2, 3, 4));
        let back = ModelParams::from_weight_vec(&w, 2, 3, 4).unwrap();
        assert_eq!(back, params);
        assert!(ModelParams::from_weight_vec(&w[1..], 2, 3, 4).is_err());
    }

    #[test]
    fn score_is_linear_in_params() {
        use rand::Rng;
        let spaces = two_action_spaces();
        let tree = toy_tree(12, 3, &[((0.3, 0.7), (0, 5)), ((0.6, 0.2), (6, 11))]);
        let table = ScoreTable::new(2, 3, vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4]).unwrap();
        let labeling = Labeling { action: 0, mae: [(1, 1), (2, 0)].into_iter().collect() };
        let mut rng = crate::numerics::rng_from(99, 0);
        for _ in 0..20 {
            let dim = ModelParams::weight_len(2, 3, 3);
            let wa: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wb: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = ModelParams::from_weight_vec(&wa, 2, 3, 3).unwrap();
            let b = ModelParams::from_weight_vec(&wb, 2, 3, 3).unwrap();
            let sum_w: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| x + y).collect();
            let ab = ModelParams::from_weight_vec(&sum_w, 2, 3, 3).unwrap();
            let sa = score(&spaces, &a, &tree, &table, &labeling).unwrap();
            let sb = score(&spaces, &b, &tree, &table, &labeling).unwrap();
            let sab = score(&spaces, &ab, &tree, &table, &labeling).unwrap();
            assert!((sab - (sa + sb)).abs() < 1e-9);
        }
    }

    #[test]
    fn parsing_score_sums_node_unaries_without_video_term() {
        let tree = toy_tree(10, 2, &[((0.1, 0.1), (0, 4)), ((0.9, 0.9), (5, 9))]);
        let mut params = ModelParams::zeros(1, 2, 2);
        params.alpha[0] = [1.0, 0.0];
        params.alpha[1] = [1.0, 0.0];
        // A non-zero eta must not leak into the parsing score.
        params.eta[0] = vec![100.0, 100.0];
        let table = ScoreTable::new(2, 2, vec![0.5, 2.0, -1.0, 3.0]).unwrap();
        let s = score_parsing(&params, &tree, &table, &[1, 0]).unwrap();
        assert!((s - (2.0 + -1.0)).abs() < 1e-12);
        assert!(score_parsing(&params, &tree, &table, &[1]).is_err());
        assert!(score_parsing(&params, &tree, &table, &[1, 5]).is_err());
    }
}
