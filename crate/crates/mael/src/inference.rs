//! Exact inference over the tree-structured scoring model.
//!
//! Every per-node term depends only on that node's own label once the
//! action class is fixed, so the joint maximum is found by maximizing each
//! node independently per class and taking the best class. Scores are
//! accumulated in the same order as the reference scoring functions
//! (whole-video term first, then nodes ascending) so the returned value is
//! bit-identical to re-scoring the returned labeling.

use std::collections::BTreeMap;

use crate::hierarchy::SegmentTree;
use crate::model::{
    node_unary, score, score_parsing, Labeling, ModelError, ModelParams, ModelSpaces, ScoreTable,
};

/// Result of a maximization: the best hypothesis and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct Inferred {
    pub labeling: Labeling,
    pub score: f64,
}

/// Best action and element assignment for one tree. Ties prefer the lowest
/// element id per node and then the lowest action id.
pub fn infer(
    spaces: &ModelSpaces,
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
) -> Result<Inferred, ModelError> {
    infer_with_loss(spaces, params, tree, table, None)
}

/// Margin-rescaled search for recognition training: the returned score
/// includes a loss of 1 for every hypothesis whose action differs from
/// `true_action`, making the maximizer the most violated constraint.
pub fn infer_loss_augmented_recognition(
    spaces: &ModelSpaces,
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    true_action: usize,
) -> Result<Inferred, ModelError> {
    infer_with_loss(spaces, params, tree, table, Some(true_action))
}

fn infer_with_loss(
    spaces: &ModelSpaces,
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    true_action: Option<usize>,
) -> Result<Inferred, ModelError> {
    spaces.validate()?;
    if let Some(y) = true_action {
        if y >= spaces.num_actions() {
            return Err(ModelError::Invalid(format!("true action {y} is out of range")));
        }
    }
    let mut best: Option<Inferred> = None;
    for y in 0..spaces.num_actions() {
        let owned = spaces.maes_of_action(y);
        let mut mae = BTreeMap::new();
        // Accumulate exactly as the scorer does: whole-video term first,
        // then nodes in ascending id order.
        let x0 = tree.root_feature();
        let mut total: f64 = params.eta[y].iter().zip(x0).map(|(w, x)| w * x).sum();
        if owned.is_empty() {
            if tree.num_non_root() > 0 {
                log::warn!(
                    "action {} owns no elements; scoring video {} from its whole-video term only",
                    spaces.actions[y],
                    tree.video_id
                );
            }
        } else {
            for node in 1..tree.nodes.len() {
                let mut best_h = owned[0];
                let mut best_v = node_unary(params, tree, table, node, best_h);
                for &h in &owned[1..] {
                    let v = node_unary(params, tree, table, node, h);
                    if v > best_v {
                        best_v = v;
                        best_h = h;
                    }
                }
                mae.insert(node, best_h);
                total += best_v;
            }
        }
        let total = match true_action {
            Some(t) if t != y => total + 1.0,
            _ => total,
        };
        // Strictly-greater acceptance while ascending keeps the lowest
        // action id on ties.
        if best.as_ref().is_none_or(|b| total > b.score) {
            best = Some(Inferred { labeling: Labeling { action: y, mae }, score: total });
        }
    }
    let best = best.expect("at least one action");
    debug_assert!({
        let base = score(spaces, params, tree, table, &best.labeling).unwrap();
        let with_loss = match true_action {
            Some(t) if t != best.labeling.action => base + 1.0,
            _ => base,
        };
        with_loss == best.score
    });
    Ok(best)
}

/// Result of a parsing maximization: one label per non-root node.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLabels {
    pub labels: Vec<usize>,
    pub score: f64,
}

/// Best per-node labels over a flat label space, with no action variable
/// and no whole-video term. Ties prefer the lowest label id.
pub fn infer_parsing(
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
) -> Result<ParsedLabels, ModelError> {
    infer_parsing_with_loss(params, tree, table, None)
}

/// Margin-rescaled parsing search: each node whose label differs from the
/// reference contributes `1 / num_nodes` of loss.
pub fn infer_parsing_loss_augmented(
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    true_labels: &[usize],
) -> Result<ParsedLabels, ModelError> {
    infer_parsing_with_loss(params, tree, table, Some(true_labels))
}

fn infer_parsing_with_loss(
    params: &ModelParams,
    tree: &SegmentTree,
    table: &ScoreTable,
    true_labels: Option<&[usize]>,
) -> Result<ParsedLabels, ModelError> {
    let (_, nm, _) = params.dims();
    if nm == 0 {
        return Err(ModelError::Invalid("empty label space".into()));
    }
    let m = tree.num_non_root();
    if let Some(t) = true_labels {
        if t.len() != m {
            return Err(ModelError::Invalid(format!(
                "reference labels cover {} nodes, tree has {m}",
                t.len()
            )));
        }
    }
    if table.num_nodes != m || table.num_maes != nm {
        return Err(ModelError::Invalid(format!(
            "score table is {}x{}, tree/label space need {m}x{nm}",
            table.num_nodes, table.num_maes
        )));
    }
    let per_node_loss = if m > 0 { 1.0 / m as f64 } else { 0.0 };
    let mut labels = Vec::with_capacity(m);
    let mut total = 0.0;
    let mut loss = 0.0;
    for node in 1..tree.nodes.len() {
        let mut best_z = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for z in 0..nm {
            let mut v = node_unary(params, tree, table, node, z);
            if let Some(t) = true_labels {
                if z != t[node - 1] {
                    v += per_node_loss;
                }
            }
            if v > best_v {
                best_v = v;
                best_z = z;
            }
        }
        labels.push(best_z);
        total += node_unary(params, tree, table, node, best_z);
        if let Some(t) = true_labels {
            if best_z != t[node - 1] {
                loss += per_node_loss;
            }
        }
    }
    let score_with_loss = total + loss;
    debug_assert!({
        let base = score_parsing(params, tree, table, &labels).unwrap();
        base == total
    });
    Ok(ParsedLabels { labels, score: score_with_loss })
}
