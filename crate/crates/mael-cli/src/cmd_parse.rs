//! `parse`: temporal detections from a trained parsing model, or from the
//! sliding-window baseline when `--baseline` is set.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use mael::data::DatasetMode;
use mael::discovery::ParsingVocabulary;
use mael::eval::{
    parse_to_detections, predict_sliding_window, train_sliding_window, SlidingWindowConfig,
};
use mael::hierarchy::load_trees;
use mael::inference::infer_parsing;
use mael::training::TrainedModel;

use crate::common::{
    parse_usize_list, resolve, resolve_with, validation, Cfg, DetectionRecord, PredictionHeader,
    Result, RunInfo,
};

/// Hash stamped on baseline detection files, which no trained parsing
/// vocabulary stands behind.
pub const BASELINE_HASH: &str = "sliding-window-baseline";

#[derive(Args)]
pub struct ParseArgs {
    /// Tree JSONL for the videos to parse.
    #[arg(long, value_name = "FILE")]
    trees: PathBuf,
    /// Output detections JSONL.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Trained parsing model JSON.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Per-label parsing vocabulary the model was trained with.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Run the sliding-window baseline instead of the tree parser.
    #[arg(long)]
    baseline: bool,
    /// Annotated training trees for the baseline's window classifiers.
    #[arg(long, value_name = "FILE")]
    train_trees: Option<PathBuf>,
    /// Suppression IoU for overlapping detections.
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Baseline window lengths in frames, comma separated.
    #[arg(long, value_name = "LIST")]
    window_lengths: Option<String>,
    /// Baseline window step as a fraction of the window length.
    #[arg(long)]
    step_fraction: Option<f64>,
    /// Baseline classifier slack penalty.
    #[arg(long)]
    svm_c: Option<f64>,
    /// Baseline classifier training epochs.
    #[arg(long)]
    svm_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ModelConfig {
    kind: &'static str,
    nms_iou: f64,
}

#[derive(Serialize)]
struct BaselineConfig<'a> {
    kind: &'static str,
    window: &'a SlidingWindowConfig,
}

pub fn run(args: ParseArgs, cfg: &Cfg) -> Result<()> {
    let baseline = args.baseline || cfg.get::<bool>("baseline")?.unwrap_or(false);
    let nms_iou = resolve(args.nms_iou, cfg, "nms-iou", 0.5)?;
    let mut info = RunInfo::new("parse");
    info.input("trees", &args.trees);

    let (header, trees) = load_trees(&args.trees)?;
    if header.mode != DatasetMode::Parsing {
        return Err(validation("parsing needs parsing-mode trees"));
    }

    let (file_header, rows) = if baseline {
        for (name, given) in [
            ("--model", args.model.is_some()),
            ("--vocab", args.vocab.is_some()),
        ] {
            if given {
                return Err(validation(format!("{name} does not apply to --baseline runs")));
            }
        }
        let train_path = args
            .train_trees
            .ok_or_else(|| validation("--baseline needs --train-trees with annotated trees"))?;
        info.input("train-trees", &train_path);
        let (train_header, train_trees) = load_trees(&train_path)?;
        if train_header.mode != DatasetMode::Parsing {
            return Err(validation("baseline training needs parsing-mode trees"));
        }
        if train_header.d_b != header.d_b {
            return Err(validation(format!(
                "bag dimension mismatch: training trees have {}, input trees have {}",
                train_header.d_b, header.d_b
            )));
        }
        let defaults = SlidingWindowConfig::default();
        let swcfg = SlidingWindowConfig {
            window_lengths: resolve_with(
                args.window_lengths,
                cfg,
                "window-lengths",
                defaults.window_lengths.clone(),
                parse_usize_list,
            )?,
            step_fraction: resolve(args.step_fraction, cfg, "step-fraction", defaults.step_fraction)?,
            nms_iou,
            svm_c: resolve(args.svm_c, cfg, "svm-c", defaults.svm_c)?,
            svm_epochs: resolve(args.svm_epochs, cfg, "svm-epochs", defaults.svm_epochs)?,
            seed: resolve(args.seed, cfg, "seed", defaults.seed)?,
        };
        info.seed(swcfg.seed);
        info.config(&BaselineConfig { kind: "sliding-window-baseline", window: &swcfg })?;

        let labels = crate::common::parse_label_space(&train_trees)?;
        let truth = crate::common::tree_truth_intervals(&train_trees, &labels)?;
        let model = train_sliding_window(&train_trees, &truth, train_header.d_b, &swcfg)?;
        let dets = predict_sliding_window(&model, &trees, header.d_b)?;
        let rows: Vec<DetectionRecord> = dets
            .into_iter()
            .map(|d| DetectionRecord {
                video_id: d.video_id,
                label: labels[d.label].clone(),
                start_frame: d.start_frame,
                end_frame: d.end_frame,
                score: d.score,
            })
            .collect();
        let file_header =
            PredictionHeader { mode: "parsing".to_string(), vocab_hash: BASELINE_HASH.to_string() };
        (file_header, rows)
    } else {
        for (name, given) in [
            ("--train-trees", args.train_trees.is_some()),
            ("--window-lengths", args.window_lengths.is_some()),
            ("--step-fraction", args.step_fraction.is_some()),
            ("--svm-c", args.svm_c.is_some()),
            ("--svm-epochs", args.svm_epochs.is_some()),
            ("--seed", args.seed.is_some()),
        ] {
            if given {
                return Err(validation(format!("{name} only applies to --baseline runs")));
            }
        }
        let model_path =
            args.model.ok_or_else(|| validation("parsing needs --model (or --baseline)"))?;
        let vocab_path = args
            .vocab
            .ok_or_else(|| validation("parsing needs --vocab (written by train --mode parsing)"))?;
        info.input("model", &model_path);
        info.input("vocab", &vocab_path);
        info.config(&ModelConfig { kind: "tree-parser", nms_iou })?;

        let model = TrainedModel::load(&model_path)?;
        if model.mode != DatasetMode::Parsing {
            return Err(validation(
                "the model is a recognition model; use `predict` instead",
            ));
        }
        let pvocab = ParsingVocabulary::load(&vocab_path)?;
        let fingerprint = pvocab.fingerprint();
        if fingerprint != model.vocab_hash {
            return Err(validation(format!(
                "vocabulary hash mismatch: model was trained with {}, {} has {}",
                model.vocab_hash,
                vocab_path.display(),
                fingerprint
            )));
        }
        if pvocab.d_b != header.d_b {
            return Err(validation(format!(
                "bag dimension mismatch: trees have {}, vocabulary has {}",
                header.d_b, pvocab.d_b
            )));
        }
        let mut rows = Vec::new();
        for tree in &trees {
            let table = pvocab.assign_scores(tree)?;
            let parsed = infer_parsing(&model.params, tree, &table)?;
            let dets = parse_to_detections(&model.params, tree, &table, &parsed.labels, nms_iou)?;
            rows.extend(dets.into_iter().map(|d| DetectionRecord {
                video_id: d.video_id,
                label: pvocab.labels[d.label].clone(),
                start_frame: d.start_frame,
                end_frame: d.end_frame,
                score: d.score,
            }));
        }
        let file_header =
            PredictionHeader { mode: "parsing".to_string(), vocab_hash: model.vocab_hash.clone() };
        (file_header, rows)
    };

    crate::common::write_jsonl(&args.out, &file_header, &rows)?;
    info.write_manifest(&args.out)?;
    log::info!(
        "wrote {} detections over {} videos into {}",
        rows.len(),
        trees.len(),
        args.out.display()
    );
    Ok(())
}
