//! `evaluate`: metric tables from predictions or detections, plus the
//! root-only ablation that retrains on whole-video features alone.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use mael::data::{load_dataset, DatasetMode};
use mael::eval::{localization_map, predict_root_only, train_root_only, Detection};
use mael::hierarchy::load_trees;
use mael::training::TrainedModel;

use crate::common::{
    parse_f64_list, resolve, resolve_with, validation, Cfg, DetectionRecord, PredictionHeader,
    RecognitionPrediction, Result, RunInfo,
};

#[derive(Args)]
pub struct EvaluateArgs {
    /// What to score: "recognition" (default), "parsing", or "root-ablation".
    #[arg(long, value_name = "KIND")]
    mode: Option<String>,
    /// Predictions (recognition) or detections (parsing) JSONL.
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
    /// Ground-truth dataset JSONL.
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Output CSV.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Model whose vocabulary hash the predictions must match.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// IoU thresholds for the localization table, comma separated.
    #[arg(long, value_name = "LIST")]
    thresholds: Option<String>,
    /// Labeled training trees for the root-only ablation.
    #[arg(long, value_name = "FILE")]
    train_trees: Option<PathBuf>,
    /// Labeled evaluation trees for the root-only ablation.
    #[arg(long, value_name = "FILE")]
    trees: Option<PathBuf>,
    /// Ablation classifier slack penalty.
    #[arg(long)]
    svm_c: Option<f64>,
    /// Ablation classifier training epochs.
    #[arg(long)]
    svm_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct RecognitionEvalConfig {
    mode: &'static str,
}

#[derive(Serialize)]
struct ParsingEvalConfig<'a> {
    mode: &'static str,
    thresholds: &'a [f64],
}

#[derive(Serialize)]
struct AblationConfig {
    mode: &'static str,
    svm_c: f64,
    svm_epochs: usize,
    seed: u64,
}

/// `--model` guard shared by the prediction-scoring modes: the model's
/// vocabulary hash must match the one stamped in the predictions file.
fn check_model_hash(
    model_path: Option<&PathBuf>,
    file_header: &PredictionHeader,
    expected_mode: DatasetMode,
) -> Result<()> {
    let Some(path) = model_path else {
        return Ok(());
    };
    let model = TrainedModel::load(path)?;
    if model.mode != expected_mode {
        return Err(validation(format!(
            "{} is a {:?}-mode model, but the predictions are {}",
            path.display(),
            model.mode,
            file_header.mode
        )));
    }
    if model.vocab_hash != file_header.vocab_hash {
        return Err(validation(format!(
            "vocabulary hash mismatch: model {} was trained with {}, predictions carry {}",
            path.display(),
            model.vocab_hash,
            file_header.vocab_hash
        )));
    }
    Ok(())
}

fn forbid(pairs: &[(&str, bool)], context: &str) -> Result<()> {
    for (name, given) in pairs {
        if *given {
            return Err(validation(format!("{name} does not apply to {context}")));
        }
    }
    Ok(())
}

pub fn run(args: EvaluateArgs, cfg: &Cfg) -> Result<()> {
    let mode = resolve_with(args.mode, cfg, "mode", "recognition".to_string(), |s| {
        Ok(s.to_string())
    })?;
    let mut info = RunInfo::new("evaluate");

    match mode.as_str() {
        "recognition" => {
            forbid(
                &[
                    ("--thresholds", args.thresholds.is_some()),
                    ("--train-trees", args.train_trees.is_some()),
                    ("--trees", args.trees.is_some()),
                    ("--svm-c", args.svm_c.is_some()),
                    ("--svm-epochs", args.svm_epochs.is_some()),
                    ("--seed", args.seed.is_some()),
                ],
                "--mode recognition",
            )?;
            let pred_path = args
                .predictions
                .ok_or_else(|| validation("recognition evaluation needs --predictions"))?;
            let truth_path =
                args.truth.ok_or_else(|| validation("recognition evaluation needs --truth"))?;
            info.input("predictions", &pred_path);
            info.input("truth", &truth_path);
            if let Some(m) = &args.model {
                info.input("model", m);
            }
            info.config(&RecognitionEvalConfig { mode: "recognition" })?;

            let dataset = load_dataset(&truth_path, DatasetMode::Recognition)?;
            let (file_header, preds) =
                crate::common::read_jsonl::<RecognitionPrediction>(&pred_path)?;
            if file_header.mode != "recognition" {
                return Err(validation(format!(
                    "{} holds {} output, not recognition predictions",
                    pred_path.display(),
                    file_header.mode
                )));
            }
            check_model_hash(args.model.as_ref(), &file_header, DatasetMode::Recognition)?;

            let mut by_video: BTreeMap<&str, &RecognitionPrediction> = BTreeMap::new();
            for p in &preds {
                if by_video.insert(p.video_id.as_str(), p).is_some() {
                    return Err(validation(format!(
                        "duplicate prediction for video {}",
                        p.video_id
                    )));
                }
            }
            let mut truth_ids = Vec::with_capacity(dataset.videos.len());
            let mut pred_ids = Vec::with_capacity(dataset.videos.len());
            for v in &dataset.videos {
                let truth_name = v.action_label.as_deref().ok_or_else(|| {
                    validation(format!("truth video {} has no action label", v.video_id))
                })?;
                let truth_id = dataset.labels.action_id(truth_name).ok_or_else(|| {
                    validation(format!("video {}: unknown action {truth_name:?}", v.video_id))
                })?;
                let pred = by_video.remove(v.video_id.as_str()).ok_or_else(|| {
                    validation(format!("no prediction for video {}", v.video_id))
                })?;
                let pred_id = dataset.labels.action_id(&pred.action).ok_or_else(|| {
                    validation(format!(
                        "video {}: predicted action {:?} is not in the truth label space",
                        v.video_id, pred.action
                    ))
                })?;
                truth_ids.push(truth_id);
                pred_ids.push(pred_id);
            }
            if let Some((vid, _)) = by_video.into_iter().next() {
                return Err(validation(format!(
                    "prediction for unknown video {vid:?} (not in the truth dataset)"
                )));
            }
            let (overall, mean) = crate::common::write_accuracy_csv(
                &args.out,
                &dataset.labels.actions,
                &truth_ids,
                &pred_ids,
            )?;
            info.write_manifest(&args.out)?;
            log::info!(
                "accuracy {overall} over {} videos (mean per class {mean}) into {}",
                truth_ids.len(),
                args.out.display()
            );
        }
        "parsing" => {
            forbid(
                &[
                    ("--train-trees", args.train_trees.is_some()),
                    ("--trees", args.trees.is_some()),
                    ("--svm-c", args.svm_c.is_some()),
                    ("--svm-epochs", args.svm_epochs.is_some()),
                    ("--seed", args.seed.is_some()),
                ],
                "--mode parsing",
            )?;
            let pred_path = args
                .predictions
                .ok_or_else(|| validation("parsing evaluation needs --predictions"))?;
            let truth_path =
                args.truth.ok_or_else(|| validation("parsing evaluation needs --truth"))?;
            let thresholds = resolve_with(
                args.thresholds,
                cfg,
                "thresholds",
                vec![0.1, 0.2, 0.3, 0.4, 0.5],
                parse_f64_list,
            )?;
            for &t in &thresholds {
                if !(0.0..=1.0).contains(&t) {
                    return Err(validation(format!("threshold {t} outside [0, 1]")));
                }
            }
            info.input("predictions", &pred_path);
            info.input("truth", &truth_path);
            if let Some(m) = &args.model {
                info.input("model", m);
            }
            info.config(&ParsingEvalConfig { mode: "parsing", thresholds: &thresholds })?;

            let dataset = load_dataset(&truth_path, DatasetMode::Parsing)?;
            let truth = crate::common::dataset_truth_intervals(&dataset)?;
            let (file_header, records) = crate::common::read_jsonl::<DetectionRecord>(&pred_path)?;
            if file_header.mode != "parsing" {
                return Err(validation(format!(
                    "{} holds {} output, not parsing detections",
                    pred_path.display(),
                    file_header.mode
                )));
            }
            check_model_hash(args.model.as_ref(), &file_header, DatasetMode::Parsing)?;

            // Detection labels the truth space lacks get fresh ids; the
            // matcher then counts them as unmatched detections.
            let mut label_ids: BTreeMap<String, usize> = dataset
                .labels
                .parse_labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.clone(), i))
                .collect();
            let detections: Vec<Detection> = records
                .into_iter()
                .map(|r| {
                    let next = label_ids.len();
                    let label = *label_ids.entry(r.label).or_insert(next);
                    Detection {
                        video_id: r.video_id,
                        label,
                        start_frame: r.start_frame,
                        end_frame: r.end_frame,
                        score: r.score,
                    }
                })
                .collect();

            // One AP column per truth label (background never carries
            // truth intervals, so it never appears).
            let mut truth_labels: Vec<usize> = truth.iter().map(|t| t.label).collect();
            truth_labels.sort_unstable();
            truth_labels.dedup();
            let mut header_row = vec!["threshold", "mean_ap"];
            let label_columns: Vec<String> = truth_labels
                .iter()
                .map(|&l| format!("ap:{}", dataset.labels.parse_labels[l]))
                .collect();
            header_row.extend(label_columns.iter().map(|s| s.as_str()));

            let mut rows = Vec::with_capacity(thresholds.len());
            for &thr in &thresholds {
                let result = localization_map(&detections, &truth, thr)?;
                let mut row = vec![format!("{thr}"), format!("{}", result.mean_ap)];
                for l in &truth_labels {
                    row.push(format!("{}", result.per_label_ap.get(l).copied().unwrap_or(0.0)));
                }
                rows.push(row);
            }
            crate::common::write_csv(&args.out, &header_row, &rows)?;
            info.write_manifest(&args.out)?;
            log::info!(
                "localization table over {} thresholds into {}",
                thresholds.len(),
                args.out.display()
            );
        }
        "root-ablation" => {
            forbid(
                &[
                    ("--predictions", args.predictions.is_some()),
                    ("--truth", args.truth.is_some()),
                    ("--model", args.model.is_some()),
                    ("--thresholds", args.thresholds.is_some()),
                ],
                "--mode root-ablation",
            )?;
            let train_path = args
                .train_trees
                .ok_or_else(|| validation("root ablation needs --train-trees"))?;
            let test_path = args.trees.ok_or_else(|| validation("root ablation needs --trees"))?;
            let svm_c = resolve(args.svm_c, cfg, "svm-c", 10.0)?;
            let svm_epochs = resolve(args.svm_epochs, cfg, "svm-epochs", 120)?;
            let seed = resolve(args.seed, cfg, "seed", 0u64)?;
            info.input("train-trees", &train_path);
            info.input("trees", &test_path);
            info.seed(seed);
            info.config(&AblationConfig { mode: "root-ablation", svm_c, svm_epochs, seed })?;

            let (train_header, train_trees) = load_trees(&train_path)?;
            let (test_header, test_trees) = load_trees(&test_path)?;
            for (name, header) in [("training", &train_header), ("evaluation", &test_header)] {
                if header.mode != DatasetMode::Recognition {
                    return Err(validation(format!(
                        "root ablation needs recognition-mode {name} trees"
                    )));
                }
            }
            if train_header.d_b != test_header.d_b {
                return Err(validation(format!(
                    "bag dimension mismatch: training trees have {}, evaluation trees have {}",
                    train_header.d_b, test_header.d_b
                )));
            }
            let mut class_names: Vec<String> = Vec::new();
            let label_of = |t: &mael::hierarchy::SegmentTree| -> Result<String> {
                t.action_label
                    .clone()
                    .ok_or_else(|| validation(format!("video {} has no action label", t.video_id)))
            };
            for t in &train_trees {
                class_names.push(label_of(t)?);
            }
            class_names.sort();
            class_names.dedup();
            let id_of = |name: &str, video: &str| -> Result<usize> {
                class_names.iter().position(|c| c == name).ok_or_else(|| {
                    validation(format!(
                        "video {video}: action {name:?} does not appear in the training trees"
                    ))
                })
            };
            let train_ids: Vec<usize> = train_trees
                .iter()
                .map(|t| id_of(&label_of(t)?, &t.video_id))
                .collect::<Result<_>>()?;
            let model = train_root_only(
                &train_trees,
                &train_ids,
                class_names.len(),
                svm_c,
                svm_epochs,
                seed,
            )?;
            let mut truth_ids = Vec::with_capacity(test_trees.len());
            let mut pred_ids = Vec::with_capacity(test_trees.len());
            for t in &test_trees {
                truth_ids.push(id_of(&label_of(t)?, &t.video_id)?);
                pred_ids.push(predict_root_only(&model, t)?);
            }
            let (overall, mean) =
                crate::common::write_accuracy_csv(&args.out, &class_names, &truth_ids, &pred_ids)?;
            info.write_manifest(&args.out)?;
            log::info!(
                "root-only accuracy {overall} over {} videos (mean per class {mean}) into {}",
                truth_ids.len(),
                args.out.display()
            );
        }
        other => {
            return Err(validation(format!(
                "mode must be \"recognition\", \"parsing\", or \"root-ablation\", got {other:?}"
            )))
        }
    }
    Ok(())
}
