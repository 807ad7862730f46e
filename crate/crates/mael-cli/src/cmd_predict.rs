//! `predict`: whole-video classification with a trained recognition model.

use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use mael::data::DatasetMode;
use mael::discovery::{assign_mae_scores, MAEVocabulary};
use mael::hierarchy::load_trees;
use mael::inference::infer;
use mael::training::TrainedModel;

use crate::common::{
    validation, Cfg, PredictionHeader, RecognitionPrediction, Result, RunInfo,
};

#[derive(Args)]
pub struct PredictArgs {
    /// Tree JSONL for the videos to classify.
    #[arg(long, value_name = "FILE")]
    trees: PathBuf,
    /// Trained recognition model JSON.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Element vocabulary the model was trained with.
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Output predictions JSONL.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Serialize)]
struct ResolvedConfig {
    mode: &'static str,
}

pub fn run(args: PredictArgs, cfg: &Cfg) -> Result<()> {
    let _ = cfg; // no tunable parameters; config keys would be rejected upstream

    let mut info = RunInfo::new("predict");
    info.input("trees", &args.trees);
    info.input("model", &args.model);
    info.input("vocab", &args.vocab);
    info.config(&ResolvedConfig { mode: "recognition" })?;

    let model = TrainedModel::load(&args.model)?;
    if model.mode != DatasetMode::Recognition {
        return Err(validation("the model is a parsing model; use `parse` instead"));
    }
    let vocab = MAEVocabulary::load(&args.vocab)?;
    let fingerprint = vocab.fingerprint();
    if fingerprint != model.vocab_hash {
        return Err(validation(format!(
            "vocabulary hash mismatch: model was trained with {}, {} has {}",
            model.vocab_hash,
            args.vocab.display(),
            fingerprint
        )));
    }
    let (header, trees) = load_trees(&args.trees)?;
    if header.mode != DatasetMode::Recognition {
        return Err(validation("prediction needs recognition-mode trees"));
    }
    if header.d_b != vocab.d_b {
        return Err(validation(format!(
            "bag dimension mismatch: trees have {}, vocabulary has {}",
            header.d_b, vocab.d_b
        )));
    }
    let spaces = vocab.spaces();
    let (na, nm, d_b) = model.params.dims();
    if na != spaces.num_actions() || nm != spaces.num_maes() || d_b != vocab.d_b {
        return Err(validation(format!(
            "model shape ({na} actions, {nm} elements, bag {d_b}) does not fit the vocabulary \
             ({} actions, {} elements, bag {})",
            spaces.num_actions(),
            spaces.num_maes(),
            vocab.d_b
        )));
    }

    let rows: Vec<RecognitionPrediction> = trees
        .par_iter()
        .map(|tree| -> Result<RecognitionPrediction> {
            let table = assign_mae_scores(&vocab, tree)?;
            let inferred = infer(&spaces, &model.params, tree, &table)?;
            Ok(RecognitionPrediction {
                video_id: tree.video_id.clone(),
                action: spaces.actions[inferred.labeling.action].clone(),
                score: inferred.score,
                node_elements: inferred.labeling.mae.iter().map(|(&n, &h)| (n, h)).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let file_header =
        PredictionHeader { mode: "recognition".to_string(), vocab_hash: model.vocab_hash.clone() };
    crate::common::write_jsonl(&args.out, &file_header, &rows)?;
    info.write_manifest(&args.out)?;
    log::info!("classified {} videos into {}", rows.len(), args.out.display());
    Ok(())
}
