//! `train`: cutting-plane structural learning for recognition (with a
//! discovered element vocabulary) or parsing (building its per-label
//! vocabulary on the way).

use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use mael::data::DatasetMode;
use mael::discovery::{
    assign_mae_scores, associate_parse_labels, build_parsing_vocabulary, MAEVocabulary,
};
use mael::hierarchy::load_trees;
use mael::model::ScoreTable;
use mael::training::{
    assign_training_maes, train_parsing, train_recognition, ParsingSample, RecognitionSample,
    TrainConfig, TrainingReport,
};

use crate::common::{resolve, resolve_with, validation, Cfg, Result, RunInfo};

#[derive(Args)]
pub struct TrainArgs {
    /// Task: "recognition" (default) or "parsing".
    #[arg(long, value_name = "KIND")]
    mode: Option<String>,
    /// Training tree JSONL.
    #[arg(long, value_name = "FILE")]
    trees: PathBuf,
    /// Element vocabulary JSON (recognition input).
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Where to write the per-label parsing vocabulary (parsing output).
    #[arg(long, value_name = "FILE")]
    vocab_out: Option<PathBuf>,
    /// Output model JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Per-iteration convergence CSV (default: <out>.log.csv).
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    /// Slack penalty of the structural objective.
    #[arg(long)]
    c: Option<f64>,
    /// Constraint violations at or below this count as satisfied.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Subgradient steps per restricted-problem re-solve.
    #[arg(long)]
    qp_inner: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".log.csv");
    PathBuf::from(os)
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    mode: &'a str,
    train: &'a TrainConfig,
}

fn write_iteration_log(path: &Path, report: &TrainingReport) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .iteration_log
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                format!("{}", r.objective),
                format!("{}", r.max_violation),
                r.num_constraints.to_string(),
            ]
        })
        .collect();
    crate::common::write_csv(
        path,
        &["iteration", "objective", "max_violation", "num_constraints"],
        &rows,
    )
}

pub fn run(args: TrainArgs, cfg: &Cfg) -> Result<()> {
    let mode = resolve_with(args.mode, cfg, "mode", "recognition".to_string(), |s| {
        Ok(s.to_string())
    })?;
    let d = TrainConfig::default();
    let tcfg = TrainConfig {
        c: resolve(args.c, cfg, "c", d.c)?,
        tolerance: resolve(args.tolerance, cfg, "tolerance", d.tolerance)?,
        max_iterations: resolve(args.max_iterations, cfg, "max-iterations", d.max_iterations)?,
        qp_inner: resolve(args.qp_inner, cfg, "qp-inner", d.qp_inner)?,
        seed: resolve(args.seed, cfg, "seed", d.seed)?,
    };
    let log_path = args.log.unwrap_or_else(|| default_log_path(&args.out));

    let mut info = RunInfo::new("train");
    info.input("trees", &args.trees);
    info.seed(tcfg.seed);
    info.config(&ResolvedConfig { mode: &mode, train: &tcfg })?;

    let (header, trees) = load_trees(&args.trees)?;

    match mode.as_str() {
        "recognition" => {
            let vocab_path = args.vocab.ok_or_else(|| {
                validation("recognition training needs --vocab (from discover-maes)")
            })?;
            if args.vocab_out.is_some() {
                return Err(validation(
                    "--vocab-out only applies to --mode parsing; recognition reads --vocab",
                ));
            }
            if header.mode != DatasetMode::Recognition {
                return Err(validation("recognition training needs recognition-mode trees"));
            }
            info.input("vocab", &vocab_path);
            let vocab = MAEVocabulary::load(&vocab_path)?;
            if vocab.d_b != header.d_b {
                return Err(validation(format!(
                    "bag dimension mismatch: trees have {}, vocabulary has {}",
                    header.d_b, vocab.d_b
                )));
            }
            let spaces = vocab.spaces();
            let actions: Vec<usize> = trees
                .iter()
                .map(|t| {
                    let name = t.action_label.as_deref().ok_or_else(|| {
                        validation(format!("video {} has no action label", t.video_id))
                    })?;
                    vocab.actions.iter().position(|a| a == name).ok_or_else(|| {
                        validation(format!(
                            "video {}: action {name:?} is not in the vocabulary",
                            t.video_id
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let tables: Vec<ScoreTable> = trees
                .par_iter()
                .map(|t| assign_mae_scores(&vocab, t))
                .collect::<std::result::Result<_, _>>()?;
            let truths = assign_training_maes(&vocab, &spaces, &trees, &actions, &tables)?;
            let samples: Vec<RecognitionSample<'_>> = trees
                .iter()
                .zip(&tables)
                .zip(actions.iter().zip(truths))
                .map(|((tree, table), (&action, truth))| RecognitionSample {
                    tree,
                    table,
                    action,
                    truth,
                })
                .collect();
            let (model, report) =
                train_recognition(&spaces, &samples, header.d_b, &vocab.fingerprint(), &tcfg)?;
            model.save(&args.out)?;
            write_iteration_log(&log_path, &report)?;
            info.write_manifest(&args.out)?;
            info.write_manifest(&log_path)?;
            summarize(&report, &model.objective_trace);
        }
        "parsing" => {
            let vocab_out = args.vocab_out.ok_or_else(|| {
                validation("parsing training builds its label vocabulary; pass --vocab-out")
            })?;
            if args.vocab.is_some() {
                return Err(validation(
                    "--vocab only applies to --mode recognition; parsing writes --vocab-out",
                ));
            }
            if header.mode != DatasetMode::Parsing {
                return Err(validation("parsing training needs parsing-mode trees"));
            }
            let labels = crate::common::parse_label_space(&trees)?;
            let pvocab = build_parsing_vocabulary(&trees, &labels, header.d_b, tcfg.seed)?;
            pvocab.save(&vocab_out)?;
            let tables: Vec<ScoreTable> = trees
                .par_iter()
                .map(|t| pvocab.assign_scores(t))
                .collect::<std::result::Result<_, _>>()?;
            let truths: Vec<Vec<usize>> = trees
                .iter()
                .map(|t| associate_parse_labels(t, &labels))
                .collect::<std::result::Result<_, _>>()?;
            let samples: Vec<ParsingSample<'_>> = trees
                .iter()
                .zip(&tables)
                .zip(&truths)
                .map(|((tree, table), truth)| ParsingSample { tree, table, truth: truth.clone() })
                .collect();
            let (model, report) =
                train_parsing(&samples, labels.len(), &pvocab.fingerprint(), &tcfg)?;
            model.save(&args.out)?;
            write_iteration_log(&log_path, &report)?;
            info.write_manifest(&vocab_out)?;
            info.write_manifest(&args.out)?;
            info.write_manifest(&log_path)?;
            summarize(&report, &model.objective_trace);
        }
        other => {
            return Err(validation(format!(
                "mode must be \"recognition\" or \"parsing\", got {other:?}"
            )))
        }
    }
    Ok(())
}

fn summarize(report: &TrainingReport, trace: &[f64]) {
    log::info!(
        "training {} after {} iterations, final objective {}",
        if report.converged { "converged" } else { "stopped" },
        report.iterations,
        trace.last().copied().unwrap_or(f64::NAN)
    );
}
