//! `synth`: planted dataset generation with a provenance sidecar.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use mael::data::save_dataset;
use mael::synth::{
    generate_parsing_set, generate_recognition_set, ClassSignal, ParsingSynthConfig,
    RecognitionSynthConfig,
};

use crate::common::{resolve, resolve_with, validation, Cfg, Result, RunInfo};

#[derive(Args)]
pub struct SynthArgs {
    /// Dataset kind: "recognition" (default) or "parsing".
    #[arg(long, value_name = "KIND")]
    mode: Option<String>,
    /// Output dataset JSONL path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Metadata sidecar path (default: <out>.meta.json).
    #[arg(long, value_name = "FILE")]
    metadata_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Perturbation scale and distractor rate, in [0, 1).
    #[arg(long)]
    noise: Option<f64>,

    // Recognition datasets.
    /// Number of action classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Videos per class.
    #[arg(long)]
    videos: Option<usize>,
    /// Planted recurring elements per class.
    #[arg(long)]
    elements: Option<usize>,
    /// Where the class identity lives: "structure" or "bow".
    #[arg(long)]
    signal: Option<String>,
    /// Frames each planted element track spans.
    #[arg(long)]
    frames_per_prototype: Option<usize>,

    // Parsing datasets.
    /// Base parse-label vocabulary size.
    #[arg(long)]
    labels: Option<usize>,
    /// Number of sequences to generate.
    #[arg(long)]
    sequences: Option<usize>,
    /// Mean action instances per sequence.
    #[arg(long)]
    mean_instances: Option<usize>,
    /// Sequences opening with an adjacent first-two-label instance pair.
    #[arg(long)]
    planted_pairs: Option<usize>,
    /// Contiguous label n-grams occurring strictly more often than this
    /// become composed annotations.
    #[arg(long)]
    min_support: Option<usize>,
    /// Longest composed label.
    #[arg(long)]
    max_len: Option<usize>,
}

fn parse_signal(raw: &str) -> Result<ClassSignal> {
    match raw {
        "structure" => Ok(ClassSignal::Structure),
        "bow" => Ok(ClassSignal::Bow),
        other => Err(validation(format!(
            "signal must be \"structure\" or \"bow\", got {other:?}"
        ))),
    }
}

fn default_metadata_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

#[derive(Serialize)]
struct ParsingSidecar<'a> {
    mode: &'a str,
    config: &'a ParsingSynthConfig,
    parse_labels: &'a [String],
    num_sequences: usize,
}

pub fn run(args: SynthArgs, cfg: &Cfg) -> Result<()> {
    let mode = resolve_with(args.mode, cfg, "mode", "recognition".to_string(), |s| {
        Ok(s.to_string())
    })?;
    let metadata_out = args.metadata_out.unwrap_or_else(|| default_metadata_path(&args.out));
    let mut info = RunInfo::new("synth");

    match mode.as_str() {
        "recognition" => {
            for (name, given) in [
                ("--labels", args.labels.is_some()),
                ("--sequences", args.sequences.is_some()),
                ("--mean-instances", args.mean_instances.is_some()),
                ("--planted-pairs", args.planted_pairs.is_some()),
                ("--min-support", args.min_support.is_some()),
                ("--max-len", args.max_len.is_some()),
            ] {
                if given {
                    return Err(validation(format!(
                        "{name} only applies to --mode parsing"
                    )));
                }
            }
            let d = RecognitionSynthConfig::default();
            let gcfg = RecognitionSynthConfig {
                num_classes: resolve(args.classes, cfg, "classes", d.num_classes)?,
                videos_per_class: resolve(args.videos, cfg, "videos", d.videos_per_class)?,
                maes_per_class: resolve(args.elements, cfg, "elements", d.maes_per_class)?,
                noise: resolve(args.noise, cfg, "noise", d.noise)?,
                seed: resolve(args.seed, cfg, "seed", d.seed)?,
                class_signal: resolve_with(args.signal, cfg, "signal", d.class_signal, parse_signal)?,
                frames_per_prototype: resolve(
                    args.frames_per_prototype,
                    cfg,
                    "frames-per-prototype",
                    d.frames_per_prototype,
                )?,
            };
            info.seed(gcfg.seed);
            info.config(&gcfg)?;
            let (dataset, meta) = generate_recognition_set(&gcfg)?;
            save_dataset(&args.out, &dataset)?;
            meta.save(&metadata_out)?;
            info.write_manifest(&args.out)?;
            info.write_manifest(&metadata_out)?;
            log::info!(
                "wrote {} videos across {} classes to {}",
                dataset.videos.len(),
                gcfg.num_classes,
                args.out.display()
            );
        }
        "parsing" => {
            for (name, given) in [
                ("--classes", args.classes.is_some()),
                ("--videos", args.videos.is_some()),
                ("--elements", args.elements.is_some()),
                ("--signal", args.signal.is_some()),
                ("--frames-per-prototype", args.frames_per_prototype.is_some()),
            ] {
                if given {
                    return Err(validation(format!(
                        "{name} only applies to --mode recognition"
                    )));
                }
            }
            let d = ParsingSynthConfig::default();
            let pcfg = ParsingSynthConfig {
                label_vocab_size: resolve(args.labels, cfg, "labels", d.label_vocab_size)?,
                sequences: resolve(args.sequences, cfg, "sequences", d.sequences)?,
                mean_instances_per_sequence: resolve(
                    args.mean_instances,
                    cfg,
                    "mean-instances",
                    d.mean_instances_per_sequence,
                )?,
                noise: resolve(args.noise, cfg, "noise", d.noise)?,
                seed: resolve(args.seed, cfg, "seed", d.seed)?,
                planted_pair_count: resolve(
                    args.planted_pairs,
                    cfg,
                    "planted-pairs",
                    d.planted_pair_count,
                )?,
                composition_min_support: resolve(
                    args.min_support,
                    cfg,
                    "min-support",
                    d.composition_min_support,
                )?,
                composition_max_len: resolve(args.max_len, cfg, "max-len", d.composition_max_len)?,
            };
            info.seed(pcfg.seed);
            info.config(&pcfg)?;
            let dataset = generate_parsing_set(&pcfg)?;
            save_dataset(&args.out, &dataset)?;
            let sidecar = ParsingSidecar {
                mode: "parsing",
                config: &pcfg,
                parse_labels: &dataset.labels.parse_labels,
                num_sequences: dataset.videos.len(),
            };
            let file = std::fs::File::create(&metadata_out).map_err(|e| {
                validation(format!("create {}: {e}", metadata_out.display()))
            })?;
            let mut w = std::io::BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, &sidecar)
                .map_err(|e| crate::common::internal(format!("serialize sidecar: {e}")))?;
            use std::io::Write;
            w.write_all(b"\n")
                .and_then(|()| w.flush())
                .map_err(|e| crate::common::internal(format!("write sidecar: {e}")))?;
            info.write_manifest(&args.out)?;
            info.write_manifest(&metadata_out)?;
            log::info!(
                "wrote {} sequences with {} parse labels to {}",
                dataset.videos.len(),
                dataset.labels.parse_labels.len().saturating_sub(1),
                args.out.display()
            );
        }
        other => {
            return Err(validation(format!(
                "mode must be \"recognition\" or \"parsing\", got {other:?}"
            )))
        }
    }
    Ok(())
}
