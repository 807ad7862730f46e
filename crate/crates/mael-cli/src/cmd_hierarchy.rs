//! `build-hierarchy`: one segment tree per video from a dataset file.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use mael::data::load_dataset_any;
use mael::hierarchy::{
    build_all_trees, save_trees, ClusterCount, DistanceWeights, HierarchyConfig, TreeFileHeader,
};

use crate::common::{resolve, resolve_with, validation, Cfg, Result, RunInfo};

#[derive(Args)]
pub struct BuildHierarchyArgs {
    /// Input dataset JSONL.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output tree JSONL.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep proposals scoring strictly above this foreground threshold.
    #[arg(long)]
    foreground_threshold: Option<f64>,
    /// Per-frame seed positives for the pruning classifier.
    #[arg(long)]
    top_n_seed_positives: Option<usize>,
    /// Spatiotemporal clusters per video: "auto" or a fixed count.
    #[arg(long, value_name = "N|auto")]
    num_st_clusters: Option<String>,
    /// Parent/child member overlap above which the parent is removed.
    #[arg(long)]
    trim_overlap: Option<f64>,
    /// Appearance distance weight in the pooling affinity.
    #[arg(long)]
    weight_color: Option<f64>,
    /// Shape-mask distance weight in the pooling affinity.
    #[arg(long)]
    weight_shape: Option<f64>,
    /// Space-time distance weight in the pooling affinity.
    #[arg(long)]
    weight_xyt: Option<f64>,
}

pub fn parse_cluster_count(raw: &str) -> Result<ClusterCount> {
    if raw.eq_ignore_ascii_case("auto") {
        return Ok(ClusterCount::Auto);
    }
    raw.parse::<usize>()
        .map(ClusterCount::Fixed)
        .map_err(|_| validation(format!("num-st-clusters must be \"auto\" or an integer, got {raw:?}")))
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    hierarchy: &'a HierarchyConfig,
    seed: u64,
}

pub fn run(args: BuildHierarchyArgs, cfg: &Cfg) -> Result<()> {
    let d = HierarchyConfig::default();
    let hcfg = HierarchyConfig {
        foreground_threshold: resolve(
            args.foreground_threshold,
            cfg,
            "foreground-threshold",
            d.foreground_threshold,
        )?,
        top_n_seed_positives: resolve(
            args.top_n_seed_positives,
            cfg,
            "top-n-seed-positives",
            d.top_n_seed_positives,
        )?,
        num_st_clusters: resolve_with(
            args.num_st_clusters,
            cfg,
            "num-st-clusters",
            d.num_st_clusters,
            parse_cluster_count,
        )?,
        trim_overlap: resolve(args.trim_overlap, cfg, "trim-overlap", d.trim_overlap)?,
        distance_weights: DistanceWeights {
            color: resolve(args.weight_color, cfg, "weight-color", d.distance_weights.color)?,
            shape: resolve(args.weight_shape, cfg, "weight-shape", d.distance_weights.shape)?,
            xyt: resolve(args.weight_xyt, cfg, "weight-xyt", d.distance_weights.xyt)?,
        },
    };
    let seed = resolve(args.seed, cfg, "seed", 0u64)?;

    let mut info = RunInfo::new("build-hierarchy");
    info.input("dataset", &args.input);
    info.seed(seed);
    info.config(&ResolvedConfig { hierarchy: &hcfg, seed })?;

    let dataset = load_dataset_any(&args.input)?;
    let trees = build_all_trees(&dataset, &hcfg, seed)?;
    let header = TreeFileHeader {
        mode: dataset.header.mode,
        d_a: dataset.header.d_a,
        d_b: dataset.header.d_b,
        k: dataset.header.k,
        trim_overlap: hcfg.trim_overlap,
    };
    save_trees(&args.out, &header, &trees)?;
    info.write_manifest(&args.out)?;

    let nodes: usize = trees.iter().map(|t| t.nodes.len()).sum();
    log::info!(
        "built {} trees ({} nodes total) into {}",
        trees.len(),
        nodes,
        args.out.display()
    );
    Ok(())
}
