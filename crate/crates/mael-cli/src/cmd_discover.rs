//! `discover-maes`: per-action element vocabulary from training trees,
//! with a cluster-size/purity diagnostics table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use mael::discovery::{discover_maes, DiscoveryConfig, MAEVocabulary, MaeCount};
use mael::hierarchy::{load_trees, SegmentTree};
use mael::synth::{node_prototype, PlantedMetadata};

use crate::common::{resolve, resolve_with, validation, Cfg, Result, RunInfo};

#[derive(Args)]
pub struct DiscoverMaesArgs {
    /// Input tree JSONL (recognition mode, every tree labeled).
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output vocabulary JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Diagnostics CSV (default: <out>.diagnostics.csv).
    #[arg(long, value_name = "FILE")]
    diagnostics: Option<PathBuf>,
    /// Planted-metadata sidecar; adds prototype purity columns.
    #[arg(long, value_name = "FILE")]
    planted_metadata: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial spectral clusters per action.
    #[arg(long)]
    init_clusters: Option<usize>,
    /// Discard initial clusters smaller than this.
    #[arg(long)]
    min_cluster_size: Option<usize>,
    /// Detections per cluster classifier in the co-firing affinity.
    #[arg(long)]
    top_k_detections: Option<usize>,
    /// Final elements per action: "auto" or a fixed count.
    #[arg(long, value_name = "N|auto")]
    final_maes: Option<String>,
}

fn parse_mae_count(raw: &str) -> Result<MaeCount> {
    if raw.eq_ignore_ascii_case("auto") {
        return Ok(MaeCount::Auto);
    }
    raw.parse::<usize>()
        .map(MaeCount::Fixed)
        .map_err(|_| validation(format!("final-maes must be \"auto\" or an integer, got {raw:?}")))
}

fn default_diagnostics_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".diagnostics.csv");
    PathBuf::from(os)
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    discovery: &'a DiscoveryConfig,
    seed: u64,
}

/// Per-cluster rows: id, owner, member count, and (with planted metadata)
/// the dominant planted prototype and the fraction of members matching it.
fn diagnostics_rows(
    vocab: &MAEVocabulary,
    trees: &[SegmentTree],
    meta: Option<&PlantedMetadata>,
) -> Result<Vec<Vec<String>>> {
    let by_video: BTreeMap<&str, &SegmentTree> =
        trees.iter().map(|t| (t.video_id.as_str(), t)).collect();
    let mut rows = Vec::with_capacity(vocab.maes.len());
    for mae in &vocab.maes {
        let mut row = vec![
            mae.mae_id.to_string(),
            vocab.actions[mae.owner_action].clone(),
            mae.member_segments.len().to_string(),
        ];
        match meta {
            None => row.extend([String::new(), String::new()]),
            Some(meta) => {
                let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
                for (vid, node) in &mae.member_segments {
                    let tree = by_video.get(vid.as_str()).ok_or_else(|| {
                        validation(format!("vocabulary references unknown video {vid:?}"))
                    })?;
                    let planted = meta.video(vid).ok_or_else(|| {
                        validation(format!("planted metadata lacks video {vid:?}"))
                    })?;
                    if let Some(p) = node_prototype(planted, &tree.nodes[*node].member_proposals) {
                        *counts.entry(p).or_default() += 1;
                    }
                }
                // Highest count wins; BTreeMap order keeps ties on the
                // lowest prototype id.
                let dominant = counts.iter().max_by_key(|(_, &c)| c).map(|(&p, &c)| (p, c));
                match dominant {
                    Some((proto, count)) if !mae.member_segments.is_empty() => {
                        let purity = count as f64 / mae.member_segments.len() as f64;
                        row.extend([proto.to_string(), format!("{purity}")]);
                    }
                    _ => row.extend([String::new(), "0".to_string()]),
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn run(args: DiscoverMaesArgs, cfg: &Cfg) -> Result<()> {
    let d = DiscoveryConfig::default();
    let dcfg = DiscoveryConfig {
        init_clusters_per_action: resolve(
            args.init_clusters,
            cfg,
            "init-clusters",
            d.init_clusters_per_action,
        )?,
        min_cluster_size: resolve(args.min_cluster_size, cfg, "min-cluster-size", d.min_cluster_size)?,
        top_k_detections: resolve(args.top_k_detections, cfg, "top-k-detections", d.top_k_detections)?,
        final_maes_per_action: resolve_with(
            args.final_maes,
            cfg,
            "final-maes",
            d.final_maes_per_action,
            parse_mae_count,
        )?,
    };
    let seed = resolve(args.seed, cfg, "seed", 0u64)?;
    let diagnostics = args.diagnostics.unwrap_or_else(|| default_diagnostics_path(&args.out));

    let mut info = RunInfo::new("discover-maes");
    info.input("trees", &args.input);
    if let Some(p) = &args.planted_metadata {
        info.input("planted-metadata", p);
    }
    info.seed(seed);
    info.config(&ResolvedConfig { discovery: &dcfg, seed })?;

    let (header, trees) = load_trees(&args.input)?;
    if header.mode != mael::data::DatasetMode::Recognition {
        return Err(validation(
            "element discovery needs recognition-mode trees with action labels",
        ));
    }
    let mut action_names: Vec<String> = Vec::new();
    for t in &trees {
        match &t.action_label {
            Some(a) => action_names.push(a.clone()),
            None => {
                return Err(validation(format!(
                    "video {} has no action label; discovery needs labeled training trees",
                    t.video_id
                )))
            }
        }
    }
    action_names.sort();
    action_names.dedup();
    let actions: Vec<usize> = trees
        .iter()
        .map(|t| {
            let name = t.action_label.as_deref().expect("checked above");
            action_names.iter().position(|a| a == name).expect("name collected above")
        })
        .collect();

    let vocab = discover_maes(&trees, &actions, &action_names, header.d_b, &dcfg, seed)?;
    vocab.save(&args.out)?;

    let meta = match &args.planted_metadata {
        None => None,
        Some(p) => Some(PlantedMetadata::load(p)?),
    };
    let rows = diagnostics_rows(&vocab, &trees, meta.as_ref())?;
    crate::common::write_csv(
        &diagnostics,
        &["mae_id", "owner_action", "members", "dominant_prototype", "purity"],
        &rows,
    )?;

    info.write_manifest(&args.out)?;
    info.write_manifest(&diagnostics)?;

    let mut per_action = vec![0usize; action_names.len()];
    for mae in &vocab.maes {
        per_action[mae.owner_action] += 1;
    }
    let counts: Vec<String> = action_names
        .iter()
        .zip(&per_action)
        .map(|(a, c)| format!("{a}:{c}"))
        .collect();
    log::info!(
        "discovered {} elements ({}) into {}",
        vocab.maes.len(),
        counts.join(" "),
        args.out.display()
    );
    Ok(())
}
