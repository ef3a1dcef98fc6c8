use std::path::PathBuf;

use clap::Args;
use ordepth_core::api::ItemRegistry;
use ordepth_core::io::{read_jsonl, write_jsonl};
use ordepth_core::supervision::{relations_from_depths, RelationSet, DEFAULT_TIE_THRESHOLD_MM};
use ordepth_core::synth::{default_camera, sample_poses, PoseDistribution};
use serde::{Deserialize, Serialize};

use crate::{read_input, write_output, CmdResult, Failure};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pose distribution JSON; the built-in distribution when omitted.
    #[arg(long)]
    distribution: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TIE_THRESHOLD_MM)]
    tie_threshold: f64,
    /// Re-read every output file and check it against its schema.
    #[arg(long)]
    validate: bool,
}

/// One line of `relations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub item_id: String,
    pub relations: RelationSet,
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    println!("seed: {}", a.seed);
    if a.count == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--count must be positive")));
    }
    let dist: PoseDistribution = match &a.distribution {
        Some(p) => serde_json::from_str(&read_input(p)?).map_err(|e| Failure::Usage(e.into()))?,
        None => PoseDistribution::default(),
    };
    dist.validate()?;
    let poses = sample_poses(&dist, a.seed, a.count)?;
    let registry = ItemRegistry::from_poses(a.seed, dist.skeleton.clone(), default_camera(), &poses)?;
    let rows = registry
        .items
        .iter()
        .zip(&poses)
        .map(|(item, pose)| {
            Ok(RelationRow {
                item_id: item.item_id.clone(),
                relations: relations_from_depths(&pose.depths(), a.tie_threshold)?,
            })
        })
        .collect::<Result<Vec<_>, ordepth_core::Error>>()?;

    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.into()))?;
    let registry_path = a.out.join("registry.json");
    let relations_path = a.out.join("relations.jsonl");
    let dist_path = a.out.join("distribution.json");
    registry.save(&registry_path)?;
    write_jsonl(&relations_path, &rows)?;
    write_output(&dist_path, &serde_json::to_string_pretty(&dist).map_err(|e| Failure::Runtime(e.into()))?)?;
    println!("items: {}", registry.items.len());
    println!("registry: {}", registry_path.display());
    println!("relations: {}", relations_path.display());

    if a.validate {
        let back = ItemRegistry::load(&registry_path)?;
        if back != registry {
            return Err(Failure::Check("registry does not round-trip".into()));
        }
        let back: Vec<RelationRow> = read_jsonl(&relations_path)?;
        if back != rows {
            return Err(Failure::Check("relations do not round-trip".into()));
        }
        let d: PoseDistribution = serde_json::from_str(&read_input(&dist_path)?).map_err(|e| Failure::Check(e.to_string()))?;
        d.validate().map_err(|e| Failure::Check(e.to_string()))?;
        println!("validated: registry.json, relations.jsonl, distribution.json");
    }
    Ok(())
}
