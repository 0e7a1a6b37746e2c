use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{read_checkpoint, Agent, Role};
use crate::error::{Error, Result};
use crate::game::Dataset;
use crate::metrics::{snapshot, MetricsRecord, SnapshotInputs};
use crate::population::LteConfig;

pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// Written next to the checkpoints of a snapshot; enough to recompute its
/// metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotManifest {
    pub iteration: usize,
    pub metrics_seed: u64,
    pub config: LteConfig,
    /// Checkpoint file names in population order.
    pub senders: Vec<String>,
    pub receivers: Vec<String>,
    pub record: MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub recomputed: MetricsRecord,
    pub logged: MetricsRecord,
    /// Largest absolute difference over the real-valued columns.
    pub max_abs_diff: f64,
}

fn load(dir: &Path, names: &[String], role: Role) -> Result<Vec<Agent>> {
    names
        .iter()
        .map(|n| {
            let path = dir.join(n);
            let a = read_checkpoint(&path)?;
            if a.role != role {
                return Err(Error::format(path, format!("expected a {}", role.name())));
            }
            Ok(a)
        })
        .collect()
}

/// Recomputes the metrics of the snapshot stored in `dir`.
pub fn cmd_eval(dir: &Path) -> Result<EvalReport> {
    let manifest_path = dir.join(SNAPSHOT_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingPath(manifest_path));
    }
    let manifest: SnapshotManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let senders = load(dir, &manifest.senders, Role::Sender)?;
    let receivers = load(dir, &manifest.receivers, Role::Receiver)?;
    let cfg = &manifest.config;
    let dataset = Dataset::generate(cfg.dataset.clone())?;
    let inputs = SnapshotInputs {
        dataset: &dataset,
        distractors: cfg.distractors,
        tau: cfg.tau,
        config: &cfg.metrics,
    };
    let recomputed = snapshot(
        &senders.iter().collect::<Vec<_>>(),
        &receivers.iter().collect::<Vec<_>>(),
        &inputs,
        manifest.iteration,
        &manifest.record.setup,
        manifest.record.seed,
        manifest.metrics_seed,
    )?;
    let max_abs_diff = recomputed
        .values()
        .iter()
        .zip(manifest.record.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(EvalReport {
        recomputed,
        logged: manifest.record,
        max_abs_diff,
    })
}
