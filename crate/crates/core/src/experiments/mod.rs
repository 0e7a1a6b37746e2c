//! Experiment configuration, run directories, and the command bodies
//! behind the `lte` binary.

mod csv_io;
mod eval;
mod frozen;
mod run;

pub use csv_io::{aggregate, read_metrics_csv, write_aggregate_csv, write_metrics_csv, AggregateRow};
pub use eval::{cmd_eval, EvalReport, SnapshotManifest, SNAPSHOT_FILE};
pub use frozen::{
    batches_to_target, cmd_frozen, median_batches, run_frozen, select_frozen_sender, ArmKind,
    ArmResult, CurvePoint, FrozenOutcome, FrozenSpec,
};
pub use run::{cmd_run, run_single, RunDirObserver};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agents::AgentConfig;
use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::game::DatasetManifest;
use crate::metrics::MetricsConfig;
use crate::population::{cull_count, CullingPolicy, LteConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::config("profile", format!("unknown profile `{s}` (paper, desk)"))),
        }
    }
}

/// Fully resolved experiment configuration. Every field is a key of the
/// JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub population_size: usize,
    pub alpha: f64,
    pub culling_interval: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub distractors: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub tau: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub reset_optimizer_per_batch: bool,
    pub z: usize,
    pub hidden_size: usize,
    pub embed_size: usize,
    pub feed_previous_token: bool,
    pub sigma: f64,
    pub split_sizes: [usize; 3],
    pub data_seed: u64,
    pub setups: Vec<CullingPolicy>,
    pub seeds: Vec<u64>,
    pub jaccard_samples: usize,
    pub topo_pairs: usize,
    pub eval_rounds: usize,
    pub eval_batch: usize,
    /// Write every agent's checkpoint at each cull.
    pub checkpoints: bool,
    pub frozen_repetitions: usize,
    pub frozen_batches: usize,
    pub frozen_pretrain_batches: usize,
    pub frozen_window: usize,
    pub frozen_target: f64,
    pub frozen_arms: Vec<ArmKind>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn defaults(profile: Profile) -> Self {
        let desk = ExperimentConfig {
            profile,
            population_size: 4,
            alpha: 0.25,
            culling_interval: 200,
            iterations: 4000,
            batch_size: 128,
            distractors: 3,
            vocab_size: 4,
            max_len: 5,
            tau: 1.2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            reset_optimizer_per_batch: true,
            z: 64,
            hidden_size: 64,
            embed_size: 64,
            feed_previous_token: true,
            sigma: 0.1,
            split_sizes: [8_000, 1_000, 4_000],
            data_seed: 0,
            setups: CullingPolicy::ALL.to_vec(),
            seeds: vec![0],
            jaccard_samples: 200,
            topo_pairs: 5000,
            eval_rounds: 1024,
            eval_batch: 1024,
            checkpoints: true,
            frozen_repetitions: 10,
            frozen_batches: 1000,
            frozen_pretrain_batches: 2000,
            frozen_window: 10,
            frozen_target: 0.6,
            frozen_arms: ArmKind::ALL.to_vec(),
            out: None,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => ExperimentConfig {
                population_size: 16,
                culling_interval: 5000,
                iterations: 500_000,
                batch_size: 1024,
                z: 512,
                split_sizes: [80_000, 8_000, 40_000],
                seeds: vec![0, 1, 2, 3],
                frozen_batches: 20_000,
                frozen_pretrain_batches: 100_000,
                ..desk
            },
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            feature_size: self.z,
            hidden_size: self.hidden_size,
            embed_size: self.embed_size,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            feed_previous_token: self.feed_previous_token,
        }
    }

    pub fn dataset_manifest(&self) -> DatasetManifest {
        DatasetManifest::from_seed(self.data_seed, self.z, self.sigma, self.split_sizes)
    }

    pub fn lte_config(&self, policy: CullingPolicy, seed: u64) -> LteConfig {
        LteConfig {
            population_size: self.population_size,
            culling_rate: self.alpha,
            culling_interval: self.culling_interval,
            iterations: self.iterations,
            batch_size: self.batch_size,
            distractors: self.distractors,
            tau: self.tau,
            agent: self.agent_config(),
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            reset_optimizer_per_batch: self.reset_optimizer_per_batch,
            policy,
            seed,
            dataset: self.dataset_manifest(),
            metrics: MetricsConfig {
                jaccard_samples: self.jaccard_samples,
                topo_pairs: self.topo_pairs,
                eval_rounds: self.eval_rounds,
                eval_batch: self.eval_batch,
            },
        }
    }

    pub fn frozen_spec(&self) -> FrozenSpec {
        FrozenSpec {
            repetitions: self.frozen_repetitions,
            batches: self.frozen_batches,
            pretrain_batches: self.frozen_pretrain_batches,
            window: self.frozen_window,
            target: self.frozen_target,
            arms: self.frozen_arms.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "culling rate must lie in [0, 1)"));
        }
        if self.alpha > 0.0 && cull_count(self.alpha, self.population_size) == 0 {
            return Err(Error::config("alpha", "replaces no agent at this population size"));
        }
        if self.setups.is_empty() {
            return Err(Error::config("setups", "must name at least one setup"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if !(0.0..=1.0).contains(&self.frozen_target) {
            return Err(Error::config("frozen_target", "must lie in [0, 1]"));
        }
        for (key, v) in [
            ("frozen_repetitions", self.frozen_repetitions),
            ("frozen_batches", self.frozen_batches),
            ("frozen_window", self.frozen_window),
            ("eval_rounds", self.eval_rounds),
            ("eval_batch", self.eval_batch),
            ("topo_pairs", self.topo_pairs),
            ("jaccard_samples", self.jaccard_samples),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.split_sizes.iter().take(2).any(|&s| s == 0) {
            return Err(Error::config("split_sizes", "train and validation splits must be non-empty"));
        }
        self.lte_config(self.setups[0], self.seeds[0])
            .validate()
            .map_err(|e| match e {
                Error::Config { key, message } if key == "feature_size" => {
                    Error::config("z", message)
                }
                other => other,
            })
    }
}

fn object_of(config: &ExperimentConfig) -> Map<String, Value> {
    match serde_json::to_value(config).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}

/// Resolves a configuration: profile defaults, then the file, then flag
/// overrides. The profile comes from `profile`, else the file's `profile`
/// key, else desk.
pub fn parse_config(
    path: Option<&Path>,
    profile: Option<Profile>,
    overrides: &[(String, Value)],
) -> Result<ExperimentConfig> {
    let file: Map<String, Value> = match path {
        None => Map::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::config("config", format!("cannot read {}: {e}", p.display()))
            })?;
            if text.trim().is_empty() {
                Map::new()
            } else {
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(Error::config("config", "top level must be an object")),
                    Err(e) => return Err(Error::config("config", format!("invalid JSON: {e}"))),
                }
            }
        }
    };
    let profile = match (profile, file.get("profile")) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone())
            .map_err(|e| Error::config("profile", e.to_string()))?,
        (None, None) => Profile::Desk,
    };
    let mut merged = object_of(&ExperimentConfig::defaults(profile));
    let entries = file
        .into_iter()
        .filter(|(k, _)| k != "profile")
        .chain(overrides.iter().cloned());
    for (key, value) in entries {
        if !merged.contains_key(&key) {
            return Err(Error::config(&key, "unknown key"));
        }
        let mut probe = merged.clone();
        probe.insert(key.clone(), value.clone());
        if let Err(e) = serde_json::from_value::<ExperimentConfig>(Value::Object(probe)) {
            return Err(Error::config(&key, e.to_string()));
        }
        merged.insert(key, value);
    }
    let config: ExperimentConfig = serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::config("config", e.to_string()))?;
    config.validate()?;
    Ok(config)
}
