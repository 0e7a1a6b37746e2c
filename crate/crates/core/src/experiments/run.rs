use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::csv_io::{aggregate, write_aggregate_csv, write_metrics_csv};
use super::eval::{SnapshotManifest, SNAPSHOT_FILE};
use super::ExperimentConfig;
use crate::agents::{write_checkpoint, Agent};
use crate::error::{Error, Result};
use crate::game::Dataset;
use crate::metrics::MetricsRecord;
use crate::population::{lte_run, CullingPolicy, LteConfig, Population, Replacement, RunLog, RunObserver};

pub(crate) fn checkpoint_name(agent: &Agent) -> String {
    format!("{}_{}.ckpt", agent.role.name(), agent.id())
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes every agent of `pop` into `dir`; returns file names per role.
fn write_population(pop: &Population, dir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    fs::create_dir_all(dir)?;
    let mut names = (Vec::new(), Vec::new());
    for a in &pop.senders {
        let n = checkpoint_name(a);
        write_checkpoint(a, &dir.join(&n))?;
        names.0.push(n);
    }
    for a in &pop.receivers {
        let n = checkpoint_name(a);
        write_checkpoint(a, &dir.join(&n))?;
        names.1.push(n);
    }
    Ok(names)
}

/// Persists a run as it goes: metrics rows and checkpoints at each
/// snapshot, and the genotype log for co-evolution.
pub struct RunDirObserver {
    dir: PathBuf,
    config: LteConfig,
    checkpoints: bool,
    records: Vec<MetricsRecord>,
    genotypes: Option<fs::File>,
}

impl RunDirObserver {
    pub fn new(dir: &Path, config: &LteConfig, checkpoints: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), config)?;
        let genotypes = if config.policy.evolves_architecture() {
            Some(fs::File::create(dir.join("genotypes.jsonl"))?)
        } else {
            None
        };
        Ok(RunDirObserver {
            dir: dir.to_path_buf(),
            config: config.clone(),
            checkpoints,
            records: Vec::new(),
            genotypes,
        })
    }

    fn log_genotype(&mut self, iteration: usize, agent: &Agent) -> Result<()> {
        if let (Some(f), Some(g)) = (self.genotypes.as_mut(), agent.genotype()) {
            let line = json!({
                "iteration": iteration,
                "role": agent.role,
                "id": agent.id(),
                "genotype": g,
            });
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl RunObserver for RunDirObserver {
    fn on_start(&mut self, pop: &Population) -> Result<()> {
        for a in pop.agents() {
            self.log_genotype(0, a)?;
        }
        Ok(())
    }

    fn on_snapshot(&mut self, pop: &Population, record: &MetricsRecord, metrics_seed: u64) -> Result<()> {
        self.records.push(record.clone());
        write_metrics_csv(&self.records, &self.dir.join("metrics.csv"))?;
        if self.checkpoints {
            let dir = self
                .dir
                .join("checkpoints")
                .join(format!("iter_{:07}", record.iteration));
            let (senders, receivers) = write_population(pop, &dir)?;
            let manifest = SnapshotManifest {
                iteration: record.iteration,
                metrics_seed,
                config: self.config.clone(),
                senders,
                receivers,
                record: record.clone(),
            };
            write_json(&dir.join(SNAPSHOT_FILE), &manifest)?;
        }
        Ok(())
    }

    fn on_cull(&mut self, iteration: usize, pop: &Population, report: &[Replacement]) -> Result<()> {
        for r in report {
            let agent = &pop.role(r.role)[r.index];
            self.log_genotype(iteration, agent)?;
        }
        Ok(())
    }
}

/// One policy and seed into `dir`; the final population lands in
/// `dir/final`.
pub fn run_single(
    cfg: &ExperimentConfig,
    policy: CullingPolicy,
    seed: u64,
    dataset: &Dataset,
    dir: &Path,
) -> Result<RunLog> {
    let lte = cfg.lte_config(policy, seed);
    let mut observer = RunDirObserver::new(dir, &lte, cfg.checkpoints)?;
    let log = lte_run(&lte, dataset, &mut observer)?;
    write_metrics_csv(&log.records, &dir.join("metrics.csv"))?;
    write_population(&log.population, &dir.join("final"))?;
    Ok(log)
}

/// Every configured setup and seed under `out`, plus the combined
/// `metrics.csv` and the across-seed `aggregate.csv`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let dataset = Dataset::generate(cfg.dataset_manifest())?;
    write_json(&out.join("dataset.json"), dataset.manifest())?;
    let jobs: Vec<(CullingPolicy, u64)> = cfg
        .setups
        .iter()
        .flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let logs = jobs
        .par_iter()
        .map(|&(policy, seed)| {
            let dir = out.join(policy.name()).join(format!("seed_{seed}"));
            run_single(cfg, policy, seed, &dataset, &dir).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{policy} seed {seed}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricsRecord> = logs.into_iter().flat_map(|l| l.records).collect();
    write_metrics_csv(&records, &out.join("metrics.csv"))?;
    write_aggregate_csv(&aggregate(&records), &out.join("aggregate.csv"))?;
    Ok(records)
}
