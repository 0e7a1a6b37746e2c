//! Population training loop with periodic culling.
//!
//! Each iteration trains one uniformly sampled sender/receiver pair on one
//! batch. Every `culling_interval` iterations the population is evaluated
//! and then a fraction of each role is replaced.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{init_agent, Agent, AgentConfig, AgentMeta, Arch, Role};
use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::game::{play_batch, sample_batch, Dataset, DatasetManifest, PlayMode, Split, TrainOptions};
use crate::genome::{initial_genotype, mutate_genotype};
use crate::metrics::{fitness, snapshot, youngest_trained_age, MetricsConfig, MetricsRecord, SnapshotInputs};
use crate::rng::{child_stream, derive_seed, RandomStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CullingPolicy {
    #[serde(rename = "cu-random", alias = "cu_random")]
    CuRandom,
    #[serde(rename = "cu-age", alias = "cu_age")]
    CuAge,
    #[serde(rename = "cu-best", alias = "cu_best")]
    CuBest,
    #[serde(rename = "co-evolution", alias = "co_evolution")]
    CoEvolution,
}

impl CullingPolicy {
    pub const ALL: [CullingPolicy; 4] = [
        CullingPolicy::CuRandom,
        CullingPolicy::CuAge,
        CullingPolicy::CuBest,
        CullingPolicy::CoEvolution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CullingPolicy::CuRandom => "cu-random",
            CullingPolicy::CuAge => "cu-age",
            CullingPolicy::CuBest => "cu-best",
            CullingPolicy::CoEvolution => "co-evolution",
        }
    }

    pub fn evolves_architecture(self) -> bool {
        self == CullingPolicy::CoEvolution
    }
}

impl fmt::Display for CullingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CullingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        CullingPolicy::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| {
                Error::config(
                    "setup",
                    format!("unknown setup `{s}` (cu-random, cu-age, cu-best, co-evolution)"),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LteConfig {
    /// Agents per role.
    pub population_size: usize,
    pub culling_rate: f64,
    /// Batches between snapshot/cull steps.
    pub culling_interval: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub distractors: usize,
    pub tau: f64,
    pub agent: AgentConfig,
    pub adam: AdamConfig,
    pub reset_optimizer_per_batch: bool,
    pub policy: CullingPolicy,
    pub seed: u64,
    pub dataset: DatasetManifest,
    pub metrics: MetricsConfig,
}

impl LteConfig {
    /// Number of agents replaced per role at each cull.
    pub fn cull_count(&self) -> usize {
        cull_count(self.culling_rate, self.population_size)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            adam: self.adam,
            reset_optimizer: self.reset_optimizer_per_batch,
            update_sender: true,
            update_receiver: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("population_size", self.population_size),
            ("culling_interval", self.culling_interval),
            ("batch_size", self.batch_size),
            ("distractors", self.distractors),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.culling_rate) {
            return Err(Error::config("alpha", "culling rate must lie in [0, 1)"));
        }
        if self.culling_rate > 0.0 && self.cull_count() == 0 {
            return Err(Error::config(
                "alpha",
                format!(
                    "culling rate {} replaces no agent in a population of {}",
                    self.culling_rate, self.population_size
                ),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.agent.feature_size != self.dataset.z {
            return Err(Error::config("z", "agent feature size differs from dataset z"));
        }
        self.agent.validate()
    }
}

/// `⌊αN⌋`, robust to `α·N` landing just below an integer.
pub fn cull_count(alpha: f64, n: usize) -> usize {
    (alpha * n as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug)]
pub struct Population {
    pub senders: Vec<Agent>,
    pub receivers: Vec<Agent>,
    next_id: u64,
}

impl Population {
    /// `n` agents per role. Co-evolution starts every agent from its own
    /// initial genotype; the other policies use LSTM cells.
    pub fn initialize(cfg: &LteConfig) -> Result<Self> {
        let mut arch_rng = child_stream(cfg.seed, &[0xa7c4]);
        let mut pop = Population {
            senders: Vec::new(),
            receivers: Vec::new(),
            next_id: 0,
        };
        for role in [Role::Sender, Role::Receiver] {
            for _ in 0..cfg.population_size {
                let arch = if cfg.policy.evolves_architecture() {
                    Arch::Genotype(initial_genotype(&mut arch_rng))
                } else {
                    Arch::Lstm
                };
                let agent = pop.new_agent(role, arch, &cfg.agent, cfg.seed)?;
                pop.role_mut(role).push(agent);
            }
        }
        Ok(pop)
    }

    /// Rebuilds a population from existing agents; new ids continue after
    /// the largest one present.
    pub fn from_agents(senders: Vec<Agent>, receivers: Vec<Agent>) -> Self {
        let next_id = senders
            .iter()
            .chain(&receivers)
            .map(|a| a.id() + 1)
            .max()
            .unwrap_or(0);
        Population {
            senders,
            receivers,
            next_id,
        }
    }

    fn new_agent(&mut self, role: Role, arch: Arch, config: &AgentConfig, seed: u64) -> Result<Agent> {
        let id = self.next_id;
        self.next_id += 1;
        init_agent(role, arch, config, id, &mut child_stream(seed, &[0x1417, id]))
    }

    pub fn role(&self, role: Role) -> &[Agent] {
        match role {
            Role::Sender => &self.senders,
            Role::Receiver => &self.receivers,
        }
    }

    fn role_mut(&mut self, role: Role) -> &mut Vec<Agent> {
        match role {
            Role::Sender => &mut self.senders,
            Role::Receiver => &mut self.receivers,
        }
    }

    pub fn agents(&self) -> impl Iterator<Item = &Agent> {
        self.senders.iter().chain(&self.receivers)
    }
}

/// Costs for fitness-based culling: mean of the first `T_A` losses, with
/// `T_A` the youngest trained age in the group. Untrained agents cost
/// infinity.
pub fn fitness_costs(metas: &[&AgentMeta]) -> Result<Vec<f64>> {
    let youngest = youngest_trained_age(metas.iter().copied());
    metas
        .iter()
        .map(|m| match youngest {
            Some(t) if m.age > 0 => fitness(m, t),
            _ => Ok(f64::INFINITY),
        })
        .collect()
}

/// Index of the fittest agent (lowest cost, then lower id).
pub fn best_index(metas: &[&AgentMeta]) -> Result<usize> {
    let costs = fitness_costs(metas)?;
    (0..metas.len())
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(metas[a].id.cmp(&metas[b].id)))
        .ok_or_else(|| Error::Contract("empty population".into()))
}

/// Indices of the agents of one role to replace.
pub fn select_replacement_indices(
    metas: &[&AgentMeta],
    policy: CullingPolicy,
    alpha: f64,
    rng: &mut RandomStream,
) -> Result<Vec<usize>> {
    let n = metas.len();
    let k = cull_count(alpha, n);
    if k == 0 {
        return Ok(Vec::new());
    }
    if k >= n {
        return Err(Error::Contract(format!("cannot cull {k} of {n} agents")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    match policy {
        CullingPolicy::CuRandom => {
            return Ok(rand::seq::index::sample(rng, n, k).into_vec());
        }
        CullingPolicy::CuAge => {
            order.sort_by(|&a, &b| {
                metas[b].age.cmp(&metas[a].age).then(metas[a].id.cmp(&metas[b].id))
            });
        }
        CullingPolicy::CuBest | CullingPolicy::CoEvolution => {
            let costs = fitness_costs(metas)?;
            let best = best_index(metas)?;
            order.retain(|&i| i != best);
            order.sort_by(|&a, &b| {
                costs[b].total_cmp(&costs[a]).then(metas[a].id.cmp(&metas[b].id))
            });
        }
    }
    order.truncate(k);
    Ok(order)
}

/// One replaced agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub role: Role,
    pub index: usize,
    pub replaced_id: u64,
    pub new_id: u64,
    /// `"lstm"` or the new genotype.
    pub arch: Arch,
}

/// Replaces the selected agents of both roles with untrained ones.
pub fn cull(
    pop: &mut Population,
    policy: CullingPolicy,
    cfg: &LteConfig,
    rng: &mut RandomStream,
) -> Result<Vec<Replacement>> {
    let mut report = Vec::new();
    for role in [Role::Sender, Role::Receiver] {
        let (selected, parent) = {
            let metas: Vec<&AgentMeta> = pop.role(role).iter().map(|a| &a.meta).collect();
            let selected = select_replacement_indices(&metas, policy, cfg.culling_rate, rng)?;
            let parent = if policy.evolves_architecture() && !selected.is_empty() {
                let best = &pop.role(role)[best_index(&metas)?];
                Some(best.genotype().cloned().ok_or_else(|| {
                    Error::Contract(format!("best {} {} has no genotype", role.name(), best.id()))
                })?)
            } else {
                None
            };
            (selected, parent)
        };
        for index in selected {
            let arch = match &parent {
                Some(g) => Arch::Genotype(mutate_genotype(g, rng)?),
                None => Arch::Lstm,
            };
            let agent = pop.new_agent(role, arch.clone(), &cfg.agent, cfg.seed)?;
            let replaced_id = pop.role(role)[index].id();
            report.push(Replacement {
                role,
                index,
                replaced_id,
                new_id: agent.id(),
                arch,
            });
            pop.role_mut(role)[index] = agent;
        }
    }
    Ok(report)
}

/// Uniform sender and receiver indices.
pub fn sample_pair(n_senders: usize, n_receivers: usize, rng: &mut RandomStream) -> (usize, usize) {
    (rng.random_range(0..n_senders), rng.random_range(0..n_receivers))
}

/// Hooks into [`lte_run`] for persistence.
pub trait RunObserver {
    fn on_start(&mut self, _pop: &Population) -> Result<()> {
        Ok(())
    }

    /// Called after the snapshot and before the cull of the same iteration.
    fn on_snapshot(
        &mut self,
        _pop: &Population,
        _record: &MetricsRecord,
        _metrics_seed: u64,
    ) -> Result<()> {
        Ok(())
    }

    fn on_cull(&mut self, _iteration: usize, _pop: &Population, _report: &[Replacement]) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub records: Vec<MetricsRecord>,
    pub replacements: Vec<(usize, Replacement)>,
    pub population: Population,
}

/// Seed for the metrics snapshot taken at `iteration`.
pub fn metrics_seed(seed: u64, iteration: usize) -> u64 {
    derive_seed(seed, &[0x3e7, iteration as u64])
}

pub fn lte_run(cfg: &LteConfig, dataset: &Dataset, observer: &mut dyn RunObserver) -> Result<RunLog> {
    cfg.validate()?;
    if dataset.manifest() != &cfg.dataset {
        return Err(Error::Contract("dataset does not match the run config".into()));
    }
    let mut pop = Population::initialize(cfg)?;
    observer.on_start(&pop)?;
    let mut train_rng = child_stream(cfg.seed, &[0x7a1]);
    let mut cull_rng = child_stream(cfg.seed, &[0xc011]);
    let opts = cfg.train_options();
    let setup = cfg.policy.name();
    let mut records = Vec::new();
    let mut replacements = Vec::new();

    for iteration in 1..=cfg.iterations {
        let (s, r) = sample_pair(pop.senders.len(), pop.receivers.len(), &mut train_rng);
        let batch = sample_batch(dataset, Split::Train, cfg.distractors, cfg.batch_size, &mut train_rng)?;
        let sender = &mut pop.senders[s];
        let receiver = &mut pop.receivers[r];
        let (sid, rid) = (sender.id(), receiver.id());
        play_batch(sender, receiver, &batch, cfg.tau, PlayMode::Train(opts), &mut train_rng).map_err(
            |e| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "iteration {iteration}, sender {sid}, receiver {rid}: {m}"
                )),
                other => other,
            },
        )?;

        if iteration % cfg.culling_interval == 0 {
            let seed = metrics_seed(cfg.seed, iteration);
            let senders: Vec<&Agent> = pop.senders.iter().collect();
            let receivers: Vec<&Agent> = pop.receivers.iter().collect();
            let inputs = SnapshotInputs {
                dataset,
                distractors: cfg.distractors,
                tau: cfg.tau,
                config: &cfg.metrics,
            };
            let record = snapshot(&senders, &receivers, &inputs, iteration, setup, cfg.seed, seed)?;
            observer.on_snapshot(&pop, &record, seed)?;
            records.push(record);

            let report = cull(&mut pop, cfg.policy, cfg, &mut cull_rng)?;
            observer.on_cull(iteration, &pop, &report)?;
            replacements.extend(report.into_iter().map(|r| (iteration, r)));
        }
    }
    Ok(RunLog {
        records,
        replacements,
        population: pop,
    })
}
