//! Receivers trained against converged, weight-frozen senders, compared
//! with jointly trained baselines.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::run::write_json;
use super::ExperimentConfig;
use crate::agents::{init_agent, read_checkpoint, write_checkpoint, Agent, Arch, DecodeMode, Role};
use crate::error::{Error, Result};
use crate::game::{evaluate_rounds, play_batch, sample_batch, Dataset, PlayMode, Split, TrainOptions};
use crate::population::LteConfig;
use crate::rng::{child_stream, RandomStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArmKind {
    /// The given sender, frozen, with a fresh receiver.
    Frozen,
    /// Fresh sender and receiver trained jointly.
    Baseline,
    /// A sender pretrained with a single receiver, then frozen, with a
    /// fresh receiver.
    BaselinePretrained,
}

impl ArmKind {
    pub const ALL: [ArmKind; 3] = [ArmKind::Frozen, ArmKind::Baseline, ArmKind::BaselinePretrained];

    fn label(self) -> &'static str {
        match self {
            ArmKind::Frozen => "frozen",
            ArmKind::Baseline => "baseline",
            ArmKind::BaselinePretrained => "baseline-pretrained",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenSpec {
    pub repetitions: usize,
    /// Training batches per repetition.
    pub batches: usize,
    /// Joint training batches for the pretrained baseline's sender.
    pub pretrain_batches: usize,
    /// Trailing window of training batches over which accuracy is averaged
    /// before comparing with `target`.
    pub window: usize,
    pub target: f64,
    pub arms: Vec<ArmKind>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub batch: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    /// `cu-frozen`, `co-baseline`, ...
    pub name: String,
    pub kind: ArmKind,
    pub curves: Vec<Vec<CurvePoint>>,
    pub batches_to_target: Vec<Option<usize>>,
}

impl ArmResult {
    /// Median over repetitions; runs that never reach the target count as
    /// one batch past the end.
    pub fn median_batches(&self, batches: usize) -> f64 {
        median_batches(&self.batches_to_target, batches + 1)
    }
}

#[derive(Clone, Debug)]
pub struct FrozenOutcome {
    pub arms: Vec<ArmResult>,
    pub sender_digest_before: String,
    pub sender_digest_after: String,
}

/// First batch (1-based) at which the mean accuracy of the trailing
/// `window` batches reaches `target`.
pub fn batches_to_target(curve: &[CurvePoint], window: usize, target: f64) -> Option<usize> {
    if window == 0 || curve.len() < window {
        return None;
    }
    let mut sum: f64 = curve[..window].iter().map(|p| p.accuracy).sum();
    if sum / window as f64 >= target {
        return Some(curve[window - 1].batch);
    }
    for i in window..curve.len() {
        sum += curve[i].accuracy - curve[i - window].accuracy;
        if sum / window as f64 >= target {
            return Some(curve[i].batch);
        }
    }
    None
}

pub fn median_batches(values: &[Option<usize>], censored: usize) -> f64 {
    let mut v: Vec<usize> = values.iter().map(|x| x.unwrap_or(censored)).collect();
    v.sort_unstable();
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2] as f64,
        n => (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0,
    }
}

fn params_digest(agent: &Agent) -> String {
    let mut h = Sha256::new();
    for t in agent.params.values() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The sender with the highest mean greedy validation accuracy against
/// all `receivers`; ties go to the lower id.
pub fn select_frozen_sender(
    senders: &[Agent],
    receivers: &[Agent],
    dataset: &Dataset,
    lte: &LteConfig,
    seed: u64,
) -> Result<usize> {
    let scores = senders
        .par_iter()
        .enumerate()
        .map(|(s, sender)| {
            let mut total = 0.0;
            for (r, receiver) in receivers.iter().enumerate() {
                let mut rng = child_stream(seed, &[0x5e1, s as u64, r as u64]);
                total += evaluate_rounds(
                    sender,
                    receiver,
                    dataset,
                    Split::Validation,
                    lte.distractors,
                    lte.metrics.eval_rounds,
                    lte.metrics.eval_batch,
                    lte.tau,
                    DecodeMode::Greedy,
                    &mut rng,
                )?
                .1;
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    (0..senders.len())
        .max_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(senders[b].id().cmp(&senders[a].id()))
        })
        .ok_or_else(|| Error::Contract("no sender to choose from".into()))
}

fn train_curve(
    sender: &mut Agent,
    receiver: &mut Agent,
    lte: &LteConfig,
    opts: TrainOptions,
    batches: usize,
    dataset: &Dataset,
    rng: &mut RandomStream,
) -> Result<Vec<CurvePoint>> {
    (1..=batches)
        .map(|batch| {
            let b = sample_batch(dataset, Split::Train, lte.distractors, lte.batch_size, rng)?;
            let out = play_batch(sender, receiver, &b, lte.tau, PlayMode::Train(opts), rng)?;
            Ok(CurvePoint {
                batch,
                accuracy: out.accuracy,
                loss: out.loss,
            })
        })
        .collect()
}

fn fresh(role: Role, arch: &Arch, lte: &LteConfig, id: u64, rng_seed: u64, labels: &[u64]) -> Result<Agent> {
    init_agent(role, arch.clone(), &lte.agent, id, &mut child_stream(rng_seed, labels))
}

/// Runs every arm of `spec` for one sender and one receiver architecture.
/// Arm names are prefixed `cu` for LSTM receivers and `co` for genotype
/// receivers.
pub fn run_frozen(
    sender: &Agent,
    receiver_arch: &Arch,
    lte: &LteConfig,
    spec: &FrozenSpec,
    dataset: &Dataset,
    seed: u64,
) -> Result<(FrozenOutcome, Option<Agent>)> {
    if sender.role != Role::Sender {
        return Err(Error::Contract(format!("agent {} is not a sender", sender.id())));
    }
    if sender.config != lte.agent {
        return Err(Error::config("sender", "checkpoint sizes differ from the configured game"));
    }
    let prefix = match receiver_arch {
        Arch::Lstm => "cu",
        Arch::Genotype(_) => "co",
    };
    let frozen_opts = TrainOptions {
        update_sender: false,
        ..lte.train_options()
    };
    let joint_opts = lte.train_options();
    let digest_before = params_digest(sender);

    let pretrained = if spec.arms.contains(&ArmKind::BaselinePretrained) {
        let mut s = fresh(Role::Sender, &sender.arch, lte, 0, seed, &[0x9e, 0])?;
        let mut r = fresh(Role::Receiver, receiver_arch, lte, 1, seed, &[0x9e, 1])?;
        let mut rng = child_stream(seed, &[0x9e, 2]);
        train_curve(&mut s, &mut r, lte, joint_opts, spec.pretrain_batches, dataset, &mut rng)?;
        Some(s)
    } else {
        None
    };

    let mut arms = Vec::new();
    for (arm_index, &kind) in spec.arms.iter().enumerate() {
        let label = arm_index as u64;
        let curves = (0..spec.repetitions)
            .into_par_iter()
            .map(|rep| {
                let rep = rep as u64;
                let mut rng = child_stream(seed, &[0xa4, label, rep]);
                let mut receiver = fresh(Role::Receiver, receiver_arch, lte, 1, seed, &[0xa5, label, rep])?;
                let (mut s, opts) = match kind {
                    ArmKind::Frozen => (sender.clone(), frozen_opts),
                    ArmKind::Baseline => (
                        fresh(Role::Sender, &sender.arch, lte, 0, seed, &[0xa6, label, rep])?,
                        joint_opts,
                    ),
                    ArmKind::BaselinePretrained => (
                        pretrained.clone().expect("pretrained sender exists"),
                        frozen_opts,
                    ),
                };
                train_curve(&mut s, &mut receiver, lte, opts, spec.batches, dataset, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let batches_to_target = curves
            .iter()
            .map(|c| batches_to_target(c, spec.window, spec.target))
            .collect();
        arms.push(ArmResult {
            name: format!("{prefix}-{}", kind.label()),
            kind,
            curves,
            batches_to_target,
        });
    }
    Ok((
        FrozenOutcome {
            arms,
            sender_digest_after: params_digest(sender),
            sender_digest_before: digest_before,
        },
        pretrained,
    ))
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("batch,accuracy,loss\n");
    for p in curve {
        text.push_str(&format!("{},{:.16e},{:.16e}\n", p.batch, p.accuracy, p.loss));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads the sender checkpoint, runs the configured arms and writes one
/// curve file per arm and repetition plus `summary.csv` and
/// `medians.csv`.
pub fn cmd_frozen(
    cfg: &ExperimentConfig,
    sender_path: &Path,
    receiver_arch: Arch,
    out: &Path,
) -> Result<FrozenOutcome> {
    cfg.validate()?;
    let sender = read_checkpoint(sender_path)?;
    let seed = cfg.seeds[0];
    let lte = cfg.lte_config(cfg.setups[0], seed);
    let spec = cfg.frozen_spec();
    let dataset = Dataset::generate(cfg.dataset_manifest())?;
    let (outcome, pretrained) = run_frozen(&sender, &receiver_arch, &lte, &spec, &dataset, seed)?;

    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    if let Some(p) = &pretrained {
        write_checkpoint(p, &out.join("pretrained_sender.ckpt"))?;
    }
    let mut summary = String::from("arm,repetition,batches_to_target\n");
    let mut medians = String::from("arm,median_batches_to_target,reached\n");
    for arm in &outcome.arms {
        let dir = out.join(&arm.name);
        fs::create_dir_all(&dir)?;
        for (rep, curve) in arm.curves.iter().enumerate() {
            write_curve(&dir.join(format!("rep_{rep:02}.csv")), curve)?;
            let reached = arm.batches_to_target[rep].map_or(String::new(), |b| b.to_string());
            summary.push_str(&format!("{},{rep},{reached}\n", arm.name));
        }
        medians.push_str(&format!(
            "{},{},{}\n",
            arm.name,
            arm.median_batches(spec.batches),
            arm.batches_to_target.iter().filter(|b| b.is_some()).count()
        ));
    }
    fs::write(out.join("summary.csv"), summary)?;
    fs::write(out.join("medians.csv"), medians)?;
    if outcome.sender_digest_before != outcome.sender_digest_after {
        return Err(Error::Contract("frozen sender parameters changed".into()));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(acc: &[f64]) -> Vec<CurvePoint> {
        acc.iter()
            .enumerate()
            .map(|(i, &a)| CurvePoint {
                batch: i + 1,
                accuracy: a,
                loss: 0.0,
            })
            .collect()
    }

    #[test]
    fn trailing_window_threshold() {
        let c = curve(&[0.2, 0.9, 0.5, 0.7, 0.8]);
        assert_eq!(batches_to_target(&c, 1, 0.6), Some(2));
        assert_eq!(batches_to_target(&c, 2, 0.6), Some(3));
        assert_eq!(batches_to_target(&c, 3, 0.6), Some(4));
        assert_eq!(batches_to_target(&c, 5, 0.7), None);
        assert_eq!(batches_to_target(&c, 6, 0.0), None);
    }

    #[test]
    fn medians_with_censoring() {
        assert_eq!(median_batches(&[Some(3), None, Some(1)], 10), 3.0);
        assert_eq!(median_batches(&[Some(3), None], 10), 6.5);
        assert!(median_batches(&[], 10).is_nan());
    }
}
