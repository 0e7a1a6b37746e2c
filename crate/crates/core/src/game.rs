//! The Shapes meaning space, its synthetic featurization, and the
//! referential game round.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agents::{record_batch, Agent, DecodeMode, Message, MessageBatch, Role};
use crate::autodiff::{argmax, AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{child_stream, RandomStream};

pub const NUM_CLASSES: usize = 162;
pub const SYMBOL_DIM: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colour {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Big,
}

const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
const COLOURS: [Colour; 3] = [Colour::Red, Colour::Green, Colour::Blue];
const SIZES: [Size; 2] = [Size::Small, Size::Big];

/// One point of the symbolic space; field order is the enumeration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolicDescription {
    pub shape: Shape,
    pub colour: Colour,
    pub size: Size,
    pub row: u8,
    pub col: u8,
}

impl SymbolicDescription {
    /// Position in [`enumerate_symbols`].
    pub fn class_index(&self) -> usize {
        (((self.shape as usize * 3 + self.colour as usize) * 2 + self.size as usize) * 3
            + self.row as usize)
            * 3
            + self.col as usize
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        if index >= NUM_CLASSES {
            return None;
        }
        Some(SymbolicDescription {
            shape: SHAPES[index / 54],
            colour: COLOURS[index / 18 % 3],
            size: SIZES[index / 9 % 2],
            row: (index / 3 % 3) as u8,
            col: (index % 3) as u8,
        })
    }
}

impl fmt::Display for SymbolicDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}/{:?}/{:?}/{},{}",
            self.shape, self.colour, self.size, self.row, self.col
        )
    }
}

pub fn enumerate_symbols() -> Vec<SymbolicDescription> {
    (0..NUM_CLASSES)
        .map(|i| SymbolicDescription::from_class_index(i).expect("index in range"))
        .collect()
}

/// Concatenated one-hots: shape(3), colour(3), size(2), row(3), col(3).
pub fn onehot_symbol(sym: &SymbolicDescription) -> [f64; SYMBOL_DIM] {
    let mut out = [0.0; SYMBOL_DIM];
    out[sym.shape as usize] = 1.0;
    out[3 + sym.colour as usize] = 1.0;
    out[6 + sym.size as usize] = 1.0;
    out[8 + sym.row as usize] = 1.0;
    out[11 + sym.col as usize] = 1.0;
    out
}

pub fn onehot_message(msg: &Message) -> Vec<f64> {
    msg.onehot()
}

/// Fixed `z × 14` random matrix mapping symbol one-hots to feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection(Tensor);

impl Projection {
    /// Entries i.i.d. standard normal scaled by 1/√14.
    pub fn generate(z: usize, seed: u64) -> Result<Self> {
        if z == 0 {
            return Err(Error::config("z", "must be positive"));
        }
        let mut rng = child_stream(seed, &[0x9e0]);
        let scale = 1.0 / (SYMBOL_DIM as f64).sqrt();
        let data = (0..z * SYMBOL_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Ok(Projection(Tensor::matrix(z, SYMBOL_DIM, data)?))
    }

    pub fn z(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    /// Noise-free features of a symbol.
    pub fn centroid(&self, sym: &SymbolicDescription) -> Vec<f64> {
        let x = onehot_symbol(sym);
        (0..self.z())
            .map(|r| self.0.row(r).iter().zip(&x).map(|(p, v)| p * v).sum())
            .collect()
    }
}

/// `projection · onehot(sym) + sigma · noise`.
pub fn featurize(
    sym: &SymbolicDescription,
    rng: &mut RandomStream,
    projection: &Projection,
    sigma: f64,
) -> Vec<f64> {
    let mut f = projection.centroid(sym);
    if sigma != 0.0 {
        for v in &mut f {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub sym: SymbolicDescription,
    pub features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

/// Everything needed to regenerate a dataset bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub projection_seed: u64,
    pub z: usize,
    pub sigma: f64,
    /// Train, validation, test.
    pub split_sizes: [usize; 3],
    pub instance_seeds: [u64; 3],
}

impl DatasetManifest {
    /// Desk-scale splits 8k/1k/4k with seeds derived from `seed`.
    pub fn desk(seed: u64, z: usize) -> Self {
        Self::from_seed(seed, z, 0.1, [8_000, 1_000, 4_000])
    }

    pub fn from_seed(seed: u64, z: usize, sigma: f64, split_sizes: [usize; 3]) -> Self {
        let d = |label| crate::rng::derive_seed(seed, &[0xda7a, label]);
        DatasetManifest {
            projection_seed: d(0),
            z,
            sigma,
            split_sizes,
            instance_seeds: [d(1), d(2), d(3)],
        }
    }
}

#[derive(Clone, Debug)]
struct SplitData {
    instances: Vec<Instance>,
    distinct_classes: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    manifest: DatasetManifest,
    projection: Projection,
    splits: [SplitData; 3],
}

impl Dataset {
    /// Instances draw a class uniformly, then featurize it with their own
    /// noise, all from the split's seed.
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        if !(manifest.sigma >= 0.0 && manifest.sigma.is_finite()) {
            return Err(Error::config("sigma", "must be finite and non-negative"));
        }
        let projection = Projection::generate(manifest.z, manifest.projection_seed)?;
        let build = |i: usize| {
            let mut rng = child_stream(manifest.instance_seeds[i], &[]);
            let instances: Vec<Instance> = (0..manifest.split_sizes[i])
                .map(|_| {
                    let class = rng.random_range(0..NUM_CLASSES);
                    let sym = SymbolicDescription::from_class_index(class).expect("in range");
                    let features = featurize(&sym, &mut rng, &projection, manifest.sigma);
                    Instance { sym, features }
                })
                .collect();
            let distinct_classes = instances
                .iter()
                .map(|x| x.sym.class_index())
                .collect::<BTreeSet<_>>()
                .len();
            SplitData {
                instances,
                distinct_classes,
            }
        };
        let splits = [build(0), build(1), build(2)];
        Ok(Dataset {
            manifest,
            projection,
            splits,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn z(&self) -> usize {
        self.manifest.z
    }

    pub fn split(&self, split: Split) -> &[Instance] {
        &self.splits[split.index()].instances
    }

    /// The 162 noise-free class centroids in enumeration order.
    pub fn centroids(&self) -> Vec<Instance> {
        enumerate_symbols()
            .into_iter()
            .map(|sym| Instance {
                features: self.projection.centroid(&sym),
                sym,
            })
            .collect()
    }
}

/// One game round as indices into a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Round {
    pub target: usize,
    /// `n + 1` instance indices; `candidates[target_index] == target`.
    pub candidates: Vec<usize>,
    pub target_index: usize,
}

/// Draws a target uniformly and `n` distractors without replacement whose
/// classes differ from the target's and from each other.
pub fn sample_round(
    dataset: &Dataset,
    split: Split,
    n: usize,
    rng: &mut RandomStream,
) -> Result<Round> {
    let data = &dataset.splits[split.index()];
    if n == 0 {
        return Err(Error::config("distractors", "must be at least 1"));
    }
    if data.instances.is_empty() {
        return Err(Error::config("split_sizes", "split is empty"));
    }
    if n + 1 > data.distinct_classes {
        return Err(Error::config(
            "distractors",
            format!(
                "{} candidates need distinct classes but the split has {}",
                n + 1,
                data.distinct_classes
            ),
        ));
    }
    let len = data.instances.len();
    let target = rng.random_range(0..len);
    let mut used = vec![data.instances[target].sym.class_index()];
    let mut distractors = Vec::with_capacity(n);
    while distractors.len() < n {
        let i = rng.random_range(0..len);
        let class = data.instances[i].sym.class_index();
        if !used.contains(&class) {
            used.push(class);
            distractors.push(i);
        }
    }
    let target_index = rng.random_range(0..=n);
    let mut candidates = distractors;
    candidates.insert(target_index, target);
    Ok(Round {
        target,
        candidates,
        target_index,
    })
}

/// A batch of rounds laid out for the agents.
#[derive(Clone, Debug)]
pub struct RoundBatch {
    /// `b × z` target features.
    pub targets: Tensor,
    /// `(b · group) × z` candidate features, grouped per round.
    pub candidates: Tensor,
    pub target_indices: Vec<usize>,
    pub group: usize,
}

impl RoundBatch {
    pub fn from_rounds(instances: &[Instance], rounds: &[Round]) -> Result<Self> {
        let group = rounds
            .first()
            .map(|r| r.candidates.len())
            .ok_or_else(|| Error::Contract("empty round batch".into()))?;
        let z = instances[rounds[0].target].features.len();
        let mut targets = Vec::with_capacity(rounds.len() * z);
        let mut candidates = Vec::with_capacity(rounds.len() * group * z);
        for r in rounds {
            if r.candidates.len() != group {
                return Err(Error::Contract("rounds differ in candidate count".into()));
            }
            targets.extend_from_slice(&instances[r.target].features);
            for &c in &r.candidates {
                candidates.extend_from_slice(&instances[c].features);
            }
        }
        Ok(RoundBatch {
            targets: Tensor::matrix(rounds.len(), z, targets)?,
            candidates: Tensor::matrix(rounds.len() * group, z, candidates)?,
            target_indices: rounds.iter().map(|r| r.target_index).collect(),
            group,
        })
    }

    pub fn len(&self) -> usize {
        self.target_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_indices.is_empty()
    }
}

pub fn sample_batch(
    dataset: &Dataset,
    split: Split,
    n: usize,
    batch: usize,
    rng: &mut RandomStream,
) -> Result<RoundBatch> {
    let rounds = (0..batch)
        .map(|_| sample_round(dataset, split, n, rng))
        .collect::<Result<Vec<_>>>()?;
    RoundBatch::from_rounds(dataset.split(split), &rounds)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub reset_optimizer: bool,
    pub update_sender: bool,
    pub update_receiver: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            adam: AdamConfig::default(),
            reset_optimizer: true,
            update_sender: true,
            update_receiver: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlayMode {
    /// Straight-through messages, backprop and one optimizer step.
    Train(TrainOptions),
    /// Forward only with the given decoding.
    Eval(DecodeMode),
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub loss: f64,
    pub accuracy: f64,
    pub messages: Vec<Message>,
    pub entropy: f64,
}

fn check_pair(sender: &Agent, receiver: &Agent, batch: &RoundBatch) -> Result<()> {
    if sender.role != Role::Sender || receiver.role != Role::Receiver {
        return Err(Error::Contract("play_batch needs a sender and a receiver".into()));
    }
    let (s, r) = (&sender.config, &receiver.config);
    if s.vocab_size != r.vocab_size || s.max_len != r.max_len || s.feature_size != r.feature_size
    {
        return Err(Error::Contract(format!(
            "agents {} and {} have incompatible game configs",
            sender.id(),
            receiver.id()
        )));
    }
    if batch.targets.cols() != s.feature_size {
        return Err(Error::Dimension {
            op: "round features",
            left: vec![s.feature_size],
            right: vec![batch.targets.cols()],
        });
    }
    Ok(())
}

struct Forward {
    tape: Tape,
    loss: crate::autodiff::Var,
    outcome: BatchOutcome,
}

fn forward(
    sender: &Agent,
    receiver: &Agent,
    batch: &RoundBatch,
    tau: f64,
    decode: DecodeMode,
    trainable: (bool, bool),
    rng: &mut RandomStream,
) -> Result<(Forward, crate::agents::AgentVars, crate::agents::AgentVars)> {
    check_pair(sender, receiver, batch)?;
    let mut tape = Tape::new();
    let svars = sender.register(&mut tape, trainable.0);
    let rvars = receiver.register(&mut tape, trainable.1);
    let features = tape.constant(batch.targets.clone());
    let generation = sender.generate(&mut tape, &svars, features, decode, tau, rng)?;
    let messages = if matches!(decode, DecodeMode::Train | DecodeMode::Relaxed) {
        generation.messages
    } else {
        MessageBatch::from_messages(&mut tape, generation.messages.tokens)
    };
    let candidates = tape.constant(batch.candidates.clone());
    let scores = receiver.score(&mut tape, &rvars, &messages, candidates, batch.group)?;
    let loss = tape.cross_entropy(scores, &batch.target_indices)?;
    let correct = tape
        .value(scores)
        .data()
        .chunks(batch.group)
        .zip(&batch.target_indices)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    let outcome = BatchOutcome {
        loss: tape.value(loss).item(),
        accuracy: correct as f64 / batch.len() as f64,
        messages: messages.tokens,
        entropy: generation.entropy,
    };
    Ok((
        Forward {
            tape,
            loss,
            outcome,
        },
        svars,
        rvars,
    ))
}

/// Forward pass without touching either agent.
pub fn evaluate_batch(
    sender: &Agent,
    receiver: &Agent,
    batch: &RoundBatch,
    tau: f64,
    decode: DecodeMode,
    rng: &mut RandomStream,
) -> Result<BatchOutcome> {
    let (fw, _, _) = forward(sender, receiver, batch, tau, decode, (false, false), rng)?;
    Ok(fw.outcome)
}

/// Plays one batch. In train mode the updated agents take one optimizer
/// step and record the batch loss.
pub fn play_batch(
    sender: &mut Agent,
    receiver: &mut Agent,
    batch: &RoundBatch,
    tau: f64,
    mode: PlayMode,
    rng: &mut RandomStream,
) -> Result<BatchOutcome> {
    let opts = match mode {
        PlayMode::Eval(decode) => return evaluate_batch(sender, receiver, batch, tau, decode, rng),
        PlayMode::Train(opts) => opts,
    };
    let (mut fw, svars, rvars) = forward(
        sender,
        receiver,
        batch,
        tau,
        DecodeMode::Train,
        (opts.update_sender, opts.update_receiver),
        rng,
    )?;
    let loss = fw.outcome.loss;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} for sender {} / receiver {}",
            sender.id(),
            receiver.id()
        )));
    }
    fw.tape.backward(fw.loss)?;
    if opts.update_sender {
        sender.apply_gradients(&fw.tape, &svars, opts.adam, opts.reset_optimizer)?;
        record_batch(&mut sender.meta, loss)?;
    }
    if opts.update_receiver {
        receiver.apply_gradients(&fw.tape, &rvars, opts.adam, opts.reset_optimizer)?;
        record_batch(&mut receiver.meta, loss)?;
    }
    Ok(fw.outcome)
}

/// Loss and accuracy over `rounds` freshly sampled rounds, in chunks of
/// `batch`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_rounds(
    sender: &Agent,
    receiver: &Agent,
    dataset: &Dataset,
    split: Split,
    n: usize,
    rounds: usize,
    batch: usize,
    tau: f64,
    decode: DecodeMode,
    rng: &mut RandomStream,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut done) = (0.0, 0.0, 0usize);
    while done < rounds {
        let b = batch.min(rounds - done);
        let rb = sample_batch(dataset, split, n, b, rng)?;
        let out = evaluate_batch(sender, receiver, &rb, tau, decode, rng)?;
        loss += out.loss * b as f64;
        correct += out.accuracy * b as f64;
        done += b;
    }
    Ok((loss / rounds as f64, correct / rounds as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{init_agent, AgentConfig, Arch};
    use crate::rng::stream;

    fn small_config() -> AgentConfig {
        AgentConfig {
            feature_size: 16,
            hidden_size: 16,
            embed_size: 16,
            ..AgentConfig::default()
        }
    }

    fn small_dataset() -> Dataset {
        Dataset::generate(DatasetManifest::from_seed(3, 16, 0.1, [2000, 500, 500])).unwrap()
    }

    #[test]
    fn symbols_enumerate_in_order() {
        let all = enumerate_symbols();
        assert_eq!(all.len(), 162);
        assert_eq!(
            all[0],
            SymbolicDescription {
                shape: Shape::Circle,
                colour: Colour::Red,
                size: Size::Small,
                row: 0,
                col: 0
            }
        );
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, all);
        for (i, s) in all.iter().enumerate() {
            assert_eq!(s.class_index(), i);
        }
    }

    #[test]
    fn symbol_onehots() {
        let first = onehot_symbol(&enumerate_symbols()[0]);
        let ones: Vec<usize> = (0..SYMBOL_DIM).filter(|&i| first[i] == 1.0).collect();
        assert_eq!(ones, vec![0, 3, 6, 8, 11]);
        let mut seen = BTreeSet::new();
        for s in enumerate_symbols() {
            let v = onehot_symbol(&s);
            assert_eq!(v.iter().sum::<f64>(), 5.0);
            assert!(seen.insert(v.map(|x| x as u8)));
        }
    }

    #[test]
    fn message_onehot_layout() {
        let m = Message::padded(&[1, 3], 4, 5);
        let v = onehot_message(&m);
        assert_eq!(v.len(), 25);
        assert_eq!(v.iter().sum::<f64>(), 5.0);
        assert_eq!(v, onehot_message(&m.clone()));
        assert_eq!(v[1], 1.0);
        assert_eq!(v[5 + 3], 1.0);
        assert_eq!(v[10 + 4], 1.0);
        assert_eq!(v[20 + 4], 1.0);
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn featurize_noise_and_determinism() {
        let p = Projection::generate(64, 1).unwrap();
        let syms = enumerate_symbols();
        let mut rng = stream(5);
        assert_eq!(
            featurize(&syms[7], &mut rng, &p, 0.0),
            featurize(&syms[7], &mut rng, &p, 0.0)
        );
        assert_eq!(
            featurize(&syms[7], &mut stream(9), &p, 0.1),
            featurize(&syms[7], &mut stream(9), &p, 0.1)
        );
        // Differing in every attribute: circle/red/small/0,0 vs triangle/blue/big/2,2.
        let (a, b) = (syms[0], syms[161]);
        let (mut same, mut diff) = (0.0, 0.0);
        for _ in 0..1000 {
            let c = syms[rng.random_range(0..NUM_CLASSES)];
            same += cosine(
                &featurize(&c, &mut rng, &p, 0.1),
                &featurize(&c, &mut rng, &p, 0.1),
            );
            diff += cosine(
                &featurize(&a, &mut rng, &p, 0.1),
                &featurize(&b, &mut rng, &p, 0.1),
            );
        }
        assert!(same / 1000.0 > diff / 1000.0, "{same} vs {diff}");
    }

    #[test]
    fn centroids_are_their_own_nearest_neighbours() {
        let p = Projection::generate(64, 2).unwrap();
        let cents: Vec<Vec<f64>> = enumerate_symbols().iter().map(|s| p.centroid(s)).collect();
        for (i, c) in cents.iter().enumerate() {
            let nearest = (0..cents.len())
                .min_by(|&a, &b| {
                    let d = |j: usize| -> f64 {
                        c.iter().zip(&cents[j]).map(|(x, y)| (x - y).powi(2)).sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(nearest, i);
        }
    }

    #[test]
    fn dataset_regenerates_bit_identically() {
        let m = DatasetManifest::from_seed(11, 16, 0.1, [100, 10, 10]);
        let a = Dataset::generate(m.clone()).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let b = Dataset::generate(serde_json::from_str(&json).unwrap()).unwrap();
        for s in Split::ALL {
            assert_eq!(a.split(s), b.split(s));
        }
        assert_eq!(a.split(Split::Train).len(), 100);
        assert_ne!(a.split(Split::Train), a.split(Split::Validation));
    }

    #[test]
    fn rounds_have_distinct_classes() {
        let d = small_dataset();
        let mut rng = stream(4);
        for _ in 0..10_000 {
            let r = sample_round(&d, Split::Train, 3, &mut rng).unwrap();
            assert_eq!(r.candidates.len(), 4);
            assert_eq!(r.candidates[r.target_index], r.target);
            let inst = d.split(Split::Train);
            let classes: BTreeSet<usize> =
                r.candidates.iter().map(|&i| inst[i].sym.class_index()).collect();
            assert_eq!(classes.len(), 4);
            assert_eq!(r.candidates.iter().filter(|&&c| c == r.target).count(), 1);
        }
    }

    #[test]
    fn target_position_is_uniform() {
        let d = small_dataset();
        let mut rng = stream(8);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_round(&d, Split::Validation, 3, &mut rng).unwrap().target_index] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn too_many_distractors_is_a_config_error() {
        let d = Dataset::generate(DatasetManifest::from_seed(1, 8, 0.1, [3, 3, 3])).unwrap();
        let err = sample_round(&d, Split::Train, 3, &mut stream(1)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert!(sample_round(&d, Split::Train, 0, &mut stream(1)).is_err());
    }

    #[test]
    fn untrained_pair_plays_at_chance() {
        let d = small_dataset();
        let cfg = small_config();
        let mut rng = stream(12);
        let s = init_agent(Role::Sender, Arch::Lstm, &cfg, 0, &mut rng).unwrap();
        let r = init_agent(Role::Receiver, Arch::Lstm, &cfg, 1, &mut rng).unwrap();
        let (loss, acc) = evaluate_rounds(
            &s,
            &r,
            &d,
            Split::Validation,
            3,
            10_000,
            500,
            1.2,
            DecodeMode::Sample,
            &mut rng,
        )
        .unwrap();
        assert!((acc - 0.25).abs() < 0.03, "{acc}");
        assert!((loss - 4f64.ln()).abs() < 0.05, "{loss}");
    }

    #[test]
    fn eval_mode_mutates_nothing_and_train_updates_both() {
        let d = small_dataset();
        let cfg = small_config();
        let mut rng = stream(13);
        let mut s = init_agent(Role::Sender, Arch::Lstm, &cfg, 0, &mut rng).unwrap();
        let mut r = init_agent(Role::Receiver, Arch::Lstm, &cfg, 1, &mut rng).unwrap();
        let batch = sample_batch(&d, Split::Train, 3, 32, &mut rng).unwrap();
        let (s0, r0) = (s.clone(), r.clone());
        let out = play_batch(
            &mut s,
            &mut r,
            &batch,
            1.2,
            PlayMode::Eval(DecodeMode::Sample),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.messages.len(), 32);
        assert_eq!((s.params.clone(), s.meta.clone()), (s0.params.clone(), s0.meta.clone()));
        assert_eq!(r.params, r0.params);

        let out = play_batch(
            &mut s,
            &mut r,
            &batch,
            1.2,
            PlayMode::Train(TrainOptions::default()),
            &mut rng,
        )
        .unwrap();
        assert_ne!(s.params, s0.params);
        assert_ne!(r.params, r0.params);
        assert_eq!(s.meta.loss_history, vec![out.loss]);
        assert_eq!(r.meta.loss_history, vec![out.loss]);

        let frozen = s.params.clone();
        let opts = TrainOptions {
            update_sender: false,
            ..TrainOptions::default()
        };
        play_batch(&mut s, &mut r, &batch, 1.2, PlayMode::Train(opts), &mut rng).unwrap();
        assert_eq!(s.params, frozen);
        assert_eq!(s.meta.age, 1);
        assert_eq!(r.meta.age, 2);
    }

    #[test]
    fn mismatched_roles_are_rejected() {
        let d = small_dataset();
        let cfg = small_config();
        let mut rng = stream(14);
        let mut s = init_agent(Role::Sender, Arch::Lstm, &cfg, 0, &mut rng).unwrap();
        let mut s2 = s.clone();
        let batch = sample_batch(&d, Split::Train, 3, 4, &mut rng).unwrap();
        let mode = PlayMode::Train(TrainOptions::default());
        assert!(play_batch(&mut s, &mut s2, &batch, 1.2, mode, &mut rng).is_err());
    }
}
