//! Language and population metrics.
//!
//! Messages for the metrics are decoded greedily, except Jaccard similarity
//! which samples. The pure functions over decoded messages are separate
//! from the ones that drive agents so they can be checked by hand.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentMeta, DecodeMode, Message};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::game::{evaluate_rounds, onehot_symbol, Dataset, Instance, Split};
use crate::rng::{child_stream, RandomStream};

/// One metrics snapshot; also one row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub setup: String,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub avg_entropy: f64,
    pub avg_convergence: f64,
    pub jaccard: f64,
    pub match_rate: f64,
    pub unique_proportion: f64,
    pub unique_messages: f64,
    pub topo_sim: f64,
}

impl MetricsRecord {
    pub const HEADER: [&'static str; 12] = [
        "iteration",
        "setup",
        "seed",
        "accuracy",
        "loss",
        "avg_entropy",
        "avg_convergence",
        "jaccard",
        "match_rate",
        "unique_proportion",
        "unique_messages",
        "topo_sim",
    ];

    /// The nine real-valued columns in header order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.accuracy,
            self.loss,
            self.avg_entropy,
            self.avg_convergence,
            self.jaccard,
            self.match_rate,
            self.unique_proportion,
            self.unique_messages,
            self.topo_sim,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Sample sizes for a snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Messages sampled per input and sender for Jaccard similarity.
    pub jaccard_samples: usize,
    /// Input pairs sampled for topographic similarity.
    pub topo_pairs: usize,
    /// Validation rounds per sender/receiver pair for accuracy and loss.
    pub eval_rounds: usize,
    /// Rows per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            jaccard_samples: 200,
            topo_pairs: 5000,
            eval_rounds: 1024,
            eval_batch: 1024,
        }
    }
}

/// Sample Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!(
            "pearson needs two equal-length samples of size >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Jaccard index of two token sets; two empty sets count as identical.
pub fn jaccard_index(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Mean Jaccard index over sender pairs, inputs and samples.
///
/// `messages[s][i][k]` is sender `s`'s `k`-th sample for input `i`; the
/// `k`-th samples of two senders are compared with each other.
pub fn jaccard_from_messages(messages: &[Vec<Vec<Message>>]) -> Result<f64> {
    if messages.len() < 2 {
        return Err(Error::Contract("jaccard similarity needs >= 2 senders".into()));
    }
    let sets: Vec<Vec<Vec<BTreeSet<usize>>>> = messages
        .iter()
        .map(|s| {
            s.iter()
                .map(|i| i.iter().map(Message::token_set).collect())
                .collect()
        })
        .collect();
    let (mut total, mut count) = (0.0, 0usize);
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            for (ia, ib) in sets[a].iter().zip(&sets[b]) {
                for (sa, sb) in ia.iter().zip(ib) {
                    total += jaccard_index(sa, sb);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Contract("jaccard similarity over no samples".into()));
    }
    Ok(total / count as f64)
}

/// `(match_rate, unique_proportion)` for one input's messages, one per
/// sender.
pub fn match_stats(messages: &[Message]) -> Result<(f64, f64)> {
    let n = messages.len();
    if n < 2 {
        return Err(Error::Contract("match statistics need >= 2 senders".into()));
    }
    let mut matches = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            if messages[a] == messages[b] {
                matches += 1;
            }
        }
    }
    let distinct = messages.iter().collect::<HashSet<_>>().len();
    Ok((
        matches as f64 / (n * (n - 1) / 2) as f64,
        distinct as f64 / n as f64,
    ))
}

/// Match statistics averaged over inputs; `messages[s][i]` is sender `s`'s
/// message for input `i`.
pub fn match_stats_from_messages(messages: &[Vec<Message>]) -> Result<(f64, f64)> {
    let inputs = messages.first().map_or(0, Vec::len);
    if inputs == 0 {
        return Err(Error::Contract("match statistics over no inputs".into()));
    }
    let (mut rate, mut unique) = (0.0, 0.0);
    for i in 0..inputs {
        let column: Vec<Message> = messages.iter().map(|s| s[i].clone()).collect();
        let (r, u) = match_stats(&column)?;
        rate += r;
        unique += u;
    }
    Ok((rate / inputs as f64, unique / inputs as f64))
}

/// Distinct messages in one sender's output.
pub fn unique_message_count(messages: &[Message]) -> usize {
    messages.iter().collect::<HashSet<_>>().len()
}

/// Topographic similarity with its degeneracy flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Topographic {
    pub rho: f64,
    pub degenerate: bool,
}

/// Pearson correlation between pairwise cosine similarities in meaning
/// space and message space over `pairs` sampled pairs of distinct inputs.
pub fn topographic_similarity_from_encodings(
    meanings: &[Vec<f64>],
    messages: &[Vec<f64>],
    pairs: usize,
    rng: &mut RandomStream,
) -> Result<Topographic> {
    let n = meanings.len();
    if n < 2 || messages.len() != n {
        return Err(Error::Contract(
            "topographic similarity needs >= 2 inputs with one message each".into(),
        ));
    }
    let mut xs = Vec::with_capacity(pairs);
    let mut ys = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        xs.push(cosine(&meanings[a], &meanings[b]));
        ys.push(cosine(&messages[a], &messages[b]));
    }
    Ok(match pearson(&xs, &ys)? {
        Some(rho) => Topographic {
            rho,
            degenerate: false,
        },
        None => Topographic {
            rho: 0.0,
            degenerate: true,
        },
    })
}

/// Topographic similarity of one sender's language over `inputs`.
pub fn topographic_similarity(
    inputs: &[Instance],
    messages: &[Message],
    pairs: usize,
    rng: &mut RandomStream,
) -> Result<Topographic> {
    let meanings: Vec<Vec<f64>> = inputs.iter().map(|x| onehot_symbol(&x.sym).to_vec()).collect();
    let encoded: Vec<Vec<f64>> = messages.iter().map(Message::onehot).collect();
    topographic_similarity_from_encodings(&meanings, &encoded, pairs, rng)
}

/// Mean of the first `youngest_age` losses; lower means a faster learner.
pub fn fitness(meta: &AgentMeta, youngest_age: usize) -> Result<f64> {
    if youngest_age == 0 {
        return Err(Error::Contract(
            "fitness needs a youngest age of at least one batch".into(),
        ));
    }
    if meta.loss_history.len() < youngest_age {
        return Err(Error::Contract(format!(
            "agent {} has {} losses, fewer than the youngest age {youngest_age}",
            meta.id,
            meta.loss_history.len()
        )));
    }
    Ok(meta.loss_history[..youngest_age].iter().sum::<f64>() / youngest_age as f64)
}

/// Youngest age among agents that have trained at least once.
pub fn youngest_trained_age<'a>(metas: impl IntoIterator<Item = &'a AgentMeta>) -> Option<usize> {
    metas.into_iter().map(|m| m.age).filter(|&a| a > 0).min()
}

/// Mean fitness over every trained agent, with `T_A` taken over the same
/// agents.
pub fn avg_population_convergence(metas: &[&AgentMeta]) -> Result<f64> {
    let youngest = youngest_trained_age(metas.iter().copied())
        .ok_or_else(|| Error::Contract("no agent has trained yet".into()))?;
    let trained: Vec<_> = metas.iter().filter(|m| m.age > 0).collect();
    let mut total = 0.0;
    for m in &trained {
        total += fitness(m, youngest)?;
    }
    Ok(total / trained.len() as f64)
}

/// Decoded messages plus the generation entropy for one sender over a
/// fixed input matrix.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub messages: Vec<Message>,
    pub entropy: f64,
}

/// Runs `sender` over every row of `inputs`.
pub fn decode(
    sender: &Agent,
    inputs: &Tensor,
    mode: DecodeMode,
    tau: f64,
    rng: &mut RandomStream,
) -> Result<Decoded> {
    let mut tape = Tape::new();
    let vars = sender.register(&mut tape, false);
    let x = tape.constant(inputs.clone());
    let g = sender.generate(&mut tape, &vars, x, mode, tau, rng)?;
    Ok(Decoded {
        messages: g.messages.tokens,
        entropy: g.entropy,
    })
}

/// Features of `inputs` stacked into a matrix.
pub fn input_matrix(inputs: &[Instance]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = inputs.iter().map(|x| x.features.clone()).collect();
    Tensor::from_rows(&rows)
}

/// `samples` sampled messages per input, `out[i][k]`.
pub fn sample_messages(
    sender: &Agent,
    inputs: &Tensor,
    samples: usize,
    chunk_rows: usize,
    rng: &mut RandomStream,
) -> Result<Vec<Vec<Message>>> {
    let n = inputs.rows();
    let per_chunk = (chunk_rows / n).max(1);
    let mut out = vec![Vec::with_capacity(samples); n];
    let mut done = 0;
    while done < samples {
        let k = per_chunk.min(samples - done);
        let mut data = Vec::with_capacity(k * inputs.len());
        for _ in 0..k {
            data.extend_from_slice(inputs.data());
        }
        let stacked = Tensor::matrix(k * n, inputs.cols(), data)?;
        let d = decode(sender, &stacked, DecodeMode::Sample, 1.0, rng)?;
        for (r, m) in d.messages.into_iter().enumerate() {
            out[r % n].push(m);
        }
        done += k;
    }
    Ok(out)
}

/// Mean Jaccard similarity of sampled token sets over sender pairs.
pub fn jaccard_similarity(
    senders: &[&Agent],
    inputs: &Tensor,
    samples_per_input: usize,
    chunk_rows: usize,
    seed: u64,
) -> Result<f64> {
    let sampled = senders
        .par_iter()
        .enumerate()
        .map(|(s, a)| {
            let mut rng = child_stream(seed, &[s as u64]);
            sample_messages(a, inputs, samples_per_input, chunk_rows, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    jaccard_from_messages(&sampled)
}

/// Mean per-step generation entropy over senders (greedy decoding).
pub fn avg_agent_entropy(decoded: &[Decoded]) -> Result<f64> {
    if decoded.is_empty() {
        return Err(Error::Contract("entropy needs at least one sender".into()));
    }
    Ok(decoded.iter().map(|d| d.entropy).sum::<f64>() / decoded.len() as f64)
}

/// What a population snapshot needs besides the agents.
pub struct SnapshotInputs<'a> {
    pub dataset: &'a Dataset,
    pub distractors: usize,
    pub tau: f64,
    pub config: &'a MetricsConfig,
}

/// Full metrics battery over the current population. Everything random is
/// drawn from streams derived from `metrics_seed`, so the result depends
/// only on the agents and the seed.
pub fn snapshot(
    senders: &[&Agent],
    receivers: &[&Agent],
    inputs: &SnapshotInputs<'_>,
    iteration: usize,
    setup: &str,
    seed: u64,
    metrics_seed: u64,
) -> Result<MetricsRecord> {
    let cfg = inputs.config;
    let centroids = inputs.dataset.centroids();
    let x = input_matrix(&centroids)?;

    let pairs: Vec<(usize, usize)> = (0..senders.len())
        .flat_map(|s| (0..receivers.len()).map(move |r| (s, r)))
        .collect();
    let played = pairs
        .par_iter()
        .map(|&(s, r)| {
            let mut rng = child_stream(metrics_seed, &[1, s as u64, r as u64]);
            evaluate_rounds(
                senders[s],
                receivers[r],
                inputs.dataset,
                Split::Validation,
                inputs.distractors,
                cfg.eval_rounds,
                cfg.eval_batch,
                inputs.tau,
                DecodeMode::Greedy,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = played.iter().map(|p| p.0).sum::<f64>() / played.len() as f64;
    let accuracy = played.iter().map(|p| p.1).sum::<f64>() / played.len() as f64;

    let decoded = senders
        .par_iter()
        .enumerate()
        .map(|(s, a)| {
            let mut rng = child_stream(metrics_seed, &[2, s as u64]);
            decode(a, &x, DecodeMode::Greedy, inputs.tau, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let greedy: Vec<Vec<Message>> = decoded.iter().map(|d| d.messages.clone()).collect();

    let (match_rate, unique_proportion) = if senders.len() >= 2 {
        match_stats_from_messages(&greedy)?
    } else {
        (1.0, 1.0)
    };
    let jaccard = if senders.len() >= 2 {
        jaccard_similarity(
            senders,
            &x,
            cfg.jaccard_samples,
            cfg.eval_batch,
            crate::rng::derive_seed(metrics_seed, &[3]),
        )?
    } else {
        1.0
    };
    let unique_messages = greedy
        .iter()
        .map(|m| unique_message_count(m) as f64)
        .sum::<f64>()
        / greedy.len() as f64;
    let mut topo = 0.0;
    for (s, m) in greedy.iter().enumerate() {
        let mut rng = child_stream(metrics_seed, &[4, s as u64]);
        topo += topographic_similarity(&centroids, m, cfg.topo_pairs, &mut rng)?.rho;
    }
    let metas: Vec<&AgentMeta> = senders
        .iter()
        .chain(receivers)
        .map(|a| &a.meta)
        .collect();

    Ok(MetricsRecord {
        iteration,
        setup: setup.to_string(),
        seed,
        accuracy,
        loss,
        avg_entropy: avg_agent_entropy(&decoded)?,
        avg_convergence: avg_population_convergence(&metas)?,
        jaccard,
        match_rate,
        unique_proportion,
        unique_messages,
        topo_sim: topo / greedy.len() as f64,
    })
}
