//! Sender and receiver agents.
//!
//! Both roles share one [`Agent`] type: a named parameter set laid out as
//! input layers, a recurrent cell, and an output projection, plus the
//! age/loss bookkeeping the population uses for fitness.

mod checkpoint;
mod message;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use message::{Message, MessageBatch};

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, init_uniform, softmax_in_place, AdamConfig, AdamState, ParamSet, Tape, Tensor, Var,
};
use crate::cell::{cell_step, compile_cell, CellSpec, CellState, ParamShape};
use crate::error::{Error, Result};
use crate::genome::Genotype;
use crate::rng::RandomStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sender,
    Receiver,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Sender => "sender",
            Role::Receiver => "receiver",
        }
    }
}

/// Architecture of an agent's recurrent core.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lstm,
    Genotype(Genotype),
}

impl Arch {
    pub fn genotype(&self) -> Option<&Genotype> {
        match self {
            Arch::Lstm => None,
            Arch::Genotype(g) => Some(g),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Arch::Lstm => "lstm".to_string(),
            Arch::Genotype(g) => g.to_string(),
        }
    }
}

/// Sizes shared by every agent in a game.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub feature_size: usize,
    pub hidden_size: usize,
    pub embed_size: usize,
    /// Vocabulary size V, not counting the bound token.
    pub vocab_size: usize,
    pub max_len: usize,
    /// Feed the previous token's embedding back into the sender; otherwise
    /// the start embedding is fed at every step.
    pub feed_previous_token: bool,
}

impl AgentConfig {
    pub fn bound_token(&self) -> usize {
        self.vocab_size
    }

    /// V + 1 symbols including the bound token.
    pub fn symbols(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("feature_size", self.feature_size),
            ("hidden_size", self.hidden_size),
            ("embed_size", self.embed_size),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            feature_size: 64,
            hidden_size: 64,
            embed_size: 64,
            vocab_size: 4,
            max_len: 5,
            feed_previous_token: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub id: u64,
    pub age: usize,
    pub loss_history: Vec<f64>,
}

impl AgentMeta {
    pub fn new(id: u64) -> Self {
        AgentMeta {
            id,
            age: 0,
            loss_history: Vec::new(),
        }
    }
}

/// How the sender turns per-step distributions into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Straight-through Gumbel-Softmax one-hots.
    Train,
    /// Soft Gumbel-Softmax samples; used for gradient checking.
    Relaxed,
    /// Sample the categorical distribution.
    Sample,
    /// Argmax of the distribution.
    Greedy,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub role: Role,
    pub arch: Arch,
    pub config: AgentConfig,
    pub meta: AgentMeta,
    pub params: ParamSet,
    /// Persistent optimizer state, used only when optimizers are not reset
    /// every batch.
    pub optimizer: Option<AdamState>,
}

/// An agent's parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct AgentVars {
    pub vars: Vec<Var>,
    pub trainable: bool,
}

impl AgentVars {
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Output of one batched generation pass.
#[derive(Clone, Debug)]
pub struct Generation {
    pub messages: MessageBatch,
    /// Per step, the `b × (V+1)` token distributions.
    pub distributions: Vec<Tensor>,
    /// Mean entropy (nats) over rows and non-padded steps.
    pub entropy: f64,
}

pub fn cell_spec(config: &AgentConfig, arch: &Arch) -> CellSpec {
    match arch {
        Arch::Lstm => CellSpec::lstm(config.embed_size, config.hidden_size),
        Arch::Genotype(g) => CellSpec::genotype(g.clone(), config.embed_size, config.hidden_size),
    }
}

/// Full parameter manifest of an agent, in storage order.
pub fn agent_manifest(role: Role, config: &AgentConfig, arch: &Arch) -> Result<Vec<ParamShape>> {
    config.validate()?;
    let (z, hid, emb, sym) = (
        config.feature_size,
        config.hidden_size,
        config.embed_size,
        config.symbols(),
    );
    let mut shapes = Vec::new();
    if role == Role::Sender {
        shapes.push(ParamShape::new("in_w", vec![z, hid], z));
        shapes.push(ParamShape::new("in_b", vec![1, hid], z));
        shapes.push(ParamShape::new("sos", vec![1, emb], sym));
    }
    shapes.push(ParamShape::new("embed", vec![sym, emb], sym));
    for mut s in compile_cell(&cell_spec(config, arch))? {
        s.name = format!("cell.{}", s.name);
        shapes.push(s);
    }
    let out = if role == Role::Sender { sym } else { z };
    shapes.push(ParamShape::new("out_w", vec![hid, out], hid));
    shapes.push(ParamShape::new("out_b", vec![1, out], hid));
    Ok(shapes)
}

/// Fresh agent with weights drawn from `rng`.
pub fn init_agent(
    role: Role,
    arch: Arch,
    config: &AgentConfig,
    id: u64,
    rng: &mut RandomStream,
) -> Result<Agent> {
    let manifest = agent_manifest(role, config, &arch)?;
    let mut params = ParamSet::new();
    for s in &manifest {
        params.push(s.name.clone(), init_uniform(&s.shape, s.fan_in, rng));
    }
    Ok(Agent {
        role,
        arch,
        config: config.clone(),
        meta: AgentMeta::new(id),
        params,
        optimizer: None,
    })
}

/// Appends one training-batch loss; rejects non-finite values.
pub fn record_batch(meta: &mut AgentMeta, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} for agent {}",
            meta.id
        )));
    }
    meta.age += 1;
    meta.loss_history.push(loss);
    Ok(())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

impl Agent {
    pub fn id(&self) -> u64 {
        self.meta.id
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.arch.genotype()
    }

    pub fn cell_spec(&self) -> CellSpec {
        cell_spec(&self.config, &self.arch)
    }

    pub fn manifest(&self) -> Result<Vec<ParamShape>> {
        agent_manifest(self.role, &self.config, &self.arch)
    }

    /// Registers parameters on `tape`, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> AgentVars {
        let vars = self
            .params
            .values()
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        AgentVars { vars, trainable }
    }

    fn cell_range(&self) -> std::ops::Range<usize> {
        let start = if self.role == Role::Sender { 4 } else { 1 };
        start..self.params.len() - 2
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Contract(format!(
                "agent {} is a {}, expected a {}",
                self.meta.id,
                self.role.name(),
                role.name()
            )));
        }
        Ok(())
    }

    /// Applies one Adam step from the gradients accumulated on `tape`.
    pub fn apply_gradients(
        &mut self,
        tape: &Tape,
        vars: &AgentVars,
        adam: AdamConfig,
        reset_optimizer: bool,
    ) -> Result<()> {
        let grads = vars.grads(tape);
        let mut fresh;
        let state = if reset_optimizer {
            fresh = AdamState::new(&self.params, adam);
            &mut fresh
        } else {
            self.optimizer
                .get_or_insert_with(|| AdamState::new(&self.params, adam))
        };
        adam_step(&mut self.params, &grads, state)
    }

    /// Generates one message per feature row.
    ///
    /// The initial hidden state is the projected features; each step feeds
    /// the previous token's embedding (a learned start embedding first),
    /// projects the hidden state to V+1 logits and emits a token. Rows stop
    /// after the bound token and are padded with it.
    pub fn generate(
        &self,
        tape: &mut Tape,
        vars: &AgentVars,
        features: Var,
        mode: DecodeMode,
        tau: f64,
        rng: &mut RandomStream,
    ) -> Result<Generation> {
        use rand::distr::{weighted::WeightedIndex, Distribution};

        self.expect_role(Role::Sender)?;
        let cfg = &self.config;
        let b = tape.value(features).rows();
        if tape.value(features).cols() != cfg.feature_size {
            return Err(Error::Dimension {
                op: "sender features",
                left: vec![cfg.feature_size],
                right: tape.value(features).shape().to_vec(),
            });
        }
        let v = &vars.vars;
        let (in_w, in_b, sos, embed) = (v[0], v[1], v[2], v[3]);
        let cell_vars = &v[self.cell_range()];
        let (out_w, out_b) = (v[v.len() - 2], v[v.len() - 1]);
        let spec = self.cell_spec();
        let sym = cfg.symbols();
        let bound = cfg.bound_token();

        let proj = tape.matmul(features, in_w)?;
        let h0 = tape.add_bias(proj, in_b)?;
        let mut state = CellState::from_hidden(tape, &spec, h0);
        let ones = tape.constant(Tensor::filled(&[b, 1], 1.0));
        let start = tape.matmul(ones, sos)?;
        let mut input = start;

        let mut eos_rows = Tensor::zeros(&[b, sym]);
        for r in 0..b {
            eos_rows.data_mut()[r * sym + bound] = 1.0;
        }
        let eos = tape.constant(eos_rows);

        let mut alive = vec![true; b];
        let mut tokens = vec![Vec::with_capacity(cfg.max_len); b];
        let mut steps = Vec::with_capacity(cfg.max_len);
        let mut distributions = Vec::with_capacity(cfg.max_len);
        let (mut ent_sum, mut ent_count) = (0.0, 0usize);

        for _ in 0..cfg.max_len {
            state = cell_step(tape, &spec, cell_vars, input, state)?;
            let lw = tape.matmul(state.h, out_w)?;
            let logits = tape.add_bias(lw, out_b)?;
            let mut probs = tape.value(logits).data().to_vec();
            probs.chunks_mut(sym).for_each(softmax_in_place);

            let (emitted, step_tokens): (Var, Vec<usize>) = match mode {
                DecodeMode::Train | DecodeMode::Relaxed => {
                    let noise = crate::autodiff::gumbel_noise(b * sym, rng);
                    let y = tape.gumbel_softmax_with_noise(
                        logits,
                        &noise,
                        tau,
                        mode == DecodeMode::Train,
                    )?;
                    let toks = tape
                        .value(y)
                        .data()
                        .chunks(sym)
                        .map(crate::autodiff::argmax)
                        .collect();
                    (y, toks)
                }
                DecodeMode::Sample | DecodeMode::Greedy => {
                    let toks: Vec<usize> = probs
                        .chunks(sym)
                        .map(|p| {
                            if mode == DecodeMode::Greedy {
                                crate::autodiff::argmax(p)
                            } else {
                                WeightedIndex::new(p).expect("valid distribution").sample(rng)
                            }
                        })
                        .collect();
                    let mut onehot = Tensor::zeros(&[b, sym]);
                    for (r, &t) in toks.iter().enumerate() {
                        onehot.data_mut()[r * sym + t] = 1.0;
                    }
                    (tape.constant(onehot), toks)
                }
            };

            for (r, p) in probs.chunks(sym).enumerate() {
                if alive[r] {
                    ent_sum += entropy(p);
                    ent_count += 1;
                }
            }
            let step = tape.select_rows(&alive, emitted, eos)?;
            for r in 0..b {
                let t = if alive[r] { step_tokens[r] } else { bound };
                tokens[r].push(t);
                if t == bound {
                    alive[r] = false;
                }
            }
            distributions.push(Tensor::matrix(b, sym, probs)?);
            steps.push(step);
            input = if cfg.feed_previous_token {
                tape.matmul(step, embed)?
            } else {
                start
            };
        }

        Ok(Generation {
            messages: MessageBatch {
                tokens: tokens.into_iter().map(|t| Message::new(t, bound)).collect(),
                steps,
            },
            distributions,
            entropy: if ent_count == 0 {
                0.0
            } else {
                ent_sum / ent_count as f64
            },
        })
    }

    /// Scores `group` candidates per message by dot product with the
    /// receiver's reconstructed feature vector.
    ///
    /// `candidates` holds `b · group` feature rows, grouped per message.
    pub fn score(
        &self,
        tape: &mut Tape,
        vars: &AgentVars,
        messages: &MessageBatch,
        candidates: Var,
        group: usize,
    ) -> Result<Var> {
        self.expect_role(Role::Receiver)?;
        let cfg = &self.config;
        let b = messages.tokens.len();
        if messages.steps.len() != cfg.max_len {
            return Err(Error::Dimension {
                op: "receiver message length",
                left: vec![cfg.max_len],
                right: vec![messages.steps.len()],
            });
        }
        if tape.value(candidates).cols() != cfg.feature_size {
            return Err(Error::Dimension {
                op: "receiver candidates",
                left: vec![cfg.feature_size],
                right: tape.value(candidates).shape().to_vec(),
            });
        }
        let v = &vars.vars;
        let embed = v[0];
        let cell_vars = &v[self.cell_range()];
        let (out_w, out_b) = (v[v.len() - 2], v[v.len() - 1]);
        let spec = self.cell_spec();
        let mut state = CellState::zeros(tape, &spec, b);
        for t in 0..cfg.max_len {
            let reads = messages.reads_step(t);
            let x = tape.matmul(messages.steps[t], embed)?;
            let next = cell_step(tape, &spec, cell_vars, x, state)?;
            state = state.select(tape, &reads, next)?;
        }
        let ow = tape.matmul(state.h, out_w)?;
        let out = tape.add_bias(ow, out_b)?;
        tape.group_dot(out, candidates, group)
    }
}

#[cfg(test)]
mod tests;
