use std::collections::BTreeSet;

use crate::autodiff::{Tape, Tensor, Var};

/// Hard token sequence of fixed length `L`; everything after the first
/// bound token is the bound token again.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Message {
    tokens: Vec<usize>,
    bound: usize,
}

impl Message {
    /// Normalizes padding: tokens after the first bound token become bound.
    pub fn new(mut tokens: Vec<usize>, bound: usize) -> Self {
        if let Some(p) = tokens.iter().position(|&t| t == bound) {
            tokens[p..].iter_mut().for_each(|t| *t = bound);
        }
        Message { tokens, bound }
    }

    /// Message with the given content, padded with the bound token to `len`.
    pub fn padded(content: &[usize], bound: usize, len: usize) -> Self {
        let mut tokens = content.to_vec();
        tokens.resize(len, bound);
        Message::new(tokens, bound)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    /// Tokens before the first bound token.
    pub fn content(&self) -> &[usize] {
        let end = self
            .tokens
            .iter()
            .position(|&t| t == self.bound)
            .unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }

    /// Distinct non-bound tokens.
    pub fn token_set(&self) -> BTreeSet<usize> {
        self.content().iter().copied().collect()
    }

    /// Concatenated per-position one-hots, `L · (V+1)` long.
    pub fn onehot(&self) -> Vec<f64> {
        let sym = self.bound + 1;
        let mut out = vec![0.0; self.tokens.len() * sym];
        for (i, &t) in self.tokens.iter().enumerate() {
            out[i * sym + t] = 1.0;
        }
        out
    }
}

/// Batched messages as a receiver consumes them: hard tokens plus one
/// `b × (V+1)` row block per step (soft or hard) on a tape.
#[derive(Clone, Debug)]
pub struct MessageBatch {
    pub tokens: Vec<Message>,
    pub steps: Vec<Var>,
}

impl MessageBatch {
    /// Hard one-hot steps for already decoded messages.
    pub fn from_messages(tape: &mut Tape, messages: Vec<Message>) -> Self {
        let b = messages.len();
        let len = messages.first().map_or(0, |m| m.tokens.len());
        let sym = messages.first().map_or(1, |m| m.bound + 1);
        let steps = (0..len)
            .map(|t| {
                let mut onehot = Tensor::zeros(&[b, sym]);
                for (r, m) in messages.iter().enumerate() {
                    onehot.data_mut()[r * sym + m.tokens[t]] = 1.0;
                }
                tape.constant(onehot)
            })
            .collect();
        MessageBatch {
            tokens: messages,
            steps,
        }
    }

    /// Whether each row still reads at step `t`: the row's content plus its
    /// first bound token.
    pub fn reads_step(&self, t: usize) -> Vec<bool> {
        self.tokens
            .iter()
            .map(|m| m.tokens[..t].iter().all(|&x| x != m.bound))
            .collect()
    }
}
