//! Recurrent cells: an LSTM baseline and cells compiled from a [`Genotype`].
//!
//! A genotype cell with `N` nodes computes, for row-vector inputs,
//!
//! ```text
//! s0 = tanh(x·Wx + h_prev·Wh)
//! c_j = sigmoid(s_i·Wc_j)                  (i = predecessor of node j)
//! s_j = s_i + c_j ⊙ (act_j(s_i·Wh_j) − s_i)
//! h   = mean(s_1 .. s_N)
//! ```
//!
//! so every node is a highway-gated interpolation between its predecessor
//! and the activated transform.

use serde::{Deserialize, Serialize};

use crate::autodiff::{init_uniform, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::genome::Genotype;
use crate::rng::RandomStream;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Genotype { genotype: Genotype },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    #[serde(flatten)]
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl CellSpec {
    pub fn lstm(input_size: usize, hidden_size: usize) -> Self {
        CellSpec {
            kind: CellKind::Lstm,
            input_size,
            hidden_size,
        }
    }

    pub fn genotype(genotype: Genotype, input_size: usize, hidden_size: usize) -> Self {
        CellSpec {
            kind: CellKind::Genotype { genotype },
            input_size,
            hidden_size,
        }
    }

    pub fn genotype_ref(&self) -> Option<&Genotype> {
        match &self.kind {
            CellKind::Lstm => None,
            CellKind::Genotype { genotype } => Some(genotype),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_size == 0 {
            return Err(Error::Contract(format!(
                "cell sizes must be positive (input {}, hidden {})",
                self.input_size, self.hidden_size
            )));
        }
        if let Some(g) = self.genotype_ref() {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamShape {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamShape {
            name: name.into(),
            shape,
            fan_in,
        }
    }
}

/// Ordered parameter shapes for a cell.
///
/// Genotype cells have `2 + 2N` matrices; the LSTM has fused input and
/// recurrent weights for the four gates `[i, f, g, o]` and one bias row.
pub fn compile_cell(spec: &CellSpec) -> Result<Vec<ParamShape>> {
    spec.validate()?;
    let (inp, hid) = (spec.input_size, spec.hidden_size);
    Ok(match &spec.kind {
        CellKind::Lstm => vec![
            ParamShape::new("w_ih", vec![inp, 4 * hid], inp),
            ParamShape::new("w_hh", vec![hid, 4 * hid], hid),
            ParamShape::new("b", vec![1, 4 * hid], hid),
        ],
        CellKind::Genotype { genotype } => {
            let mut shapes = vec![
                ParamShape::new("w_x", vec![inp, hid], inp),
                ParamShape::new("w_h", vec![hid, hid], hid),
            ];
            for j in 1..=genotype.len() {
                shapes.push(ParamShape::new(format!("node{j}_w_h"), vec![hid, hid], hid));
                shapes.push(ParamShape::new(format!("node{j}_w_c"), vec![hid, hid], hid));
            }
            shapes
        }
    })
}

/// Appends freshly initialized parameters for `shapes` to `params`, each
/// name prefixed by `prefix`.
pub fn init_params_into(
    params: &mut ParamSet,
    prefix: &str,
    shapes: &[ParamShape],
    rng: &mut RandomStream,
) {
    for s in shapes {
        params.push(format!("{prefix}{}", s.name), init_uniform(&s.shape, s.fan_in, rng));
    }
}

pub fn init_cell_params(spec: &CellSpec, rng: &mut RandomStream) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    init_params_into(&mut params, "", &compile_cell(spec)?, rng);
    Ok(params)
}

/// Recurrent state on a tape: hidden rows and, for the LSTM, cell rows.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    /// Zero state for `batch` rows (the LSTM cell memory included).
    pub fn zeros(tape: &mut Tape, spec: &CellSpec, batch: usize) -> Self {
        let h = tape.constant(Tensor::zeros(&[batch, spec.hidden_size]));
        Self::from_hidden(tape, spec, h)
    }

    /// State whose hidden rows are `h`; LSTM memory starts at zero.
    pub fn from_hidden(tape: &mut Tape, spec: &CellSpec, h: Var) -> Self {
        let c = match spec.kind {
            CellKind::Lstm => {
                let rows = tape.value(h).rows();
                Some(tape.constant(Tensor::zeros(&[rows, spec.hidden_size])))
            }
            CellKind::Genotype { .. } => None,
        };
        CellState { h, c }
    }

    /// Row-wise choice between advancing to `next` or keeping `self`.
    pub fn select(self, tape: &mut Tape, mask: &[bool], next: CellState) -> Result<CellState> {
        let h = tape.select_rows(mask, next.h, self.h)?;
        let c = match (next.c, self.c) {
            (Some(a), Some(b)) => Some(tape.select_rows(mask, a, b)?),
            _ => None,
        };
        Ok(CellState { h, c })
    }
}

/// One recurrent step. `weights` are the cell's parameters on the tape, in
/// [`compile_cell`] order.
pub fn cell_step(
    tape: &mut Tape,
    spec: &CellSpec,
    weights: &[Var],
    x: Var,
    state: CellState,
) -> Result<CellState> {
    let expected = match &spec.kind {
        CellKind::Lstm => 3,
        CellKind::Genotype { genotype } => 2 + 2 * genotype.len(),
    };
    if weights.len() != expected {
        return Err(Error::Dimension {
            op: "cell_step weights",
            left: vec![expected],
            right: vec![weights.len()],
        });
    }
    let xt = tape.value(x);
    if xt.cols() != spec.input_size || tape.value(state.h).cols() != spec.hidden_size {
        return Err(Error::Dimension {
            op: "cell_step",
            left: vec![spec.input_size, spec.hidden_size],
            right: vec![xt.cols(), tape.value(state.h).cols()],
        });
    }
    match &spec.kind {
        CellKind::Lstm => lstm_step(tape, spec.hidden_size, weights, x, state),
        CellKind::Genotype { genotype } => {
            let h = genotype_step(tape, genotype, weights, x, state.h)?;
            Ok(CellState { h, c: None })
        }
    }
}

fn lstm_step(tape: &mut Tape, hid: usize, w: &[Var], x: Var, state: CellState) -> Result<CellState> {
    let c_prev = state
        .c
        .ok_or_else(|| Error::Contract("LSTM step without cell memory".into()))?;
    let xi = tape.matmul(x, w[0])?;
    let hh = tape.matmul(state.h, w[1])?;
    let pre = tape.add(xi, hh)?;
    let gates = tape.add_bias(pre, w[2])?;
    let i = tape.narrow_cols(gates, 0, hid)?;
    let f = tape.narrow_cols(gates, hid, hid)?;
    let g = tape.narrow_cols(gates, 2 * hid, hid)?;
    let o = tape.narrow_cols(gates, 3 * hid, hid)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(CellState { h, c: Some(c) })
}

fn genotype_step(tape: &mut Tape, g: &Genotype, w: &[Var], x: Var, h_prev: Var) -> Result<Var> {
    let xa = tape.matmul(x, w[0])?;
    let ha = tape.matmul(h_prev, w[1])?;
    let mix = tape.add(xa, ha)?;
    let mut states = vec![tape.tanh(mix)];
    for (idx, node) in g.nodes.iter().enumerate() {
        let pred = states[node.connection];
        let w_h = w[2 + 2 * idx];
        let w_c = w[3 + 2 * idx];
        let gate_pre = tape.matmul(pred, w_c)?;
        let gate = tape.sigmoid(gate_pre);
        let transform_pre = tape.matmul(pred, w_h)?;
        let transform = tape.elementwise(node.activation, transform_pre);
        let delta = tape.sub(transform, pred)?;
        let gated = tape.mul(gate, delta)?;
        states.push(tape.add(pred, gated)?);
    }
    tape.average(&states[1..])
}

/// Values-only convenience wrapper around [`cell_step`].
pub fn cell_step_values(
    spec: &CellSpec,
    params: &ParamSet,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: Option<&Tensor>,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let weights: Vec<Var> = params.values().iter().map(|p| tape.constant(p.clone())).collect();
    let xv = tape.constant(x.clone());
    let h = tape.constant(h_prev.clone());
    let state = match (&spec.kind, c_prev) {
        (CellKind::Lstm, Some(c)) => CellState {
            h,
            c: Some(tape.constant(c.clone())),
        },
        _ => CellState::from_hidden(&mut tape, spec, h),
    };
    let next = cell_step(&mut tape, spec, &weights, xv, state)?;
    Ok((
        tape.value(next.h).clone(),
        next.c.map(|c| tape.value(c).clone()),
    ))
}
