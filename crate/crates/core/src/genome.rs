//! Recurrent-cell genotypes: a DAG of nodes, each applying an activation to
//! one predecessor. Index 0 is the cell input; node `j` (1-based) may read
//! from any index in `0..j`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

pub use crate::autodiff::Activation;

pub const DEFAULT_NODE_CAP: usize = 8;

/// Returned by [`edit_distance`] when two genotypes are not related by a
/// short edit script.
pub const FAR: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeNode {
    pub activation: Activation,
    pub connection: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub nodes: Vec<GenotypeNode>,
    #[serde(default = "default_cap")]
    pub node_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_NODE_CAP
}

impl Genotype {
    pub fn new(nodes: Vec<GenotypeNode>) -> Self {
        Genotype {
            nodes,
            node_cap: DEFAULT_NODE_CAP,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let violations = validate_genotype(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(violations))
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .nodes
            .iter()
            .map(|n| format!("{}<-{}", n.activation.name(), n.connection))
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Lists every structural violation; empty means valid.
pub fn validate_genotype(g: &Genotype) -> Vec<String> {
    let mut out = Vec::new();
    if g.node_cap == 0 {
        out.push("node_cap must be at least 1".to_string());
    }
    if g.nodes.is_empty() {
        out.push("genotype has no nodes".to_string());
    }
    if g.nodes.len() > g.node_cap {
        out.push(format!(
            "{} nodes exceeds node cap {}",
            g.nodes.len(),
            g.node_cap
        ));
    }
    for (i, node) in g.nodes.iter().enumerate() {
        let j = i + 1;
        if node.connection >= j {
            out.push(format!(
                "node {j} connects to {} which is not a predecessor",
                node.connection
            ));
        }
    }
    out
}

fn random_activation(rng: &mut RandomStream) -> Activation {
    Activation::ALL[rng.random_range(0..Activation::ALL.len())]
}

/// A single node wired to the cell input with a uniform activation.
pub fn initial_genotype(rng: &mut RandomStream) -> Genotype {
    Genotype::new(vec![GenotypeNode {
        activation: random_activation(rng),
        connection: 0,
    }])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    /// Node (1-based) got a new activation.
    Activation { node: usize, activation: Activation },
    /// Node (1-based) got a new predecessor.
    Connection { node: usize, connection: usize },
    /// A node was appended.
    Append { activation: Activation, connection: usize },
}

impl Edit {
    pub fn kind(&self) -> usize {
        match self {
            Edit::Activation { .. } => 1,
            Edit::Connection { .. } => 2,
            Edit::Append { .. } => 3,
        }
    }
}

/// Uniformly wired genotype with `len` nodes and the default cap.
pub fn random_genotype(len: usize, rng: &mut RandomStream) -> Genotype {
    let nodes = (1..=len)
        .map(|j| GenotypeNode {
            activation: random_activation(rng),
            connection: rng.random_range(0..j),
        })
        .collect();
    Genotype::new(nodes)
}

/// Mutates a copy of `g` by exactly one edit.
pub fn mutate_genotype(g: &Genotype, rng: &mut RandomStream) -> Result<Genotype> {
    mutate_genotype_traced(g, rng).map(|(child, _)| child)
}

/// [`mutate_genotype`] that also reports which edit was applied.
///
/// The edit kind is uniform over the kinds that can change `g`: a
/// single-node cell has no alternative connection, and a full cell cannot
/// grow. Resampled values always differ from the current ones.
pub fn mutate_genotype_traced(g: &Genotype, rng: &mut RandomStream) -> Result<(Genotype, Edit)> {
    g.validate()?;
    let mut child = g.clone();
    let n = child.nodes.len();
    let rewirable: Vec<usize> = (2..=n).collect();
    loop {
        let kind = rng.random_range(1..=3);
        match kind {
            1 => {
                let j = rng.random_range(1..=n);
                let current = child.nodes[j - 1].activation;
                let choices: Vec<Activation> =
                    Activation::ALL.into_iter().filter(|&a| a != current).collect();
                let activation = choices[rng.random_range(0..choices.len())];
                child.nodes[j - 1].activation = activation;
                return Ok((child, Edit::Activation { node: j, activation }));
            }
            2 if !rewirable.is_empty() => {
                let j = rewirable[rng.random_range(0..rewirable.len())];
                let current = child.nodes[j - 1].connection;
                // uniform over 0..j excluding the current predecessor
                let mut connection = rng.random_range(0..j - 1);
                if connection >= current {
                    connection += 1;
                }
                child.nodes[j - 1].connection = connection;
                return Ok((child, Edit::Connection { node: j, connection }));
            }
            3 if n < child.node_cap => {
                let activation = random_activation(rng);
                let connection = rng.random_range(0..=n);
                child.nodes.push(GenotypeNode {
                    activation,
                    connection,
                });
                return Ok((
                    child,
                    Edit::Append {
                        activation,
                        connection,
                    },
                ));
            }
            _ => continue,
        }
    }
}

/// Number of single-node edits separating two genotypes, or [`FAR`].
pub fn edit_distance(a: &Genotype, b: &Genotype) -> usize {
    let differing = |x: &[GenotypeNode], y: &[GenotypeNode]| {
        x.iter().zip(y).filter(|(p, q)| p != q).count()
    };
    let (la, lb) = (a.nodes.len(), b.nodes.len());
    if la == lb {
        differing(&a.nodes, &b.nodes)
    } else if la.abs_diff(lb) == 1 {
        1 + differing(&a.nodes, &b.nodes)
    } else {
        FAR
    }
}

pub fn serialize_genotype(g: &Genotype) -> String {
    serde_json::to_string(g).expect("genotype serializes")
}

pub fn parse_genotype(text: &str) -> Result<Genotype> {
    let g: Genotype = serde_json::from_str(text).map_err(|e| Error::Parse {
        position: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    g.validate()?;
    Ok(g)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    start + column.saturating_sub(1)
}
