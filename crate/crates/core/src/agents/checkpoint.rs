//! Per-agent checkpoint files.
//!
//! Layout: one line of JSON header, a `\n`, then every parameter as
//! little-endian `f64` in manifest order. The header carries a SHA-256 of
//! the binary section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Agent, AgentConfig, AgentMeta, Arch, Role};
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::genome::Genotype;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub id: u64,
    pub kind: Role,
    pub arch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genotype: Option<Genotype>,
    pub age: usize,
    pub loss_history: Vec<f64>,
    pub config: AgentConfig,
    pub params: Vec<ParamEntry>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_checkpoint(agent: &Agent, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(agent.params.scalar_count() * 8);
    for t in agent.params.values() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        id: agent.meta.id,
        kind: agent.role,
        arch: match agent.arch {
            Arch::Lstm => "lstm".into(),
            Arch::Genotype(_) => "genotype".into(),
        },
        genotype: agent.arch.genotype().cloned(),
        age: agent.meta.age,
        loss_history: agent.meta.loss_history.clone(),
        config: agent.config.clone(),
        params: agent
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: digest(&payload),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Agent> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "format version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.format_version
            ),
        ));
    }
    let payload = &bytes[split + 1..];
    if digest(payload) != header.payload_sha256 {
        return Err(Error::format(path, "binary section checksum mismatch"));
    }
    let arch = match (header.arch.as_str(), header.genotype) {
        ("lstm", None) => Arch::Lstm,
        ("genotype", Some(g)) => {
            g.validate()?;
            Arch::Genotype(g)
        }
        (other, _) => return Err(Error::format(path, format!("inconsistent arch `{other}`"))),
    };
    let manifest = super::agent_manifest(header.kind, &header.config, &arch)?;
    let declared: Vec<(&str, &[usize])> = header
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.shape.as_slice()))
        .collect();
    let expected: Vec<(&str, &[usize])> = manifest
        .iter()
        .map(|p| (p.name.as_str(), p.shape.as_slice()))
        .collect();
    if declared != expected {
        return Err(Error::format(path, "parameter manifest does not match architecture"));
    }
    let total: usize = manifest.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::format(
            path,
            format!("binary section has {} bytes, expected {}", payload.len(), total * 8),
        ));
    }
    if header.loss_history.len() != header.age {
        return Err(Error::format(path, "loss history length differs from age"));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = ParamSet::new();
    for p in &manifest {
        let n = p.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        params.push(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }
    Ok(Agent {
        role: header.kind,
        arch,
        config: header.config,
        meta: AgentMeta {
            id: header.id,
            age: header.age,
            loss_history: header.loss_history,
        },
        params,
        optimizer: None,
    })
}
