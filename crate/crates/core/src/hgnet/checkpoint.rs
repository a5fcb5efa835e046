//! Checkpoint layout: 8-byte magic, little-endian u64 header length, JSON
//! header (format version, config, group table), then every parameter group
//! and every running-statistics vector as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::HGNetConfig;
use super::model::HGNetParams;
use crate::diffnum::{GroupTag, RunningStats, TensorR};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HGBEAM\0\x01";

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    id: String,
    tag: GroupTag,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: HGNetConfig,
    ap_antennas: usize,
    user_antennas: usize,
    p_max: f64,
    groups: Vec<GroupEntry>,
    /// `(channels, batches)` per layer.
    running: Vec<(usize, u64)>,
}

fn persist<E: std::fmt::Display>(e: E) -> Error {
    Error::Persistence(e.to_string())
}

pub fn to_bytes(params: &HGNetParams) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        ap_antennas: params.ap_antennas,
        user_antennas: params.user_antennas,
        p_max: params.p_max,
        groups: params
            .store
            .groups()
            .iter()
            .map(|g| GroupEntry {
                id: g.id.clone(),
                tag: g.tag,
                shape: g.values.shape().to_vec(),
            })
            .collect(),
        running: params.running.iter().map(|r| (r.mean.len(), r.batches)).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for g in params.store.groups() {
        put(g.values.data());
    }
    for r in &params.running {
        put(&r.mean);
        put(&r.var);
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<HGNetParams> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Persistence("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Persistence("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Persistence(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut params = HGNetParams::new(header.config, header.ap_antennas, header.user_antennas, header.p_max)?;
    let mut cursor = bytes[16 + len..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = cursor.by_ref().take(n).collect();
        if v.len() != n {
            return Err(Error::Persistence("truncated parameter data".into()));
        }
        Ok(v)
    };
    if header.groups.len() != params.store.groups().len() {
        return Err(Error::Persistence(
            "group table does not match the configuration".into(),
        ));
    }
    for (entry, group) in header.groups.iter().zip(params.store.groups_mut()) {
        if entry.id != group.id || entry.shape != group.values.shape() || entry.tag != group.tag {
            return Err(Error::Persistence(format!(
                "group {} does not match the configuration",
                entry.id
            )));
        }
        group.values = TensorR::new(entry.shape.clone(), take(group.values.len())?)?;
    }
    if header.running.len() != params.running.len() {
        return Err(Error::Persistence(
            "running statistics do not match the configuration".into(),
        ));
    }
    for (&(c, batches), slot) in header.running.iter().zip(&mut params.running) {
        *slot = RunningStats {
            mean: take(c)?,
            var: take(c)?,
            batches,
        };
    }
    if !(bytes.len() - 16 - len).is_multiple_of(8) || cursor.next().is_some() {
        return Err(Error::Persistence("trailing bytes after parameter data".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &HGNetParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?).map_err(|e| persist(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<HGNetParams> {
    from_bytes(&fs::read(path).map_err(|e| persist(format!("{}: {e}", path.display())))?)
}
