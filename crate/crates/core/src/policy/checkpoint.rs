//! Checkpoint format: a JSON header describing the layout and a binary body
//! of little-endian `f64` values, blocks concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::ConnectorParams;
use crate::error::{Error, Result};

use super::{PolicyDims, PolicyParams};

pub const CHECKPOINT_FORMAT: &str = "rft-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dims: PolicyDims,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    pub blocks: Vec<BlockEntry>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

fn named_blocks(p: &PolicyParams) -> [(&'static str, &[f64], bool); 8] {
    let c = &p.connectors;
    [
        ("base", &p.base, true),
        ("token_embedding", &p.token_embedding, true),
        ("lora_b", &p.lora_b, false),
        ("lora_a", &p.lora_a, false),
        ("disease_weight", &c.disease_weight, false),
        ("disease_bias", &c.disease_bias, false),
        ("pixel_weight", &c.pixel_weight, false),
        ("pixel_bias", &c.pixel_bias, false),
    ]
}

impl CheckpointHeader {
    pub fn for_params(params: &PolicyParams, config_hash: Option<String>) -> Self {
        let mut offset = 0;
        let blocks = named_blocks(params)
            .iter()
            .map(|(name, values, frozen)| {
                let entry = BlockEntry { name: name.to_string(), offset, len: values.len(), frozen: *frozen };
                offset += values.len();
                entry
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: params.dims,
            rank: params.dims.rank,
            alpha: params.alpha,
            seed: params.seed,
            blocks,
            config_hash,
        }
    }
}

pub fn encode_body(params: &PolicyParams) -> Vec<u8> {
    named_blocks(params).iter().flat_map(|(_, values, _)| values.iter().flat_map(|v| v.to_le_bytes())).collect()
}

pub fn save_checkpoint(params: &PolicyParams, bin: &Path, header: &Path, config_hash: Option<String>) -> Result<()> {
    let h = CheckpointHeader::for_params(params, config_hash);
    fs::write(bin, encode_body(params)).map_err(|e| Error::io(bin, e))?;
    let text = serde_json::to_string_pretty(&h)?;
    fs::write(header, text + "\n").map_err(|e| Error::io(header, e))
}

/// Loads a checkpoint. With `expected` set, any difference in dimensions is
/// rejected.
pub fn load_checkpoint(bin: &Path, header: &Path, expected: Option<&PolicyDims>) -> Result<PolicyParams> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let h: CheckpointHeader = serde_json::from_str(&text)?;
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    decode(&h, &bytes, expected)
}

pub(crate) fn decode(h: &CheckpointHeader, bytes: &[u8], expected: Option<&PolicyDims>) -> Result<PolicyParams> {
    let bad = |m: String| Err(Error::Checkpoint(m));
    if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
        return bad(format!("unsupported format {} v{}", h.format, h.version));
    }
    if let Some(dims) = expected {
        if *dims != h.dims {
            return bad(format!("dimension mismatch: file has {:?}, expected {:?}", h.dims, dims));
        }
    }
    if h.rank != h.dims.rank {
        return bad("rank disagrees with dims".into());
    }
    let mut params = PolicyParams::zeros(h.dims, h.alpha);
    params.seed = h.seed;
    let layout = CheckpointHeader::for_params(&params, None).blocks;
    if layout != h.blocks {
        return bad("block table does not match the dimensions".into());
    }
    let total: usize = layout.iter().map(|b| b.len).sum();
    if bytes.len() != total * 8 {
        return bad(format!("body has {} bytes, expected {}", bytes.len(), total * 8));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let take = |name: &str| {
        let b = layout.iter().find(|b| b.name == name).expect("known block");
        values[b.offset..b.offset + b.len].to_vec()
    };
    params.base = take("base");
    params.token_embedding = take("token_embedding");
    params.lora_b = take("lora_b");
    params.lora_a = take("lora_a");
    params.connectors = ConnectorParams {
        disease_weight: take("disease_weight"),
        disease_bias: take("disease_bias"),
        pixel_weight: take("pixel_weight"),
        pixel_bias: take("pixel_bias"),
        ..params.connectors
    };
    Ok(params)
}
