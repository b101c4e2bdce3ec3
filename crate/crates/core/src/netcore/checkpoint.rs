//! Versioned single-file checkpoints.
//!
//! Layout: 8-byte magic `LLPOSECK`, `u32` format version, `u64` header length,
//! a JSON header (model config, parameter index, caller metadata), then every
//! parameter tensor followed by every running-statistics bank as little-endian
//! `f64`s in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PoseNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LLPOSECK";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    params: Vec<Entry>,
    running: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: PoseNet,
    /// Free-form training metadata (variant, preprocessing switches, ...).
    pub meta: serde_json::Value,
}

fn running_entries(net: &PoseNet) -> Vec<Entry> {
    let mut out = Vec::new();
    for (layer, name) in net.norm_layers().iter().zip(net.norm_names()) {
        for (bank, stats) in layer.running_banks() {
            for part in ["mean", "var"] {
                out.push(Entry {
                    name: format!("{name}.running_{bank}.{part}"),
                    shape: vec![stats.mean.len()],
                });
            }
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, net: &PoseNet, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        model: net.config().clone(),
        params: (0..net.num_params())
            .map(|i| {
                let info = net.param_info(i);
                Entry {
                    name: info.name,
                    shape: info.shape,
                }
            })
            .collect(),
        running: running_entries(net),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(header.len() + 8 * net.num_scalars() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for i in 0..net.num_params() {
        for v in net.param(i).data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for layer in net.norm_layers() {
        for (_, stats) in layer.running_banks() {
            for v in stats.mean.iter().chain(&stats.var) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20 + hlen;
    if bytes.len() < body_start {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| bad(&format!("invalid header: {e}")))?;
    let mut net = PoseNet::new(header.model)?;
    let expected: Vec<Entry> = (0..net.num_params())
        .map(|i| {
            let info = net.param_info(i);
            Entry {
                name: info.name,
                shape: info.shape,
            }
        })
        .collect();
    if expected != header.params || running_entries(&net) != header.running {
        return Err(bad("parameter index does not match the model configuration"));
    }
    let mut values = bytes[body_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() == n {
            Ok(v)
        } else {
            Err(bad("truncated parameter data"))
        }
    };
    for i in 0..net.num_params() {
        let n = net.param(i).len();
        let data = take(n)?;
        net.param_mut(i).data_mut().copy_from_slice(&data);
    }
    for layer in net.norm_layers_mut() {
        for (_, stats) in layer.running_banks_mut() {
            let c = stats.mean.len();
            stats.mean = take(c)?;
            stats.var = take(c)?;
        }
    }
    if values.next().is_some() {
        return Err(bad("trailing data after parameters"));
    }
    Ok(Checkpoint {
        net,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{LightingCondition, Mode, NormKind};
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        for norm in [NormKind::Lsbn, NormKind::Plain] {
            let mut net = PoseNet::new(ModelConfig {
                norm,
                ..ModelConfig::tiny()
            })
            .unwrap();
            let x = Tensor::full(&[2, 3, 32, 24], 0.3);
            // one training-mode pass moves the running statistics off their defaults
            net.predict(&x, LightingCondition::LowLight, Mode::Train).unwrap();
            let meta = serde_json::json!({"variant": "ours"});
            save_checkpoint(&path, &net, &meta).unwrap();
            let mut loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.meta, meta);
            let a = net.predict(&x, LightingCondition::LowLight, Mode::Eval).unwrap();
            let b = loaded.net.predict(&x, LightingCondition::LowLight, Mode::Eval).unwrap();
            assert_eq!(a.refine, b.refine);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let net = PoseNet::new(ModelConfig::tiny()).unwrap();
        save_checkpoint(&path, &net, &serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
