//! Model checkpoints: a JSON manifest next to a raw little-endian `f64`
//! payload holding every tensor in canonical order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decouple::PartitionPlan;
use crate::error::{Error, Result};
use crate::nn::{Architecture, LayerSpec, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub client_id: Option<usize>,
    pub round: usize,
    pub config_hash: String,
    pub architecture: Architecture,
    pub plan: PartitionPlan,
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
}

/// Bookkeeping stored alongside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta<'a> {
    pub round: usize,
    pub client_id: Option<usize>,
    pub config_hash: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams,
}

fn tensor_table(arch: &Architecture) -> Vec<TensorEntry> {
    let mut offset = 0;
    let mut out = Vec::new();
    for slot in arch.slots() {
        let weight_shape = match arch.layers()[slot.layer] {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => vec![out_channels, in_channels, kernel_size, kernel_size],
            _ => vec![slot.out_channels, slot.row_len],
        };
        for (name, shape) in [("weight", weight_shape), ("bias", vec![slot.out_channels])] {
            let len: usize = shape.iter().product();
            out.push(TensorEntry {
                layer: slot.layer,
                name: name.into(),
                shape,
                offset,
            });
            offset += len;
        }
    }
    out
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest
/// path.
pub fn save(
    dir: &Path,
    stem: &str,
    arch: &Architecture,
    params: &ModelParams,
    plan: &PartitionPlan,
    meta: &CheckpointMeta,
) -> Result<PathBuf> {
    arch.check_params(params)?;
    let payload_name = format!("{stem}.bin");
    let mut bytes = Vec::with_capacity(8 * params.num_entries());
    for tensor in params.tensors() {
        for v in tensor {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let payload_path = dir.join(&payload_name);
    std::fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        client_id: meta.client_id,
        round: meta.round,
        config_hash: meta.config_hash.to_string(),
        architecture: arch.clone(),
        plan: plan.clone(),
        payload: payload_name,
        tensors: tensor_table(arch),
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load(manifest_path: &Path) -> Result<Checkpoint> {
    let bad = |m: String| Error::Load {
        path: manifest_path.to_path_buf(),
        message: m,
    };
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let arch = &manifest.architecture;
    if manifest.tensors != tensor_table(arch) {
        return Err(bad("tensor table does not match the architecture".into()));
    }
    manifest.plan.check(arch).map_err(|e| bad(e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let payload_path = dir.join(&manifest.payload);
    let bytes = std::fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != 8 * expected {
        return Err(bad(format!(
            "payload holds {} bytes, tensor shapes need {}",
            bytes.len(),
            8 * expected
        )));
    }
    let mut params = arch.zeros();
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]));
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = values.next().unwrap_or(f64::NAN);
        }
    }
    if !params.is_finite() {
        return Err(bad("payload contains non-finite values".into()));
    }
    Ok(Checkpoint { manifest, params })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{forward, InputShape};

    fn cnn() -> Architecture {
        Architecture::new(
            InputShape::Image {
                channels: 1,
                height: 6,
                width: 6,
            },
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel_size: 3,
                    stride: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_units: 12,
                    out_units: 4,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_forward_bitwise() {
        let arch = cnn();
        let params = arch.init(&mut ChaCha8Rng::seed_from_u64(4));
        let plan = PartitionPlan::from_rate(&arch, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = save(
            dir.path(),
            "client-0",
            &arch,
            &params,
            &plan,
            &CheckpointMeta {
                round: 7,
                client_id: Some(0),
                config_hash: "abc",
            },
        ).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.manifest.plan, plan);
        assert_eq!(ck.manifest.round, 7);
        assert_eq!(ck.manifest.tensors[0].shape, vec![3, 1, 3, 3]);
        let x: Vec<f64> = (0..72).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = forward(&arch, &params, &x, 2, &arch.full_mask()).unwrap().logits;
        let b = forward(&ck.manifest.architecture, &ck.params, &x, 2, &arch.full_mask()).unwrap().logits;
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let arch = cnn();
        let params = arch.init(&mut ChaCha8Rng::seed_from_u64(4));
        let dir = tempfile::tempdir().unwrap();
        let path = save(
            dir.path(),
            "m",
            &arch,
            &params,
            &PartitionPlan::all_shared(&arch),
            &CheckpointMeta {
                round: 0,
                client_id: None,
                config_hash: "",
            },
        ).unwrap();
        let bin = dir.path().join("m.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Load { .. })));
    }
}
