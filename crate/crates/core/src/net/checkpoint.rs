//! Binary checkpoint container.
//!
//! Layout: the magic `EXBCKPT\0`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then every tensor listed in the header as
//! raw little-endian `f32` values in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MultiExitModel, TrainConfig};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::tensor::{LayerSpec, Sequential, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EXBCKPT\0";

/// A model plus the configuration that produced it and free-form metadata
/// (for example the split a batch-norm adaptation used).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MultiExitModel<f32>,
    pub train_config: Option<TrainConfig>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: MultiExitModel<f32>) -> Self {
        Self {
            model,
            train_config: None,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    backbone: Vec<LayerSpec>,
    input_shape: [usize; 3],
    num_classes: usize,
    attach_indices: Vec<usize>,
    cost_table: Vec<f64>,
    input_norm: Option<Normalization>,
    train_config: Option<TrainConfig>,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Every stored tensor in canonical order: learnable parameters, then the
/// running statistics of each batch-norm layer.
fn tensors(model: &MultiExitModel<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<_> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("param.{i}"), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (j, bn) in model.batchnorms().iter().enumerate() {
        out.push((
            format!("bn.{j}.running_mean"),
            vec![bn.channels],
            bn.running_mean.clone(),
        ));
        out.push((
            format!("bn.{j}.running_var"),
            vec![bn.channels],
            bn.running_var.clone(),
        ));
    }
    out
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    let items = tensors(m);
    let header = Header {
        backbone: m.backbone.specs(),
        input_shape: m.input_shape,
        num_classes: m.num_classes,
        attach_indices: m.attach_indices(),
        cost_table: m.cost_table.clone(),
        input_norm: m.input_norm.clone(),
        train_config: ck.train_config.clone(),
        metadata: ck.metadata.clone(),
        tensors: items
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &items {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let bad = |loc: &str, msg: String| Error::format(origin, loc, msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("offset 0", "not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(
            "offset 8",
            format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("offset 12", format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| bad("header", e.to_string()))?;

    let backbone = Sequential::from_specs(&header.backbone, &mut ChaCha8Rng::seed_from_u64(0));
    let mut model = MultiExitModel::assemble(
        backbone,
        &header.attach_indices,
        header.input_shape,
        header.num_classes,
        |_| ChaCha8Rng::seed_from_u64(0),
    )?;
    if model.cost_table != header.cost_table {
        return Err(bad(
            "header.cost_table",
            format!(
                "stored {:?} disagrees with the architecture's {:?}",
                header.cost_table, model.cost_table
            ),
        ));
    }
    model.input_norm = header.input_norm;

    let expected = tensors(&model);
    if expected.len() != header.tensors.len() {
        return Err(bad(
            "header.tensors",
            format!(
                "{} tensors listed, architecture has {}",
                header.tensors.len(),
                expected.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(expected.len());
    let mut offset = body_start;
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(
                "header.tensors",
                format!(
                    "entry {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                ),
            ));
        }
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad(
                &format!("offset {offset}"),
                format!("truncated data for {name}"),
            ));
        }
        values.push(
            bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<f32>>(),
        );
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad(
            &format!("offset {offset}"),
            format!("{} trailing bytes", bytes.len() - offset),
        ));
    }

    let n_params = model.params().len();
    let mut it = values.into_iter();
    for (p, v) in model.params_mut().into_iter().zip(it.by_ref().take(n_params)) {
        *p = Tensor::new(p.shape().to_vec(), v)?;
    }
    for bn in model.batchnorms_mut() {
        bn.running_mean = it.next().expect("counted above");
        bn.running_var = it.next().expect("counted above");
        if bn.running_var.iter().any(|v| !(*v > 0.0)) {
            return Err(bad("tensors", "running variance must be positive".into()));
        }
    }
    Ok(Checkpoint {
        model,
        train_config: header.train_config,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{BackboneKind, ModelSpec};

    fn model() -> MultiExitModel<f32> {
        let spec = ModelSpec::reference(BackboneKind::Resnet8, [4, 6, 8], 16, 3).unwrap();
        let mut m = MultiExitModel::build(&spec, 9).unwrap();
        for (j, bn) in m.batchnorms_mut().into_iter().enumerate() {
            bn.running_mean.iter_mut().for_each(|v| *v = 0.1 * j as f32);
            bn.running_var.iter_mut().for_each(|v| *v = 1.0 + 0.3 * j as f32);
        }
        m.input_norm = Some(Normalization {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![0.5, 0.6, 0.7],
        });
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new(model());
        ck.train_config = Some(TrainConfig::default());
        ck.metadata.insert("adapted_on".into(), "gaussian_noise:3".into());
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&Checkpoint::new(model())).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, "mem").is_err());
        let truncated = &bytes[..bytes.len() - 3];
        let err = decode_checkpoint(truncated, "mem").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
