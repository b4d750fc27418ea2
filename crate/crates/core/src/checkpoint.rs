//! Checkpoint container: a single file holding every tensor plus the model
//! configuration.
//!
//! Layout: an 8-byte little-endian `u64` header length, a compact JSON header,
//! then the raw payload. The header maps tensor names to
//! `{"dtype": "F32", "shape": [...], "data_offsets": [begin, end]}` records
//! (offsets relative to the payload region) and carries the configuration as
//! string values under `"__metadata__"`. Tensors are stored in lexicographic
//! name order and their offsets tile the payload exactly, so serialization is
//! byte-deterministic: write -> read -> write reproduces the file.
//!
//! Per-layer head and group counts are always written (`layer_heads` /
//! `layer_groups`, comma-separated), which keeps non-uniform models produced
//! by whole-head pruning loadable.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{names, BlockParams, MlpParams, ModelDims, ModelParams};
use crate::tensor::Tensor;

fn tensor_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

/// All tensors of a model keyed by canonical name, sorted by name.
fn tensor_map(params: &ModelParams) -> BTreeMap<String, &Tensor> {
    let mut map: BTreeMap<String, &Tensor> = BTreeMap::new();
    map.insert(names::EMBEDDING.to_string(), &params.embedding);
    for (i, block) in params.blocks.iter().enumerate() {
        map.insert(tensor_name(i, names::IN_PROJ_W), &block.w_inproj);
        map.insert(tensor_name(i, names::CONV_W), &block.conv_w);
        map.insert(tensor_name(i, names::CONV_B), &block.conv_b);
        map.insert(tensor_name(i, names::A_LOG), &block.a_log);
        map.insert(tensor_name(i, names::D), &block.d_skip);
        map.insert(tensor_name(i, names::DT_BIAS), &block.dt_bias);
        map.insert(tensor_name(i, names::NORM_W), &block.norm_w);
        map.insert(tensor_name(i, names::OUT_PROJ_W), &block.w_outproj);
        if let Some(b) = &block.outproj_bias {
            map.insert(tensor_name(i, names::OUT_PROJ_B), b);
        }
        if let Some(mlp) = &block.mlp {
            map.insert(tensor_name(i, names::MLP_GATE), &mlp.w_gate);
            map.insert(tensor_name(i, names::MLP_UP), &mlp.w_up);
            map.insert(tensor_name(i, names::MLP_DOWN), &mlp.w_down);
        }
    }
    map
}

fn metadata_map(dims: &ModelDims, params: &ModelParams) -> BTreeMap<String, String> {
    let csv = |f: fn(&BlockParams) -> usize| {
        params
            .blocks
            .iter()
            .map(|b| f(b).to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut meta = BTreeMap::new();
    meta.insert("d_model".into(), dims.d_model.to_string());
    meta.insert("n_layers".into(), dims.n_layers.to_string());
    meta.insert("n_heads".into(), dims.n_heads.to_string());
    meta.insert("head_dim".into(), dims.head_dim.to_string());
    meta.insert("d_state".into(), dims.d_state.to_string());
    meta.insert("n_groups".into(), dims.n_groups.to_string());
    meta.insert("d_conv".into(), dims.d_conv.to_string());
    meta.insert("vocab_size".into(), dims.vocab_size.to_string());
    meta.insert("norm_len".into(), dims.norm_len.to_string());
    meta.insert("has_mlp".into(), if dims.has_mlp { "1" } else { "0" }.into());
    meta.insert("d_mlp".into(), dims.d_mlp.to_string());
    meta.insert("layer_heads".into(), csv(|b| b.n_heads));
    meta.insert("layer_groups".into(), csv(|b| b.n_groups));
    meta
}

/// Serializes a validated model to checkpoint bytes.
pub fn to_bytes(dims: &ModelDims, params: &ModelParams) -> Result<Vec<u8>> {
    params.validate(dims)?;
    let tensors = tensor_map(params);

    let mut header = Map::new();
    let meta: Map<String, Value> = metadata_map(dims, params)
        .into_iter()
        .map(|(k, v)| (k, Value::String(v)))
        .collect();
    header.insert("__metadata__".to_string(), Value::Object(meta));

    let mut offset: usize = 0;
    for (name, t) in &tensors {
        let nbytes = t.numel() * 4;
        header.insert(
            name.clone(),
            json!({
                "dtype": "F32",
                "shape": t.shape(),
                "data_offsets": [offset, offset + nbytes],
            }),
        );
        offset += nbytes;
    }

    let header_bytes = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn meta_str<'a>(meta: &'a Map<String, Value>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| fmt_err(format!("metadata field {key} missing or not a string")))
}

fn meta_usize(meta: &Map<String, Value>, key: &str) -> Result<usize> {
    meta_str(meta, key)?
        .parse::<usize>()
        .map_err(|_| fmt_err(format!("metadata field {key} is not a decimal integer")))
}

fn meta_csv(meta: &Map<String, Value>, key: &str, expect_len: usize) -> Result<Vec<usize>> {
    let raw = meta_str(meta, key)?;
    let vals = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| fmt_err(format!("metadata field {key} is not a comma-separated list")))?;
    if vals.len() != expect_len {
        return Err(fmt_err(format!(
            "metadata field {key} has {} entries, expected {expect_len}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn parse_dims(meta: &Map<String, Value>) -> Result<ModelDims> {
    let has_mlp = match meta_str(meta, "has_mlp")? {
        "0" => false,
        "1" => true,
        other => return Err(fmt_err(format!("metadata field has_mlp is {other:?}, expected 0 or 1"))),
    };
    Ok(ModelDims {
        d_model: meta_usize(meta, "d_model")?,
        n_layers: meta_usize(meta, "n_layers")?,
        n_heads: meta_usize(meta, "n_heads")?,
        head_dim: meta_usize(meta, "head_dim")?,
        d_state: meta_usize(meta, "d_state")?,
        n_groups: meta_usize(meta, "n_groups")?,
        d_conv: meta_usize(meta, "d_conv")?,
        vocab_size: meta_usize(meta, "vocab_size")?,
        norm_len: meta_usize(meta, "norm_len")?,
        has_mlp,
        d_mlp: meta_usize(meta, "d_mlp")?,
    })
}

struct RawTensor {
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_record(name: &str, record: &Value) -> Result<RawTensor> {
    let obj = record
        .as_object()
        .ok_or_else(|| fmt_err(format!("tensor {name}: record is not an object")))?;
    for key in obj.keys() {
        if key != "dtype" && key != "shape" && key != "data_offsets" {
            return Err(fmt_err(format!("tensor {name}: unknown record field {key}")));
        }
    }
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| fmt_err(format!("tensor {name}: missing dtype")))?;
    if dtype != "F32" {
        return Err(fmt_err(format!("tensor {name}: unsupported dtype {dtype}")));
    }
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| fmt_err(format!("tensor {name}: missing shape")))?
        .iter()
        .map(|v| {
            v.as_u64()
                .and_then(|u| usize::try_from(u).ok())
                .ok_or_else(|| fmt_err(format!("tensor {name}: bad shape entry")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| fmt_err(format!("tensor {name}: missing data_offsets")))?;
    if offsets.len() != 2 {
        return Err(fmt_err(format!("tensor {name}: data_offsets must have 2 entries")));
    }
    let mut bounds = [0usize; 2];
    for (slot, v) in bounds.iter_mut().zip(offsets) {
        *slot = v
            .as_u64()
            .and_then(|u| usize::try_from(u).ok())
            .ok_or_else(|| fmt_err(format!("tensor {name}: bad data_offsets entry")))?;
    }
    let [begin, end] = bounds;
    let numel: usize = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
        || fmt_err(format!("tensor {name}: shape overflows")),
    )?;
    if end < begin || end - begin != numel * 4 {
        return Err(fmt_err(format!(
            "tensor {name}: data_offsets span {} bytes, shape needs {}",
            end.saturating_sub(begin),
            numel * 4
        )));
    }
    Ok(RawTensor { shape, begin, end })
}

/// Parses checkpoint bytes back into a validated model.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelDims, ModelParams)> {
    if bytes.len() < 8 {
        return Err(fmt_err("file shorter than the 8-byte header length"));
    }
    let header_len_u64 = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_len = usize::try_from(header_len_u64)
        .ok()
        .filter(|&n| n <= bytes.len() - 8)
        .ok_or_else(|| fmt_err("header length exceeds file size"))?;
    let header: Value = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| fmt_err(format!("header is not valid JSON: {e}")))?;
    let mut header = match header {
        Value::Object(map) => map,
        _ => return Err(fmt_err("header is not a JSON object")),
    };
    let payload = &bytes[8 + header_len..];

    let meta = match header.remove("__metadata__") {
        Some(Value::Object(map)) => map,
        Some(_) => return Err(fmt_err("__metadata__ is not an object")),
        None => return Err(fmt_err("__metadata__ missing")),
    };
    let dims = parse_dims(&meta)?;
    let layer_heads = meta_csv(&meta, "layer_heads", dims.n_layers)?;
    let layer_groups = meta_csv(&meta, "layer_groups", dims.n_layers)?;

    // Records iterate in name order (the header map is sorted); offsets must
    // ascend in that same order and tile the payload exactly.
    let mut raw: BTreeMap<String, RawTensor> = BTreeMap::new();
    for (name, record) in &header {
        raw.insert(name.clone(), parse_record(name, record)?);
    }
    let mut cursor = 0usize;
    for (name, rt) in &raw {
        if rt.begin != cursor {
            return Err(fmt_err(format!(
                "tensor {name}: begins at {} but previous tensor ends at {cursor}",
                rt.begin
            )));
        }
        cursor = rt.end;
    }
    if cursor != payload.len() {
        return Err(fmt_err(format!(
            "tensors cover {cursor} bytes but payload has {}",
            payload.len()
        )));
    }

    let bias_layers: Vec<bool> = (0..dims.n_layers)
        .map(|i| raw.contains_key(&tensor_name(i, names::OUT_PROJ_B)))
        .collect();
    let mut take = |name: &str| -> Result<Tensor> {
        let rt = raw
            .remove(name)
            .ok_or_else(|| fmt_err(format!("tensor {name} missing")))?;
        let data: Vec<f32> = payload[rt.begin..rt.end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(rt.shape, data).map_err(|e| fmt_err(format!("tensor {name}: {e}")))
    };

    let embedding = take(names::EMBEDDING)?;
    let mut blocks = Vec::with_capacity(dims.n_layers);
    for i in 0..dims.n_layers {
        let outproj_bias = if bias_layers[i] {
            Some(take(&tensor_name(i, names::OUT_PROJ_B))?)
        } else {
            None
        };
        let mlp = if dims.has_mlp {
            Some(MlpParams {
                w_gate: take(&tensor_name(i, names::MLP_GATE))?,
                w_up: take(&tensor_name(i, names::MLP_UP))?,
                w_down: take(&tensor_name(i, names::MLP_DOWN))?,
            })
        } else {
            None
        };
        blocks.push(BlockParams {
            n_heads: layer_heads[i],
            n_groups: layer_groups[i],
            w_inproj: take(&tensor_name(i, names::IN_PROJ_W))?,
            conv_w: take(&tensor_name(i, names::CONV_W))?,
            conv_b: take(&tensor_name(i, names::CONV_B))?,
            a_log: take(&tensor_name(i, names::A_LOG))?,
            d_skip: take(&tensor_name(i, names::D))?,
            dt_bias: take(&tensor_name(i, names::DT_BIAS))?,
            norm_w: take(&tensor_name(i, names::NORM_W))?,
            w_outproj: take(&tensor_name(i, names::OUT_PROJ_W))?,
            outproj_bias,
            mlp,
        });
    }
    if let Some(name) = raw.keys().next() {
        return Err(fmt_err(format!("unexpected tensor {name}")));
    }
    let params = ModelParams { embedding, blocks };
    params.validate(&dims)?;
    Ok((dims, params))
}

/// Writes a checkpoint file.
pub fn save(path: impl AsRef<Path>, dims: &ModelDims, params: &ModelParams) -> Result<()> {
    let bytes = to_bytes(dims, params)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load(path: impl AsRef<Path>) -> Result<(ModelDims, ModelParams)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
