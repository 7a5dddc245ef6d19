//! Weight container I/O and synthetic initialization.
//!
//! Weights live in safetensors files: an 8-byte little-endian header length,
//! a JSON manifest mapping tensor names to `{dtype, shape, data_offsets}`,
//! then the raw little-endian tensor data. Only F32 tensors are accepted.
//! Both the native naming (`conv3_2.weight`) and the torchvision sequential
//! naming (`features.12.weight`) are recognized; unrelated tensors such as
//! classifier heads are ignored.
//!
//! The writer emits sorted keys and aligned headers, so a given tensor set
//! always produces identical bytes; synthetic weight files are therefore
//! reproducible from their seed alone.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use super::arch::{self, VGG16_CONV_LAYERS};
use crate::{Error, Result};

/// Raw tensors for consecutive trunk layers, in layer order.
#[derive(Debug)]
pub(crate) struct LayerTensors {
    /// `(weight [out, in, 3, 3] flattened, bias [out])` per layer.
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::WeightsFormat(msg.into())
}

/// Parses a safetensors buffer into the trunk's layer tensors. The file must
/// contain a contiguous run of layers starting at `conv1_1`; the first gap
/// ends the trunk, and a gap followed by more conv tensors is an error.
pub(crate) fn parse_safetensors(bytes: &[u8]) -> Result<LayerTensors> {
    if bytes.len() < 8 {
        return Err(format_err("file shorter than the 8-byte header length"));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err("header length exceeds file size"))?;
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| format_err(format!("invalid JSON header: {e}")))?;
    let data = &bytes[header_end..];

    // layer index -> (weight, bias) raw f32 data
    let mut weights: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    let mut biases: BTreeMap<usize, Vec<f32>> = BTreeMap::new();

    for (key, value) in &header {
        if key == "__metadata__" {
            continue;
        }
        let parsed = arch::parse_native_name(key).or_else(|| arch::parse_torchvision_name(key));
        let Some((layer, is_weight)) = parsed else {
            continue; // classifier heads and other unrelated tensors
        };
        let info: TensorInfo = serde_json::from_value(value.clone())
            .map_err(|e| format_err(format!("tensor {key}: {e}")))?;
        if info.dtype != "F32" {
            return Err(format_err(format!(
                "tensor {key}: expected dtype F32, got {}",
                info.dtype
            )));
        }
        let def = &VGG16_CONV_LAYERS[layer];
        let expected: Vec<usize> = if is_weight {
            vec![def.out_ch, def.in_ch, 3, 3]
        } else {
            vec![def.out_ch]
        };
        if info.shape != expected {
            return Err(Error::WeightShapeMismatch {
                layer: def.name.to_string(),
                expected,
                got: info.shape,
            });
        }
        let [start, end] = info.data_offsets;
        let count: usize = info.shape.iter().product();
        if end < start || end > data.len() || end - start != count * 4 {
            return Err(format_err(format!("tensor {key}: bad data offsets")));
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if is_weight {
            weights.insert(layer, values);
        } else {
            biases.insert(layer, values);
        }
    }

    let depth = weights.keys().chain(biases.keys()).max().map_or(0, |m| m + 1);
    if depth == 0 {
        return Err(format_err("no trunk tensors found"));
    }
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        let name = VGG16_CONV_LAYERS[i].name;
        let w = weights
            .remove(&i)
            .ok_or_else(|| Error::MissingWeight { layer: name.to_string() })?;
        let b = biases
            .remove(&i)
            .ok_or_else(|| Error::MissingWeight { layer: name.to_string() })?;
        layers.push((w, b));
    }
    Ok(LayerTensors { layers })
}

/// Serializes trunk tensors to canonical safetensors bytes (native names,
/// sorted keys, space-padded header).
pub fn serialize_trunk(layers: &[(Vec<f32>, Vec<f32>)]) -> Vec<u8> {
    let mut entries: BTreeMap<String, (Vec<usize>, &[f32])> = BTreeMap::new();
    for (i, (w, b)) in layers.iter().enumerate() {
        let def = &VGG16_CONV_LAYERS[i];
        entries.insert(
            format!("{}.weight", def.name),
            (vec![def.out_ch, def.in_ch, 3, 3], w),
        );
        entries.insert(format!("{}.bias", def.name), (vec![def.out_ch], b));
    }

    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, (shape, data)) in &entries {
        let end = offset + data.len() * 4;
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut header_json = serde_json::to_vec(&header).expect("static structure");
    while header_json.len() % 8 != 0 {
        header_json.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_json.len() + offset);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, (_, data)) in &entries {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Per-layer multiplier above the variance-preserving He level. Biases are
/// zero, so activations scale multiplicatively with depth; the gain makes
/// deep-layer magnitudes grow geometrically, which weights the combined
/// objective decisively toward the Gram (style) term at the conventional
/// alpha/beta ratio, mirroring how pretrained-feature magnitudes behave.
const SYNTHETIC_GAIN: f64 = 2.0;

/// Random trunk weights for the first `depth` layers, fully determined by
/// the seed: ChaCha12 stream, layers in trunk order, weight tensor then
/// bias (biases are zero).
pub fn synthetic_trunk(depth: usize, seed: u64) -> Vec<(Vec<f32>, Vec<f32>)> {
    assert!(
        (1..=VGG16_CONV_LAYERS.len()).contains(&depth),
        "depth must be 1..=13"
    );
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(depth);
    for def in &VGG16_CONV_LAYERS[..depth] {
        let fan_in = (def.in_ch * 9) as f64;
        let normal = Normal::new(0.0, SYNTHETIC_GAIN * (2.0 / fan_in).sqrt()).unwrap();
        let weight: Vec<f32> = (0..def.out_ch * def.in_ch * 9)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        layers.push((weight, vec![0.0f32; def.out_ch]));
    }
    layers
}

/// Hex-encoded SHA-256, the pipeline's weights checksum format.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
