//! Binary parameter container.
//!
//! Layout: `u64` little-endian manifest length, the JSON manifest, then every
//! tensor's entries as little-endian `f64` in row-major order. Each manifest
//! entry records its byte offset into the data section.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::params::{LayerConfig, LayerKind, LayerParams};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Free-form description of what the tensors belong to.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes named tensors with `meta` attached to the manifest.
pub fn write_tensors<'a, W: Write>(
    mut out: W,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (String, &'a Matrix)>,
) -> Result<()> {
    let tensors: Vec<(String, &Matrix)> = tensors.into_iter().collect();
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                byte_offset: offset,
            };
            offset += 8 * m.data().len() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        meta,
        tensors: entries,
    })?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    for (_, m) in &tensors {
        for v in m.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads back what [`write_tensors`] wrote.
pub fn read_tensors<R: Read>(mut input: R) -> Result<(serde_json::Value, Vec<(String, Matrix)>)> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::contract("manifest length overflows usize"))?;
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let start = e.byte_offset as usize;
        let end = start + 8 * e.rows * e.cols;
        let bytes = data.get(start..end).ok_or_else(|| {
            Error::contract(format!("tensor '{}' runs past the end of the data", e.name))
        })?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name, Matrix::new(e.rows, e.cols, values)?));
    }
    Ok((manifest.meta, out))
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    kind: LayerKind,
    config: LayerConfig,
}

pub fn write_layer<W: Write>(out: W, params: &LayerParams) -> Result<()> {
    let meta = serde_json::to_value(LayerMeta {
        kind: params.kind,
        config: params.config(),
    })?;
    write_tensors(out, meta, params.tensors())
}

pub fn read_layer<R: Read>(input: R) -> Result<LayerParams> {
    let (meta, tensors) = read_tensors(input)?;
    let meta: LayerMeta = serde_json::from_value(meta)?;
    let mut params = LayerParams::zeros(meta.kind, &meta.config)?;
    fill_named(params.tensors_mut(), tensors)?;
    Ok(params)
}

/// Copies `loaded` into `slots` by name; every slot must be filled exactly once
/// with a tensor of matching shape.
pub fn fill_named(
    mut slots: Vec<(String, &mut Matrix)>,
    loaded: Vec<(String, Matrix)>,
) -> Result<()> {
    if slots.len() != loaded.len() {
        return Err(Error::contract(format!(
            "expected {} tensors, found {}",
            slots.len(),
            loaded.len()
        )));
    }
    for (name, m) in loaded {
        let slot = slots
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::contract(format!("unexpected tensor '{name}'")))?;
        if slot.1.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "load tensor",
                lhs: slot.1.shape(),
                rhs: m.shape(),
            });
        }
        *slot.1 = m;
    }
    Ok(())
}
