//! On-disk model format: a JSON manifest plus one raw little-endian weight
//! blob. Tensors in the manifest are references into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Location of a tensor inside the weight blob; `offset` is in bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub offset: u64,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "is_default_dtype")]
    pub dtype: Dtype,
}

fn is_default_dtype(d: &Dtype) -> bool {
    *d == Dtype::F32
}

/// Union of every node parameter either graph flavour uses. Absent fields
/// are omitted from the JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<isize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transpose_b: Option<bool>,
    // spiking-graph extensions
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thetas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rectify: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub func: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_scales: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scales: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    /// Blob file name, relative to the manifest.
    pub weights: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
    dtype: Dtype,
}

impl BlobWriter {
    pub fn new(dtype: Dtype) -> Self {
        Self {
            bytes: Vec::new(),
            dtype,
        }
    }

    pub fn push(&mut self, t: &Tensor) -> TensorRef {
        let offset = self.bytes.len() as u64;
        for &v in t.data() {
            match self.dtype {
                Dtype::F32 => self.bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => self.bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
        TensorRef {
            offset,
            shape: t.shape().to_vec(),
            dtype: self.dtype,
        }
    }

    pub fn push_opt(&mut self, t: Option<&Tensor>) -> Option<TensorRef> {
        t.map(|t| self.push(t))
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BlobReader {
    bytes: Vec<u8>,
}

impl BlobReader {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn get(&self, r: &TensorRef) -> Result<Tensor> {
        let count: usize = r.shape.iter().product();
        let width = r.dtype.width();
        let start = r.offset as usize;
        let end = start + count * width;
        let raw = self.bytes.get(start..end).ok_or_else(|| {
            Error::Format(format!(
                "tensor at byte {start} with {count} values runs past the {}-byte blob",
                self.bytes.len()
            ))
        })?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match r.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        Tensor::new(r.shape.clone(), data)
    }

    pub fn get_opt(&self, r: Option<&TensorRef>) -> Result<Option<Tensor>> {
        r.map(|r| self.get(r)).transpose()
    }
}

/// Blob path for a manifest at `manifest_path`: same stem, `.bin` extension.
pub fn blob_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn write(manifest_path: &Path, manifest: &Manifest, blob: Vec<u8>) -> Result<()> {
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or(Path::new(""))
        .join(&manifest.weights);
    fs::write(blob_path, blob)?;
    fs::write(manifest_path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

pub fn read(manifest_path: &Path) -> Result<(Manifest, BlobReader)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let blob_path = manifest_path
        .parent()
        .unwrap_or(Path::new(""))
        .join(&manifest.weights);
    let bytes = fs::read(&blob_path)?;
    Ok((manifest, BlobReader::new(bytes)))
}

pub fn required<'a, T>(v: &'a Option<T>, node: &str, field: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Format(format!("node `{node}` is missing `{field}`")))
}
