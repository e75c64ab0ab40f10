//! On-disk formats.
//!
//! Volume file: one JSON header line (`dims`, `origin`, `spacing`,
//! `n_joints`, `channels`) terminated by `\n`, followed by little-endian f32
//! values in [`FeatureVolume`] order (joint, voxel, channel).
//!
//! Tensor container: one JSON header line listing named tensors with shape,
//! dtype (`f32` or `f64`) and byte offset, then the concatenated
//! little-endian blob. Parameter exports use f32; checkpoints use f64 so a
//! resumed run continues bit-exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureVolume, VoxelGrid};
use crate::pose::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: Vec3,
    pub n_joints: usize,
    pub channels: usize,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_volume(vol: &FeatureVolume) -> Vec<u8> {
    let header = VolumeHeader {
        dims: vol.grid.dims,
        origin: vol.grid.origin,
        spacing: vol.grid.spacing,
        n_joints: vol.n_joints,
        channels: vol.channels,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(vol.values.len() * 4);
    for &v in &vol.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_volume(path: impl AsRef<Path>, vol: &FeatureVolume) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(vol)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| format_err(path, e.to_string()))?;
    let grid = VoxelGrid::new(header.dims, header.origin, header.spacing)?;
    let count = header.n_joints * header.channels * grid.len();
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * 4 {
        return Err(format_err(
            path,
            format!("expected {} payload bytes, found {}", count * 4, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureVolume::new(grid, header.n_joints, header.channels, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerHeader {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

const CONTAINER_FORMAT: &str = "ctxpose-tensors";

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, dtype: DType, data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            dtype,
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype,
                offset,
            });
            offset += t.data.len()
                * match t.dtype {
                    DType::F32 => 4,
                    DType::F64 => 8,
                };
        }
        let header = ContainerHeader {
            format: CONTAINER_FORMAT.into(),
            version: 1,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => t.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(path, "missing header line"))?;
        let header: ContainerHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| format_err(path, e.to_string()))?;
        if header.format != CONTAINER_FORMAT {
            return Err(format_err(path, format!("unknown container format `{}`", header.format)));
        }
        let blob = &bytes[nl + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let width = match e.dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let raw = blob
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| format_err(path, format!("tensor `{}` exceeds the blob", e.name)))?;
            let data = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                dtype: e.dtype,
                data,
            });
        }
        Ok(TensorFile {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorFile::decode(&bytes, path)
    }
}
