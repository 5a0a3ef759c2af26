//! Kernel blobs: flat little-endian weights plus a JSON sidecar.
//!
//! `<stem>.bin` holds the weights in `(out, in / groups, k, k)` row-major
//! order; `<stem>.json` holds the shape metadata and the bias.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use super::{BatchNormParams, KernelTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SidecarDtype {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub out_channels: usize,
    pub in_channels: usize,
    pub groups: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: Vec<f64>,
    #[serde(default)]
    pub dtype: SidecarDtype,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `kernel` as `<stem>.bin` (float64) and `<stem>.json`.
pub fn write_kernel(stem: impl AsRef<Path>, kernel: &KernelTensor) -> Result<()> {
    let (bin, json) = paths(stem.as_ref());
    let mut bytes = Vec::with_capacity(kernel.weights().len() * 8);
    for w in kernel.weights().iter() {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    fs::write(bin, bytes)?;
    let sidecar = KernelSidecar {
        out_channels: kernel.out_channels(),
        in_channels: kernel.in_channels(),
        groups: kernel.groups(),
        k: kernel.kernel_size(),
        stride: kernel.stride(),
        bias: kernel.bias().to_vec(),
        dtype: SidecarDtype::F64,
    };
    fs::write(json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads a kernel blob; float32 blobs are widened to float64.
pub fn read_kernel(stem: impl AsRef<Path>) -> Result<KernelTensor> {
    let (bin, json) = paths(stem.as_ref());
    let sidecar: KernelSidecar = serde_json::from_str(&fs::read_to_string(json)?)?;
    if sidecar.groups == 0 || !sidecar.in_channels.is_multiple_of(sidecar.groups) {
        return Err(Error::InvalidKernel(format!(
            "sidecar groups {} do not divide {} input channels",
            sidecar.groups, sidecar.in_channels
        )));
    }
    let shape = (
        sidecar.out_channels,
        sidecar.in_channels / sidecar.groups,
        sidecar.k,
        sidecar.k,
    );
    let count = shape.0 * shape.1 * shape.2 * shape.3;
    let bytes = fs::read(bin)?;
    let values: Vec<f64> = match sidecar.dtype {
        SidecarDtype::F64 => decode(&bytes, count, |c: [u8; 8]| f64::from_le_bytes(c))?,
        SidecarDtype::F32 => decode(&bytes, count, |c: [u8; 4]| f32::from_le_bytes(c) as f64)?,
    };
    let weights = Array4::from_shape_vec(shape, values).map_err(|e| Error::InvalidKernel(e.to_string()))?;
    KernelTensor::new(weights, Array1::from(sidecar.bias), sidecar.stride, sidecar.groups)
}

fn decode<const N: usize>(bytes: &[u8], count: usize, f: impl Fn([u8; N]) -> f64) -> Result<Vec<f64>> {
    if bytes.len() != count * N {
        return Err(Error::InvalidKernel(format!(
            "blob holds {} bytes, expected {} for {count} values",
            bytes.len(),
            count * N
        )));
    }
    Ok(bytes
        .chunks_exact(N)
        .map(|c| f(c.try_into().expect("exact chunk")))
        .collect())
}

pub fn read_batchnorm(path: impl AsRef<Path>) -> Result<BatchNormParams> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
