//! Weight files: `<stem>.json` manifest plus `<stem>.bin` little-endian f32
//! payload, kernel then bias for each layer in order. The payload holds the
//! effective (normalized) kernels; a loaded model starts without power state.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConvLayer, DenoiserModel, TAPS};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    in_channels: usize,
    out_channels: usize,
    cap: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format: String,
    layers: Vec<LayerManifest>,
    relu: bool,
    mu_target: f64,
    sn_grid: (usize, usize),
    payload: String,
}

const FORMAT: &str = "hsdeq-denoiser-v1";

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

/// Writes `<path>.json` and `<path>.bin` (any extension on `path` is replaced).
pub fn save_model(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let (json, bin) = paths(path.as_ref());
    let manifest = ModelManifest {
        format: FORMAT.into(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerManifest {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                cap: l.sn_cap,
            })
            .collect(),
        relu: model.relu,
        mu_target: model.mu_target,
        sn_grid: model.sn_grid,
        payload: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut payload = Vec::with_capacity(model.num_params() * 4);
    for layer in &model.layers {
        for v in layer.effective_kernel().iter().chain(&layer.bias) {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))?;
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let (json, _) = paths(path.as_ref());
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: ModelManifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::MalformedHeader(format!(
            "unknown weight format {:?}",
            manifest.format
        )));
    }
    let bin = json.with_file_name(&manifest.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected: usize = manifest
        .layers
        .iter()
        .map(|l| (l.in_channels * l.out_channels * TAPS + l.out_channels) * 4)
        .sum();
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "weight payload has {} bytes, manifest describes {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let layers = manifest
        .layers
        .iter()
        .map(|l| {
            let nk = l.in_channels * l.out_channels * TAPS;
            let kernel: Vec<f64> = values.by_ref().take(nk).collect();
            let bias: Vec<f64> = values.by_ref().take(l.out_channels).collect();
            if kernel.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteData("weight payload"));
            }
            ConvLayer::new(l.in_channels, l.out_channels, kernel, bias).map(|c| c.with_cap(l.cap))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DenoiserModel::new(layers, manifest.relu)?
        .with_mu_target(manifest.mu_target)
        .with_sn_grid(manifest.sn_grid.0, manifest.sn_grid.1))
}
