//! Cube file format.
//!
//! A cube is a one-line JSON header
//! `{"height":M,"width":N,"bands":d,"dtype":"f32"|"f64","order":"band-major"}`
//! followed by exactly `M*N*d` little-endian scalars. The header and payload
//! may share one file (header line, `\n`, payload) or live in a `.json` +
//! `.bin` pair with the same stem. [`write_cube`] always emits the single-file
//! form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SpectralCube;
use crate::{Error, Result};

const ORDER_BAND_MAJOR: &str = "band-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: Dtype,
    pub order: String,
}

impl CubeHeader {
    fn for_cube(cube: &SpectralCube, dtype: Dtype) -> Self {
        Self {
            height: cube.height(),
            width: cube.width(),
            bands: cube.bands(),
            dtype,
            order: ORDER_BAND_MAJOR.to_string(),
        }
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        let header: CubeHeader = serde_json::from_slice(bytes)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.height == 0 || header.width == 0 || header.bands == 0 {
            return Err(Error::MalformedHeader(format!(
                "dimensions must be positive, got {}x{}x{}",
                header.height, header.width, header.bands
            )));
        }
        if header.order != ORDER_BAND_MAJOR {
            return Err(Error::MalformedHeader(format!(
                "unsupported order {:?}",
                header.order
            )));
        }
        Ok(header)
    }

    fn scalar_count(&self) -> usize {
        self.height * self.width * self.bands
    }
}

fn encode(cube: &SpectralCube, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(cube.len() * dtype.size());
    match dtype {
        Dtype::F32 => cube
            .as_slice()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => cube
            .as_slice()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn decode(header: &CubeHeader, payload: &[u8]) -> Result<SpectralCube> {
    let expected = header.scalar_count() * header.dtype.size();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "header declares {expected} payload bytes but {} are present",
            payload.len()
        )));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    SpectralCube::new(header.height, header.width, header.bands, data)
}

fn sidecar_pair(path: &Path) -> Option<(PathBuf, PathBuf)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Some((path.to_path_buf(), path.with_extension("bin"))),
        Some("bin") if path.with_extension("json").exists() => {
            Some((path.with_extension("json"), path.to_path_buf()))
        }
        _ => None,
    }
}

/// Reads either the single-file or the `.json` + `.bin` form.
pub fn read_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let path = path.as_ref();
    if let Some((json, bin)) = sidecar_pair(path) {
        let header_bytes = fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let header = CubeHeader::parse(&header_bytes)?;
        let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        return decode(&header, &payload);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("missing header line".into()))?;
    let header = CubeHeader::parse(&bytes[..newline])?;
    decode(&header, &bytes[newline + 1..])
}

/// Writes the single-file form.
pub fn write_cube(cube: &SpectralCube, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec(&CubeHeader::for_cube(cube, dtype))?;
    bytes.push(b'\n');
    bytes.extend(encode(cube, dtype));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the two-file form next to `json_path` (`<stem>.json` + `<stem>.bin`).
pub fn write_cube_sidecar(
    cube: &SpectralCube,
    json_path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<()> {
    let json = json_path.as_ref().with_extension("json");
    let bin = json.with_extension("bin");
    let header = serde_json::to_vec(&CubeHeader::for_cube(cube, dtype))?;
    fs::write(&json, header).map_err(|e| Error::io(&json, e))?;
    fs::write(&bin, encode(cube, dtype)).map_err(|e| Error::io(&bin, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_cube(h: usize, w: usize, d: usize) -> SpectralCube {
        let mut rng = rng::stream(11, &[]);
        SpectralCube::from_fn(h, w, d, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn single_file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cube = random_cube(16, 16, 4);
        let path = dir.path().join("x.cube");
        write_cube(&cube, &path, Dtype::F64).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(back.shape(), cube.shape());
        for (a, b) in cube.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_is_widened_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let cube = random_cube(3, 5, 2);
        let path = dir.path().join("x.cube");
        write_cube(&cube, &path, Dtype::F32).unwrap();
        let back = read_cube(&path).unwrap();
        for (a, b) in cube.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(f64::from(*a as f32), *b);
        }
    }

    #[test]
    fn sidecar_form_reads_from_either_file() {
        let dir = tempfile::tempdir().unwrap();
        let cube = random_cube(4, 6, 3);
        let json = dir.path().join("pair.json");
        write_cube_sidecar(&cube, &json, Dtype::F64).unwrap();
        assert_eq!(read_cube(&json).unwrap(), cube);
        assert_eq!(read_cube(dir.path().join("pair.bin")).unwrap(), cube);
    }

    #[test]
    fn short_payload_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.cube");
        let mut bytes =
            br#"{"height":4,"width":4,"bands":2,"dtype":"f64","order":"band-major"}"#.to_vec();
        bytes.push(b'\n');
        bytes.extend(std::iter::repeat_n(0u8, 31 * 8));
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_cube(&path),
            Err(Error::TruncatedPayload {
                expected: 256,
                found: 248
            })
        ));
    }

    #[test]
    fn long_payload_is_a_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.cube");
        let mut bytes =
            br#"{"height":1,"width":1,"bands":1,"dtype":"f32","order":"band-major"}"#.to_vec();
        bytes.push(b'\n');
        bytes.extend([0u8; 8]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_cube(&path), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn malformed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let cases: [&[u8]; 4] = [
            br#"{"height":4,"width":4,"bands":0,"dtype":"f64","order":"band-major"}"#,
            br#"{"height":4,"width":4,"bands":1,"dtype":"f16","order":"band-major"}"#,
            br#"{"height":4,"width":4,"bands":1,"dtype":"f64","order":"pixel-major"}"#,
            b"not json",
        ];
        for (i, header) in cases.iter().enumerate() {
            let path = dir.path().join(format!("bad{i}.cube"));
            let mut bytes = header.to_vec();
            bytes.push(b'\n');
            fs::write(&path, bytes).unwrap();
            assert!(
                matches!(read_cube(&path), Err(Error::MalformedHeader(_))),
                "case {i}"
            );
        }
        let path = dir.path().join("noline.cube");
        fs::write(&path, b"{}").unwrap();
        assert!(matches!(read_cube(&path), Err(Error::MalformedHeader(_))));
    }
}
