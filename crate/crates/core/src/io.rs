//! On-disk persistence for ensembles, fields and network parameters.
//!
//! Each object is a pair of files: a JSON manifest and a raw payload of
//! little-endian `f64` values. Matrices are stored column-major, fields
//! row-major in node order. The manifest records the payload's SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, ScalarField};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub dims: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub payload_file: String,
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            dims: BTreeMap::new(),
            iteration: None,
            payload_file: String::new(),
            checksum: String::new(),
            extent: None,
            layers: Vec::new(),
            meta: None,
        }
    }

    pub fn dim(&self, key: &str, path: &Path) -> Result<usize> {
        self.dims.get(key).copied().ok_or_else(|| Error::MalformedManifest {
            path: path.to_path_buf(),
            reason: format!("missing dimension `{key}`"),
        })
    }
}

/// Payload file path that accompanies a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("payload")
}

fn checksum(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Writes `values` as the payload and `manifest` (with payload name and checksum filled in).
pub fn write_blob(manifest_path: &Path, mut manifest: Manifest, values: &[f64]) -> Result<()> {
    let payload = payload_path(manifest_path);
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    manifest.payload_file = payload
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.checksum = checksum(&bytes);
    fs::write(&payload, &bytes)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numeric(format!("manifest serialization failed: {e}")))?;
    fs::write(manifest_path, json)?;
    Ok(())
}

/// Reads a manifest of the given kind and its payload.
///
/// `expected_len` derives the payload length implied by the manifest.
pub fn read_blob(
    manifest_path: &Path,
    kind: &str,
    expected_len: impl FnOnce(&Manifest) -> Result<usize>,
) -> Result<(Manifest, Vec<f64>)> {
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(malformed(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.kind != kind {
        return Err(malformed(format!("expected kind `{kind}`, found `{}`", manifest.kind)));
    }
    if manifest.payload_file.is_empty() || manifest.payload_file.contains(['/', '\\']) {
        return Err(malformed("payload_file must be a bare file name".into()));
    }
    let expected = expected_len(&manifest)?;
    let payload = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload_file);
    let bytes = fs::read(&payload)?;
    let found = bytes.len() / 8;
    if bytes.len() < expected * 8 {
        return Err(Error::TruncatedPayload {
            path: payload,
            expected,
            found,
        });
    }
    if bytes.len() != expected * 8 {
        return Err(Error::PayloadDimensions {
            path: payload,
            expected,
            found: bytes.len().div_ceil(8),
        });
    }
    if checksum(&bytes) != manifest.checksum {
        return Err(Error::ChecksumMismatch { path: payload });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((manifest, values))
}

pub fn save_ensemble(e: &Ensemble, manifest_path: &Path) -> Result<()> {
    let mut m = Manifest::new("ensemble");
    m.dims.insert("n_params".into(), e.n_params());
    m.dims.insert("n_members".into(), e.n_members());
    m.dims.insert("n_outputs".into(), e.n_outputs().unwrap_or(0));
    m.iteration = Some(e.iteration());
    let mut values: Vec<f64> = e.params().as_slice().to_vec();
    if let Some(y) = e.outputs() {
        values.extend_from_slice(y.as_slice());
    }
    write_blob(manifest_path, m, &values)
}

pub fn load_ensemble(manifest_path: &Path) -> Result<Ensemble> {
    let mut dims = (0, 0, 0);
    let (m, values) = read_blob(manifest_path, "ensemble", |m| {
        dims = (
            m.dim("n_params", manifest_path)?,
            m.dim("n_members", manifest_path)?,
            m.dim("n_outputs", manifest_path)?,
        );
        Ok((dims.0 + dims.2) * dims.1)
    })?;
    let (np, ne, ny) = dims;
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let params = DMatrix::from_column_slice(np, ne, &values[..np * ne]);
    let mut e = Ensemble::new(params, m.iteration.unwrap_or(0)).map_err(|e| malformed(e.to_string()))?;
    if ny > 0 {
        e.set_outputs(DMatrix::from_column_slice(ny, ne, &values[np * ne..]))?;
    }
    Ok(e)
}

pub fn save_field(f: &ScalarField, manifest_path: &Path) -> Result<()> {
    let g = f.grid();
    let mut m = Manifest::new("field");
    m.dims.insert("nx".into(), g.nx);
    m.dims.insert("ny".into(), g.ny);
    m.extent = Some([g.lx, g.ly]);
    write_blob(manifest_path, m, f.values())
}

pub fn load_field(manifest_path: &Path) -> Result<ScalarField> {
    let (m, values) = read_blob(manifest_path, "field", |m| {
        Ok(m.dim("nx", manifest_path)? * m.dim("ny", manifest_path)?)
    })?;
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let [lx, ly] = m.extent.ok_or_else(|| malformed("missing extent".into()))?;
    let grid = Grid2D::new(m.dims["nx"], m.dims["ny"], lx, ly).map_err(|e| malformed(e.to_string()))?;
    ScalarField::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample_ensemble(rng: &mut RngStream) -> Ensemble {
        let p = DMatrix::from_fn(4, 10, |_, _| rng.normal());
        let y = DMatrix::from_fn(3, 10, |_, _| rng.normal() * 1e-7);
        Ensemble::new(p, 2).unwrap().with_outputs(y).unwrap()
    }

    #[test]
    fn ensemble_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens_t2.manifest");
        let e = sample_ensemble(&mut RngStream::new(1, 0));
        save_ensemble(&e, &path).unwrap();
        assert!(dir.path().join("ens_t2.payload").exists());
        assert_eq!(load_ensemble(&path).unwrap(), e);
    }

    #[test]
    fn ensemble_without_outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.manifest");
        let e = Ensemble::new(DMatrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64), 0).unwrap();
        save_ensemble(&e, &path).unwrap();
        let back = load_ensemble(&path).unwrap();
        assert_eq!(back, e);
        assert!(back.outputs().is_none());
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.manifest");
        let e = Ensemble::new(DMatrix::from_fn(4, 10, |r, c| (r + c) as f64), 0).unwrap();
        save_ensemble(&e, &path).unwrap();
        // Drop the last column (4 values).
        let payload = payload_path(&path);
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 4 * 8]).unwrap();
        match load_ensemble(&path) {
            Err(Error::TruncatedPayload { expected, found, .. }) => {
                assert_eq!((expected, found), (40, 36));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_payload_and_checksum_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.manifest");
        let e = Ensemble::new(DMatrix::from_fn(2, 2, |r, c| (r + c) as f64), 0).unwrap();
        save_ensemble(&e, &path).unwrap();
        let payload = payload_path(&path);
        let mut bytes = fs::read(&payload).unwrap();
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        fs::write(&payload, &bytes).unwrap();
        assert!(matches!(load_ensemble(&path), Err(Error::PayloadDimensions { .. })));

        bytes.truncate(bytes.len() - 8);
        bytes[0] ^= 1;
        fs::write(&payload, &bytes).unwrap();
        assert!(matches!(load_ensemble(&path), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn malformed_manifest_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.manifest");
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(load_ensemble(&path), Err(Error::MalformedManifest { .. })));

        let f = ScalarField::constant(Grid2D::new(3, 2, 1.0, 1.0).unwrap(), 1.0);
        save_field(&f, &path).unwrap();
        // A field manifest is not an ensemble.
        assert!(matches!(load_ensemble(&path), Err(Error::MalformedManifest { .. })));

        let text = fs::read_to_string(&path).unwrap().replace("\"kind\"", "\"bogus\": 1, \"kind\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_field(&path), Err(Error::MalformedManifest { .. })));
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.manifest");
        let g = Grid2D::new(5, 4, 2.0, 3.0).unwrap();
        let f = ScalarField::from_fn(g, |x, y| x * 10.0 + y.sin()).unwrap();
        save_field(&f, &path).unwrap();
        assert_eq!(load_field(&path).unwrap(), f);
    }
}
