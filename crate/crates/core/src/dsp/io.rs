//! Trace files: raw little-endian `f32` samples plus a JSON sidecar with the
//! same basename (`<base>.f32`, `<base>.json`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MagnitudeTrace, Origin};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub sample_rate_hz: f64,
    pub label: Option<String>,
    pub origin: Origin,
}

pub fn samples_path(base: &Path) -> PathBuf {
    base.with_extension("f32")
}

pub fn sidecar_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

/// Writes `bytes` to a sibling temp file, then renames over `path`, so a
/// reader never observes a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_samples(trace: &MagnitudeTrace) -> Vec<u8> {
    trace
        .samples()
        .iter()
        .flat_map(|&s| (s as f32).to_le_bytes())
        .collect()
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("sample file length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `<base>.f32` and `<base>.json`.
pub fn write_trace(base: &Path, trace: &MagnitudeTrace) -> Result<()> {
    let sidecar = TraceSidecar {
        sample_rate_hz: trace.sample_rate(),
        label: trace.label().map(str::to_owned),
        origin: trace.origin(),
    };
    write_atomic(&samples_path(base), &encode_samples(trace))?;
    write_atomic(&sidecar_path(base), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(())
}

pub fn read_trace(base: &Path) -> Result<MagnitudeTrace> {
    let sidecar: TraceSidecar = serde_json::from_slice(&fs::read(sidecar_path(base))?)?;
    let samples = decode_samples(&fs::read(samples_path(base))?)?;
    let mut trace = MagnitudeTrace::new(samples, sidecar.sample_rate_hz)?.with_origin(sidecar.origin);
    if let Some(label) = sidecar.label {
        trace = trace.with_label(label);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn file_round_trip_is_bit_exact(v in proptest::collection::vec(-1e6f32..1e6f32, 1..200)) {
            let dir = tempfile::tempdir().unwrap();
            let base = dir.path().join("t0");
            let trace = MagnitudeTrace::new(v.iter().map(|&s| s as f64).collect(), 3.39e6)
                .unwrap()
                .with_label("rep 0");
            write_trace(&base, &trace).unwrap();
            let first = fs::read(samples_path(&base)).unwrap();
            let back = read_trace(&base).unwrap();
            prop_assert_eq!(back.samples(), trace.samples());
            prop_assert_eq!(back.label(), Some("rep 0"));
            write_trace(&base, &back).unwrap();
            prop_assert_eq!(fs::read(samples_path(&base)).unwrap(), first);
        }
    }

    #[test]
    fn truncated_sample_file_is_rejected() {
        assert!(decode_samples(&[0, 0, 0]).is_err());
    }
}
