//! Layered configuration (flags > config file > built-in defaults), the
//! output directory writer and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use nfcjamlab::dsp::{io, MagnitudeTrace};
use nfcjamlab::jammer::NoiseProfile;
use nfcjamlab::protocol::CardKind;

pub const SEED_ENV: &str = "NFCJAMLAB_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    NoData(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::NoData(_) => 4,
        }
    }
}

impl From<nfcjamlab::Error> for CliError {
    fn from(err: nfcjamlab::Error) -> Self {
        use nfcjamlab::Error as E;
        match err {
            E::Io(m) => CliError::Io(m),
            E::FieldNotFound | E::SegmentationEmpty => CliError::NoData(err.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CardArg {
    Ultralight,
    Classic,
}

impl From<CardArg> for CardKind {
    fn from(c: CardArg) -> Self {
        match c {
            CardArg::Ultralight => CardKind::Ultralight,
            CardArg::Classic => CardKind::Classic,
        }
    }
}

/// Contents of a `--config` file. Every key is optional; sections are
/// partial objects laid over the defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub card: Option<CardArg>,
    pub repetitions: Option<usize>,
    pub profile: Option<NoiseProfile>,
    pub modem: Option<Value>,
    pub attack: Option<Value>,
    pub classifier: Option<Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Flag, then config file, then `NFCJAMLAB_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// `base` with the keys of `top` laid over it, recursively for objects.
pub fn overlay(base: Value, top: Option<&Value>) -> Value {
    match (base, top) {
        (Value::Object(mut b), Some(Value::Object(t))) => {
            for (k, v) in t {
                let merged = overlay(b.remove(k).unwrap_or(Value::Null), Some(v));
                b.insert(k.clone(), merged);
            }
            Value::Object(b)
        }
        (_, Some(t)) => t.clone(),
        (b, None) => b,
    }
}

/// `base` with a partial JSON section laid over it.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, section: Option<&Value>, name: &str) -> CliResult<T> {
    let v = overlay(serde_json::to_value(base).map_err(|e| CliError::Usage(e.to_string()))?, section);
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{name} config: {e}")))
}

pub fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("config types serialize")
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Effective configuration after layering.
    pub config: Value,
    pub inputs: Vec<String>,
    /// Files written by the run, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> CliResult<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }
}

/// Collects the files of one run and finishes with its manifest. All
/// writes are atomic.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    /// Creates `dir` and removes artifacts of an earlier run whose names
    /// match `stale` prefixes, so the manifest describes the whole directory.
    pub fn create(dir: &Path, stale: &[&str]) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type()?.is_file() && stale.iter().any(|p| name.starts_with(p)) {
                fs::remove_file(entry.path())?;
            }
        }
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        io::write_atomic(&self.dir.join(name), bytes)?;
        self.files.push(name.to_owned());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_trace(&mut self, base: &str, trace: &MagnitudeTrace) -> CliResult<()> {
        io::write_trace(&self.dir.join(base), trace)?;
        self.files.push(format!("{base}.f32"));
        self.files.push(format!("{base}.json"));
        Ok(())
    }

    pub fn finish(mut self, command: &str, config: Value, inputs: Vec<String>) -> CliResult<()> {
        self.files.sort();
        let manifest = RunManifest {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config,
            inputs,
            outputs: std::mem::take(&mut self.files),
        };
        self.write_json(MANIFEST_FILE, &manifest)
    }
}

pub fn display(path: &Path) -> String {
    path.display().to_string()
}
