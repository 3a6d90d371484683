//! Artifact files: hash-stamped JSON envelopes, the manifest and the run log.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Wrapper written around every JSON model and report.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub kind: String,
    pub config_hash: String,
    /// Fingerprint of the corpus the artifact was derived from, when there is one.
    pub corpus_hash: Option<String>,
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_hash: String,
}

pub const MANIFEST: &str = "manifest.json";
pub const RUN_LOG: &str = "run.log";

pub struct OutputDir {
    root: PathBuf,
    command: String,
    config_hash: String,
    written: Vec<String>,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, config_hash: &str) -> Result<Self, Failure> {
        fs::create_dir_all(root).map_err(|e| io_failure(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            command: command.to_owned(),
            config_hash: config_hash.to_owned(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Files written so far by this command.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| io_failure(&path, e))?;
        self.written.push(name.to_owned());
        Ok(path)
    }

    pub fn write_envelope<T: Serialize>(
        &mut self,
        name: &str,
        kind: &str,
        corpus_hash: Option<String>,
        body: T,
    ) -> Result<PathBuf, Failure> {
        let env = Envelope {
            kind: kind.to_owned(),
            config_hash: self.config_hash.clone(),
            corpus_hash,
            body,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Records this command's files in the manifest, keeping older entries.
    pub fn finish_manifest(&self) -> Result<(), Failure> {
        let path = self.path(MANIFEST);
        let mut manifest: BTreeMap<String, ManifestEntry> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        for name in &self.written {
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    command: self.command.clone(),
                    config_hash: self.config_hash.clone(),
                },
            );
        }
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_failure(&path, e))
    }

    /// Appends one timestamped line; the only place wall-clock time is recorded.
    pub fn log(&self, status: &str) {
        let path = self.path(RUN_LOG);
        let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&path) {
            let _ = writeln!(
                f,
                "{stamp} {} config_hash={} {status}",
                self.command, self.config_hash
            );
        }
    }
}

pub fn read_envelope<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Envelope<T>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new("missing_artifact", format!("{}: {e}", path.display())))?;
    let env: Envelope<T> = serde_json::from_str(&text)
        .map_err(|e| Failure::new("bad_artifact", format!("{}: {e}", path.display())))?;
    if env.kind != kind {
        return Err(Failure::new(
            "bad_artifact",
            format!(
                "{}: expected a {kind} artifact, found {}",
                path.display(),
                env.kind
            ),
        ));
    }
    Ok(env)
}
