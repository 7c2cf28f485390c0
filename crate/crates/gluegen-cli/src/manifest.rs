//! Run manifests: a JSON sidecar recording everything that determined a
//! command's outputs — the command, its resolved flags, the seed, and the
//! SHA-256 digest of every input file. Two runs with equal manifests produce
//! bit-equal artifacts, so a manifest is a reproducibility receipt.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use gluegen_core::{Error, Result};

/// One command's full provenance record.
#[derive(Serialize)]
pub struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    flags: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &'static str, seed: Option<u64>) -> Self {
        RunManifest {
            tool: "gluegen",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            flags: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    /// Record one resolved flag value.
    pub fn flag(&mut self, name: &str, value: impl Display) {
        self.flags.insert(name.to_string(), value.to_string());
    }

    /// Record an input file as the SHA-256 digest of its bytes.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), hex(&Sha256::digest(&bytes)));
        Ok(())
    }

    /// Write `<output>.manifest.json` next to an output file.
    pub fn write_alongside(&self, output: &Path) -> Result<()> {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        self.write(&output.with_file_name(name))
    }

    /// Write `run.manifest.json` inside an output directory.
    pub fn write_into(&self, dir: &Path) -> Result<()> {
        self.write(&dir.join("run.manifest.json"))
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_flags_seed_and_input_digests() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.bin");
        fs::write(&input, b"abc").unwrap();

        let mut m = RunManifest::new("train", Some(7));
        m.flag("lr", 1e-4);
        m.flag("steps", 100);
        m.input(&input).unwrap();
        m.write_into(dir.path()).unwrap();

        let text = fs::read_to_string(dir.path().join("run.manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["tool"], "gluegen");
        assert_eq!(v["command"], "train");
        assert_eq!(v["seed"], 7);
        assert_eq!(v["flags"]["lr"], "0.0001");
        assert_eq!(v["flags"]["steps"], "100");
        // SHA-256 of "abc", a fixed reference value.
        assert_eq!(
            v["inputs"][input.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn write_alongside_appends_the_manifest_suffix() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("records.gge");
        let m = RunManifest::new("gen-synth", Some(0));
        m.write_alongside(&out).unwrap();
        assert!(dir.path().join("records.gge.manifest.json").is_file());
    }
}
