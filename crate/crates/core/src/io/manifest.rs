//! Run manifests: what was run, on which inputs, and what it produced.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::{read_file, write_atomic};
use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_file: String,
    pub config_sha256: String,
    pub forcing_sha256: Option<String>,
    pub forcing_rng: Option<String>,
    pub start_unix: f64,
    pub end_unix: f64,
    pub exit_status: i32,
    pub warnings: Vec<String>,
    /// `(file name, sha256)` of every output, in write order.
    pub outputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_file: "config.txt".to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            forcing_sha256: None,
            forcing_rng: None,
            start_unix: unix_now(),
            end_unix: 0.0,
            exit_status: 0,
            warnings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Records an output file that lives in `dir`.
    pub fn output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let h = sha256_file(&dir.join(name))?;
        self.outputs.push((name.to_string(), h));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &str| s.push_str(&format!("{k} = {v}\n"));
        kv("command", &self.command);
        kv("code_version", &self.code_version);
        kv("config_file", &self.config_file);
        kv("config_sha256", &self.config_sha256);
        if let Some(h) = &self.forcing_sha256 {
            kv("forcing_sha256", h);
        }
        if let Some(r) = &self.forcing_rng {
            kv("forcing_rng", r);
        }
        kv("start_unix", &format!("{:.3}", self.start_unix));
        kv("end_unix", &format!("{:.3}", self.end_unix));
        kv("exit_status", &self.exit_status.to_string());
        for w in &self.warnings {
            kv("warning", &w.replace('\n', " "));
        }
        for (name, h) in &self.outputs {
            kv("output", &format!("{name} {h}"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::new("", "");
        m.code_version.clear();
        m.config_sha256.clear();
        m.start_unix = 0.0;
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("manifest line {}: `{line}`", no + 1)))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("manifest line {}: bad number", no + 1)));
            match k {
                "command" => m.command = v.into(),
                "code_version" => m.code_version = v.into(),
                "config_file" => m.config_file = v.into(),
                "config_sha256" => m.config_sha256 = v.into(),
                "forcing_sha256" => m.forcing_sha256 = Some(v.into()),
                "forcing_rng" => m.forcing_rng = Some(v.into()),
                "start_unix" => m.start_unix = num(v)?,
                "end_unix" => m.end_unix = num(v)?,
                "exit_status" => m.exit_status = num(v)? as i32,
                "warning" => m.warnings.push(v.into()),
                "output" => {
                    let (name, h) = v
                        .rsplit_once(' ')
                        .ok_or_else(|| Error::Format(format!("manifest line {}: bad output entry", no + 1)))?;
                    m.outputs.push((name.into(), h.into()));
                }
                _ => return Err(Error::Format(format!("manifest line {}: unknown field `{k}`", no + 1))),
            }
        }
        Ok(m)
    }

    /// Stamps the end time and writes `manifest.txt` atomically into `dir`.
    pub fn finish(&mut self, dir: &Path, exit_status: i32) -> Result<()> {
        self.end_unix = unix_now();
        self.exit_status = exit_status;
        write_atomic(&dir.join("manifest.txt"), self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::parse(&String::from_utf8_lossy(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn text_round_trip() {
        let mut m = RunManifest::new("reference", "n = 8\n");
        m.forcing_sha256 = Some("00".into());
        m.warn("mu*dt = 0.9 exceeds 0.5");
        m.outputs.push(("energy.csv".into(), "ab".into()));
        m.end_unix = 12.5;
        m.start_unix = 10.25;
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn finish_writes_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("spectrum", "");
        m.finish(dir.path(), 0).unwrap();
        let back = RunManifest::load(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(back.command, "spectrum");
        assert!(!dir.path().join(".manifest.txt.tmp").exists());
    }
}
