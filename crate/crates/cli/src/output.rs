use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Rejected,
}

impl Status {
    pub fn from_accept(accept: bool) -> Self {
        if accept {
            Status::Ok
        } else {
            Status::Rejected
        }
    }
}

/// Where results go: human text or JSON on stdout, artifacts in `--out`.
pub struct Output {
    json: bool,
    dir: Option<PathBuf>,
}

impl Output {
    pub fn new(json: bool, dir: Option<PathBuf>) -> anyhow::Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(Self { json, dir })
    }

    pub fn human(&self, text: impl AsRef<str>) {
        if !self.json {
            stdout_line(text.as_ref());
        }
    }

    /// JSON summary: printed with `--json`, saved as `<name>.json` in `--out`.
    pub fn summary(&self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        if self.json {
            stdout_line(&text);
        }
        self.artifact(&format!("{name}.json"), text.as_bytes())
    }

    /// Writes a file into `--out`; a no-op without it.
    pub fn artifact(&self, file: &str, bytes: &[u8]) -> anyhow::Result<()> {
        if let Some(d) = &self.dir {
            write(&d.join(file), bytes)?;
        }
        Ok(())
    }
}

/// Ignores a closed stdout, e.g. when piped into `head`.
fn stdout_line(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

pub fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    serde_json::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_hex32(s: &str) -> anyhow::Result<[u8; 32]> {
    let v = hex::decode(s.trim()).context("expected hex")?;
    v.try_into()
        .map_err(|v: Vec<u8>| anyhow::anyhow!("expected 32 bytes, got {}", v.len()))
}
