//! Output files: content hashes, column-contract checks, the manifest and
//! the FAILED marker.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const FAILED: &str = "FAILED";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash in the style of git objects: `sha256("blob <len>\0" ‖ body)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// How the columns of a CSV are checked after writing.
#[derive(Debug, Clone, Copy)]
pub enum Columns<'a> {
    Exact(&'a str),
    /// Header begins with this prefix; the rest is dimension dependent.
    Prefix(&'a str),
    /// Exact header whose column at this index holds free text.
    WithText(&'a str, usize),
}

/// Header match, equal field counts and numeric fields on every data row.
/// Lines starting with `#` are comments.
pub fn check_csv(name: &str, body: &str, columns: Columns<'_>) -> Result<()> {
    let fail = |reason: String| {
        Err(CliError::Schema {
            file: name.to_string(),
            reason,
        })
    };
    let mut lines = body.lines().filter(|l| !l.starts_with('#'));
    let Some(header) = lines.next() else {
        return fail("missing header".into());
    };
    let (ok, text_col) = match columns {
        Columns::Exact(h) => (header == h, None),
        Columns::Prefix(p) => (header.starts_with(p), None),
        Columns::WithText(h, k) => (header == h, Some(k)),
    };
    if !ok {
        return fail(format!("unexpected header {header:?}"));
    }
    let width = header.split(',').count();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return fail(format!("row {k} has {} fields, header has {width}", fields.len()));
        }
        let numeric = fields.iter().enumerate().filter(|(j, _)| Some(*j) != text_col);
        if let Some((_, f)) = numeric.clone().find(|(_, f)| f.trim().parse::<f64>().is_err()) {
            return fail(format!("row {k} has non-numeric field {f:?}"));
        }
    }
    Ok(())
}

/// Files written into one output directory, with their content hashes.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Artifacts {
    /// Creates `dir` and clears a FAILED marker left by an earlier attempt.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let marker = dir.join(FAILED);
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| CliError::io(&marker, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(name.to_string(), content_hash(bytes));
        Ok(())
    }

    /// Renders with `f`, checks the column contract, then writes.
    pub fn write_csv(
        &mut self,
        name: &str,
        columns: Columns<'_>,
        f: impl FnOnce(&mut Vec<u8>) -> dissflow_core::Result<()>,
    ) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        let text = String::from_utf8(buf).map_err(|e| CliError::Schema {
            file: name.to_string(),
            reason: e.to_string(),
        })?;
        check_csv(name, &text, columns)?;
        self.write_bytes(name, text.as_bytes())
    }

    /// Records a file written by a child run so the parent manifest covers it.
    pub fn adopt(&mut self, name: String, hash: String) {
        self.files.insert(name, hash);
    }

    /// Leaves a FAILED marker naming the error; partial outputs stay.
    pub fn mark_failed(&self, err: &CliError) {
        let _ = fs::write(self.dir.join(FAILED), format!("{err}\nexit_code={}\n", err.exit_code()));
    }

    /// Writes `manifest.toml`: tool version, config echo, config hash and
    /// the content hash of every file.
    pub fn finish<C: Serialize>(&mut self, command: &str, config: &C, extra: BTreeMap<String, String>) -> Result<String> {
        let echo = toml::to_string(config).map_err(|e| CliError::Config(e.to_string()))?;
        let config_hash = sha256_hex(echo.as_bytes());
        let manifest = Manifest {
            tool: format!("dissflow {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config_hash: config_hash.clone(),
            results: extra,
            files: self.files.clone(),
            config: toml::from_str::<toml::Table>(&echo).map_err(|e| CliError::Config(e.to_string()))?,
        };
        let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(config_hash)
    }
}

#[derive(Serialize)]
struct Manifest {
    tool: String,
    command: String,
    config_hash: String,
    results: BTreeMap<String, String>,
    files: BTreeMap<String, String>,
    config: toml::Table,
}

/// Hash of the resolved config, as recorded in trajectory headers.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    sha256_hex(toml::to_string(config).expect("config serializes").as_bytes())
}
