use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use tempfile::NamedTempFile;

/// Configuration problems found before any stage runs.
#[derive(Debug)]
pub(crate) enum ConfigError {
    Invalid(String),
    MissingFile(String),
}

impl ConfigError {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            ConfigError::Invalid(_) => "config",
            ConfigError::MissingFile(_) => "missing-file",
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Invalid(m) => f.write_str(m),
            ConfigError::MissingFile(p) => write!(f, "input file {p} does not exist"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Opens `path` and parses it with `parse`, naming the file on failure.
pub(crate) fn read<T>(
    path: &Path,
    parse: impl FnOnce(BufReader<File>) -> fedkit::Result<T>,
) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Writes through a temporary file in the destination directory and
/// renames it into place, so a failed run never leaves a partial file.
pub(crate) fn write_atomic(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> fedkit::Result<()>,
) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    let mut out = BufWriter::new(tmp);
    write(&mut out).with_context(|| format!("writing {}", path.display()))?;
    let tmp = out
        .into_inner()
        .map_err(|e| e.into_error())
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
