//! Config loading, the exit-code contract and small output helpers.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::Common;

pub const USAGE: u8 = 1;
pub const RUNTIME: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
    pub diagnostics: Option<PathBuf>,
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Self {
            code: USAGE,
            error: anyhow::anyhow!("{msg}"),
            diagnostics: None,
        }
    }

    pub fn runtime(error: anyhow::Error) -> Self {
        Self {
            code: RUNTIME,
            error,
            diagnostics: None,
        }
    }
}

/// Library errors after validation: a missing input file or a config that
/// does not fit the data is a usage error, everything else is a runtime error.
impl From<meshrecon::Error> for Failure {
    fn from(e: meshrecon::Error) -> Self {
        match &e {
            meshrecon::Error::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Self {
                code: USAGE,
                error: e.into(),
                diagnostics: None,
            },
            meshrecon::Error::Config(_) | meshrecon::Error::BatchTooSmall => Self::usage(e),
            meshrecon::Error::NonFinite { dump, .. } => Self {
                code: RUNTIME,
                diagnostics: Some(dump.clone()),
                error: e.into(),
            },
            _ => Self::runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime(e.into())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Reads the JSON config (or the defaults), rejecting unknown keys.
pub fn load<T: DeserializeOwned + Default>(common: &Common) -> Outcome<T> {
    match &common.config {
        None => Ok(T::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
        }
    }
}

/// Validation failures before any work are usage errors.
pub fn validated<T>(r: meshrecon::Result<T>) -> Outcome<T> {
    r.map_err(Failure::usage)
}

pub fn require_file(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("no such file: {}", path.display())))
    }
}

pub fn require_dir(path: &Path) -> Outcome {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::usage(format!("no such directory: {}", path.display())))
    }
}

/// Prints the resolved config when asked; returns true if the caller
/// should stop there.
pub fn print_if_asked<T: Serialize>(common: &Common, cfg: &T) -> Outcome<bool> {
    if common.print_config {
        emit(&(serde_json::to_string_pretty(cfg)? + "\n"))?;
    }
    Ok(common.print_config)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Outcome {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn out_dir(common: &Common) -> Outcome<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| Failure::usage("--out is required"))?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::runtime(anyhow::anyhow!("{}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::runtime(anyhow::anyhow!("{}: {e}", path.display())))
}

/// Prints the summary and keeps a copy next to the outputs.
pub fn summarize(dir: Option<&Path>, lines: &[String]) -> Outcome {
    let text = lines.join("\n") + "\n";
    emit(&text)?;
    if let Some(d) = dir {
        write_text(&d.join("summary.txt"), &text)?;
    }
    Ok(())
}
