//! JSON inputs and atomically written outputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::planner::PlannerConfig;
use crate::sim::Scenario;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Reads and deserializes a JSON file. Syntax and schema problems both
/// come back as [`Error::Parse`] naming the file.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let s: Scenario = load_json(path)?;
    s.validate()?;
    Ok(s)
}

pub fn load_config(path: &Path) -> Result<PlannerConfig> {
    let c: PlannerConfig = load_json(path)?;
    c.validate()?;
    Ok(c)
}

/// Writes `path` through a temporary file in the same directory that is
/// renamed into place once `fill` succeeds. A failed or interrupted write
/// leaves any previous file untouched.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Pretty-printed JSON, written atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
        w.write_all(b"\n").map_err(io_err(path))
    })
}

/// Maps a CSV writer error onto [`Error::Io`] for `path`.
pub fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e.into() }
}
