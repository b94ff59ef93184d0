use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use absa_cd::codec::{read_jsonl, write_jsonl};
use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Write via a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, contents: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        contents(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_records<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, |w| Ok(write_jsonl(w, items)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// One structured diagnostic line on standard error.
pub fn emit(stage: &str, id: &str, detail: impl Serialize) {
    let line = serde_json::json!({"stage": stage, "id": id, "detail": detail});
    eprintln!("{line}");
}

/// Provenance file written next to an output: `<out>.run.json`.
pub fn provenance_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    out.with_file_name(name)
}
