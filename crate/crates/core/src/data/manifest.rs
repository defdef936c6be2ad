//! JSON-lines image/caption manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Captions need at least this many alphanumeric characters.
pub const MIN_CAPTION_CHARS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Resolved against the manifest's directory.
    pub image_path: PathBuf,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Lines dropped because the caption was too short.
    pub dropped_captions: usize,
    /// Lines dropped because the image file does not exist.
    pub missing_images: usize,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records tagged with `split`; untagged records belong to every split.
    pub fn split(&self, split: &str) -> Manifest {
        let records = self.records.iter().filter(|r| r.split.as_deref().is_none_or(|s| s == split)).cloned().collect();
        Manifest { records, ..self.clone() }
    }
}

pub fn valid_caption(caption: &str) -> bool {
    caption.chars().filter(|c| c.is_alphanumeric()).count() >= MIN_CAPTION_CHARS
}

/// Reads one `{"image_path", "caption"}` object per line. Blank lines are
/// skipped; short captions and missing images are dropped and counted.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut m = Manifest::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !valid_caption(&rec.caption) {
            m.dropped_captions += 1;
            continue;
        }
        rec.image_path = base.join(&rec.image_path);
        if !rec.image_path.exists() {
            log::warn!("{}:{}: image {} not found, skipping", path.display(), i + 1, rec.image_path.display());
            m.missing_images += 1;
            continue;
        }
        m.records.push(rec);
    }
    if m.dropped_captions > 0 {
        log::info!("{}: dropped {} records with short captions", path.display(), m.dropped_captions);
    }
    Ok(m)
}

/// Writes records as JSON lines; paths are written as given.
pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
