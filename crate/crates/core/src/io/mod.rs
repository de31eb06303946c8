//! File formats: run configurations, checkpoints, datasets, and the
//! synthetic two-class texture generator.

mod checkpoint;
mod config;
mod dataset;
mod idx;
mod synth;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{Checkpoint, Entry, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use dataset::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC};
pub use idx::{decode_idx_pair, read_idx_pair};
pub use synth::{knn_accuracy, synthesize, SAMPLE_SHAPE};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling of `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("not a file path")))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
