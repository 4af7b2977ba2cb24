//! Process-wide record of files opened through the crate's readers, used to
//! prove that student training never touches the original training images.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

static LOG: Mutex<Vec<PathBuf>> = Mutex::new(Vec::new());

pub fn record(path: &Path) {
    if let Ok(mut log) = LOG.lock() {
        log.push(path.to_path_buf());
    }
}

/// Returns every path recorded since the last call and clears the log.
pub fn drain() -> Vec<PathBuf> {
    LOG.lock().map(|mut l| std::mem::take(&mut *l)).unwrap_or_default()
}

pub fn read(path: &Path) -> std::io::Result<Vec<u8>> {
    record(path);
    std::fs::read(path)
}

pub fn read_to_string(path: &Path) -> std::io::Result<String> {
    record(path);
    std::fs::read_to_string(path)
}
