//! Small helpers for atomic file writes.

use std::path::{Path, PathBuf};

/// A temporary sibling path in the same directory, so the final rename
/// stays on one filesystem.
pub fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    name.push(format!(".tmp.{}", std::process::id()));
    path.with_file_name(name)
}
