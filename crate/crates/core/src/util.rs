//! Small shared helpers: atomic file writes and pixel grid mapping.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path` via a temp file + rename so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    std::fs::rename(&tmp.0, path)?;
    Ok(())
}

fn tempfile_in(dir: &Path) -> Result<(std::path::PathBuf, std::fs::File)> {
    use std::time::{SystemTime, UNIX_EPOCH};
    let pid = std::process::id();
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    for attempt in 0..100u32 {
        let name = format!(".tmp-{pid}-{nanos}-{attempt}");
        let p = dir.join(name);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(f) => return Ok((p, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::AlreadyExists,
        "could not create temp file",
    )))
}

/// Map a normalized coordinate `u` in [0, 1] to a pixel index in `[0, n)`.
///
/// The continuous position is `u * n`; the pixel is the one whose half-open
/// cell `(i, i+1]` contains it, i.e. exact cell boundaries round down. 0 maps
/// to pixel 0 and 1 maps to pixel n-1. Out-of-range inputs clamp.
#[inline]
pub fn pixel_index(u: f64, n: usize) -> usize {
    debug_assert!(n > 0);
    let x = u * n as f64;
    let i = (x - 1.0).ceil();
    if i <= 0.0 {
        0
    } else if i >= (n - 1) as f64 {
        n - 1
    } else {
        i as usize
    }
}

/// Inverse-ish of [`pixel_index`]: center of pixel `i` in normalized coords.
#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}
