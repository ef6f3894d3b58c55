//! Minimal binary PGM (P5, 8-bit) writing.

use std::fs;
use std::path::Path;

use crate::error::Result;

/// Write `data` (row-major, `height` rows of `width` bytes) as P5 PGM
/// with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes)?;
    Ok(())
}
