//! Brain tumor segmentation with a frozen densely connected encoder inside
//! a U-net, trained on 2.5D slices and fused across three planes.
//!
//! The crate is organized along the pipeline:
//!
//! * [`volumedata`]: NIfTI case directories, normalization, nested masks,
//!   synthetic phantom cases.
//! * [`sampling`]: three-slice stacks along any axis and epoch sampling.
//! * [`network`]: the two architecture variants on a small autograd engine.
//! * [`objective`], [`trainer`]: loss, optimizer, schedule, epoch loop.
//! * [`inference`], [`evaluation`]: tri-planar prediction and scoring.
//! * [`cli`]: configuration files and the command implementations behind
//!   the `tumorseg` binary.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod network;
pub mod objective;
pub mod sampling;
pub mod trainer;
pub mod volumedata;

pub use error::{Error, Result};

use std::path::Path;

/// Writes `bytes` to a hidden sibling file and renames it onto `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.partial"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
