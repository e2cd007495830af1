//! NIfTI-1 reading and writing for case directories.
//!
//! A case directory holds `<case>_t1.nii`, `<case>_t1ce.nii`, `<case>_t2.nii`,
//! `<case>_flair.nii` and optionally `<case>_seg.nii` (`.nii.gz` accepted).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{Grid, LabelMap, MultimodalVolume, LABELS, MODALITIES};
use crate::error::{Error, Result};

pub const LABEL_SUFFIX: &str = "seg";

/// Files discovered in a case directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseFiles {
    pub case_id: String,
    pub modalities: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
}

fn volume_err(path: &Path, message: impl ToString) -> Error {
    Error::Volume { path: path.to_path_buf(), message: message.to_string() }
}

fn strip_nifti_ext(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn has_suffix(name: &str, key: &str) -> bool {
    match strip_nifti_ext(name) {
        Some(stem) => stem == key || stem.ends_with(&format!("_{key}")),
        None => false,
    }
}

impl CaseFiles {
    pub fn discover(dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let find = |key: &str| names.iter().find(|n| has_suffix(n, key)).map(|n| dir.join(n));
        let mut modalities = Vec::with_capacity(MODALITIES.len());
        for m in MODALITIES {
            match find(m) {
                Some(p) => modalities.push(p),
                None => return Err(Error::MissingModality { modality: m.to_string(), dir: dir.to_path_buf() }),
            }
        }
        let case_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "case".into());
        Ok(Self { case_id, modalities, labels: find(LABEL_SUFFIX) })
    }
}

/// The label map of a case directory, if there is one.
pub fn find_labels(dir: &Path) -> Result<Option<PathBuf>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| has_suffix(n, LABEL_SUFFIX))
        .collect();
    names.sort();
    Ok(names.first().map(|n| dir.join(n)))
}

/// Reads a 3D scalar volume as float32 together with its voxel spacing
/// and header description.
pub fn read_grid(path: &Path) -> Result<(Grid<f32>, [f64; 3], String)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| volume_err(path, e))?;
    let header = obj.header().clone();
    let array = obj.into_volume().into_ndarray::<f32>().map_err(|e| volume_err(path, e))?;
    let shape = array.shape().to_vec();
    let array = match shape.len() {
        3 => array,
        4 if shape[3] == 1 => array.index_axis_move(ndarray::Axis(3), 0),
        _ => return Err(volume_err(path, format!("expected a 3D volume, got shape {shape:?}"))),
    };
    let array = array.into_dimensionality::<Ix3>().map_err(|e| volume_err(path, e))?;
    let dims = array.dim();
    let data: Vec<f32> = array.iter().copied().collect();
    let grid = Grid::from_vec([dims.0, dims.1, dims.2], data)?;
    let spacing = [1, 2, 3].map(|i| {
        let s = header.pixdim[i] as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let descrip = String::from_utf8_lossy(&header.descrip).trim_end_matches('\0').trim().to_string();
    Ok((grid, spacing, descrip))
}

/// Reads a label volume, rejecting values outside {0, 1, 2, 4}.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (grid, spacing, _) = read_grid(path)?;
    if let Some(&v) = grid.data().iter().find(|&&v| !LABELS.iter().any(|&l| l as f32 == v)) {
        return Err(Error::IllegalLabel { value: v as f64 });
    }
    LabelMap::new(grid.map(|v| v as u8), spacing)
}

fn header(spacing: [f64; 3], description: &str) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim[1] = spacing[0] as f32;
    h.pixdim[2] = spacing[1] as f32;
    h.pixdim[3] = spacing[2] as f32;
    h.xyzt_units = 2; // millimetres
    let mut bytes: Vec<u8> = description.bytes().take(79).collect();
    bytes.resize(80, 0);
    h.descrip = bytes;
    h
}

static TEMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

/// Runs `write` against a hidden sibling path, then renames onto `path`.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> nifti::Result<()>) -> Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = if name.ends_with(".nii.gz") { ".nii.gz" } else { ".nii" };
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = parent.join(format!(".partial-{}-{n}{ext}", std::process::id()));
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(volume_err(path, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes a float32 volume.
pub fn write_grid(path: &Path, grid: &Grid<f32>, spacing: [f64; 3], description: &str) -> Result<()> {
    let [x, y, z] = grid.shape();
    let array = Array3::from_shape_vec((x, y, z), grid.data().to_vec()).map_err(|e| volume_err(path, e))?;
    let h = header(spacing, description);
    write_atomic(path, |tmp| WriterOptions::new(tmp).reference_header(&h).write_nifti(&array))
}

/// Writes a uint8 label volume.
pub fn write_labels(path: &Path, lm: &LabelMap, description: &str) -> Result<()> {
    let [x, y, z] = lm.shape();
    let array = Array3::from_shape_vec((x, y, z), lm.labels.data().to_vec()).map_err(|e| volume_err(path, e))?;
    let h = header(lm.spacing, description);
    write_atomic(path, |tmp| WriterOptions::new(tmp).reference_header(&h).write_nifti(&array))
}

/// Loads a case directory; the label map is returned when present.
pub fn load_case(dir: &Path) -> Result<(MultimodalVolume, Option<LabelMap>)> {
    let files = CaseFiles::discover(dir)?;
    let mut grids = Vec::with_capacity(MODALITIES.len());
    let mut spacing: Option<[f64; 3]> = None;
    for (m, path) in MODALITIES.iter().zip(&files.modalities) {
        let (g, s, _) = read_grid(path)?;
        if let Some(first) = spacing {
            if first != s {
                return Err(Error::ShapeMismatch(format!("{m} spacing {s:?} differs from {first:?}")));
            }
        }
        spacing = Some(s);
        grids.push(g);
    }
    let spacing = spacing.expect("four modalities");
    let vol = MultimodalVolume::new(files.case_id, grids, spacing)?;
    let labels = match &files.labels {
        Some(p) => {
            let lm = read_labels(p)?;
            if lm.shape() != vol.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "label map {:?} vs volume {:?}",
                    lm.shape(),
                    vol.shape()
                )));
            }
            Some(lm)
        }
        None => None,
    };
    Ok((vol, labels))
}

/// Writes a case directory (`<dir>/<case>_<modality>.nii`, `<case>_seg.nii`).
/// `description` is stored in every header.
pub fn save_case(dir: &Path, vol: &MultimodalVolume, labels: Option<&LabelMap>, description: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (m, grid) in MODALITIES.iter().zip(&vol.modalities) {
        write_grid(&dir.join(format!("{}_{m}.nii", vol.case_id)), grid, vol.spacing, description)?;
    }
    if let Some(lm) = labels {
        write_labels(&dir.join(format!("{}_{LABEL_SUFFIX}.nii", vol.case_id)), lm, description)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_matching_distinguishes_t1_from_t1ce() {
        assert!(has_suffix("case_t1.nii", "t1"));
        assert!(!has_suffix("case_t1ce.nii", "t1"));
        assert!(has_suffix("case_t1ce.nii.gz", "t1ce"));
        assert!(has_suffix("flair.nii", "flair"));
        assert!(!has_suffix("case_flair.txt", "flair"));
    }
}
