//! Multimodal volumes, label maps and the nested tumor masks derived from them.

mod io;
mod phantom;

pub use io::{find_labels, load_case, read_grid, read_labels, save_case, write_grid, write_labels, CaseFiles};
pub use phantom::{generate_phantom, generate_phantom_with, PhantomParams, MIN_PHANTOM_EXTENT};

use crate::error::{Error, Result};

/// Modality order used everywhere: network inputs, files, and channels.
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// Legal label values: background, necrotic core, edema, enhancing tumor.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

/// Dense 3D grid indexed `(x, y, z)` with `z` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!("{} values for grid {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.offset(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.offset(x, y, z);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map<U: Copy, V: Copy>(&self, other: &Grid<U>, f: impl Fn(T, U) -> V) -> Result<Grid<V>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Grid { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Four co-registered modalities of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalVolume {
    pub case_id: String,
    /// In [`MODALITIES`] order.
    pub modalities: Vec<Grid<f32>>,
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
}

impl MultimodalVolume {
    pub fn new(case_id: impl Into<String>, modalities: Vec<Grid<f32>>, spacing: [f64; 3]) -> Result<Self> {
        if modalities.len() != MODALITIES.len() {
            return Err(Error::ShapeMismatch(format!("expected 4 modalities, got {}", modalities.len())));
        }
        let shape = modalities[0].shape();
        if let Some((i, m)) = modalities.iter().enumerate().find(|(_, m)| m.shape() != shape) {
            return Err(Error::ShapeMismatch(format!(
                "{} has shape {:?}, {} has {:?}",
                MODALITIES[i],
                m.shape(),
                MODALITIES[0],
                shape
            )));
        }
        Ok(Self { case_id: case_id.into(), modalities, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.modalities[0].shape()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub labels: Grid<u8>,
    pub spacing: [f64; 3],
}

impl LabelMap {
    pub fn new(labels: Grid<u8>, spacing: [f64; 3]) -> Result<Self> {
        if let Some(&v) = labels.data().iter().find(|v| !LABELS.contains(v)) {
            return Err(Error::IllegalLabel { value: v as f64 });
        }
        Ok(Self { labels, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.labels.shape()
    }
}

/// Whole tumor, tumor core and enhancing tumor; always `et ⊆ tc ⊆ wt`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelMasks {
    pub wt: Grid<bool>,
    pub tc: Grid<bool>,
    pub et: Grid<bool>,
}

impl MultiLabelMasks {
    /// Masks in head order (WT, TC, ET).
    pub fn as_array(&self) -> [&Grid<bool>; 3] {
        [&self.wt, &self.tc, &self.et]
    }

    pub fn is_nested(&self) -> bool {
        let implies = |a: &Grid<bool>, b: &Grid<bool>| a.data().iter().zip(b.data()).all(|(&x, &y)| !x || y);
        implies(&self.et, &self.tc) && implies(&self.tc, &self.wt)
    }
}

/// Per-voxel class membership for a single label value.
#[inline]
pub fn label_membership(label: u8) -> [bool; 3] {
    [matches!(label, 1 | 2 | 4), matches!(label, 1 | 4), label == 4]
}

pub fn labels_to_masks(lm: &LabelMap) -> MultiLabelMasks {
    MultiLabelMasks {
        wt: lm.labels.map(|l| label_membership(l)[0]),
        tc: lm.labels.map(|l| label_membership(l)[1]),
        et: lm.labels.map(|l| label_membership(l)[2]),
    }
}

/// Rebuilds labels from masks: et → 4, tc∖et → 1, wt∖tc → 2.
pub fn masks_to_labels(m: &MultiLabelMasks, spacing: [f64; 3]) -> Result<LabelMap> {
    let wt_tc = m.wt.zip_map(&m.tc, |w, t| (w, t))?;
    let labels = wt_tc.zip_map(&m.et, |(w, t), e| {
        if e {
            4
        } else if t {
            1
        } else if w {
            2
        } else {
            0
        }
    })?;
    Ok(LabelMap { labels, spacing })
}

/// Per-modality min-max rescaling to [0, 1]; constant modalities become zero.
pub fn normalize(vol: &MultimodalVolume) -> Result<MultimodalVolume> {
    let mut out = vol.clone();
    for (name, grid) in MODALITIES.iter().zip(out.modalities.iter_mut()) {
        normalize_grid(grid).map_err(|_| Error::NonFinite(format!("{} of {}", name, vol.case_id)))?;
    }
    Ok(out)
}

fn normalize_grid(grid: &mut Grid<f32>) -> std::result::Result<(), ()> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in grid.data() {
        if !v.is_finite() {
            return Err(());
        }
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let range = hi - lo;
    for v in grid.data_mut() {
        *v = if range > 0.0 { ((*v as f64 - lo) / range) as f32 } else { 0.0 };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn membership_table() {
        assert_eq!(label_membership(4), [true, true, true]);
        assert_eq!(label_membership(2), [true, false, false]);
        assert_eq!(label_membership(1), [true, true, false]);
        assert_eq!(label_membership(0), [false, false, false]);
    }

    #[test]
    fn normalize_rescales_and_zeroes_constants() {
        let ramp = Grid::from_vec([1, 1, 3], vec![0.0, 50.0, 100.0]).unwrap();
        let flat = Grid::filled([1, 1, 3], 7.0);
        let vol = MultimodalVolume::new("c", vec![ramp, flat.clone(), flat.clone(), flat], [1.0; 3]).unwrap();
        let n = normalize(&vol).unwrap();
        assert_eq!(n.modalities[0].data(), &[0.0, 0.5, 1.0]);
        assert_eq!(n.modalities[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_nan() {
        let bad = Grid::from_vec([1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        let ok = Grid::filled([1, 1, 2], 1.0);
        let vol = MultimodalVolume::new("c", vec![ok.clone(), ok.clone(), ok, bad], [1.0; 3]).unwrap();
        assert!(matches!(normalize(&vol), Err(Error::NonFinite(_))));
    }

    #[test]
    fn illegal_label_is_rejected() {
        let g = Grid::from_vec([1, 1, 2], vec![0, 3]).unwrap();
        assert!(matches!(LabelMap::new(g, [1.0; 3]), Err(Error::IllegalLabel { .. })));
    }
}
