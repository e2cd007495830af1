//! 2.5D inputs: three consecutive slices per modality along one axis,
//! fitted to the network's in-plane size, with the geometry needed to put
//! predictions back into the native grid.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::kernels::reflect_index;
use crate::network::{Scalar, Tensor};
use crate::volumedata::{label_membership, Grid, LabelMap, MultimodalVolume};

/// In-plane size expected by the pretrained encoder.
pub const NATIVE_SIZE: usize = 224;
pub const SAMPLES_PER_CASE: usize = 20;

/// Slicing direction. Axial slices are `z` planes with in-plane axes
/// `(x, y)`, coronal are `y` planes `(x, z)`, sagittal are `x` planes `(y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    /// Volume dimension the slice index runs along.
    pub fn normal(self) -> usize {
        match self {
            Axis::Axial => 2,
            Axis::Coronal => 1,
            Axis::Sagittal => 0,
        }
    }

    /// Volume dimensions spanning the slice, in (row, column) order.
    pub fn in_plane(self) -> [usize; 2] {
        match self {
            Axis::Axial => [0, 1],
            Axis::Coronal => [0, 2],
            Axis::Sagittal => [1, 2],
        }
    }

    pub fn extent(self, shape: [usize; 3]) -> usize {
        shape[self.normal()]
    }

    pub fn plane_shape(self, shape: [usize; 3]) -> [usize; 2] {
        let [r, c] = self.in_plane();
        [shape[r], shape[c]]
    }

    /// Volume coordinates of in-plane position `(u, v)` on slice `index`.
    #[inline]
    pub fn voxel(self, index: usize, u: usize, v: usize) -> [usize; 3] {
        match self {
            Axis::Axial => [u, v, index],
            Axis::Coronal => [u, index, v],
            Axis::Sagittal => [index, u, v],
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        })
    }
}

/// Mapping between one in-plane dimension of the network image and the
/// native slice: image position `i` shows native position `i + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimPlacement {
    pub native: usize,
    pub target: usize,
    pub offset: isize,
}

impl DimPlacement {
    /// Center crop when the native extent is larger, reflective pad otherwise
    /// (the extra pixel of an odd pad goes after).
    pub fn fit(native: usize, target: usize) -> Self {
        let offset = if native >= target { ((native - target) / 2) as isize } else { -(((target - native) / 2) as isize) };
        Self { native, target, offset }
    }

    /// Native coordinate of image position `i`, if it lies inside the slice.
    #[inline]
    pub fn inside(&self, i: usize) -> Option<usize> {
        let n = i as isize + self.offset;
        (n >= 0 && (n as usize) < self.native).then_some(n as usize)
    }

    /// Native coordinate of image position `i`, reflected at the borders.
    #[inline]
    pub fn reflected(&self, i: usize) -> usize {
        reflect_index(i as isize + self.offset, self.native)
    }

    /// (before, after) padding, zero when cropping.
    pub fn pads(&self) -> (usize, usize) {
        if self.native >= self.target {
            (0, 0)
        } else {
            let before = (-self.offset) as usize;
            (before, self.target - self.native - before)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub axis: Axis,
    pub index: usize,
    pub rows: DimPlacement,
    pub cols: DimPlacement,
}

impl Placement {
    pub fn new(shape: [usize; 3], axis: Axis, index: usize, size: [usize; 2]) -> Result<Self> {
        let extent = axis.extent(shape);
        if index >= extent {
            return Err(Error::IndexOutOfRange { index, extent });
        }
        let [h, w] = axis.plane_shape(shape);
        Ok(Self { axis, index, rows: DimPlacement::fit(h, size[0]), cols: DimPlacement::fit(w, size[1]) })
    }

    pub fn size(&self) -> [usize; 2] {
        [self.rows.target, self.cols.target]
    }
}

/// Network input for one position: `data` is (modality, slice, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub placement: Placement,
    pub modalities: usize,
    pub data: Vec<f32>,
}

impl SliceStack {
    /// Image of modality `m` as (3, H, W).
    pub fn modality(&self, m: usize) -> &[f32] {
        let [h, w] = self.placement.size();
        &self.data[m * 3 * h * w..(m + 1) * 3 * h * w]
    }
}

/// Center-slice targets: `data` is (class, H, W) with classes WT, TC, ET.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTarget {
    pub placement: Placement,
    pub data: Vec<f32>,
}

impl SliceTarget {
    pub fn class(&self, k: usize) -> &[f32] {
        let [h, w] = self.placement.size();
        &self.data[k * h * w..(k + 1) * h * w]
    }
}

/// Three slices `index-1, index, index+1` (reflected at the volume border)
/// of every modality, cropped or padded to `size`.
pub fn extract_stack(vol: &MultimodalVolume, axis: Axis, index: usize, size: [usize; 2]) -> Result<SliceStack> {
    let shape = vol.shape();
    let placement = Placement::new(shape, axis, index, size)?;
    let extent = axis.extent(shape);
    let [h, w] = size;
    let rows: Vec<usize> = (0..h).map(|i| placement.rows.reflected(i)).collect();
    let cols: Vec<usize> = (0..w).map(|j| placement.cols.reflected(j)).collect();
    let mut data = Vec::with_capacity(vol.modalities.len() * 3 * h * w);
    for grid in &vol.modalities {
        for c in 0..3 {
            let s = reflect_index(index as isize - 1 + c as isize, extent);
            for &u in &rows {
                for &v in &cols {
                    let [x, y, z] = axis.voxel(s, u, v);
                    data.push(grid.get(x, y, z));
                }
            }
        }
    }
    Ok(SliceStack { placement, modalities: vol.modalities.len(), data })
}

/// Nested masks of the center slice, with the same geometry as
/// [`extract_stack`] and zero outside the native slice.
pub fn extract_target(lm: &LabelMap, axis: Axis, index: usize, size: [usize; 2]) -> Result<SliceTarget> {
    let placement = Placement::new(lm.shape(), axis, index, size)?;
    let [h, w] = size;
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h {
        let Some(u) = placement.rows.inside(i) else { continue };
        for j in 0..w {
            let Some(v) = placement.cols.inside(j) else { continue };
            let [x, y, z] = axis.voxel(index, u, v);
            let member = label_membership(lm.labels.get(x, y, z));
            for k in 0..3 {
                if member[k] {
                    data[(k * h + i) * w + j] = 1.0;
                }
            }
        }
    }
    Ok(SliceTarget { placement, data })
}

/// Writes an (H, W) image back onto its native slice; positions outside the
/// native slice are dropped.
pub fn paste_back<T: Copy>(out: &mut Grid<T>, placement: &Placement, plane: &[T]) {
    let [h, w] = placement.size();
    assert_eq!(plane.len(), h * w, "plane does not match placement size");
    for i in 0..h {
        let Some(u) = placement.rows.inside(i) else { continue };
        for j in 0..w {
            let Some(v) = placement.cols.inside(j) else { continue };
            let [x, y, z] = placement.axis.voxel(placement.index, u, v);
            out.set(x, y, z, plane[i * w + j]);
        }
    }
}

/// A labeled case prepared for sampling.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub volume: MultimodalVolume,
    pub labels: LabelMap,
    /// Slice indices containing whole tumor, per [`Axis::ALL`] entry.
    tumor_slices: [Vec<usize>; 3],
}

impl TrainingCase {
    pub fn new(volume: MultimodalVolume, labels: LabelMap) -> Result<Self> {
        if volume.shape() != labels.shape() {
            return Err(Error::ShapeMismatch(format!(
                "case {}: volume {:?} vs labels {:?}",
                volume.case_id,
                volume.shape(),
                labels.shape()
            )));
        }
        let shape = labels.shape();
        let mut hits = [vec![false; shape[0]], vec![false; shape[1]], vec![false; shape[2]]];
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    if labels.labels.get(x, y, z) != 0 {
                        hits[0][x] = true;
                        hits[1][y] = true;
                        hits[2][z] = true;
                    }
                }
            }
        }
        let tumor_slices = Axis::ALL.map(|a| {
            let h = &hits[a.normal()];
            (0..h.len()).filter(|&i| h[i]).collect()
        });
        Ok(Self { volume, labels, tumor_slices })
    }

    pub fn tumor_slices(&self, axis: Axis) -> &[usize] {
        let i = Axis::ALL.iter().position(|&a| a == axis).expect("axis");
        &self.tumor_slices[i]
    }
}

/// One drawn training position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub case: usize,
    pub axis: Axis,
    pub index: usize,
}

/// Draws `per_case` positions for each case, in case order. Each draw picks
/// an axis uniformly, then with probability `tumor_bias` a tumor-containing
/// slice (any slice if there is none), else any slice.
pub fn plan_epoch<R: Rng>(cases: &[TrainingCase], rng: &mut R, per_case: usize, tumor_bias: f64) -> Vec<SampleRef> {
    let mut plan = Vec::with_capacity(cases.len() * per_case);
    for (ci, case) in cases.iter().enumerate() {
        let shape = case.volume.shape();
        for _ in 0..per_case {
            let axis = Axis::ALL[rng.random_range(0..3)];
            let biased = rng.random::<f64>() < tumor_bias;
            let tumor = case.tumor_slices(axis);
            let index = if biased && !tumor.is_empty() {
                tumor[rng.random_range(0..tumor.len())]
            } else {
                rng.random_range(0..axis.extent(shape))
            };
            plan.push(SampleRef { case: ci, axis, index });
        }
    }
    plan
}

pub fn materialize(cases: &[TrainingCase], s: &SampleRef, size: [usize; 2]) -> Result<(SliceStack, SliceTarget)> {
    let case = &cases[s.case];
    Ok((extract_stack(&case.volume, s.axis, s.index, size)?, extract_target(&case.labels, s.axis, s.index, size)?))
}

/// Twenty samples per case with the default 50 % tumor bias.
pub fn sample_epoch<R: Rng>(
    cases: &[TrainingCase],
    rng: &mut R,
    size: [usize; 2],
) -> Result<Vec<(SliceStack, SliceTarget)>> {
    plan_epoch(cases, rng, SAMPLES_PER_CASE, 0.5).iter().map(|s| materialize(cases, s, size)).collect()
}

/// Batches stacks into one (B, 3, H, W) tensor per modality.
pub fn stack_batch<T: Scalar>(stacks: &[&SliceStack]) -> Vec<Tensor<T>> {
    let first = stacks[0];
    let [h, w] = first.placement.size();
    (0..first.modalities)
        .map(|m| {
            let data = stacks.iter().flat_map(|s| s.modality(m).iter().map(|&v| T::from_f32(v))).collect();
            Tensor::from_vec(&[stacks.len(), 3, h, w], data)
        })
        .collect()
}

/// Batches targets into a (B, 3, H, W) tensor.
pub fn target_batch<T: Scalar>(targets: &[&SliceTarget]) -> Tensor<T> {
    let [h, w] = targets[0].placement.size();
    let data = targets.iter().flat_map(|t| t.data.iter().map(|&v| T::from_f32(v))).collect();
    Tensor::from_vec(&[targets.len(), 3, h, w], data)
}
