//! Volumetric prediction: sweep every slice along each axis, average the
//! three planes, label by maximum probability, drop small components.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, Scalar};
use crate::sampling::{extract_stack, paste_back, stack_batch, Axis, SliceStack};
use crate::volumedata::{labels_to_masks, masks_to_labels, normalize, Grid, LabelMap, MultiLabelMasks, MultimodalVolume};

/// Anything that maps 2.5D stacks to center-slice class probabilities.
pub trait SlicePredictor: Sync {
    fn input_size(&self) -> [usize; 2];

    /// One (3, H, W) probability image per stack, classes WT, TC, ET.
    fn predict(&self, stacks: &[&SliceStack]) -> Result<Vec<Vec<f32>>>;

    /// Stacks per `predict` call.
    fn batch_size(&self) -> usize {
        8
    }
}

impl<T: Scalar> SlicePredictor for Model<T> {
    fn input_size(&self) -> [usize; 2] {
        self.config().input_size
    }

    fn predict(&self, stacks: &[&SliceStack]) -> Result<Vec<Vec<f32>>> {
        let inputs = stack_batch::<T>(stacks);
        let probs = Model::predict(self, &inputs)?;
        let per = probs.len() / stacks.len();
        Ok(probs.data().chunks(per).map(|c| c.iter().map(|v| v.as_f32()).collect()).collect())
    }
}

/// Per-class probability volumes in WT, TC, ET order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolumes {
    pub classes: [Grid<f32>; 3],
}

impl ProbabilityVolumes {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { classes: [0, 1, 2].map(|_| Grid::filled(shape, 0.0)) }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.classes[0].shape()
    }
}

/// Evaluates every slice along `axis` and pastes center-slice predictions
/// into full volumes. Voxels never covered by the network image stay 0.
pub fn predict_plane<P: SlicePredictor + ?Sized>(
    model: &P,
    vol: &MultimodalVolume,
    axis: Axis,
) -> Result<ProbabilityVolumes> {
    let shape = vol.shape();
    let size = model.input_size();
    let indices: Vec<usize> = (0..axis.extent(shape)).collect();
    let chunks: Vec<Vec<(SliceStack, Vec<f32>)>> = indices
        .par_chunks(model.batch_size().max(1))
        .map(|chunk| {
            let stacks: Vec<SliceStack> =
                chunk.iter().map(|&i| extract_stack(vol, axis, i, size)).collect::<Result<_>>()?;
            let refs: Vec<&SliceStack> = stacks.iter().collect();
            let probs = model.predict(&refs)?;
            if probs.len() != stacks.len() {
                return Err(Error::Network(format!("predictor returned {} maps for {} stacks", probs.len(), stacks.len())));
            }
            Ok(stacks.into_iter().zip(probs).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = ProbabilityVolumes::zeros(shape);
    let plane = size[0] * size[1];
    for (stack, probs) in chunks.into_iter().flatten() {
        if probs.len() != 3 * plane {
            return Err(Error::ShapeMismatch(format!("prediction of {} values, expected {}", probs.len(), 3 * plane)));
        }
        for (k, grid) in out.classes.iter_mut().enumerate() {
            paste_back(grid, &stack.placement, &probs[k * plane..(k + 1) * plane]);
        }
    }
    Ok(out)
}

/// Voxelwise mean of the three plane predictions.
pub fn fuse_planes(a: &ProbabilityVolumes, b: &ProbabilityVolumes, c: &ProbabilityVolumes) -> Result<ProbabilityVolumes> {
    if a.shape() != b.shape() || a.shape() != c.shape() {
        return Err(Error::ShapeMismatch(format!("{:?}, {:?}, {:?}", a.shape(), b.shape(), c.shape())));
    }
    let classes = [0, 1, 2].map(|k| {
        let (x, y, z) = (a.classes[k].data(), b.classes[k].data(), c.classes[k].data());
        let data = (0..x.len())
            .map(|i| {
                // sorted summation keeps the result independent of argument order
                let mut v = [x[i] as f64, y[i] as f64, z[i] as f64];
                v.sort_by(f64::total_cmp);
                ((v[0] + v[1] + v[2]) / 3.0) as f32
            })
            .collect();
        Grid::from_vec(a.shape(), data).expect("same shape")
    });
    Ok(ProbabilityVolumes { classes })
}

/// Label of one voxel: background below `threshold`, otherwise the most
/// probable class, ties going to the more specific class.
#[inline]
pub fn voxel_label(wt: f32, tc: f32, et: f32, threshold: f32) -> u8 {
    if wt.max(tc).max(et) < threshold {
        0
    } else if et >= tc && et >= wt {
        4
    } else if tc >= wt {
        1
    } else {
        2
    }
}

pub fn assign_labels(pv: &ProbabilityVolumes, threshold: f32, spacing: [f64; 3]) -> LabelMap {
    let [w, t, e] = &pv.classes;
    let data = (0..w.len()).map(|i| voxel_label(w.data()[i], t.data()[i], e.data()[i], threshold)).collect();
    LabelMap { labels: Grid::from_vec(pv.shape(), data).expect("same shape"), spacing }
}

/// Voxel adjacency used for component labeling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Faces = 6,
    Edges = 18,
    Corners = 26,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            6 => Some(Self::Faces),
            18 => Some(Self::Edges),
            26 => Some(Self::Corners),
            _ => None,
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let nonzero = (dx != 0) as usize + (dy != 0) as usize + (dz != 0) as usize;
                    let ok = match self {
                        Self::Faces => nonzero == 1,
                        Self::Edges => (1..=2).contains(&nonzero),
                        Self::Corners => nonzero >= 1,
                    };
                    if ok {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Component id per voxel (0 = background, ids from 1 in scan order) and
/// the size of each component (`sizes[id - 1]`).
pub fn label_components(mask: &Grid<bool>, connectivity: Connectivity) -> (Grid<u32>, Vec<usize>) {
    let shape = mask.shape();
    let offsets = connectivity.offsets();
    let mut ids = Grid::filled(shape, 0u32);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask.data()[start] || ids.data()[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        ids.data_mut()[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let z = i % shape[2];
            let y = (i / shape[2]) % shape[1];
            let x = i / (shape[1] * shape[2]);
            for d in &offsets {
                let (nx, ny, nz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if nx >= shape[0] || ny >= shape[1] || nz >= shape[2] {
                    continue;
                }
                let j = ids.offset(nx, ny, nz);
                if mask.data()[j] && ids.data()[j] == 0 {
                    ids.data_mut()[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Clears components with fewer than `min_size` voxels.
pub fn filter_mask(mask: &Grid<bool>, min_size: usize, connectivity: Connectivity) -> Grid<bool> {
    let (ids, sizes) = label_components(mask, connectivity);
    ids.map(|id| id != 0 && sizes[id as usize - 1] >= min_size)
}

/// Filters each nested mask independently, then restores nesting by
/// intersection before rebuilding labels.
pub fn remove_small_components(lm: &LabelMap, min_size: usize, connectivity: Connectivity) -> LabelMap {
    let m = labels_to_masks(lm);
    let wt = filter_mask(&m.wt, min_size, connectivity);
    let and = |a: &Grid<bool>, b: &Grid<bool>| a.zip_map(b, |x, y| x && y).expect("same shape");
    let tc = and(&filter_mask(&m.tc, min_size, connectivity), &wt);
    let et = and(&filter_mask(&m.et, min_size, connectivity), &tc);
    masks_to_labels(&MultiLabelMasks { wt, tc, et }, lm.spacing).expect("same shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub threshold: f32,
    pub min_component_size: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { threshold: 0.5, min_component_size: 100, connectivity: Connectivity::Corners }
    }
}

/// Result of [`segment_volume`].
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub probabilities: ProbabilityVolumes,
}

/// Tri-planar prediction, fusion, labeling and component filtering.
/// The volume is min-max normalized first (a no-op if it already is).
pub fn segment_volume<P: SlicePredictor + ?Sized>(
    model: &P,
    vol: &MultimodalVolume,
    post: &PostprocessConfig,
) -> Result<Segmentation> {
    let vol = normalize(vol)?;
    let planes: Vec<ProbabilityVolumes> =
        Axis::ALL.iter().map(|&a| predict_plane(model, &vol, a)).collect::<Result<_>>()?;
    let fused = fuse_planes(&planes[0], &planes[1], &planes[2])?;
    let raw = assign_labels(&fused, post.threshold, vol.spacing);
    let labels = remove_small_components(&raw, post.min_component_size, post.connectivity);
    Ok(Segmentation { labels, probabilities: fused })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeling_rules() {
        assert_eq!(voxel_label(0.9, 0.2, 0.1, 0.5), 2);
        assert_eq!(voxel_label(0.3, 0.2, 0.1, 0.5), 0);
        assert_eq!(voxel_label(0.6, 0.7, 0.9, 0.5), 4);
        assert_eq!(voxel_label(0.7, 0.7, 0.2, 0.5), 1);
        assert_eq!(voxel_label(0.7, 0.7, 0.7, 0.5), 4);
    }

    #[test]
    fn neighborhood_sizes() {
        assert_eq!(Connectivity::Faces.offsets().len(), 6);
        assert_eq!(Connectivity::Edges.offsets().len(), 18);
        assert_eq!(Connectivity::Corners.offsets().len(), 26);
    }

    #[test]
    fn diagonal_voxels_join_only_under_corner_connectivity() {
        let mut m = Grid::filled([3, 3, 3], false);
        m.set(0, 0, 0, true);
        m.set(1, 1, 1, true);
        assert_eq!(label_components(&m, Connectivity::Corners).1, vec![2]);
        assert_eq!(label_components(&m, Connectivity::Edges).1, vec![1, 1]);
    }
}
