//! Synthetic cases: a smooth-noise "brain" with three nested ellipsoids
//! (edema ⊇ core ⊇ enhancing) and modality contrasts that make each region
//! visible in the sequences where it is visible clinically.

use std::f64::consts::PI;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Grid, LabelMap, MultimodalVolume};
use crate::error::{Error, Result};

pub const MIN_PHANTOM_EXTENT: usize = 32;

/// Geometry and contrast knobs of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    /// Whole-tumor semi-axes as fractions of the extent along each axis.
    pub wt_radius: (f64, f64),
    /// Core semi-axes relative to whole tumor.
    pub tc_scale: (f64, f64),
    /// Enhancing semi-axes relative to core.
    pub et_scale: (f64, f64),
    /// Brain semi-axes as fractions of the extent.
    pub brain_radius: f64,
    pub noise_amplitude: f64,
    pub white_noise: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            wt_radius: (0.18, 0.26),
            tc_scale: (0.6, 0.8),
            et_scale: (0.55, 0.75),
            brain_radius: 0.42,
            noise_amplitude: 0.08,
            white_noise: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>() <= 1.0
    }

    /// A scaled copy with a random offset small enough to stay inside `self`.
    fn nested(&self, rng: &mut ChaCha8Rng, scale: (f64, f64)) -> Ellipsoid {
        let s = rng.random_range(scale.0..scale.1);
        // ‖d/r‖ ≤ (1 − s)/2 guarantees containment for axis-aligned ellipsoids.
        let budget = (1.0 - s) / 2.0 / 3f64.sqrt();
        let center = [0, 1, 2].map(|i| self.center[i] + rng.random_range(-budget..budget) * self.radii[i]);
        Ellipsoid { center, radii: self.radii.map(|r| r * s) }
    }
}

/// Sum of random low-frequency cosines, scaled to roughly unit amplitude.
struct SmoothNoise {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothNoise {
    fn new(rng: &mut ChaCha8Rng, shape: [usize; 3], count: usize) -> Self {
        let waves = (0..count)
            .map(|_| {
                let k = [0, 1, 2].map(|i| rng.random_range(-3.0..3.0) * 2.0 * PI / shape[i] as f64);
                (k, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self.waves.iter().map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos()).sum();
        s / (self.waves.len() as f64).sqrt()
    }
}

/// Deterministic phantom case for `seed`.
pub fn generate_phantom(seed: u64, shape: [usize; 3], spacing: [f64; 3]) -> Result<(MultimodalVolume, LabelMap)> {
    generate_phantom_with(seed, shape, spacing, &PhantomParams::default())
}

pub fn generate_phantom_with(
    seed: u64,
    shape: [usize; 3],
    spacing: [f64; 3],
    params: &PhantomParams,
) -> Result<(MultimodalVolume, LabelMap)> {
    if shape.iter().any(|&s| s < MIN_PHANTOM_EXTENT) {
        return Err(Error::ShapeTooSmall(format!(
            "phantom shape {shape:?} needs at least {MIN_PHANTOM_EXTENT} voxels per axis"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = shape.map(|s| s as f64);
    let mid = ext.map(|e| (e - 1.0) / 2.0);
    let brain = Ellipsoid { center: mid, radii: ext.map(|e| e * params.brain_radius) };

    let radii = [0, 1, 2].map(|i| rng.random_range(params.wt_radius.0..params.wt_radius.1) * ext[i]);
    // Keep the whole tumor inside the central part of the brain.
    let center = [0, 1, 2].map(|i| {
        let slack = (brain.radii[i] * 0.9 - radii[i]).max(0.0) * 0.5;
        mid[i] + rng.random_range(-slack..=slack)
    });
    let wt = Ellipsoid { center, radii };
    let tc = wt.nested(&mut rng, params.tc_scale);
    let et = tc.nested(&mut rng, params.et_scale);

    let anatomy = SmoothNoise::new(&mut rng, shape, 8);
    let texture: Vec<SmoothNoise> = (0..4).map(|_| SmoothNoise::new(&mut rng, shape, 6)).collect();

    let [nx, ny, nz] = shape;
    let mut labels = Grid::filled(shape, 0u8);
    let mut grids: Vec<Grid<f32>> = (0..4).map(|_| Grid::filled(shape, 0f32)).collect();
    // Per-modality contrast of (brain, edema, core, enhancing) relative to
    // the tissue baseline; order t1, t1ce, t2, flair.
    const CONTRAST: [[f64; 4]; 4] = [
        [0.0, -0.05, -0.1, -0.05],
        [0.0, 0.0, -0.05, 0.8],
        [0.0, 0.5, 0.8, 0.6],
        [0.0, 0.7, 0.35, 0.4],
    ];
    const BASELINE: [f64; 4] = [0.55, 0.45, 0.35, 0.4];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = [x as f64, y as f64, z as f64];
                let region = if et.contains(p) {
                    3
                } else if tc.contains(p) {
                    2
                } else if wt.contains(p) {
                    1
                } else {
                    0
                };
                labels.set(x, y, z, [0, 2, 1, 4][region]);
                let inside = brain.contains(p) || region > 0;
                let shared = anatomy.at(p);
                for (m, grid) in grids.iter_mut().enumerate() {
                    let white = rng.random_range(-1.0..1.0) * params.white_noise;
                    let v = if inside {
                        BASELINE[m]
                            + CONTRAST[m][region]
                            + params.noise_amplitude * (0.7 * shared + 0.3 * texture[m].at(p))
                            + white
                    } else {
                        white.abs()
                    };
                    grid.set(x, y, z, v.max(0.0) as f32);
                }
            }
        }
    }
    let case_id = format!("phantom_{seed:06}");
    Ok((MultimodalVolume::new(case_id, grids, spacing)?, LabelMap::new(labels, spacing)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_ellipsoid_stays_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let outer = Ellipsoid { center: [10.0, 12.0, 8.0], radii: [6.0, 4.0, 5.0] };
        for _ in 0..50 {
            let inner = outer.nested(&mut rng, (0.5, 0.75));
            for i in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut p = inner.center;
                    p[i] += sign * inner.radii[i] * 0.999;
                    assert!(outer.contains(p));
                }
            }
        }
    }

    #[test]
    fn too_small_shape_is_rejected() {
        assert!(matches!(generate_phantom(0, [16, 16, 16], [1.0; 3]), Err(Error::ShapeTooSmall(_))));
    }
}
