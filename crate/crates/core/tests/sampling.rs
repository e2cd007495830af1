use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tumorseg::sampling::{
    extract_stack, extract_target, paste_back, plan_epoch, sample_epoch, Axis, DimPlacement, TrainingCase,
    SAMPLES_PER_CASE,
};
use tumorseg::volumedata::{generate_phantom, labels_to_masks, Grid, LabelMap, MultimodalVolume};
use tumorseg::Error;

/// Every voxel holds its own linear index, exactly representable in f32.
fn ramp(shape: [usize; 3]) -> MultimodalVolume {
    let n = shape.iter().product::<usize>();
    assert!(n < 1 << 24);
    let mut g = Grid::filled(shape, 0f32);
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                g.set(x, y, z, id(shape, x, y, z));
            }
        }
    }
    MultimodalVolume::new("ramp", vec![g.clone(), g.clone(), g.clone(), g], [1.0; 3]).unwrap()
}

fn id(shape: [usize; 3], x: usize, y: usize, z: usize) -> f32 {
    (x + shape[0] * (y + shape[1] * z)) as f32
}

fn channel(stack: &tumorseg::sampling::SliceStack, m: usize, c: usize) -> &[f32] {
    let [h, w] = stack.placement.size();
    &stack.modality(m)[c * h * w..(c + 1) * h * w]
}

#[test]
fn brats_sized_axial_slice_is_center_cropped() {
    let shape = [240, 240, 155];
    let vol = ramp(shape);
    let s = extract_stack(&vol, Axis::Axial, 80, [224, 224]).unwrap();
    assert_eq!((s.placement.rows.offset, s.placement.cols.offset), (8, 8));
    for m in 0..4 {
        for c in 0..3 {
            let ch = channel(&s, m, c);
            for i in 0..224 {
                for j in 0..224 {
                    assert_eq!(ch[i * 224 + j], id(shape, i + 8, j + 8, 79 + c));
                }
            }
        }
    }

    let s = extract_stack(&vol, Axis::Coronal, 100, [224, 224]).unwrap();
    assert_eq!(s.placement.rows.pads(), (0, 0));
    assert_eq!(s.placement.cols.pads(), (34, 35));
    let ch = channel(&s, 0, 1);
    for i in 0..224 {
        for j in 0..224 {
            // reflect without repeating the edge voxel
            let z = j as isize - 34;
            let z = if z < 0 { -z } else if z >= 155 { 2 * 154 - z } else { z } as usize;
            assert_eq!(ch[i * 224 + j], id(shape, i + 8, 100, z));
        }
    }
}

#[test]
fn boundary_slices_reflect() {
    let shape = [32, 32, 20];
    let vol = ramp(shape);
    let first = extract_stack(&vol, Axis::Axial, 0, [32, 32]).unwrap();
    let last = extract_stack(&vol, Axis::Axial, 19, [32, 32]).unwrap();
    for (c, (zf, zl)) in [(1, 18), (0, 19), (1, 18)].into_iter().enumerate() {
        assert_eq!(channel(&first, 0, c)[0], id(shape, 0, 0, zf));
        assert_eq!(channel(&last, 0, c)[0], id(shape, 0, 0, zl));
    }
}

#[test]
fn out_of_range_index_is_an_error() {
    let vol = ramp([32, 32, 20]);
    assert!(matches!(extract_stack(&vol, Axis::Axial, 20, [32, 32]), Err(Error::IndexOutOfRange { index: 20, extent: 20 })));
    assert!(extract_stack(&vol, Axis::Sagittal, 31, [32, 32]).is_ok());
}

#[test]
fn center_channel_pastes_back_losslessly() {
    let shape = [48, 48, 48];
    let vol = ramp(shape);
    for size in [[32, 32], [64, 64], [32, 64], [48, 48]] {
        for axis in Axis::ALL {
            let mut out = Grid::filled(shape, f32::NAN);
            for index in 0..axis.extent(shape) {
                let s = extract_stack(&vol, axis, index, size).unwrap();
                paste_back(&mut out, &s.placement, channel(&s, 0, 1));
            }
            let [r, c] = axis.in_plane();
            let keep = |n: usize, t: usize, i: usize| if n <= t { true } else { (n - t) / 2 <= i && i < (n - t) / 2 + t };
            for x in 0..48 {
                for y in 0..48 {
                    for z in 0..48 {
                        let p = [x, y, z];
                        let covered = keep(48, size[0], p[r]) && keep(48, size[1], p[c]);
                        let v = out.get(x, y, z);
                        if covered {
                            assert_eq!(v, id(shape, x, y, z), "{axis} {size:?} {p:?}");
                        } else {
                            assert!(v.is_nan(), "{axis} {size:?} {p:?}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn targets_are_nested_and_paste_back_to_the_masks() {
    let (_, lm) = generate_phantom(2, [40, 36, 32], [1.0; 3]).unwrap();
    let masks = labels_to_masks(&lm);
    for axis in Axis::ALL {
        let mut out = [0, 1, 2].map(|_| Grid::filled(lm.shape(), false));
        for index in 0..axis.extent(lm.shape()) {
            let t = extract_target(&lm, axis, index, [64, 64]).unwrap();
            for k in 0..3 {
                let plane: Vec<bool> = t.class(k).iter().map(|&v| v == 1.0).collect();
                paste_back(&mut out[k], &t.placement, &plane);
            }
            let (wt, tc, et) = (t.class(0), t.class(1), t.class(2));
            assert!((0..wt.len()).all(|i| et[i] <= tc[i] && tc[i] <= wt[i]));
            assert!(t.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert_eq!(out, masks.as_array().map(|g| g.clone()));
    }
}

#[test]
fn background_slice_gives_zero_targets() {
    let lm = LabelMap::new(Grid::filled([32, 32, 32], 0u8), [1.0; 3]).unwrap();
    let t = extract_target(&lm, Axis::Coronal, 3, [32, 32]).unwrap();
    assert!(t.data.iter().all(|&v| v == 0.0));
}

fn cases(n: usize, shape: [usize; 3]) -> Vec<TrainingCase> {
    (0..n)
        .map(|i| {
            let (v, lm) = generate_phantom(i as u64, shape, [1.0; 3]).unwrap();
            TrainingCase::new(v, lm).unwrap()
        })
        .collect()
}

#[test]
fn epoch_has_twenty_samples_per_case() {
    let cs = cases(3, [32, 32, 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample_epoch(&cs[..1], &mut rng, [32, 32]).unwrap().len(), 20);
    assert_eq!(sample_epoch(&cs, &mut rng, [32, 32]).unwrap().len(), 60);
    let many: Vec<TrainingCase> = (0..285).map(|i| cs[i % 3].clone()).collect();
    assert_eq!(plan_epoch(&many, &mut rng, SAMPLES_PER_CASE, 0.5).len(), 5700);
}

#[test]
fn epochs_are_reproducible_from_the_seed() {
    let cs = cases(2, [32, 32, 32]);
    let a = sample_epoch(&cs, &mut ChaCha8Rng::seed_from_u64(9), [32, 32]).unwrap();
    let b = sample_epoch(&cs, &mut ChaCha8Rng::seed_from_u64(9), [32, 32]).unwrap();
    assert_eq!(a, b);
    let c = sample_epoch(&cs, &mut ChaCha8Rng::seed_from_u64(10), [32, 32]).unwrap();
    assert_ne!(a, c);
}

#[test]
fn sampling_uses_all_axes_and_biases_toward_tumor() {
    let cs = cases(1, [48, 48, 48]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plan = plan_epoch(&cs, &mut rng, 3000, 1.0);
    for axis in Axis::ALL {
        let n = plan.iter().filter(|s| s.axis == axis).count();
        assert!((800..1200).contains(&n), "{axis}: {n}");
    }
    assert!(plan.iter().all(|s| cs[0].tumor_slices(s.axis).contains(&s.index)));

    let unbiased = plan_epoch(&cs, &mut rng, 3000, 0.0);
    assert!(unbiased.iter().any(|s| !cs[0].tumor_slices(s.axis).contains(&s.index)));
}

#[test]
fn tumor_free_case_samples_every_axis_uniformly() {
    let (v, _) = generate_phantom(0, [32, 32, 32], [1.0; 3]).unwrap();
    let empty = LabelMap::new(Grid::filled([32, 32, 32], 0u8), [1.0; 3]).unwrap();
    let cs = vec![TrainingCase::new(v, empty).unwrap()];
    let plan = plan_epoch(&cs, &mut ChaCha8Rng::seed_from_u64(1), 2000, 1.0);
    assert!(plan.iter().all(|s| s.index < 32));
    assert!(plan.iter().map(|s| s.index).collect::<std::collections::HashSet<_>>().len() == 32);
}

proptest! {
    #[test]
    fn reflected_coordinates_stay_in_range(native in 2usize..300, target in 1usize..300) {
        let d = DimPlacement::fit(native, target);
        for i in 0..target {
            prop_assert!(d.reflected(i) < native);
            if let Some(n) = d.inside(i) {
                prop_assert_eq!(d.reflected(i), n);
            }
        }
        let (before, after) = d.pads();
        if native >= target {
            prop_assert_eq!((before, after), (0, 0));
        } else {
            prop_assert_eq!(before + after + native, target);
            prop_assert!(after - before <= 1);
        }
    }
}
