use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::volumedata::{
    generate_phantom, labels_to_masks, load_case, masks_to_labels, normalize, read_grid, read_labels, save_case,
    write_grid, write_labels, Grid, LabelMap, MultimodalVolume, LABELS, MODALITIES,
};
use tumorseg::Error;

fn random_volume(seed: u64, shape: [usize; 3]) -> MultimodalVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let grids = (0..4)
        .map(|_| Grid::from_vec(shape, (0..n).map(|_| rng.random_range(-300.0f32..900.0)).collect()).unwrap())
        .collect();
    MultimodalVolume::new("r", grids, [1.0; 3]).unwrap()
}

#[test]
fn normalize_hits_the_unit_interval_exactly() {
    let v = normalize(&random_volume(1, [9, 7, 5])).unwrap();
    for g in &v.modalities {
        let lo = g.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = g.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}

#[test]
fn normalize_midpoint_and_constant() {
    let ramp = Grid::from_vec([3, 1, 1], vec![0.0, 50.0, 100.0]).unwrap();
    let flat = Grid::filled([3, 1, 1], 7.0);
    let v = MultimodalVolume::new("c", vec![ramp, flat.clone(), flat.clone(), flat], [1.0; 3]).unwrap();
    let n = normalize(&v).unwrap();
    assert_eq!(n.modalities[0].data(), &[0.0, 0.5, 1.0]);
    assert!(n.modalities[3].data().iter().all(|&x| x == 0.0));
}

#[test]
fn normalize_rejects_non_finite_voxels() {
    let mut v = random_volume(2, [4, 4, 4]);
    v.modalities[2].data_mut()[5] = f32::NAN;
    assert!(matches!(normalize(&v), Err(Error::NonFinite(_))));
    v.modalities[2].data_mut()[5] = f32::INFINITY;
    assert!(matches!(normalize(&v), Err(Error::NonFinite(_))));
}

#[test]
fn normalize_is_idempotent() {
    for seed in 0..10 {
        let once = normalize(&random_volume(seed, [6, 5, 4])).unwrap();
        assert_eq!(normalize(&once).unwrap(), once);
    }
}

#[test]
fn modality_count_and_shapes_are_checked() {
    let g = Grid::filled([2, 2, 2], 0.0f32);
    assert!(MultimodalVolume::new("c", vec![g.clone(); 3], [1.0; 3]).is_err());
    let other = Grid::filled([2, 2, 3], 0.0f32);
    assert!(MultimodalVolume::new("c", vec![g.clone(), g.clone(), other, g], [1.0; 3]).is_err());
}

#[test]
fn illegal_label_values_are_rejected() {
    let g = Grid::from_vec([2, 1, 1], vec![0u8, 3]).unwrap();
    assert!(matches!(LabelMap::new(g, [1.0; 3]), Err(Error::IllegalLabel { .. })));
}

proptest! {
    #[test]
    fn masks_round_trip_to_labels(idx in prop::collection::vec(0usize..4, 60)) {
        let data = idx.iter().map(|&i| LABELS[i]).collect();
        let lm = LabelMap::new(Grid::from_vec([5, 4, 3], data).unwrap(), [1.0, 2.0, 3.0]).unwrap();
        let masks = labels_to_masks(&lm);
        prop_assert!(masks.is_nested());
        prop_assert_eq!(masks_to_labels(&masks, lm.spacing).unwrap(), lm);
    }
}

#[test]
fn phantom_is_deterministic() {
    let a = generate_phantom(17, [40, 36, 32], [1.0, 1.0, 2.0]).unwrap();
    let b = generate_phantom(17, [40, 36, 32], [1.0, 1.0, 2.0]).unwrap();
    assert_eq!(a, b);
    let c = generate_phantom(18, [40, 36, 32], [1.0, 1.0, 2.0]).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn phantom_invariants_hold_for_many_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let seed = rng.random::<u64>();
        let (v, lm) = generate_phantom(seed, [32, 32, 32], [1.0; 3]).unwrap();
        assert_eq!(v.modalities.len(), MODALITIES.len());
        assert!(v.modalities.iter().all(|g| g.data().iter().all(|x| x.is_finite())));
        assert!(lm.labels.data().iter().all(|l| LABELS.contains(l)));
        let m = labels_to_masks(&lm);
        assert!(m.is_nested());
        assert!(m.et.count() > 0, "seed {seed} has no enhancing voxels");
    }
}

#[test]
fn phantom_tumor_fraction_is_moderate() {
    let (_, lm) = generate_phantom(0, [64, 64, 64], [1.0; 3]).unwrap();
    let frac = labels_to_masks(&lm).wt.count() as f64 / lm.labels.len() as f64;
    assert!((0.005..=0.15).contains(&frac), "{frac}");
}

#[test]
fn phantom_contrast_follows_the_modalities() {
    let (v, lm) = generate_phantom(5, [48, 48, 48], [1.0; 3]).unwrap();
    let m = labels_to_masks(&lm);
    let mean = |g: &Grid<f32>, mask: &Grid<bool>, inside: bool| {
        let vals: Vec<f64> = g.data().iter().zip(mask.data()).filter(|(_, &b)| b == inside).map(|(&x, _)| x as f64).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let [_, t1ce, t2, flair] = [0, 1, 2, 3].map(|i| &v.modalities[i]);
    assert!(mean(flair, &m.wt, true) > mean(flair, &m.wt, false));
    assert!(mean(t2, &m.tc, true) > mean(t2, &m.tc, false));
    assert!(mean(t1ce, &m.et, true) > mean(t1ce, &m.et, false));
}

#[test]
fn phantom_too_small_is_an_error() {
    assert!(matches!(generate_phantom(0, [31, 64, 64], [1.0; 3]), Err(Error::ShapeTooSmall(_))));
}

#[test]
fn case_round_trips_through_nifti() {
    let dir = tempfile::tempdir().unwrap();
    let (v, lm) = generate_phantom(9, [33, 34, 35], [0.9, 1.1, 2.5]).unwrap();
    let v = MultimodalVolume { case_id: "p9".into(), ..v };
    save_case(&dir.path().join("p9"), &v, Some(&lm), "roundtrip").unwrap();
    let (back, labels) = load_case(&dir.path().join("p9")).unwrap();
    assert_eq!(back.shape(), [33, 34, 35]);
    assert_eq!(back.case_id, "p9");
    assert_eq!(back.modalities, v.modalities);
    assert_eq!(back.spacing.map(|s| s as f32), v.spacing.map(|s| s as f32));
    assert_eq!(labels.unwrap().labels, lm.labels);
    let (_, spacing, descrip) = read_grid(&dir.path().join("p9/p9_flair.nii")).unwrap();
    assert_eq!(spacing.map(|s| s as f32), [0.9f32, 1.1, 2.5]);
    assert_eq!(descrip, "roundtrip");
}

#[test]
fn missing_modality_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (v, _) = generate_phantom(1, [32, 32, 32], [1.0; 3]).unwrap();
    save_case(dir.path(), &v, None, "").unwrap();
    let flair = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("_flair.nii"))
        .unwrap();
    std::fs::remove_file(flair).unwrap();
    match load_case(dir.path()) {
        Err(e @ Error::MissingModality { .. }) => assert!(e.to_string().contains("missing modality flair")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn label_file_with_value_three_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad_seg.nii");
    let bad = LabelMap { labels: Grid::from_vec([2, 2, 1], vec![0, 1, 3, 4]).unwrap(), spacing: [1.0; 3] };
    write_labels(&path, &bad, "").unwrap();
    let e = read_labels(&path).unwrap_err();
    assert!(e.to_string().contains("illegal label value"), "{e}");
}

#[test]
fn float_grid_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.nii");
    let g = random_volume(4, [5, 6, 7]).modalities.remove(0);
    write_grid(&path, &g, [1.5, 1.0, 0.5], "x").unwrap();
    let (back, spacing, _) = read_grid(&path).unwrap();
    assert_eq!(back, g);
    assert_eq!(spacing, [1.5, 1.0, 0.5]);
}
