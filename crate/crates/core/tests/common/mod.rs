#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::network::{Model, ParamGroup, ParamKind, Scalar, Tensor};
use tumorseg::sampling::TrainingCase;
use tumorseg::volumedata::{generate_phantom, normalize};

pub fn random_stacks<T: Scalar>(seed: u64, batch: usize, size: [usize; 2], modalities: usize) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * 3 * size[0] * size[1];
    (0..modalities)
        .map(|_| Tensor::from_vec(&[batch, 3, size[0], size[1]], (0..n).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect()))
        .collect()
}

pub fn random_targets<T: Scalar>(seed: u64, batch: usize, size: [usize; 2]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * 3 * size[0] * size[1];
    Tensor::from_vec(&[batch, 3, size[0], size[1]], (0..n).map(|_| T::from_f64(rng.random_bool(0.3) as u8 as f64)).collect())
}

pub fn phantom_cases(count: usize, shape: [usize; 3]) -> Vec<TrainingCase> {
    (0..count)
        .map(|i| {
            let (v, lm) = generate_phantom(1 + i as u64, shape, [1.0; 3]).unwrap();
            TrainingCase::new(normalize(&v).unwrap(), lm).unwrap()
        })
        .collect()
}

/// FNV-1a over the bit patterns of every tensor in `group`, by name.
pub fn checksums<T: Scalar>(model: &Model<T>, group: ParamGroup) -> BTreeMap<String, u64> {
    model
        .store()
        .entries()
        .filter(|(_, e)| e.group == group)
        .map(|(_, e)| {
            let mut h = 0xcbf2_9ce4_8422_2325u64;
            for v in e.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
            (e.name.clone(), h)
        })
        .collect()
}

pub fn weight_count<T: Scalar>(model: &Model<T>, group: ParamGroup) -> usize {
    model.store().entries().filter(|(_, e)| e.group == group && e.kind == ParamKind::Weight).count()
}

/// Channels after the stem and after each dense block of a DenseNet-BC.
pub fn densenet_taps(blocks: &[usize], growth: usize, stem: usize) -> Vec<usize> {
    let mut out = vec![stem];
    let mut c = stem;
    for (i, n) in blocks.iter().enumerate() {
        c += n * growth;
        out.push(c);
        if i + 1 < blocks.len() {
            c /= 2;
        }
    }
    out
}

/// Learnable scalars of a DenseNet-BC feature extractor (bias-free convs,
/// two per normalization channel), optionally without the 7×7 stem.
pub fn densenet_params(blocks: &[usize], growth: usize, stem: usize, with_stem: bool) -> usize {
    let mut total = if with_stem { 3 * stem * 49 + 2 * stem } else { 0 };
    let mut c = stem;
    let inner = 4 * growth;
    for (i, &n) in blocks.iter().enumerate() {
        for l in 0..n {
            let cin = c + l * growth;
            total += 2 * cin + cin * inner + 2 * inner + inner * growth * 9;
        }
        c += n * growth;
        if i + 1 < blocks.len() {
            total += 2 * c + c * (c / 2);
            c /= 2;
        }
    }
    total + 2 * c
}
