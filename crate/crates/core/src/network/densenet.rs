//! Densely connected encoder with the standard DenseNet-BC layout:
//! optional 7×7 stem, 3×3 max pool, dense blocks of bottleneck layers and
//! compressing transitions. Feature taps are taken after the stem and after
//! every dense block (before its transition).

use super::graph::Var;
use super::layers::{BatchNorm, Conv, ForwardCtx, LayerBuilder, ParamView};
use super::tensor::Scalar;

/// Bottleneck width multiplier of a dense layer (1×1 conv emits 4·growth).
pub const BOTTLENECK_FACTOR: usize = 4;

#[derive(Clone, Debug)]
struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv,
    norm2: BatchNorm,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct Transition {
    norm: BatchNorm,
    conv: Conv,
}

#[derive(Clone, Debug)]
pub struct DenseEncoder {
    stem: Option<(Conv, BatchNorm)>,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_norm: BatchNorm,
    tap_channels: Vec<usize>,
}

/// Channel counts at each pyramid tap (stem, then every dense block).
pub fn tap_channels(blocks: &[usize], growth: usize, stem_channels: usize, compression: f64) -> Vec<usize> {
    let mut taps = vec![stem_channels];
    let mut c = stem_channels;
    for (i, &layers) in blocks.iter().enumerate() {
        c += layers * growth;
        taps.push(c);
        if i + 1 < blocks.len() {
            c = (c as f64 * compression).floor() as usize;
        }
    }
    taps
}

/// Multi-scale encoder output; level `i` has stride `2^(i+1)`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Var<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.shape()[1]).collect()
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.shape()[2], l.shape()[3])).collect()
    }
}

impl DenseEncoder {
    pub(crate) fn build<T: Scalar>(
        b: &mut LayerBuilder<T>,
        blocks: &[usize],
        growth: usize,
        stem_channels: usize,
        compression: f64,
        with_stem: bool,
    ) -> Self {
        let stem = with_stem.then(|| {
            (b.conv("encoder.stem.conv", 3, stem_channels, 7, 2, false), b.norm("encoder.stem.norm", stem_channels))
        });
        let mut c = stem_channels;
        let mut dense = Vec::new();
        let mut transitions = Vec::new();
        let inner = BOTTLENECK_FACTOR * growth;
        for (bi, &layers) in blocks.iter().enumerate() {
            let mut block = Vec::new();
            for li in 0..layers {
                let p = format!("encoder.block{}.layer{}", bi + 1, li + 1);
                let cin = c + li * growth;
                block.push(DenseLayer {
                    norm1: b.norm(&format!("{p}.norm1"), cin),
                    conv1: b.conv(&format!("{p}.conv1"), cin, inner, 1, 1, false),
                    norm2: b.norm(&format!("{p}.norm2"), inner),
                    conv2: b.conv(&format!("{p}.conv2"), inner, growth, 3, 1, false),
                });
            }
            dense.push(block);
            c += layers * growth;
            if bi + 1 < blocks.len() {
                let out = (c as f64 * compression).floor() as usize;
                let p = format!("encoder.transition{}", bi + 1);
                transitions.push(Transition {
                    norm: b.norm(&format!("{p}.norm"), c),
                    conv: b.conv(&format!("{p}.conv"), c, out, 1, 1, false),
                });
                c = out;
            }
        }
        let final_norm = b.norm("encoder.norm5", c);
        Self {
            stem,
            blocks: dense,
            transitions,
            final_norm,
            tap_channels: tap_channels(blocks, growth, stem_channels, compression),
        }
    }

    pub fn has_stem(&self) -> bool {
        self.stem.is_some()
    }

    pub fn tap_channels(&self) -> &[usize] {
        &self.tap_channels
    }

    /// `input` is a 3-channel image when the stem is present, otherwise a
    /// stride-2 tensor with the stem's channel count.
    pub fn forward<T: Scalar>(&self, p: &ParamView<T>, ctx: &mut ForwardCtx<T>, input: &Var<T>) -> FeaturePyramid<T> {
        let stem_out = match &self.stem {
            Some((conv, norm)) => {
                let x = conv.forward(p, ctx, input);
                let x = norm.forward(p, ctx, &x);
                ctx.graph.relu(&x)
            }
            None => input.clone(),
        };
        let mut levels = vec![stem_out.clone()];
        let mut x = ctx.graph.max_pool(&stem_out);
        for (bi, block) in self.blocks.iter().enumerate() {
            let mut features = vec![x.clone()];
            for layer in block {
                let joined = if features.len() == 1 {
                    features[0].clone()
                } else {
                    let refs: Vec<&Var<T>> = features.iter().collect();
                    ctx.graph.concat(&refs)
                };
                let h = layer.norm1.forward(p, ctx, &joined);
                let h = ctx.graph.relu(&h);
                let h = layer.conv1.forward(p, ctx, &h);
                let h = layer.norm2.forward(p, ctx, &h);
                let h = ctx.graph.relu(&h);
                features.push(layer.conv2.forward(p, ctx, &h));
            }
            let refs: Vec<&Var<T>> = features.iter().collect();
            let block_out = ctx.graph.concat(&refs);
            drop(features);
            if let Some(t) = self.transitions.get(bi) {
                levels.push(block_out.clone());
                let h = t.norm.forward(p, ctx, &block_out);
                let h = ctx.graph.relu(&h);
                let h = t.conv.forward(p, ctx, &h);
                x = ctx.graph.avg_pool(&h);
            } else {
                let h = self.final_norm.forward(p, ctx, &block_out);
                levels.push(ctx.graph.relu(&h));
            }
        }
        FeaturePyramid { levels }
    }
}
