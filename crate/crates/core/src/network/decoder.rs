//! U-net decoder: from the deepest tap upward, upsample, join the skip
//! features, reduce with a 1×1 convolution, refine with residual blocks;
//! finish with a ×2 upsample and three independent 1×1 heads.

use super::graph::Var;
use super::layers::{Conv, ConvBnRelu, ForwardCtx, LayerBuilder, ParamView, ResidualBlock};
use super::tensor::Scalar;

pub const HEAD_NAMES: [&str; 3] = ["wt", "tc", "et"];

#[derive(Clone, Debug)]
struct Level {
    reduce: ConvBnRelu,
    refine: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    levels: Vec<Level>,
    heads: Vec<Conv>,
    skip_channels: Vec<usize>,
}

impl Decoder {
    /// `skip_channels[i]` is the (already modality-joined) channel count at
    /// pyramid level `i`; `widths[0]` applies to the deepest level.
    pub(crate) fn build<T: Scalar>(
        b: &mut LayerBuilder<T>,
        skip_channels: &[usize],
        widths: &[usize],
        residual_blocks: usize,
        head_classes: usize,
    ) -> Self {
        assert_eq!(skip_channels.len(), widths.len());
        let depth = skip_channels.len();
        let mut levels = Vec::with_capacity(depth);
        let mut prev: Option<usize> = None;
        for (i, &width) in widths.iter().enumerate() {
            let skip = skip_channels[depth - 1 - i];
            let cin = skip + prev.unwrap_or(0);
            let name = format!("decoder.level{i}");
            levels.push(Level {
                reduce: b.conv_bn_relu(&format!("{name}.reduce"), cin, width, 1, 1),
                refine: (0..residual_blocks).map(|r| b.residual(&format!("{name}.res{}", r + 1), width)).collect(),
            });
            prev = Some(width);
        }
        let last = *widths.last().expect("at least one decoder level");
        b.group = super::layers::ParamGroup::Head;
        let heads = (0..head_classes)
            .map(|k| b.conv(&format!("head.{}", HEAD_NAMES.get(k).copied().unwrap_or("extra")), last, 1, 1, 1, true))
            .collect();
        Self { levels, heads, skip_channels: skip_channels.to_vec() }
    }

    pub fn skip_channels(&self) -> &[usize] {
        &self.skip_channels
    }

    /// `skips[i]` has stride `2^(i+1)`. Returns logits (B, classes, H, W).
    pub fn forward<T: Scalar>(&self, p: &ParamView<T>, ctx: &mut ForwardCtx<T>, skips: &[Var<T>]) -> Var<T> {
        let depth = skips.len();
        let mut x: Option<Var<T>> = None;
        for (i, level) in self.levels.iter().enumerate() {
            let skip = &skips[depth - 1 - i];
            let input = match x.take() {
                None => skip.clone(),
                Some(prev) => {
                    let up = ctx.graph.upsample(&prev);
                    ctx.graph.concat(&[&up, skip])
                }
            };
            let mut h = level.reduce.forward(p, ctx, &input);
            for block in &level.refine {
                h = block.forward(p, ctx, &h);
            }
            x = Some(h);
        }
        let top = ctx.graph.upsample(&x.expect("decoder has levels"));
        let maps: Vec<Var<T>> = self.heads.iter().map(|head| head.forward(p, ctx, &top)).collect();
        let refs: Vec<&Var<T>> = maps.iter().collect();
        ctx.graph.concat(&refs)
    }
}
