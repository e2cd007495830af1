//! Learned front-end of variant M1: maps each modality's 3-slice image to a
//! stride-2 feature map and concatenates the per-modality maps into the
//! tensor a stemless encoder expects.

use super::graph::Var;
use super::layers::{ConvBnRelu, ForwardCtx, LayerBuilder, ParamView, ResidualBlock};
use super::tensor::Scalar;

/// One branch definition shared by every modality.
#[derive(Clone, Debug)]
pub struct Precoder {
    entry: ConvBnRelu,
    r1: ResidualBlock,
    r2: ResidualBlock,
    branch_width: usize,
}

impl Precoder {
    pub(crate) fn build<T: Scalar>(b: &mut LayerBuilder<T>, branch_width: usize) -> Self {
        Self {
            entry: b.conv_bn_relu("precoder.entry", 3, branch_width, 3, 2),
            r1: b.residual("precoder.r1", branch_width),
            r2: b.residual("precoder.r2", branch_width),
            branch_width,
        }
    }

    pub fn branch_width(&self) -> usize {
        self.branch_width
    }

    /// `modalities[m]` is (B,3,H,W); returns (B, M·width, H/2, W/2) with
    /// modality `m` occupying channels `m·width..(m+1)·width`.
    pub fn forward<T: Scalar>(&self, p: &ParamView<T>, ctx: &mut ForwardCtx<T>, modalities: &[Var<T>]) -> Var<T> {
        let batch = modalities[0].shape()[0];
        // All modalities share one pass so normalization statistics are
        // pooled the same way in training and inference.
        let refs: Vec<&Var<T>> = modalities.iter().collect();
        let joint = ctx.graph.concat_batch(&refs);
        let h = self.entry.forward(p, ctx, &joint);
        let h = self.r1.forward(p, ctx, &h);
        let h = self.r2.forward(p, ctx, &h);
        let parts: Vec<Var<T>> =
            (0..modalities.len()).map(|m| ctx.graph.slice_batch(&h, m * batch, batch)).collect();
        let refs: Vec<&Var<T>> = parts.iter().collect();
        ctx.graph.concat(&refs)
    }
}
