//! U-net with a densely connected encoder, in two input variants.
//!
//! * **M1** feeds every modality through a shared precoder branch and hands
//!   the concatenated stride-2 tensor to a stemless encoder.
//! * **M2** runs each modality through the full encoder (one set of weights)
//!   and concatenates the per-modality features at every decoder scale.
//!
//! Both variants end in three independent sigmoid heads (WT, TC, ET).

pub mod archive;
pub mod densenet;
pub mod decoder;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod precoder;
pub mod tensor;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use archive::{LoadReport, WeightArchive};
pub use densenet::{DenseEncoder, FeaturePyramid};
pub use graph::{Graph, ParamId, Var};
pub use layers::{BatchNorm, ForwardCtx, ParamGroup, ParamKind, ParamStore, ParamView, Phase};
pub use tensor::{Scalar, Tensor};

use decoder::Decoder;
use layers::LayerBuilder;
use precoder::Precoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    M1,
    M2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::M1 => "M1",
            Variant::M2 => "M2",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(Variant::M1),
            "M2" => Ok(Variant::M2),
            other => Err(format!("unknown variant {other:?} (expected M1 or M2)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub encoder_blocks: Vec<usize>,
    pub growth_rate: usize,
    pub stem_channels: usize,
    pub transition_compression: f64,
    pub decoder_widths: Vec<usize>,
    pub decoder_residual_blocks: usize,
    pub num_modalities: usize,
    pub freeze_encoder: bool,
    pub head_classes: usize,
    pub input_size: [usize; 2],
}

impl NetworkConfig {
    /// The 121-layer topology at its native 224×224 input.
    pub fn densenet121(variant: Variant) -> Self {
        Self {
            variant,
            encoder_blocks: vec![6, 12, 24, 16],
            growth_rate: 32,
            stem_channels: 64,
            transition_compression: 0.5,
            decoder_widths: vec![512, 256, 128, 64, 32],
            decoder_residual_blocks: 2,
            num_modalities: 4,
            freeze_encoder: true,
            head_classes: 3,
            input_size: [224, 224],
        }
    }

    /// Desk-scale topology: same code path, a few thousand parameters.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            encoder_blocks: vec![2, 2, 2, 2],
            growth_rate: 8,
            stem_channels: 16,
            decoder_widths: vec![32, 32, 16, 16, 16],
            input_size: [64, 64],
            ..Self::densenet121(variant)
        }
    }

    /// Input extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.encoder_blocks.len() + 1)
    }

    pub fn with_stem(&self) -> bool {
        self.variant == Variant::M2
    }

    /// Encoder channel count at every pyramid tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        densenet::tap_channels(&self.encoder_blocks, self.growth_rate, self.stem_channels, self.transition_compression)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.head_classes != 3 {
            problems.push(format!("head_classes must be 3 (WT, TC, ET), got {}", self.head_classes));
        }
        if self.encoder_blocks.is_empty() || self.encoder_blocks.contains(&0) {
            problems.push("encoder_blocks must be a nonempty list of positive layer counts".to_string());
        }
        if self.decoder_widths.len() != self.encoder_blocks.len() + 1 {
            problems.push(format!(
                "decoder_widths has {} entries but the encoder exposes {} skip scales",
                self.decoder_widths.len(),
                self.encoder_blocks.len() + 1
            ));
        }
        if self.decoder_widths.contains(&0) {
            problems.push("decoder_widths must be positive".to_string());
        }
        if self.growth_rate == 0 || self.stem_channels == 0 {
            problems.push("growth_rate and stem_channels must be positive".to_string());
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            problems.push("transition_compression must lie in (0, 1]".to_string());
        }
        if self.num_modalities == 0 {
            problems.push("num_modalities must be positive".to_string());
        }
        if self.variant == Variant::M1 && self.num_modalities > 0 && self.stem_channels % self.num_modalities != 0 {
            problems.push(format!(
                "M1 needs stem_channels ({}) divisible by num_modalities ({})",
                self.stem_channels, self.num_modalities
            ));
        }
        let m = self.size_multiple();
        if self.input_size.iter().any(|&s| s == 0 || s % m != 0) {
            problems.push(format!("input_size {:?} must be positive multiples of {m}", self.input_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Network(problems.join("; ")))
        }
    }

    fn encoder_description(&self) -> String {
        format!(
            "stem={};blocks={:?};growth={};stem_channels={};compression={}",
            self.with_stem(),
            self.encoder_blocks,
            self.growth_rate,
            self.stem_channels,
            self.transition_compression
        )
    }

    fn description(&self) -> String {
        format!(
            "variant={};{};decoder={:?};residual={};modalities={};heads={}",
            self.variant,
            self.encoder_description(),
            self.decoder_widths,
            self.decoder_residual_blocks,
            self.num_modalities,
            self.head_classes
        )
    }

    /// Identifies the full parameter layout (input size and freezing excluded).
    pub fn fingerprint(&self) -> String {
        short_hash(&self.description())
    }

    /// Identifies the encoder's parameter layout alone.
    pub fn encoder_fingerprint(&self) -> String {
        short_hash(&self.encoder_description())
    }
}

fn short_hash(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-channel input standardization for a pretrained stem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub struct Model<T: Scalar> {
    config: NetworkConfig,
    store: ParamStore<T>,
    trainable: Vec<bool>,
    precoder: Option<Precoder>,
    encoder: DenseEncoder,
    decoder: Decoder,
    standardization: Option<Standardization>,
}

impl<T: Scalar> Model<T> {
    /// Builds the graph structure with constant-initialized tensors.
    pub fn skeleton(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let precoder = (config.variant == Variant::M1).then(|| {
            let mut b = LayerBuilder { store: &mut store, group: ParamGroup::Precoder };
            Precoder::build(&mut b, config.stem_channels / config.num_modalities)
        });
        let encoder = {
            let mut b = LayerBuilder { store: &mut store, group: ParamGroup::Encoder };
            DenseEncoder::build(
                &mut b,
                &config.encoder_blocks,
                config.growth_rate,
                config.stem_channels,
                config.transition_compression,
                config.with_stem(),
            )
        };
        let joined = match config.variant {
            Variant::M1 => 1,
            Variant::M2 => config.num_modalities,
        };
        let skips: Vec<usize> = encoder.tap_channels().iter().map(|c| c * joined).collect();
        let decoder = {
            let mut b = LayerBuilder { store: &mut store, group: ParamGroup::Decoder };
            Decoder::build(&mut b, &skips, &config.decoder_widths, config.decoder_residual_blocks, config.head_classes)
        };
        let mut model =
            Self { config, store, trainable: Vec::new(), precoder, encoder, decoder, standardization: None };
        model.refresh_trainable();
        Ok(model)
    }

    /// Builds and draws He-normal weights from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        model.store.initialize(seed);
        Ok(model)
    }

    fn refresh_trainable(&mut self) {
        let frozen = frozen_parameter_names(&self.config, &self.store);
        self.trainable = self
            .store
            .entries()
            .map(|(_, e)| e.kind == ParamKind::Weight && !frozen.contains(&e.name))
            .collect();
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Changes the freeze flag and recomputes which tensors train.
    pub fn set_freeze_encoder(&mut self, freeze: bool) {
        self.config.freeze_encoder = freeze;
        self.refresh_trainable();
    }

    pub fn set_input_size(&mut self, size: [usize; 2]) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.input_size = size;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.trainable.len()).filter(|&i| self.trainable[i]).collect()
    }

    pub fn view(&self) -> ParamView<'_, T> {
        ParamView { store: &self.store, trainable: &self.trainable }
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn set_standardization(&mut self, s: Option<Standardization>) {
        self.standardization = s;
    }

    pub fn encoder(&self) -> &DenseEncoder {
        &self.encoder
    }

    /// Every normalization layer, in registration order.
    pub fn norm_layers(&self) -> Vec<BatchNorm> {
        self.store
            .entries()
            .filter_map(|(id, e)| {
                let base = e.name.strip_suffix(".running_mean")?;
                let find = |suffix: &str| self.store.find(&format!("{base}.{suffix}"));
                Some(BatchNorm {
                    gamma: find("weight")?,
                    beta: find("bias")?,
                    running_mean: id,
                    running_var: find("running_var")?,
                })
            })
            .collect()
    }

    /// Number of learnable scalars (weights only) in a parameter group.
    pub fn parameter_count(&self, group: ParamGroup) -> usize {
        self.store
            .entries()
            .filter(|(_, e)| e.group == group && e.kind == ParamKind::Weight)
            .map(|(_, e)| e.value.len())
            .sum()
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<(usize, usize, usize)> {
        if inputs.len() != self.config.num_modalities {
            return Err(Error::Network(format!(
                "expected {} modality stacks, got {}",
                self.config.num_modalities,
                inputs.len()
            )));
        }
        let shape = inputs[0].shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Network(format!("modality stacks must be (B,3,H,W), got {shape:?}")));
        }
        if inputs.iter().any(|t| t.shape() != shape.as_slice()) {
            return Err(Error::Network("modality stacks differ in shape".to_string()));
        }
        let m = self.config.size_multiple();
        if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Network(format!("input size {}x{} is not divisible by {m}", shape[2], shape[3])));
        }
        Ok((shape[0], shape[2], shape[3]))
    }

    fn standardized(&self, x: &Tensor<T>) -> Tensor<T> {
        match (&self.standardization, self.config.variant) {
            (Some(s), Variant::M2) => {
                let scale: Vec<T> = s.std.iter().map(|&v| T::from_f64(1.0 / v)).collect();
                let shift: Vec<T> = s.mean.iter().zip(&s.std).map(|(&m, &v)| T::from_f64(-m / v)).collect();
                kernels::channel_affine(x, &scale, &shift)
            }
            _ => x.clone(),
        }
    }

    /// Encoder features of one image batch: (B,3,H,W) for M2, the
    /// precoded (B,stem,H/2,W/2) tensor for M1.
    pub fn encode(&self, ctx: &mut ForwardCtx<T>, input: &Tensor<T>) -> FeaturePyramid<T> {
        let x = ctx.graph.constant(self.standardized(input));
        self.encoder.forward(&self.view(), ctx, &x)
    }

    /// Per-class logits (B, 3, H, W) for one stack per modality.
    pub fn logits(&self, ctx: &mut ForwardCtx<T>, inputs: &[Tensor<T>]) -> Result<Var<T>> {
        let (batch, _, _) = self.check_inputs(inputs)?;
        let view = self.view();
        let skips = match &self.precoder {
            Some(pre) => {
                let vars: Vec<Var<T>> = inputs.iter().map(|t| ctx.graph.constant(t.clone())).collect();
                let precoded = pre.forward(&view, ctx, &vars);
                self.encoder.forward(&view, ctx, &precoded).levels
            }
            None => {
                let parts: Vec<Var<T>> = inputs.iter().map(|t| ctx.graph.constant(self.standardized(t))).collect();
                let refs: Vec<&Var<T>> = parts.iter().collect();
                let joint = ctx.graph.concat_batch(&refs);
                let pyramid = self.encoder.forward(&view, ctx, &joint);
                pyramid
                    .levels
                    .iter()
                    .map(|level| {
                        let per: Vec<Var<T>> = (0..inputs.len())
                            .map(|m| ctx.graph.slice_batch(level, m * batch, batch))
                            .collect();
                        let refs: Vec<&Var<T>> = per.iter().collect();
                        ctx.graph.concat(&refs)
                    })
                    .collect()
            }
        };
        Ok(self.decoder.forward(&view, ctx, &skips))
    }

    /// Independent per-class probabilities (B, 3, H, W).
    pub fn forward(&self, ctx: &mut ForwardCtx<T>, inputs: &[Tensor<T>]) -> Result<Var<T>> {
        let logits = self.logits(ctx, inputs)?;
        Ok(ctx.graph.sigmoid(&logits))
    }

    /// Fixed-statistics forward without recording.
    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut ctx = ForwardCtx::new(Phase::Inference);
        let out = self.forward(&mut ctx, inputs)?;
        Ok(out.value().clone())
    }
}

/// Names of parameters excluded from optimization under `config`.
pub fn frozen_parameter_names<T: Scalar>(config: &NetworkConfig, store: &ParamStore<T>) -> BTreeSet<String> {
    if !config.freeze_encoder {
        return BTreeSet::new();
    }
    store
        .entries()
        .filter(|(_, e)| e.group == ParamGroup::Encoder && e.kind == ParamKind::Weight)
        .map(|(_, e)| e.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_tiny_configs_validate() {
        NetworkConfig::densenet121(Variant::M1).validate().unwrap();
        NetworkConfig::densenet121(Variant::M2).validate().unwrap();
        NetworkConfig::tiny(Variant::M1).validate().unwrap();
        NetworkConfig::tiny(Variant::M2).validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = NetworkConfig::tiny(Variant::M2);
        c.head_classes = 4;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny(Variant::M2);
        c.decoder_widths.pop();
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny(Variant::M2);
        c.input_size = [48, 64];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny(Variant::M1);
        c.num_modalities = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprints_track_architecture_not_training_flags() {
        let a = NetworkConfig::tiny(Variant::M2);
        let mut b = a.clone();
        b.freeze_encoder = false;
        b.input_size = [32, 32];
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.decoder_widths[0] = 8;
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.encoder_fingerprint(), c.encoder_fingerprint());
        assert_ne!(a.encoder_fingerprint(), NetworkConfig::tiny(Variant::M1).encoder_fingerprint());
    }

    #[test]
    fn wrong_input_size_is_an_error() {
        let model: Model<f32> = Model::new(NetworkConfig::tiny(Variant::M2), 1).unwrap();
        let stacks = vec![Tensor::zeros(&[1, 3, 48, 48]); 4];
        assert!(model.predict(&stacks).is_err());
        let stacks = vec![Tensor::zeros(&[1, 3, 64, 64]); 3];
        assert!(model.predict(&stacks).is_err());
    }
}
