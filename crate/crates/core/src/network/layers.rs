//! Named parameter storage and the small layer vocabulary shared by the
//! precoder, encoder and decoder.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{BatchMoments, Graph, ParamId, Var};
use super::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Which part of the network owns a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Precoder,
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learnable weight (convolution kernel, bias, normalization scale/shift).
    Weight,
    /// Normalization statistics; never receive gradients.
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    He { fan_in: usize },
    Const(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    fn add(&mut self, name: String, group: ParamGroup, kind: ParamKind, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        let fill = match init {
            Init::Const(v) => T::from_f64(v),
            Init::He { .. } => T::zero(),
        };
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, kind, value: Arc::new(Tensor::full(shape, fill)), init });
        id
    }

    /// Draws He-normal kernels and resets constants, in registration order.
    pub(crate) fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            let t = Arc::make_mut(&mut e.value);
            match e.init {
                Init::Const(v) => t.data_mut().iter_mut().for_each(|x| *x = T::from_f64(v)),
                Init::He { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    t.data_mut().iter_mut().for_each(|x| *x = T::from_f64(normal.sample(&mut rng)));
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id].value)
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id].value)
    }
}

/// How normalization layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics for trainable layers, graph recording on.
    Train,
    /// Running statistics everywhere, no recording.
    Inference,
    /// Batch statistics for trainable layers, no recording; used to gather
    /// exact statistics over a sample stream.
    Calibrate,
}

/// Per-forward state: the tape plus batch statistics observed along the way.
pub struct ForwardCtx<T: Scalar> {
    pub graph: Graph<T>,
    pub phase: Phase,
    /// (running-mean id of the layer, statistics of this batch)
    pub observations: Vec<(ParamId, BatchMoments)>,
}

impl<T: Scalar> ForwardCtx<T> {
    pub fn new(phase: Phase) -> Self {
        let graph = match phase {
            Phase::Train => Graph::new(),
            Phase::Inference | Phase::Calibrate => Graph::inference(),
        };
        Self { graph, phase, observations: Vec::new() }
    }
}

/// Parameters plus their trainability, as seen by layers during a forward pass.
pub struct ParamView<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: &'a [bool],
}

impl<T: Scalar> ParamView<'_, T> {
    fn var(&self, ctx: &ForwardCtx<T>, id: ParamId) -> Var<T> {
        ctx.graph.param(self.store.shared(id), id, self.trainable[id])
    }
}

/// Registers layers under a common name prefix and parameter group.
pub(crate) struct LayerBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub group: ParamGroup,
}

impl<T: Scalar> LayerBuilder<'_, T> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Conv {
        let weight = self.store.add(
            format!("{name}.weight"),
            self.group,
            ParamKind::Weight,
            &[cout, cin, kernel, kernel],
            Init::He { fan_in: cin * kernel * kernel },
        );
        let bias = bias.then(|| {
            self.store.add(format!("{name}.bias"), self.group, ParamKind::Weight, &[cout], Init::Const(0.0))
        });
        Conv { weight, bias, stride }
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        let g = self.group;
        BatchNorm {
            gamma: self.store.add(format!("{name}.weight"), g, ParamKind::Weight, &[channels], Init::Const(1.0)),
            beta: self.store.add(format!("{name}.bias"), g, ParamKind::Weight, &[channels], Init::Const(0.0)),
            running_mean: self.store.add(
                format!("{name}.running_mean"),
                g,
                ParamKind::RunningMean,
                &[channels],
                Init::Const(0.0),
            ),
            running_var: self.store.add(
                format!("{name}.running_var"),
                g,
                ParamKind::RunningVar,
                &[channels],
                Init::Const(1.0),
            ),
        }
    }

    pub fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> ConvBnRelu {
        ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), cin, cout, kernel, stride, false),
            norm: self.norm(&format!("{name}.norm"), cout),
        }
    }

    pub fn residual(&mut self, name: &str, channels: usize) -> ResidualBlock {
        ResidualBlock {
            first: self.conv_bn_relu(&format!("{name}.a"), channels, channels, 3, 1),
            second: self.conv_bn_relu(&format!("{name}.b"), channels, channels, 3, 1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, p: &ParamView<T>, ctx: &mut ForwardCtx<T>, x: &Var<T>) -> Var<T> {
        let w = p.var(ctx, self.weight);
        let y = ctx.graph.conv2d(x, &w, self.stride);
        match self.bias {
            Some(b) => {
                let b = p.var(ctx, b);
                ctx.graph.add_bias(&y, &b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    /// True when this layer normalizes with batch statistics in `phase`.
    pub fn uses_batch_stats(&self, trainable: &[bool], phase: Phase) -> bool {
        phase != Phase::Inference && trainable[self.gamma]
    }

    pub fn forward<T: Scalar>(&self, p: &ParamView<T>, ctx: &mut ForwardCtx<T>, x: &Var<T>) -> Var<T> {
        let gamma = p.var(ctx, self.gamma);
        let beta = p.var(ctx, self.beta);
        if self.uses_batch_stats(p.trainable, ctx.phase) {
            let (y, moments) = ctx.graph.batch_norm_batch(x, &gamma, &beta, BN_EPS);
            ctx.observations.push((self.running_mean, moments));
            y
        } else {
            ctx.graph.batch_norm_fixed(
                x,
                &gamma,
                &beta,
                p.store.value(self.running_mean),
                p.store.value(self.running_var),
                BN_EPS,
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl ConvBnRelu {
    pub fn forward<T: Scalar>(&self, p: &ParamView<T>, ctx: &mut ForwardCtx<T>, x: &Var<T>) -> Var<T> {
        let y = self.conv.forward(p, ctx, x);
        let y = self.norm.forward(p, ctx, &y);
        ctx.graph.relu(&y)
    }
}

/// `x + CBR(CBR(x))` with 3×3 kernels.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

impl ResidualBlock {
    pub fn forward<T: Scalar>(&self, p: &ParamView<T>, ctx: &mut ForwardCtx<T>, x: &Var<T>) -> Var<T> {
        let h = self.first.forward(p, ctx, x);
        let h = self.second.forward(p, ctx, &h);
        ctx.graph.add(x, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    fn block(channels: usize, seed: u64) -> (ParamStore<f64>, ResidualBlock) {
        let mut store = ParamStore::default();
        let r = LayerBuilder { store: &mut store, group: ParamGroup::Decoder }.residual("r", channels);
        store.initialize(seed);
        (store, r)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_input_and_zero_kernels_give_zero() {
        let (mut store, r) = block(4, 0);
        for id in [r.first.conv.weight, r.second.conv.weight] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let trainable = vec![false; store.len()];
        let p = ParamView { store: &store, trainable: &trainable };
        let mut ctx = ForwardCtx::new(Phase::Inference);
        let x = ctx.graph.constant(Tensor::zeros(&[2, 4, 6, 6]));
        assert!(r.forward(&p, &mut ctx, &x).value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c = rng.random_range(1..6);
            let shape = [rng.random_range(1..3), c, rng.random_range(2..9), rng.random_range(2..9)];
            let (store, r) = block(c, rng.random_range(0..100));
            let trainable = vec![true; store.len()];
            let p = ParamView { store: &store, trainable: &trainable };
            let mut ctx = ForwardCtx::new(Phase::Train);
            let x = ctx.graph.constant(random(&shape, &mut rng));
            assert_eq!(r.forward(&p, &mut ctx, &x).shape(), &shape);
        }
    }

    #[test]
    fn weight_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut store, r) = block(3, 5);
        let trainable = vec![true; store.len()];
        let x = random(&[2, 3, 5, 5], &mut rng);
        let total = |store: &ParamStore<f64>| {
            let p = ParamView { store, trainable: &trainable };
            let mut ctx = ForwardCtx::new(Phase::Train);
            let xv = ctx.graph.constant(x.clone());
            r.forward(&p, &mut ctx, &xv).value().data().iter().sum::<f64>()
        };
        let grads = {
            let p = ParamView { store: &store, trainable: &trainable };
            let mut ctx = ForwardCtx::new(Phase::Train);
            let xv = ctx.graph.constant(x.clone());
            let y = r.forward(&p, &mut ctx, &xv);
            let s: f64 = y.value().data().iter().sum();
            let root = ctx.graph.scalar_with_grad(&y, s, Tensor::full(y.shape(), 1.0));
            ctx.graph.backward(&root)
        };
        for id in [r.first.conv.weight, r.second.conv.weight] {
            for _ in 0..5 {
                let i = rng.random_range(0..store.value(id).len());
                let w = store.value(id).data()[i];
                let h = 1e-5;
                store.value_mut(id).data_mut()[i] = w + h;
                let up = total(&store);
                store.value_mut(id).data_mut()[i] = w - h;
                let down = total(&store);
                store.value_mut(id).data_mut()[i] = w;
                let fd = (up - down) / (2.0 * h);
                let an = grads[&id].data()[i];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn fixed_statistics_norm_is_affine_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let bn = LayerBuilder { store: &mut store, group: ParamGroup::Encoder }.norm("n", 3);
        for id in [bn.gamma, bn.beta, bn.running_mean] {
            let v = random(&[3], &mut rng);
            *store.value_mut(id) = v;
        }
        *store.value_mut(bn.running_var) = Tensor::from_vec(&[3], vec![0.5, 2.0, 1.5]);
        let trainable = vec![false; store.len()];
        let p = ParamView { store: &store, trainable: &trainable };
        let run = |x: &Tensor<f64>| {
            let mut ctx = ForwardCtx::new(Phase::Train);
            let xv = ctx.graph.constant(x.clone());
            bn.forward(&p, &mut ctx, &xv).value().clone()
        };
        let (a, b) = (random(&[2, 3, 4, 4], &mut rng), random(&[2, 3, 4, 4], &mut rng));
        let mid = Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * x + 0.5 * y).collect());
        let (fa, fb, fm) = (run(&a), run(&b), run(&mid));
        for i in 0..fm.len() {
            assert!((fm.data()[i] - 0.5 * (fa.data()[i] + fb.data()[i])).abs() < 1e-12);
        }
    }
}
