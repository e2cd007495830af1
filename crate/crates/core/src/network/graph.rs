//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Var`] carries its value behind an `Arc`; only values that feed a
//! gradient-requiring node are retained by the tape. Untracked intermediate
//! values are freed as soon as the caller drops them, so inference through a
//! frozen encoder does not accumulate memory.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::kernels;
use super::tensor::{Scalar, Tensor};

pub type ParamId = usize;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Batch statistics produced by a batch-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

pub struct Graph<T: Scalar> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of a scalar with respect to the parameters reached by `backward`.
pub type Gradients<T> = HashMap<ParamId, Tensor<T>>;

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Self { recording: true, nodes: RefCell::new(Vec::new()) }
    }

    /// A graph that never records; every result is a plain value.
    pub fn inference() -> Self {
        Self { recording: false, nodes: RefCell::new(Vec::new()) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value: Arc::new(value), node: None }
    }

    pub fn shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var { value, node: None }
    }

    /// A parameter leaf; tracked only when `trainable` and recording.
    pub fn param(&self, value: Arc<Tensor<T>>, id: ParamId, trainable: bool) -> Var<T> {
        if !(self.recording && trainable) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None, param: Some(id) });
        Var { value, node: Some(nodes.len() - 1) }
    }

    fn record<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        if !self.recording || parents.iter().all(Option::is_none) {
            return Var { value: Arc::new(value), node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward: Some(Box::new(backward)), param: None });
        Var { value: Arc::new(value), node: Some(nodes.len() - 1) }
    }

    pub fn conv2d(&self, x: &Var<T>, weight: &Var<T>, stride: usize) -> Var<T> {
        let out = kernels::conv2d(x.value(), weight.value(), stride);
        let (xv, wv) = (x.shared_value(), weight.shared_value());
        self.record(out, &[x, weight], move |g, need| {
            let (dx, dw) = kernels::conv2d_backward(&xv, &wv, stride, g, need[0], need[1]);
            vec![dx, dw]
        })
    }

    pub fn add_bias(&self, x: &Var<T>, bias: &Var<T>) -> Var<T> {
        let out = kernels::add_channel_bias(x.value(), bias.value());
        let c = bias.value().len();
        self.record(out, &[x, bias], move |g, need| {
            let db = need[1].then(|| {
                let sums = kernels::channel_sums(g);
                Tensor::from_vec(&[c], sums.into_iter().map(T::from_f64).collect())
            });
            vec![need[0].then(|| g.clone()), db]
        })
    }

    /// Normalization with statistics of the current batch.
    pub fn batch_norm_batch(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> (Var<T>, BatchMoments) {
        let (n, _, h, w) = x.value().dims4();
        let count = n * h * w;
        let (mean, var) = kernels::channel_moments(x.value());
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gam: Vec<f64> = gamma.value().data().iter().map(|v| v.as_f64()).collect();
        let bet: Vec<f64> = beta.value().data().iter().map(|v| v.as_f64()).collect();
        let scale: Vec<f64> = gam.iter().zip(&invstd).map(|(g, s)| g * s).collect();
        let shift: Vec<f64> = (0..scale.len()).map(|c| bet[c] - mean[c] * scale[c]).collect();
        let out = kernels::channel_affine(
            x.value(),
            &scale.iter().map(|&v| T::from_f64(v)).collect::<Vec<_>>(),
            &shift.iter().map(|&v| T::from_f64(v)).collect::<Vec<_>>(),
        );
        let xv = x.shared_value();
        let (mean_c, invstd_c) = (mean.clone(), invstd.clone());
        let var_out = self.record(out, &[x, gamma, beta], move |g, need| {
            let m = count as f64;
            let sum_dy = kernels::channel_sums(g);
            let sum_dyx = kernels::channel_dot(g, &xv);
            // Σ dy·x̂ per channel
            let dgamma: Vec<f64> =
                (0..sum_dy.len()).map(|c| invstd_c[c] * (sum_dyx[c] - mean_c[c] * sum_dy[c])).collect();
            let dx = need[0].then(|| {
                let a: Vec<T> = scale.iter().map(|&s| T::from_f64(s)).collect();
                let b: Vec<T> =
                    (0..scale.len()).map(|c| T::from_f64(-scale[c] * dgamma[c] / m * invstd_c[c])).collect();
                let k: Vec<T> = (0..scale.len())
                    .map(|c| T::from_f64(scale[c] * (dgamma[c] / m * invstd_c[c] * mean_c[c] - sum_dy[c] / m)))
                    .collect();
                channel_combine(g, &xv, &a, &b, &k)
            });
            let c = sum_dy.len();
            let dg = need[1].then(|| Tensor::from_vec(&[c], dgamma.iter().map(|&v| T::from_f64(v)).collect()));
            let db = need[2].then(|| Tensor::from_vec(&[c], sum_dy.iter().map(|&v| T::from_f64(v)).collect()));
            vec![dx, dg, db]
        });
        (var_out, BatchMoments { mean, var, count })
    }

    /// Normalization with stored running statistics (an affine map per channel).
    pub fn batch_norm_fixed(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Var<T> {
        let c = gamma.value().len();
        let mean: Vec<f64> = running_mean.data().iter().map(|v| v.as_f64()).collect();
        let invstd: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
        let scale: Vec<f64> = (0..c).map(|i| gamma.value().data()[i].as_f64() * invstd[i]).collect();
        let shift: Vec<f64> = (0..c).map(|i| beta.value().data()[i].as_f64() - mean[i] * scale[i]).collect();
        let scale_t: Vec<T> = scale.iter().map(|&v| T::from_f64(v)).collect();
        let shift_t: Vec<T> = shift.iter().map(|&v| T::from_f64(v)).collect();
        let out = kernels::channel_affine(x.value(), &scale_t, &shift_t);
        let xv = x.shared_value();
        self.record(out, &[x, gamma, beta], move |g, need| {
            let dx = need[0].then(|| kernels::channel_affine(g, &scale_t, &vec![T::zero(); c]));
            let sum_dy = kernels::channel_sums(g);
            let dg = need[1].then(|| {
                let sum_dyx = kernels::channel_dot(g, &xv);
                Tensor::from_vec(
                    &[c],
                    (0..c).map(|i| T::from_f64(invstd[i] * (sum_dyx[i] - mean[i] * sum_dy[i]))).collect(),
                )
            });
            let db = need[2].then(|| Tensor::from_vec(&[c], sum_dy.iter().map(|&v| T::from_f64(v)).collect()));
            vec![dx, dg, db]
        })
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
        let xv = x.shared_value();
        self.record(out, &[x], move |g, _| {
            let mut dx = g.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                if v <= T::zero() {
                    *d = T::zero();
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let y = Arc::new(out.clone());
        self.record(out, &[x], move |g, _| {
            let mut dx = g.clone();
            for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                *d = *d * s * (T::one() - s);
            }
            vec![Some(dx)]
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "add operands differ in shape");
        let mut out = a.value().clone();
        out.add_assign(b.value());
        self.record(out, &[a, b], |g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())])
    }

    pub fn concat(&self, parts: &[&Var<T>]) -> Var<T> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = kernels::concat_channels(&values);
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        self.record(out, parts, move |g, need| {
            let mut start = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let part = nd.then(|| kernels::slice_channels(g, start, w));
                    start += w;
                    part
                })
                .collect()
        })
    }

    /// Concatenation along the batch axis.
    pub fn concat_batch(&self, parts: &[&Var<T>]) -> Var<T> {
        let inner = parts[0].shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(&p.shape()[1..], &inner[..], "batch concat operands disagree on C/H/W");
            data.extend_from_slice(p.value().data());
            sizes.push(p.shape()[0]);
        }
        let mut shape = vec![sizes.iter().sum()];
        shape.extend(&inner);
        let out = Tensor::from_vec(&shape, data);
        self.record(out, parts, move |g, need| {
            let per: usize = inner.iter().product();
            let mut start = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&n, &nd)| {
                    let part = nd.then(|| {
                        let mut s = vec![n];
                        s.extend(&inner);
                        Tensor::from_vec(&s, g.data()[start * per..(start + n) * per].to_vec())
                    });
                    start += n;
                    part
                })
                .collect()
        })
    }

    /// Batch items `start..start+len`.
    pub fn slice_batch(&self, x: &Var<T>, start: usize, len: usize) -> Var<T> {
        let full = x.shape().to_vec();
        let per: usize = full[1..].iter().product();
        let mut shape = full.clone();
        shape[0] = len;
        let out = Tensor::from_vec(&shape, x.value().data()[start * per..(start + len) * per].to_vec());
        self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&full);
            dx.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
            vec![Some(dx)]
        })
    }

    pub fn max_pool(&self, x: &Var<T>) -> Var<T> {
        let (out, argmax) = kernels::max_pool_3x3_s2(x.value());
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| vec![Some(kernels::max_pool_backward(&shape, &argmax, g))])
    }

    pub fn avg_pool(&self, x: &Var<T>) -> Var<T> {
        let out = kernels::avg_pool_2x2(x.value());
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| vec![Some(kernels::avg_pool_2x2_backward(&shape, g))])
    }

    pub fn upsample(&self, x: &Var<T>) -> Var<T> {
        let out = kernels::upsample2x(x.value());
        self.record(out, &[x], |g, _| vec![Some(kernels::upsample2x_backward(g))])
    }

    /// Scalar node with a precomputed gradient with respect to `input`.
    pub fn scalar_with_grad(&self, input: &Var<T>, value: T, grad: Tensor<T>) -> Var<T> {
        assert_eq!(grad.shape(), input.shape());
        self.record(Tensor::from_vec(&[1], vec![value]), &[input], move |g, _| {
            let s = g.data()[0];
            vec![Some(grad.map(|v| v * s))]
        })
    }

    /// Reverse sweep from a scalar root; returns gradients of tracked parameters.
    pub fn backward(&self, root: &Var<T>) -> Gradients<T> {
        let mut out = Gradients::new();
        let Some(root_id) = root.node else {
            return out;
        };
        assert_eq!(root.value().len(), 1, "backward needs a scalar root");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root_id).map(|_| None).collect();
        grads[root_id] = Some(Tensor::full(root.shape(), T::one()));
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                match out.get_mut(&pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(pid, g);
                    }
                }
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let need: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = bw(&g, &need);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        out
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// a[c]·dy + b[c]·x + k[c], elementwise per channel.
fn channel_combine<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>, a: &[T], b: &[T], k: &[T]) -> Tensor<T> {
    let (_, c, h, w) = dy.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(dy.shape());
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(p, o)| {
        let ch = p % c;
        let g = &dy.data()[p * plane..(p + 1) * plane];
        let xs = &x.data()[p * plane..(p + 1) * plane];
        for i in 0..plane {
            o[i] = a[ch] * g[i] + b[ch] * xs[i] + k[ch];
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        let mut s = seed;
        let data = (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    // loss = Σ r ⊙ f(x); checks d loss/d param against central differences.
    fn check_param_grad(build: impl Fn(&Graph<f64>, &Var<f64>) -> Var<f64>, param: Tensor<f64>) {
        let g = Graph::new();
        let p = g.param(Arc::new(param.clone()), 0, true);
        let y = build(&g, &p);
        let r = tensor(y.shape(), 99);
        let dot: f64 = y.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let root = g.scalar_with_grad(&y, dot, r.clone());
        let grads = g.backward(&root);
        let analytic = &grads[&0];
        let h = 1e-6;
        for idx in 0..param.len() {
            let eval = |delta: f64| {
                let mut q = param.clone();
                q.data_mut()[idx] += delta;
                let g2 = Graph::inference();
                let pv = g2.constant(q);
                let y = build(&g2, &pv);
                y.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[idx];
            assert!((a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0), "idx {idx}: {a} vs {numeric}");
        }
    }

    #[test]
    fn batch_norm_batch_mode_input_gradient() {
        let gamma = tensor(&[3], 5);
        let beta = tensor(&[3], 6);
        check_param_grad(
            |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                g.batch_norm_batch(x, &ga, &be, 1e-5).0
            },
            tensor(&[2, 3, 3, 2], 7),
        );
    }

    #[test]
    fn batch_norm_batch_mode_gamma_beta_gradients() {
        let x = tensor(&[2, 3, 3, 2], 8);
        let beta = tensor(&[3], 9);
        check_param_grad(
            |g, gam| {
                let xv = g.constant(x.clone());
                let be = g.constant(beta.clone());
                g.batch_norm_batch(&xv, gam, &be, 1e-5).0
            },
            tensor(&[3], 10),
        );
        let gamma = tensor(&[3], 11);
        check_param_grad(
            |g, be| {
                let xv = g.constant(x.clone());
                let ga = g.constant(gamma.clone());
                g.batch_norm_batch(&xv, &ga, be, 1e-5).0
            },
            tensor(&[3], 12),
        );
    }

    #[test]
    fn fixed_norm_pool_upsample_concat_gradients() {
        let rm = tensor(&[2], 13);
        let rv = tensor(&[2], 14).map(|v| v.abs() + 0.5);
        let gamma = tensor(&[2], 15);
        let other = tensor(&[1, 3, 4, 4], 16);
        check_param_grad(
            |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(Tensor::zeros(&[2]));
                let n = g.batch_norm_fixed(x, &ga, &be, &rm, &rv, 1e-5);
                let o = g.constant(other.clone());
                let cat = g.concat(&[&n, &o]);
                let pooled = g.max_pool(&cat);
                let up = g.upsample(&pooled);
                let avg = g.avg_pool(&up);
                g.sigmoid(&avg)
            },
            tensor(&[1, 2, 4, 4], 17),
        );
    }

    #[test]
    fn untracked_inputs_are_not_recorded() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.relu(&a);
        assert!(!b.requires_grad());
        let inf: Graph<f64> = Graph::inference();
        let p = inf.param(Arc::new(Tensor::zeros(&[1])), 0, true);
        assert!(!p.requires_grad());
    }
}
