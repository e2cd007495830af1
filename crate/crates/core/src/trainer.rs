//! SGD with momentum on the non-frozen parameters, a triangular cyclic
//! learning rate, batch-norm statistic tracking and the epoch loop.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::graph::{BatchMoments, Gradients};
use crate::network::{self, ForwardCtx, Model, NetworkConfig, ParamId, Phase, Scalar, Tensor, WeightArchive};
use crate::objective::{pooled_soft_dice, total_loss_with_grad, LossConfig};
use crate::sampling::{materialize, plan_epoch, stack_batch, target_batch, SampleRef, TrainingCase};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub l2: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_period_epochs: f64,
    pub seed: u64,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Samples in the closing statistics pass; 0 skips it.
    pub bn_calibration_samples: usize,
    /// Horizon of the running-statistics moving average, in samples.
    pub bn_momentum_samples: f64,
    pub samples_per_case: usize,
    pub tumor_bias: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 160,
            batch_size: 16,
            momentum: 0.9,
            l2: 1e-5,
            lr_max: 2e-4,
            lr_min: 5e-5,
            lr_period_epochs: 20.0,
            seed: 0,
            checkpoint_interval: 0,
            bn_calibration_samples: 5000,
            bn_momentum_samples: 5000.0,
            samples_per_case: crate::sampling::SAMPLES_PER_CASE,
            tumor_bias: 0.5,
        }
    }
}

impl TrainConfig {
    /// Problems as (key, message) pairs.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |k: &str, m: String| out.push((k.to_string(), m));
        if self.epochs == 0 {
            bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.l2 >= 0.0) {
            bad("l2", format!("must be nonnegative, got {}", self.l2));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            bad("lr_min", format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(self.lr_period_epochs > 0.0) {
            bad("lr_period_epochs", "must be positive".into());
        }
        if self.samples_per_case == 0 {
            bad("samples_per_case", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tumor_bias) {
            bad("tumor_bias", "must lie in [0, 1]".into());
        }
        if !(self.bn_momentum_samples >= 1.0) {
            bad("bn_momentum_samples", "must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                p.into_iter().map(|(key, message)| crate::error::ConfigIssue { key, message }).collect(),
            ))
        }
    }

    pub fn steps_per_epoch(&self, cases: usize) -> usize {
        (cases * self.samples_per_case).div_ceil(self.batch_size).max(1)
    }
}

/// Triangular wave starting at `lr_max`, reaching `lr_min` after half a
/// period of `lr_period_epochs · steps_per_epoch` steps.
pub fn cyclic_lr(step: u64, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let period = (cfg.lr_period_epochs * steps_per_epoch as f64).round().max(1.0) as u64;
    let phase = (step % period) as f64;
    let half = period as f64 / 2.0;
    let t = if phase <= half { phase / half } else { (period as f64 - phase) / half };
    (cfg.lr_max * (1.0 - t) + cfg.lr_min * t).clamp(cfg.lr_min, cfg.lr_max)
}

/// Momentum buffers for the trainable parameters only.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub velocity: BTreeMap<ParamId, Tensor<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let velocity = model
            .trainable_ids()
            .into_iter()
            .map(|id| (id, Tensor::zeros(model.store().value(id).shape())))
            .collect();
        Self { velocity, step: 0, lr: 0.0 }
    }
}

/// `v ← momentum·v + g + l2·w; w ← w − lr·v` for every trainable parameter.
/// Missing gradients count as zero.
pub fn sgd_momentum_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(id) = grads.keys().find(|id| !state.velocity.contains_key(id)) {
        return Err(Error::Network(format!(
            "gradient for non-trainable parameter {}",
            model.store().entry(*id).name
        )));
    }
    let (m, l2, lr) = (T::from_f64(cfg.momentum), T::from_f64(cfg.l2), T::from_f64(lr));
    for (&id, v) in state.velocity.iter_mut() {
        let w = model.store_mut().value_mut(id);
        let g = grads.get(&id);
        if let Some(g) = g {
            if g.shape() != w.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
        }
        let vd = v.data_mut();
        let wd = w.data_mut();
        for i in 0..wd.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            vd[i] = m * vd[i] + gi + l2 * wd[i];
            wd[i] -= lr * vd[i];
        }
    }
    state.lr = lr.as_f64();
    state.step += 1;
    Ok(())
}

/// Names of parameters that stay fixed under `config`.
pub fn freeze_mask(config: &NetworkConfig) -> Result<BTreeSet<String>> {
    let skeleton: Model<f32> = Model::skeleton(config.clone())?;
    Ok(network::frozen_parameter_names(config, skeleton.store()))
}

fn running_var_ids<T: Scalar>(model: &Model<T>) -> HashMap<ParamId, ParamId> {
    model.norm_layers().into_iter().map(|l| (l.running_mean, l.running_var)).collect()
}

/// Blends batch statistics into the running estimates with per-sample decay
/// `1 − 1/horizon`.
pub fn update_running_stats<T: Scalar>(
    model: &mut Model<T>,
    observations: &[(ParamId, BatchMoments)],
    batch: usize,
    horizon: f64,
) {
    let keep = (1.0 - 1.0 / horizon).powi(batch as i32);
    let vars = running_var_ids(model);
    for (mean_id, obs) in observations {
        let var_id = vars[mean_id];
        for (id, fresh) in [(*mean_id, &obs.mean), (var_id, &obs.var)] {
            for (r, &f) in model.store_mut().value_mut(id).data_mut().iter_mut().zip(fresh) {
                *r = T::from_f64(keep * r.as_f64() + (1.0 - keep) * f);
            }
        }
    }
}

/// Running (count, mean, M2) per channel, merged with Chan's update.
#[derive(Clone, Debug)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn merge(&mut self, obs: &BatchMoments) {
        let nb = obs.count as f64;
        let n = self.count + nb;
        for c in 0..self.mean.len() {
            let delta = obs.mean[c] - self.mean[c];
            self.mean[c] += delta * nb / n;
            self.m2[c] += obs.var[c] * nb + delta * delta * self.count * nb / n;
        }
        self.count = n;
    }
}

/// Replaces the running statistics of every non-frozen normalization layer
/// with the exact mean and population variance of its input over `batches`.
/// Returns the number of samples seen.
pub fn calibrate_batchnorm<T: Scalar, I>(model: &mut Model<T>, batches: I) -> Result<usize>
where
    I: IntoIterator<Item = Vec<Tensor<T>>>,
{
    let mut acc: BTreeMap<ParamId, Moments> = BTreeMap::new();
    let mut samples = 0;
    for inputs in batches {
        samples += inputs.first().map_or(0, |t| t.shape()[0]);
        let mut ctx = ForwardCtx::new(Phase::Calibrate);
        model.forward(&mut ctx, &inputs)?;
        for (id, obs) in &ctx.observations {
            acc.entry(*id)
                .or_insert_with(|| Moments { count: 0.0, mean: vec![0.0; obs.mean.len()], m2: vec![0.0; obs.mean.len()] })
                .merge(obs);
        }
    }
    if samples == 0 {
        return Err(Error::Empty("calibration stream yielded no samples".into()));
    }
    let vars = running_var_ids(model);
    for (id, m) in acc {
        let store = model.store_mut();
        for (r, &v) in store.value_mut(id).data_mut().iter_mut().zip(&m.mean) {
            *r = T::from_f64(v);
        }
        for (r, &v) in store.value_mut(vars[&id]).data_mut().iter_mut().zip(&m.m2) {
            *r = T::from_f64(v / m.count);
        }
    }
    Ok(samples)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub dice_wt: f64,
    pub dice_tc: f64,
    pub dice_et: f64,
    pub samples: usize,
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn dice_sum(&self) -> f64 {
        self.dice_wt + self.dice_tc + self.dice_et
    }
}

/// Where and how often [`train`] writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

fn build_batch<T: Scalar>(
    cases: &[TrainingCase],
    refs: &[SampleRef],
    size: [usize; 2],
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let samples: Vec<_> = refs.par_iter().map(|s| materialize(cases, s, size)).collect::<Result<_>>()?;
    let stacks: Vec<_> = samples.iter().map(|(s, _)| s).collect();
    let targets: Vec<_> = samples.iter().map(|(_, t)| t).collect();
    Ok((stack_batch(&stacks), target_batch(&targets)))
}

/// Forward, loss, backward and update on one batch. Returns the loss terms.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptimState<T>,
    inputs: &[Tensor<T>],
    targets: &Tensor<T>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<crate::objective::LossBreakdown> {
    let batch = targets.shape()[0];
    let mut ctx = ForwardCtx::new(Phase::Train);
    let probs = model.forward(&mut ctx, inputs)?;
    let (loss, grad) = total_loss_with_grad(probs.value(), targets, loss_cfg)?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged { epoch: 0, step: state.step as usize, loss: loss.total });
    }
    let root = ctx.graph.scalar_with_grad(&probs, T::from_f64(loss.total), grad);
    let grads = ctx.graph.backward(&root);
    let observations = std::mem::take(&mut ctx.observations);
    drop(ctx);
    sgd_momentum_step(model, &grads, state, lr, cfg)?;
    update_running_stats(model, &observations, batch, cfg.bn_momentum_samples);
    Ok(loss)
}

fn calibration_stream<'a, T: Scalar>(
    cases: &'a [TrainingCase],
    cfg: &TrainConfig,
    size: [usize; 2],
) -> impl Iterator<Item = Result<Vec<Tensor<T>>>> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let per_case = cfg.bn_calibration_samples.div_ceil(cases.len().max(1));
    let mut plan = plan_epoch(cases, &mut rng, per_case, cfg.tumor_bias);
    plan.shuffle(&mut rng);
    plan.truncate(cfg.bn_calibration_samples);
    let chunks: Vec<Vec<SampleRef>> = plan.chunks(cfg.batch_size).map(<[SampleRef]>::to_vec).collect();
    chunks.into_iter().map(move |refs| build_batch::<T>(cases, &refs, size).map(|(inputs, _)| inputs))
}

fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path, name: &str) -> Result<()> {
    WeightArchive::from_model(model).save(&dir.join(name))
}

/// Runs the epoch loop, then the statistics pass. With an output directory,
/// writes the log, periodic checkpoints, and `final`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    cases: &[TrainingCase],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out: &TrainOutput,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Empty("training set has no cases".into()));
    }
    let size = model.config().input_size;
    let mut log_file = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::new(model);
    let steps_per_epoch = cfg.steps_per_epoch(cases.len());
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut plan = plan_epoch(cases, &mut rng, cfg.samples_per_case, cfg.tumor_bias);
        plan.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let (mut inter, mut pred, mut truth) = ([0.0; 3], [0.0; 3], [0.0; 3]);
        let mut lr = cyclic_lr(state.step, cfg, steps_per_epoch);
        for refs in plan.chunks(cfg.batch_size) {
            let (inputs, targets) = build_batch::<T>(cases, refs, size)?;
            lr = cyclic_lr(state.step, cfg, steps_per_epoch);
            let loss = train_step(model, &mut state, &inputs, &targets, loss_cfg, cfg, lr).map_err(|e| match e {
                Error::Diverged { step, loss, .. } => Error::Diverged { epoch, step, loss },
                other => other,
            })?;
            loss_sum += loss.total * refs.len() as f64;
            seen += refs.len();
            for k in 0..3 {
                inter[k] += loss.intersection[k];
                pred[k] += loss.predicted[k];
                truth[k] += loss.truth[k];
            }
        }
        let dice = pooled_soft_dice(inter, pred, truth, loss_cfg.epsilon);
        let record = EpochRecord {
            epoch,
            step: state.step,
            lr,
            loss: loss_sum / seen as f64,
            dice_wt: dice[0],
            dice_tc: dice[1],
            dice_et: dice[2],
            samples: seen,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some((file, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Serialization(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 && epoch < cfg.epochs {
                save_checkpoint(model, dir, &format!("epoch_{epoch:04}"))?;
            }
        }
        on_epoch(&record);
        records.push(record);
    }
    if cfg.bn_calibration_samples > 0 {
        let batches: Vec<Vec<Tensor<T>>> = calibration_stream::<T>(cases, cfg, size).collect::<Result<_>>()?;
        calibrate_batchnorm(model, batches)?;
    }
    if let Some(dir) = &out.dir {
        save_checkpoint(model, dir, FINAL_CHECKPOINT)?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_keys_are_named() {
        let cfg = TrainConfig { lr_min: 1.0, batch_size: 0, ..TrainConfig::default() };
        let keys: Vec<String> = cfg.problems().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, vec!["batch_size", "lr_min"]);
    }

    #[test]
    fn chan_merge_matches_direct_moments() {
        let a = [1.0, 2.0, 4.0];
        let b = [3.0, 9.0];
        let moments = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            BatchMoments { mean: vec![m], var: vec![var], count: v.len() }
        };
        let mut acc = Moments { count: 0.0, mean: vec![0.0], m2: vec![0.0] };
        acc.merge(&moments(&a));
        acc.merge(&moments(&b));
        let all = moments(&[1.0, 2.0, 4.0, 3.0, 9.0]);
        assert!((acc.mean[0] - all.mean[0]).abs() < 1e-12);
        assert!((acc.m2[0] / acc.count - all.var[0]).abs() < 1e-12);
    }
}
