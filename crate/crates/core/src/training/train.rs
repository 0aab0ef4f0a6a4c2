use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Strategy};
use super::data::{epoch_batches, Batch, Dataset};
use super::model::{stream_rng, Model, DATA_STREAM};
use crate::detector::{assign_targets, Detector, GridTarget, HeadOutput};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{denoise_loss_grad, detection_loss_grad, LossBreakdown, LossWeights};
use crate::optim::{clip_grad_norm, Optimizer};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Restoration loss only; `joint` holds `l2`.
    Pretrain,
    /// Detection loss only; `l2` is 0 and `joint` holds `l1`.
    Detect,
    /// `joint = α·l1 + β·l2`.
    Joint,
}

/// Mean losses over one epoch, measured before each step's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Trained model with everything needed to resume or reproduce it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Epochs completed over all phases.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub model: Model<T>,
    pub detector_optimizer: Optimizer<T>,
    pub denoiser_optimizer: Optimizer<T>,
}

fn targets<T: Scalar>(detector: &Detector, labels: &[Vec<crate::detector::Label<T>>], h: usize, w: usize) -> Result<GridTarget<T>> {
    let grids = Detector::grid_sizes(h, w);
    let parts = labels
        .iter()
        .map(|l| assign_targets(l, &detector.config.anchors, &grids, detector.config.num_classes))
        .collect::<Result<Vec<_>>>()?;
    GridTarget::concat(&parts)
}

fn scaled<T: Scalar>(t: &Tensor<T>, by: f64) -> Tensor<T> {
    let k = T::lit(by);
    t.map(|v| v * k)
}

/// Loss and parameter gradients of `l1` for the detector alone on `images`.
pub fn detection_gradients<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[Vec<crate::detector::Label<T>>],
    weights: &LossWeights,
) -> Result<(LossBreakdown, HashMap<ParamId, Tensor<T>>)> {
    let (_, _, h, w) = images.dims4()?;
    let target = targets(&model.detector, labels, h, w)?;
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let outs = model.detector.forward(&mut g, &model.detector_params, x)?;
    let pred = HeadOutput { scales: outs.iter().map(|&v| g.value(v).clone()).collect() };
    let (b, grads) = detection_loss_grad(&pred, &target, weights)?;
    let root = g.linearized(T::lit(b.l1), outs.into_iter().zip(grads).collect())?;
    let breakdown = LossBreakdown { joint: b.l1, ..b };
    Ok((breakdown, g.backward(root)?.into_params()))
}

/// One shared backward pass of `α·l1 + β·l2`: the detector sees the
/// denoiser's output, so detection gradients reach the denoiser too.
pub fn joint_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, HashMap<ParamId, Tensor<T>>)> {
    let denoiser = model.denoiser.as_ref().ok_or_else(|| Error::config("joint training needs a denoiser"))?;
    let clean = batch.clean.as_ref().ok_or_else(|| Error::config("joint training needs clean counterparts"))?;
    let (_, _, h, w) = batch.images.dims4()?;
    let target = targets(&model.detector, &batch.labels, h, w)?;
    let mut g = Graph::new();
    let x = g.input(batch.images.clone());
    let restored = denoiser.forward(&mut g, &model.denoiser_params, x)?;
    let outs = model.detector.forward(&mut g, &model.detector_params, restored)?;
    let pred = HeadOutput { scales: outs.iter().map(|&v| g.value(v).clone()).collect() };
    let (b, det_grads) = detection_loss_grad(&pred, &target, weights)?;
    let (l2, l2_grad) = denoise_loss_grad(g.value(restored), clean)?;
    let breakdown = b.with_denoise(l2.as_f64(), weights);
    let mut partials: Vec<_> = outs.into_iter().zip(det_grads.iter().map(|t| scaled(t, weights.alpha))).collect();
    partials.push((restored, scaled(&l2_grad, weights.beta)));
    let root = g.linearized(T::lit(breakdown.joint), partials)?;
    Ok((breakdown, g.backward(root)?.into_params()))
}

#[derive(Default)]
struct Mean {
    sum: LossBreakdown,
    count: usize,
}

impl Mean {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let k = n as f64;
        self.sum.cls += b.cls * k;
        self.sum.loc += b.loc * k;
        self.sum.obj += b.obj * k;
        self.sum.l1 += b.l1 * k;
        self.sum.l2 += b.l2 * k;
        self.sum.joint += b.joint * k;
        self.count += n;
    }

    fn finish(self, weights: &LossWeights, phase: Phase) -> LossBreakdown {
        let k = self.count.max(1) as f64;
        let s = self.sum;
        let (cls, loc, obj, l2) = (s.cls / k, s.loc / k, s.obj / k, s.l2 / k);
        // components are averaged, then the totals recombined from them
        match phase {
            Phase::Pretrain => LossBreakdown { l2, joint: l2, ..Default::default() },
            Phase::Detect => {
                let b = LossBreakdown::with_detection(cls, loc, obj, weights);
                LossBreakdown { joint: b.l1, ..b }
            }
            Phase::Joint => LossBreakdown::with_detection(cls, loc, obj, weights).with_denoise(l2, weights),
        }
    }
}

struct Run<'a, T: Scalar> {
    ckpt: Checkpoint<T>,
    rng: rand_chacha::ChaCha8Rng,
    on_epoch: &'a mut dyn FnMut(&EpochRecord),
}

impl<T: Scalar> Run<'_, T> {
    fn record(&mut self, phase: Phase, mean: Mean) {
        self.ckpt.epoch += 1;
        let rec = EpochRecord { epoch: self.ckpt.epoch, phase, losses: mean.finish(&self.ckpt.config.loss, phase) };
        (self.on_epoch)(&rec);
        self.ckpt.history.push(rec);
    }

    fn pretrain_denoiser(&mut self, data: &Dataset<T>, epochs: usize) -> Result<()> {
        let cfg = self.ckpt.config.clone();
        for _ in 0..epochs {
            let mut mean = Mean::default();
            for batch in epoch_batches(data, cfg.batch_size, cfg.hflip, &mut self.rng)? {
                let clean = batch.clean.as_ref().ok_or_else(|| Error::config("denoiser pretraining needs pairs"))?;
                let m = &mut self.ckpt.model;
                let denoiser = m.denoiser.as_ref().ok_or_else(|| Error::config("model has no denoiser"))?;
                let l2 = denoiser.pretrain_step(&mut m.denoiser_params, &mut self.ckpt.denoiser_optimizer, &batch.images, clean)?;
                mean.add(&LossBreakdown { l2: l2.as_f64(), ..Default::default() }, batch.labels.len());
            }
            self.record(Phase::Pretrain, mean);
        }
        Ok(())
    }

    fn train_detector(&mut self, data: &Dataset<T>, epochs: usize) -> Result<()> {
        let cfg = self.ckpt.config.clone();
        for _ in 0..epochs {
            let mut mean = Mean::default();
            for batch in epoch_batches(data, cfg.batch_size, cfg.hflip, &mut self.rng)? {
                let m = &mut self.ckpt.model;
                let (b, mut grads) = detection_gradients(m, &batch.images, &batch.labels, &cfg.loss)?;
                if let Some(c) = cfg.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                self.ckpt.detector_optimizer.step(&mut m.detector_params, &grads)?;
                mean.add(&b, batch.labels.len());
            }
            self.record(Phase::Detect, mean);
        }
        Ok(())
    }

    fn train_joint(&mut self, data: &Dataset<T>, epochs: usize) -> Result<()> {
        let cfg = self.ckpt.config.clone();
        for _ in 0..epochs {
            let mut mean = Mean::default();
            for batch in epoch_batches(data, cfg.batch_size, cfg.hflip, &mut self.rng)? {
                let m = &mut self.ckpt.model;
                let (b, mut grads) = joint_gradients(m, &batch, &cfg.loss)?;
                if let Some(c) = cfg.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                self.ckpt.detector_optimizer.step(&mut m.detector_params, &grads)?;
                self.ckpt.denoiser_optimizer.step(&mut m.denoiser_params, &grads)?;
                mean.add(&b, batch.labels.len());
            }
            self.record(Phase::Joint, mean);
        }
        Ok(())
    }
}

fn start<'a, T: Scalar>(config: &ExperimentConfig, data: &Dataset<T>, on_epoch: &'a mut dyn FnMut(&EpochRecord)) -> Result<Run<'a, T>> {
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    data.image_size()?;
    let seed = config.resolved_seed()?;
    let model = Model::build(config, seed)?;
    Ok(Run {
        ckpt: Checkpoint {
            config: config.clone(),
            seed,
            epoch: 0,
            history: Vec::new(),
            model,
            detector_optimizer: Optimizer::new(config.optimizer),
            denoiser_optimizer: Optimizer::new(config.denoiser_optimizer()),
        },
        rng: stream_rng(seed, DATA_STREAM),
        on_epoch,
    })
}

fn require_strategy(config: &ExperimentConfig, want: Strategy) -> Result<()> {
    if config.strategy != want {
        return Err(Error::config(format!("config strategy is {}, not {want}", config.strategy)));
    }
    Ok(())
}

fn require_pairs<T: Scalar>(data: &Dataset<T>, what: &str) -> Result<()> {
    if !data.is_paired() {
        return Err(Error::config(format!("{what} needs clean counterparts for every image")));
    }
    Ok(())
}

/// Detector trained on `data`'s (degraded) images with `l1`.
pub fn train_direct<T: Scalar>(config: &ExperimentConfig, data: &Dataset<T>, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Checkpoint<T>> {
    require_strategy(config, Strategy::Direct)?;
    let mut run = start(config, data, on_epoch)?;
    run.train_detector(data, config.epochs)?;
    Ok(run.ckpt)
}

/// Denoiser pretrained on pairs, then the detector trained on the clean
/// images with the denoiser frozen.
pub fn train_end_to_end<T: Scalar>(config: &ExperimentConfig, data: &Dataset<T>, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Checkpoint<T>> {
    require_strategy(config, Strategy::EndToEnd)?;
    require_pairs(data, "end-to-end training")?;
    let mut run = start(config, data, on_epoch)?;
    run.pretrain_denoiser(data, config.denoiser_epochs)?;
    run.train_detector(&data.clean_view()?, config.epochs)?;
    Ok(run.ckpt)
}

/// Both networks updated every step from one backward pass of the joint loss.
pub fn train_joint<T: Scalar>(config: &ExperimentConfig, data: &Dataset<T>, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Checkpoint<T>> {
    require_strategy(config, Strategy::Joint)?;
    require_pairs(data, "joint training")?;
    let mut run = start(config, data, on_epoch)?;
    if config.warm_start {
        run.pretrain_denoiser(data, config.denoiser_epochs)?;
    }
    run.train_joint(data, config.epochs)?;
    Ok(run.ckpt)
}

/// Dispatches on `config.strategy`.
pub fn train<T: Scalar>(config: &ExperimentConfig, data: &Dataset<T>, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<Checkpoint<T>> {
    match config.strategy {
        Strategy::Direct => train_direct(config, data, on_epoch),
        Strategy::EndToEnd => train_end_to_end(config, data, on_epoch),
        Strategy::Joint => train_joint(config, data, on_epoch),
    }
}

/// Training data named by `config.data`: degraded images, paired with
/// clean ones when the strategy needs them.
pub fn load_training_data<T: Scalar>(config: &ExperimentConfig) -> Result<Dataset<T>> {
    config.check_data_paths()?;
    let degraded = config.data.degraded.as_deref().expect("checked");
    match (config.strategy, config.data.clean.as_deref()) {
        (Strategy::Direct, _) => Dataset::load_dir(degraded),
        (_, Some(clean)) => Dataset::load_paired(degraded, clean),
        (_, None) => unreachable!("checked by check_data_paths"),
    }
}
