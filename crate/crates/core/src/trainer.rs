//! Closed-loop training.
//!
//! Every batch runs `critic_steps` critic updates, which ascend the
//! adversarial loss with the segmenter frozen, followed by one segmenter
//! update that descends `J = l_total + lambda_adv * adversarial_loss` with the
//! critic frozen. With the critic disabled `J = l_total`.
//!
//! Any model implementing [`Backbone`] can be trained this way;
//! [`wrap_with_clf`] checks a backbone and returns a ready trainer.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{adversarial_loss_on, Critic, CriticConfig};
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, StoreHandle, Var};
use crate::mask::{BinaryMask, ProbabilityMap};
use crate::metrics::{dataset_prf, Tolerance};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::supervision::{total_loss_on, LossNodes, LossWeights};
use crate::tensor::Tensor;

/// Graph nodes of a backbone forward pass. `sides` may be empty.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub handle: StoreHandle,
    pub sides: Vec<Var>,
    pub fused: Var,
}

/// A differentiable image-to-probability-map model.
pub trait Backbone {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn in_channels(&self) -> usize;
    fn validate_input(&self, image: &Tensor) -> Result<()>;
    /// Records a forward pass, attaching [`Backbone::params`] to `g` with
    /// the given trainability. The returned maps are `[1,H,W]` in `[0,1]`.
    fn forward<'p>(&'p self, g: &mut Graph<'p>, image: &Tensor, trainable: bool) -> Result<BackboneOutput>;
    /// Input size used to probe the backbone when it is wrapped.
    fn probe_size(&self) -> (usize, usize) {
        (32, 32)
    }

    /// The main output for one image.
    fn predict_map(&self, image: &Tensor) -> Result<ProbabilityMap> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, false)?;
        ProbabilityMap::new(g.value(out.fused).clone())
    }
}

/// Supervised part of the segmenter objective.
pub trait SupervisedLoss {
    fn loss(&self, g: &mut Graph<'_>, out: &BackboneOutput, gt: &BinaryMask) -> Result<LossNodes>;
}

/// Weighted cross-entropy on every side map and on the fused map. A
/// backbone without side maps is scored on its main output alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeepSupervision {
    pub weights: LossWeights,
}

impl SupervisedLoss for DeepSupervision {
    fn loss(&self, g: &mut Graph<'_>, out: &BackboneOutput, gt: &BinaryMask) -> Result<LossNodes> {
        if out.sides.is_empty() {
            let w = LossWeights {
                alpha: Vec::new(),
                balance: self.weights.balance,
            };
            total_loss_on(g, &[], out.fused, gt, &w)
        } else {
            total_loss_on(g, &out.sides, out.fused, gt, &self.weights)
        }
    }
}

/// One training image and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_adv: f64,
    pub threshold: f64,
    pub seed: u64,
    pub critic_steps_per_gen_step: usize,
    pub clf_enabled: bool,
    pub shuffle: bool,
    /// Random horizontal/vertical flips of each training sample.
    pub flips: bool,
    /// Matching tolerance for validation F1.
    pub tolerance: Tolerance,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 500,
            batch_size: 4,
            lambda_adv: 1.0,
            threshold: 0.5,
            seed: 0,
            critic_steps_per_gen_step: 1,
            clf_enabled: true,
            shuffle: true,
            flips: false,
            tolerance: Tolerance::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(alloc::format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return bad(alloc::format!(
                "lambda_adv must be non-negative, got {}",
                self.lambda_adv
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(alloc::format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Segmenter {
        step: u64,
        epoch: usize,
        l_side: f64,
        l_fuse: f64,
        l_total: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        adv_loss: Option<f64>,
        #[serde(rename = "J")]
        j: f64,
    },
    Critic {
        step: u64,
        epoch: usize,
        adv_loss: f64,
    },
}

/// Batch-mean loss terms of one segmenter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmenterReport {
    pub l_side: f64,
    pub l_fuse: f64,
    pub l_total: f64,
    pub adv_loss: Option<f64>,
    pub j: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub mean_l_total: f64,
    pub val_f1: Option<f64>,
    /// Whether this epoch set a new best validation F1.
    pub is_best: bool,
}

/// Training callbacks. Errors abort training.
pub trait Observer<B: Backbone, L: SupervisedLoss> {
    fn on_record(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _summary: &EpochSummary, _trainer: &ClfTrainer<B, L>) -> Result<()> {
        Ok(())
    }
}

/// Ignores every event.
pub struct NoObserver;

impl<B: Backbone, L: SupervisedLoss> Observer<B, L> for NoObserver {}

/// Collects every log record.
#[derive(Default)]
pub struct RecordLog(pub Vec<LogRecord>);

impl<B: Backbone, L: SupervisedLoss> Observer<B, L> for RecordLog {
    fn on_record(&mut self, record: &LogRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

/// Loop position, enough to resume at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Segmenter updates so far.
    pub step: u64,
    pub critic_steps: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_f1: Option<f64>,
    /// Data-order generator.
    pub rng: ChaCha8Rng,
}

/// Seed offset separating critic initialisation from the data order.
const CRITIC_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

pub struct ClfTrainer<B: Backbone, L: SupervisedLoss = DeepSupervision> {
    backbone: B,
    critic: Option<Critic>,
    loss: L,
    config: TrainConfig,
    seg_opt: Adam,
    critic_opt: Option<Adam>,
    progress: Progress,
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>, scale: f64) -> Result<()> {
    match acc {
        None => {
            let mut g = grads;
            g.iter_mut().for_each(|t| t.scale_in_place(scale));
            *acc = Some(g);
        }
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&grads) {
                x.axpy(scale, y)?;
            }
        }
    }
    Ok(())
}

fn flip(sample: &Sample, horizontal: bool, vertical: bool) -> Result<Sample> {
    if !horizontal && !vertical {
        return Ok(sample.clone());
    }
    let (c, h, w) = sample.image.dims3()?;
    let src = |y: usize, x: usize| {
        (
            if vertical { h - 1 - y } else { y },
            if horizontal { w - 1 - x } else { x },
        )
    };
    let image = Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = src(y, x);
        sample.image.data()[ch * h * w + sy * w + sx]
    });
    let mask = BinaryMask::from_fn(h, w, |y, x| {
        let (sy, sx) = src(y, x);
        sample.mask.get(sy, sx)
    });
    Ok(Sample { image, mask })
}

impl<B: Backbone, L: SupervisedLoss> ClfTrainer<B, L> {
    /// A trainer with fresh optimizers. The critic is only built when
    /// `config.clf_enabled`.
    pub fn new(backbone: B, loss: L, critic_config: CriticConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let critic = if config.clf_enabled {
            if critic_config.in_channels != backbone.in_channels() {
                return Err(Error::InvalidConfig(alloc::format!(
                    "critic takes {} channels but the backbone takes {}",
                    critic_config.in_channels,
                    backbone.in_channels()
                )));
            }
            Some(Critic::new(
                critic_config,
                config.seed.wrapping_add(CRITIC_SEED_OFFSET),
            )?)
        } else {
            None
        };
        Ok(Self::with_critic(backbone, loss, critic, config))
    }

    /// A trainer around an existing critic (`None` disables the loop).
    pub fn with_critic(backbone: B, loss: L, critic: Option<Critic>, mut config: TrainConfig) -> Self {
        config.clf_enabled = critic.is_some();
        let seg_opt = Adam::new(config.adam(), backbone.params());
        let critic_opt = critic.as_ref().map(|c| Adam::new(config.adam(), c.params()));
        let progress = Progress {
            step: 0,
            critic_steps: 0,
            epoch: 0,
            best_val_f1: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        ClfTrainer {
            backbone,
            critic,
            loss,
            config,
            seg_opt,
            critic_opt,
            progress,
        }
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn into_backbone(self) -> B {
        self.backbone
    }

    pub fn critic(&self) -> Option<&Critic> {
        self.critic.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn segmenter_optimizer(&self) -> &Adam {
        &self.seg_opt
    }

    pub fn critic_optimizer(&self) -> Option<&Adam> {
        self.critic_opt.as_ref()
    }

    /// Restores optimizer moments and loop position saved from a trainer
    /// with the same layout.
    pub fn restore(&mut self, progress: Progress, seg_opt: Adam, critic_opt: Option<Adam>) -> Result<()> {
        if seg_opt.m.len() != self.backbone.params().len() || critic_opt.is_some() != self.critic.is_some() {
            return Err(contract!("optimizer state does not match the trainer layout"));
        }
        if let (Some(c), Some(o)) = (&self.critic, &critic_opt) {
            if o.m.len() != c.params().len() {
                return Err(contract!("critic optimizer state does not match the critic"));
            }
        }
        self.progress = progress;
        self.seg_opt = seg_opt;
        self.critic_opt = critic_opt;
        Ok(())
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        self.backbone.validate_input(&s.image)?;
        let (_, h, w) = s.image.dims3()?;
        if (s.mask.height(), s.mask.width()) != (h, w) {
            return Err(contract!(
                "mask {}x{} does not match image {}x{}",
                s.mask.height(),
                s.mask.width(),
                h,
                w
            ));
        }
        if let Some(c) = &self.critic {
            c.validate_input(s.image.shape())?;
        }
        Ok(())
    }

    /// Validates every sample, naming the first offending index.
    pub fn check_dataset(&self, samples: &[Sample]) -> Result<()> {
        for (i, s) in samples.iter().enumerate() {
            self.check_sample(s)
                .map_err(|e| Error::Contract(alloc::format!("sample {i}: {e}")))?;
        }
        Ok(())
    }

    fn predictions(&self, batch: &[Sample]) -> Result<Vec<Tensor>> {
        batch
            .iter()
            .map(|s| self.backbone.predict_map(&s.image).map(ProbabilityMap::into_tensor))
            .collect()
    }

    fn batch_adv_loss(&self, batch: &[Sample], preds: &[Tensor], grads: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
        let critic = self
            .critic
            .as_ref()
            .ok_or_else(|| contract!("the critic is disabled"))?;
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut acc = None;
        for (s, p) in batch.iter().zip(preds) {
            let mut g = Graph::new();
            let h = g.attach(critic.params(), grads);
            let x = g.input(s.image.clone());
            let sp = g.input(p.clone());
            let y = g.input(s.mask.to_tensor());
            let l = adversarial_loss_on(&mut g, h, critic, x, sp, y)?;
            total += g.value(l).item();
            if grads {
                let mut gr = g.backward(l)?;
                accumulate(&mut acc, gr.take_store(&g, h), scale)?;
            }
        }
        Ok((total * scale, acc))
    }

    fn critic_step_with(&mut self, batch: &[Sample], preds: &[Tensor]) -> Result<f64> {
        let (_, grads) = self.batch_adv_loss(batch, preds, true)?;
        let grads = grads.ok_or(Error::EmptyDataset)?;
        let critic = self
            .critic
            .as_mut()
            .ok_or_else(|| contract!("the critic is disabled"))?;
        let opt = self
            .critic_opt
            .as_mut()
            .ok_or_else(|| contract!("the critic is disabled"))?;
        opt.step(critic.params_mut(), &grads, true)?;
        critic.clip();
        self.progress.critic_steps += 1;
        Ok(self.batch_adv_loss(batch, preds, false)?.0)
    }

    /// One critic update: ascends the batch-mean adversarial loss with the
    /// segmenter frozen. Returns the loss after the update.
    pub fn critic_step(&mut self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let preds = self.predictions(batch)?;
        self.critic_step_with(batch, &preds)
    }

    /// The segmenter objective of one sample, recorded on `g`. Returns the
    /// loss nodes, the adversarial term if any, `J` and the backbone handle.
    pub fn objective<'p>(
        &'p self,
        g: &mut Graph<'p>,
        sample: &Sample,
    ) -> Result<(LossNodes, Option<Var>, Var, StoreHandle)> {
        let out = self.backbone.forward(g, &sample.image, true)?;
        let nodes = self.loss.loss(g, &out, &sample.mask)?;
        match &self.critic {
            None => {
                let j = nodes.l_total;
                Ok((nodes, None, j, out.handle))
            }
            Some(critic) => {
                let hc = g.attach(critic.params(), false);
                let x = g.input(sample.image.clone());
                let y = g.input(sample.mask.to_tensor());
                let adv = adversarial_loss_on(g, hc, critic, x, out.fused, y)?;
                let weighted = g.scale(adv, self.config.lambda_adv);
                let j = g.add(nodes.l_total, weighted)?;
                Ok((nodes, Some(adv), j, out.handle))
            }
        }
    }

    /// One segmenter update descending the batch-mean `J` with the critic
    /// frozen.
    pub fn segmenter_step(&mut self, batch: &[Sample]) -> Result<SegmenterReport> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut acc = None;
        let mut sums = [0.0; 5];
        for s in batch {
            let mut g = Graph::new();
            let (nodes, adv, j, h) = self.objective(&mut g, s)?;
            let r = nodes.report(&g);
            sums[0] += r.l_side;
            sums[1] += r.l_fuse;
            sums[2] += r.l_total;
            sums[3] += adv.map_or(0.0, |a| g.value(a).item());
            sums[4] += g.value(j).item();
            let mut grads = g.backward(j)?;
            accumulate(&mut acc, grads.take_store(&g, h), scale)?;
        }
        let grads = acc.ok_or(Error::EmptyDataset)?;
        self.seg_opt.step(self.backbone.params_mut(), &grads, false)?;
        self.progress.step += 1;
        Ok(SegmenterReport {
            l_side: sums[0] * scale,
            l_fuse: sums[1] * scale,
            l_total: sums[2] * scale,
            adv_loss: self.critic.as_ref().map(|_| sums[3] * scale),
            j: sums[4] * scale,
        })
    }

    /// Critic steps followed by one segmenter step, with log records.
    pub fn train_batch<O: Observer<B, L>>(&mut self, batch: &[Sample], observer: &mut O) -> Result<SegmenterReport> {
        let epoch = self.progress.epoch + 1;
        if self.critic.is_some() && self.config.critic_steps_per_gen_step > 0 {
            let preds = self.predictions(batch)?;
            for _ in 0..self.config.critic_steps_per_gen_step {
                let adv_loss = self.critic_step_with(batch, &preds)?;
                observer.on_record(&LogRecord::Critic {
                    step: self.progress.critic_steps,
                    epoch,
                    adv_loss,
                })?;
            }
        }
        let r = self.segmenter_step(batch)?;
        observer.on_record(&LogRecord::Segmenter {
            step: self.progress.step,
            epoch,
            l_side: r.l_side,
            l_fuse: r.l_fuse,
            l_total: r.l_total,
            adv_loss: r.adv_loss,
            j: r.j,
        })?;
        Ok(r)
    }

    /// Dataset F1 of thresholded predictions under the configured tolerance.
    pub fn f1_on(&self, samples: &[Sample]) -> Result<f64> {
        evaluate_f1(&self.backbone, samples, self.config.threshold, self.config.tolerance)
    }

    /// Trains until `config.epochs` epochs are complete, continuing from the
    /// current [`Progress`].
    pub fn fit<O: Observer<B, L>>(&mut self, train: &[Sample], val: &[Sample], observer: &mut O) -> Result<()> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.check_dataset(train)?;
        self.check_dataset(val)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        while self.progress.epoch < self.config.epochs {
            order.sort_unstable();
            if self.config.shuffle {
                order.shuffle(&mut self.progress.rng);
            }
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&i| {
                        if self.config.flips {
                            let hf = self.progress.rng.random::<bool>();
                            let vf = self.progress.rng.random::<bool>();
                            flip(&train[i], hf, vf)
                        } else {
                            Ok(train[i].clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                total += self.train_batch(&batch, observer)?.l_total;
                batches += 1;
            }
            self.progress.epoch += 1;
            let val_f1 = if val.is_empty() { None } else { Some(self.f1_on(val)?) };
            let is_best = match (val_f1, self.progress.best_val_f1) {
                (Some(f), Some(best)) => f > best,
                (Some(_), None) => true,
                _ => false,
            };
            if is_best {
                self.progress.best_val_f1 = val_f1;
            }
            let summary = EpochSummary {
                epoch: self.progress.epoch,
                mean_l_total: total / batches as f64,
                val_f1,
                is_best,
            };
            observer.on_epoch_end(&summary, self)?;
        }
        Ok(())
    }
}

/// Dataset F1 of a backbone's thresholded main output.
pub fn evaluate_f1<B: Backbone + ?Sized>(
    backbone: &B,
    samples: &[Sample],
    threshold: f64,
    tol: Tolerance,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(backbone.predict_map(&s.image)?.threshold(threshold));
        gts.push(s.mask.clone());
    }
    Ok(dataset_prf(&preds, &gts, tol)?.f1)
}

/// Checks that `backbone` produces probability maps on a dummy input, then
/// returns a closed-loop trainer for it.
pub fn wrap_with_clf<B: Backbone, L: SupervisedLoss>(
    backbone: B,
    loss: L,
    critic_config: CriticConfig,
    mut config: TrainConfig,
) -> Result<ClfTrainer<B, L>> {
    let (h, w) = backbone.probe_size();
    let probe = Tensor::full(&[backbone.in_channels(), h, w], 0.5);
    {
        let mut g = Graph::new();
        let out = backbone.forward(&mut g, &probe, false)?;
        for &v in out.sides.iter().chain([&out.fused]) {
            let t = g.value(v);
            if t.dims3().map(|d| d.0) != Ok(1) || t.shape()[1..] != [h, w] {
                return Err(contract!(
                    "backbone output has shape {:?}, expected [1, {h}, {w}]",
                    t.shape()
                ));
            }
            if let Some(bad) = t.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(contract!("backbone output {} is not a probability", bad));
            }
        }
    }
    config.clf_enabled = true;
    ClfTrainer::new(backbone, loss, critic_config, config)
}

/// Random flips used by [`ClfTrainer::fit`]; exposed for tests.
pub fn flip_sample(sample: &Sample, horizontal: bool, vertical: bool) -> Result<Sample> {
    flip(sample, horizontal, vertical)
}
