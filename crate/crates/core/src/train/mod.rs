//! Two-stage pretraining: a contrastive stage that updates the encoder and
//! projection head on `L_ct + λ·L_msr`, then a meta stage that updates the
//! semantic-weight network by differentiating the contrastive loss of a
//! one-step look-ahead of the encoder.

mod optim;
mod step;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_pair, stack, AugmentConfig};
use crate::losses::{LossError, NegativesMode};
use crate::nn::{ModelBundle, ModelConfig};
use crate::rng::{stream, Stream};
use crate::tensor::{Tensor, TensorError};

pub use optim::{scheduled_lr, Optimizer, OptimizerKind};
pub use step::{
    build_objectives, contrastive_reference, fast_weights, meta_gradient, meta_objective_value, meta_step,
    stage1_gradient, stage1_step, FastWeights, MetaMetrics, Objectives, StageMetrics,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite value in {stage} stage at step {step}: {source}")]
    NonFinite {
        stage: Stage,
        step: usize,
        source: TensorError,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset has {have} images but the batch size is {need}")]
    DatasetTooSmall { have: usize, need: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Contrastive,
    Meta,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Contrastive => "contrastive",
            Stage::Meta => "meta",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Weight of `L_msr` in the stage-1 objective.
    pub lambda: f64,
    /// Weight of `L_uni` in the meta objective.
    pub gamma: f64,
    /// Gaussian kernel scale of the uniformity loss.
    pub t: f64,
    pub tau: f64,
    /// Stage-1 learning rate, also the step of the look-ahead update.
    pub alpha: f64,
    /// Meta-stage learning rate.
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub meta_optimizer: OptimizerKind,
    pub warmup_iters: usize,
    /// Epochs before the end at which the rate is multiplied by `lr_drop`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop: f64,
    pub weight_decay: f64,
    pub meta_weight_decay: f64,
    /// Meta iterations per epoch; `None` runs as many as stage 1.
    pub meta_steps: Option<usize>,
    pub seed: u64,
    pub negatives: NegativesMode,
    pub deterministic: bool,
    /// Treat the inner gradient of the look-ahead as a constant.
    pub first_order: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 1.0,
            t: 2.0,
            tau: 0.5,
            alpha: 3e-3,
            beta: 3e-3,
            batch_size: 64,
            epochs: 100,
            optimizer: OptimizerKind::Adam,
            meta_optimizer: OptimizerKind::Adam,
            warmup_iters: 500,
            lr_drop_epochs: vec![50, 25],
            lr_drop: 0.2,
            weight_decay: 1e-6,
            meta_weight_decay: 0.0,
            meta_steps: None,
            seed: 0,
            negatives: NegativesMode::CrossView,
            deterministic: true,
            first_order: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return bad(format!(
                "lambda and gamma must be >= 0, got {} and {}",
                self.lambda, self.gamma
            ));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad(format!(
                "alpha and beta must be > 0, got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.t > 0.0) {
            return bad(format!("t must be > 0, got {}", self.t));
        }
        if model.semantic_vectors < 2 {
            return bad(format!(
                "at least 2 semantic vectors required, got {}",
                model.semantic_vectors
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        if !(self.weight_decay >= 0.0 && self.meta_weight_decay >= 0.0 && self.lr_drop > 0.0) {
            return bad("weight decay must be >= 0 and lr_drop > 0".into());
        }
        if self.meta_steps == Some(0) && (self.lambda > 0.0 || self.gamma > 0.0) {
            return bad("meta_steps = 0 disables the regularizer; set lambda = gamma = 0 instead".into());
        }
        Ok(())
    }

    /// With `λ = γ = 0` the meta objective does not depend on `f_msr`, so its
    /// gradient is identically zero and the stage is skipped.
    pub fn meta_stage_active(&self) -> bool {
        self.lambda > 0.0 || self.gamma > 0.0
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub step: usize,
    #[serde(rename = "L_ct")]
    pub l_ct: f64,
    #[serde(rename = "L_msr")]
    pub l_msr: f64,
    #[serde(rename = "L_to")]
    pub l_to: f64,
    #[serde(rename = "L_uni")]
    pub l_uni: Option<f64>,
    pub meta_loss: Option<f64>,
    pub lr: f64,
    /// Zero in deterministic mode so logs compare bit for bit.
    pub wall_ms: f64,
}

/// Original images `[N, S, S, C]` and their two views stacked view-major
/// (`[2N, S, S, C]`, rows `0..N` first view).
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub originals: Tensor,
    pub views: Tensor,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.originals.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_minibatch(
    images: &[Tensor],
    indices: &[usize],
    augment: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Minibatch {
    let originals: Vec<&Tensor> = indices.iter().map(|&i| &images[i]).collect();
    let (first, second): (Vec<Tensor>, Vec<Tensor>) = originals.iter().map(|x| augment_pair(x, augment, rng)).unzip();
    let views: Vec<&Tensor> = first.iter().chain(&second).collect();
    Minibatch {
        originals: stack(&originals),
        views: stack(&views),
    }
}

/// Endless shuffled epochs over `0..len` in `batch`-sized chunks; the tail
/// that does not fill a batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(rng: ChaCha8Rng, len: usize, batch: usize) -> Self {
        Self {
            rng,
            order: (0..len).collect(),
            cursor: len,
            batch,
        }
    }

    pub fn batches_per_pass(&self) -> usize {
        self.order.len() / self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Mutable training state across epochs.
pub struct Trainer {
    pub config: TrainingConfig,
    pub bundle: ModelBundle,
    opt: Optimizer,
    meta_opt: Optimizer,
    sampler: Option<BatchSampler>,
    meta_sampler: Option<BatchSampler>,
    augment_rng: ChaCha8Rng,
    meta_augment_rng: ChaCha8Rng,
    epoch: usize,
    stage1_iter: usize,
    meta_iter: usize,
}

impl Trainer {
    pub fn new(config: TrainingConfig, bundle: ModelBundle) -> Result<Self> {
        config.validate(&bundle.config)?;
        let stage1: Vec<Tensor> = bundle
            .encoder
            .tensors
            .iter()
            .chain(&bundle.projection.tensors)
            .cloned()
            .collect();
        let opt = Optimizer::new(config.optimizer, config.weight_decay, &stage1);
        let meta_opt = Optimizer::new(config.meta_optimizer, config.meta_weight_decay, &bundle.msr.tensors);
        let seed = config.seed;
        Ok(Self {
            opt,
            meta_opt,
            sampler: None,
            meta_sampler: None,
            augment_rng: stream(seed, Stream::Augment),
            meta_augment_rng: stream(seed, Stream::MetaAugment),
            epoch: 0,
            stage1_iter: 0,
            meta_iter: 0,
            config,
            bundle,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn lr(&self, base: f64, iteration: usize) -> f64 {
        let c = &self.config;
        scheduled_lr(
            base,
            iteration,
            c.warmup_iters,
            self.epoch,
            c.epochs,
            &c.lr_drop_epochs,
            c.lr_drop,
        )
    }

    /// Runs one epoch of both stages on `images` (`[S, S, C]` each).
    pub fn run_epoch(
        &mut self,
        images: &[Tensor],
        augment: &AugmentConfig,
        sink: &mut dyn FnMut(&StepRecord),
    ) -> Result<()> {
        let n = self.config.batch_size;
        if images.len() < n {
            return Err(TrainError::DatasetTooSmall {
                have: images.len(),
                need: n,
            });
        }
        let seed = self.config.seed;
        let sampler = self
            .sampler
            .get_or_insert_with(|| BatchSampler::new(stream(seed, Stream::Sampling), images.len(), n));
        let steps = sampler.batches_per_pass();
        let clock = Instant::now();
        let wall = |deterministic: bool| {
            if deterministic {
                0.0
            } else {
                clock.elapsed().as_secs_f64() * 1e3
            }
        };

        for _ in 0..steps {
            let idx = self.sampler.as_mut().expect("initialized").next_batch();
            let batch = make_minibatch(images, &idx, augment, &mut self.augment_rng);
            let lr = self.lr(self.config.alpha, self.stage1_iter);
            let step = self.stage1_iter;
            let m = stage1_step(&mut self.bundle, &batch, &self.config, &mut self.opt, lr)
                .map_err(|e| non_finite(e, Stage::Contrastive, step))?;
            sink(&StepRecord {
                epoch: self.epoch,
                stage: Stage::Contrastive,
                step,
                l_ct: m.l_ct,
                l_msr: m.l_msr,
                l_to: m.l_to,
                l_uni: None,
                meta_loss: None,
                lr,
                wall_ms: wall(self.config.deterministic),
            });
            self.stage1_iter += 1;
        }

        if self.config.meta_stage_active() {
            let meta_sampler = self
                .meta_sampler
                .get_or_insert_with(|| BatchSampler::new(stream(seed, Stream::MetaSampling), images.len(), n));
            let meta_steps = self.config.meta_steps.unwrap_or(meta_sampler.batches_per_pass());
            for _ in 0..meta_steps {
                let idx = self.meta_sampler.as_mut().expect("initialized").next_batch();
                let batch = make_minibatch(images, &idx, augment, &mut self.meta_augment_rng);
                let lr = self.lr(self.config.beta, self.meta_iter);
                let step = self.meta_iter;
                let m = meta_step(&mut self.bundle, &batch, &self.config, &mut self.meta_opt, lr)
                    .map_err(|e| non_finite(e, Stage::Meta, step))?;
                sink(&StepRecord {
                    epoch: self.epoch,
                    stage: Stage::Meta,
                    step,
                    l_ct: m.l_ct,
                    l_msr: m.l_msr,
                    l_to: m.l_to,
                    l_uni: Some(m.l_uni),
                    meta_loss: Some(m.meta_loss),
                    lr,
                    wall_ms: wall(self.config.deterministic),
                });
                self.meta_iter += 1;
            }
        }
        self.epoch += 1;
        Ok(())
    }
}

fn non_finite(e: TrainError, stage: Stage, step: usize) -> TrainError {
    match e {
        TrainError::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::NonFiniteData(_))) => {
            TrainError::NonFinite { stage, step, source: t }
        }
        TrainError::Loss(LossError::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::NonFiniteData(_)))) => {
            TrainError::NonFinite { stage, step, source: t }
        }
        other => other,
    }
}

/// Runs `config.epochs` epochs and returns the trained bundle.
pub fn train(
    config: &TrainingConfig,
    bundle: ModelBundle,
    images: &[Tensor],
    augment: &AugmentConfig,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<ModelBundle> {
    let mut trainer = Trainer::new(config.clone(), bundle)?;
    if images.len() < config.batch_size {
        return Err(TrainError::DatasetTooSmall {
            have: images.len(),
            need: config.batch_size,
        });
    }
    for _ in 0..config.epochs {
        trainer.run_epoch(images, augment, sink)?;
    }
    Ok(trainer.bundle)
}
