//! The adversarial training loop: interleaved discriminator and generator
//! pre-training, then epochs of Monte-Carlo rewarded Worker/Manager updates,
//! discriminator updates and periodic supervised epochs.

pub mod reward;
pub mod update;

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::corpus::OracleModel;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::metrics::{MetricsRow, Phase};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{derive, seeded};

pub use reward::{
    bootstrap_rescale, intrinsic_reward, intrinsic_rewards, mc_q_estimate, reward_matrix,
    RewardMatrix, Scorer, Squash,
};
pub use update::{
    generator_nll, manager_adv_step, manager_pretrain_step, prefix_features, train_discriminator,
    worker_adv_step, worker_mle_step, worker_weights, WorkerReward,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Monte-Carlo rollouts per prefix (`N`).
    pub rollout_count: usize,
    /// Rescale smoothness `δ`.
    pub rescale_delta: f64,
    pub squash: Squash,
    pub worker_reward: WorkerReward,
    /// Adversarial epochs per supervised epoch.
    pub interleave_period: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    /// Discriminator epochs per d-step (`k`).
    pub d_epochs: usize,
    /// Negatives generated per d-step; 0 means as many as there are positives.
    pub d_negatives: usize,
    pub pretrain_rounds: usize,
    pub pretrain_d_steps: usize,
    pub pretrain_g_epochs: usize,
    pub adv_epochs: usize,
    /// Pre-training stops after this many epochs without validation
    /// improvement.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub manager_lr: f64,
    pub worker_lr: f64,
    pub disc_lr: f64,
    pub adv_manager_lr: f64,
    pub adv_worker_lr: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            rollout_count: 4,
            rescale_delta: 12.0,
            squash: Squash::Sigmoid,
            worker_reward: WorkerReward::Intrinsic,
            interleave_period: 15,
            g_steps: 1,
            d_steps: 5,
            d_epochs: 3,
            d_negatives: 0,
            pretrain_rounds: 10,
            pretrain_d_steps: 1,
            pretrain_g_epochs: 5,
            adv_epochs: 100,
            patience: 5,
            optimizer: OptimizerKind::Sgd,
            manager_lr: 0.001,
            worker_lr: 0.001,
            disc_lr: 1e-4,
            adv_manager_lr: 0.001,
            adv_worker_lr: 0.001,
            eval_samples: 1000,
            seed: 88,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.rollout_count == 0 {
            return bad("rollout_count must be ≥ 1");
        }
        if self.rescale_delta.is_nan() || self.rescale_delta <= 0.0 {
            return bad("rescale_delta must be > 0");
        }
        if self.interleave_period == 0 {
            return bad("interleave_period must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        for (name, lr) in [
            ("manager_lr", self.manager_lr),
            ("worker_lr", self.worker_lr),
            ("disc_lr", self.disc_lr),
            ("adv_manager_lr", self.adv_manager_lr),
            ("adv_worker_lr", self.adv_worker_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a positive number"
                )));
            }
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be ≥ 1");
        }
        Ok(())
    }
}

/// Training and validation data. Oracle NLL is reported when an oracle is
/// supplied; otherwise early stopping uses the generator's NLL on `valid`.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [Vec<usize>],
    pub valid: &'a [Vec<usize>],
    pub oracle: Option<&'a OracleModel>,
}

/// Receives metrics rows and end-of-epoch notifications.
pub trait Observer {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;

    fn epoch_end(&mut self, _phase: Phase, _epoch: usize, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl Observer for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub untrained_nll: Option<f64>,
    /// Validation metric after each pre-training G epoch.
    pub pretrain_nll: Vec<f64>,
    /// Validation metric after each adversarial epoch.
    pub adversarial_nll: Vec<f64>,
}

impl Summary {
    pub fn pretrain_min(&self) -> Option<f64> {
        self.pretrain_nll.iter().copied().reduce(f64::min)
    }

    pub fn adversarial_min(&self) -> Option<f64> {
        self.adversarial_nll.iter().copied().reduce(f64::min)
    }
}

// seed namespaces
const S_PRE_D: u64 = 1;
const S_PRE_G: u64 = 2;
const S_ADV_G: u64 = 3;
const S_ADV_D: u64 = 4;
const S_MLE: u64 = 5;
const S_EVAL: u64 = 6;

#[derive(Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    manager_opt: Optimizer,
    worker_opt: Optimizer,
    adv_manager_opt: Optimizer,
    adv_worker_opt: Optimizer,
    disc_opt: Optimizer,
    /// Real-prefix features, valid until the discriminator changes.
    feature_cache: Option<Vec<Vec<Vec<f64>>>>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        generator: Generator,
        discriminator: Discriminator,
    ) -> Result<Self> {
        config.validate()?;
        if generator.config.feature_dim != discriminator.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "generator expects {}-dimensional features, discriminator leaks {}",
                generator.config.feature_dim,
                discriminator.feature_dim()
            )));
        }
        let kind = config.optimizer;
        Ok(Trainer {
            manager_opt: Optimizer::new(kind, config.manager_lr),
            worker_opt: Optimizer::new(kind, config.worker_lr),
            adv_manager_opt: Optimizer::new(kind, config.adv_manager_lr),
            adv_worker_opt: Optimizer::new(kind, config.adv_worker_lr),
            disc_opt: Optimizer::new(kind, config.disc_lr),
            config,
            generator,
            discriminator,
            feature_cache: None,
        })
    }

    /// Replaces the schedule and learning rates, keeping optimizer state.
    pub fn set_config(&mut self, config: TrainConfig) {
        self.manager_opt.set_lr(config.manager_lr);
        self.worker_opt.set_lr(config.worker_lr);
        self.adv_manager_opt.set_lr(config.adv_manager_lr);
        self.adv_worker_opt.set_lr(config.adv_worker_lr);
        self.disc_opt.set_lr(config.disc_lr);
        self.config = config;
    }

    /// Validation metric: oracle NLL of samples, or generator NLL on the
    /// validation set.
    pub fn evaluate(&self, data: &TrainData<'_>) -> f64 {
        let ex = self.discriminator.extractor();
        match data.oracle {
            Some(oracle) => {
                let samples = self.generator.sample(
                    &ex,
                    self.config.eval_samples,
                    self.generator.config.temperature_sample,
                    derive(self.config.seed, &[S_EVAL]),
                );
                oracle.nll(&samples).per_sequence
            }
            None => generator_nll(&self.generator, &ex, data.valid),
        }
    }

    fn negatives(&self, count: usize, seed: u64) -> Vec<Vec<usize>> {
        let ex = self.discriminator.extractor();
        self.generator
            .sample(&ex, count, self.generator.config.temperature_train, seed)
    }

    fn d_step(&mut self, data: &TrainData<'_>, seed: u64) -> Result<f64> {
        let count = match self.config.d_negatives {
            0 => data.train.len(),
            n => n,
        };
        let fake = self.negatives(count, derive(seed, &[0]));
        let real: Vec<Vec<usize>> = if count < data.train.len() {
            let mut idx: Vec<usize> = (0..data.train.len()).collect();
            idx.shuffle(&mut seeded(derive(seed, &[1])));
            idx[..count]
                .iter()
                .map(|&i| data.train[i].clone())
                .collect()
        } else {
            data.train.to_vec()
        };
        let loss = train_discriminator(
            &mut self.discriminator,
            &mut self.disc_opt,
            &real,
            &fake,
            self.config.d_epochs,
            self.config.batch_size,
            derive(seed, &[2]),
        )?;
        self.feature_cache = None;
        Ok(loss)
    }

    fn real_features(&mut self, data: &TrainData<'_>) -> &[Vec<Vec<f64>>] {
        if self.feature_cache.is_none() {
            use rayon::prelude::*;
            let ex = self.discriminator.extractor();
            let feats = data
                .train
                .par_iter()
                .map(|s| prefix_features(&ex, s))
                .collect();
            self.feature_cache = Some(feats);
        }
        self.feature_cache.as_deref().unwrap()
    }

    /// One supervised epoch over the training set: Manager transition
    /// matching plus Worker maximum likelihood. Returns mean
    /// `(worker, manager)` losses.
    pub fn mle_epoch(&mut self, data: &TrainData<'_>, seed: u64) -> Result<(f64, f64)> {
        let feats = self.real_features(data).to_vec();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seeded(seed));
        let (mut wl, mut ml, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let bf: Vec<Vec<Vec<f64>>> = chunk.iter().map(|&i| feats[i].clone()).collect();
            ml += manager_pretrain_step(&mut self.generator, &mut self.manager_opt, &bf)?;
            wl += worker_mle_step(&mut self.generator, &mut self.worker_opt, &batch, &bf)?;
            n += 1;
        }
        let n = n.max(1) as f64;
        Ok((wl / n, ml / n))
    }

    /// One g-step: generate a batch, estimate and rescale rewards, update the
    /// Worker then the Manager. Fills the loss and reward columns of `row`.
    pub fn adversarial_g_step(&mut self, seed: u64, row: &mut MetricsRow) -> Result<()> {
        let cfg = &self.config;
        let temperature = self.generator.config.temperature_train;
        let c = self.generator.config.goal_horizon;
        let (episodes, raw) = {
            let ex = self.discriminator.extractor();
            let eps = self
                .generator
                .generate(&ex, cfg.batch_size, temperature, derive(seed, &[0]));
            let raw = reward_matrix(
                &self.generator,
                &ex,
                &ex,
                &eps,
                cfg.rollout_count,
                temperature,
                derive(seed, &[1]),
            );
            (eps, raw)
        };
        let rescaled = bootstrap_rescale(&raw, cfg.rescale_delta, cfg.squash);
        let weights = worker_weights(&episodes, &rescaled, c, cfg.worker_reward);
        let intrinsic: f64 = episodes
            .iter()
            .flat_map(|e| intrinsic_rewards(e, c))
            .sum::<f64>()
            / (episodes.len() * self.generator.config.horizon) as f64;
        let feats: Vec<Vec<Vec<f64>>> = episodes.iter().map(|e| e.features.clone()).collect();
        let wl = worker_adv_step(
            &mut self.generator,
            &mut self.adv_worker_opt,
            &episodes,
            &weights,
            temperature,
        )?;
        let ml = manager_adv_step(
            &mut self.generator,
            &mut self.adv_manager_opt,
            &feats,
            &rescaled,
        )?;
        row.loss_worker = Some(wl);
        row.loss_manager = Some(ml);
        row.q_mean = Some(raw.mean());
        row.intrinsic_mean = Some(intrinsic);
        Ok(())
    }

    /// Interleaved discriminator/generator pre-training with early stopping
    /// on the validation metric.
    pub fn pretrain(
        &mut self,
        data: &TrainData<'_>,
        obs: &mut dyn Observer,
        summary: &mut Summary,
    ) -> Result<()> {
        let seed = self.config.seed;
        let mut best = f64::INFINITY;
        let mut stale = 0usize;
        let mut g_epoch = 0usize;
        let mut d_step = 0usize;
        'rounds: for round in 0..self.config.pretrain_rounds {
            for s in 0..self.config.pretrain_d_steps {
                let start = Instant::now();
                let loss = self
                    .d_step(data, derive(seed, &[S_PRE_D, round as u64, s as u64]))
                    .map_err(|e| with_step(e, "pretrain_d", d_step))?;
                d_step += 1;
                log::debug!("pretrain_d step {d_step}: {:.2?}", start.elapsed());
                let mut row = MetricsRow::new(round + 1, Phase::PretrainD, d_step);
                row.loss_d = Some(loss);
                obs.record(&row)?;
            }
            obs.epoch_end(Phase::PretrainD, round + 1, self)?;
            for _ in 0..self.config.pretrain_g_epochs {
                g_epoch += 1;
                let start = Instant::now();
                let (wl, ml) = self
                    .mle_epoch(data, derive(seed, &[S_PRE_G, g_epoch as u64]))
                    .map_err(|e| with_step(e, "pretrain_g", g_epoch))?;
                let trained = start.elapsed();
                let metric = self.evaluate(data);
                log::debug!(
                    "pretrain_g epoch {g_epoch}: {trained:.2?} train, {:.2?} total",
                    start.elapsed()
                );
                summary.pretrain_nll.push(metric);
                let mut row = MetricsRow::new(g_epoch, Phase::PretrainG, g_epoch);
                row.loss_worker = Some(wl);
                row.loss_manager = Some(ml);
                row.nll_oracle = data.oracle.map(|_| metric);
                obs.record(&row)?;
                obs.epoch_end(Phase::PretrainG, g_epoch, self)?;
                if metric < best {
                    best = metric;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= self.config.patience {
                        log::info!("pre-training plateaued after {g_epoch} generator epochs");
                        break 'rounds;
                    }
                }
            }
        }
        Ok(())
    }

    /// Adversarial epochs with periodic supervised epochs.
    pub fn adversarial(
        &mut self,
        data: &TrainData<'_>,
        obs: &mut dyn Observer,
        summary: &mut Summary,
    ) -> Result<()> {
        let seed = self.config.seed;
        for epoch in 1..=self.config.adv_epochs {
            let mut rows = Vec::new();
            for g in 0..self.config.g_steps {
                let mut row = MetricsRow::new(epoch, Phase::AdversarialG, g + 1);
                let start = Instant::now();
                self.adversarial_g_step(derive(seed, &[S_ADV_G, epoch as u64, g as u64]), &mut row)
                    .map_err(|e| with_step(e, "adv_g", epoch))?;
                log::debug!(
                    "adv_g epoch {epoch} step {}: {:.2?}",
                    g + 1,
                    start.elapsed()
                );
                rows.push(row);
            }
            for d in 0..self.config.d_steps {
                let start = Instant::now();
                let loss = self
                    .d_step(data, derive(seed, &[S_ADV_D, epoch as u64, d as u64]))
                    .map_err(|e| with_step(e, "adv_d", epoch))?;
                log::debug!(
                    "adv_d epoch {epoch} step {}: {:.2?}",
                    d + 1,
                    start.elapsed()
                );
                let mut row = MetricsRow::new(epoch, Phase::AdversarialD, d + 1);
                row.loss_d = Some(loss);
                rows.push(row);
            }
            if epoch % self.config.interleave_period == 0 {
                let (wl, ml) = self
                    .mle_epoch(data, derive(seed, &[S_MLE, epoch as u64]))
                    .map_err(|e| with_step(e, "mle", epoch))?;
                let mut row = MetricsRow::new(epoch, Phase::Interleaved, 1);
                row.loss_worker = Some(wl);
                row.loss_manager = Some(ml);
                rows.push(row);
            }
            let metric = self.evaluate(data);
            summary.adversarial_nll.push(metric);
            if let Some(last) = rows.last_mut() {
                last.nll_oracle = data.oracle.map(|_| metric);
            }
            for r in &rows {
                obs.record(r)?;
            }
            obs.epoch_end(Phase::AdversarialG, epoch, self)?;
        }
        Ok(())
    }

    /// Full schedule: untrained evaluation, pre-training, adversarial phase.
    pub fn run(&mut self, data: &TrainData<'_>, obs: &mut dyn Observer) -> Result<Summary> {
        if data.train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut summary = Summary::default();
        let untrained = self.evaluate(data);
        summary.untrained_nll = Some(untrained);
        let mut row = MetricsRow::new(0, Phase::PretrainG, 0);
        row.nll_oracle = data.oracle.map(|_| untrained);
        obs.record(&row)?;
        self.pretrain(data, obs, &mut summary)?;
        self.adversarial(data, obs, &mut summary)?;
        Ok(summary)
    }
}

impl Trainer {
    /// Adversarial phase only, for models that were pre-trained elsewhere.
    pub fn run_adversarial(
        &mut self,
        data: &TrainData<'_>,
        obs: &mut dyn Observer,
    ) -> Result<Summary> {
        if data.train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut summary = Summary::default();
        self.adversarial(data, obs, &mut summary)?;
        Ok(summary)
    }
}

fn with_step(e: Error, phase: &str, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::non_finite(phase, step, what),
        other => other,
    }
}
