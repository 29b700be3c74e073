//! Glue between an [`ExperimentConfig`] and the models: synthetic data,
//! model construction and the full training schedule.

use crate::config::ExperimentConfig;
use crate::corpus::{OracleModel, SequenceBatch};
use crate::discriminator::Discriminator;
use crate::error::Result;
use crate::generator::Generator;
use crate::rng::{derive, seeded};
use crate::training::{Observer, Summary, TrainData, Trainer};

/// Oracle-generated training and held-out sets.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub oracle: OracleModel,
    pub train: SequenceBatch,
    pub test: SequenceBatch,
}

pub fn synthetic_data(cfg: &ExperimentConfig) -> Result<SyntheticData> {
    let oracle = OracleModel::new(
        cfg.model_vocab_size(),
        cfg.horizon,
        cfg.oracle_hidden,
        cfg.oracle_seed,
    )?;
    let train = oracle.sample(cfg.oracle_train_size, derive(cfg.oracle_seed, &[1]));
    let test = oracle.sample(cfg.oracle_test_size, derive(cfg.oracle_seed, &[2]));
    Ok(SyntheticData {
        oracle,
        train,
        test,
    })
}

/// Freshly initialised generator and discriminator for `vocab_size` tokens.
pub fn build_models(
    cfg: &ExperimentConfig,
    vocab_size: usize,
) -> Result<(Generator, Discriminator)> {
    let mut rng = seeded(derive(cfg.seed, &[0]));
    let disc = Discriminator::new(cfg.conv_spec()?, vocab_size, cfg.horizon, &mut rng)?;
    let gen = Generator::new(cfg.generator_config(vocab_size)?, &mut rng)?;
    Ok((gen, disc))
}

/// Builds models and runs the whole schedule on synthetic data.
pub fn run_synthetic(cfg: &ExperimentConfig, obs: &mut dyn Observer) -> Result<(Trainer, Summary)> {
    cfg.validate()?;
    let data = synthetic_data(cfg)?;
    let (gen, disc) = build_models(cfg, cfg.model_vocab_size())?;
    let mut trainer = Trainer::new(cfg.train_config(), gen, disc)?;
    let summary = trainer.run(
        &TrainData {
            train: &data.train,
            valid: &data.test,
            oracle: Some(&data.oracle),
        },
        obs,
    )?;
    Ok((trainer, summary))
}
