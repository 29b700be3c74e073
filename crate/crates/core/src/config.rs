//! Experiment configuration: a flat `key = value` file format, named presets
//! and a content digest stamped into every output.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::discriminator::{ConvSpec, FeatureSource};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::optim::OptimizerKind;
use crate::training::{Squash, TrainConfig, WorkerReward};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LEAKGEN_OUT";

pub const PRESETS: &[&str] = &["table1-20", "table1-40", "desk"];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key} = {value}: {e}")))
}

macro_rules! experiment_config {
    ($( #[doc = $doc:literal] $name:ident : $ty:ty = $default:expr, )*) => {
        /// Every experiment knob. Defaults reproduce the length-20 synthetic
        /// setting; see [`ExperimentConfig::KEYS`] for the documented list.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $( #[doc = $doc] pub $name: $ty, )*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                ExperimentConfig { $( $name: $default, )* }
            }
        }

        impl ExperimentConfig {
            /// `(key, description)` for every accepted key, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[ $( (stringify!($name), $doc.trim_ascii()), )* ];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => self.$name = parse_value(key, value)?, )*
                    _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in file order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($name), self.$name.to_string()), )* ]
            }
        }
    };
}

experiment_config! {
    /// Seed for initialisation, training and sampling.
    seed: u64 = 7,
    /// Seed of the synthetic oracle's weights and data.
    oracle_seed: u64 = 1,
    /// Ordinary tokens in the synthetic vocabulary (two specials are added).
    vocab_size: usize = 5000,
    /// Sequence length `T`.
    horizon: usize = 20,
    /// Oracle LSTM hidden and embedding size.
    oracle_hidden: usize = 32,
    /// Oracle training sequences.
    oracle_train_size: usize = 10000,
    /// Oracle held-out sequences.
    oracle_test_size: usize = 2000,
    /// Text corpus for real-data runs; empty means the synthetic oracle.
    corpus: String = String::new(),
    /// Held-out text corpus (references for BLEU).
    test_corpus: String = String::new(),
    /// Tokens rarer than this are dropped with their sentences.
    min_freq: usize = 1,
    /// Discriminator windows as `size:count` pairs.
    disc_windows: String = ConvSpec::length_20().format_windows(),
    /// Discriminator embedding size.
    disc_embedding_dim: usize = 64,
    /// Highway layer after pooling.
    disc_highway: bool = true,
    /// Dropout keep probability before the output layer.
    disc_dropout_keep: f64 = 0.75,
    /// L2 coefficient on the discriminator output layer.
    disc_l2: f64 = 0.2,
    /// Leaked feature: post_highway or pre_highway.
    feature_source: FeatureSource = FeatureSource::PostHighway,
    /// Goal embedding size `k`.
    goal_dim: usize = 16,
    /// Goal duration `c`.
    goal_horizon: usize = 4,
    /// Manager LSTM hidden size.
    manager_hidden: usize = 32,
    /// Worker LSTM hidden size.
    worker_hidden: usize = 32,
    /// Worker token embedding size.
    gen_embedding_dim: usize = 32,
    /// Sampling temperature during training.
    temperature_train: f64 = 1.5,
    /// Sampling temperature for evaluation and generation.
    temperature_sample: f64 = 1.0,
    /// Minibatch size `B`.
    batch_size: usize = 64,
    /// Monte-Carlo rollouts per prefix `N`.
    rollout_count: usize = 4,
    /// Rescale smoothness `δ`.
    rescale_delta: f64 = 12.0,
    /// Rescale squashing: sigmoid or identity.
    squash: Squash = Squash::Sigmoid,
    /// Worker reward: intrinsic or intrinsic_x_q.
    worker_reward: WorkerReward = WorkerReward::Intrinsic,
    /// Adversarial epochs per supervised epoch.
    interleave_period: usize = 15,
    /// Generator updates per adversarial epoch.
    g_steps: usize = 1,
    /// Discriminator updates per adversarial epoch.
    d_steps: usize = 5,
    /// Discriminator epochs per update `k`.
    d_epochs: usize = 3,
    /// Negatives per discriminator update; 0 matches the positives.
    d_negatives: usize = 0,
    /// Pre-training rounds of discriminator then generator updates.
    pretrain_rounds: usize = 10,
    /// Discriminator updates per pre-training round.
    pretrain_d_steps: usize = 1,
    /// Generator epochs per pre-training round.
    pretrain_g_epochs: usize = 5,
    /// Adversarial epochs.
    adv_epochs: usize = 100,
    /// Pre-training early-stopping patience, in generator epochs.
    patience: usize = 5,
    /// Optimizer: sgd or adam.
    optimizer: OptimizerKind = OptimizerKind::Sgd,
    /// Manager pre-training learning rate.
    manager_lr: f64 = 0.001,
    /// Worker pre-training learning rate.
    worker_lr: f64 = 0.001,
    /// Discriminator learning rate.
    disc_lr: f64 = 1e-4,
    /// Adversarial Manager learning rate.
    adv_manager_lr: f64 = 0.001,
    /// Adversarial Worker learning rate.
    adv_worker_lr: f64 = 0.001,
    /// Generator samples per oracle NLL evaluation.
    eval_samples: usize = 1000,
    /// Adversarial epochs between checkpoints; 0 disables.
    checkpoint_every: usize = 10,
    /// Sentences written by `sample`.
    sample_count: usize = 1000,
    /// Sentences traced by `trace`.
    trace_sentences: usize = 8,
    /// Real sentences in the trace reference cloud.
    trace_reference: usize = 500,
    /// Sentences exported by `interact`.
    interact_sentences: usize = 4,
    /// Length-bucket lower bounds for the relative BLEU gain curve.
    gain_edges: String = "1,10,20,30,40".to_string(),
}

/// Keys that determine parameter shapes.
const ARCHITECTURE_KEYS: &[&str] = &[
    "vocab_size",
    "horizon",
    "disc_windows",
    "disc_embedding_dim",
    "disc_highway",
    "goal_dim",
    "goal_horizon",
    "manager_hidden",
    "worker_hidden",
    "gen_embedding_dim",
];

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        match name {
            "table1-20" => {}
            "table1-40" => {
                c.horizon = 40;
                c.disc_windows = ConvSpec::length_40().format_windows();
                c.manager_lr = 0.0005;
                c.worker_lr = 0.0005;
                c.adv_manager_lr = 0.0005;
                c.adv_worker_lr = 0.0005;
                c.gain_edges = "1,10,20,30,40".into();
            }
            "desk" => {
                c.vocab_size = 100;
                c.oracle_train_size = 2000;
                c.oracle_test_size = 500;
                c.disc_windows = ConvSpec::desk(20).format_windows();
                c.disc_embedding_dim = 16;
                c.disc_l2 = 0.01;
                c.optimizer = OptimizerKind::Adam;
                c.manager_lr = 0.005;
                c.worker_lr = 0.005;
                c.disc_lr = 0.001;
                c.adv_manager_lr = 0.0005;
                c.adv_worker_lr = 0.005;
                c.g_steps = 3;
                c.batch_size = 64;
                c.d_steps = 1;
                c.d_epochs = 1;
                c.d_negatives = 500;
                c.pretrain_rounds = 5;
                c.pretrain_d_steps = 1;
                c.pretrain_g_epochs = 6;
                c.adv_epochs = 10;
                c.eval_samples = 1000;
                c.checkpoint_every = 5;
                c.sample_count = 200;
                c.trace_reference = 200;
                c.gain_edges = "1,5,10,15,20".into();
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment. Unknown and
    /// repeated keys are errors.
    pub fn apply_text(&mut self, text: &str, source: &Path) -> Result<()> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text, path)
    }

    /// Canonical text form; parsing it back yields an identical config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, as 16 hex characters.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_text())[..16].to_string()
    }

    /// Digest of the keys that fix parameter shapes; stored in checkpoints.
    pub fn model_digest(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| ARCHITECTURE_KEYS.contains(k))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        sha256_hex(&text)[..16].to_string()
    }

    pub fn is_synthetic(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Model vocabulary size: ordinary tokens plus the two specials.
    pub fn model_vocab_size(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn conv_spec(&self) -> Result<ConvSpec> {
        let windows = ConvSpec::parse_windows(&self.disc_windows).map_err(Error::InvalidConfig)?;
        let spec = ConvSpec {
            windows,
            embedding_dim: self.disc_embedding_dim,
            use_highway: self.disc_highway,
            dropout_keep: self.disc_dropout_keep,
            l2_coeff: self.disc_l2,
            feature_source: self.feature_source,
        };
        spec.validate(self.horizon)?;
        Ok(spec)
    }

    pub fn generator_config(&self, vocab_size: usize) -> Result<GeneratorConfig> {
        let config = GeneratorConfig {
            vocab_size,
            horizon: self.horizon,
            feature_dim: self.conv_spec()?.feature_dim(),
            goal_dim: self.goal_dim,
            goal_horizon: self.goal_horizon,
            manager_hidden: self.manager_hidden,
            worker_hidden: self.worker_hidden,
            embedding_dim: self.gen_embedding_dim,
            temperature_train: self.temperature_train,
            temperature_sample: self.temperature_sample,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            rollout_count: self.rollout_count,
            rescale_delta: self.rescale_delta,
            squash: self.squash,
            worker_reward: self.worker_reward,
            interleave_period: self.interleave_period,
            g_steps: self.g_steps,
            d_steps: self.d_steps,
            d_epochs: self.d_epochs,
            d_negatives: self.d_negatives,
            pretrain_rounds: self.pretrain_rounds,
            pretrain_d_steps: self.pretrain_d_steps,
            pretrain_g_epochs: self.pretrain_g_epochs,
            adv_epochs: self.adv_epochs,
            patience: self.patience,
            optimizer: self.optimizer,
            manager_lr: self.manager_lr,
            worker_lr: self.worker_lr,
            disc_lr: self.disc_lr,
            adv_manager_lr: self.adv_manager_lr,
            adv_worker_lr: self.adv_worker_lr,
            eval_samples: self.eval_samples,
            seed: self.seed,
        }
    }

    pub fn gain_edges(&self) -> Result<Vec<usize>> {
        let edges: Vec<usize> = self
            .gain_edges
            .split(',')
            .map(|s| parse_value("gain_edges", s.trim()))
            .collect::<Result<_>>()?;
        if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "gain_edges must be strictly ascending".into(),
            ));
        }
        Ok(edges)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be ≥ 1".into()));
        }
        self.generator_config(self.model_vocab_size())?;
        self.train_config().validate()?;
        self.gain_edges()?;
        if !(self.disc_dropout_keep > 0.0 && self.disc_dropout_keep <= 1.0) {
            return Err(Error::InvalidConfig(
                "disc_dropout_keep must be in (0, 1]".into(),
            ));
        }
        if self.is_synthetic() && (self.oracle_train_size == 0 || self.oracle_hidden == 0) {
            return Err(Error::InvalidConfig("oracle sizes must be ≥ 1".into()));
        }
        Ok(())
    }
}
