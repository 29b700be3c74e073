//! Single optimisation steps for the Manager, the Worker and the
//! discriminator. Manager steps touch only `θ_m`; Worker steps touch only
//! `θ_w` (which includes `W_ψ`).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::discriminator::{Discriminator, FeatureExtractor};
use crate::error::{Error, Result};
use crate::generator::{Episode, Generator};
use crate::optim::Optimizer;
use crate::param::{par_accumulate, Parameterized};
use crate::rng::{derive, seeded};
use crate::training::reward::{intrinsic_rewards, RewardMatrix};

/// What the Worker's REINFORCE step is weighted by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerReward {
    /// `r^I_t` alone.
    Intrinsic,
    /// `r^I_t` times the rescaled extrinsic reward of the same step.
    IntrinsicTimesQ,
}

impl FromStr for WorkerReward {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "intrinsic" => Ok(WorkerReward::Intrinsic),
            "intrinsic_x_q" => Ok(WorkerReward::IntrinsicTimesQ),
            other => Err(format!("unknown worker reward `{other}`")),
        }
    }
}

impl fmt::Display for WorkerReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkerReward::Intrinsic => "intrinsic",
            WorkerReward::IntrinsicTimesQ => "intrinsic_x_q",
        })
    }
}

/// Leaked features `f_0..=f_T` of every prefix of a full sequence.
pub fn prefix_features(ex: &FeatureExtractor<'_>, seq: &[usize]) -> Vec<Vec<f64>> {
    (0..=seq.len())
        .map(|t| ex.prefix_features(&seq[..t]))
        .collect()
}

fn ensure_finite(value: f64, grad_ok: bool, phase: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::non_finite(phase, 0, "loss"));
    }
    if !grad_ok {
        return Err(Error::non_finite(phase, 0, "gradient"));
    }
    Ok(())
}

/// Manager step on `−Σ_t Q_t · d_cos(f_{t+c} − f_t, g_t)`, averaged over the
/// batch. `q` row `i` belongs to episode `i`.
pub fn manager_adv_step(
    gen: &mut Generator,
    opt: &mut Optimizer,
    features: &[Vec<Vec<f64>>],
    q: &RewardMatrix,
) -> Result<f64> {
    let n = features.len();
    let (mut grad, loss) = par_accumulate(
        n,
        || gen.zero_manager(),
        |i, g| gen.manager_loss_grad(&features[i], q.row(i), g),
    );
    let scale = 1.0 / n as f64;
    let mut scaled = gen.zero_manager();
    scaled.add_scaled(&grad, scale);
    grad = scaled;
    let loss = loss * scale;
    ensure_finite(loss, grad.all_finite(), "manager")?;
    opt.descend(&mut gen.manager, &grad);
    Ok(loss)
}

/// Manager pre-training step: the adversarial objective with `Q ≡ 1` on the
/// feature transitions of real sentences.
pub fn manager_pretrain_step(
    gen: &mut Generator,
    opt: &mut Optimizer,
    real_features: &[Vec<Vec<f64>>],
) -> Result<f64> {
    let ones = RewardMatrix::filled(real_features.len(), gen.config.horizon, 1.0);
    manager_adv_step(gen, opt, real_features, &ones)
}

/// Worker REINFORCE step: gradient ascent on `Σ_t weight_t · log G(x_t)`.
/// Returns the loss `−Σ_t weight_t · log G(x_t)` averaged per token.
pub fn worker_adv_step(
    gen: &mut Generator,
    opt: &mut Optimizer,
    episodes: &[Episode],
    weights: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    let n = episodes.len();
    let (grad, loss) = par_accumulate(
        n,
        || gen.zero_worker(),
        |i, g| {
            let ep = &episodes[i];
            gen.worker_loss_grad(&ep.tokens, &ep.goal_sums, &weights[i], temperature, g)
        },
    );
    apply_worker(gen, opt, grad, loss, n, "worker")
}

fn apply_worker(
    gen: &mut Generator,
    opt: &mut Optimizer,
    grad: crate::generator::Worker,
    loss: f64,
    n: usize,
    phase: &str,
) -> Result<f64> {
    let scale = 1.0 / (n * gen.config.horizon) as f64;
    let mut scaled = gen.zero_worker();
    scaled.add_scaled(&grad, scale);
    let loss = loss * scale;
    ensure_finite(loss, scaled.all_finite(), phase)?;
    opt.descend(&mut gen.worker, &scaled);
    Ok(loss)
}

/// Maximum-likelihood Worker step on real sentences at the sampling
/// temperature, with goals from the current (fixed) Manager fed with the
/// real prefixes' features. Returns mean cross-entropy per token.
pub fn worker_mle_step(
    gen: &mut Generator,
    opt: &mut Optimizer,
    real: &[Vec<usize>],
    real_features: &[Vec<Vec<f64>>],
) -> Result<f64> {
    let n = real.len();
    let temperature = gen.config.temperature_sample;
    let ones = vec![1.0; gen.config.horizon];
    let (grad, loss) = par_accumulate(
        n,
        || gen.zero_worker(),
        |i, g| {
            let sums = gen.manager_goal_sums(&real_features[i]);
            gen.worker_loss_grad(&real[i], &sums, &ones, temperature, g)
        },
    );
    apply_worker(gen, opt, grad, loss, n, "worker-mle")
}

/// Mean per-token cross-entropy of real sentences under the generator at the
/// sampling temperature, without updating anything.
pub fn generator_nll(gen: &Generator, ex: &FeatureExtractor<'_>, real: &[Vec<usize>]) -> f64 {
    let ones = vec![1.0; gen.config.horizon];
    let (_, loss) = par_accumulate(
        real.len(),
        || gen.zero_worker(),
        |i, g| {
            let feats = prefix_features(ex, &real[i]);
            let sums = gen.manager_goal_sums(&feats);
            gen.worker_loss_grad(&real[i], &sums, &ones, gen.config.temperature_sample, g)
        },
    );
    loss / (real.len() * gen.config.horizon) as f64
}

/// Per-step Worker weights for a batch of episodes.
pub fn worker_weights(
    episodes: &[Episode],
    rescaled: &RewardMatrix,
    goal_horizon: usize,
    variant: WorkerReward,
) -> Vec<Vec<f64>> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let intrinsic = intrinsic_rewards(ep, goal_horizon);
            match variant {
                WorkerReward::Intrinsic => intrinsic,
                WorkerReward::IntrinsicTimesQ => intrinsic
                    .iter()
                    .zip(rescaled.row(i))
                    .map(|(r, q)| r * q)
                    .collect(),
            }
        })
        .collect()
}

/// `epochs` passes over `(real, fake)` in shuffled minibatches of
/// `batch_size` positives and `batch_size` negatives. Returns the mean loss.
pub fn train_discriminator(
    disc: &mut Discriminator,
    opt: &mut Optimizer,
    real: &[Vec<usize>],
    fake: &[Vec<usize>],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut steps = 0usize;
    let n = real.len().min(fake.len());
    for epoch in 0..epochs {
        let mut rng = seeded(derive(seed, &[epoch as u64]));
        let mut ri: Vec<usize> = (0..real.len()).collect();
        let mut fi: Vec<usize> = (0..fake.len()).collect();
        ri.shuffle(&mut rng);
        fi.shuffle(&mut rng);
        for (b, start) in (0..n).step_by(batch_size.max(1)).enumerate() {
            let end = (start + batch_size).min(n);
            let rb: Vec<Vec<usize>> = ri[start..end].iter().map(|&i| real[i].clone()).collect();
            let fb: Vec<Vec<usize>> = fi[start..end].iter().map(|&i| fake[i].clone()).collect();
            let loss = disc
                .train_step(opt, &rb, &fb, derive(seed, &[epoch as u64, b as u64, 1]))
                .map_err(|e| match e {
                    Error::NonFinite { what, .. } => {
                        Error::non_finite("discriminator", steps, what)
                    }
                    other => other,
                })?;
            total += loss;
            steps += 1;
        }
    }
    Ok(total / steps.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::tests::toy;
    use crate::optim::OptimizerKind;

    fn sgd() -> Optimizer {
        Optimizer::new(OptimizerKind::Sgd, 0.1)
    }

    #[test]
    fn zero_q_gives_zero_manager_update() {
        let (mut gen, disc) = toy(8, 1);
        let ex = disc.extractor();
        let eps = gen.generate(&ex, 4, 1.5, 3);
        let feats: Vec<_> = eps.iter().map(|e| e.features.clone()).collect();
        let before = gen.clone();
        manager_adv_step(
            &mut gen,
            &mut sgd(),
            &feats,
            &RewardMatrix::filled(4, 6, 0.0),
        )
        .unwrap();
        assert_eq!(gen, before);
    }

    #[test]
    fn static_features_give_zero_manager_gradient() {
        let (mut gen, _) = toy(8, 2);
        let feats = vec![vec![vec![0.3; 6]; 7]; 3];
        let before = gen.clone();
        let loss = manager_adv_step(
            &mut gen,
            &mut sgd(),
            &feats,
            &RewardMatrix::filled(3, 6, 1.0),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(gen, before);
    }

    #[test]
    fn zero_intrinsic_reward_gives_zero_worker_update() {
        let (mut gen, disc) = toy(8, 3);
        let ex = disc.extractor();
        let eps = gen.generate(&ex, 4, 1.5, 3);
        let before = gen.clone();
        worker_adv_step(&mut gen, &mut sgd(), &eps, &vec![vec![0.0; 6]; 4], 1.5).unwrap();
        assert_eq!(gen, before);
    }

    #[test]
    fn single_token_vocabulary_gives_zero_worker_update() {
        let (mut gen, disc) = toy(3, 4);
        let ex = disc.extractor();
        let eps = gen.generate(&ex, 2, 1.5, 3);
        let before = gen.clone();
        worker_adv_step(&mut gen, &mut sgd(), &eps, &vec![vec![1.0; 6]; 2], 1.5).unwrap();
        assert_eq!(gen, before);
    }

    #[test]
    fn pretrain_equals_adversarial_step_with_unit_q() {
        let (gen, disc) = toy(8, 5);
        let ex = disc.extractor();
        let real = [vec![2, 3, 4, 5, 6, 7], vec![7, 7, 3, 2, 2, 4]];
        let feats: Vec<_> = real.iter().map(|s| prefix_features(&ex, s)).collect();
        let mut a = gen.clone();
        let mut b = gen.clone();
        let la = manager_pretrain_step(&mut a, &mut sgd(), &feats).unwrap();
        let eps: Vec<_> = real.iter().map(|s| gen.replay(&ex, s, 1.0)).collect();
        let efeats: Vec<_> = eps.iter().map(|e| e.features.clone()).collect();
        let lb = manager_adv_step(
            &mut b,
            &mut sgd(),
            &efeats,
            &RewardMatrix::filled(2, 6, 1.0),
        )
        .unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        // −Σ cos over at most T terms
        assert!((-6.0..=6.0).contains(&la));
    }

    #[test]
    fn updates_respect_alternation() {
        let (mut gen, disc) = toy(8, 6);
        let ex = disc.extractor();
        let eps = gen.generate(&ex, 4, 1.5, 3);
        let feats: Vec<_> = eps.iter().map(|e| e.features.clone()).collect();
        let m0 = gen.manager.checksum();
        let w0 = gen.worker.checksum();
        worker_adv_step(&mut gen, &mut sgd(), &eps, &vec![vec![0.5; 6]; 4], 1.5).unwrap();
        assert_eq!(gen.manager.checksum(), m0);
        let w1 = gen.worker.checksum();
        assert_ne!(w1, w0);
        manager_adv_step(
            &mut gen,
            &mut sgd(),
            &feats,
            &RewardMatrix::filled(4, 6, 0.8),
        )
        .unwrap();
        assert_eq!(gen.worker.checksum(), w1);
        assert_ne!(gen.manager.checksum(), m0);
    }

    #[test]
    fn uniform_predictor_costs_log_vocab_per_token() {
        let (mut gen, disc) = toy(8, 7);
        gen.worker.out_weight.data.fill(0.0);
        gen.worker.out_bias.data.fill(0.0);
        let ex = disc.extractor();
        let real = vec![vec![2, 3, 4, 5, 6, 7]];
        let nll = generator_nll(&gen, &ex, &real);
        assert!((nll - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_predictor_costs_nothing() {
        let (mut gen, disc) = toy(8, 8);
        // goal embedding constant along the first axis whatever the goals are
        gen.worker.goal_embed.data.fill(0.0);
        gen.worker.out_weight.data.fill(0.0);
        gen.worker.out_bias.data.fill(0.0);
        let ex = disc.extractor();
        let feats = prefix_features(&ex, &[5; 6]);
        let sums = gen.manager_goal_sums(&feats);
        assert!(sums.iter().all(|s| s.len() == 6));
        gen.worker.goal_embed.data[0] = 1.0;
        gen.worker.out_bias.data[5 * 4] = 1e4;
        let mut sink = gen.zero_worker();
        // make sure the first goal-sum coordinate is nonzero for this check
        let sums: Vec<Vec<f64>> = sums
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s[0] = 1.0;
                s
            })
            .collect();
        let loss = gen.worker_loss_grad(&[5; 6], &sums, &[1.0; 6], 1.0, &mut sink);
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn pretraining_the_manager_reduces_its_loss() {
        let (mut gen, disc) = toy(8, 9);
        let ex = disc.extractor();
        let real = [
            vec![2, 3, 4, 5, 6, 7],
            vec![3, 4, 5, 6, 7, 2],
            vec![4, 5, 6, 7, 2, 3],
        ];
        let feats: Vec<_> = real.iter().map(|s| prefix_features(&ex, s)).collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        let first = manager_pretrain_step(&mut gen, &mut opt, &feats).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = manager_pretrain_step(&mut gen, &mut opt, &feats).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }
}
