//! Reward estimation: Monte-Carlo Q values from discriminator scores of
//! rollout completions, rank-based rescaling of the reward matrix, and the
//! Worker's intrinsic reward.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::discriminator::FeatureExtractor;
use crate::generator::{Episode, Generator};
use crate::math::{cosine, sigmoid};
use crate::rng::derive;

/// Anything that scores a complete sequence with a probability of being real.
pub trait Scorer: Sync {
    fn score(&self, seq: &[usize]) -> f64;
}

impl Scorer for FeatureExtractor<'_> {
    fn score(&self, seq: &[usize]) -> f64 {
        self.probability(seq)
    }
}

/// `B × T` matrix of per-step rewards, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RewardMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged reward matrix");
        RewardMatrix {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        RewardMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.data[i * self.cols + t]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, t)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Activation applied to the rank-based score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Squash {
    Sigmoid,
    Identity,
}

impl Squash {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Squash::Sigmoid => sigmoid(x),
            Squash::Identity => x,
        }
    }
}

impl FromStr for Squash {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Squash::Sigmoid),
            "identity" => Ok(Squash::Identity),
            other => Err(format!(
                "unknown squash `{other}` (expected sigmoid or identity)"
            )),
        }
    }
}

impl fmt::Display for Squash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Squash::Sigmoid => "sigmoid",
            Squash::Identity => "identity",
        })
    }
}

/// 1-based high-to-low ranks of `column`; ties keep original row order.
pub fn ranks_high_to_low(column: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    let mut rank = vec![0; column.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos + 1;
    }
    rank
}

/// Replaces each entry of column `t` by `σ(δ · (0.5 − rank(i)/B))`.
pub fn bootstrap_rescale(r: &RewardMatrix, delta: f64, squash: Squash) -> RewardMatrix {
    let b = r.rows as f64;
    let mut out = r.clone();
    for t in 0..r.cols {
        let ranks = ranks_high_to_low(&r.column(t));
        for (i, rank) in ranks.into_iter().enumerate() {
            out.data[i * r.cols + t] = squash.apply(delta * (0.5 - rank as f64 / b));
        }
    }
    out
}

/// `r^I_t = (1/c) Σ_{i=1..c} d_cos(f_t − f_{t−i}, g_{t−i})` for `1 ≤ t ≤ T`.
///
/// `features[j]` is `f_j` (`j = 0..=T`) and `goals[j]` the goal produced from
/// `f_j`. Indices below zero contribute zero.
pub fn intrinsic_reward(features: &[Vec<f64>], goals: &[Vec<f64>], t: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=c {
        let Some(j) = t.checked_sub(i) else { break };
        let delta: Vec<f64> = features[t]
            .iter()
            .zip(&features[j])
            .map(|(a, b)| a - b)
            .collect();
        total += cosine(&delta, &goals[j]);
    }
    total / c as f64
}

/// Intrinsic rewards for steps `1..=T` of an episode.
pub fn intrinsic_rewards(ep: &Episode, c: usize) -> Vec<f64> {
    (1..=ep.len())
        .map(|t| intrinsic_reward(&ep.features, &ep.goals, t, c))
        .collect()
}

/// Q estimate for every episode at prefix length `t` (`1 ≤ t ≤ T`): the mean
/// score of `rollouts` completions, or the score of the sequence itself at
/// `t = T`. Rollout `n` of sequence `i` uses seed `derive(seed, [t, n, i])`.
#[allow(clippy::too_many_arguments)]
pub fn mc_q_estimate<S: Scorer + ?Sized>(
    gen: &Generator,
    ex: &FeatureExtractor<'_>,
    scorer: &S,
    episodes: &[Episode],
    t: usize,
    rollouts: usize,
    temperature: f64,
    seed: u64,
) -> Vec<f64> {
    let horizon = gen.config.horizon;
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            if t >= horizon {
                return scorer.score(&ep.tokens);
            }
            // running mean: exact when every rollout scores the same
            let mut mean = 0.0;
            for n in 0..rollouts {
                let s = derive(seed, &[t as u64, n as u64, i as u64]);
                let score = scorer.score(&gen.rollout_from_episode(ex, ep, t, temperature, s));
                mean += (score - mean) / (n + 1) as f64;
            }
            mean
        })
        .collect()
}

/// Full `B × T` reward matrix; column `t − 1` holds the Q estimate for
/// prefix length `t`.
pub fn reward_matrix<S: Scorer + ?Sized>(
    gen: &Generator,
    ex: &FeatureExtractor<'_>,
    scorer: &S,
    episodes: &[Episode],
    rollouts: usize,
    temperature: f64,
    seed: u64,
) -> RewardMatrix {
    let horizon = gen.config.horizon;
    let columns: Vec<Vec<f64>> = (1..=horizon)
        .map(|t| mc_q_estimate(gen, ex, scorer, episodes, t, rollouts, temperature, seed))
        .collect();
    let rows = (0..episodes.len())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect();
    RewardMatrix::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::tests::toy;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn rescale_matches_hand_evaluation() {
        let r = RewardMatrix::from_rows(vec![vec![0.9], vec![0.1], vec![0.5], vec![0.7]]);
        let out = bootstrap_rescale(&r, 12.0, Squash::Sigmoid).column(0);
        let expected = [0.95257, 0.00247, 0.04743, 0.50000];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{out:?}");
        }
    }

    #[test]
    fn single_row_maps_to_fixed_value() {
        for v in [-3.0, 0.0, 0.42] {
            let r = RewardMatrix::from_rows(vec![vec![v, v * 2.0]]);
            let out = bootstrap_rescale(&r, 12.0, Squash::Sigmoid);
            assert_eq!(out.row(0), &[sigmoid(-6.0), sigmoid(-6.0)]);
        }
    }

    #[test]
    fn ties_break_by_row_order() {
        assert_eq!(ranks_high_to_low(&[0.5, 0.5, 0.9, 0.5]), vec![2, 3, 1, 4]);
    }

    proptest! {
        #[test]
        fn rescale_is_permutation_equivariant(
            col in prop::collection::vec(-1e3f64..1e3, 1..40),
            seed in any::<u64>(),
        ) {
            let mut uniq = col.clone();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            prop_assume!(uniq.len() == col.len());
            let mut perm: Vec<usize> = (0..col.len()).collect();
            perm.shuffle(&mut seeded(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| col[i]).collect();
            let a = bootstrap_rescale(&RewardMatrix::from_rows(col.iter().map(|&v| vec![v]).collect()), 12.0, Squash::Sigmoid).column(0);
            let b = bootstrap_rescale(&RewardMatrix::from_rows(permuted.iter().map(|&v| vec![v]).collect()), 12.0, Squash::Sigmoid).column(0);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(b[k], a[i]);
            }
        }

        #[test]
        fn rescale_is_monotone(col in prop::collection::vec(-10f64..10.0, 1..40)) {
            let out = bootstrap_rescale(&RewardMatrix::from_rows(col.iter().map(|&v| vec![v]).collect()), 12.0, Squash::Sigmoid).column(0);
            for i in 0..col.len() {
                for j in 0..col.len() {
                    if col[i] > col[j] {
                        prop_assert!(out[i] >= out[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn rescaled_columns_share_moments() {
        let mut rng = seeded(1);
        let b = 16;
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..100).map(|_| rng.random::<f64>()).collect())
            .collect();
        let out = bootstrap_rescale(&RewardMatrix::from_rows(rows), 12.0, Squash::Sigmoid);
        let moments = |c: Vec<f64>| {
            let mut c = c;
            c.sort_by(f64::total_cmp);
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c.len() as f64;
            (m, v)
        };
        let (m0, v0) = moments(out.column(0));
        for t in 1..100 {
            let (m, v) = moments(out.column(t));
            assert!((m - m0).abs() < 1e-12 && (v - v0).abs() < 1e-12);
        }
    }

    fn unit(k: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        v
    }

    #[test]
    fn intrinsic_reward_fixed_points() {
        let c = 3;
        let goals: Vec<Vec<f64>> = (0..6).map(|j| unit(3, j % 3)).collect();
        // f_t = 0 and f_{t−i} = −2i·g_{t−i}, so every delta is a positive
        // multiple of its goal.
        let t = 5;
        let mut features = vec![vec![0.0; 3]; 6];
        for i in 1..=c {
            features[t - i] = goals[t - i].iter().map(|g| -2.0 * i as f64 * g).collect();
        }
        assert!((intrinsic_reward(&features, &goals, t, c) - 1.0).abs() < 1e-12);

        let neg: Vec<Vec<f64>> = goals
            .iter()
            .map(|g| g.iter().map(|x| -x).collect())
            .collect();
        assert!((intrinsic_reward(&features, &neg, t, c) + 1.0).abs() < 1e-12);

        let ortho: Vec<Vec<f64>> = (0..6).map(|_| vec![0.0, 0.0, 0.0]).collect();
        assert_eq!(intrinsic_reward(&features, &ortho, t, c), 0.0);
        let mut features_o = vec![vec![0.0; 3]; 6];
        features_o[t] = vec![0.0, 0.0, 5.0];
        let goals_o: Vec<Vec<f64>> = (0..6).map(|j| unit(3, j % 2)).collect();
        assert_eq!(intrinsic_reward(&features_o, &goals_o, t, c), 0.0);
    }

    #[test]
    fn intrinsic_reward_pads_below_zero() {
        let features = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let goals = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        // only i = 1 exists at t = 1: cos((1,0),(1,0)) = 1, averaged over c = 4
        assert_eq!(intrinsic_reward(&features, &goals, 1, 4), 0.25);
    }

    struct Constant(f64);

    impl Scorer for Constant {
        fn score(&self, _: &[usize]) -> f64 {
            self.0
        }
    }

    #[test]
    fn constant_scorer_gives_exact_q() {
        let (gen, disc) = toy(8, 1);
        let ex = disc.extractor();
        let eps = gen.generate(&ex, 3, 1.5, 2);
        for t in 1..=6 {
            for n in [1, 3, 16] {
                let q = mc_q_estimate(&gen, &ex, &Constant(0.7), &eps, t, n, 1.5, 5);
                assert!(q.iter().all(|&v| v == 0.7), "{q:?}");
            }
        }
    }
}
