//! Hierarchical generator. The Manager reads the leaked feature vector of the
//! current prefix and emits a unit goal in feature space (`d_f` dimensions, so
//! it can be compared with feature transitions); the `k`-dimensional goal
//! embedding is a linear map of the sum of the most recent `c` goals; the
//! Worker reads the previous token and emits a `|V| × k` matrix whose product
//! with the goal embedding gives next-token logits.
//!
//! Indexing: generation step `t` (1-based) leaks `f_{t-1}`, the feature of the
//! `PAD`-padded prefix `x_1..x_{t-1}`, feeds the Worker `x_{t-1}` (`x_0 =
//! START`) and samples `x_t`. The goal produced at step `t` is the goal of
//! state `s_{t-1}` and is included in that step's goal embedding.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{emit_mask, START};
use crate::discriminator::FeatureExtractor;
use crate::error::{Error, Result};
use crate::lstm::{Lstm, LstmCache, LstmState};
use crate::math::{
    add_assign, affine, cosine, cosine_grad_b, matvec, matvec_t_acc, norm, outer_acc,
};
use crate::param::{Parameterized, Tensor};
use crate::rng::{derive, sample_categorical, seeded};

/// Goals with a raw norm below this are replaced by the zero vector.
pub const DEGENERATE_GOAL_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub horizon: usize,
    pub feature_dim: usize,
    /// Goal-embedding dimension `k`. Goals themselves have `feature_dim`
    /// entries.
    pub goal_dim: usize,
    /// Number of recent goals summed into the goal embedding (`c`).
    pub goal_horizon: usize,
    pub manager_hidden: usize,
    pub worker_hidden: usize,
    pub embedding_dim: usize,
    pub temperature_train: f64,
    pub temperature_sample: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("horizon", self.horizon),
            ("feature_dim", self.feature_dim),
            ("goal_dim", self.goal_dim),
            ("goal_horizon", self.goal_horizon),
            ("manager_hidden", self.manager_hidden),
            ("worker_hidden", self.worker_hidden),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        if self.vocab_size < 3 {
            return Err(Error::InvalidConfig(
                "vocab_size must leave at least one emittable token".into(),
            ));
        }
        for t in [self.temperature_train, self.temperature_sample] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        Ok(())
    }
}

/// Manager parameters `θ_m`: an LSTM over feature vectors and a linear goal
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct Manager {
    pub lstm: Lstm,
    /// `d_f × manager_hidden`
    pub goal_weight: Tensor,
    pub goal_bias: Tensor,
}

/// Worker parameters `θ_w`, including the goal embedding map `W_ψ` which is
/// trained together with the Worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Worker {
    /// `|V| × embedding_dim`
    pub embedding: Tensor,
    pub lstm: Lstm,
    /// `(|V|·k) × worker_hidden`; row `v·k + j` is entry `(v, j)` of `O_t`.
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    /// `W_ψ`, `k × d_f`, no bias.
    pub goal_embed: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub manager: Manager,
    pub worker: Worker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManagerState {
    pub lstm: LstmState,
    /// Most recent goal first; always `c` slots, zero-padded.
    pub goal_history: VecDeque<Vec<f64>>,
}

impl ManagerState {
    pub fn initial(hidden: usize, goal_dim: usize, goal_horizon: usize) -> Self {
        ManagerState {
            lstm: LstmState::zeros(hidden),
            goal_history: (0..goal_horizon).map(|_| vec![0.0; goal_dim]).collect(),
        }
    }

    pub fn goal_sum(&self) -> Vec<f64> {
        let k = self.goal_history.front().map_or(0, Vec::len);
        let mut s = vec![0.0; k];
        for g in &self.goal_history {
            add_assign(&mut s, g);
        }
        s
    }
}

pub type WorkerState = LstmState;

/// Output of one Manager step.
#[derive(Debug, Clone)]
pub struct ManagerStep {
    pub raw_goal: Vec<f64>,
    pub goal: Vec<f64>,
    pub degenerate: bool,
    pub state: ManagerState,
}

/// `g = ĝ / ‖ĝ‖`, or zero when `‖ĝ‖` is below [`DEGENERATE_GOAL_NORM`].
pub fn normalize_goal(raw: &[f64]) -> (Vec<f64>, bool) {
    let n = norm(raw);
    if n < DEGENERATE_GOAL_NORM {
        (vec![0.0; raw.len()], true)
    } else {
        (raw.iter().map(|v| v / n).collect(), false)
    }
}

/// `O_t · w_t` for a flattened `|V| × k` matrix.
pub fn logits(output: &[f64], goal_embedding: &[f64]) -> Vec<f64> {
    matvec(output, goal_embedding)
}

/// `softmax(O_t · w_t / α)` with `PAD` and `START` masked to zero.
pub fn action_distribution(
    output: &[f64],
    goal_embedding: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidTemperature(temperature));
    }
    let l = logits(output, goal_embedding);
    Ok(crate::math::masked_softmax(
        &l,
        temperature,
        &emit_mask(l.len()),
    ))
}

/// Everything recorded while generating (or replaying) one sequence.
/// Step-indexed vectors have exactly `horizon` entries.
#[derive(Debug, Clone)]
pub struct Episode {
    /// `x_1..x_T`
    pub tokens: Vec<usize>,
    /// `features[t]` is the leaked feature of the length-`t` prefix, for
    /// `t = 0..=T` (one more entry than the step vectors).
    pub features: Vec<Vec<f64>>,
    pub raw_goals: Vec<Vec<f64>>,
    pub goals: Vec<Vec<f64>>,
    /// Sum of the `c` most recent goals, before `W_ψ`.
    pub goal_sums: Vec<Vec<f64>>,
    pub goal_embeddings: Vec<Vec<f64>>,
    /// Flattened `O_t` per step.
    pub outputs: Vec<Vec<f64>>,
    /// `log G(x_t | s_{t-1})` at the temperature used for the episode.
    pub log_probs: Vec<f64>,
    pub temperature: f64,
    pub degenerate_goals: usize,
    states: Vec<(ManagerState, WorkerState)>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Goals indexed by the state they were produced from: `goal_of_state(j)`
    /// was computed from `features[j]`.
    pub fn goal_of_state(&self, j: usize) -> &[f64] {
        &self.goals[j]
    }

    /// Manager and Worker state after step `t` (`1 ≤ t ≤ T`).
    pub fn state_after(&self, t: usize) -> &(ManagerState, WorkerState) {
        &self.states[t - 1]
    }
}

struct StepOut {
    manager: ManagerStep,
    goal_sum: Vec<f64>,
    goal_embedding: Vec<f64>,
    output: Vec<f64>,
    worker: WorkerState,
    probs: Vec<f64>,
}

impl Generator {
    /// Weights `N(0, 0.1²)`, zero recurrent states.
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = 0.1;
        let k = config.goal_dim;
        let v = config.vocab_size;
        let manager = Manager {
            lstm: Lstm::normal(config.feature_dim, config.manager_hidden, std, rng),
            goal_weight: Tensor::normal(&[config.feature_dim, config.manager_hidden], std, rng),
            goal_bias: Tensor::normal(&[config.feature_dim], std, rng),
        };
        let worker = Worker {
            embedding: Tensor::normal(&[v, config.embedding_dim], std, rng),
            lstm: Lstm::normal(config.embedding_dim, config.worker_hidden, std, rng),
            out_weight: Tensor::normal(&[v * k, config.worker_hidden], std, rng),
            out_bias: Tensor::zeros(&[v * k]),
            goal_embed: Tensor::normal(&[k, config.feature_dim], std, rng),
        };
        Ok(Generator {
            config,
            manager,
            worker,
        })
    }

    pub fn initial_states(&self) -> (ManagerState, WorkerState) {
        let c = &self.config;
        (
            ManagerState::initial(c.manager_hidden, c.feature_dim, c.goal_horizon),
            LstmState::zeros(c.worker_hidden),
        )
    }

    fn manager_forward(
        &self,
        feature: &[f64],
        state: &LstmState,
    ) -> (Vec<f64>, LstmState, LstmCache) {
        let (next, cache) = self.manager.lstm.step(feature, state);
        let raw = affine(
            &self.manager.goal_weight.data,
            &self.manager.goal_bias.data,
            &next.h,
        );
        (raw, next, cache)
    }

    /// Consumes `f_t`, updates the Manager LSTM and pushes the normalised goal
    /// onto the history.
    pub fn manager_step(&self, feature: &[f64], state: &ManagerState) -> ManagerStep {
        let (raw_goal, lstm, _) = self.manager_forward(feature, &state.lstm);
        let (goal, degenerate) = normalize_goal(&raw_goal);
        let mut goal_history = state.goal_history.clone();
        goal_history.push_front(goal.clone());
        goal_history.truncate(self.config.goal_horizon);
        ManagerStep {
            raw_goal,
            goal,
            degenerate,
            state: ManagerState { lstm, goal_history },
        }
    }

    /// `w = W_ψ Σ_{i=1..c} g_{t-i}`.
    pub fn goal_embedding(&self, history: &VecDeque<Vec<f64>>) -> Vec<f64> {
        let mut sum = vec![0.0; self.config.feature_dim];
        for g in history.iter().take(self.config.goal_horizon) {
            add_assign(&mut sum, g);
        }
        matvec(&self.worker.goal_embed.data, &sum)
    }

    fn worker_forward(
        &self,
        token: usize,
        state: &WorkerState,
    ) -> (Vec<f64>, WorkerState, LstmCache) {
        let (next, cache) = self
            .worker
            .lstm
            .step(self.worker.embedding.row(token), state);
        let out = affine(
            &self.worker.out_weight.data,
            &self.worker.out_bias.data,
            &next.h,
        );
        (out, next, cache)
    }

    /// Returns the flattened `|V| × k` matrix `O_t` and the next state.
    pub fn worker_step(&self, token: usize, state: &WorkerState) -> (Vec<f64>, WorkerState) {
        let (out, next, _) = self.worker_forward(token, state);
        (out, next)
    }

    fn step(
        &self,
        feature: &[f64],
        prev_token: usize,
        mstate: &ManagerState,
        wstate: &WorkerState,
        temperature: f64,
    ) -> StepOut {
        let manager = self.manager_step(feature, mstate);
        let goal_sum = manager.state.goal_sum();
        let goal_embedding = matvec(&self.worker.goal_embed.data, &goal_sum);
        let (output, worker) = self.worker_step(prev_token, wstate);
        let probs = action_distribution(&output, &goal_embedding, temperature)
            .expect("temperatures are validated at construction");
        StepOut {
            manager,
            goal_sum,
            goal_embedding,
            output,
            worker,
            probs,
        }
    }

    /// Runs the policy from `states` after `prefix`, either forcing `forced`
    /// tokens or sampling with `rng` once `forced` is exhausted.
    fn run<R: Rng>(
        &self,
        ex: &FeatureExtractor<'_>,
        forced: &[usize],
        temperature: f64,
        rng: &mut R,
    ) -> Episode {
        let horizon = self.config.horizon;
        let (mut mstate, mut wstate) = self.initial_states();
        let mut ep = Episode {
            tokens: Vec::with_capacity(horizon),
            features: Vec::with_capacity(horizon + 1),
            raw_goals: Vec::with_capacity(horizon),
            goals: Vec::with_capacity(horizon),
            goal_sums: Vec::with_capacity(horizon),
            goal_embeddings: Vec::with_capacity(horizon),
            outputs: Vec::with_capacity(horizon),
            log_probs: Vec::with_capacity(horizon),
            temperature,
            degenerate_goals: 0,
            states: Vec::with_capacity(horizon),
        };
        let mut prev = START;
        for t in 0..horizon {
            let feature = ex.prefix_features(&ep.tokens);
            let out = self.step(&feature, prev, &mstate, &wstate, temperature);
            let token = match forced.get(t) {
                Some(&x) => x,
                None => sample_categorical(rng, &out.probs),
            };
            ep.features.push(feature);
            ep.log_probs.push(out.probs[token].ln());
            ep.degenerate_goals += usize::from(out.manager.degenerate);
            ep.raw_goals.push(out.manager.raw_goal);
            ep.goals.push(out.manager.goal);
            ep.goal_sums.push(out.goal_sum);
            ep.goal_embeddings.push(out.goal_embedding);
            ep.outputs.push(out.output);
            mstate = out.manager.state;
            wstate = out.worker;
            ep.states.push((mstate.clone(), wstate.clone()));
            ep.tokens.push(token);
            prev = token;
        }
        ep.features.push(ex.features(&ep.tokens));
        ep
    }

    /// Generates one sequence with a generator seeded by `seed`.
    pub fn generate_one(&self, ex: &FeatureExtractor<'_>, temperature: f64, seed: u64) -> Episode {
        self.run(ex, &[], temperature, &mut seeded(seed))
    }

    /// Generates `n` sequences; sequence `i` is `generate_one` with seed
    /// `derive(seed, [i])`.
    pub fn generate(
        &self,
        ex: &FeatureExtractor<'_>,
        n: usize,
        temperature: f64,
        seed: u64,
    ) -> Vec<Episode> {
        (0..n)
            .into_par_iter()
            .map(|i| self.generate_one(ex, temperature, derive(seed, &[i as u64])))
            .collect()
    }

    /// Token sequences only.
    pub fn sample(
        &self,
        ex: &FeatureExtractor<'_>,
        n: usize,
        temperature: f64,
        seed: u64,
    ) -> Vec<Vec<usize>> {
        self.generate(ex, n, temperature, seed)
            .into_iter()
            .map(|e| e.tokens)
            .collect()
    }

    /// Teacher-forces a complete sequence through the policy.
    pub fn replay(&self, ex: &FeatureExtractor<'_>, tokens: &[usize], temperature: f64) -> Episode {
        assert_eq!(
            tokens.len(),
            self.config.horizon,
            "replay needs a full-length sequence"
        );
        self.run(ex, tokens, temperature, &mut seeded(0))
    }

    /// Completes `prefix[..t]` to the full horizon by sampling. States are
    /// rebuilt by replaying the prefix.
    pub fn rollout_continue(
        &self,
        ex: &FeatureExtractor<'_>,
        prefix: &[usize],
        t: usize,
        temperature: f64,
        seed: u64,
    ) -> Vec<usize> {
        let t = t.min(self.config.horizon);
        self.run(ex, &prefix[..t], temperature, &mut seeded(seed))
            .tokens
    }

    /// Completes an already generated episode from step `t` using the state
    /// snapshot recorded at that step instead of replaying the prefix.
    pub fn rollout_from_episode(
        &self,
        ex: &FeatureExtractor<'_>,
        episode: &Episode,
        t: usize,
        temperature: f64,
        seed: u64,
    ) -> Vec<usize> {
        let horizon = self.config.horizon;
        if t >= horizon {
            return episode.tokens.clone();
        }
        if t == 0 {
            return self.generate_one(ex, temperature, seed).tokens;
        }
        let mut rng = seeded(seed);
        let mut tokens = episode.tokens[..t].to_vec();
        let (mut mstate, mut wstate) = episode.state_after(t).clone();
        while tokens.len() < horizon {
            let feature = ex.prefix_features(&tokens);
            let out = self.step(
                &feature,
                *tokens.last().unwrap(),
                &mstate,
                &wstate,
                temperature,
            );
            let token = sample_categorical(&mut rng, &out.probs);
            mstate = out.manager.state;
            wstate = out.worker;
            tokens.push(token);
        }
        tokens
    }

    /// Accumulates into `grad` the gradient of `-Σ_t weights[t] · log G(x_t)`
    /// with respect to the Worker parameters (goal sums held constant) and
    /// returns that loss.
    pub fn worker_loss_grad(
        &self,
        tokens: &[usize],
        goal_sums: &[Vec<f64>],
        weights: &[f64],
        temperature: f64,
        grad: &mut Worker,
    ) -> f64 {
        let k = self.config.goal_dim;
        let mask = emit_mask(self.config.vocab_size);
        let mut state = LstmState::zeros(self.config.worker_hidden);
        let mut caches = Vec::with_capacity(tokens.len());
        let mut d_hidden = Vec::with_capacity(tokens.len());
        let mut loss = 0.0;
        let mut prev = START;
        for (t, &tok) in tokens.iter().enumerate() {
            let (out, next, cache) = self.worker_forward(prev, &state);
            let w = matvec(&self.worker.goal_embed.data, &goal_sums[t]);
            let l = logits(&out, &w);
            let probs = crate::math::masked_softmax(&l, temperature, &mask);
            loss -= weights[t] * probs[tok].ln();

            let mut dh = vec![0.0; self.config.worker_hidden];
            if weights[t] != 0.0 {
                let dlogits: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(v, &p)| weights[t] * (p - f64::from(u8::from(v == tok))) / temperature)
                    .collect();
                let mut d_out = vec![0.0; out.len()];
                let mut dw = vec![0.0; k];
                for (v, &dl) in dlogits.iter().enumerate() {
                    if dl == 0.0 {
                        continue;
                    }
                    let row = &out[v * k..(v + 1) * k];
                    for j in 0..k {
                        d_out[v * k + j] = dl * w[j];
                        dw[j] += dl * row[j];
                    }
                }
                outer_acc(&mut grad.goal_embed.data, &dw, &goal_sums[t]);
                outer_acc(&mut grad.out_weight.data, &d_out, &next.h);
                add_assign(&mut grad.out_bias.data, &d_out);
                matvec_t_acc(&self.worker.out_weight.data, &d_out, &mut dh);
            }
            d_hidden.push(dh);
            caches.push((prev, cache));
            state = next;
            prev = tok;
        }
        let hs = self.config.worker_hidden;
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        for ((prev, cache), dh) in caches.iter().zip(&d_hidden).rev() {
            let mut dh_total = dh.clone();
            add_assign(&mut dh_total, &dh_next);
            let (dx, dhp, dcp) =
                self.worker
                    .lstm
                    .backward(cache, &dh_total, &dc_next, &mut grad.lstm);
            add_assign(grad.embedding.row_mut(*prev), &dx);
            dh_next = dhp;
            dc_next = dcp;
        }
        loss
    }

    /// Accumulates into `grad` the gradient of
    /// `−Σ_j q[j] · d_cos(f_{j+c} − f_j, g_j(θ_m))` over `j + c ≤ T` with
    /// respect to the Manager parameters, features held constant, and returns
    /// that loss. Degenerate (zero) goals contribute nothing. `features`
    /// holds `f_0..=f_T`; `q` has one entry per step.
    pub fn manager_loss_grad(&self, features: &[Vec<f64>], q: &[f64], grad: &mut Manager) -> f64 {
        let horizon = self.config.horizon;
        let c = self.config.goal_horizon;
        let mut state = LstmState::zeros(self.config.manager_hidden);
        let mut caches = Vec::with_capacity(horizon);
        let mut d_raw = Vec::with_capacity(horizon);
        let mut hiddens = Vec::with_capacity(horizon);
        let mut loss = 0.0;
        for j in 0..horizon {
            let (raw, next, cache) = self.manager_forward(&features[j], &state);
            let mut d = vec![0.0; raw.len()];
            if j + c <= horizon && q[j] != 0.0 && norm(&raw) >= DEGENERATE_GOAL_NORM {
                let delta: Vec<f64> = features[j + c]
                    .iter()
                    .zip(&features[j])
                    .map(|(a, b)| a - b)
                    .collect();
                loss -= q[j] * cosine(&delta, &raw);
                for (dv, gv) in d.iter_mut().zip(cosine_grad_b(&delta, &raw)) {
                    *dv = -q[j] * gv;
                }
            }
            hiddens.push(next.h.clone());
            d_raw.push(d);
            caches.push(cache);
            state = next;
        }
        let hs = self.config.manager_hidden;
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        for j in (0..horizon).rev() {
            outer_acc(&mut grad.goal_weight.data, &d_raw[j], &hiddens[j]);
            add_assign(&mut grad.goal_bias.data, &d_raw[j]);
            let mut dh = dh_next.clone();
            matvec_t_acc(&self.manager.goal_weight.data, &d_raw[j], &mut dh);
            let (_, dhp, dcp) =
                self.manager
                    .lstm
                    .backward(&caches[j], &dh, &dc_next, &mut grad.lstm);
            dh_next = dhp;
            dc_next = dcp;
        }
        loss
    }

    /// Goal sums the Manager produces when fed `features[0..T]` (e.g. the
    /// leaked features of a real sentence's prefixes).
    pub fn manager_goal_sums(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (mut state, _) = self.initial_states();
        let mut sums = Vec::with_capacity(self.config.horizon);
        for f in features.iter().take(self.config.horizon) {
            let step = self.manager_step(f, &state);
            state = step.state;
            sums.push(state.goal_sum());
        }
        sums
    }

    pub fn zero_manager(&self) -> Manager {
        let mut m = self.manager.clone();
        m.zero();
        m
    }

    pub fn zero_worker(&self) -> Worker {
        let mut w = self.worker.clone();
        w.zero();
        w
    }
}

impl Parameterized for Manager {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("manager.lstm.weight".into(), &self.lstm.weight),
            ("manager.lstm.bias".into(), &self.lstm.bias),
            ("manager.goal.weight".into(), &self.goal_weight),
            ("manager.goal.bias".into(), &self.goal_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.lstm.weight,
            &mut self.lstm.bias,
            &mut self.goal_weight,
            &mut self.goal_bias,
        ]
    }
}

impl Parameterized for Worker {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("worker.embedding".into(), &self.embedding),
            ("worker.lstm.weight".into(), &self.lstm.weight),
            ("worker.lstm.bias".into(), &self.lstm.bias),
            ("worker.out.weight".into(), &self.out_weight),
            ("worker.out.bias".into(), &self.out_bias),
            ("worker.goal_embed".into(), &self.goal_embed),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embedding,
            &mut self.lstm.weight,
            &mut self.lstm.bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.goal_embed,
        ]
    }
}

impl Parameterized for Generator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.manager.named_params();
        v.extend(self.worker.named_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.manager.params_mut();
        v.extend(self.worker.params_mut());
        v
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::discriminator::{ConvSpec, Discriminator, FeatureSource};
    use crate::math::{argmax, entropy};

    pub(crate) fn toy(vocab: usize, seed: u64) -> (Generator, Discriminator) {
        let mut rng = seeded(seed);
        let spec = ConvSpec {
            windows: vec![(1, 2), (2, 2), (3, 2)],
            embedding_dim: 3,
            use_highway: true,
            dropout_keep: 1.0,
            l2_coeff: 0.0,
            feature_source: FeatureSource::PostHighway,
        };
        let disc = Discriminator::new(spec, vocab, 6, &mut rng).unwrap();
        let config = GeneratorConfig {
            vocab_size: vocab,
            horizon: 6,
            feature_dim: 6,
            goal_dim: 4,
            goal_horizon: 2,
            manager_hidden: 5,
            worker_hidden: 5,
            embedding_dim: 3,
            temperature_train: 1.5,
            temperature_sample: 1.0,
        };
        let mut gen = Generator::new(config, &mut rng).unwrap();
        // larger weights so the toy policy is far from uniform
        for t in gen.params_mut() {
            for v in &mut t.data {
                *v *= 5.0;
            }
        }
        (gen, disc)
    }

    #[test]
    fn goal_normalization() {
        let (g, degenerate) = normalize_goal(&[3.0, 4.0]);
        assert_eq!(g, vec![0.6, 0.8]);
        assert!(!degenerate);
        let (g, degenerate) = normalize_goal(&[0.0, 0.0]);
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(degenerate);
        let mut rng = seeded(0);
        for _ in 0..1000 {
            let raw = Tensor::normal(&[16], 3.0, &mut rng).data;
            assert!((norm(&normalize_goal(&raw).0) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn goal_embedding_is_linear_in_history() {
        let (mut gen, _) = toy(8, 1);
        gen.config.goal_horizon = 1;
        gen.config.goal_dim = 6;
        gen.worker.goal_embed = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            gen.worker.goal_embed.data[i * 6 + i] = 1.0;
        }
        let g = vec![0.5, -0.5, 0.5, 0.5, 0.0, 0.0];
        let history: VecDeque<Vec<f64>> = [g.clone()].into_iter().collect();
        assert_eq!(gen.goal_embedding(&history), g);
        let zeros: VecDeque<Vec<f64>> = (0..2).map(|_| vec![0.0; 6]).collect();
        assert_eq!(gen.goal_embedding(&zeros), vec![0.0; 6]);
    }

    #[test]
    fn manager_step_keeps_c_unit_goals() {
        let (gen, disc) = toy(8, 2);
        let ex = disc.extractor();
        let mut state = ManagerState::initial(5, 6, 2);
        for t in 0..5 {
            let step = gen.manager_step(&ex.prefix_features(&[2, 3, 4][..t.min(3)]), &state);
            assert_eq!(step.state.goal_history.len(), 2);
            assert!((norm(&step.goal) - 1.0).abs() < 1e-9);
            assert_eq!(step.state.goal_history[0], step.goal);
            state = step.state;
        }
    }

    #[test]
    fn worker_output_shape_and_zero_projection() {
        let (mut gen, _) = toy(10, 3);
        let (out, _) = gen.worker_step(4, &LstmState::zeros(5));
        assert_eq!(out.len(), 10 * 4);
        gen.worker.out_weight.data.fill(0.0);
        gen.worker.out_bias.data.fill(0.0);
        let (out, _) = gen.worker_step(7, &LstmState::zeros(5));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn action_distribution_examples() {
        let zero = vec![0.0; 5 * 2];
        let p = action_distribution(&zero, &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(&p[..2], &[0.0, 0.0]);
        for &x in &p[2..] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // O·w = (·, ·, 1, 0)
        let out = vec![9.0, 9.0, 9.0, 9.0, 1.0, 0.0, 0.0, 0.0];
        let p = action_distribution(&out, &[1.0, 0.0], 1.0).unwrap();
        assert!((p[2] - 0.7311).abs() < 1e-4);
        assert!((p[3] - 0.2689).abs() < 1e-4);
        assert!(matches!(
            action_distribution(&out, &[1.0, 0.0], 0.0),
            Err(Error::InvalidTemperature(_))
        ));
        assert!(action_distribution(&out, &[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn temperature_preserves_argmax_and_orders_entropy() {
        let mut rng = seeded(4);
        for _ in 0..100 {
            let out = Tensor::normal(&[12], 2.0, &mut rng).data;
            let w = [1.0];
            let cold = action_distribution(&out, &w, 0.5).unwrap();
            let warm = action_distribution(&out, &w, 2.0).unwrap();
            assert_eq!(argmax(&cold), argmax(&warm));
            let mut last = 0.0;
            for alpha in [0.25, 0.5, 1.0, 1.5, 2.0, 4.0] {
                let p = action_distribution(&out, &w, alpha).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let h = entropy(&p);
                assert!(h >= last - 1e-12);
                last = h;
            }
        }
    }

    #[test]
    fn generate_contract_and_determinism() {
        let (gen, disc) = toy(8, 5);
        let ex = disc.extractor();
        let a = gen.generate(&ex, 4, 1.0, 77);
        let b = gen.generate(&ex, 4, 1.0, 77);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.tokens.len(), 6);
            assert!(x.tokens.iter().all(|&t| (2..8).contains(&t)));
            assert_eq!(x.features.len(), 7);
            for v in [
                &x.goals,
                &x.goal_embeddings,
                &x.outputs,
                &x.goal_sums,
                &x.raw_goals,
            ] {
                assert_eq!(v.len(), 6);
            }
            for p in &x.log_probs {
                assert!(*p <= 0.0);
            }
        }
        assert_ne!(gen.sample(&ex, 4, 1.0, 77), gen.sample(&ex, 4, 1.0, 78));
    }

    #[test]
    fn single_emittable_token_gives_constant_sequence() {
        let (gen, disc) = toy(3, 6);
        let ex = disc.extractor();
        for ep in gen.generate(&ex, 3, 1.0, 1) {
            assert_eq!(ep.tokens, vec![2; 6]);
            assert!(ep.log_probs.iter().all(|&l| l == 0.0));
        }
    }

    #[test]
    fn rollout_boundaries_and_replay_consistency() {
        let (gen, disc) = toy(8, 7);
        let ex = disc.extractor();
        let ep = gen.generate_one(&ex, 1.5, 31);
        assert_eq!(gen.rollout_continue(&ex, &ep.tokens, 6, 1.5, 5), ep.tokens);
        assert_eq!(gen.rollout_continue(&ex, &[], 0, 1.5, 31), ep.tokens);
        for t in 1..6 {
            let replayed = gen.rollout_continue(&ex, &ep.tokens, t, 1.5, 99);
            let snap = gen.rollout_from_episode(&ex, &ep, t, 1.5, 99);
            assert_eq!(replayed, snap);
            assert_eq!(&replayed[..t], &ep.tokens[..t]);
        }
        let replay = gen.replay(&ex, &ep.tokens, 1.5);
        assert_eq!(replay.features, ep.features);
        assert_eq!(replay.log_probs, ep.log_probs);
    }

    #[test]
    fn deterministic_policy_has_unique_completion() {
        let (mut gen, disc) = toy(8, 8);
        // O_t row for token 5 dominates whatever the goal embedding is.
        gen.worker.out_weight.data.fill(0.0);
        gen.worker.out_bias.data.fill(0.0);
        gen.worker.goal_embed.data.fill(0.0);
        for j in 0..4 {
            gen.worker.goal_embed.data[j * 6 + j] = 1.0;
        }
        gen.manager.goal_weight.data.fill(0.0);
        gen.manager.goal_bias.data = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        gen.worker.out_bias.data[5 * 4] = 1e3;
        let ex = disc.extractor();
        let prefix = [2, 3, 4, 2, 3, 4];
        let a = gen.rollout_continue(&ex, &prefix, 2, 1.0, 1);
        let b = gen.rollout_continue(&ex, &prefix, 2, 1.0, 2);
        assert_eq!(a, b);
        assert_eq!(a, vec![2, 3, 5, 5, 5, 5]);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn worker_gradient_matches_finite_differences() {
        let (gen, disc) = toy(8, 9);
        let ex = disc.extractor();
        let ep = gen.generate_one(&ex, 1.5, 3);
        let weights = [0.3, -0.7, 1.0, 0.2, -0.4, 0.9];
        let mut grad = gen.zero_worker();
        gen.worker_loss_grad(&ep.tokens, &ep.goal_sums, &weights, 1.5, &mut grad);
        let h = 1e-5;
        let base = gen.worker.flatten();
        let analytic = grad.flatten();
        let mut checked = 0;
        for idx in (0..base.len()).step_by(3) {
            let an = analytic[idx];
            let eval = |delta: f64| {
                let mut g = gen.clone();
                let mut k = 0;
                for t in g.worker.params_mut() {
                    for v in t.data.iter_mut() {
                        if k == idx {
                            *v += delta;
                        }
                        k += 1;
                    }
                }
                let mut sink = g.zero_worker();
                g.worker_loss_grad(&ep.tokens, &ep.goal_sums, &weights, 1.5, &mut sink)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            if fd.abs() < 1e-7 && an.abs() < 1e-7 {
                continue;
            }
            assert!(rel_err(fd, an) < 1e-4, "param {idx}: fd {fd} vs {an}");
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn manager_gradient_matches_finite_differences() {
        let (gen, disc) = toy(8, 10);
        let ex = disc.extractor();
        let ep = gen.generate_one(&ex, 1.5, 4);
        let q = [0.9, 0.2, 0.6, 0.4, 0.7, 0.1];
        let mut grad = gen.zero_manager();
        gen.manager_loss_grad(&ep.features, &q, &mut grad);
        let h = 1e-5;
        let analytic = grad.flatten();
        let mut checked = 0;
        for (idx, &an) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut g = gen.clone();
                let mut k = 0;
                for t in g.manager.params_mut() {
                    for v in t.data.iter_mut() {
                        if k == idx {
                            *v += delta;
                        }
                        k += 1;
                    }
                }
                let mut sink = g.zero_manager();
                g.manager_loss_grad(&ep.features, &q, &mut sink)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            if fd.abs() < 1e-7 && an.abs() < 1e-7 {
                continue;
            }
            assert!(rel_err(fd, an) < 1e-4, "param {idx}: fd {fd} vs {an}");
            checked += 1;
        }
        assert!(checked > 50);
    }
}
