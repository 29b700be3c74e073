//! CNN text classifier split into a feature extractor (embedding, multi-window
//! convolution, max-over-time pooling, activation, optional highway) and a
//! sigmoid output layer. The feature vector is what gets leaked to the
//! generator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::math::{affine, dot, matvec_t_acc, outer_acc, sigmoid};
use crate::optim::Optimizer;
use crate::param::{par_accumulate, Parameterized, Tensor};
use crate::rng::{derive, seeded};

/// Which activation the leaked feature vector is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Output of the highway layer (the vector the output layer sees).
    PostHighway,
    /// Pooled and activated convolution map, before the highway layer.
    PreHighway,
}

impl FromStr for FeatureSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "post_highway" => Ok(FeatureSource::PostHighway),
            "pre_highway" => Ok(FeatureSource::PreHighway),
            other => Err(format!("unknown feature source `{other}`")),
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSource::PostHighway => "post_highway",
            FeatureSource::PreHighway => "pre_highway",
        })
    }
}

/// Convolution layout and regularisation of the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    /// `(window size, kernel count)` pairs.
    pub windows: Vec<(usize, usize)>,
    pub embedding_dim: usize,
    pub use_highway: bool,
    pub dropout_keep: f64,
    /// L2 coefficient on the output layer.
    pub l2_coeff: f64,
    pub feature_source: FeatureSource,
}

impl ConvSpec {
    fn with_windows(windows: Vec<(usize, usize)>) -> Self {
        ConvSpec {
            windows,
            embedding_dim: 64,
            use_highway: true,
            dropout_keep: 0.75,
            l2_coeff: 0.2,
            feature_source: FeatureSource::PostHighway,
        }
    }

    /// Layer structure for length-20 synthetic data.
    pub fn length_20() -> Self {
        Self::with_windows(vec![
            (1, 100),
            (2, 200),
            (3, 200),
            (4, 200),
            (5, 200),
            (6, 100),
            (7, 100),
            (8, 100),
            (9, 100),
            (10, 100),
            (15, 160),
            (20, 160),
        ])
    }

    /// Layer structure for length-40 synthetic data.
    pub fn length_40() -> Self {
        Self::with_windows(vec![
            (1, 100),
            (2, 200),
            (3, 200),
            (4, 200),
            (5, 200),
            (6, 100),
            (7, 100),
            (8, 100),
            (9, 100),
            (10, 100),
            (16, 160),
            (20, 160),
            (30, 160),
            (40, 160),
        ])
    }

    /// Small layout for laptop-scale runs: 20 kernels per window, windows
    /// spread over `1..=horizon`.
    pub fn desk(horizon: usize) -> Self {
        let mut windows: Vec<usize> = [1, 2, 3, 4, 5, 10, 15, 20]
            .into_iter()
            .filter(|&w| w <= horizon)
            .collect();
        if !windows.contains(&horizon) {
            windows.push(horizon);
        }
        ConvSpec {
            windows: windows.into_iter().map(|w| (w, 20)).collect(),
            embedding_dim: 16,
            use_highway: true,
            dropout_keep: 0.75,
            l2_coeff: 1e-4,
            feature_source: FeatureSource::PostHighway,
        }
    }

    /// Length of the leaked feature vector.
    pub fn feature_dim(&self) -> usize {
        self.windows.iter().map(|&(_, n)| n).sum()
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::InvalidConfig("conv spec has no windows".into()));
        }
        for &(w, n) in &self.windows {
            if w == 0 || w > horizon {
                return Err(Error::InvalidConfig(format!(
                    "window size {w} must be in 1..={horizon}"
                )));
            }
            if n == 0 {
                return Err(Error::InvalidConfig(format!("window {w} has zero kernels")));
            }
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig(
                "discriminator embedding_dim must be ≥ 1".into(),
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::InvalidConfig(
                "dropout_keep must be in (0, 1]".into(),
            ));
        }
        if self.l2_coeff < 0.0 {
            return Err(Error::InvalidConfig("l2_coeff must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Parses `"1:100,2:200"`.
    pub fn parse_windows(s: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|pair| {
                let (w, n) = pair
                    .split_once(':')
                    .ok_or_else(|| format!("expected window:count, got `{pair}`"))?;
                let w = w.trim().parse().map_err(|_| format!("bad window `{w}`"))?;
                let n = n.trim().parse().map_err(|_| format!("bad count `{n}`"))?;
                Ok((w, n))
            })
            .collect()
    }

    pub fn format_windows(&self) -> String {
        self.windows
            .iter()
            .map(|(w, n)| format!("{w}:{n}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub window: usize,
    /// `count × (window · embedding_dim)`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn count(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Highway {
    pub transform_weight: Tensor,
    pub transform_bias: Tensor,
    pub gate_weight: Tensor,
    pub gate_bias: Tensor,
}

/// Discriminator parameters: feature extractor (`embedding`, `convs`,
/// `highway`) and output layer (`out_weight`, `out_bias`).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: ConvSpec,
    pub horizon: usize,
    pub vocab_size: usize,
    pub embedding: Tensor,
    pub convs: Vec<ConvLayer>,
    pub highway: Option<Highway>,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active with masks drawn from `seed` (the same masks
    /// [`Discriminator::loss_and_grad`] uses for that seed).
    Train { seed: u64 },
    /// Deterministic evaluation; the mode features are leaked in.
    Leak,
}

/// Intermediate values of one forward pass.
struct Forward {
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    activated: Vec<f64>,
    highway: Option<HighwayCache>,
    features: Vec<f64>,
}

struct HighwayCache {
    transform_pre: Vec<f64>,
    transform: Vec<f64>,
    gate: Vec<f64>,
}

impl Discriminator {
    pub fn new<R: Rng>(
        spec: ConvSpec,
        vocab_size: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(horizon)?;
        let e = spec.embedding_dim;
        let df = spec.feature_dim();
        let embedding = Tensor::normal(&[vocab_size, e], 1.0, rng);
        let convs = spec
            .windows
            .iter()
            .map(|&(w, n)| ConvLayer {
                window: w,
                weight: Tensor::normal(&[n, w * e], (1.0 / (w * e) as f64).sqrt(), rng),
                bias: Tensor::filled(&[n], 0.1),
            })
            .collect();
        let highway = spec.use_highway.then(|| Highway {
            transform_weight: Tensor::normal(&[df, df], (1.0 / df as f64).sqrt(), rng),
            transform_bias: Tensor::zeros(&[df]),
            gate_weight: Tensor::normal(&[df, df], (1.0 / df as f64).sqrt(), rng),
            gate_bias: Tensor::filled(&[df], -2.0),
        });
        let out_weight = Tensor::normal(&[df], 0.1, rng);
        Ok(Discriminator {
            spec,
            horizon,
            vocab_size,
            embedding,
            convs,
            highway,
            out_weight,
            out_bias: Tensor::zeros(&[1]),
        })
    }

    /// Same layout, all parameters zero. Used for gradient buffers.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// Precomputes per-token convolution projections for fast leaking.
    pub fn extractor(&self) -> FeatureExtractor<'_> {
        FeatureExtractor::new(self)
    }

    fn pooled(&self, tokens: &[usize], table: Option<&ProjectionTable>) -> (Vec<f64>, Vec<usize>) {
        assert_eq!(
            tokens.len(),
            self.horizon,
            "sequence must be padded to the horizon"
        );
        let e = self.spec.embedding_dim;
        let mut pooled = Vec::with_capacity(self.feature_dim());
        let mut argmax = Vec::with_capacity(self.feature_dim());
        for (l, layer) in self.convs.iter().enumerate() {
            let w = layer.window;
            let n = layer.count();
            let positions = self.horizon - w + 1;
            for f in 0..n {
                let row = layer.weight.row(f);
                let mut best = f64::NEG_INFINITY;
                let mut best_q = 0;
                for q in 0..positions {
                    let mut acc = layer.bias.data[f];
                    for j in 0..w {
                        let tok = tokens[q + j];
                        acc += match table {
                            Some(t) => t.get(l, tok, j, f),
                            None => dot(&row[j * e..(j + 1) * e], self.embedding.row(tok)),
                        };
                    }
                    if acc > best {
                        best = acc;
                        best_q = q;
                    }
                }
                pooled.push(best);
                argmax.push(best_q);
            }
        }
        (pooled, argmax)
    }

    fn forward(&self, tokens: &[usize], table: Option<&ProjectionTable>) -> Forward {
        let (pooled, argmax) = self.pooled(tokens, table);
        let activated: Vec<f64> = pooled.iter().map(|&v| v.max(0.0)).collect();
        let (features, highway) = match &self.highway {
            Some(hw) => {
                let transform_pre = affine(
                    &hw.transform_weight.data,
                    &hw.transform_bias.data,
                    &activated,
                );
                let transform: Vec<f64> = transform_pre.iter().map(|&v| v.max(0.0)).collect();
                let gate: Vec<f64> = affine(&hw.gate_weight.data, &hw.gate_bias.data, &activated)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let out = (0..activated.len())
                    .map(|i| gate[i] * transform[i] + (1.0 - gate[i]) * activated[i])
                    .collect();
                (
                    out,
                    Some(HighwayCache {
                        transform_pre,
                        transform,
                        gate,
                    }),
                )
            }
            None => (activated.clone(), None),
        };
        Forward {
            argmax,
            pooled,
            activated,
            highway,
            features,
        }
    }

    fn leaked(&self, fwd: Forward) -> Vec<f64> {
        match self.spec.feature_source {
            FeatureSource::PostHighway => fwd.features,
            FeatureSource::PreHighway => fwd.activated,
        }
    }

    /// Feature vector of each (padded) sequence. In `Leak` mode this is
    /// deterministic; in `Train` mode the dropout mask is applied.
    pub fn extract_features(&self, batch: &[Vec<usize>], mode: Mode) -> Vec<Vec<f64>> {
        let ex = self.extractor();
        batch
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let f = ex.features(s);
                match mode {
                    Mode::Leak => f,
                    Mode::Train { seed } => {
                        let mask = self.dropout_mask(seed, i);
                        f.iter().zip(&mask).map(|(a, m)| a * m).collect()
                    }
                }
            })
            .collect()
    }

    /// Inverted-dropout mask for example `index` of a training batch.
    fn dropout_mask(&self, seed: u64, index: usize) -> Vec<f64> {
        let keep = self.spec.dropout_keep;
        let mut rng = seeded(derive(seed, &[index as u64]));
        (0..self.feature_dim())
            .map(|_| {
                if keep >= 1.0 || rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// `sigmoid(φ_l · f + b)` where `f` is the output-layer input.
    pub fn logit_of_features(&self, f: &[f64]) -> f64 {
        dot(&self.out_weight.data, f) + self.out_bias.data[0]
    }

    pub fn classify(&self, batch: &[Vec<usize>]) -> Vec<f64> {
        let ex = self.extractor();
        batch.iter().map(|s| ex.probability(s)).collect()
    }

    /// Mean binary cross-entropy (real → 1, fake → 0) with dropout masks drawn
    /// from `seed`, plus `l2_coeff · ‖φ_l‖²` on the output layer. Returns the loss and its gradient.
    pub fn loss_and_grad(
        &self,
        real: &[Vec<usize>],
        fake: &[Vec<usize>],
        seed: u64,
    ) -> (f64, Discriminator) {
        let n = real.len() + fake.len();
        let ex = self.extractor();
        let (mut grad, bce) = par_accumulate(
            n,
            || self.zeros_like(),
            |i, g| {
                let (seq, label) = if i < real.len() {
                    (&real[i], 1.0)
                } else {
                    (&fake[i - real.len()], 0.0)
                };
                let mask = self.dropout_mask(seed, i);
                self.example_backward(&ex, seq, label, &mask, 1.0 / n as f64, g)
            },
        );
        let l2 = self.spec.l2_coeff;
        let penalty = l2
            * (dot(&self.out_weight.data, &self.out_weight.data) + self.out_bias.data[0].powi(2));
        if l2 > 0.0 {
            for (g, w) in grad.out_weight.data.iter_mut().zip(&self.out_weight.data) {
                *g += 2.0 * l2 * w;
            }
            grad.out_bias.data[0] += 2.0 * l2 * self.out_bias.data[0];
        }
        (bce / n as f64 + penalty, grad)
    }

    /// Accumulates `scale ·` gradient of one example's BCE; returns its
    /// unscaled loss.
    fn example_backward(
        &self,
        ex: &FeatureExtractor<'_>,
        seq: &[usize],
        label: f64,
        mask: &[f64],
        scale: f64,
        g: &mut Discriminator,
    ) -> f64 {
        let fwd = self.forward(seq, ex.table.as_ref());
        let dropped: Vec<f64> = fwd.features.iter().zip(mask).map(|(a, m)| a * m).collect();
        let s = self.logit_of_features(&dropped);
        // softplus(s) - y s, evaluated stably
        let loss = s.max(0.0) + (-s.abs()).exp().ln_1p() - label * s;
        let ds = (sigmoid(s) - label) * scale;

        outer_acc(&mut g.out_weight.data, &[ds], &dropped);
        g.out_bias.data[0] += ds;
        let dfeat: Vec<f64> = self
            .out_weight
            .data
            .iter()
            .zip(mask)
            .map(|(w, m)| ds * w * m)
            .collect();

        let mut dact = vec![0.0; dfeat.len()];
        match (&self.highway, &fwd.highway, &mut g.highway) {
            (Some(hw), Some(hc), Some(ghw)) => {
                let mut dt_pre = vec![0.0; dfeat.len()];
                let mut dg_pre = vec![0.0; dfeat.len()];
                for i in 0..dfeat.len() {
                    let d = dfeat[i];
                    dact[i] += d * (1.0 - hc.gate[i]);
                    if hc.transform_pre[i] > 0.0 {
                        dt_pre[i] = d * hc.gate[i];
                    }
                    let dgate = d * (hc.transform[i] - fwd.activated[i]);
                    dg_pre[i] = dgate * hc.gate[i] * (1.0 - hc.gate[i]);
                }
                outer_acc(&mut ghw.transform_weight.data, &dt_pre, &fwd.activated);
                outer_acc(&mut ghw.gate_weight.data, &dg_pre, &fwd.activated);
                for i in 0..dfeat.len() {
                    ghw.transform_bias.data[i] += dt_pre[i];
                    ghw.gate_bias.data[i] += dg_pre[i];
                }
                matvec_t_acc(&hw.transform_weight.data, &dt_pre, &mut dact);
                matvec_t_acc(&hw.gate_weight.data, &dg_pre, &mut dact);
            }
            _ => dact.copy_from_slice(&dfeat),
        }

        let e = self.spec.embedding_dim;
        let mut k = 0;
        for (layer, glayer) in self.convs.iter().zip(g.convs.iter_mut()) {
            let w = layer.window;
            for f in 0..layer.count() {
                let dm = if fwd.pooled[k] > 0.0 { dact[k] } else { 0.0 };
                let q = fwd.argmax[k];
                k += 1;
                if dm == 0.0 {
                    continue;
                }
                glayer.bias.data[f] += dm;
                let row = layer.weight.row(f);
                for j in 0..w {
                    let tok = seq[q + j];
                    let emb = self.embedding.row(tok);
                    let grow = &mut glayer.weight.row_mut(f)[j * e..(j + 1) * e];
                    for d in 0..e {
                        grow[d] += dm * emb[d];
                    }
                    let gemb = g.embedding.row_mut(tok);
                    for d in 0..e {
                        gemb[d] += dm * row[j * e + d];
                    }
                }
            }
        }
        loss
    }

    /// One optimizer step on the discriminator loss. Returns the loss.
    pub fn train_step(
        &mut self,
        opt: &mut Optimizer,
        real: &[Vec<usize>],
        fake: &[Vec<usize>],
        seed: u64,
    ) -> Result<f64> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::InvalidConfig(
                "discriminator batches must be non-empty".into(),
            ));
        }
        let (loss, grad) = self.loss_and_grad(real, fake, seed);
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::non_finite("discriminator", 0, "loss"));
        }
        opt.descend(self, &grad);
        Ok(loss)
    }
}

/// Per-token convolution projections `W[f, j-slice] · E[token]`, laid out as
/// `[(token · window + j) · count + f]` per layer.
struct ProjectionTable {
    layers: Vec<(usize, usize, Vec<f64>)>,
}

impl ProjectionTable {
    /// Entries beyond this budget fall back to on-the-fly dot products.
    const MAX_ENTRIES: usize = 16 << 20;

    fn build(d: &Discriminator) -> Option<Self> {
        let per_token: usize = d.convs.iter().map(|c| c.window * c.count()).sum();
        if per_token * d.vocab_size > Self::MAX_ENTRIES {
            return None;
        }
        let e = d.spec.embedding_dim;
        let layers = d
            .convs
            .iter()
            .map(|layer| {
                let (w, n) = (layer.window, layer.count());
                let mut data = vec![0.0; d.vocab_size * w * n];
                for tok in 0..d.vocab_size {
                    let emb = d.embedding.row(tok);
                    for j in 0..w {
                        for f in 0..n {
                            data[(tok * w + j) * n + f] =
                                dot(&layer.weight.row(f)[j * e..(j + 1) * e], emb);
                        }
                    }
                }
                (w, n, data)
            })
            .collect();
        Some(ProjectionTable { layers })
    }

    #[inline]
    fn get(&self, layer: usize, tok: usize, j: usize, f: usize) -> f64 {
        let (w, n, ref data) = self.layers[layer];
        data[(tok * w + j) * n + f]
    }
}

/// Read-only view over a frozen discriminator used to leak features.
/// Results are bit-identical with or without the projection cache.
pub struct FeatureExtractor<'a> {
    pub disc: &'a Discriminator,
    table: Option<ProjectionTable>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(disc: &'a Discriminator) -> Self {
        FeatureExtractor {
            disc,
            table: ProjectionTable::build(disc),
        }
    }

    pub fn horizon(&self) -> usize {
        self.disc.horizon
    }

    pub fn feature_dim(&self) -> usize {
        self.disc.feature_dim()
    }

    /// Leak-mode features of a full-length sequence.
    pub fn features(&self, seq: &[usize]) -> Vec<f64> {
        self.disc
            .leaked(self.disc.forward(seq, self.table.as_ref()))
    }

    /// Leak-mode features of a prefix, padded with `PAD` to the horizon.
    pub fn prefix_features(&self, prefix: &[usize]) -> Vec<f64> {
        let mut padded = Vec::with_capacity(self.horizon());
        padded.extend_from_slice(prefix);
        padded.resize(self.horizon(), PAD);
        self.features(&padded)
    }

    pub fn probability(&self, seq: &[usize]) -> f64 {
        let fwd = self.disc.forward(seq, self.table.as_ref());
        sigmoid(self.disc.logit_of_features(&fwd.features))
    }
}

impl Parameterized for Discriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("disc.embedding".to_string(), &self.embedding)];
        for c in &self.convs {
            v.push((format!("disc.conv{}.weight", c.window), &c.weight));
            v.push((format!("disc.conv{}.bias", c.window), &c.bias));
        }
        if let Some(h) = &self.highway {
            v.push(("disc.highway.transform.weight".into(), &h.transform_weight));
            v.push(("disc.highway.transform.bias".into(), &h.transform_bias));
            v.push(("disc.highway.gate.weight".into(), &h.gate_weight));
            v.push(("disc.highway.gate.bias".into(), &h.gate_bias));
        }
        v.push(("disc.out.weight".into(), &self.out_weight));
        v.push(("disc.out.bias".into(), &self.out_bias));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embedding];
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        if let Some(h) = &mut self.highway {
            v.push(&mut h.transform_weight);
            v.push(&mut h.transform_bias);
            v.push(&mut h.gate_weight);
            v.push(&mut h.gate_bias);
        }
        v.push(&mut self.out_weight);
        v.push(&mut self.out_bias);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::rng::seeded;

    fn toy_spec() -> ConvSpec {
        ConvSpec {
            windows: vec![(1, 3), (2, 3), (4, 2)],
            embedding_dim: 3,
            use_highway: true,
            dropout_keep: 1.0,
            l2_coeff: 0.0,
            feature_source: FeatureSource::PostHighway,
        }
    }

    #[test]
    fn standard_layouts_have_expected_feature_dims() {
        assert_eq!(ConvSpec::length_20().feature_dim(), 1720);
        assert!(ConvSpec::length_20().validate(20).is_ok());
        assert!(ConvSpec::length_40().validate(40).is_ok());
        assert_eq!(ConvSpec::desk(20).feature_dim(), 160);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let mut rng = seeded(0);
        let spec = ConvSpec::length_20();
        assert!(Discriminator::new(spec, 10, 19, &mut rng).is_err());
    }

    #[test]
    fn window_list_round_trips_through_text() {
        let spec = ConvSpec::length_20();
        let parsed = ConvSpec::parse_windows(&spec.format_windows()).unwrap();
        assert_eq!(parsed, spec.windows);
        assert!(ConvSpec::parse_windows("3-4").is_err());
    }

    #[test]
    fn zero_filters_give_zero_preactivation_map() {
        let mut rng = seeded(1);
        let mut d = Discriminator::new(toy_spec(), 6, 5, &mut rng).unwrap();
        for c in &mut d.convs {
            c.weight.data.fill(0.0);
            c.bias.data.fill(0.0);
        }
        let (pooled, _) = d.pooled(&[PAD; 5], None);
        assert!(pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn table_and_direct_paths_agree_bitwise() {
        let mut rng = seeded(2);
        let d = Discriminator::new(toy_spec(), 7, 5, &mut rng).unwrap();
        let seq = vec![3, 4, 2, 0, 0];
        let table = ProjectionTable::build(&d).unwrap();
        let a = d.forward(&seq, Some(&table)).features;
        let b = d.forward(&seq, None).features;
        assert_eq!(a, b);
    }

    #[test]
    fn classify_of_zero_output_layer_is_half() {
        let mut rng = seeded(3);
        let mut d = Discriminator::new(toy_spec(), 7, 5, &mut rng).unwrap();
        d.out_weight.data.fill(0.0);
        d.out_bias.data[0] = 0.0;
        for p in d.classify(&[vec![2, 3, 4, 5, 6], vec![0; 5]]) {
            assert_eq!(p, 0.5);
        }
        d.out_bias.data[0] = 3.0;
        assert!((d.classify(&[vec![2; 5]])[0] - 0.952_574_126_822_433_3).abs() < 1e-15);
    }

    #[test]
    fn output_layer_gradient_matches_finite_differences() {
        let mut rng = seeded(4);
        let spec = ConvSpec {
            windows: vec![(1, 4), (3, 4)],
            ..toy_spec()
        };
        let d = Discriminator::new(spec, 9, 6, &mut rng).unwrap();
        assert_eq!(d.feature_dim(), 8);
        let real = vec![vec![2, 3, 4, 5, 6, 7], vec![8, 8, 2, 0, 0, 0]];
        let fake = vec![vec![4, 4, 4, 4, 4, 4]];
        let (_, grad) = d.loss_and_grad(&real, &fake, 9);
        let h = 1e-5;
        for i in 0..8 {
            let mut p = d.clone();
            p.out_weight.data[i] += h;
            let mut m = d.clone();
            m.out_weight.data[i] -= h;
            let fd = (p.loss_and_grad(&real, &fake, 9).0 - m.loss_and_grad(&real, &fake, 9).0)
                / (2.0 * h);
            let an = grad.out_weight.data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            assert!(rel < 1e-4, "dim {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences_with_dropout_and_l2() {
        let mut rng = seeded(5);
        let spec = ConvSpec {
            dropout_keep: 0.75,
            l2_coeff: 0.01,
            ..toy_spec()
        };
        let d = Discriminator::new(spec, 6, 5, &mut rng).unwrap();
        let real = vec![vec![2, 3, 4, 5, 2]];
        let fake = vec![vec![5, 5, 3, 0, 0]];
        let (_, grad) = d.loss_and_grad(&real, &fake, 17);
        let names: Vec<String> = d.named_params().into_iter().map(|(n, _)| n).collect();
        let analytic = grad.flatten();
        let base = d.flatten();
        let h = 1e-5;
        let mut offset = 0;
        for (name, t) in d.named_params() {
            for j in 0..t.len() {
                let idx = offset + j;
                let eval = |delta: f64| {
                    let mut q = d.clone();
                    let mut k = 0;
                    for p in q.params_mut() {
                        for v in p.data.iter_mut() {
                            if k == idx {
                                *v = base[idx] + delta;
                            }
                            k += 1;
                        }
                    }
                    q.loss_and_grad(&real, &fake, 17).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - analytic[idx]).abs() < 1e-6 + 1e-4 * fd.abs(),
                    "{name}[{j}]: fd {fd} analytic {}",
                    analytic[idx]
                );
            }
            offset += t.len();
        }
        assert!(!names.is_empty());
    }

    #[test]
    fn identical_real_and_fake_cannot_beat_ln2() {
        let mut rng = seeded(6);
        let mut d = Discriminator::new(toy_spec(), 6, 5, &mut rng).unwrap();
        let batch = vec![vec![2, 3, 4, 5, 2], vec![3, 3, 3, 0, 0]];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);
        for s in 0..100 {
            let loss = d.train_step(&mut opt, &batch, &batch, s).unwrap();
            assert!(loss >= std::f64::consts::LN_2 - 1e-12, "{loss}");
        }
    }

    #[test]
    fn learns_a_separable_toy_set() {
        let mut rng = seeded(7);
        let spec = ConvSpec {
            dropout_keep: 0.75,
            l2_coeff: 1e-4,
            ..toy_spec()
        };
        let mut d = Discriminator::new(spec, 6, 5, &mut rng).unwrap();
        let real: Vec<Vec<usize>> = (0..8).map(|i| vec![2, 3, 2 + i % 4, 4, 5]).collect();
        let fake: Vec<Vec<usize>> = (0..8).map(|i| vec![5, 5, 2 + i % 4, 3, 2]).collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        for s in 0..200 {
            d.train_step(&mut opt, &real, &fake, s).unwrap();
        }
        let eval_only = Discriminator {
            spec: ConvSpec {
                dropout_keep: 1.0,
                l2_coeff: 0.0,
                ..d.spec.clone()
            },
            ..d.clone()
        };
        let (loss, _) = eval_only.loss_and_grad(&real, &fake, 0);
        assert!(loss < 0.1, "loss {loss}");
    }
}
