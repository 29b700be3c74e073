//! Metrics and model-explanation exports: oracle NLL, corpus BLEU, relative
//! gain by length, feature-trace PCA and Manager×Worker interaction products.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::corpus::{Nll, OracleModel, PAD};
use crate::discriminator::FeatureExtractor;
use crate::generator::{Episode, Generator};

/// Convention line written alongside every BLEU report.
pub const BLEU_CONVENTION: &str =
    "corpus-level BLEU, whole reference set per candidate, clipped by max reference count, closest-length brevity penalty, no smoothing";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub config_digest: String,
    pub samples: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,value,config_digest,samples";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.metric, self.value, self.config_digest, self.samples
        )
    }
}

/// Oracle NLL of `n` generator samples drawn at `α_sample`.
pub fn eval_nll(
    gen: &Generator,
    ex: &FeatureExtractor<'_>,
    oracle: &OracleModel,
    n: usize,
    seed: u64,
) -> Nll {
    let samples = gen.sample(ex, n, gen.config.temperature_sample, seed);
    oracle.nll(&samples)
}

/// Token ids up to the first `PAD`.
pub fn strip_padding(seq: &[usize]) -> &[usize] {
    let end = seq.iter().position(|&t| t == PAD).unwrap_or(seq.len());
    &seq[..end]
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-`n`. Every candidate is scored against the whole
/// reference set. Returns 0 (with a warning) when there are no candidate
/// tokens.
///
/// ```
/// use leakgen::evaluation::bleu_n;
/// let c = vec![vec!["a", "b", "c"]];
/// let r = vec![vec!["a", "b", "d"]];
/// assert!((bleu_n(&c, &r, 2) - (2.0f64 / 3.0 * 0.5).sqrt()).abs() < 1e-12);
/// ```
pub fn bleu_n<T: Eq + Hash + Clone + Sync>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    n: usize,
) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    assert!(!references.is_empty(), "BLEU needs at least one reference");
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    if cand_len == 0 {
        log::warn!("BLEU of an empty candidate set is 0");
        return 0.0;
    }

    let mut ref_lens: Vec<usize> = references.iter().map(Vec::len).collect();
    ref_lens.sort_unstable();
    ref_lens.dedup();

    let mut log_p = 0.0;
    for m in 1..=n {
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, m) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let (clipped, total) = candidates
            .par_iter()
            .map(|cand| {
                let counts = ngram_counts(cand, m);
                let clipped: usize = counts
                    .iter()
                    .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                    .sum();
                (clipped, cand.len().saturating_sub(m - 1))
            })
            .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if clipped == 0 || total == 0 {
            return 0.0;
        }
        log_p += (clipped as f64 / total as f64).ln();
    }

    let closest: usize = candidates
        .iter()
        .map(|c| closest_length(&ref_lens, c.len()))
        .sum();
    let bp = if cand_len > closest {
        1.0
    } else {
        (1.0 - closest as f64 / cand_len as f64).exp()
    };
    bp * (log_p / n as f64).exp()
}

// ties go to the shorter reference
fn closest_length(sorted: &[usize], len: usize) -> usize {
    let mut best = sorted[0];
    for &l in sorted {
        if l.abs_diff(len) < best.abs_diff(len) {
            best = l;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainPoint {
    /// Inclusive candidate-length range of the bucket.
    pub lo: usize,
    pub hi: usize,
    pub bleu_a: f64,
    pub bleu_b: f64,
    pub gain: f64,
    pub count_a: usize,
    pub count_b: usize,
}

/// `(BLEU_A − BLEU_B) / BLEU_B` per candidate-length bucket. `edges` are
/// ascending bucket lower bounds; the last bucket is open-ended. Buckets
/// where either side is empty or `BLEU_B = 0` are skipped with a note.
pub fn relative_gain_curve<T: Eq + Hash + Clone + Sync>(
    a: &[Vec<T>],
    b: &[Vec<T>],
    references: &[Vec<T>],
    edges: &[usize],
    n: usize,
) -> Vec<GainPoint> {
    let mut out = Vec::new();
    for (i, &lo) in edges.iter().enumerate() {
        let hi = edges.get(i + 1).map_or(usize::MAX, |&e| e - 1);
        let pick = |set: &[Vec<T>]| -> Vec<Vec<T>> {
            set.iter()
                .filter(|s| (lo..=hi).contains(&s.len()))
                .cloned()
                .collect()
        };
        let (ba, bb) = (pick(a), pick(b));
        if ba.is_empty() || bb.is_empty() {
            log::info!("length bucket {lo}..={hi} skipped: no candidates");
            continue;
        }
        let (bleu_a, bleu_b) = (bleu_n(&ba, references, n), bleu_n(&bb, references, n));
        if bleu_b == 0.0 {
            log::info!("length bucket {lo}..={hi} skipped: baseline BLEU is 0");
            continue;
        }
        out.push(GainPoint {
            lo,
            hi,
            bleu_a,
            bleu_b,
            gain: (bleu_a - bleu_b) / bleu_b,
            count_a: ba.len(),
            count_b: bb.len(),
        });
    }
    out
}

pub fn gain_curve_csv(points: &[GainPoint]) -> String {
    let mut s = String::from("lo,hi,bleu_a,bleu_b,gain,count_a,count_b\n");
    for p in points {
        let hi = if p.hi == usize::MAX {
            String::new()
        } else {
            p.hi.to_string()
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.lo, hi, p.bleu_a, p.bleu_b, p.gain, p.count_a, p.count_b
        );
    }
    s
}

/// Principal components of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits the top `k` components. Each component's sign is fixed so its
    /// largest-magnitude entry is positive.
    pub fn fit(points: &[Vec<f64>], k: usize) -> Pca {
        assert!(!points.is_empty(), "PCA needs at least one point");
        let d = points[0].len();
        let m = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            for (a, &x) in mean.iter_mut().zip(p) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centred = vec![0.0; d];
        for p in points {
            for ((c, &x), &mu) in centred.iter_mut().zip(p).zip(&mean) {
                *c = x - mu;
            }
            for i in 0..d {
                let ci = centred[i];
                if ci == 0.0 {
                    continue;
                }
                for j in i..d {
                    cov[(i, j)] += ci * centred[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / m;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut components = Vec::new();
        let mut variances = Vec::new();
        for &i in order.iter().take(k.min(d)) {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(eig.eigenvalues[i].max(0.0));
        }
        Pca {
            mean,
            components,
            variances,
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((a, b), mu)| a * (b - mu))
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceExport {
    /// Per generated sentence, the leaked features after each step (`T × d_f`).
    pub features: Vec<Vec<Vec<f64>>>,
    /// The same, projected onto the real-data PCA plane (`T × 2`).
    pub projections: Vec<Vec<Vec<f64>>>,
    /// Completed real sentences in the PCA plane (`M × 2`).
    pub reference: Vec<Vec<f64>>,
    pub pca: Pca,
}

/// Generates `n_sentences` at `α_sample`, leaks features step by step and
/// projects them onto the 2-D PCA plane of the real sentences' features.
pub fn feature_trace(
    gen: &Generator,
    ex: &FeatureExtractor<'_>,
    n_sentences: usize,
    real: &[Vec<usize>],
    seed: u64,
) -> TraceExport {
    let episodes = gen.generate(ex, n_sentences, gen.config.temperature_sample, seed);
    trace_from_episodes(&episodes, ex, real)
}

pub fn trace_from_episodes(
    episodes: &[Episode],
    ex: &FeatureExtractor<'_>,
    real: &[Vec<usize>],
) -> TraceExport {
    let real_feats: Vec<Vec<f64>> = real.par_iter().map(|s| ex.features(s)).collect();
    let pca = Pca::fit(&real_feats, 2);
    let reference = real_feats.iter().map(|f| pca.project(f)).collect();
    let features: Vec<Vec<Vec<f64>>> = episodes.iter().map(|e| e.features[1..].to_vec()).collect();
    let projections = features
        .iter()
        .map(|steps| steps.iter().map(|f| pca.project(f)).collect())
        .collect();
    TraceExport {
        features,
        projections,
        reference,
        pca,
    }
}

impl TraceExport {
    /// Long-form CSV: `source,sentence,step,dim,value` where `source` is
    /// `generated` (PCA coordinates per step) or `real` (reference cloud,
    /// step left empty).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,sentence,step,dim,value\n");
        for (i, steps) in self.projections.iter().enumerate() {
            for (t, p) in steps.iter().enumerate() {
                for (d, v) in p.iter().enumerate() {
                    let _ = writeln!(s, "generated,{i},{},{d},{v}", t + 1);
                }
            }
        }
        for (i, p) in self.reference.iter().enumerate() {
            for (d, v) in p.iter().enumerate() {
                let _ = writeln!(s, "real,{i},,{d},{v}");
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRow {
    pub sentence: usize,
    /// 1-based step.
    pub step: usize,
    pub token: usize,
    /// The sampled token's logit `O_t[x_t] · w_t`.
    pub logit: f64,
    /// `O_t[x_t] ⊙ w_t`, the `k` addends of `logit`.
    pub values: Vec<f64>,
}

/// Dimension-wise products of the Worker output row of each sampled token
/// with the goal embedding of that step.
pub fn interaction_export(episodes: &[Episode]) -> Vec<InteractionRow> {
    let mut rows = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        for t in 0..ep.len() {
            let w = &ep.goal_embeddings[t];
            let k = w.len();
            let tok = ep.tokens[t];
            let row = &ep.outputs[t][tok * k..(tok + 1) * k];
            let values: Vec<f64> = row.iter().zip(w).map(|(a, b)| a * b).collect();
            rows.push(InteractionRow {
                sentence: i,
                step: t + 1,
                token: tok,
                logit: crate::math::dot(row, w),
                values,
            });
        }
    }
    rows
}

pub fn interaction_csv(rows: &[InteractionRow], token_name: impl Fn(usize) -> String) -> String {
    let k = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("sentence,step,token,logit");
    for d in 0..k {
        let _ = write!(s, ",d{d}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{},{}",
            r.sentence,
            r.step,
            csv_field(&token_name(r.token)),
            r.logit
        );
        for v in &r.values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::tests::toy;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_hand_example() {
        let c = vec![words("a b c")];
        let r = vec![words("a b d")];
        let expect = (2.0f64 / 3.0 * 0.5).sqrt();
        assert!((bleu_n(&c, &r, 2) - expect).abs() < 1e-12);
        assert!((bleu_n(&c, &r, 2) - 0.5774).abs() < 1e-4);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let corpus = vec![
            words("the cat sat on the mat"),
            words("a dog ran far away today"),
            words("x y z w v u"),
        ];
        for n in 2..=5 {
            assert_eq!(bleu_n(&corpus, &corpus, n), 1.0);
        }
        let other = vec![words("p q r s t o")];
        assert_eq!(bleu_n(&other, &corpus, 2), 0.0);
    }

    #[test]
    fn bleu_clipping_and_brevity() {
        // classic "the the the" example: p1 = 2/7
        let c = vec![words("the the the the the the the")];
        let r = vec![words("the cat is on the mat")];
        assert!((bleu_n(&c, &r, 1) - 2.0 / 7.0).abs() < 1e-12);
        // short candidate: BP = exp(1 - 4/2)
        let c = vec![words("a b")];
        let r = vec![words("a b c d")];
        assert!((bleu_n(&c, &r, 1) - (1.0f64 - 2.0).exp()).abs() < 1e-12);
        // closest length wins, ties go short
        assert_eq!(closest_length(&[2, 4, 9], 3), 2);
        assert_eq!(closest_length(&[2, 4, 9], 8), 9);
    }

    #[test]
    fn bleu_empty_candidates_is_zero() {
        let c: Vec<Vec<&str>> = vec![vec![]];
        assert_eq!(bleu_n(&c, &[words("a")], 2), 0.0);
    }

    #[test]
    fn bleu_non_increasing_in_order() {
        let mut rng = seeded(3);
        let gen_corpus = |rng: &mut crate::rng::SeededRng, n: usize| -> Vec<Vec<usize>> {
            (0..n)
                .map(|_| (0..10).map(|_| rng.random_range(0..4)).collect())
                .collect()
        };
        let refs = gen_corpus(&mut rng, 30);
        let cands = gen_corpus(&mut rng, 20);
        let scores: Vec<f64> = (1..=5).map(|n| bleu_n(&cands, &refs, n)).collect();
        for w in scores.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{scores:?}");
        }
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn relative_gain_cases() {
        let refs = vec![words("a b c d"), words("a b"), words("c d e f g h")];
        let a = vec![words("a b c"), words("c d e f g")];
        let pts = relative_gain_curve(&a, &a, &refs, &[1, 4], 2);
        assert_eq!(pts.len(), 2);
        assert!(pts.iter().all(|p| p.gain == 0.0));
        let single = relative_gain_curve(&a, &a, &refs, &[1], 2);
        assert_eq!(single.len(), 1);
        // bucket with no candidates skipped
        let pts = relative_gain_curve(&a, &a, &refs, &[1, 4, 50], 2);
        assert_eq!(pts.len(), 2);
        let b = vec![words("a b d"), words("c d e x y")];
        let pts = relative_gain_curve(&a, &b, &refs, &[1, 4], 2);
        for p in &pts {
            assert!((p.gain - (p.bleu_a - p.bleu_b) / p.bleu_b).abs() < 1e-15);
            assert!(p.gain > 0.0);
        }
        assert!(gain_curve_csv(&pts).starts_with("lo,hi,"));
    }

    #[test]
    fn pca_axis_aligned_is_identity_up_to_sign() {
        // symmetric grid: zero cross-covariance
        let mut pts = Vec::new();
        for x in [-3.0, -1.0, 1.0, 3.0] {
            for y in [-0.5, 0.5] {
                pts.push(vec![x + 10.0, y - 2.0]);
            }
        }
        let pca = Pca::fit(&pts, 2);
        assert!((pca.components[0][0].abs() - 1.0).abs() < 1e-12);
        assert!((pca.components[1][1].abs() - 1.0).abs() < 1e-12);
        for p in &pts {
            let q = pca.project(p);
            assert!((q[0].abs() - (p[0] - pca.mean[0]).abs()).abs() < 1e-9);
            assert!((q[1].abs() - (p[1] - pca.mean[1]).abs()).abs() < 1e-9);
        }
    }

    fn projected_variance(points: &[Vec<f64>], mean: &[f64], basis: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|p| {
                basis
                    .iter()
                    .map(|b| {
                        let s: f64 = b
                            .iter()
                            .zip(p)
                            .zip(mean)
                            .map(|((a, x), m)| a * (x - m))
                            .sum();
                        s * s
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / points.len() as f64
    }

    // Gram-Schmidt on two random directions
    fn random_plane(rng: &mut crate::rng::SeededRng, d: usize) -> Vec<Vec<f64>> {
        let mut a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let mut b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let na = crate::math::norm(&a);
        a.iter_mut().for_each(|x| *x /= na);
        let p = crate::math::dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(x, y)| *x -= p * y);
        let nb = crate::math::norm(&b);
        b.iter_mut().for_each(|x| *x /= nb);
        vec![a, b]
    }

    #[test]
    fn pca_top2_beats_random_planes() {
        let mut rng = seeded(9);
        let d = 8;
        let scales: Vec<f64> = (0..d).map(|i| 1.0 + i as f64).collect();
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                scales
                    .iter()
                    .map(|s| {
                        s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect()
            })
            .collect();
        let pca = Pca::fit(&pts, 2);
        assert!(pca.variances[0] >= pca.variances[1]);
        for (i, c) in pca.components.iter().enumerate() {
            assert!((crate::math::norm(c) - 1.0).abs() < 1e-12);
            for c2 in &pca.components[i + 1..] {
                assert!(crate::math::dot(c, c2).abs() < 1e-12);
            }
        }
        let best = projected_variance(&pts, &pca.mean, &pca.components);
        assert!((best - pca.variances[0] - pca.variances[1]).abs() < 1e-9 * best);
        for _ in 0..100 {
            let plane = random_plane(&mut rng, d);
            assert!(projected_variance(&pts, &pca.mean, &plane) <= best + 1e-9);
        }
    }

    #[test]
    fn trace_of_copied_real_sentence_lands_on_reference() {
        let (gen, disc) = toy(8, 4);
        let ex = disc.extractor();
        let real: Vec<Vec<usize>> = vec![
            vec![2, 3, 4, 5, 6, 7],
            vec![7, 6, 5, 4, 3, 2],
            vec![2, 2, 3, 3, 4, 4],
        ];
        let eps: Vec<Episode> = real.iter().map(|s| gen.replay(&ex, s, 1.0)).collect();
        let tr = trace_from_episodes(&eps, &ex, &real);
        assert_eq!(tr.features.len(), 3);
        for (i, steps) in tr.projections.iter().enumerate() {
            assert_eq!(steps.len(), 6);
            assert_eq!(steps[5], tr.reference[i]);
        }
        let csv = tr.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 6 * 2 + 3 * 2);
    }

    #[test]
    fn interaction_sums_to_logit() {
        let (gen, disc) = toy(8, 6);
        let ex = disc.extractor();
        let eps = gen.generate(&ex, 5, 1.0, 17);
        let rows = interaction_export(&eps);
        assert_eq!(rows.len(), 5 * 6);
        for r in &rows {
            let ep = &eps[r.sentence];
            let l =
                crate::generator::logits(&ep.outputs[r.step - 1], &ep.goal_embeddings[r.step - 1]);
            let s: f64 = r.values.iter().sum();
            assert!((s - l[r.token]).abs() < 1e-9);
            assert!((r.logit - l[r.token]).abs() < 1e-12);
        }
        let csv = interaction_csv(&rows, |t| t.to_string());
        assert!(csv.starts_with("sentence,step,token,logit,d0,d1,d2,d3\n"));
    }

    #[test]
    fn interaction_zero_goal_embedding() {
        let (gen, disc) = toy(8, 6);
        let ex = disc.extractor();
        let mut eps = gen.generate(&ex, 1, 1.0, 2);
        eps[0]
            .goal_embeddings
            .iter_mut()
            .for_each(|w| w.iter_mut().for_each(|x| *x = 0.0));
        assert!(interaction_export(&eps)
            .iter()
            .all(|r| r.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn nll_of_oracle_against_itself() {
        // samples from the oracle scored by the oracle: two estimates agree
        let oracle = OracleModel::new(12, 8, 8, 1).unwrap();
        let a = oracle.nll(&oracle.sample(5000, 1));
        let b = oracle.nll(&oracle.sample(5000, 2));
        assert!((a.per_sequence - b.per_sequence).abs() / a.per_sequence < 0.01);
    }
}
