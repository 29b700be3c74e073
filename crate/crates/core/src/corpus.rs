//! Vocabulary, corpus ingestion and the synthetic LSTM oracle that serves as
//! ground-truth data distribution for the NLL benchmark.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lstm::{Lstm, LstmState};
use crate::math::{affine, masked_softmax};
use crate::param::{Parameterized, Tensor};
use crate::rng::{derive, sample_categorical, seeded};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";

/// A batch of fixed-horizon token id sequences.
pub type SequenceBatch = Vec<Vec<usize>>;

/// Bijective token ↔ id map. Ids are dense; `PAD = 0` and `START = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Result of [`Vocabulary::build`]: the vocabulary plus indices of sentences
/// that contain a dropped (infrequent) token.
#[derive(Debug, Clone)]
pub struct VocabBuild {
    pub vocab: Vocabulary,
    pub flagged: Vec<usize>,
}

impl Vocabulary {
    /// Builds from an ordered list of ordinary tokens; specials are prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), START_TOKEN.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Vocabulary whose ordinary tokens are their own decimal ids, used for
    /// oracle data so sequence files double as id dumps.
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= 2, "vocabulary needs room for the special tokens");
        Self::from_tokens((2..size).map(|i| i.to_string())).expect("ids are unique")
    }

    /// Counts token frequencies and keeps every token seen at least
    /// `min_freq` times, ordered by frequency (descending) then
    /// lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<VocabBuild> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && t != PAD_TOKEN && t != START_TOKEN)
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let vocab = Self::from_tokens(kept.iter().map(|(t, _)| t.to_string()))?;
        let flagged = corpus
            .iter()
            .enumerate()
            .filter(|(_, s)| s.iter().any(|t| vocab.id(t.as_ref()).is_none()))
            .map(|(i, _)| i)
            .collect();
        Ok(VocabBuild { vocab, flagged })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids and right-pads with `PAD` to `horizon`.
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S], horizon: usize) -> Result<Vec<usize>> {
        if sentence.len() > horizon {
            return Err(Error::SequenceTooLong {
                len: sentence.len(),
                horizon,
            });
        }
        let mut ids = Vec::with_capacity(horizon);
        for tok in sentence {
            let tok = tok.as_ref();
            match self.id(tok) {
                Some(id) if id != PAD && id != START => ids.push(id),
                _ => return Err(Error::UnknownToken(tok.to_string())),
            }
        }
        ids.resize(horizon, PAD);
        Ok(ids)
    }

    /// Inverse of [`Vocabulary::encode`]: stops at the first `PAD`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != PAD)
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    /// One token per line; the line number is the id. Header lines are
    /// written first as `# ` comments (tokens never contain spaces, so the
    /// two cannot collide) and are not counted.
    pub fn save(&self, path: &Path, header: &[String]) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for h in header {
            writeln!(out, "# {h}")?;
        }
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().skip_while(|l| l.starts_with("# ")).collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != START_TOKEN {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("vocabulary must start with {PAD_TOKEN} and {START_TOKEN}"),
            });
        }
        Self::from_tokens(lines[2..].iter().copied())
    }
}

/// Reads a corpus: one sentence per line, whitespace-separated tokens. Blank
/// lines and provenance comments are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with(crate::metrics::PROVENANCE_PREFIX))
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect())
}

/// An encoded corpus ready for training.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub vocab: Vocabulary,
    pub sequences: SequenceBatch,
    pub dropped_rare: usize,
    pub dropped_long: usize,
}

/// Builds the vocabulary, drops sentences with rare tokens or more than
/// `horizon` tokens, and encodes the rest.
pub fn prepare_corpus(
    sentences: &[Vec<String>],
    min_freq: usize,
    horizon: usize,
) -> Result<PreparedCorpus> {
    let VocabBuild { vocab, flagged } = Vocabulary::build(sentences, min_freq)?;
    let mut is_flagged = vec![false; sentences.len()];
    for i in &flagged {
        is_flagged[*i] = true;
    }
    let mut sequences = Vec::new();
    let mut dropped_long = 0;
    for (s, flag) in sentences.iter().zip(is_flagged) {
        if flag {
            continue;
        }
        if s.len() > horizon {
            dropped_long += 1;
            continue;
        }
        sequences.push(vocab.encode(s, horizon)?);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(PreparedCorpus {
        vocab,
        sequences,
        dropped_rare: flagged.len(),
        dropped_long,
    })
}

/// Writes sequences in corpus format (decoded tokens, one sentence per line),
/// preceded by `header` lines written as `# ...` comments.
pub fn write_sequences(
    path: &Path,
    vocab: &Vocabulary,
    seqs: &[Vec<usize>],
    header: &[String],
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for h in header {
        writeln!(out, "# {h}")?;
    }
    for s in seqs {
        writeln!(out, "{}", vocab.decode(s).join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a sequence file written by [`write_sequences`], skipping `#` lines.
pub fn read_sequences(path: &Path, vocab: &Vocabulary, horizon: usize) -> Result<SequenceBatch> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        out.push(vocab.encode(&toks, horizon).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `true` for ids a model may emit (everything but `PAD` and `START`).
pub fn emit_mask(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size).map(|i| i != PAD && i != START).collect()
}

/// Negative log-likelihood under the oracle, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    /// Per-sequence summed NLL averaged over the batch (the headline value).
    pub per_sequence: f64,
    /// `per_sequence / horizon`.
    pub per_token: f64,
    pub count: usize,
}

/// Randomly initialised single-layer LSTM language model whose samples define
/// the synthetic training distribution. Embedding size equals hidden size.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    pub embedding: Tensor,
    pub lstm: Lstm,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub vocab_size: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl OracleModel {
    /// All parameters i.i.d. `N(0, 1)` from a generator seeded with `seed`.
    pub fn new(vocab_size: usize, horizon: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::InvalidConfig(
                "oracle needs at least one non-special token".into(),
            ));
        }
        if hidden == 0 {
            return Err(Error::InvalidConfig(
                "oracle hidden size must be ≥ 1".into(),
            ));
        }
        let mut rng = seeded(seed);
        let embedding = Tensor::normal(&[vocab_size, hidden], 1.0, &mut rng);
        let lstm = Lstm::normal(hidden, hidden, 1.0, &mut rng);
        let out_weight = Tensor::normal(&[vocab_size, hidden], 1.0, &mut rng);
        let out_bias = Tensor::normal(&[vocab_size], 1.0, &mut rng);
        Ok(OracleModel {
            embedding,
            lstm,
            out_weight,
            out_bias,
            vocab_size,
            horizon,
            seed,
        })
    }

    /// Oracle with zero output layer: every step is uniform over the
    /// `vocab_size - 2` emittable tokens.
    pub fn uniform(vocab_size: usize, horizon: usize, hidden: usize) -> Self {
        OracleModel {
            embedding: Tensor::zeros(&[vocab_size, hidden]),
            lstm: Lstm::zeros(hidden, hidden),
            out_weight: Tensor::zeros(&[vocab_size, hidden]),
            out_bias: Tensor::zeros(&[vocab_size]),
            vocab_size,
            horizon,
            seed: 0,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size
    }

    fn next_distribution(
        &self,
        state: &LstmState,
        token: usize,
        mask: &[bool],
    ) -> (Vec<f64>, LstmState) {
        let (next, _) = self.lstm.step(self.embedding.row(token), state);
        let logits = affine(&self.out_weight.data, &self.out_bias.data, &next.h);
        (masked_softmax(&logits, 1.0, mask), next)
    }

    fn sample_one<R: Rng>(&self, rng: &mut R, mask: &[bool]) -> Vec<usize> {
        let mut state = LstmState::zeros(self.hidden_size());
        let mut prev = START;
        let mut seq = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let (probs, next) = self.next_distribution(&state, prev, mask);
            state = next;
            prev = sample_categorical(rng, &probs);
            seq.push(prev);
        }
        seq
    }

    /// Draws `n` sequences of exactly `horizon` tokens. Sequence `i` uses its
    /// own generator derived from `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> SequenceBatch {
        let mask = emit_mask(self.vocab_size);
        (0..n)
            .into_par_iter()
            .map(|i| self.sample_one(&mut seeded(derive(seed, &[i as u64])), &mask))
            .collect()
    }

    /// Summed negative log-probability of one sequence.
    pub fn sequence_nll(&self, seq: &[usize]) -> f64 {
        let mask = emit_mask(self.vocab_size);
        let mut state = LstmState::zeros(self.hidden_size());
        let mut prev = START;
        let mut total = 0.0;
        for &tok in seq {
            let (probs, next) = self.next_distribution(&state, prev, &mask);
            state = next;
            total -= probs[tok].ln();
            prev = tok;
        }
        total
    }

    pub fn nll(&self, batch: &[Vec<usize>]) -> Nll {
        let sums: Vec<f64> = batch.par_iter().map(|s| self.sequence_nll(s)).collect();
        let per_sequence = sums.iter().sum::<f64>() / batch.len().max(1) as f64;
        Nll {
            per_sequence,
            per_token: per_sequence / self.horizon.max(1) as f64,
            count: batch.len(),
        }
    }
}

impl Parameterized for OracleModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("oracle.embedding".into(), &self.embedding),
            ("oracle.lstm.weight".into(), &self.lstm.weight),
            ("oracle.lstm.bias".into(), &self.lstm.bias),
            ("oracle.out.weight".into(), &self.out_weight),
            ("oracle.out.bias".into(), &self.out_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embedding,
            &mut self.lstm.weight,
            &mut self.lstm.bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn build_orders_by_frequency_then_lexicographic() {
        let corpus = vec![toks("a b"), toks("b c")];
        let built = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(built.vocab.tokens(), &["<pad>", "<start>", "b", "a", "c"]);
        assert_eq!(built.vocab.len(), 5);
        assert!(built.flagged.is_empty());
    }

    #[test]
    fn build_flags_sentences_with_dropped_tokens() {
        let corpus = vec![toks("a b"), toks("b c")];
        let built = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(built.vocab.tokens(), &["<pad>", "<start>", "b"]);
        assert_eq!(built.flagged, vec![0, 1]);
    }

    #[test]
    fn build_rejects_when_nothing_survives() {
        let corpus = vec![toks("a b")];
        assert!(matches!(
            Vocabulary::build(&corpus, 2),
            Err(Error::EmptyCorpus)
        ));
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(
            Vocabulary::build(&empty, 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_pads_and_rejects_unknown() {
        let v = Vocabulary::build(&[toks("a b"), toks("b c")], 1)
            .unwrap()
            .vocab;
        assert_eq!(v.encode(&["b"], 3).unwrap(), vec![2, PAD, PAD]);
        assert_eq!(v.encode::<&str>(&[], 2).unwrap(), vec![PAD, PAD]);
        match v.encode(&["zzz"], 3) {
            Err(Error::UnknownToken(t)) => assert_eq!(t, "zzz"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            v.encode(&["a", "b", "c"], 2),
            Err(Error::SequenceTooLong { len: 3, horizon: 2 })
        ));
        assert!(v.encode(&[PAD_TOKEN], 2).is_err());
    }

    #[test]
    fn prepare_drops_long_and_rare() {
        let corpus = vec![toks("a a"), toks("a a a a"), toks("a z"), toks("a")];
        let p = prepare_corpus(&corpus, 2, 3).unwrap();
        assert_eq!(p.sequences, vec![vec![2, 2, PAD], vec![2, PAD, PAD]]);
        assert_eq!(p.dropped_rare, 1);
        assert_eq!(p.dropped_long, 1);
    }

    #[test]
    fn oracle_is_deterministic() {
        let a = OracleModel::new(50, 8, 8, 42).unwrap();
        let b = OracleModel::new(50, 8, 8, 42).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.sample(3, 9), b.sample(3, 9));
        let c = OracleModel::new(50, 8, 8, 43).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn oracle_weights_are_standard_normal() {
        let o = OracleModel::new(1000, 20, 64, 5).unwrap();
        let flat = o.flatten();
        assert!(flat.len() >= 100_000);
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn oracle_samples_respect_contract() {
        let o = OracleModel::new(30, 12, 8, 1).unwrap();
        for s in o.sample(20, 2) {
            assert_eq!(s.len(), 12);
            assert!(s.iter().all(|&t| (2..30).contains(&t)));
        }
    }

    #[test]
    fn uniform_oracle_nll_closed_form() {
        let o = OracleModel::uniform(5002, 20, 4);
        let batch = vec![vec![7; 20], vec![4999; 20]];
        let nll = o.nll(&batch);
        let expected = 20.0 * 5000f64.ln();
        assert!((nll.per_sequence - expected).abs() < 1e-9);
        assert!((expected - 170.34).abs() < 0.01);
        assert!((nll.per_token - 5000f64.ln()).abs() < 1e-9);
    }
}
