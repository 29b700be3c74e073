//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian): 8-byte magic, `u32` version, then
//! length-prefixed strings for the model kind and config digest, a list of
//! `(key, value)` metadata strings and a list of tensors. A tensor is its
//! name, `u32` rank, `u64` dims and row-major `f64` values.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::OracleModel;
use crate::discriminator::{ConvSpec, Discriminator, FeatureSource};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::param::{Parameterized, Tensor};
use crate::rng::seeded;

pub const MAGIC: &[u8; 8] = b"LEAKGEN\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_digest: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn capture<P: Parameterized>(
        kind: &str,
        config_digest: &str,
        meta: Vec<(String, String)>,
        model: &P,
    ) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config_digest: config_digest.to_string(),
            meta,
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &self.kind);
        put_str(&mut buf, &self.config_digest);
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let kind = r.string()?;
        let config_digest = r.string()?;
        let n_meta = r.u32()?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor { shape, data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint {
            kind,
            config_digest,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {v:?} for metadata key {key}")))
    }

    /// Copies the stored tensors into `model`, which must have exactly the
    /// same names and shapes.
    pub fn restore<P: Parameterized>(&self, model: &mut P) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (stored, t)) in names.iter().zip(&self.tensors) {
            if name != stored || shape != &t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {stored} {:?}",
                    t.shape
                )));
            }
        }
        for (dst, (_, t)) in model.params_mut().into_iter().zip(&self.tensors) {
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

impl OracleModel {
    pub fn to_checkpoint(&self, digest: &str) -> Checkpoint {
        let meta = vec![
            kv("vocab_size", self.vocab_size),
            kv("horizon", self.horizon),
            kv("hidden", self.hidden_size()),
            kv("seed", self.seed),
        ];
        Checkpoint::capture("oracle", digest, meta, self)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("oracle")?;
        let mut m = OracleModel::uniform(
            c.meta_parse("vocab_size")?,
            c.meta_parse("horizon")?,
            c.meta_parse("hidden")?,
        );
        m.seed = c.meta_parse("seed")?;
        c.restore(&mut m)?;
        Ok(m)
    }
}

impl Generator {
    pub fn to_checkpoint(&self, digest: &str) -> Checkpoint {
        let g = &self.config;
        let meta = vec![
            kv("vocab_size", g.vocab_size),
            kv("horizon", g.horizon),
            kv("feature_dim", g.feature_dim),
            kv("goal_dim", g.goal_dim),
            kv("goal_horizon", g.goal_horizon),
            kv("manager_hidden", g.manager_hidden),
            kv("worker_hidden", g.worker_hidden),
            kv("embedding_dim", g.embedding_dim),
            kv("temperature_train", g.temperature_train),
            kv("temperature_sample", g.temperature_sample),
        ];
        Checkpoint::capture("generator", digest, meta, self)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("generator")?;
        let config = GeneratorConfig {
            vocab_size: c.meta_parse("vocab_size")?,
            horizon: c.meta_parse("horizon")?,
            feature_dim: c.meta_parse("feature_dim")?,
            goal_dim: c.meta_parse("goal_dim")?,
            goal_horizon: c.meta_parse("goal_horizon")?,
            manager_hidden: c.meta_parse("manager_hidden")?,
            worker_hidden: c.meta_parse("worker_hidden")?,
            embedding_dim: c.meta_parse("embedding_dim")?,
            temperature_train: c.meta_parse("temperature_train")?,
            temperature_sample: c.meta_parse("temperature_sample")?,
        };
        let mut g = Generator::new(config, &mut seeded(0))?;
        c.restore(&mut g)?;
        Ok(g)
    }
}

impl Discriminator {
    pub fn to_checkpoint(&self, digest: &str) -> Checkpoint {
        let s = &self.spec;
        let meta = vec![
            kv("vocab_size", self.vocab_size),
            kv("horizon", self.horizon),
            kv("windows", s.format_windows()),
            kv("embedding_dim", s.embedding_dim),
            kv("use_highway", s.use_highway),
            kv("dropout_keep", s.dropout_keep),
            kv("l2_coeff", s.l2_coeff),
            kv("feature_source", s.feature_source),
        ];
        Checkpoint::capture("discriminator", digest, meta, self)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("discriminator")?;
        let windows = ConvSpec::parse_windows(c.meta("windows")?).map_err(Error::Checkpoint)?;
        let spec = ConvSpec {
            windows,
            embedding_dim: c.meta_parse("embedding_dim")?,
            use_highway: c.meta_parse("use_highway")?,
            dropout_keep: c.meta_parse("dropout_keep")?,
            l2_coeff: c.meta_parse("l2_coeff")?,
            feature_source: c.meta_parse::<FeatureSource>("feature_source")?,
        };
        let mut d = Discriminator::new(
            spec,
            c.meta_parse("vocab_size")?,
            c.meta_parse("horizon")?,
            &mut seeded(0),
        )?;
        c.restore(&mut d)?;
        Ok(d)
    }
}
