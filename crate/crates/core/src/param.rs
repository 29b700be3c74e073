//! Named parameter tensors and the [`Parameterized`] trait shared by every
//! trainable model. Gradients use the same struct as the parameters they
//! belong to, so optimizers can zip the two tensor lists.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }
}

pub trait Parameterized {
    /// All tensors with stable names, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    /// Mutable tensors in the same order as [`Parameterized::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.params_mut() {
            t.data.fill(0.0);
        }
    }

    /// `self += scale * other`. Both must share the same layout.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src: Vec<&Tensor> = other.named_params().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(&s.data) {
                *d += scale * v;
            }
        }
    }

    fn sq_norm(&self) -> f64 {
        self.named_params()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.named_params()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flat copy of all values, in parameter order.
    fn flatten(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }
}

/// Fixed chunk size for deterministic parallel gradient accumulation.
const GRAD_CHUNK: usize = 8;

/// Sums per-example gradients and losses over `0..n` in parallel. Examples are
/// grouped into fixed-size chunks that are accumulated sequentially and then
/// reduced in index order, so the floating-point result does not depend on the
/// thread count.
pub fn par_accumulate<G, Z, F>(n: usize, zero: Z, per_example: F) -> (G, f64)
where
    G: Parameterized + Send + Sized,
    Z: Fn() -> G + Sync,
    F: Fn(usize, &mut G) -> f64 + Sync,
{
    use rayon::prelude::*;
    let chunks: Vec<(G, f64)> = (0..n.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = zero();
            let mut loss = 0.0;
            for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
                loss += per_example(i, &mut g);
            }
            (g, loss)
        })
        .collect();
    let mut total = zero();
    let mut loss = 0.0;
    for (g, l) in &chunks {
        total.add_scaled(g, 1.0);
        loss += l;
    }
    (total, loss)
}
