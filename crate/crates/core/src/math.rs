//! Small dense vector helpers. Matrices are row-major `&[f64]` slices.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dot product with eight independent partial sums so the compiler can
/// vectorise it. Summation order is fixed, so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with `cos(0, v) = cos(v, 0) = 0`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Gradient of `cosine(a, b)` with respect to `b`. Zero whenever the cosine is
/// defined as zero.
pub fn cosine_grad_b(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; b.len()];
    }
    let ab = dot(a, b);
    a.iter()
        .zip(b)
        .map(|(&ai, &bi)| ai / (na * nb) - ab * bi / (na * nb * nb * nb))
        .collect()
}

/// `y = W x + b` with `W` of shape `rows × x.len()`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(w.len(), b.len() * cols);
    w.chunks_exact(cols)
        .zip(b)
        .map(|(row, bi)| bi + dot(row, x))
        .collect()
}

/// `y = W x` with `W` of shape `rows × x.len()`.
pub fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// Accumulates `out += Wᵀ dy` for `W` of shape `dy.len() × out.len()`.
pub fn matvec_t_acc(w: &[f64], dy: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (row, &d) in w.chunks_exact(cols).zip(dy) {
        if d == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += d * wv;
        }
    }
}

/// Accumulates `gw += dy ⊗ x`.
pub fn outer_acc(gw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, &d) in gw.chunks_exact_mut(cols).zip(dy) {
        if d == 0.0 {
            continue;
        }
        for (g, &xv) in row.iter_mut().zip(x) {
            *g += d * xv;
        }
    }
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Softmax of `logits / temperature` over the entries where `mask` is true;
/// masked-out entries get probability zero.
pub fn masked_softmax(logits: &[f64], temperature: f64, mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| {
            if m {
                (l / temperature - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
