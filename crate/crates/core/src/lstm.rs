//! Single-layer LSTM cell with explicit forward caches for backpropagation
//! through time. Gate order in the stacked weight matrix is input, forget,
//! cell candidate, output.

use rand::Rng;

use crate::math::{add_assign, affine, matvec_t_acc, outer_acc, sigmoid};
use crate::param::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `4H × (I + H)`
    pub weight: Tensor,
    /// `4H`
    pub bias: Tensor,
    pub input_size: usize,
    pub hidden_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct LstmCache {
    z: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl Lstm {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Lstm {
            weight: Tensor::zeros(&[4 * hidden_size, input_size + hidden_size]),
            bias: Tensor::zeros(&[4 * hidden_size]),
            input_size,
            hidden_size,
        }
    }

    /// Weights and biases i.i.d. `N(0, std²)`.
    pub fn normal<R: Rng>(input_size: usize, hidden_size: usize, std: f64, rng: &mut R) -> Self {
        Lstm {
            weight: Tensor::normal(&[4 * hidden_size, input_size + hidden_size], std, rng),
            bias: Tensor::normal(&[4 * hidden_size], std, rng),
            input_size,
            hidden_size,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_size, self.hidden_size)
    }

    pub fn step(&self, x: &[f64], state: &LstmState) -> (LstmState, LstmCache) {
        debug_assert_eq!(x.len(), self.input_size);
        let hs = self.hidden_size;
        let mut z = Vec::with_capacity(self.input_size + hs);
        z.extend_from_slice(x);
        z.extend_from_slice(&state.h);
        let pre = affine(&self.weight.data, &self.bias.data, &z);
        let i: Vec<f64> = pre[..hs].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = pre[hs..2 * hs].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = pre[2 * hs..3 * hs].iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = pre[3 * hs..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..hs).map(|j| f[j] * state.c[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hs).map(|j| o[j] * tanh_c[j]).collect();
        let cache = LstmCache {
            z,
            i,
            f,
            g,
            o,
            c_prev: state.c.clone(),
            tanh_c,
        };
        (LstmState { h, c }, cache)
    }

    /// Backward through one step. `dh`/`dc` are gradients flowing into this
    /// step's outputs; returns `(dx, dh_prev, dc_prev)` and accumulates weight
    /// gradients into `grad`.
    pub fn backward(
        &self,
        cache: &LstmCache,
        dh: &[f64],
        dc: &[f64],
        grad: &mut Lstm,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hs = self.hidden_size;
        let mut dpre = vec![0.0; 4 * hs];
        let mut dc_prev = vec![0.0; hs];
        for j in 0..hs {
            let dct = dc[j] + dh[j] * cache.o[j] * (1.0 - cache.tanh_c[j] * cache.tanh_c[j]);
            let do_ = dh[j] * cache.tanh_c[j];
            let di = dct * cache.g[j];
            let df = dct * cache.c_prev[j];
            let dg = dct * cache.i[j];
            dc_prev[j] = dct * cache.f[j];
            dpre[j] = di * cache.i[j] * (1.0 - cache.i[j]);
            dpre[hs + j] = df * cache.f[j] * (1.0 - cache.f[j]);
            dpre[2 * hs + j] = dg * (1.0 - cache.g[j] * cache.g[j]);
            dpre[3 * hs + j] = do_ * cache.o[j] * (1.0 - cache.o[j]);
        }
        outer_acc(&mut grad.weight.data, &dpre, &cache.z);
        add_assign(&mut grad.bias.data, &dpre);
        let mut dz = vec![0.0; self.input_size + hs];
        matvec_t_acc(&self.weight.data, &dpre, &mut dz);
        let dh_prev = dz.split_off(self.input_size);
        (dz, dh_prev, dc_prev)
    }
}
