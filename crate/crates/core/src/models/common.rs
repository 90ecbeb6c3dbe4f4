use std::sync::Arc;

use crate::autodiff::{ParamId, Params, Tape, Tensor};
use crate::error::Result;
use crate::rng::Rng;

/// Uniform fan-in init: w ~ U(−1/√fan_in, 1/√fan_in), biases zero.
pub fn init_weight(rng: &mut Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut v = vec![0.0; len];
    rng.fill_uniform_in(&mut v, -bound, bound);
    v
}

/// One dense layer: y = x·W + b with W stored (in × out).
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, input: usize, output: usize) -> Self {
        let w = params.register(
            format!("{name}.w"),
            vec![input, output],
            init_weight(rng, input, input * output),
        );
        let b = params.register(format!("{name}.b"), vec![output], vec![0.0; output]);
        Dense { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: &Tensor) -> Result<Tensor> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let h = tape.matmul(x, &w)?;
        tape.add_bias(&h, &b)
    }

    /// Plain-math forward for paths that never need gradients.
    pub fn forward_detached(&self, params: &Params, x: &[f64], rows: usize) -> Vec<f64> {
        let w = params.value(self.w);
        let b = params.value(self.b);
        let mut out = vec![0.0; rows * self.output];
        crate::autodiff::linalg::matmul(rows, self.input, self.output, x, w, &mut out);
        for r in 0..rows {
            for (o, bias) in out[r * self.output..(r + 1) * self.output].iter_mut().zip(b) {
                *o += bias;
            }
        }
        out
    }
}

/// Dense stack with relu between layers and a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` lists layer boundaries, e.g. [20, 256, 256, 1].
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Dense::new(params, rng, &format!("{name}.l{i}"), d[0], d[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: &Tensor) -> Result<Tensor> {
        let mut h = self.layers[0].forward(tape, params, x)?;
        for layer in &self.layers[1..] {
            h = tape.relu(&h)?;
            h = layer.forward(tape, params, &h)?;
        }
        Ok(h)
    }

    pub fn forward_detached(&self, params: &Params, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = self.layers[0].forward_detached(params, x, rows);
        for layer in &self.layers[1..] {
            for v in h.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = layer.forward_detached(params, &h, rows);
        }
        h
    }

    /// Zero every weight and bias; the stack then computes the zero function.
    pub fn zero_all(&self, params: &mut Params) {
        for layer in &self.layers {
            params.value_mut(layer.w).fill(0.0);
            params.value_mut(layer.b).fill(0.0);
        }
    }
}

/// Per-channel bias over an NCHW activation, composed from gather/broadcast.
pub fn add_channel_bias(
    tape: &mut Tape,
    x: &Tensor, // [n, c, h, w]
    bias: &Tensor, // [c]
) -> Result<Tensor> {
    let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let shape = x.shape().to_vec();
    let flat = tape.reshape(x, vec![n * c, hw])?;
    let bias_col = tape.reshape(bias, vec![c, 1])?;
    let idx: Arc<Vec<usize>> = Arc::new((0..n * c).map(|i| i % c).collect());
    let rows = tape.gather_rows(&bias_col, idx)?;
    let spread = tape.broadcast(&rows, &[n * c, hw])?;
    let sum = tape.add(&flat, &spread)?;
    tape.reshape(&sum, shape)
}

/// Index vectors for all-pairs expansion: row r = i·n + j maps to (i, j).
pub fn pair_indices(n: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let mut left = Vec::with_capacity(n * n);
    let mut right = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            left.push(i);
            right.push(j);
        }
    }
    (Arc::new(left), Arc::new(right))
}
