//! Dense ELU networks with explicit reverse-mode gradients.
//!
//! Batches are row-major `samples × features`. Every dot product uses the
//! same fixed four-lane accumulation order, so the output for one sample does
//! not depend on the batch it was evaluated in.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RlError;

#[inline]
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One affine layer; `weight` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.inputs..(o + 1) * self.inputs]
    }
}

/// ELU on every hidden layer, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and hidden pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Mlp {
    /// Gaussian init with std `1/√fan_in`; the last layer is scaled by
    /// `out_gain`.
    pub fn new<R: Rng>(dims: &[usize], out_gain: f64, rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (dims[i], dims[i + 1]);
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                let std = gain / (fi as f64).sqrt();
                let weight = (0..fi * fo)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Layer {
                    inputs: fi,
                    outputs: fo,
                    weight,
                    bias: vec![0.0; fo],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn activations(&self) -> Vec<&'static str> {
        (0..self.layers.len())
            .map(|i| if i + 1 == self.layers.len() { "identity" } else { "elu" })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every parameter buffer, in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Forward pass over a row-major batch.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, MlpCache), RlError> {
        if x.len() != batch * self.input_dim() {
            return Err(RlError::Dimension {
                expected: batch * self.input_dim(),
                actual: x.len(),
            });
        }
        let n = self.layers.len();
        let mut cache = MlpCache {
            batch,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
        };
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; batch * layer.outputs];
            for s in 0..batch {
                let xs = &cur[s * layer.inputs..(s + 1) * layer.inputs];
                let zs = &mut z[s * layer.outputs..(s + 1) * layer.outputs];
                for (o, zo) in zs.iter_mut().enumerate() {
                    *zo = layer.bias[o] + dot(layer.row(o), xs);
                }
            }
            cache.inputs.push(cur);
            if i + 1 < n {
                let a = z.iter().map(|&v| elu(v)).collect();
                cache.pre.push(z);
                cur = a;
            } else {
                cur = z;
            }
        }
        Ok((cur, cache))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, RlError> {
        self.forward_batch(x, 1).map(|(y, _)| y)
    }

    /// Parameter gradients for `∂L/∂output` (row-major, same batch as the
    /// cache), and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64]) -> (Mlp, Vec<f64>) {
        let batch = cache.batch;
        let mut grads = Mlp::zeros(&self.dims());
        let mut delta = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i + 1 < self.layers.len() {
                for (d, &z) in delta.iter_mut().zip(&cache.pre[i]) {
                    *d *= elu_grad(z);
                }
            }
            let x = &cache.inputs[i];
            let g = &mut grads.layers[i];
            let mut dx = vec![0.0; batch * layer.inputs];
            for s in 0..batch {
                let xs = &x[s * layer.inputs..(s + 1) * layer.inputs];
                let ds = &delta[s * layer.outputs..(s + 1) * layer.outputs];
                let dxs = &mut dx[s * layer.inputs..(s + 1) * layer.inputs];
                for (o, &d) in ds.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    axpy(d, xs, &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs]);
                    axpy(d, layer.row(o), dxs);
                }
            }
            delta = dx;
        }
        (grads, delta)
    }
}

pub fn mlp_forward(w: &Mlp, input: &[f64]) -> Result<(Vec<f64>, MlpCache), RlError> {
    w.forward_batch(input, 1)
}

pub fn mlp_backward(w: &Mlp, cache: &MlpCache, grad_out: &[f64]) -> Mlp {
    w.backward(cache, grad_out).0
}
