//! Small fully connected networks with manual backpropagation, and Adam.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};
use crate::rng::Rng;

/// Multilayer perceptron with tanh hidden layers and a linear output layer.
///
/// Parameters are stored flat, layer by layer: the `in x out` weight matrix
/// (row-major) followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    batch: usize,
    /// Input of every layer, plus the final output.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty cache")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        let mut m = Self::zeros(sizes);
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut m.params[off..off + w[0] * w[1] + w[1]] {
                *p = rng.random_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("sizes")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != param_count(&self.sizes) {
            return Err(mismatch(param_count(&self.sizes), self.params.len()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Forward pass on a row-major `batch x input_dim` block.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<MlpCache> {
        if x.len() != batch * self.input_dim() {
            return Err(mismatch(batch * self.input_dim(), x.len()));
        }
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let weights = &self.params[off..off + din * dout];
            let bias = &self.params[off + din * dout..off + din * dout + dout];
            off += din * dout + dout;
            let input = acts.last().expect("input");
            let mut out = Vec::with_capacity(batch * dout);
            for b in 0..batch {
                let mut row = bias.to_vec();
                for (k, xv) in input[b * din..(b + 1) * din].iter().enumerate() {
                    for (r, wv) in row.iter_mut().zip(&weights[k * dout..(k + 1) * dout]) {
                        *r += xv * wv;
                    }
                }
                out.extend(row);
            }
            if l + 1 < layers {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        Ok(MlpCache { batch, acts })
    }

    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self.forward(x, batch)?.acts.pop().expect("output"))
    }

    /// Backward pass. Adds the parameter gradient into `grad` and returns the
    /// gradient with respect to the network input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        let batch = cache.batch;
        if grad_out.len() != batch * self.output_dim() {
            return Err(mismatch(batch * self.output_dim(), grad_out.len()));
        }
        if grad.len() != self.params.len() {
            return Err(mismatch(self.params.len(), grad.len()));
        }
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (din, dout) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            if l + 1 < layers {
                // Output of this layer went through tanh.
                for (d, y) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &cache.acts[l];
            let weights = &self.params[off..off + din * dout];
            let mut din_grad = vec![0.0; batch * din];
            for b in 0..batch {
                let drow = &delta[b * dout..(b + 1) * dout];
                let xrow = &input[b * din..(b + 1) * din];
                for (k, xv) in xrow.iter().enumerate() {
                    let g = &mut grad[off + k * dout..off + (k + 1) * dout];
                    let wrow = &weights[k * dout..(k + 1) * dout];
                    let mut acc = 0.0;
                    for j in 0..dout {
                        g[j] += xv * drow[j];
                        acc += wrow[j] * drow[j];
                    }
                    din_grad[b * din + k] = acc;
                }
                let gb = &mut grad[off + din * dout..off + din * dout + dout];
                for (g, d) in gb.iter_mut().zip(drow) {
                    *g += d;
                }
            }
            delta = din_grad;
        }
        Ok(delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Descend along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(m: &Mlp, x: &[f64], batch: usize) -> f64 {
        m.predict(x, batch).unwrap().iter().map(|y| 0.5 * y * y).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = crate::rng::stream(1, "mlp", 0);
        let m = Mlp::init(&[3, 5, 4, 2], &mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let cache = m.forward(&x, 2).unwrap();
        let out = cache.output().to_vec();
        let mut grad = vec![0.0; m.len()];
        let gin = m.backward(&cache, &out, &mut grad).unwrap();
        let h = 1e-6;
        for i in 0..m.len() {
            let mut p = m.clone();
            p.params[i] += h;
            let up = loss(&p, &x, 2);
            p.params[i] -= 2.0 * h;
            let down = loss(&p, &x, 2);
            assert!(((up - down) / (2.0 * h) - grad[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&m, &xp, 2);
            xp[i] -= 2.0 * h;
            let down = loss(&m, &xp, 2);
            assert!(((up - down) / (2.0 * h) - gin[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(&[4, 8, 2]);
        assert_eq!(m.predict(&[1.0; 8], 2).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = p.clone();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }
}
