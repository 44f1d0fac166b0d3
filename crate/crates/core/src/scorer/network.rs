//! Fully connected stack with rectifier hidden units, optional inverted
//! dropout on one hidden layer, and a single linear output per point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.outputs];
        for i in 0..rows {
            let xi = &x[i * self.inputs..(i + 1) * self.inputs];
            let oi = &mut out[i * self.outputs..(i + 1) * self.outputs];
            for (j, o) in oi.iter_mut().enumerate() {
                let w = &self.weights[j * self.inputs..(j + 1) * self.inputs];
                *o = self.bias[j] + w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    /// Index of the hidden layer whose activations are dropped.
    pub after_layer: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub dropout: Option<Dropout>,
}

/// Activations kept for the backward pass.
pub struct Trace {
    rows: usize,
    /// `inputs[l]` is the input to layer `l`; the last entry is the logits.
    inputs: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers for the dropped layer, if active.
    mask: Option<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.inputs.last().unwrap()
    }
}

/// Parameter gradients with the same layout as `Mlp::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

impl Mlp {
    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Inference pass: dropout disabled, one logit per row.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, rows);
            if l < last {
                relu(&mut h);
            }
        }
        h
    }

    /// Training pass. With `dropout_seed` set, the configured dropout layer
    /// is masked from a stream seeded by it.
    pub fn forward_trace(&self, x: &[f64], rows: usize, dropout_seed: Option<u64>) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(x.to_vec());
        let mut mask = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(inputs.last().unwrap(), rows);
            if l < last {
                relu(&mut h);
                if let (Some(seed), Some(drop)) = (dropout_seed, self.dropout) {
                    if drop.after_layer == l && drop.rate > 0.0 {
                        let keep = 1.0 - drop.rate;
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let m: Vec<f64> = (0..h.len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        h.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                        mask = Some(m);
                    }
                }
            }
            inputs.push(h);
        }
        Trace { rows, inputs, mask }
    }

    /// Backpropagates `d_logits` (one per row) through a traced pass.
    pub fn backward(&self, trace: &Trace, d_logits: &[f64]) -> Gradients {
        let rows = trace.rows;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_logits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &trace.inputs[l];
            let g = &mut grads.layers[l];
            let mut d_in = vec![0.0; rows * layer.inputs];
            for i in 0..rows {
                let xi = &x[i * layer.inputs..(i + 1) * layer.inputs];
                let di = &mut d_in[i * layer.inputs..(i + 1) * layer.inputs];
                for j in 0..layer.outputs {
                    let dj = delta[i * layer.outputs + j];
                    if dj == 0.0 {
                        continue;
                    }
                    g.bias[j] += dj;
                    let gw = &mut g.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    gw.iter_mut().zip(xi).for_each(|(w, v)| *w += dj * v);
                    let w = &layer.weights[j * layer.inputs..(j + 1) * layer.inputs];
                    di.iter_mut().zip(w).for_each(|(d, w)| *d += dj * w);
                }
            }
            if l == 0 {
                break;
            }
            // `x` is the post-activation output of layer l-1.
            if let (Some(mask), Some(drop)) = (&trace.mask, self.dropout) {
                if drop.after_layer == l - 1 {
                    d_in.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                }
            }
            for (d, &v) in d_in.iter_mut().zip(x.iter()) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = d_in;
        }
        grads
    }
}

fn relu(h: &mut [f64]) {
    for v in h {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (g, m, v) = (&grads.layers[l], &mut self.m.layers[l], &mut self.v.layers[l]);
            let pairs = [
                (&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights),
                (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (p, g, m, v) in pairs {
                for k in 0..p.len() {
                    m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                    v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                    let mh = m[k] / c1;
                    let vh = v[k] / c2;
                    p[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}
