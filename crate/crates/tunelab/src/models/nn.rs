//! Shared neural-net machinery: named parameter sets, Adam with global-norm
//! clipping, weight init, the LSTM cell (tape and plain-tensor variants),
//! and temperature sampling from logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autograd::{Tape, Var};
use super::tensor::{matmul, Tensor};

/// Ordered, named parameter tensors. Order is fixed at construction so that
/// serialization and optimizer state stay aligned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Push every parameter onto a tape, returning handles in set order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Stable byte serialization (name, shape, little-endian f64 data).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no bound parameter named {name}"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Collect gradients for every bound parameter, in set order.
    pub fn gradients(&self, tape: &Tape, grads: &super::autograd::Grads) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(_, v)| {
                let t = tape.value(*v);
                grads.get_or_zeros(*v, t.rows, t.cols)
            })
            .collect()
    }
}

pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    // Box-Muller
    Tensor::from_fn(rows, cols, |_, _| {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
    })
}

/// Adam with optional global-norm gradient clipping. Moment buffers align
/// with the parameter set order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, grad_clip: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> =
            params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &mut [Tensor]) {
        assert_eq!(grads.len(), self.m.len());
        if self.grad_clip > 0.0 {
            clip_global_norm(grads, self.grad_clip);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g.data[j];
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let total: f64 = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in &mut g.data {
                *x *= scale;
            }
        }
    }
}

/// One LSTM step on the tape. Gate order i, f, g, o; `w_ih` is
/// `[input, 4*hidden]`, `w_hh` is `[hidden, 4*hidden]`, `bias` `[1, 4*hidden]`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
) -> (Var, Var) {
    let xw = tape.matmul(x, w_ih);
    let hw = tape.matmul(h, w_hh);
    let pre = tape.add(xw, hw);
    let gates = tape.add_row(pre, bias);
    let i_gate = tape.slice_cols(gates, 0, hidden);
    let f_gate = tape.slice_cols(gates, hidden, hidden);
    let g_gate = tape.slice_cols(gates, 2 * hidden, hidden);
    let o_gate = tape.slice_cols(gates, 3 * hidden, hidden);
    let i = tape.sigmoid(i_gate);
    let f = tape.sigmoid(f_gate);
    let g = tape.tanh(g_gate);
    let o = tape.sigmoid(o_gate);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_next = tape.add(fc, ig);
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act);
    (h_next, c_next)
}

/// Plain-tensor LSTM step for autoregressive sampling (no gradient tracking).
pub fn lstm_step_forward(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    bias: &Tensor,
    hidden: usize,
) -> (Tensor, Tensor) {
    let mut gates = matmul(x, w_ih);
    gates.add_assign(&matmul(h, w_hh));
    for r in 0..gates.rows {
        for (gv, b) in gates.row_mut(r).iter_mut().zip(&bias.data) {
            *gv += b;
        }
    }
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let rows = gates.rows;
    let mut h_next = Tensor::zeros(rows, hidden);
    let mut c_next = Tensor::zeros(rows, hidden);
    for r in 0..rows {
        let gr = gates.row(r);
        for j in 0..hidden {
            let i = sigmoid(gr[j]);
            let f = sigmoid(gr[hidden + j]);
            let g = gr[2 * hidden + j].tanh();
            let o = sigmoid(gr[3 * hidden + j]);
            let cn = f * c.at(r, j) + i * g;
            c_next.set(r, j, cn);
            h_next.set(r, j, o * cn.tanh());
        }
    }
    (h_next, c_next)
}

/// Draw a token id from logits at the given temperature. Temperature 0 is
/// greedy argmax (lowest index wins ties).
pub fn sample_from_logits(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    assert!(temperature >= 0.0);
    if temperature == 0.0 {
        return logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
    }
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
