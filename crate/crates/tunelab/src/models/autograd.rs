//! Reverse-mode autodiff over [`Tensor`] values. A training step builds a
//! fresh tape, binds the parameters as leaves, runs the forward ops, and
//! sweeps backward once; every op stores its parent indices so the backward
//! pass is a single match over op kinds.

use super::tensor::{matmul, matmul_t, t_matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    /// C = A · Bᵀ
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// [m,n] + broadcast row [1,n]
    AddRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Relu(usize),
    Gelu(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    /// rows of a table selected by index
    Gather(usize, Vec<usize>),
    RowSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    /// masked mean of per-row cross-entropy; scalar output
    MeanCrossEntropy { logits: usize, targets: Vec<u32>, mask: Vec<f64> },
    SumAll(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut v = ta.clone();
        v.add_assign(tb);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        assert_eq!(tb.rows, 1, "bias must be a row vector");
        assert_eq!(ta.cols, tb.cols, "bias width mismatch");
        let mut v = ta.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a.0, bias.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a.0, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_tanh);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&t.data);
        }
        self.push(
            Tensor { rows, cols, data },
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + t.cols]
                    .copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        self.push(
            Tensor { rows, cols, data },
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Tensor { rows: t.rows, cols: len, data }, Op::SliceCols(a.0, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows, "slice_rows out of range");
        let data = t.data[start * t.cols..(start + len) * t.cols].to_vec();
        self.push(Tensor { rows: len, cols: t.cols, data }, Op::SliceRows(a.0, start, len))
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor { rows: indices.len(), cols: t.cols, data },
            Op::Gather(table.0, indices.to_vec()),
        )
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.clone();
        for r in 0..v.rows {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::RowSoftmax(a.0))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(tg.rows, 1);
        assert_eq!(tb.rows, 1);
        assert_eq!(tg.cols, tx.cols);
        assert_eq!(tb.cols, tx.cols);
        let mut v = tx.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (i, val) in row.iter_mut().enumerate() {
                *val = (*val - mean) * inv * tg.data[i] + tb.data[i];
            }
        }
        self.push(v, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps })
    }

    /// Mean over masked rows of `logsumexp(logits_r) - logits_r[target_r]`.
    /// Rows with mask 0 contribute nothing; an all-zero mask yields loss 0.
    pub fn mean_cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[f64]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows, targets.len());
        assert_eq!(t.rows, mask.len());
        let count: f64 = mask.iter().sum();
        let mut total = 0.0;
        for r in 0..t.rows {
            if mask[r] == 0.0 {
                continue;
            }
            let row = t.row(r);
            let lse = log_sum_exp(row);
            total += mask[r] * (lse - row[targets[r] as usize]);
        }
        let loss = if count > 0.0 { total / count } else { 0.0 };
        self.push(
            Tensor::scalar(loss),
            Op::MeanCrossEntropy { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec() },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let accum = |grads: &mut [Option<Tensor>], j: usize, delta: Tensor| {
            match &mut grads[j] {
                Some(g) => g.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                accum(grads, *a, matmul_t(gy, tb));
                accum(grads, *b, t_matmul(ta, gy));
            }
            Op::MatMulT(a, b) => {
                // C = A·Bᵀ : dA = dC·B ; dB = dCᵀ·A
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                accum(grads, *a, matmul(gy, tb));
                accum(grads, *b, t_matmul(gy, ta));
            }
            Op::Add(a, b) => {
                accum(grads, *a, gy.clone());
                accum(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, gy.clone());
                accum(grads, *b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = Tensor {
                    rows: gy.rows,
                    cols: gy.cols,
                    data: gy.data.iter().zip(&tb.data).map(|(g, y)| g * y).collect(),
                };
                let db = Tensor {
                    rows: gy.rows,
                    cols: gy.cols,
                    data: gy.data.iter().zip(&ta.data).map(|(g, x)| g * x).collect(),
                };
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::AddRow(a, bias) => {
                accum(grads, *a, gy.clone());
                let mut db = Tensor::zeros(1, gy.cols);
                for r in 0..gy.rows {
                    for (d, g) in db.data.iter_mut().zip(gy.row(r)) {
                        *d += g;
                    }
                }
                accum(grads, *bias, db);
            }
            Op::Scale(a, c) => accum(grads, *a, gy.map(|x| x * c)),
            Op::AddConst(a, _) => accum(grads, *a, gy.clone()),
            Op::Tanh(a) => {
                let y = &node.value;
                let data = gy.data.iter().zip(&y.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                accum(grads, *a, Tensor { rows: gy.rows, cols: gy.cols, data });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data =
                    gy.data.iter().zip(&y.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                accum(grads, *a, Tensor { rows: gy.rows, cols: gy.cols, data });
            }
            Op::Exp(a) => {
                let y = &node.value;
                let data = gy.data.iter().zip(&y.data).map(|(g, y)| g * y).collect();
                accum(grads, *a, Tensor { rows: gy.rows, cols: gy.cols, data });
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let data = gy
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accum(grads, *a, Tensor { rows: gy.rows, cols: gy.cols, data });
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let data = gy
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(g, x)| g * gelu_tanh_grad(*x))
                    .collect();
                accum(grads, *a, Tensor { rows: gy.rows, cols: gy.cols, data });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows;
                    let data = gy.data[offset * gy.cols..(offset + rows) * gy.cols].to_vec();
                    accum(grads, p, Tensor { rows, cols: gy.cols, data });
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let mut dp = Tensor::zeros(t.rows, t.cols);
                    for r in 0..t.rows {
                        dp.row_mut(r)
                            .copy_from_slice(&gy.row(r)[offset..offset + t.cols]);
                    }
                    accum(grads, p, dp);
                    offset += t.cols;
                }
            }
            Op::SliceCols(a, start, len) => {
                let t = &self.nodes[*a].value;
                let mut da = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    da.row_mut(r)[*start..*start + *len].copy_from_slice(gy.row(r));
                }
                accum(grads, *a, da);
            }
            Op::SliceRows(a, start, len) => {
                let t = &self.nodes[*a].value;
                let mut da = Tensor::zeros(t.rows, t.cols);
                da.data[*start * t.cols..(*start + *len) * t.cols].copy_from_slice(&gy.data);
                accum(grads, *a, da);
            }
            Op::Gather(table, indices) => {
                let t = &self.nodes[*table].value;
                let mut dt = Tensor::zeros(t.rows, t.cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (d, g) in dt.row_mut(i).iter_mut().zip(gy.row(r)) {
                        *d += g;
                    }
                }
                accum(grads, *table, dt);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut da = Tensor::zeros(gy.rows, gy.cols);
                for r in 0..gy.rows {
                    let yr = y.row(r);
                    let gr = gy.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (d, (y, g)) in da.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = y * (g - dot);
                    }
                }
                accum(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = &self.nodes[*x].value;
                let tg = &self.nodes[*gain].value;
                let n = tx.cols as f64;
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                let mut dg = Tensor::zeros(1, tx.cols);
                let mut db = Tensor::zeros(1, tx.cols);
                for r in 0..tx.rows {
                    let xr = tx.row(r);
                    let gr = gy.row(r);
                    let (mean, var) = mean_var(xr);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    for i in 0..tx.cols {
                        dg.data[i] += gr[i] * xhat[i];
                        db.data[i] += gr[i];
                    }
                    let dxhat: Vec<f64> =
                        (0..tx.cols).map(|i| gr[i] * tg.data[i]).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..tx.cols {
                        dx.row_mut(r)[i] =
                            inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *gain, dg);
                accum(grads, *bias, db);
            }
            Op::MeanCrossEntropy { logits, targets, mask } => {
                let t = &self.nodes[*logits].value;
                let count: f64 = mask.iter().sum();
                let mut dl = Tensor::zeros(t.rows, t.cols);
                if count > 0.0 {
                    let scale = gy.item() / count;
                    for r in 0..t.rows {
                        if mask[r] == 0.0 {
                            continue;
                        }
                        let row = t.row(r);
                        let out = dl.row_mut(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        for (o, &x) in out.iter_mut().zip(row) {
                            *o = mask[r] * scale * ((x - max).exp() / denom);
                        }
                        out[targets[r] as usize] -= mask[r] * scale;
                    }
                }
                accum(grads, *logits, dl);
            }
            Op::SumAll(a) => {
                let t = &self.nodes[*a].value;
                let g = gy.item();
                accum(grads, *a, Tensor { rows: t.rows, cols: t.cols, data: vec![g; t.len()] });
            }
        }
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a leaf, zeros if the loss never touched it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        denom += *x;
    }
    for x in row.iter_mut() {
        *x /= denom;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on an arbitrary scalar graph. The build
    /// closure must create one leaf per input, in order, before anything else.
    fn check_gradients(
        build: impl Fn(&mut Tape, &[Tensor]) -> Var,
        inputs: &[Tensor],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, inputs);
        let grads = tape.backward(loss);

        let eval = |xs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let v = build(&mut t, xs);
            t.value(v).item()
        };

        let h = 1e-5;
        for (pi, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[pi].data[j] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(Var(pi)).map(|g| g.data[j]).unwrap_or(0.0);
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (fd - analytic).abs() / denom < tol,
                    "param {pi} element {j}: fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        Tensor::from_fn(rows, cols, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn matmul_chain_gradients() {
        check_gradients(
            |tape, xs| {
                let a = tape.leaf(xs[0].clone());
                let b = tape.leaf(xs[1].clone());
                let c = tape.matmul(a, b);
                let d = tape.tanh(c);
                tape.sum_all(d)
            },
            &[t(3, 4, 1), t(4, 2, 2)],
            1e-5,
        );
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        check_gradients(
            |tape, xs| {
                let a = tape.leaf(xs[0].clone());
                let b = tape.leaf(xs[1].clone());
                let bias = tape.leaf(xs[2].clone());
                let prod = tape.mul(a, b);
                let shifted = tape.add_row(prod, bias);
                let sig = tape.sigmoid(shifted);
                let exp = tape.exp(sig);
                tape.sum_all(exp)
            },
            &[t(3, 5, 3), t(3, 5, 4), t(1, 5, 5)],
            1e-5,
        );
    }

    #[test]
    fn softmax_slice_concat_gradients() {
        check_gradients(
            |tape, xs| {
                let a = tape.leaf(xs[0].clone());
                let left = tape.slice_cols(a, 0, 3);
                let right = tape.slice_cols(a, 3, 3);
                let sm = tape.row_softmax(left);
                let joined = tape.concat_cols(&[sm, right]);
                let rows = tape.slice_rows(joined, 1, 2);
                let g = tape.gelu(rows);
                tape.sum_all(g)
            },
            &[t(4, 6, 7)],
            1e-4,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        check_gradients(
            |tape, xs| {
                let x = tape.leaf(xs[0].clone());
                let g = tape.leaf(xs[1].clone());
                let b = tape.leaf(xs[2].clone());
                let y = tape.layer_norm(x, g, b, 1e-5);
                let sq = tape.mul(y, y);
                tape.sum_all(sq)
            },
            &[t(3, 6, 9), t(1, 6, 10), t(1, 6, 11)],
            1e-4,
        );
    }

    #[test]
    fn gather_and_cross_entropy_gradients() {
        check_gradients(
            |tape, xs| {
                let table = tape.leaf(xs[0].clone());
                let w = tape.leaf(xs[1].clone());
                let x = tape.gather(table, &[0, 2, 1, 2]);
                let logits = tape.matmul(x, w);
                tape.mean_cross_entropy(logits, &[1, 0, 3, 2], &[1.0, 1.0, 0.0, 1.0])
            },
            &[t(3, 4, 13), t(4, 5, 14)],
            1e-5,
        );
    }

    #[test]
    fn matmul_t_and_relu_gradients() {
        check_gradients(
            |tape, xs| {
                let a = tape.leaf(xs[0].clone());
                let b = tape.leaf(xs[1].clone());
                let c = tape.matmul_t(a, b);
                let r = tape.relu(c);
                let s = tape.scale(r, 1.7);
                let s2 = tape.add_const(s, 0.3);
                tape.sum_all(s2)
            },
            &[t(3, 4, 15), t(5, 4, 16)],
            1e-4,
        );
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(a ⊙ a): gradient must be 2a
        let mut tape = Tape::new();
        let input = t(2, 3, 21);
        let a = tape.leaf(input.clone());
        let sq = tape.mul(a, a);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let g = grads.get(a).unwrap();
        for (gv, av) in g.data.iter().zip(&input.data) {
            assert!((gv - 2.0 * av).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(4, 7));
        let loss = tape.mean_cross_entropy(logits, &[0, 1, 2, 3], &[1.0; 4]);
        assert!((tape.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_masked_rows_give_zero_loss() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(2, 5, 30));
        let loss = tape.mean_cross_entropy(logits, &[0, 1], &[0.0, 0.0]);
        assert_eq!(tape.value(loss).item(), 0.0);
    }
}
