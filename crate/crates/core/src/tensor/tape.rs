use super::ops::{self, for_each_lane};
use super::{axis_split, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<f64>,
        normed: Vec<f64>,
    },
    CausalUnfold {
        x: Var,
        k: usize,
    },
    RowCosine {
        a: Var,
        b: Var,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    PickRows {
        x: Var,
        indices: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Inputs are always recorded before the ops that consume them, so a single
/// reverse sweep visits every op exactly once after all of its consumers.
/// A tape is single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, honouring the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        let requires_grad = value.requires_grad;
        value.grad = None;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.any_grad(inputs);
        let value = Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        };
        self.push(value, op, requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, data, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "matmul")?;
        let (n2, p) = self.matrix_dims(b, "matmul")?;
        if n != n2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        ops::matmul_acc(self.data(a), self.data(b), &mut out, m, n, p);
        Ok(self.record(vec![m, p], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `x[r, :] + row` for every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "add_row")?;
        if self.shape(row) != [c] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let rv = self.data(row);
        let mut data = self.data(x).to_vec();
        for i in 0..r {
            data[i * c..(i + 1) * c]
                .iter_mut()
                .zip(rv)
                .for_each(|(a, b)| *a += b);
        }
        Ok(self.record(vec![r, c], data, Op::AddRow(x, row), &[x, row]))
    }

    /// `x[r, :] ⊙ row` for every row of a matrix.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "mul_row")?;
        if self.shape(row) != [c] {
            return Err(Error::dim("mul_row", self.shape(x), self.shape(row)));
        }
        let rv = self.data(row);
        let mut data = self.data(x).to_vec();
        for i in 0..r {
            data[i * c..(i + 1) * c]
                .iter_mut()
                .zip(rv)
                .for_each(|(a, b)| *a *= b);
        }
        Ok(self.record(vec![r, c], data, Op::MulRow(x, row), &[x, row]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let data = ops::softmax(self.data(x), &shape, axis);
        Ok(self.record(shape, data, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let shape = self.shape(x).to_vec();
        let data = ops::log_softmax(self.data(x), &shape, axis);
        Ok(self.record(shape, data, Op::LogSoftmax { x, axis }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * width..(o + 1) * width]);
            }
        }
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.record(shape, data, op, inputs))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let src_shape = self.shape(x).to_vec();
        if start > end || end > src_shape[axis] {
            return Err(Error::dim("slice", &src_shape, &[start, end]));
        }
        let (outer, n, inner) = axis_split(&src_shape, axis);
        let mut shape = src_shape.clone();
        shape[axis] = end - start;
        let src = self.data(x);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + (end - start) * inner]);
        }
        Ok(self.record(shape, data, Op::Slice { x, axis, start }, &[x]))
    }

    /// Rows of `table[V×d]` selected by `indices`, giving `[len×d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "gather")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather", self.shape(table), &[bad]));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.record(vec![indices.len(), d], data, op, &[table]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.record(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.record(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.record(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let data = ops::transpose(self.data(x), r, c);
        Ok(self.record(vec![c, r], data, Op::Transpose(x), &[x]))
    }

    /// Normalises each row of `x` to zero mean and unit variance, then applies
    /// `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "layer_norm")?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mu) * is;
                normed[i * c + j] = n;
                out[i * c + j] = g[j] * n + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            inv_std,
            normed,
        };
        Ok(self.record(vec![r, c], out, op, &[x, gain, bias]))
    }

    /// Causal sliding windows: row `t` of the `[T × k·d]` result is the
    /// flattened `[x[t-k+1], …, x[t]]`, with zero rows standing in for
    /// positions before the start of the sequence.
    pub fn causal_unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let (t_len, d) = self.matrix_dims(x, "causal_unfold")?;
        if k == 0 {
            return Err(Error::Domain("window length must be positive".into()));
        }
        let src = self.data(x);
        let mut data = vec![0.0; t_len * k * d];
        for t in 0..t_len {
            for i in 0..k {
                let pos = t as isize - (k - 1 - i) as isize;
                if pos < 0 {
                    continue;
                }
                let pos = pos as usize;
                let dst = t * k * d + i * d;
                data[dst..dst + d].copy_from_slice(&src[pos * d..(pos + 1) * d]);
            }
        }
        Ok(self.record(vec![t_len, k * d], data, Op::CausalUnfold { x, k }, &[x]))
    }

    /// Cosine similarity between matching rows of two `[B×n]` matrices.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_cosine")?;
        let (r, c) = self.matrix_dims(a, "row_cosine")?;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; r];
        let mut norm_a = vec![0.0; r];
        let mut norm_b = vec![0.0; r];
        for i in 0..r {
            let ra = &ad[i * c..(i + 1) * c];
            let rb = &bd[i * c..(i + 1) * c];
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Domain(format!("cosine of zero vector in row {i}")));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out[i] = dot / (na * nb);
            norm_a[i] = na;
            norm_b[i] = nb;
        }
        let op = Op::RowCosine {
            a,
            b,
            norm_a,
            norm_b,
        };
        Ok(self.record(vec![r], out, op, &[a, b]))
    }

    /// `out[b] = x[b, indices[b]]`.
    pub fn pick_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "pick_rows")?;
        if indices.len() != r || indices.iter().any(|&i| i >= c) {
            return Err(Error::dim("pick_rows", self.shape(x), &[indices.len()]));
        }
        let src = self.data(x);
        let data = indices
            .iter()
            .enumerate()
            .map(|(b, &i)| src[b * c + i])
            .collect();
        let op = Op::PickRows {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.record(vec![r], data, op, &[x]))
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.data(x).len() {
            return Err(Error::dim("dropout", self.shape(x), &[mask.len()]));
        }
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.record(shape, data, Op::Dropout { x, mask }, &[x]))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Afterwards every node that requires a gradient has one (zeros when the
    /// node does not influence the loss). Calling it again recomputes from
    /// scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![0.0; n.value.data.len()]))
            .collect();
        if let Some(g) = grads[loss.0].as_mut() {
            g[0] = 1.0;
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value.data;
        macro_rules! acc {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some($g) = grads[$v.0].as_mut() {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                acc!(a, |g| {
                    ops::matmul_bt_acc(gout, self.data(*b), g, m, p, n);
                });
                acc!(b, |g| {
                    ops::matmul_at_acc(self.data(*a), gout, g, m, n, p);
                });
            }
            Op::Add(a, b) => {
                acc!(a, |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                });
                acc!(b, |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sub(a, b) => {
                acc!(a, |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                });
                acc!(b, |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x -= y);
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bd[i];
                    }
                });
                acc!(b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ad[i];
                    }
                });
            }
            Op::Scale(x, c) => acc!(x, |g| {
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += c * b);
            }),
            Op::AddScalar(x) => acc!(x, |g| {
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }),
            Op::AddRow(x, row) => {
                let c = self.shape(*row)[0];
                acc!(x, |g| {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
                });
                acc!(row, |g| {
                    for (i, v) in gout.iter().enumerate() {
                        g[i % c] += v;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let c = self.shape(*row)[0];
                let (xd, rd) = (self.data(*x), self.data(*row));
                acc!(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * rd[i % c];
                    }
                });
                acc!(row, |g| {
                    for (i, v) in gout.iter().enumerate() {
                        g[i % c] += v * xd[i];
                    }
                });
            }
            Op::Tanh(x) => acc!(x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc!(x, |g| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                })
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                acc!(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / xd[i];
                    }
                })
            }
            Op::Softmax { x, axis } => acc!(x, |g| {
                for_each_lane(&node.value.shape, *axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| gout[i] * out[i]).sum();
                    for &i in idx {
                        g[i] += out[i] * (gout[i] - dot);
                    }
                });
            }),
            Op::LogSoftmax { x, axis } => acc!(x, |g| {
                for_each_lane(&node.value.shape, *axis, |idx| {
                    let total: f64 = idx.iter().map(|&i| gout[i]).sum();
                    for &i in idx {
                        g[i] += gout[i] - out[i].exp() * total;
                    }
                });
            }),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(&node.value.shape, *axis);
                let row_width: usize = node.value.shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let width = self.shape(*v)[*axis] * inner;
                    acc!(v, |g| {
                        for o in 0..outer {
                            let src = &gout[o * row_width + offset..o * row_width + offset + width];
                            g[o * width..(o + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape[*axis];
                acc!(x, |g| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        g[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = self.shape(*table)[1];
                acc!(table, |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        g[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Sum(x) => acc!(x, |g| {
                g.iter_mut().for_each(|a| *a += gout[0]);
            }),
            Op::Mean(x) => acc!(x, |g| {
                let n = g.len() as f64;
                g.iter_mut().for_each(|a| *a += gout[0] / n);
            }),
            Op::Reshape(x) => acc!(x, |g| {
                g.iter_mut().zip(gout).for_each(|(a, b)| *a += b);
            }),
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc!(x, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normed,
            } => {
                let (r, c) = (node.value.shape[0], node.value.shape[1]);
                let gd = self.data(*gain);
                acc!(x, |g| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dn: Vec<f64> = row.clone().map(|k| gout[k] * gd[k - i * c]).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn
                            .iter()
                            .zip(&normed[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        let scale = inv_std[i] / c as f64;
                        for j in 0..c {
                            g[i * c + j] +=
                                scale * (c as f64 * dn[j] - sum_dn - normed[i * c + j] * sum_dn_n);
                        }
                    }
                });
                acc!(gain, |g| {
                    for (k, v) in gout.iter().enumerate() {
                        g[k % c] += v * normed[k];
                    }
                });
                acc!(bias, |g| {
                    for (k, v) in gout.iter().enumerate() {
                        g[k % c] += v;
                    }
                });
            }
            Op::CausalUnfold { x, k } => {
                let (t_len, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc!(x, |g| {
                    for t in 0..t_len {
                        for i in 0..*k {
                            let pos = t as isize - (k - 1 - i) as isize;
                            if pos < 0 {
                                continue;
                            }
                            let pos = pos as usize;
                            let src = t * k * d + i * d;
                            g[pos * d..(pos + 1) * d]
                                .iter_mut()
                                .zip(&gout[src..src + d])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::RowCosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let c = self.shape(*a)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                acc!(a, |g| {
                    for (i, gv) in gout.iter().enumerate() {
                        for j in i * c..(i + 1) * c {
                            g[j] += gv
                                * (bd[j] / (norm_a[i] * norm_b[i])
                                    - out[i] * ad[j] / (norm_a[i] * norm_a[i]));
                        }
                    }
                });
                acc!(b, |g| {
                    for (i, gv) in gout.iter().enumerate() {
                        for j in i * c..(i + 1) * c {
                            g[j] += gv
                                * (ad[j] / (norm_a[i] * norm_b[i])
                                    - out[i] * bd[j] / (norm_b[i] * norm_b[i]));
                        }
                    }
                });
            }
            Op::PickRows { x, indices } => {
                let c = self.shape(*x)[1];
                acc!(x, |g| {
                    for (b, &i) in indices.iter().enumerate() {
                        g[b * c + i] += gout[b];
                    }
                });
            }
            Op::Dropout { x, mask } => acc!(x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * mask[i];
                }
            }),
        }
    }
}
