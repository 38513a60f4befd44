use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Seed and stream for the counter-based dropout generator. Distinct streams
/// give independent masks from the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutStream {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train(DropoutStream),
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    Dropout(Var, Vec<bool>, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    Pick(Var, Vec<usize>),
    SumRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    MaskedMse {
        target: Var,
        online: Var,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations. Nodes are appended in creation order, which is a
/// valid topological order because an op can only consume existing nodes.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    backward_done: bool,
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        let rng = match mode {
            Mode::Train(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                rng.set_stream(s.stream);
                Some(rng)
            }
            Mode::Eval => None,
        };
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng,
            backward_done: false,
        }
    }

    pub fn eval() -> Self {
        Graph::new(Mode::Eval)
    }

    /// Restarts the dropout generator on another stream of the same seed.
    /// No effect in eval mode.
    pub fn set_stream(&mut self, stream: u64) {
        if let Mode::Train(s) = self.mode {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            rng.set_stream(stream);
            self.rng = Some(rng);
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant sharing `x`'s current value.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = Arc::clone(&self.nodes[x.0].value);
        self.constant_shared(v)
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().ok_or_else(|| Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    // ----- elementwise -----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(a).last_axis();
        if self.value(row).numel() != n {
            return Err(self.shape_err(op, a, row));
        }
        Ok((m, n))
    }

    /// `a + row`, broadcasting `row` (length = last extent of `a`) over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast_check("add_row", a, row)?;
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(a, row), rg))
    }

    /// `a ⊙ row`, broadcasting `row` over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast_check("mul_row", a, row)?;
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o *= b;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        let out = self.value(a).map(|x| x * cc);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a constant tensor (e.g. an attention mask); no gradient flows into it.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::Shape {
                op: "add_const",
                left: self.value(a).shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let av = self.value(a);
        let data = av.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        let rng = match (&mut self.rng, p > 0.0) {
            (Some(rng), true) => rng,
            _ => return Ok(a),
        };
        let n = self.nodes[a.0].value.numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
        let s = T::of(1.0 / (1.0 - p));
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * s } else { T::zero() })
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout(a, keep, p), rg))
    }

    // ----- structural -----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if len == 0 || start + len > m {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{} out of {m} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![len, n], data), Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{} out of {n} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: self.value(a).shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), rg))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "embedding id {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding(table, ids.to_vec()),
            rg,
        ))
    }

    // ----- normalization / probability -----

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.last_axis();
        let mut out = av.data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Softmax along `axis` of a matrix (0 = columns, 1 or -1 = rows).
    pub fn softmax_axis(&mut self, a: Var, axis: isize) -> Result<Var> {
        let rank = self.value(a).shape().len() as isize;
        let axis = if axis < 0 { axis + rank } else { axis };
        if axis < 0 || axis >= rank {
            return Err(Error::invalid(format!("axis {axis} invalid for rank {rank}")));
        }
        if axis == rank - 1 {
            return Ok(self.softmax(a));
        }
        if rank != 2 {
            return Err(Error::invalid("softmax over a non-last axis needs a matrix"));
        }
        let t = self.transpose(a)?;
        let s = self.softmax(t);
        self.transpose(s)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.last_axis();
        let mut out = av.data().to_vec();
        for i in 0..m {
            log_softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(a), rg)
    }

    /// Zero-mean, unit-variance over the last axis, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast_check("layer_norm", x, gain)?;
        self.row_broadcast_check("layer_norm", x, bias)?;
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j].f64() - mean) * r;
                xhat[i * n + j] = h;
                out.push(T::of(h) * g[j] + b[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise L2 normalization.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.last_axis();
        let mut norms = Vec::with_capacity(m);
        let mut out = av.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
            norms.push(norm);
            let inv = T::of(1.0 / norm);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::L2NormalizeRows(a, norms), rg)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of a matrix: `[m×n] -> [1×n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("sum_rows", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::SumRows(a), rg))
    }

    /// `out[i] = a[i, ids[i]]`, shape `[m×1]`.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("pick", a)?;
        if ids.len() != m {
            return Err(Error::invalid(format!("pick: {} ids for {m} rows", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("pick: id {bad} out of range for width {n}")));
        }
        let src = self.value(a).data();
        let out = ids.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![m, 1], out), Op::Pick(a, ids.to_vec()), rg))
    }

    // ----- losses -----

    /// Mean over valid timesteps of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, n) = self.dims2("cross_entropy", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![t, n],
                right: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= n) {
            return Err(Error::invalid(format!(
                "cross_entropy: target id {bad} >= vocabulary size {n}"
            )));
        }
        let lv = self.value(logits).data();
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0f64;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * n..(i + 1) * n];
            total -= log_softmax_at(row, targets[i]);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean of `(target - online)²` over every entry of the valid rows.
    /// `target` is treated as detached: no gradient ever flows into it.
    pub fn masked_mse(&mut self, target: Var, online: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("masked_mse", target, online)?;
        let (t, n) = self.value(online).last_axis();
        if mask.len() != t {
            return Err(Error::Shape {
                op: "masked_mse",
                left: self.value(online).shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let tv = self.value(target).data();
        let ov = self.value(online).data();
        let valid_rows = mask.iter().filter(|&&m| m).count();
        let count = valid_rows * n;
        let mut total = 0.0f64;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            for j in 0..n {
                let d = tv[i * n + j].f64() - ov[i * n + j].f64();
                total += d * d;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[online]);
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::MaskedMse {
                target,
                online,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    // ----- backward -----

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss. Each node is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g, &self.nodes);
    }

    fn backprop_node(&mut self, idx: usize, gout: &[T]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                let (a, b) = (*a, *b);
                // dA = dC · Bᵀ
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for i in 0..m {
                        let gr = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ · dC
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for i in 0..m {
                        let gr = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(ad[i * k + p], gr, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (n, _) = self.nodes[b.0].value.dims2().unwrap();
                let (a, b) = (*a, *b);
                // C = A Bᵀ: dA = dC · B, dB = dCᵀ · A
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for i in 0..m {
                        for j in 0..n {
                            axpy(gout[i * n + j], &bd[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                });
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for i in 0..m {
                        for j in 0..n {
                            axpy(gout[i * n + j], &ad[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let gt = transpose(gout, n, m);
                self.acc(*a, |ga, _| add_into(ga, &gt));
            }
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, gout));
                self.acc(*b, |gb, _| add_into(gb, gout));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga, _| add_into(ga, gout));
                self.acc(*b, |gb, _| gb.iter_mut().zip(gout).for_each(|(g, &d)| *g -= d));
            }
            Op::AddRow(a, row) => {
                self.acc(*a, |ga, _| add_into(ga, gout));
                self.acc(*row, |gr, _| {
                    let n = gr.len();
                    for chunk in gout.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for ((g, &d), &y) in ga.iter_mut().zip(gout).zip(bd) {
                        *g += d * y;
                    }
                });
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for ((g, &d), &x) in gb.iter_mut().zip(gout).zip(ad) {
                        *g += d * x;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                self.acc(a, |ga, nodes| {
                    let r = nodes[row.0].value.data();
                    let n = r.len();
                    for (gc, dc) in ga.chunks_mut(n).zip(gout.chunks(n)) {
                        for j in 0..n {
                            gc[j] += dc[j] * r[j];
                        }
                    }
                });
                self.acc(row, |gr, nodes| {
                    let ad = nodes[a.0].value.data();
                    let n = gr.len();
                    for (xc, dc) in ad.chunks(n).zip(gout.chunks(n)) {
                        for j in 0..n {
                            gr[j] += dc[j] * xc[j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                self.acc(*a, |ga, _| ga.iter_mut().zip(gout).for_each(|(g, &d)| *g += d * c));
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                self.acc(*a, |ga, _| add_into(ga, gout));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.acc(p, |gp, _| add_into(gp, &gout[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.dims2().unwrap().1).collect();
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.acc(p, |gp, _| {
                        for (i, gr) in gp.chunks_mut(w).enumerate() {
                            add_into(gr, &gout[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, n) = self.nodes[a.0].value.dims2().unwrap();
                let s = *start * n;
                self.acc(*a, |ga, _| add_into(&mut ga[s..s + gout.len()], gout));
            }
            Op::SliceCols(a, start) => {
                let (_, n) = self.nodes[a.0].value.dims2().unwrap();
                let len = self.nodes[idx].value.dims2().unwrap().1;
                let start = *start;
                self.acc(*a, |ga, _| {
                    for (i, dc) in gout.chunks(len).enumerate() {
                        add_into(&mut ga[i * n + start..i * n + start + len], dc);
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let d = self.nodes[table.0].value.dims2().unwrap().1;
                self.acc(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout(a, keep, p) => {
                let s = T::of(1.0 / (1.0 - p));
                self.acc(*a, |ga, _| {
                    for ((g, &d), &k) in ga.iter_mut().zip(gout).zip(keep) {
                        if k {
                            *g += d * s;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (_, n) = self.nodes[idx].value.last_axis();
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let s = dot(yr, dr);
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (_, n) = self.nodes[idx].value.last_axis();
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let s: T = dr.iter().copied().sum();
                        for j in 0..n {
                            gr[j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.nodes[gain.0].value.numel();
                let g: Vec<f64> = self.nodes[gain.0].value.data().iter().map(|v| v.f64()).collect();
                self.acc(*x, |gx, _| {
                    for (i, r) in rstd.iter().enumerate() {
                        let dy = &gout[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let dxhat: Vec<f64> = (0..n).map(|j| dy[j].f64() * g[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            let v = r / n as f64 * (n as f64 * dxhat[j] - s1 - xh[j] * s2);
                            gx[i * n + j] += T::of(v);
                        }
                    }
                });
                self.acc(*gain, |gg, _| {
                    for (i, dy) in gout.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] += dy[j] * T::of(xhat[i * n + j]);
                        }
                    }
                });
                self.acc(*bias, |gb, _| {
                    for dy in gout.chunks(n) {
                        add_into(gb, dy);
                    }
                });
            }
            Op::Relu(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for ((g, &d), &yv) in ga.iter_mut().zip(gout).zip(&y) {
                        if yv > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for ((g, &d), &s) in ga.iter_mut().zip(gout).zip(&y) {
                        *g += d * s * (T::one() - s);
                    }
                });
            }
            Op::Sum(a) => {
                let d = gout[0];
                self.acc(*a, |ga, _| ga.iter_mut().for_each(|g| *g += d));
            }
            Op::Pick(a, ids) => {
                let (_, n) = self.nodes[a.0].value.dims2().unwrap();
                self.acc(*a, |ga, _| {
                    for (i, &j) in ids.iter().enumerate() {
                        ga[i * n + j] += gout[i];
                    }
                });
            }
            Op::SumRows(a) => {
                self.acc(*a, |ga, _| {
                    let n = gout.len();
                    for gr in ga.chunks_mut(n) {
                        add_into(gr, gout);
                    }
                });
            }
            Op::L2NormalizeRows(a, norms) => {
                let (_, n) = self.nodes[idx].value.last_axis();
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for (i, &norm) in norms.iter().enumerate() {
                        let yr = &y[i * n..(i + 1) * n];
                        let dr = &gout[i * n..(i + 1) * n];
                        let s = dot(yr, dr);
                        let inv = T::of(1.0 / norm);
                        for j in 0..n {
                            ga[i * n + j] += (dr[j] - yr[j] * s) * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                if *count > 0 {
                    let (_, n) = self.nodes[logits.0].value.dims2().unwrap();
                    let scale = gout[0].f64() / *count as f64;
                    let logits = *logits;
                    self.acc(logits, |gl, nodes| {
                        let lv = nodes[logits.0].value.data();
                        let mut p = vec![T::zero(); n];
                        for (i, &tgt) in targets.iter().enumerate() {
                            if !mask[i] {
                                continue;
                            }
                            p.copy_from_slice(&lv[i * n..(i + 1) * n]);
                            softmax_in_place(&mut p);
                            for j in 0..n {
                                let ind = if j == tgt { 1.0 } else { 0.0 };
                                gl[i * n + j] += T::of((p[j].f64() - ind) * scale);
                            }
                        }
                    });
                }
            }
            Op::MaskedMse {
                target,
                online,
                mask,
                count,
            } => {
                if *count > 0 {
                    let (_, n) = self.nodes[online.0].value.last_axis();
                    let scale = 2.0 * gout[0].f64() / *count as f64;
                    let (target, online) = (*target, *online);
                    self.acc(online, |go, nodes| {
                        let tv = nodes[target.0].value.data();
                        let ov = nodes[online.0].value.data();
                        for (i, &valid) in mask.iter().enumerate() {
                            if !valid {
                                continue;
                            }
                            for j in i * n..(i + 1) * n {
                                go[j] += T::of((ov[j].f64() - tv[j].f64()) * scale);
                            }
                        }
                    });
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

fn transpose<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter_mut().for_each(|v| *v -= lse);
}

/// `log softmax(row)[j]` evaluated in 64-bit.
pub(crate) fn log_softmax_at<T: Real>(row: &[T], j: usize) -> f64 {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
    row[j].f64() - lse
}
