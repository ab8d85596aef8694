//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the
//! [`ParamSet`] the tape's parameter leaves were loaded from.

use std::collections::HashMap;

use rand::Rng;

use super::{EngineError, ParamId, ParamSet, Tensor};

/// SeLU scale.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
/// SeLU negative-branch coefficient.
pub const SELU_ALPHA: f64 = 1.6732632423543772;
/// Denominator magnitude floor for guarded division.
pub const DIV_GUARD: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Sin,
    Cos,
    Selu,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sign(b) * max(|b|, DIV_GUARD)` with `sign(0) = +1`.
pub fn guarded_denominator(b: f64) -> f64 {
    let mag = b.abs().max(DIV_GUARD);
    if b < 0.0 {
        -mag
    } else {
        mag
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    /// `x [b×in] · wᵀ`, `w [out×in]`.
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Var, Unary),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gate3 { x: Var, y: Var, f: Var },
    Scale(Var, f64),
    MulConst(Var, Tensor),
    SumList(Vec<Var>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmaxMasked { x: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Pick { x: Var, index: usize },
    Sum(Var),
    Exp(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Loads a parameter; repeated loads of one id share a single leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, EngineError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.cols() {
            return Err(EngineError::Shape(format!("matmul: x {:?} with w {:?}", xv.shape(), wv.shape())));
        }
        let (b, k, o) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = vec![0.0; b * o];
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..b {
            let xr = &xd[r * k..(r + 1) * k];
            for j in 0..o {
                let wr = &wd[j * k..(j + 1) * k];
                out[r * o + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(Tensor::matrix(b, o, out), Op::MatMul { x, w }))
    }

    /// Adds a length-`n` bias to every row of `x [b×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, EngineError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(EngineError::Shape(format!("add_bias: x {:?} with b {:?}", xv.shape(), bv.shape())));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    /// `x · wᵀ + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, EngineError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, EngineError> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Guarded division `a / (sign(b) max(|b|, 1e-7))`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.zip(a, b, "div", |x, y| x / guarded_denominator(y), Op::Div(a, b))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f.apply(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Unary(a, f))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, EngineError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(EngineError::Shape(format!("layer_norm: x {:?} gain {:?}", xv.shape(), gv.shape())));
        }
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// `f ∘ x + (1 − f) ∘ y`.
    pub fn gate3(&mut self, x: Var, y: Var, f: Var) -> Result<Var, EngineError> {
        let (xv, yv, fv) = (self.value(x), self.value(y), self.value(f));
        xv.same_shape(yv, "gate3")?;
        xv.same_shape(fv, "gate3")?;
        let data = (0..xv.len())
            .map(|i| {
                let g = fv.data()[i];
                g * xv.data()[i] + (1.0 - g) * yv.data()[i]
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Gate3 { x, y, f }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, c))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, EngineError> {
        let av = self.value(a);
        av.same_shape(&c, "mul_const")?;
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    /// Inverted dropout: identity when `!train` or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var, EngineError> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 - p;
        let mask = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.mul_const(a, Tensor::new(shape, mask)?)
    }

    /// Elementwise sum of same-shape values.
    pub fn sum_list(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = *parts.first().ok_or_else(|| EngineError::Shape("sum_list of nothing".into()))?;
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            let pv = self.value(p);
            out.same_shape(pv, "sum_list")?;
            out.add_assign(pv);
        }
        Ok(self.push(out, Op::SumList(parts.to_vec())))
    }

    /// Stacks 2-D parts with equal column counts, or concatenates 1-D parts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let first = self.value(*parts.first().ok_or_else(|| EngineError::Shape("empty concat".into()))?);
        let one_d = first.shape().len() == 1;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if (v.shape().len() == 1) != one_d || v.cols() != cols && !one_d {
                return Err(EngineError::Shape(format!("concat_rows: {:?}", v.shape())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let shape = if one_d { vec![data.len()] } else { vec![rows, cols] };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins 2-D parts with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        let rows = self.value(*parts.first().ok_or_else(|| EngineError::Shape("empty concat".into()))?).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(EngineError::Shape(format!("concat_cols: {:?}", v.shape())));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, EngineError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.cols() || len == 0 {
            return Err(EngineError::Shape(format!("slice_cols {start}+{len} of {:?}", xv.shape())));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(rows, len, data), Op::SliceCols { x, start }))
    }

    /// Rows of `table [V×d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, EngineError> {
        let tv = self.value(table);
        let (v, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(EngineError::Shape(format!("embedding id {i} >= vocab {v}")));
            }
            data.extend_from_slice(tv.row_slice(i));
        }
        let out = Tensor::matrix(ids.len(), d, data);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let n = xv.cols();
        for r in 0..xv.rows() {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax restricted to `mask`; masked entries are 0.
    pub fn log_softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var, EngineError> {
        let xv = self.value(x);
        let n = xv.cols();
        if mask.len() != n || !mask.iter().any(|&m| m) {
            return Err(EngineError::Shape("log_softmax_masked: bad mask".into()));
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let m = row.iter().zip(mask).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().zip(mask).filter(|(_, &k)| k).map(|(v, _)| (v - m).exp()).sum();
            let lse = m + z.ln();
            for (v, &k) in row.iter_mut().zip(mask) {
                *v = if k { *v - lse } else { 0.0 };
            }
        }
        Ok(self.push(out, Op::LogSoftmaxMasked { x, mask: mask.to_vec() }))
    }

    /// Mean token cross-entropy of `logits [b×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, EngineError> {
        let lv = self.value(logits);
        let (b, v) = (lv.rows(), lv.cols());
        if targets.len() != b || targets.iter().any(|&t| t >= v) {
            return Err(EngineError::Shape(format!("cross_entropy: {b} rows, {} targets", targets.len())));
        }
        let mut probs = vec![0.0; b * v];
        let mut loss = 0.0;
        for r in 0..b {
            let row = lv.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for j in 0..v {
                probs[r * v + j] = (row[j] - m).exp() / z;
            }
            loss += m + z.ln() - row[targets[r]];
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let v = self.value(x).data()[index];
        self.push(Tensor::scalar(v), Op::Pick { x, index })
    }

    /// Elementwise `e^x`.
    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.exp()).collect()).expect("same shape");
        self.push(out, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    /// Backpropagates `loss` and adds parameter gradients into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) {
        let grads = self.gradients(loss);
        for (i, node) in self.nodes.iter().enumerate().take(grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data).expect("shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (b, k, o) = (xv.rows(), xv.cols(), wv.rows());
                let mut dx = vec![0.0; b * k];
                let mut dw = vec![0.0; o * k];
                for r in 0..b {
                    let xr = &xv.data()[r * k..(r + 1) * k];
                    for j in 0..o {
                        let gj = gd[r * o + j];
                        if gj == 0.0 {
                            continue;
                        }
                        let wr = &wv.data()[j * k..(j + 1) * k];
                        let dxr = &mut dx[r * k..(r + 1) * k];
                        for c in 0..k {
                            dxr[c] += gj * wr[c];
                        }
                        let dwr = &mut dw[j * k..(j + 1) * k];
                        for c in 0..k {
                            dwr[c] += gj * xr[c];
                        }
                    }
                }
                acc(grads, *x, like(*x, dx));
                acc(grads, *w, like(*w, dw));
            }
            Op::AddBias { x, b } => {
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for (idx, v) in gd.iter().enumerate() {
                    db[idx % n] += v;
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, like(*b, db));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, like(*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, like(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect()));
                acc(grads, *b, like(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, y)| g / guarded_denominator(*y)).collect();
                let db = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| if y.abs() > DIV_GUARD { -g * x / (y * y) } else { 0.0 })
                    .collect();
                acc(grads, *a, like(*a, da));
                acc(grads, *b, like(*b, db));
            }
            Op::Unary(a, f) => {
                let (xv, yv) = (self.value(*a).data(), node.value.data());
                let d = gd.iter().zip(xv.iter().zip(yv)).map(|(g, (x, y))| g * f.derivative(*x, *y)).collect();
                acc(grads, *a, like(*a, d));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let rows = inv_std.len();
                let mut dx = vec![0.0; n * rows];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..rows {
                    let gr = &gd[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[r * n + j] = inv_std[r] / n as f64 * (n as f64 * dh - s1 - hr[j] * s2);
                    }
                }
                acc(grads, *x, like(*x, dx));
                acc(grads, *gain, like(*gain, dgain));
                acc(grads, *bias, like(*bias, dbias));
            }
            Op::Gate3 { x, y, f } => {
                let (xv, yv, fv) = (self.value(*x).data(), self.value(*y).data(), self.value(*f).data());
                let n = gd.len();
                let dx = (0..n).map(|i| gd[i] * fv[i]).collect();
                let dy = (0..n).map(|i| gd[i] * (1.0 - fv[i])).collect();
                let df = (0..n).map(|i| gd[i] * (xv[i] - yv[i])).collect();
                acc(grads, *x, like(*x, dx));
                acc(grads, *y, like(*y, dy));
                acc(grads, *f, like(*f, df));
            }
            Op::Scale(a, c) => acc(grads, *a, like(*a, gd.iter().map(|v| v * c).collect())),
            Op::MulConst(a, c) => acc(grads, *a, like(*a, gd.iter().zip(c.data()).map(|(g, m)| g * m).collect())),
            Op::SumList(parts) => {
                for p in parts {
                    acc(grads, *p, g.clone());
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(grads, *p, like(*p, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    acc(grads, *p, like(*p, d));
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, n, len) = (xv.rows(), xv.cols(), g.cols());
                let mut d = vec![0.0; rows * n];
                for r in 0..rows {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(grads, *x, like(*x, d));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                acc(grads, *table, like(*table, dt));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let s: f64 = (0..n).map(|j| gd[r * n + j] * y[r * n + j]).sum();
                    for j in 0..n {
                        d[r * n + j] = y[r * n + j] * (gd[r * n + j] - s);
                    }
                }
                acc(grads, *x, like(*x, d));
            }
            Op::LogSoftmaxMasked { x, mask } => {
                let y = node.value.data();
                let n = mask.len();
                let mut d = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let s: f64 = (0..n).filter(|&j| mask[j]).map(|j| gd[r * n + j]).sum();
                    for j in (0..n).filter(|&j| mask[j]) {
                        d[r * n + j] = gd[r * n + j] - y[r * n + j].exp() * s;
                    }
                }
                acc(grads, *x, like(*x, d));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let b = targets.len() as f64;
                let scale = gd[0] / b;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                acc(grads, *logits, like(*logits, d));
            }
            Op::Pick { x, index } => {
                let mut d = vec![0.0; self.value(*x).len()];
                d[*index] = gd[0];
                acc(grads, *x, like(*x, d));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, like(*x, vec![gd[0]; n]));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                acc(grads, *x, like(*x, d));
            }
        }
    }
}
