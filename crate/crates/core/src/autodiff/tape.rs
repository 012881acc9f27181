use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    Conv1d { x: Var, w: Var, b: Var, padding: usize },
    MaskedSelect { x: Var, mask: Vec<bool> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation. Node order is a topological order.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`'s value; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{name}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        self.push(name, value, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor {
            shape: vx.shape.clone(),
            data: vx.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(name, value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: [{m},{k}] x [{k2},{n}]")));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.value(a).data, k, 1, &self.value(b).data, n, 1, T::zero(), &mut c, n, 1);
        self.push("matmul", Tensor { shape: vec![m, n], data: c }, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_operand(&self, name: &str, x: Var, b: Var) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(x).rows_last();
        if self.value(b).numel() != cols || self.shape(x).is_empty() {
            return Err(Error::shape(format!(
                "{name}: operand {:?} does not match last axis of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        Ok((rows, cols))
    }

    /// `x[.., j] + b[j]` for every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.row_operand("add_row", x, b)?;
        let (vx, vb) = (self.value(x), self.value(b));
        let data = vx.data.iter().enumerate().map(|(i, &v)| v + vb.data[i % cols]).collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push("add_row", value, Op::AddRow(x, b), &[x, b])
    }

    /// `x[.., j] * s[j]` for every row of `x`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, cols) = self.row_operand("mul_row", x, s)?;
        let (vx, vs) = (self.value(x), self.value(s));
        let data = vx.data.iter().enumerate().map(|(i, &v)| v * vs.data[i % cols]).collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push("mul_row", value, Op::MulRow(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        self.map("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor { shape: vec![c, r], data }, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", vx.shape)));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: vx.data.clone(),
        };
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat needs at least one part and axis 0 or 1"));
        }
        let dims = parts.iter().map(|&p| self.value(p).dims2()).collect::<Result<Vec<_>>>()?;
        let (r0, c0) = dims[0];
        let value = if axis == 0 {
            if dims.iter().any(|d| d.1 != c0) {
                return Err(Error::shape("concat axis 0: column counts differ"));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(&self.value(p).data);
            }
            Tensor {
                shape: vec![rows, c0],
                data,
            }
        } else {
            if dims.iter().any(|d| d.0 != r0) {
                return Err(Error::shape("concat axis 1: row counts differ"));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data[i * c..(i + 1) * c]);
                }
            }
            Tensor {
                shape: vec![r0, cols],
                data,
            }
        };
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// `len` consecutive rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::shape(format!("slice [{start}, {}) of axis {axis} in [{r},{c}]", start + len)));
        }
        let src = &self.value(x).data;
        let value = if axis == 0 {
            Tensor {
                shape: vec![len, c],
                data: src[start * c..(start + len) * c].to_vec(),
            }
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&src[i * c + start..i * c + start + len]);
            }
            Tensor {
                shape: vec![r, len],
                data,
            }
        };
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    /// Rows of a matrix picked by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor {
            shape: vec![idx.len(), c],
            data,
        };
        self.push("gather_rows", value, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().fold(T::zero(), |a, &v| a + v);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = vx.data.iter().fold(T::zero(), |a, &v| a + v) / T::c(vx.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum of a matrix along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = &self.value(x).data;
        let value = match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                        *o += v;
                    }
                }
                Tensor {
                    shape: vec![1, c],
                    data: out,
                }
            }
            1 => Tensor {
                shape: vec![r, 1],
                data: (0..r).map(|i| src[i * c..(i + 1) * c].iter().fold(T::zero(), |a, &v| a + v)).collect(),
            },
            _ => return Err(Error::shape("sum_axis: axis must be 0 or 1")),
        };
        self.push("sum_axis", value, Op::SumAxis { x, axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let n = if axis == 0 { r } else { c };
        if n == 0 {
            return Err(Error::shape("mean_axis over an empty axis"));
        }
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.rows_last();
        let mut data = vx.data.clone();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.rows_last();
        let mut data = vx.data.clone();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = m + row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalisation along the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.row_operand("layer_norm", x, gamma)?;
        self.row_operand("layer_norm", x, beta)?;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = T::c(cols as f64);
        let eps = T::c(LN_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let row = &vx.data[i * cols..(i + 1) * cols];
            let mu = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..cols {
                let h = (row[j] - mu) * r;
                xhat[i * cols + j] = h;
                out[i * cols + j] = h * vg.data[j] + vb.data[j];
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data: out,
        };
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, Op::Gelu(x), |v| T::c(gelu_parts(v.f64()).0))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, Op::Log(x), |v| v.ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map("sqrt", x, Op::Sqrt(x), |v| v.sqrt())
    }

    /// Scale each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.rows_last();
        let mut norms = Vec::with_capacity(rows);
        let mut data = vx.data.clone();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            let nrm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if nrm == T::zero() {
                return Err(Error::DegenerateProjection);
            }
            for v in row.iter_mut() {
                *v = *v / nrm;
            }
            norms.push(nrm);
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push("l2_normalize", value, Op::L2Normalize { x, norms }, &[x])
    }

    /// 1-D convolution (cross-correlation) of `x: [C_in, L]` with
    /// `w: [C_out, C_in, K]` and bias `b: [C_out]`, zero padding on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let (cin, len) = self.value(x).dims2()?;
        let ws = self.shape(w).to_vec();
        let [cout, cin2, k] = ws[..] else {
            return Err(Error::shape(format!("conv1d weight must be rank 3, got {ws:?}")));
        };
        if cin2 != cin || self.value(b).numel() != cout || len + 2 * padding < k {
            return Err(Error::shape(format!(
                "conv1d: x [{cin},{len}], w {ws:?}, b {:?}, padding {padding}",
                self.shape(b)
            )));
        }
        let lout = len + 2 * padding - k + 1;
        let (vx, vw, vb) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = vec![T::zero(); cout * lout];
        for o in 0..cout {
            for t in 0..lout {
                let mut acc = vb[o];
                for c in 0..cin {
                    for j in 0..k {
                        let pos = t + j;
                        if pos < padding || pos - padding >= len {
                            continue;
                        }
                        acc += vw[(o * cin + c) * k + j] * vx[c * len + pos - padding];
                    }
                }
                out[o * lout + t] = acc;
            }
        }
        let value = Tensor {
            shape: vec![cout, lout],
            data: out,
        };
        self.push("conv1d", value, Op::Conv1d { x, w, b, padding }, &[x, w, b])
    }

    /// Elements of `x` where `mask` is true, flattened in row-major order.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(Error::shape(format!("masked_select: mask of {} for {} values", mask.len(), vx.numel())));
        }
        let data: Vec<T> = vx.data.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        let value = Tensor {
            shape: vec![data.len()],
            data,
        };
        self.push("masked_select", value, Op::MaskedSelect { x, mask: mask.to_vec() }, &[x])
    }

    /// Reverse sweep from a scalar `root`. Gradients are readable through
    /// [`Tape::grad`] until the next call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        // Accumulate into `v`'s gradient buffer if it takes gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                acc(*a, &mut |ga| T::gemm(m, n, k, T::one(), g, n, 1, &val(*b).data, 1, n, T::one(), ga, k, 1));
                acc(*b, &mut |gb| T::gemm(k, m, n, T::one(), &val(*a).data, 1, k, g, n, 1, T::one(), gb, n, 1));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * va[j];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let cols = val(*b).numel();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                acc(*b, &mut |gb| {
                    for (j, &v) in g.iter().enumerate() {
                        gb[j % cols] += v;
                    }
                });
            }
            Op::MulRow(x, s) => {
                let cols = val(*s).numel();
                let (vx, vs) = (&val(*x).data, &val(*s).data);
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * vs[j % cols];
                    }
                });
                acc(*s, &mut |gs| {
                    for (j, &v) in g.iter().enumerate() {
                        gs[j % cols] += v * vx[j];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *s)),
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                acc(*x, &mut |gx| {
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v)),
            Op::Concat { parts, axis } => {
                let cols = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (val(p).shape[0], val(p).shape[1]);
                    if *axis == 0 {
                        acc(p, &mut |gp| {
                            gp.iter_mut().zip(&g[offset * cols..]).for_each(|(o, &v)| *o += v);
                        });
                        offset += pr;
                    } else {
                        acc(p, &mut |gp| {
                            for r in 0..pr {
                                for c in 0..pc {
                                    gp[r * pc + c] += g[r * cols + offset + c];
                                }
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let c = val(*x).shape[1];
                let (or, oc) = (out.shape[0], out.shape[1]);
                acc(*x, &mut |gx| {
                    for r in 0..or {
                        for cc in 0..oc {
                            let (sr, sc) = if *axis == 0 { (r + start, cc) } else { (r, cc + start) };
                            gx[sr * c + sc] += g[r * oc + cc];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).shape[1];
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for cc in 0..c {
                            gx[src * c + cc] += g[r * c + cc];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let s = g[0] / T::c(val(*x).numel() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::SumAxis { x, axis } => {
                let c = val(*x).shape[1];
                acc(*x, &mut |gx| {
                    for (j, o) in gx.iter_mut().enumerate() {
                        *o += if *axis == 0 { g[j % c] } else { g[j / c] };
                    }
                });
            }
            Op::Softmax(x) => {
                let (rows, cols) = out.rows_last();
                let y = &out.data;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let s = (0..cols).fold(T::zero(), |a, j| a + g[r * cols + j] * y[r * cols + j]);
                        for j in 0..cols {
                            let q = r * cols + j;
                            gx[q] += y[q] * (g[q] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = out.rows_last();
                let y = &out.data;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let s = (0..cols).fold(T::zero(), |a, j| a + g[r * cols + j]);
                        for j in 0..cols {
                            let q = r * cols + j;
                            gx[q] += g[q] - y[q].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = out.rows_last();
                let vg = &val(*gamma).data;
                acc(*gamma, &mut |gg| {
                    for (q, &v) in g.iter().enumerate() {
                        gg[q % cols] += v * xhat[q];
                    }
                });
                acc(*beta, &mut |gb| {
                    for (q, &v) in g.iter().enumerate() {
                        gb[q % cols] += v;
                    }
                });
                let n = T::c(cols as f64);
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            let d = g[base + j] * vg[j];
                            m1 += d;
                            m2 += d * xhat[base + j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..cols {
                            let d = g[base + j] * vg[j];
                            gx[base + j] += rstd[r] * (d - m1 - xhat[base + j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = &val(*x).data;
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * T::c(gelu_parts(vx[j].f64()).1);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = &val(*x).data;
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        if vx[j] > T::zero() {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] * out.data[j];
                }
            }),
            Op::Log(x) => {
                let vx = &val(*x).data;
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] / vx[j];
                    }
                });
            }
            Op::Sqrt(x) => acc(*x, &mut |gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] / (T::c(2.0) * out.data[j]);
                }
            }),
            Op::L2Normalize { x, norms } => {
                let (rows, cols) = out.rows_last();
                let y = &out.data;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let base = r * cols;
                        let dot = (0..cols).fold(T::zero(), |a, j| a + g[base + j] * y[base + j]);
                        for j in 0..cols {
                            gx[base + j] += (g[base + j] - y[base + j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, padding } => {
                let (cin, len) = (val(*x).shape[0], val(*x).shape[1]);
                let (cout, k) = (val(*w).shape[0], val(*w).shape[2]);
                let lout = out.shape[1];
                let p = *padding;
                let (vx, vw) = (&val(*x).data, &val(*w).data);
                acc(*b, &mut |gb| {
                    for o in 0..cout {
                        gb[o] += (0..lout).fold(T::zero(), |a, t| a + g[o * lout + t]);
                    }
                });
                acc(*w, &mut |gw| {
                    for o in 0..cout {
                        for c in 0..cin {
                            for j in 0..k {
                                let mut s = T::zero();
                                for t in 0..lout {
                                    let pos = t + j;
                                    if pos >= p && pos - p < len {
                                        s += g[o * lout + t] * vx[c * len + pos - p];
                                    }
                                }
                                gw[(o * cin + c) * k + j] += s;
                            }
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for o in 0..cout {
                        for t in 0..lout {
                            let go = g[o * lout + t];
                            for c in 0..cin {
                                for j in 0..k {
                                    let pos = t + j;
                                    if pos >= p && pos - p < len {
                                        gx[c * len + pos - p] += go * vw[(o * cin + c) * k + j];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskedSelect { x, mask } => acc(*x, &mut |gx| {
                let mut q = 0;
                for (j, &m) in mask.iter().enumerate() {
                    if m {
                        gx[j] += g[q];
                        q += 1;
                    }
                }
            }),
        }
    }
}
