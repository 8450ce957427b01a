use crate::error::{size_err, Error, Result};
use crate::num::Scalar;

use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Linear(Var, Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Scale(Var, T),
    Pick(Var, usize),
    SmoothL1(Var, T),
    Sum(Vec<Var>),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

/// Records matrix operations for one forward pass.
///
/// With recording disabled the tape only evaluates values; calling
/// [`Tape::backward`] on it is a contract error.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let th = (k * (x + c * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates values only.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a `rows x cols` input.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(size_err(format!(
                "{} values for a {}x{} input",
                value.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    /// Adds a tensor as a leaf, viewed through [`Tensor::matrix_shape`].
    pub fn tensor(&mut self, t: &Tensor<T>) -> Var {
        let (r, c) = t.matrix_shape();
        self.push(r, c, t.data().to_vec(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(size_err(format!("matmul {}x{} by {}x{}", m, k, k2, n)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(size_err(format!(
                "matmul_nt {}x{} by ({}x{})^T",
                m, k, n, k2
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(size_err(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(size_err(format!(
                "broadcast {:?} over {}x{}",
                self.shape(row),
                m,
                n
            )));
        }
        let bias = self.value(row);
        let out = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|r| r.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(m, n, out, Op::AddRow(a, row)))
    }

    /// `x * w + b`, with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        if k != k2 || self.shape(b) != (1, n) {
            return Err(size_err(format!(
                "linear {}x{} through {}x{} + {:?}",
                m,
                k,
                k2,
                n,
                self.shape(b)
            )));
        }
        let bias = self.value(b);
        let mut out: Vec<T> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        gemm_nn(self.value(x), self.value(w), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::Linear(x, w, b)))
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma * . + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(size_err("layer norm scale/shift must be 1 x cols"));
        }
        let nt = T::of(n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        {
            let xv = self.value(x);
            let (g, b) = (self.value(gamma), self.value(beta));
            for row in xv.chunks_exact(n) {
                let mean = row.iter().copied().sum::<T>() / nt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * is;
                    xhat.push(h);
                    out.push(g[j] * h + b[j]);
                }
            }
        }
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).chunks_exact(n) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                total += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= total;
            }
        }
        self.push(m, n, out, Op::Softmax(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(m, n, out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(m, n, out, Op::Relu(x))
    }

    /// Stacks along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| size_err("concat of nothing"))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(size_err(format!("concat rows: {} vs {} columns", c, n)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, n, out, Op::ConcatRows(parts.to_vec())))
    }

    /// Places matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| size_err("concat of nothing"))?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(size_err(format!("concat cols: {} vs {} rows", r, m)));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(m * cols);
        for i in 0..m {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(m, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > m || len == 0 {
            return Err(size_err(format!(
                "rows {}..{} of {}",
                start,
                start + len,
                m
            )));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(len, n, out, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n || len == 0 {
            return Err(size_err(format!(
                "cols {}..{} of {}",
                start,
                start + len,
                n
            )));
        }
        let xv = self.value(x);
        let out = (0..m)
            .flat_map(|i| xv[i * n + start..i * n + start + len].iter().copied())
            .collect();
        Ok(self.push(m, len, out, Op::SliceCols(x, start)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(m, n, out, Op::Scale(x, s))
    }

    /// The `index`-th element (row-major) as a `1 x 1` node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        if index >= len {
            return Err(Error::Index { index, len });
        }
        let v = self.value(x)[index];
        Ok(self.push(1, 1, vec![v], Op::Pick(x, index)))
    }

    /// Smooth L1 (Huber with unit threshold) of a `1 x 1` node against a constant.
    pub fn smooth_l1(&mut self, x: Var, target: T) -> Result<Var> {
        if self.shape(x) != (1, 1) {
            return Err(size_err("smooth L1 expects a 1x1 input"));
        }
        let d = self.scalar(x) - target;
        let v = if d.abs() < T::one() {
            T::of(0.5) * d * d
        } else {
            d.abs() - T::of(0.5)
        };
        Ok(self.push(1, 1, vec![v], Op::SmoothL1(x, target)))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = parts
            .first()
            .map(|&p| self.shape(p))
            .ok_or_else(|| size_err("sum of nothing"))?;
        let mut out = vec![T::zero(); shape.0 * shape.1];
        for &p in parts {
            if self.shape(p) != shape {
                return Err(size_err("sum of differently shaped nodes"));
            }
            for (o, &v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        Ok(self.push(shape.0, shape.1, out, Op::Sum(parts.to_vec())))
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::Contract("backward on a non-recording tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            // Keep intermediate gradients available to callers.
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                let k = self.shape(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, m * k, |ga| gemm_nt(g, bv, ga, m, n, k));
                accumulate(grads, *b, k * n, |gb| gemm_tn(av, g, gb, m, k, n));
                if let Op::Linear(_, _, bias) = &node.op {
                    accumulate(grads, *bias, n, |gb| {
                        for row in g.chunks_exact(n) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a b^T with a: m x k, b: n x k
                let k = self.shape(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, m * k, |ga| gemm_nn(g, bv, ga, m, n, k));
                accumulate(grads, *b, n * k, |gb| gemm_tn(g, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    accumulate(grads, *v, m * n, |ga| {
                        for (o, &x) in ga.iter_mut().zip(g) {
                            *o += x;
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, m * n, |ga| {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                });
                accumulate(grads, *row, n, |gr| {
                    for r in g.chunks_exact(n) {
                        for (o, &x) in gr.iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let nt = T::of(n as f64);
                accumulate(grads, *x, m * n, |gx| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= nt;
                        mean_dh /= nt;
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            gx[i * n + j] += inv_std[i] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                accumulate(grads, *gamma, n, |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                accumulate(grads, *beta, n, |gb| {
                    for gr in g.chunks_exact(n) {
                        for (o, &v) in gb.iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                accumulate(grads, *x, m * n, |gx| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, m * n, |gx| {
                    for j in 0..m * n {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, m * n, |gx| {
                    for j in 0..m * n {
                        if xv[j] > T::zero() {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    accumulate(grads, *p, len, |gp| {
                        for (o, &v) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *o += v;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    accumulate(grads, *p, m * c, |gp| {
                        for i in 0..m {
                            for j in 0..c {
                                gp[i * c + j] += g[i * n + col + j];
                            }
                        }
                    });
                    col += c;
                }
            }
            Op::SliceRows(x, start) => {
                let len = self.value(*x).len();
                accumulate(grads, *x, len, |gx| {
                    for (o, &v) in gx[start * n..(start + m) * n].iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (xm, xn) = self.shape(*x);
                accumulate(grads, *x, xm * xn, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * xn + start + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, m * n, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * *s;
                    }
                });
            }
            Op::Pick(x, index) => {
                let len = self.value(*x).len();
                accumulate(grads, *x, len, |gx| gx[*index] += g[0]);
            }
            Op::SmoothL1(x, target) => {
                let d = self.scalar(*x) - *target;
                let slope = if d.abs() < T::one() { d } else { d.signum() };
                accumulate(grads, *x, 1, |gx| gx[0] += g[0] * slope);
            }
            Op::Sum(parts) => {
                for p in parts {
                    accumulate(grads, *p, m * n, |gp| {
                        for (o, &v) in gp.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
            }
        }
    }
}
