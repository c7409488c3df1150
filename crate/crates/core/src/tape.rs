//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are addressed by [`Var`] handles and are appended in construction
//! order, so the node list is already topologically sorted: `backward`
//! walks it in reverse index order. A tape is rebuilt for every batch.
//!
//! Broadcasting is limited to scalar-vs-tensor for the binary elementwise
//! ops. Row or column broadcasts are expressed as products with a ones
//! vector ([`Tape::repeat_rows`], [`Tape::repeat_cols`]).

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Square,
    Scale(f64),
    Offset(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    LogSumExpRows(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Dynamic computation graph with reverse-mode gradients.
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf (a parameter or an input that may receive gradients).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a constant. Constants are leaves whose gradients are simply
    /// never read.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, zero if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents differ: {}x{} . {}x{}",
                m, k, k2, n
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    fn binary_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let sa = self.value(a);
        let sb = self.value(b);
        if sa.shape() == sb.shape() || sb.is_scalar() {
            Ok(sa.shape().to_vec())
        } else if sa.is_scalar() {
            Ok(sb.shape().to_vec())
        } else {
            dim_err(format!(
                "{}: shapes {:?} and {:?} are not broadcast-compatible",
                what,
                sa.shape(),
                sb.shape()
            ))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(a, b, what)?;
        let n: usize = shape.iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let out: Vec<f64> = (0..n)
            .map(|i| f(da[bidx(da.len(), i)], db[bidx(db.len(), i)]))
            .collect();
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("ln of non-positive value {}", bad)));
        }
        Ok(self.unary(a, f64::ln, Op::Ln(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope >= 0.0) {
            return Err(Error::Contract(format!("leaky-ReLU slope {} < 0", slope)));
        }
        Ok(self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        ))
    }

    /// Dispatches an [`Elementwise`] kind over one or two operands.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{:?} takes {} operand(s), got {}",
                kind,
                arity,
                inputs.len()
            )));
        }
        let a = inputs[0];
        match kind {
            Elementwise::Add => self.add(a, inputs[1]),
            Elementwise::Sub => self.sub(a, inputs[1]),
            Elementwise::Mul => self.mul(a, inputs[1]),
            Elementwise::Div => self.div(a, inputs[1]),
            Elementwise::Neg => Ok(self.neg(a)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Ln => self.ln(a),
            Elementwise::Square => Ok(self.square(a)),
            Elementwise::Scale(c) => Ok(self.scale(a, c)),
            Elementwise::Offset(c) => Ok(self.offset(a, c)),
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise `max + ln Σ exp(x - max)`: `[n×k] -> [n]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        if k == 0 {
            return dim_err("log-sum-exp over empty rows");
        }
        let x = self.value(a).data();
        let out = (0..n).map(|r| lse(&x[r * k..(r + 1) * k])).collect();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::LogSumExpRows(a)))
    }

    /// Log-sum-exp of a vector, as a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let n = self.vector_len(a)?;
        if n == 0 {
            return dim_err("log-sum-exp of an empty vector");
        }
        let m = self.reshape(a, &[1, n])?;
        let r = self.log_sum_exp_rows(m)?;
        self.reshape(r, &[])
    }

    fn vector_len(&self, a: Var) -> Result<usize> {
        match self.shape(a) {
            [n] => Ok(*n),
            s => dim_err(format!("expected a vector, got shape {:?}", s)),
        }
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, k) = self.value(a).dims2()?;
        let l = self.log_sum_exp_rows(a)?;
        let lb = self.repeat_cols(l, k)?;
        self.sub(a, lb)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax_rows(a)?;
        Ok(self.exp(ls))
    }

    /// Softmax of a vector, computed as `exp(x - log_sum_exp(x))`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.vector_len(a)?;
        if n == 0 {
            return dim_err("softmax of an empty vector");
        }
        let m = self.reshape(a, &[1, n])?;
        let s = self.softmax_rows(m)?;
        self.reshape(s, &[n])
    }

    /// Picks `a[r, indices[r]]` for every row: `[n×k] -> [n]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        if indices.len() != n {
            return dim_err(format!("gather: {} indices for {} rows", indices.len(), n));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Contract(format!("gather index {} >= {}", bad, k)));
        }
        let x = self.value(a).data();
        let out = indices.iter().enumerate().map(|(r, &c)| x[r * k + c]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::Gather(a, indices.to_vec()),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let out = transpose_raw(x, r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a)))
    }

    /// Stacks a length-`k` vector into `n` identical rows: `[k] -> [n×k]`.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let k = self.vector_len(v)?;
        let ones = self.constant(Tensor::full(&[n, 1], 1.0));
        let row = self.reshape(v, &[1, k])?;
        self.matmul(ones, row)
    }

    /// Repeats a length-`n` vector across `k` columns: `[n] -> [n×k]`.
    pub fn repeat_cols(&mut self, v: Var, k: usize) -> Result<Var> {
        let n = self.vector_len(v)?;
        let col = self.reshape(v, &[n, 1])?;
        let ones = self.constant(Tensor::full(&[1, k], 1.0));
        self.matmul(col, ones)
    }

    /// Accumulates `∂root/∂node` into every node reachable from `root`.
    ///
    /// Adjoints are computed fresh on every call and then added to the stored
    /// gradients, so two calls without [`Tape::zero_grads`] yield twice the
    /// gradient of one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = transpose_raw(vb.data(), k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(va.data(), m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Add(a, b) => {
                self.reduce_into(adj, *a, g.to_vec());
                self.reduce_into(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.reduce_into(adj, *a, g.to_vec());
                self.reduce_into(adj, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let ga = (0..g.len()).map(|j| g[j] * db[bidx(db.len(), j)]).collect();
                let gb = (0..g.len()).map(|j| g[j] * da[bidx(da.len(), j)]).collect();
                self.reduce_into(adj, *a, ga);
                self.reduce_into(adj, *b, gb);
            }
            Op::Div(a, b) => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let ga = (0..g.len()).map(|j| g[j] / db[bidx(db.len(), j)]).collect();
                let gb = (0..g.len())
                    .map(|j| {
                        let y = db[bidx(db.len(), j)];
                        -g[j] * da[bidx(da.len(), j)] / (y * y)
                    })
                    .collect();
                self.reduce_into(adj, *a, ga);
                self.reduce_into(adj, *b, gb);
            }
            Op::Neg(a) => accumulate(adj, *a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => accumulate(adj, *a, g.iter().map(|x| c * x).collect()),
            Op::Offset(a) => accumulate(adj, *a, g.to_vec()),
            Op::Exp(a) => accumulate(adj, *a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Ln(a) => {
                let x = self.value(*a).data();
                accumulate(adj, *a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect())
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                accumulate(
                    adj,
                    *a,
                    g.iter().zip(x).map(|(gi, xi)| 2.0 * xi * gi).collect(),
                )
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                accumulate(
                    adj,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi })
                        .collect(),
                )
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a).data();
                let k = self.value(*a).shape()[1];
                let mut ga = vec![0.0; x.len()];
                for (r, (gr, lr)) in g.iter().zip(out).enumerate() {
                    for c in 0..k {
                        ga[r * k + c] = gr * (x[r * k + c] - lr).exp();
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::Gather(a, idx) => {
                let k = self.value(*a).shape()[1];
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (r, &c) in idx.iter().enumerate() {
                    ga[r * k + c] = g[r];
                }
                accumulate(adj, *a, ga);
            }
            Op::Reshape(a) => accumulate(adj, *a, g.to_vec()),
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                accumulate(adj, *a, transpose_raw(g, c, r));
            }
        }
    }

    /// Sums a full-shape gradient down to a scalar operand when it was broadcast.
    fn reduce_into(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if self.value(v).numel() == g.len() {
            accumulate(adj, v, g);
        } else {
            accumulate(adj, v, vec![g.iter().sum()]);
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn bidx(len: usize, i: usize) -> usize {
    if len == 1 {
        0
    } else {
        i
    }
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function of one tensor.
///
/// Used by tests as an oracle independent of the backward rules.
pub fn finite_difference(
    x: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}
