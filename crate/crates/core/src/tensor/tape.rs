use super::kernels::{dot, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, transpose};
use super::{ensure_finite, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows { input: Var, norms: Vec<T>, floor: T },
    LayerNorm { input: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    GatherRows { table: Var, index: Vec<usize> },
    ConcatCols(Var, Var),
    PickPerRow { input: Var, cols: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, heads: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so inputs
/// always precede their consumers; [`Tape::backward`] consumes the tape.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor.grad` (if it has one).
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

const DEFAULT_NORM_FLOOR: f64 = 1e-12;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a copy of `t`; it participates in gradients iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), t.requires_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        self.nodes.push(Node {
            value: Tensor::from_parts_unchecked(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(name, shape, data, op, &[a])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(kind, Elementwise::Add | Elementwise::Sub | Elementwise::Mul);
        match (need_b, b) {
            (true, Some(b)) => match kind {
                Elementwise::Add => self.add(a, b),
                Elementwise::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            },
            (true, None) => Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: self.shape(a).to_vec(),
                right: vec![],
            }),
            (false, _) => match kind {
                Elementwise::ScalarMul(s) => self.scale(a, s),
                Elementwise::Exp => self.exp(a),
                Elementwise::Log => self.log(a),
                Elementwise::Sigmoid => self.sigmoid(a),
                Elementwise::Tanh => self.tanh(a),
                _ => self.relu(a),
            },
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= T::zero()) {
            return Err(TensorError::LogDomain { value: bad.as_f64() });
        }
        self.unary("log", a, T::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, T::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = transpose(self.value(a).data(), m, n);
        self.push("transpose", vec![n, m], out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let shape = t.shape().to_vec();
        self.push("reshape", shape, t.into_data(), Op::Reshape(a), &[a])
    }

    /// `a[m,n] + bias[n]` applied to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", a)?;
        if self.value(bias).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push("add_bias", vec![m, n], out, Op::AddBias(a, bias), &[a, bias])
    }

    /// Scales row `i` of `a[m,n]` by `s[i]`, with `s` shaped `[m,1]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims2("mul_rows", a)?;
        if self.shape(s) != [m, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                left: vec![m, n],
                right: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).data();
        let mut out = self.value(a).data().to_vec();
        for (row, &f) in out.chunks_mut(n).zip(sv) {
            row.iter_mut().for_each(|x| *x = *x * f);
        }
        self.push("mul_rows", vec![m, n], out, Op::MulRows(a, s), &[a, s])
    }

    /// Row sums: `[m,n] -> [m,1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("sum_rows", a)?;
        let out = self.value(a).data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        self.push("sum_rows", vec![m, 1], out, Op::SumRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let mean = s / T::from_f64(t.numel() as f64);
        self.push("mean", vec![1], vec![mean], Op::Mean(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        self.push("softmax_rows", vec![m, n], out, Op::SoftmaxRows(a), &[a])
    }

    /// `x - max - log(sum(exp(x - max)))` per row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("log_softmax_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x = *x - max - lse);
        }
        self.push("log_softmax_rows", vec![m, n], out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Divides each row by `max(norm, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.l2_normalize_rows_with(a, Some(DEFAULT_NORM_FLOOR))
    }

    /// Row normalization with an optional norm floor. Without a floor a
    /// zero row is an error.
    pub fn l2_normalize_rows_with(&mut self, a: Var, floor: Option<f64>) -> Result<Var> {
        let (m, n) = self.dims2("l2_normalize_rows", a)?;
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        let floor_t = T::from_f64(floor.unwrap_or(0.0));
        for (i, row) in out.chunks_mut(n).enumerate() {
            let norm = dot(row, row).sqrt();
            if floor.is_none() && norm == T::zero() {
                return Err(TensorError::ZeroNorm { row: i });
            }
            let denom = norm.max(floor_t);
            row.iter_mut().for_each(|x| *x = *x / denom);
            norms.push(norm);
        }
        let op = Op::L2NormalizeRows {
            input: a,
            norms,
            floor: floor_t,
        };
        self.push("l2_normalize_rows", vec![m, n], out, op, &[a])
    }

    pub fn layer_norm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm_rows", a)?;
        for p in [gamma, beta] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_rows",
                    left: vec![m, n],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(eps);
        let nf = T::from_f64(n as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(a).data().to_vec();
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for ((x, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *x = (*x - mean) * rstd * gv + bv;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let op = Op::LayerNorm {
            input: a,
            gamma,
            beta,
            mean: means,
            rstd: rstds,
        };
        self.push("layer_norm_rows", vec![m, n], out, op, &[a, gamma, beta])
    }

    /// Row lookup: `table[V,n]` at `index` -> `[index.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (v, n) = self.dims2("gather_rows", table)?;
        if index.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![0, n], len: 0 });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: v,
                });
            }
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let op = Op::GatherRows {
            table,
            index: index.to_vec(),
        };
        self.push("gather_rows", vec![index.len(), n], out, op, &[table])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2("concat_cols", a)?;
        let (m2, q) = self.dims2("concat_cols", b)?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: vec![m, p],
                right: vec![m2, q],
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        self.push("concat_cols", vec![m, p + q], out, Op::ConcatCols(a, b), &[a, b])
    }

    /// `out[i] = a[i, cols[i]]`, shaped `[m,1]`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("pick_per_row", a)?;
        if cols.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pick_per_row",
                left: vec![m, n],
                right: vec![cols.len()],
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: c,
                    extent: n,
                });
            }
            out.push(src[i * n + c]);
        }
        let op = Op::PickPerRow {
            input: a,
            cols: cols.to_vec(),
        };
        self.push("pick_per_row", vec![m, 1], out, op, &[a])
    }

    /// Multi-head scaled dot-product self-attention over independent row
    /// segments. `q`, `k`, `v` are `[N, D]` with `D` divisible by `heads`;
    /// each `(start, len)` segment attends only within itself.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        let (n, d) = self.dims2("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![n, d, heads],
                len: d,
            });
        }
        for &(s, len) in segments {
            if len == 0 || s + len > n {
                return Err(TensorError::IndexOutOfRange {
                    op: "attention",
                    index: s + len,
                    extent: n,
                });
            }
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for &(s, len) in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let qi = &qd[(s + i) * d..][cols.clone()];
                    scores.clear();
                    for j in 0..len {
                        let kj = &kd[(s + j) * d..][cols.clone()];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(s + i) * d..][cols.clone()];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vd[(s + j) * d..][cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            segments: segments.to_vec(),
            heads,
            probs,
        };
        self.push("attention", vec![n, d], out, op, &[q, k, v])
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: lt.shape().to_vec(),
            });
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !nodes[i].requires_grad {
                    continue;
                }
                ensure_finite("backward", g)?;
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Returns `(gelu(x), d gelu / dx)`.
#[inline]
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

fn grad_slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = node.value.data();
    macro_rules! acc {
        ($v:expr, |$buf:ident| $body:block) => {
            if let Some($buf) = grad_slot(nodes, grads, $v) {
                $body
            }
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc!(*a, |buf| { add_into(buf, g) });
            acc!(*b, |buf| { add_into(buf, g) });
        }
        Op::Sub(a, b) => {
            acc!(*a, |buf| { add_into(buf, g) });
            acc!(*b, |buf| {
                for (o, &x) in buf.iter_mut().zip(g) {
                    *o += -x;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc!(*a, |buf| {
                for ((o, &x), &y) in buf.iter_mut().zip(g).zip(bv) {
                    *o += x * y;
                }
            });
            acc!(*b, |buf| {
                for ((o, &x), &y) in buf.iter_mut().zip(g).zip(av) {
                    *o += x * y;
                }
            });
        }
        Op::Scale(a, s) => acc!(*a, |buf| {
            for (o, &x) in buf.iter_mut().zip(g) {
                *o += x * *s;
            }
        }),
        Op::AddScalar(a) | Op::Reshape(a) => acc!(*a, |buf| { add_into(buf, g) }),
        Op::Exp(a) => acc!(*a, |buf| {
            for ((o, &x), &y) in buf.iter_mut().zip(g).zip(out) {
                *o += x * y;
            }
        }),
        Op::Log(a) => {
            let av = val(*a);
            acc!(*a, |buf| {
                for ((o, &x), &y) in buf.iter_mut().zip(g).zip(av) {
                    *o += x / y;
                }
            })
        }
        Op::Sigmoid(a) => acc!(*a, |buf| {
            for ((o, &x), &y) in buf.iter_mut().zip(g).zip(out) {
                *o += x * y * (T::one() - y);
            }
        }),
        Op::Tanh(a) => acc!(*a, |buf| {
            for ((o, &x), &y) in buf.iter_mut().zip(g).zip(out) {
                *o += x * (T::one() - y * y);
            }
        }),
        Op::Relu(a) => {
            let av = val(*a);
            acc!(*a, |buf| {
                for ((o, &x), &y) in buf.iter_mut().zip(g).zip(av) {
                    if y > T::zero() {
                        *o += x;
                    }
                }
            })
        }
        Op::Gelu(a) => {
            let av = val(*a);
            acc!(*a, |buf| {
                for ((o, &x), &y) in buf.iter_mut().zip(g).zip(av) {
                    *o += x * gelu_parts(y).1;
                }
            })
        }
        Op::MatMul(a, b) => {
            let [m, k] = nodes[a.0].value.shape() else { unreachable!() };
            let n = nodes[b.0].value.shape()[1];
            let (m, k) = (*m, *k);
            let (av, bv) = (val(*a), val(*b));
            acc!(*a, |buf| { matmul_nt_acc(g, bv, buf, m, n, k) });
            acc!(*b, |buf| { matmul_tn_acc(av, g, buf, m, k, n) });
        }
        Op::Transpose(a) => {
            let [m, n] = nodes[a.0].value.shape() else { unreachable!() };
            let (m, n) = (*m, *n);
            acc!(*a, |buf| {
                // g is [n, m]
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
            })
        }
        Op::AddBias(a, bias) => {
            let n = nodes[bias.0].value.numel();
            acc!(*a, |buf| { add_into(buf, g) });
            acc!(*bias, |buf| {
                for row in g.chunks(n) {
                    add_into(buf, row);
                }
            });
        }
        Op::MulRows(a, s) => {
            let n = nodes[a.0].value.shape()[1];
            let (av, sv) = (val(*a), val(*s));
            acc!(*a, |buf| {
                for ((brow, grow), &f) in buf.chunks_mut(n).zip(g.chunks(n)).zip(sv) {
                    for (o, &x) in brow.iter_mut().zip(grow) {
                        *o += x * f;
                    }
                }
            });
            acc!(*s, |buf| {
                for ((o, grow), arow) in buf.iter_mut().zip(g.chunks(n)).zip(av.chunks(n)) {
                    *o += dot(grow, arow);
                }
            });
        }
        Op::SumRows(a) => {
            let n = nodes[a.0].value.shape()[1];
            acc!(*a, |buf| {
                for (row, &x) in buf.chunks_mut(n).zip(g) {
                    row.iter_mut().for_each(|o| *o += x);
                }
            })
        }
        Op::Sum(a) => acc!(*a, |buf| {
            buf.iter_mut().for_each(|o| *o += g[0]);
        }),
        Op::Mean(a) => acc!(*a, |buf| {
            let x = g[0] / T::from_f64(buf.len() as f64);
            buf.iter_mut().for_each(|o| *o += x);
        }),
        Op::SoftmaxRows(a) => {
            let n = nodes[a.0].value.shape()[1];
            acc!(*a, |buf| {
                for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s = dot(grow, yrow);
                    for ((o, &x), &y) in brow.iter_mut().zip(grow).zip(yrow) {
                        *o += y * (x - s);
                    }
                }
            })
        }
        Op::LogSoftmaxRows(a) => {
            let n = nodes[a.0].value.shape()[1];
            acc!(*a, |buf| {
                for ((brow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s: T = grow.iter().copied().sum();
                    for ((o, &x), &y) in brow.iter_mut().zip(grow).zip(yrow) {
                        *o += x - y.exp() * s;
                    }
                }
            })
        }
        Op::L2NormalizeRows { input, norms, floor } => {
            let n = nodes[input.0].value.shape()[1];
            acc!(*input, |buf| {
                for (((brow, grow), yrow), &norm) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).zip(norms) {
                    if norm > *floor {
                        let s = dot(grow, yrow);
                        for ((o, &x), &y) in brow.iter_mut().zip(grow).zip(yrow) {
                            *o += (x - y * s) / norm;
                        }
                    } else {
                        for (o, &x) in brow.iter_mut().zip(grow) {
                            *o += x / *floor;
                        }
                    }
                }
            })
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let n = nodes[input.0].value.shape()[1];
            let nf = T::from_f64(n as f64);
            let xv = val(*input);
            let gv = val(*gamma);
            let xhat = |i: usize, j: usize| (xv[i * n + j] - mean[i]) * rstd[i];
            acc!(*input, |buf| {
                for i in 0..mean.len() {
                    let grow = &g[i * n..(i + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        let dxh = grow[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xhat(i, j);
                    }
                    for j in 0..n {
                        let dxh = grow[j] * gv[j];
                        buf[i * n + j] += rstd[i] / nf * (nf * dxh - s1 - xhat(i, j) * s2);
                    }
                }
            });
            acc!(*gamma, |buf| {
                for i in 0..mean.len() {
                    for j in 0..n {
                        buf[j] += g[i * n + j] * xhat(i, j);
                    }
                }
            });
            acc!(*beta, |buf| {
                for row in g.chunks(n) {
                    add_into(buf, row);
                }
            });
        }
        Op::GatherRows { table, index } => {
            let n = nodes[table.0].value.shape()[1];
            acc!(*table, |buf| {
                for (r, &i) in index.iter().enumerate() {
                    add_into(&mut buf[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            })
        }
        Op::ConcatCols(a, b) => {
            let p = nodes[a.0].value.shape()[1];
            let q = nodes[b.0].value.shape()[1];
            acc!(*a, |buf| {
                for (brow, grow) in buf.chunks_mut(p).zip(g.chunks(p + q)) {
                    add_into(brow, &grow[..p]);
                }
            });
            acc!(*b, |buf| {
                for (brow, grow) in buf.chunks_mut(q).zip(g.chunks(p + q)) {
                    add_into(brow, &grow[p..]);
                }
            });
        }
        Op::PickPerRow { input, cols } => {
            let n = nodes[input.0].value.shape()[1];
            acc!(*input, |buf| {
                for (i, &c) in cols.iter().enumerate() {
                    buf[i * n + c] += g[i];
                }
            })
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), segments, *heads, probs),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (q, k, v): (Var, Var, Var),
    segments: &[(usize, usize)],
    heads: usize,
    probs: &[T],
) {
    let [n, d] = nodes[q.0].value.shape() else { unreachable!() };
    let (n, d) = (*n, *d);
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut offset = 0;
    let mut dp = Vec::new();
    for &(s, len) in segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let p = &probs[offset..offset + len];
                offset += len;
                let go = &g[(s + i) * d..][cols.clone()];
                dp.clear();
                for j in 0..len {
                    dp.push(dot(go, &vd[(s + j) * d..][cols.clone()]));
                    let dvj = &mut dv[(s + j) * d..][cols.clone()];
                    for (o, &x) in dvj.iter_mut().zip(go) {
                        *o += p[j] * x;
                    }
                }
                let pdp = dot(p, &dp);
                let qi = &qd[(s + i) * d..][cols.clone()];
                for j in 0..len {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    let kj = &kd[(s + j) * d..][cols.clone()];
                    let dqi = &mut dq[(s + i) * d..][cols.clone()];
                    for (o, &x) in dqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let dkj = &mut dk[(s + j) * d..][cols.clone()];
                    for (o, &x) in dkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    for (var, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(buf) = grad_slot(nodes, grads, var) {
            add_into(buf, &local);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.elementwise(Elementwise::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let z = tape.constant(t(&[1], &[0.0]));
        let sg = tape.elementwise(Elementwise::Sigmoid, z, None).unwrap();
        assert_eq!(tape.value(sg).data(), &[0.5]);

        let one = tape.constant(t(&[1], &[1.0]));
        let l = tape.elementwise(Elementwise::Log, one, None).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    #[test]
    fn elementwise_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let neg = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(neg), Err(TensorError::LogDomain { .. })));
        let zero = tape.constant(t(&[1], &[0.0]));
        assert!(tape.log(zero).is_err());
        assert!(tape.elementwise(Elementwise::Mul, a, None).is_err());
    }

    #[test]
    fn overflow_is_reported_not_stored() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(a), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = tape.constant(t(&[2, 1], &[2.0, 5.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
        assert!(tape.matmul(r, r).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 11.0, 12.0]));
        let s = tape.softmax_rows(x).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - d[2]).abs() < 1e-6 && (d[1] - d[3]).abs() < 1e-6);

        let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        let e = std::f32::consts::E;
        let d = tape.value(s).data();
        assert!((d[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((d[1] - 1.0 / (e + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 2], &[3.0, 4.0, 1.0, 0.0, 0.0, 0.0]));
        let n = tape.l2_normalize_rows(a).unwrap();
        assert_eq!(&tape.value(n).data()[..4], &[0.6, 0.8, 1.0, 0.0]);
        // floored zero row stays zero
        assert_eq!(&tape.value(n).data()[4..], &[0.0, 0.0]);
        assert!(matches!(tape.l2_normalize_rows_with(a, None), Err(TensorError::ZeroNorm { row: 2 })));

        let b = tape.constant(t(&[1, 4], &[2.0; 4]));
        let n = tape.l2_normalize_rows(b).unwrap();
        assert_eq!(tape.value(n).data(), &[0.5; 4]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar { .. })));

        let mut param = t(&[2], &[1.0, 2.0]).with_grad();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&param);
            let s = tape.sum(w).unwrap();
            tape.backward(s).unwrap().accumulate_into(w, &mut param).unwrap();
        }
        assert_eq!(param.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0]);
    }
}
