//! Reverse-mode differentiation tape.
//!
//! Every primitive the models need is a method on [`Tape`]. A recording
//! tape appends a node whenever at least one operand is tracked; a
//! non-recording tape (the evaluation path) runs the same kernels and
//! records nothing. `backward` walks the node list in reverse exactly
//! once, accumulating adjoints by addition, so a node consumed by
//! several later ops receives the sum of their contributions.
//!
//! Only rank 0..=2 tensors and one broadcast pattern (a d-vector across
//! the rows of an L x d matrix) are supported; everything else is a
//! loud shape error.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::tensor::{NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul,
    MatmulBt,
    Matvec,
    Vecmat,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale(f64),
    Concat1d,
    ConcatCols,
    Slice { start: usize, len: usize },
    Row(usize),
    StackRows,
    Reshape,
    Softmax,
    Tanh,
    Sigmoid,
    Elu,
    Sum,
    CrossEntropy { target: usize },
    Jsd,
    GatherRows(Vec<usize>),
}

struct Node {
    op: Op,
    args: Vec<Tensor>,
    out: Tensor,
}

pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn recording() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// A tape that runs kernels without recording anything.
    pub fn eval() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: false,
            nodes: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a value as a tracked leaf. On a non-recording tape this
    /// is just a detached copy.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        let idx = self.nodes.len();
        let out = t.detached();
        self.nodes.push(Node {
            op: Op::Leaf,
            args: vec![],
            out: out.clone(),
        });
        out.with_node(NodeRef {
            tape: self.id,
            index: idx,
        })
    }

    fn check_args(&self, op: &'static str, args: &[&Tensor]) -> Result<(), TensorError> {
        for a in args {
            if let Some(n) = a.node() {
                if n.tape != self.id {
                    return Err(TensorError::ForeignTape { op });
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op, args: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let out = Tensor::raw(shape, data);
        if !self.recording || args.iter().all(|a| a.node().is_none()) {
            return out;
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            args,
            out: out.clone(),
        });
        out.with_node(NodeRef {
            tape: self.id,
            index: idx,
        })
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("matmul", &[a, b])?;
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let data = matmul_kernel(m, k, n, a.data(), b.data());
        Ok(self.push(Op::Matmul, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    /// [m,k] x [n,k] -> [m,n]: rows of `a` against rows of `b`, i.e.
    /// a . b^T without materializing the transpose. This is the
    /// row-wise affine application pattern.
    pub fn matmul_bt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("matmul_bt", &[a, b])?;
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, slot) in orow.iter_mut().enumerate() {
                let brow = &bd[o * k..(o + 1) * k];
                let mut acc = 0.0;
                for j in 0..k {
                    acc += arow[j] * brow[j];
                }
                *slot = acc;
            }
        }
        Ok(self.push(Op::MatmulBt, vec![a.clone(), b.clone()], vec![m, n], out))
    }

    /// [m,k] x [k] -> [m]
    pub fn matvec(&mut self, a: &Tensor, x: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("matvec", &[a, x])?;
        if a.rank() != 2 || x.rank() != 1 || a.cols() != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: a.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let (m, k) = (a.rows(), a.cols());
        let ad = a.data();
        let xd = x.data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &ad[i * k..(i + 1) * k];
            let mut acc = 0.0;
            for j in 0..k {
                acc += row[j] * xd[j];
            }
            out[i] = acc;
        }
        Ok(self.push(Op::Matvec, vec![a.clone(), x.clone()], vec![m], out))
    }

    /// [k] x [k,n] -> [n]; used for attention-weighted row sums.
    pub fn vecmat(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("vecmat", &[x, b])?;
        if x.rank() != 1 || b.rank() != 2 || x.len() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "vecmat",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (k, n) = (b.rows(), b.cols());
        let xd = x.data();
        let bd = b.data();
        let mut out = vec![0.0; n];
        for i in 0..k {
            let xi = xd[i];
            let row = &bd[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += xi * row[j];
            }
        }
        Ok(self.push(Op::Vecmat, vec![x.clone(), b.clone()], vec![n], out))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("transpose", &[a])?;
        if a.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "rank-2 tensor",
                got: a.shape().to_vec(),
            });
        }
        let (m, n) = (a.rows(), a.cols());
        let data = transpose_kernel(m, n, a.data());
        Ok(self.push(Op::Transpose, vec![a.clone()], vec![n, m], data))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op: Op,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.check_args(name, &[a, b])?;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op, vec![a.clone(), b.clone()], a.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_same_shape(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_same_shape(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_same_shape(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        op: Op,
        name: &'static str,
        m: &Tensor,
        v: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.check_args(name, &[m, v])?;
        if m.rank() != 2 || v.rank() != 1 || m.cols() != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: m.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let (rows, cols) = (m.rows(), m.cols());
        let md = m.data();
        let vd = v.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = f(md[i * cols + j], vd[j]);
            }
        }
        Ok(self.push(op, vec![m.clone(), v.clone()], vec![rows, cols], data))
    }

    /// [L,d] + [d], the vector added to every row.
    pub fn add_row(&mut self, m: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
        self.row_broadcast(Op::AddRow, "add_row", m, v, |x, y| x + y)
    }

    /// [L,d] * [d] elementwise per row.
    pub fn mul_row(&mut self, m: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
        self.row_broadcast(Op::MulRow, "mul_row", m, v, |x, y| x * y)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        self.check_args("scale", &[a])?;
        let data: Vec<f64> = a.data().iter().map(|&x| c * x).collect();
        Ok(self.push(Op::Scale(c), vec![a.clone()], a.shape().to_vec(), data))
    }

    // ── layout ──────────────────────────────────────────────────────

    pub fn concat1d(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("concat1d", &[a, b])?;
        if a.rank() != 1 || b.rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "concat1d",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let n = data.len();
        Ok(self.push(Op::Concat1d, vec![a.clone(), b.clone()], vec![n], data))
    }

    /// [L,p] | [L,q] -> [L,p+q], rows concatenated side by side.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("concat_cols", &[a, b])?;
        if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (rows, p, q) = (a.rows(), a.cols(), b.cols());
        let mut data = Vec::with_capacity(rows * (p + q));
        for i in 0..rows {
            data.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
        }
        Ok(self.push(
            Op::ConcatCols,
            vec![a.clone(), b.clone()],
            vec![rows, p + q],
            data,
        ))
    }

    pub fn slice(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        self.check_args("slice", &[a])?;
        if a.rank() != 1 || start + len > a.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: a.len(),
            });
        }
        let data = a.data()[start..start + len].to_vec();
        Ok(self.push(Op::Slice { start, len }, vec![a.clone()], vec![len], data))
    }

    /// Extract row i of a rank-2 tensor as a vector.
    pub fn row(&mut self, a: &Tensor, i: usize) -> Result<Tensor, TensorError> {
        self.check_args("row", &[a])?;
        if a.rank() != 2 || i >= a.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index: i,
                len: if a.rank() == 2 { a.rows() } else { 0 },
            });
        }
        let cols = a.cols();
        let data = a.data()[i * cols..(i + 1) * cols].to_vec();
        Ok(self.push(Op::Row(i), vec![a.clone()], vec![cols], data))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::BadShape {
                op: "stack_rows",
                expected: "at least one row",
                got: vec![0],
            });
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        self.check_args("stack_rows", &refs)?;
        let cols = rows[0].len();
        for r in rows {
            if r.rank() != 1 || r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![cols],
                    rhs: r.shape().to_vec(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r.data());
        }
        Ok(self.push(
            Op::StackRows,
            rows.to_vec(),
            vec![rows.len(), cols],
            data,
        ))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        self.check_args("reshape", &[a])?;
        if shape.iter().product::<usize>() != a.len() {
            return Err(TensorError::DataShapeMismatch {
                shape: shape.to_vec(),
                len: a.len(),
            });
        }
        let data = a.data().to_vec();
        Ok(self.push(Op::Reshape, vec![a.clone()], shape.to_vec(), data))
    }

    // ── nonlinear ───────────────────────────────────────────────────

    /// Numerically stable softmax over a vector (max subtraction).
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("softmax", &[a])?;
        if a.rank() != 1 {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: "rank-1 tensor",
                got: a.shape().to_vec(),
            });
        }
        if a.is_empty() {
            return Err(TensorError::EmptySoftmax);
        }
        let data = softmax_kernel(a.data());
        Ok(self.push(Op::Softmax, vec![a.clone()], vec![a.len()], data))
    }

    fn unary(
        &mut self,
        op: Op,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.check_args("unary", &[a])?;
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        Ok(self.push(op, vec![a.clone()], a.shape().to_vec(), data))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(Op::Sigmoid, a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(Op::Elu, a, |x| if x > 0.0 { x } else { x.exp() - 1.0 })
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("sum", &[a])?;
        let s: f64 = a.data().iter().sum();
        Ok(self.push(Op::Sum, vec![a.clone()], vec![], vec![s]))
    }

    /// Cross-entropy of a logit vector against a class index,
    /// computed as logsumexp(z) - z[target].
    pub fn cross_entropy(&mut self, logits: &Tensor, target: usize) -> Result<Tensor, TensorError> {
        self.check_args("cross_entropy", &[logits])?;
        if logits.rank() != 1 || logits.is_empty() {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: "non-empty rank-1 logits",
                got: logits.shape().to_vec(),
            });
        }
        if target >= logits.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                len: logits.len(),
            });
        }
        let z = logits.data();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        Ok(self.push(
            Op::CrossEntropy { target },
            vec![logits.clone()],
            vec![],
            vec![loss],
        ))
    }

    /// Base-2 Jensen-Shannon divergence between two probability
    /// vectors. 0*log(0/x) terms are 0. Inputs are assumed to come from
    /// softmax; the validated metric lives in `metrics::jsd`.
    pub fn jsd(&mut self, p: &Tensor, q: &Tensor) -> Result<Tensor, TensorError> {
        self.check_args("jsd", &[p, q])?;
        if p.rank() != 1 || q.rank() != 1 || p.len() != q.len() {
            return Err(TensorError::ShapeMismatch {
                op: "jsd",
                lhs: p.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        let v = jsd_kernel(p.data(), q.data());
        Ok(self.push(Op::Jsd, vec![p.clone(), q.clone()], vec![], vec![v]))
    }

    /// Look up rows of an embedding table: [V,e] gathered at `ids`
    /// gives [len(ids), e].
    pub fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor, TensorError> {
        self.check_args("gather_rows", &[table])?;
        if table.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                expected: "rank-2 table",
                got: table.shape().to_vec(),
            });
        }
        let (v, e) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&table.data()[id * e..(id + 1) * e]);
        }
        Ok(self.push(
            Op::GatherRows(ids.to_vec()),
            vec![table.clone()],
            vec![ids.len(), e],
            data,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns one adjoint buffer per
    /// tape node; query with [`Gradients::get`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let node = loss.node().ok_or(TensorError::NotTracked)?;
        if node.tape != self.id {
            return Err(TensorError::ForeignTape { op: "backward" });
        }
        if !loss.is_scalar_shaped() {
            return Err(TensorError::LossNotScalar {
                got: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[node.index] = Some(vec![1.0]);

        for i in (0..=node.index).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            entries: grads,
        })
    }

    fn vjp(&self, index: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[index];
        // Adds `contrib` into the adjoint slot of argument `arg_i`, if
        // that argument is tracked.
        macro_rules! accum {
            ($arg_i:expr, $contrib:expr) => {
                if let Some(nref) = node.args[$arg_i].node() {
                    let slot = grads[nref.index]
                        .get_or_insert_with(|| vec![0.0; self.nodes[nref.index].out.len()]);
                    let contrib: &[f64] = $contrib;
                    for (s, c) in slot.iter_mut().zip(contrib.iter()) {
                        *s += c;
                    }
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let a = &node.args[0];
                let b = &node.args[1];
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if node.args[0].is_tracked() {
                    // dA = g . B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &b.data()[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    accum!(0, &da);
                }
                if node.args[1].is_tracked() {
                    // dB = A^T . g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = a.data()[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    accum!(1, &db);
                }
            }
            Op::MatmulBt => {
                // out = A . B^T with A [m,k], B [n,k], g [m,n].
                let a = &node.args[0];
                let b = &node.args[1];
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                if a.is_tracked() {
                    // dA = g . B
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (o, &go) in grow.iter().enumerate() {
                            let brow = &b.data()[o * k..(o + 1) * k];
                            for j in 0..k {
                                darow[j] += go * brow[j];
                            }
                        }
                    }
                    accum!(0, &da);
                }
                if b.is_tracked() {
                    // dB = g^T . A
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &a.data()[i * k..(i + 1) * k];
                        for (o, &go) in grow.iter().enumerate() {
                            let dbrow = &mut db[o * k..(o + 1) * k];
                            for j in 0..k {
                                dbrow[j] += go * arow[j];
                            }
                        }
                    }
                    accum!(1, &db);
                }
            }
            Op::Matvec => {
                let a = &node.args[0];
                let x = &node.args[1];
                let (m, k) = (a.rows(), a.cols());
                if a.is_tracked() {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = g[i];
                        for j in 0..k {
                            da[i * k + j] = gi * x.data()[j];
                        }
                    }
                    accum!(0, &da);
                }
                if x.is_tracked() {
                    let mut dx = vec![0.0; k];
                    for i in 0..m {
                        let gi = g[i];
                        let row = &a.data()[i * k..(i + 1) * k];
                        for j in 0..k {
                            dx[j] += gi * row[j];
                        }
                    }
                    accum!(1, &dx);
                }
            }
            Op::Vecmat => {
                let x = &node.args[0];
                let b = &node.args[1];
                let (k, n) = (b.rows(), b.cols());
                if x.is_tracked() {
                    let mut dx = vec![0.0; k];
                    for i in 0..k {
                        let row = &b.data()[i * n..(i + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += row[j] * g[j];
                        }
                        dx[i] = acc;
                    }
                    accum!(0, &dx);
                }
                if b.is_tracked() {
                    let mut db = vec![0.0; k * n];
                    for i in 0..k {
                        let xi = x.data()[i];
                        for j in 0..n {
                            db[i * n + j] = xi * g[j];
                        }
                    }
                    accum!(1, &db);
                }
            }
            Op::Transpose => {
                let a = &node.args[0];
                let (m, n) = (a.rows(), a.cols());
                // g has shape [n,m]; transpose back.
                let da = transpose_kernel(n, m, g);
                accum!(0, &da);
            }
            Op::Add => {
                accum!(0, g);
                accum!(1, g);
            }
            Op::Sub => {
                accum!(0, g);
                if node.args[1].is_tracked() {
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    accum!(1, &neg);
                }
            }
            Op::Mul => {
                if node.args[0].is_tracked() {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(node.args[1].data().iter())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    accum!(0, &da);
                }
                if node.args[1].is_tracked() {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(node.args[0].data().iter())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    accum!(1, &db);
                }
            }
            Op::AddRow => {
                let cols = node.args[1].len();
                let rows = node.args[0].rows();
                accum!(0, g);
                if node.args[1].is_tracked() {
                    let mut dv = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dv[j] += g[i * cols + j];
                        }
                    }
                    accum!(1, &dv);
                }
            }
            Op::MulRow => {
                let m = &node.args[0];
                let v = &node.args[1];
                let (rows, cols) = (m.rows(), m.cols());
                if m.is_tracked() {
                    let mut dm = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dm[i * cols + j] = g[i * cols + j] * v.data()[j];
                        }
                    }
                    accum!(0, &dm);
                }
                if v.is_tracked() {
                    let mut dv = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dv[j] += g[i * cols + j] * m.data()[i * cols + j];
                        }
                    }
                    accum!(1, &dv);
                }
            }
            Op::Scale(c) => {
                if node.args[0].is_tracked() {
                    let da: Vec<f64> = g.iter().map(|&x| c * x).collect();
                    accum!(0, &da);
                }
            }
            Op::Concat1d => {
                let la = node.args[0].len();
                accum!(0, &g[..la]);
                accum!(1, &g[la..]);
            }
            Op::ConcatCols => {
                let (rows, p) = (node.args[0].rows(), node.args[0].cols());
                let q = node.args[1].cols();
                if node.args[0].is_tracked() {
                    let mut da = vec![0.0; rows * p];
                    for i in 0..rows {
                        da[i * p..(i + 1) * p]
                            .copy_from_slice(&g[i * (p + q)..i * (p + q) + p]);
                    }
                    accum!(0, &da);
                }
                if node.args[1].is_tracked() {
                    let mut db = vec![0.0; rows * q];
                    for i in 0..rows {
                        db[i * q..(i + 1) * q]
                            .copy_from_slice(&g[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                    accum!(1, &db);
                }
            }
            Op::Slice { start, len } => {
                if node.args[0].is_tracked() {
                    let mut da = vec![0.0; node.args[0].len()];
                    da[*start..start + len].copy_from_slice(g);
                    accum!(0, &da);
                }
            }
            Op::Row(i) => {
                if node.args[0].is_tracked() {
                    let cols = node.args[0].cols();
                    let mut da = vec![0.0; node.args[0].len()];
                    da[i * cols..(i + 1) * cols].copy_from_slice(g);
                    accum!(0, &da);
                }
            }
            Op::StackRows => {
                let cols = node.out.cols();
                for (r, arg) in node.args.iter().enumerate() {
                    if arg.is_tracked() {
                        accum!(r, &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Reshape => {
                accum!(0, g);
            }
            Op::Softmax => {
                if node.args[0].is_tracked() {
                    let y = node.out.data();
                    let dot: f64 = g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).sum();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gi, &yi)| yi * (gi - dot))
                        .collect();
                    accum!(0, &da);
                }
            }
            Op::Tanh => {
                if node.args[0].is_tracked() {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(node.out.data().iter())
                        .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                        .collect();
                    accum!(0, &da);
                }
            }
            Op::Sigmoid => {
                if node.args[0].is_tracked() {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(node.out.data().iter())
                        .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accum!(0, &da);
                }
            }
            Op::Elu => {
                if node.args[0].is_tracked() {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(node.args[0].data().iter())
                        .zip(node.out.data().iter())
                        .map(|((&gi, &xi), &yi)| if xi > 0.0 { gi } else { gi * (yi + 1.0) })
                        .collect();
                    accum!(0, &da);
                }
            }
            Op::Sum => {
                if node.args[0].is_tracked() {
                    let da = vec![g[0]; node.args[0].len()];
                    accum!(0, &da);
                }
            }
            Op::CrossEntropy { target } => {
                if node.args[0].is_tracked() {
                    let p = softmax_kernel(node.args[0].data());
                    let mut da: Vec<f64> = p.iter().map(|&pi| g[0] * pi).collect();
                    da[*target] -= g[0];
                    accum!(0, &da);
                }
            }
            Op::Jsd => {
                let p = node.args[0].data();
                let q = node.args[1].data();
                if node.args[0].is_tracked() {
                    let dp: Vec<f64> = p
                        .iter()
                        .zip(q.iter())
                        .map(|(&pi, &qi)| g[0] * jsd_partial(pi, qi))
                        .collect();
                    accum!(0, &dp);
                }
                if node.args[1].is_tracked() {
                    let dq: Vec<f64> = p
                        .iter()
                        .zip(q.iter())
                        .map(|(&pi, &qi)| g[0] * jsd_partial(qi, pi))
                        .collect();
                    accum!(1, &dq);
                }
            }
            Op::GatherRows(ids) => {
                if node.args[0].is_tracked() {
                    let e = node.args[0].cols();
                    let mut dt = vec![0.0; node.args[0].len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            dt[id * e + j] += g[r * e + j];
                        }
                    }
                    accum!(0, &dt);
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    entries: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. Tracked tensors that
    /// did not influence the loss get a zero gradient of their shape.
    pub fn get(&self, t: &Tensor) -> Result<Tensor, TensorError> {
        let node = t.node().ok_or(TensorError::NotTracked)?;
        if node.tape != self.tape {
            return Err(TensorError::ForeignTape { op: "gradients" });
        }
        match &self.entries[node.index] {
            Some(g) => Ok(Tensor::raw(t.shape().to_vec(), g.clone())),
            None => Ok(Tensor::zeros(t.shape())),
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────

fn matmul_kernel(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_kernel(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn softmax_kernel(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for x in &mut out {
        *x /= s;
    }
    out
}

/// Base-2 JSD; 0*log 0 terms are treated as 0.
pub(crate) fn jsd_kernel(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        acc += jsd_term(a, b) + jsd_term(b, a);
    }
    0.5 * acc
}

fn jsd_term(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        a * (2.0 * a / (a + b)).log2()
    } else {
        0.0
    }
}

/// d JSD / d p_s = log2(2 p_s / (p_s + q_s)) / 2 for p_s > 0.
fn jsd_partial(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        0.5 * (2.0 * p / (p + q)).log2()
    } else {
        0.0
    }
}
