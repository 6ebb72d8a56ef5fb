//! Wengert tape: eager forward evaluation with operation recording, replayed
//! in reverse for gradients.
//!
//! Values are computed as operations are recorded, so every node carries its
//! forward value. `backward` walks the tape once in reverse and accumulates
//! vector-Jacobian products into every trainable leaf. Shape mismatches are
//! programmer errors and panic; non-finite values are data errors surfaced
//! through [`Tape::check_finite`].

use statrs::distribution::{ContinuousCDF, Normal};

use super::tensor::Tensor;
use super::AdError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Broadcast of the right operand in a binary elementwise op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bcast {
    /// Same shape on both sides.
    Same,
    /// rhs is a vector applied to every row of the lhs matrix.
    Row,
    /// rhs is a vector whose element i is applied across row i of the lhs.
    Col,
    /// rhs is a scalar tensor.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bin(BinKind, Var, Var, Bcast),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Matmul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    CumSumRows(Var),
    GatherRows { src: Var, idx: Vec<usize> },
    TakePerRow { src: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols { src: Var, start: usize, end: usize },
    PermuteCols { src: Var, perm: Vec<usize> },
    Reshape(Var),
    NormalCdf(Var),
    NormalIcdf(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    trainable: bool,
}

/// Gradients of a scalar output with respect to tape leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient tensor for `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn try_wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Recording tape. Single-writer; build one per evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Error if the node's forward value contains NaN/Inf.
    pub fn check_finite(&self, v: Var) -> Result<(), AdError> {
        match self.nodes[v.0].value.first_nonfinite() {
            None => Ok(()),
            Some(elem) => Err(AdError::NonFinite { node: v.0, elem }),
        }
    }

    /// First node on the tape holding a non-finite value, if any.
    pub fn first_nonfinite_node(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.all_finite())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad, trainable: false });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-trainable leaf (constant input).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, true);
        self.nodes[v.0].trainable = true;
        v
    }

    // ---- elementwise binary ----

    fn bin_shape(&self, kind: BinKind, a: Var, b: Var, bc: Bcast) -> Tensor {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = match bc {
            Bcast::Same => {
                assert_eq!(va.shape(), vb.shape(), "{kind:?}: shape mismatch");
                let mut data = va.data().to_vec();
                apply_bin(kind, &mut data, vb.data(), |i| i);
                Tensor::new(va.shape().to_vec(), data)
            }
            Bcast::Scalar => {
                assert_eq!(vb.len(), 1, "{kind:?}: scalar broadcast rhs must have 1 element");
                let s = vb.data()[0];
                let mut data = va.data().to_vec();
                apply_bin_scalar(kind, &mut data, s);
                Tensor::new(va.shape().to_vec(), data)
            }
            Bcast::Row => {
                assert_eq!(va.rank(), 2, "{kind:?}: row broadcast lhs must be a matrix");
                assert_eq!(vb.len(), va.cols(), "{kind:?}: row broadcast width mismatch");
                let cols = va.cols();
                let mut data = va.data().to_vec();
                apply_bin(kind, &mut data, vb.data(), move |i| i % cols);
                Tensor::new(va.shape().to_vec(), data)
            }
            Bcast::Col => {
                assert_eq!(va.rank(), 2, "{kind:?}: col broadcast lhs must be a matrix");
                assert_eq!(vb.len(), va.rows(), "{kind:?}: col broadcast height mismatch");
                let cols = va.cols();
                let mut data = va.data().to_vec();
                apply_bin(kind, &mut data, vb.data(), move |i| i / cols);
                Tensor::new(va.shape().to_vec(), data)
            }
        };
        out
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var, bc: Bcast) -> Var {
        let value = self.bin_shape(kind, a, b, bc);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Bin(kind, a, b, bc), value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Add, a, b, Bcast::Same)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Sub, a, b, Bcast::Same)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Mul, a, b, Bcast::Same)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Div, a, b, Bcast::Same)
    }
    /// matrix + row vector (same vector added to every row).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Add, a, b, Bcast::Row)
    }
    pub fn sub_row(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Sub, a, b, Bcast::Row)
    }
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Mul, a, b, Bcast::Row)
    }
    pub fn div_row(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Div, a, b, Bcast::Row)
    }
    /// matrix - column vector (element i subtracted across row i).
    pub fn sub_col(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Sub, a, b, Bcast::Col)
    }
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Add, a, b, Bcast::Col)
    }
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        self.bin(BinKind::Mul, a, b, Bcast::Col)
    }
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        self.bin(BinKind::Add, a, s, Bcast::Scalar)
    }
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        self.bin(BinKind::Mul, a, s, Bcast::Scalar)
    }

    // ---- unary ----

    fn unary(&mut self, op: Op, src: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[src.0].value.map(f);
        let ng = self.needs(src);
        self.push(op, value, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg(a), a, |v| -v)
    }
    /// c * a for a compile-time constant c.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |v| c * v)
    }
    /// a + c for a constant c.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Offset(a, c), a, |v| v + c)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, softplus)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |v| v * v)
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a, lo, hi), a, move |v| v.clamp(lo, hi))
    }
    /// Standard normal CDF, elementwise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        let n = std_normal();
        self.unary(Op::NormalCdf(a), a, move |v| n.cdf(v))
    }
    /// Standard normal inverse CDF (probit), elementwise.
    pub fn normal_icdf(&mut self, a: Var) -> Var {
        let n = std_normal();
        self.unary(Op::NormalIcdf(a), a, move |v| n.inverse_cdf(v))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.rank(), 2, "matmul lhs must be a matrix");
        assert_eq!(vb.rank(), 2, "matmul rhs must be a matrix");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let out = matmul_nn(va.data(), vb.data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), Tensor::matrix(m, n, out), ng)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(!v.is_empty(), "mean of empty tensor");
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(s), ng)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.rank(), 2, "sum_rows needs a matrix");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = v.data()[i * c..(i + 1) * c].iter().sum();
        }
        let ng = self.needs(a);
        self.push(Op::SumRows(a), Tensor::vector(out), ng)
    }

    /// Row-wise log-sum-exp with max subtraction.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.rank(), 2, "logsumexp_rows needs a matrix");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        assert!(c > 0, "logsumexp_rows on zero columns");
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = logsumexp(&v.data()[i * c..(i + 1) * c]);
        }
        let ng = self.needs(a);
        self.push(Op::LogSumExpRows(a), Tensor::vector(out), ng)
    }

    /// Row-wise inclusive cumulative sum.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.rank(), 2, "cumsum_rows needs a matrix");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..c {
                acc += v.data()[i * c + j];
                out[i * c + j] = acc;
            }
        }
        let ng = self.needs(a);
        self.push(Op::CumSumRows(a), Tensor::matrix(r, c, out), ng)
    }

    // ---- structural ----

    /// Select rows of a matrix (or elements of a vector) by index, with repeats.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let v = &self.nodes[src.0].value;
        let value = match v.rank() {
            1 => {
                let d = v.data();
                Tensor::vector(idx.iter().map(|&i| d[i]).collect())
            }
            2 => {
                let c = v.cols();
                let mut out = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
                }
                Tensor::matrix(idx.len(), c, out)
            }
            _ => panic!("gather_rows needs a vector or matrix"),
        };
        let ng = self.needs(src);
        self.push(Op::GatherRows { src, idx: idx.to_vec() }, value, ng)
    }

    /// out[i] = src[i, idx[i]].
    pub fn take_per_row(&mut self, src: Var, idx: &[usize]) -> Var {
        let v = &self.nodes[src.0].value;
        assert_eq!(v.rank(), 2, "take_per_row needs a matrix");
        assert_eq!(v.rows(), idx.len(), "take_per_row index length mismatch");
        let c = v.cols();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| v.data()[i * c + j]).collect();
        let ng = self.needs(src);
        self.push(Op::TakePerRow { src, idx: idx.to_vec() }, Tensor::vector(out), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.rank(), 2, "concat_cols lhs must be a matrix");
        assert_eq!(vb.rank(), 2, "concat_cols rhs must be a matrix");
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), Tensor::matrix(r, ca + cb, out), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.cols(), vb.cols(), "concat_rows col mismatch");
        assert_eq!(va.rank(), 2, "concat_rows lhs must be a matrix");
        assert_eq!(vb.rank(), 2, "concat_rows rhs must be a matrix");
        let mut out = va.data().to_vec();
        out.extend_from_slice(vb.data());
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a, b), Tensor::matrix(va.rows() + vb.rows(), va.cols(), out), ng)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Var {
        let v = &self.nodes[src.0].value;
        assert_eq!(v.rank(), 2, "slice_cols needs a matrix");
        assert!(start <= end && end <= v.cols(), "slice_cols out of range");
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&v.data()[i * c + start..i * c + end]);
        }
        let ng = self.needs(src);
        self.push(Op::SliceCols { src, start, end }, Tensor::matrix(r, end - start, out), ng)
    }

    /// out[:, j] = src[:, perm[j]].
    pub fn permute_cols(&mut self, src: Var, perm: &[usize]) -> Var {
        let v = &self.nodes[src.0].value;
        assert_eq!(v.rank(), 2, "permute_cols needs a matrix");
        assert_eq!(v.cols(), perm.len(), "permute_cols length mismatch");
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for (j, &p) in perm.iter().enumerate() {
                out[i * c + j] = v.data()[i * c + p];
            }
        }
        let ng = self.needs(src);
        self.push(Op::PermuteCols { src, perm: perm.to_vec() }, Tensor::matrix(r, c, out), ng)
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        let v = &self.nodes[src.0].value;
        let n: usize = shape.iter().product();
        assert_eq!(n, v.len(), "reshape element count mismatch");
        let value = Tensor::new(shape.to_vec(), v.data().to_vec());
        let ng = self.needs(src);
        self.push(Op::Reshape(src), value, ng)
    }

    // ---- backward ----

    /// Gradients of scalar `output` with seed 1.0.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_seeded(output, Tensor::scalar(1.0))
    }

    /// Reverse sweep from `output` with an explicit seed gradient of the same
    /// shape as the output value.
    pub fn backward_seeded(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.nodes[output.0].value.shape(),
            "seed gradient shape must match output shape"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Bin(kind, a, b, bc) => {
                let (da, db) = bin_backward(*kind, *bc, val(*a), val(*b), &self.nodes[i].value, g);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| c * v))
            }
            Op::Offset(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    let da = matmul_nt(g.data(), vb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.needs(*b) {
                    let db = matmul_tn(va.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, zip_map(g, y, |g, y| g * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, zip_map(g, y, |g, y| g * y * (1.0 - y)));
            }
            Op::Softplus(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, zip_map(g, x, |g, x| g * sigmoid(x)));
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, zip_map(g, y, |g, y| g * y));
            }
            Op::Log(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, zip_map(g, x, |g, x| g / x));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, zip_map(g, y, |g, y| g / (2.0 * y)));
            }
            Op::Square(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, zip_map(g, x, |g, x| 2.0 * x * g));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *a,
                    zip_map(g, x, |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                );
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let s = g.item() / val(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g.data()[i];
                    out[i * c..(i + 1) * c].fill(gi);
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, out));
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let y = &self.nodes[i].value;
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g.data()[i];
                    let lse = y.data()[i];
                    for j in 0..c {
                        out[i * c + j] = gi * (x.data()[i * c + j] - lse).exp();
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, out));
            }
            Op::CumSumRows(a) => {
                let x = val(*a);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in (0..c).rev() {
                        acc += g.data()[i * c + j];
                        out[i * c + j] = acc;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, out));
            }
            Op::GatherRows { src, idx } => {
                let x = val(*src);
                let mut out = Tensor::zeros(x.shape());
                match x.rank() {
                    1 => {
                        for (k, &i) in idx.iter().enumerate() {
                            out.data_mut()[i] += g.data()[k];
                        }
                    }
                    _ => {
                        let c = x.cols();
                        for (k, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                out.data_mut()[i * c + j] += g.data()[k * c + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, *src, out);
            }
            Op::TakePerRow { src, idx } => {
                let x = val(*src);
                let c = x.cols();
                let mut out = Tensor::zeros(x.shape());
                for (i, &j) in idx.iter().enumerate() {
                    out.data_mut()[i * c + j] += g.data()[i];
                }
                self.accumulate(grads, *src, out);
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                let mut da = vec![0.0; r * ca];
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    let row = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                    db[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::matrix(r, ca, da));
                self.accumulate(grads, *b, Tensor::matrix(r, cb, db));
            }
            Op::ConcatRows(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let na = va.len();
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), g.data()[..na].to_vec()),
                );
                self.accumulate(
                    grads,
                    *b,
                    Tensor::new(vb.shape().to_vec(), g.data()[na..].to_vec()),
                );
            }
            Op::SliceCols { src, start, end } => {
                let x = val(*src);
                let (r, c) = (x.rows(), x.cols());
                let w = end - start;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *src, Tensor::matrix(r, c, out));
            }
            Op::PermuteCols { src, perm } => {
                let x = val(*src);
                let (r, c) = (x.rows(), x.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for (j, &p) in perm.iter().enumerate() {
                        out[i * c + p] += g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *src, Tensor::matrix(r, c, out));
            }
            Op::Reshape(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), g.data().to_vec()));
            }
            Op::NormalCdf(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, zip_map(g, x, |g, x| g * std_normal_pdf(x)));
            }
            Op::NormalIcdf(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, zip_map(g, y, |g, y| g / std_normal_pdf(y)));
            }
        }
    }
}

fn apply_bin(kind: BinKind, a: &mut [f64], b: &[f64], bindex: impl Fn(usize) -> usize) {
    for (i, v) in a.iter_mut().enumerate() {
        let rhs = b[bindex(i)];
        *v = match kind {
            BinKind::Add => *v + rhs,
            BinKind::Sub => *v - rhs,
            BinKind::Mul => *v * rhs,
            BinKind::Div => *v / rhs,
        };
    }
}

fn apply_bin_scalar(kind: BinKind, a: &mut [f64], s: f64) {
    for v in a.iter_mut() {
        *v = match kind {
            BinKind::Add => *v + s,
            BinKind::Sub => *v - s,
            BinKind::Mul => *v * s,
            BinKind::Div => *v / s,
        };
    }
}

fn bin_backward(
    kind: BinKind,
    bc: Bcast,
    va: &Tensor,
    vb: &Tensor,
    _out: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor) {
    // Per-element partials.
    let da_elem = |i: usize, bi: usize| -> f64 {
        match kind {
            BinKind::Add | BinKind::Sub => g.data()[i],
            BinKind::Mul => g.data()[i] * vb.data()[bi],
            BinKind::Div => g.data()[i] / vb.data()[bi],
        }
    };
    let db_elem = |i: usize, bi: usize| -> f64 {
        match kind {
            BinKind::Add => g.data()[i],
            BinKind::Sub => -g.data()[i],
            BinKind::Mul => g.data()[i] * va.data()[i],
            BinKind::Div => {
                let b = vb.data()[bi];
                -g.data()[i] * va.data()[i] / (b * b)
            }
        }
    };
    let cols = va.cols();
    let bindex = |i: usize| -> usize {
        match bc {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % cols,
            Bcast::Col => i / cols,
        }
    };
    let mut da = Tensor::zeros(va.shape());
    let mut db = Tensor::zeros(vb.shape());
    for i in 0..va.len() {
        let bi = bindex(i);
        da.data_mut()[i] = da_elem(i, bi);
        db.data_mut()[bi] += db_elem(i, bi);
    }
    (da, db)
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.shape(), x.shape());
    Tensor::new(
        x.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect(),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m,n] * b[k,n]^T -> [m,k]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a[m,k]^T * b[m,n] -> [k,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
