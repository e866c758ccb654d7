//! Reverse-mode autodiff tape.
//!
//! Operations executed through a [`Tape`] record their inputs and enough
//! forward context to replay the computation backward. Gradients are
//! accumulated (summed) wherever a value fans out into several consumers,
//! and repeated `backward` calls without a reset keep accumulating, so the
//! caller decides when a gradient buffer starts over.

use super::kernels;
use super::{Tensor, TensorError};
use std::collections::HashMap;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddN { parts: Vec<Var> },
    AddRow { a: Var, b: Var, rows: usize, n: usize },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Tanh { x: Var },
    Concat1 { parts: Vec<Var>, sizes: Vec<usize> },
    ConcatCols { parts: Vec<Var>, rows: usize, widths: Vec<usize> },
    Kron { a: Var, b: Var, p: usize, q: usize },
    SoftmaxRows { x: Var, rows: usize, n: usize },
    LogSoftmaxRows { x: Var, rows: usize, n: usize },
    InstanceNormRows { x: Var, rows: usize, n: usize, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, rows: usize, n: usize, eps: f64, norms: Vec<f64> },
    GatherRows { src: Var, idx: Vec<usize>, n: usize },
    ScatterRows { src: Var, idx: Vec<usize>, n: usize },
    RowsSlice { x: Var, r0: usize, rows: usize, n: usize },
    Reshape { x: Var },
    StackRows { parts: Vec<Var>, n: usize },
    Conv3x3S2 { x: Var, w: Var, b: Var, c_in: usize, h: usize, wdim: usize, c_out: usize, cols: Vec<f64> },
    RoiAlignMean { fmap: Var, taps: Vec<[(usize, f64); 4]>, c: usize, plane: usize },
    PairSoftmax { scores: Var, l: usize },
    PairWeightedSum { alpha: Var, vecs: Var, l: usize, d: usize },
    DropRows { x: Var, mask: Vec<bool>, n: usize },
    SmoothedNll { x: Var, weights: Vec<f64>, rows: usize },
    Sum { x: Var },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of executed operations with their tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
    acc_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let id = self.nodes.len();
        self.nodes.push(Node { shape, values, needs_grad, op });
        self.acc_grads.push(None);
        Var(id)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, values.len(), "constant shape/value mismatch");
        self.push(shape, values, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(vec![1], vec![v])
    }

    /// Records a leaf copied from a tensor; gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// original leaf so every use shares one gradient accumulator.
    pub fn bind(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        let v = self.leaf(t);
        self.by_name.insert(name.to_string(), v);
        self.bound.push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.node(v).values.len(), 1);
        self.node(v).values[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    /// Accumulated gradient for a var, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.acc_grads[v.0].as_deref()
    }

    /// Named parameters with their accumulated gradients.
    pub fn harvest(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.bound
            .iter()
            .map(|(name, v)| (name.as_str(), self.acc_grads[v.0].as_deref()))
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::RankError { op, expected: 2, shape: s.to_vec() });
        }
        Ok((s[0], s[1]))
    }

    fn rank1(&self, v: Var, op: &'static str) -> Result<usize, TensorError> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(TensorError::RankError { op, expected: 1, shape: s.to_vec() });
        }
        Ok(s[0])
    }

    // ── Operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let values = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], values, needs, Op::Matmul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let values: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), values, needs, Op::Add { a, b }))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "add_n",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let mut values = self.value(parts[0]).to_vec();
        for &p in &parts[1..] {
            for (o, v) in values.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(shape, values, needs, Op::AddN { parts: parts.to_vec() }))
    }

    /// Broadcast add of a length-n row vector onto every row of [rows x n].
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(a, "add_row")?;
        let bn = self.rank1(b, "add_row")?;
        if bn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bvals = self.value(b).to_vec();
        let values: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bvals[i % n])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![rows, n], values, needs, Op::AddRow { a, b, rows, n }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), values, needs, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), values, needs, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), values, needs, Op::Tanh { x })
    }

    /// Concatenation of rank-1 tensors.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let mut sizes = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        for &p in parts {
            let n = self.rank1(p, "concat")?;
            sizes.push(n);
            values.extend_from_slice(self.value(p));
        }
        let total = values.len();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![total], values, needs, Op::Concat1 { parts: parts.to_vec(), sizes }))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let (rows, _) = self.rank2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.rank2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..rows {
                values[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, total], values, needs, Op::ConcatCols { parts: parts.to_vec(), rows, widths }))
    }

    /// Kronecker product of two rank-1 tensors: out[i*q + j] = a[i] * b[j].
    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let p = self.rank1(a, "kron")?;
        let q = self.rank1(b, "kron")?;
        let av = self.value(a);
        let bv = self.value(b);
        let mut values = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                values[i * q + j] = av[i] * bv[j];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![p * q], values, needs, Op::Kron { a, b, p, q }))
    }

    /// Max-shifted softmax over a rank-1 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.rank1(x, "softmax")?;
        let values = kernels::softmax_rows(self.value(x), 1, n);
        let needs = self.needs(x);
        Ok(self.push(vec![n], values, needs, Op::SoftmaxRows { x, rows: 1, n }))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(x, "log_softmax_rows")?;
        let values = kernels::log_softmax_rows(self.value(x), rows, n);
        let needs = self.needs(x);
        Ok(self.push(vec![rows, n], values, needs, Op::LogSoftmaxRows { x, rows, n }))
    }

    /// Row-wise standardization to zero mean, unit variance (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(x, "instance_norm")?;
        let (values, inv_std, _) = kernels::instance_norm_rows(self.value(x), rows, n, eps);
        let needs = self.needs(x);
        Ok(self.push(vec![rows, n], values, needs, Op::InstanceNormRows { x, rows, n, inv_std }))
    }

    /// x / (||x|| + eps) for a rank-1 tensor; zero maps to zero.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let n = self.rank1(x, "l2_normalize")?;
        let (values, norms) = kernels::l2_normalize_rows(self.value(x), 1, n, eps);
        let needs = self.needs(x);
        Ok(self.push(vec![n], values, needs, Op::L2NormalizeRows { x, rows: 1, n, eps, norms }))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(x, "l2_normalize_rows")?;
        let (values, norms) = kernels::l2_normalize_rows(self.value(x), rows, n, eps);
        let needs = self.needs(x);
        Ok(self.push(vec![rows, n], values, needs, Op::L2NormalizeRows { x, rows, n, eps, norms }))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(src, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {rows} rows"),
            });
        }
        let src_vals = self.value(src);
        let mut values = vec![0.0; idx.len() * n];
        for (t, &i) in idx.iter().enumerate() {
            values[t * n..(t + 1) * n].copy_from_slice(&src_vals[i * n..(i + 1) * n]);
        }
        let needs = self.needs(src);
        Ok(self.push(vec![idx.len(), n], values, needs, Op::GatherRows { src, idx: idx.to_vec(), n }))
    }

    /// Permutation scatter: out[idx[t]] = src[t]. `idx` must be a bijection.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(src, "scatter_rows")?;
        if idx.len() != rows {
            return Err(TensorError::Invalid {
                op: "scatter_rows",
                msg: format!("index length {} does not match {} rows", idx.len(), rows),
            });
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows || seen[i] {
                return Err(TensorError::Invalid {
                    op: "scatter_rows",
                    msg: "index is not a permutation".into(),
                });
            }
            seen[i] = true;
        }
        let src_vals = self.value(src);
        let mut values = vec![0.0; rows * n];
        for (t, &i) in idx.iter().enumerate() {
            values[i * n..(i + 1) * n].copy_from_slice(&src_vals[t * n..(t + 1) * n]);
        }
        let needs = self.needs(src);
        Ok(self.push(vec![rows, n], values, needs, Op::ScatterRows { src, idx: idx.to_vec(), n }))
    }

    /// Contiguous row slice [r0, r0+rows) of a matrix.
    pub fn rows_slice(&mut self, x: Var, r0: usize, rows: usize) -> Result<Var, TensorError> {
        let (total, n) = self.rank2(x, "rows_slice")?;
        if r0 + rows > total {
            return Err(TensorError::Invalid {
                op: "rows_slice",
                msg: format!("slice {r0}..{} exceeds {total} rows", r0 + rows),
            });
        }
        let values = self.value(x)[r0 * n..(r0 + rows) * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![rows, n], values, needs, Op::RowsSlice { x, r0, rows, n }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(x), shape),
            });
        }
        let values = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, values, needs, Op::Reshape { x }))
    }

    /// Stacks rank-1 tensors of equal length into a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let n = self.rank1(parts[0], "stack_rows")?;
        let mut values = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            let pn = self.rank1(p, "stack_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![n],
                    right: vec![pn],
                });
            }
            values.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![parts.len(), n], values, needs, Op::StackRows { parts: parts.to_vec(), n }))
    }

    /// 3x3 / stride-2 / pad-1 convolution over a [c_in x h x w] input.
    pub fn conv3x3_s2(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::RankError { op: "conv3x3_s2", expected: 3, shape: xs });
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[0] {
            return Err(TensorError::ShapeMismatch { op: "conv3x3_s2", left: ws, right: xs });
        }
        let (c_in, h, wdim) = (xs[0], xs[1], xs[2]);
        let c_out = ws[0];
        if self.rank1(b, "conv3x3_s2")? != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv3x3_s2",
                left: vec![c_out],
                right: self.shape(b).to_vec(),
            });
        }
        let (values, cols) =
            kernels::conv3x3_s2(self.value(x), self.value(w), self.value(b), c_in, h, wdim, c_out);
        let (oh, ow) = kernels::conv_out_dims(h, wdim);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![c_out, oh, ow],
            values,
            needs,
            Op::Conv3x3S2 { x, w, b, c_in, h, wdim, c_out, cols },
        ))
    }

    /// Bilinear sampling at the given continuous points on every channel of
    /// a [c x h x w] feature map, averaged over the points; returns [c].
    pub fn roi_align_mean(&mut self, fmap: Var, points: &[(f64, f64)]) -> Result<Var, TensorError> {
        let fs = self.shape(fmap).to_vec();
        if fs.len() != 3 {
            return Err(TensorError::RankError { op: "roi_align_mean", expected: 3, shape: fs });
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let plane = h * w;
        let taps: Vec<[(usize, f64); 4]> = points
            .iter()
            .map(|&(x, y)| kernels::bilinear_taps(x, y, h, w))
            .collect();
        let fvals = self.value(fmap);
        let inv = 1.0 / points.len() as f64;
        let mut values = vec![0.0; c];
        for (ch, out) in values.iter_mut().enumerate() {
            let base = ch * plane;
            let mut acc = 0.0;
            for tap in &taps {
                for &(i, wt) in tap {
                    acc += fvals[base + i] * wt;
                }
            }
            *out = acc * inv;
        }
        let needs = self.needs(fmap);
        Ok(self.push(vec![c], values, needs, Op::RoiAlignMean { fmap, taps, c, plane }))
    }

    /// Softmax over each node's neighbor block. `scores` has length
    /// l * (l - 1), laid out as l blocks of the (l - 1) ordered neighbors.
    pub fn pair_softmax(&mut self, scores: Var, l: usize) -> Result<Var, TensorError> {
        let p = self.rank1(scores, "pair_softmax")?;
        if l < 2 || p != l * (l - 1) {
            return Err(TensorError::Invalid {
                op: "pair_softmax",
                msg: format!("expected {} pair scores for {l} nodes, got {p}", l * (l - 1)),
            });
        }
        let block = l - 1;
        let values = kernels::softmax_rows(self.value(scores), l, block);
        let needs = self.needs(scores);
        Ok(self.push(vec![p], values, needs, Op::PairSoftmax { scores, l }))
    }

    /// Attention-weighted neighbor aggregation: for each node i,
    /// out[i] = sum over its block of alpha[p] * vecs[p].
    pub fn pair_weighted_sum(&mut self, alpha: Var, vecs: Var, l: usize) -> Result<Var, TensorError> {
        let p = self.rank1(alpha, "pair_weighted_sum")?;
        let (pr, d) = self.rank2(vecs, "pair_weighted_sum")?;
        if p != pr || p != l * (l - 1) {
            return Err(TensorError::ShapeMismatch {
                op: "pair_weighted_sum",
                left: vec![p],
                right: vec![pr, d],
            });
        }
        let block = l - 1;
        let av = self.value(alpha);
        let vv = self.value(vecs);
        let mut values = vec![0.0; l * d];
        for i in 0..l {
            let out_row = &mut values[i * d..(i + 1) * d];
            for t in 0..block {
                let pi = i * block + t;
                let a = av[pi];
                let row = &vv[pi * d..(pi + 1) * d];
                for (o, &v) in out_row.iter_mut().zip(row) {
                    *o += a * v;
                }
            }
        }
        let needs = self.needs(alpha) || self.needs(vecs);
        Ok(self.push(vec![l, d], values, needs, Op::PairWeightedSum { alpha, vecs, l, d }))
    }

    /// Zeroes the rows selected by `mask` (feature dropout).
    pub fn drop_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(x, "drop_rows")?;
        if mask.len() != rows {
            return Err(TensorError::Invalid {
                op: "drop_rows",
                msg: format!("mask length {} does not match {rows} rows", mask.len()),
            });
        }
        let mut values = self.value(x).to_vec();
        for (r, &drop) in mask.iter().enumerate() {
            if drop {
                values[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![rows, n], values, needs, Op::DropRows { x, mask: mask.to_vec(), n }))
    }

    /// Scalar loss: -(1/rows) * sum(weights ⊙ x), with x typically a
    /// log-softmax matrix and `weights` the target distribution.
    pub fn smoothed_nll(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, TensorError> {
        let (rows, n) = self.rank2(x, "smoothed_nll")?;
        if weights.len() != rows * n {
            return Err(TensorError::Invalid {
                op: "smoothed_nll",
                msg: format!("weights length {} does not match {rows}x{n}", weights.len()),
            });
        }
        let dot: f64 = self.value(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        let loss = -dot / rows as f64;
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![loss], needs, Op::SmoothedNll { x, weights, rows }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], needs, Op::Sum { x })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar loss. Each call adds this
    /// run's gradients into the tape accumulators, so calling twice without
    /// a reset doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.node(loss).values.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if local[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let d_out = local[id].take().unwrap();
            self.backward_op(id, &d_out, &mut local);
            // Fold into the tape accumulator.
            match &mut self.acc_grads[id] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&d_out) {
                        *a += d;
                    }
                }
                None => self.acc_grads[id] = Some(d_out),
            }
        }
        Ok(())
    }

    fn backward_op(&self, id: usize, d_out: &[f64], local: &mut [Option<Vec<f64>>]) {
        let add_into = |local: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]| match &mut local[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => local[v.0] = Some(delta.to_vec()),
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut d_a = vec![0.0; m * k];
                    kernels::matmul_bt_acc(d_out, self.value(b), &mut d_a, m, n, k);
                    add_into(local, a, &d_a);
                }
                if self.needs(b) {
                    let mut d_b = vec![0.0; k * n];
                    kernels::matmul_ta_acc(self.value(a), d_out, &mut d_b, m, k, n);
                    add_into(local, b, &d_b);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    add_into(local, a, d_out);
                }
                if self.needs(b) {
                    add_into(local, b, d_out);
                }
            }
            Op::AddN { parts } => {
                for &p in parts {
                    if self.needs(p) {
                        add_into(local, p, d_out);
                    }
                }
            }
            &Op::AddRow { a, b, rows, n } => {
                if self.needs(a) {
                    add_into(local, a, d_out);
                }
                if self.needs(b) {
                    let mut d_b = vec![0.0; n];
                    for r in 0..rows {
                        for (db, dv) in d_b.iter_mut().zip(&d_out[r * n..(r + 1) * n]) {
                            *db += dv;
                        }
                    }
                    add_into(local, b, &d_b);
                }
            }
            &Op::Scale { x, c } => {
                if self.needs(x) {
                    let d: Vec<f64> = d_out.iter().map(|v| v * c).collect();
                    add_into(local, x, &d);
                }
            }
            &Op::Relu { x } => {
                if self.needs(x) {
                    let d: Vec<f64> = self
                        .value(x)
                        .iter()
                        .zip(d_out)
                        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
                        .collect();
                    add_into(local, x, &d);
                }
            }
            &Op::Tanh { x } => {
                if self.needs(x) {
                    let y = &self.nodes[id].values;
                    let d: Vec<f64> = y.iter().zip(d_out).map(|(&yv, &dv)| dv * (1.0 - yv * yv)).collect();
                    add_into(local, x, &d);
                }
            }
            Op::Concat1 { parts, sizes } => {
                let mut off = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    if self.needs(p) {
                        add_into(local, p, &d_out[off..off + sz]);
                    }
                    off += sz;
                }
            }
            Op::ConcatCols { parts, rows, widths } => {
                let rows = *rows;
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.needs(p) {
                        let mut d = vec![0.0; rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w].copy_from_slice(&d_out[r * total + off..r * total + off + w]);
                        }
                        add_into(local, p, &d);
                    }
                    off += w;
                }
            }
            &Op::Kron { a, b, p, q } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.needs(a) {
                    let mut d_a = vec![0.0; p];
                    for (i, da) in d_a.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..q {
                            acc += d_out[i * q + j] * bv[j];
                        }
                        *da = acc;
                    }
                    add_into(local, a, &d_a);
                }
                if self.needs(b) {
                    let mut d_b = vec![0.0; q];
                    for i in 0..p {
                        for j in 0..q {
                            d_b[j] += d_out[i * q + j] * av[i];
                        }
                    }
                    add_into(local, b, &d_b);
                }
            }
            &Op::SoftmaxRows { x, rows, n } => {
                if self.needs(x) {
                    let y = &self.nodes[id].values;
                    let mut d = vec![0.0; rows * n];
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &d_out[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &dv) in d[r * n..(r + 1) * n].iter_mut().zip(yr).zip(dr) {
                            *o = yv * (dv - dot);
                        }
                    }
                    add_into(local, x, &d);
                }
            }
            &Op::LogSoftmaxRows { x, rows, n } => {
                if self.needs(x) {
                    let y = &self.nodes[id].values;
                    let mut d = vec![0.0; rows * n];
                    for r in 0..rows {
                        let dr = &d_out[r * n..(r + 1) * n];
                        let s: f64 = dr.iter().sum();
                        for ((o, &ls), &dv) in d[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&y[r * n..(r + 1) * n])
                            .zip(dr)
                        {
                            *o = dv - ls.exp() * s;
                        }
                    }
                    add_into(local, x, &d);
                }
            }
            Op::InstanceNormRows { x, rows, n, inv_std } => {
                let (x, rows, n) = (*x, *rows, *n);
                if self.needs(x) {
                    let y = &self.nodes[id].values;
                    let mut d = vec![0.0; rows * n];
                    let inv_n = 1.0 / n as f64;
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &d_out[r * n..(r + 1) * n];
                        let mean_d: f64 = dr.iter().sum::<f64>() * inv_n;
                        let mean_dy: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() * inv_n;
                        let s = inv_std[r];
                        for ((o, &yv), &dv) in d[r * n..(r + 1) * n].iter_mut().zip(yr).zip(dr) {
                            *o = s * (dv - mean_d - yv * mean_dy);
                        }
                    }
                    add_into(local, x, &d);
                }
            }
            Op::L2NormalizeRows { x, rows, n, eps, norms } => {
                let (x, rows, n, eps) = (*x, *rows, *n, *eps);
                if self.needs(x) {
                    let xv = self.value(x);
                    let mut d = vec![0.0; rows * n];
                    for r in 0..rows {
                        let norm = norms[r];
                        let xr = &xv[r * n..(r + 1) * n];
                        let dr = &d_out[r * n..(r + 1) * n];
                        if norm == 0.0 {
                            continue; // subgradient 0 at the origin
                        }
                        let g = 1.0 / (norm + eps);
                        let dot: f64 = xr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        let coef = dot / (norm * (norm + eps) * (norm + eps));
                        for ((o, &xvv), &dv) in d[r * n..(r + 1) * n].iter_mut().zip(xr).zip(dr) {
                            *o = dv * g - xvv * coef;
                        }
                    }
                    add_into(local, x, &d);
                }
            }
            Op::GatherRows { src, idx, n } => {
                let (src, n) = (*src, *n);
                if self.needs(src) {
                    let rows = self.shape(src)[0];
                    let mut d = vec![0.0; rows * n];
                    for (t, &i) in idx.iter().enumerate() {
                        for (o, dv) in d[i * n..(i + 1) * n].iter_mut().zip(&d_out[t * n..(t + 1) * n]) {
                            *o += dv;
                        }
                    }
                    add_into(local, src, &d);
                }
            }
            Op::ScatterRows { src, idx, n } => {
                let (src, n) = (*src, *n);
                if self.needs(src) {
                    let mut d = vec![0.0; idx.len() * n];
                    for (t, &i) in idx.iter().enumerate() {
                        d[t * n..(t + 1) * n].copy_from_slice(&d_out[i * n..(i + 1) * n]);
                    }
                    add_into(local, src, &d);
                }
            }
            &Op::RowsSlice { x, r0, rows, n } => {
                if self.needs(x) {
                    let total = self.shape(x)[0];
                    let mut d = vec![0.0; total * n];
                    d[r0 * n..(r0 + rows) * n].copy_from_slice(d_out);
                    add_into(local, x, &d);
                }
            }
            &Op::Reshape { x } => {
                if self.needs(x) {
                    add_into(local, x, d_out);
                }
            }
            Op::StackRows { parts, n } => {
                let n = *n;
                for (t, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        add_into(local, p, &d_out[t * n..(t + 1) * n]);
                    }
                }
            }
            Op::Conv3x3S2 { x, w, b, c_in, h, wdim, c_out, cols } => {
                let (x, w, b) = (*x, *w, *b);
                let (d_x, d_w, d_b) = kernels::conv3x3_s2_backward(
                    cols,
                    self.value(w),
                    d_out,
                    *c_in,
                    *h,
                    *wdim,
                    *c_out,
                    self.needs(x),
                    self.needs(w),
                );
                if self.needs(b) {
                    add_into(local, b, &d_b);
                }
                if let Some(d_w) = d_w {
                    add_into(local, w, &d_w);
                }
                if let Some(d_x) = d_x {
                    add_into(local, x, &d_x);
                }
            }
            Op::RoiAlignMean { fmap, taps, c, plane } => {
                let (fmap, c, plane) = (*fmap, *c, *plane);
                if self.needs(fmap) {
                    let inv = 1.0 / taps.len() as f64;
                    let mut d = vec![0.0; c * plane];
                    for ch in 0..c {
                        let dv = d_out[ch] * inv;
                        let base = ch * plane;
                        for tap in taps {
                            for &(i, wt) in tap {
                                d[base + i] += dv * wt;
                            }
                        }
                    }
                    add_into(local, fmap, &d);
                }
            }
            &Op::PairSoftmax { scores, l } => {
                if self.needs(scores) {
                    let block = l - 1;
                    let y = &self.nodes[id].values;
                    let mut d = vec![0.0; l * block];
                    for r in 0..l {
                        let yr = &y[r * block..(r + 1) * block];
                        let dr = &d_out[r * block..(r + 1) * block];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &dv) in d[r * block..(r + 1) * block].iter_mut().zip(yr).zip(dr) {
                            *o = yv * (dv - dot);
                        }
                    }
                    add_into(local, scores, &d);
                }
            }
            &Op::PairWeightedSum { alpha, vecs, l, d } => {
                let block = l - 1;
                let av = self.value(alpha);
                let vv = self.value(vecs);
                if self.needs(alpha) {
                    let mut d_a = vec![0.0; l * block];
                    for i in 0..l {
                        let dr = &d_out[i * d..(i + 1) * d];
                        for t in 0..block {
                            let pi = i * block + t;
                            let row = &vv[pi * d..(pi + 1) * d];
                            d_a[pi] = row.iter().zip(dr).map(|(a, b)| a * b).sum();
                        }
                    }
                    add_into(local, alpha, &d_a);
                }
                if self.needs(vecs) {
                    let mut d_v = vec![0.0; l * block * d];
                    for i in 0..l {
                        let dr = &d_out[i * d..(i + 1) * d];
                        for t in 0..block {
                            let pi = i * block + t;
                            let a = av[pi];
                            for (o, &dv) in d_v[pi * d..(pi + 1) * d].iter_mut().zip(dr) {
                                *o = a * dv;
                            }
                        }
                    }
                    add_into(local, vecs, &d_v);
                }
            }
            Op::DropRows { x, mask, n } => {
                let (x, n) = (*x, *n);
                if self.needs(x) {
                    let mut d = d_out.to_vec();
                    for (r, &drop) in mask.iter().enumerate() {
                        if drop {
                            d[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    add_into(local, x, &d);
                }
            }
            Op::SmoothedNll { x, weights, rows } => {
                let (x, rows) = (*x, *rows);
                if self.needs(x) {
                    let scale = -d_out[0] / rows as f64;
                    let d: Vec<f64> = weights.iter().map(|&q| q * scale).collect();
                    add_into(local, x, &d);
                }
            }
            &Op::Sum { x } => {
                if self.needs(x) {
                    let d = vec![d_out[0]; self.value(x).len()];
                    add_into(local, x, &d);
                }
            }
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // kron(a, b) viewed as a p x q matrix equals the outer product
        // a b^T exactly, entry for entry.
        #[test]
        fn kron_is_exactly_the_outer_product(
            a in proptest::collection::vec(-10.0f64..10.0, 1..8),
            b in proptest::collection::vec(-10.0f64..10.0, 1..8),
        ) {
            let (p, q) = (a.len(), b.len());
            let mut tape = Tape::new();
            let av = tape.constant(vec![p], a.clone());
            let bv = tape.constant(vec![q], b.clone());
            let k = tape.kron(av, bv).unwrap();
            for i in 0..p {
                for j in 0..q {
                    prop_assert_eq!(tape.value(k)[i * q + j].to_bits(), (a[i] * b[j]).to_bits());
                }
            }
        }

        #[test]
        fn softmax_rows_always_sum_to_one(
            x in proptest::collection::vec(-50.0f64..50.0, 2..20),
        ) {
            let mut tape = Tape::new();
            let v = tape.constant(vec![x.len()], x);
            let s = tape.softmax(v).unwrap();
            let sum: f64 = tape.value(s).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(tape.value(s).iter().all(|&p| p >= 0.0));
        }
    }
}
