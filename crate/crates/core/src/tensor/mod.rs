//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The engine records every primitive on a [`Tape`]; [`Tensor`] is a cheap
//! handle into that tape. Backward replays the recorded operations once, in
//! reverse topological order, accumulating gradients additively into every
//! node that requires them. There is no graph optimization: the tape is meant
//! to be small enough to audit.
//!
//! All math is 64-bit and sequential with fixed reduction order, so a given
//! program produces bit-identical values and gradients on every run.

mod fd;
pub(crate) mod kernels;

pub use fd::finite_diff_grad;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// A plain tensor value: shape plus row-major data, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn flat_index(&self, indices: &[usize]) -> Result<usize> {
        if indices.len() != self.shape.len() {
            return Err(Error::Index(format!(
                "index {:?} has wrong rank for shape {:?}",
                indices, self.shape
            )));
        }
        let mut flat = 0;
        for (i, (&idx, &dim)) in indices.iter().zip(&self.shape).enumerate() {
            if idx >= dim {
                return Err(Error::Index(format!(
                    "index {:?} out of range for shape {:?} at axis {}",
                    indices, self.shape, i
                )));
            }
            flat = flat * dim + idx;
        }
        Ok(flat)
    }
}

/// Recorded primitive. Variants carry whatever the backward rule needs.
enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    /// a reshaped to [m,k] times b [k,n].
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Row softmax over the last axis; node value holds the probabilities.
    Softmax {
        a: usize,
    },
    /// Per-row negative log-likelihood of the target id; probs saved.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Row gather from a [V,D] table.
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    /// Fused causal multi-head self-attention; softmaxed scores saved.
    Attention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
    Sum {
        a: usize,
    },
    /// Scalar pick of one element.
    Index {
        a: usize,
        flat: usize,
    },
    /// Last-axis gather: out[..., j] = a[..., map[j]].
    RemapLastAxis {
        a: usize,
        map: Vec<usize>,
    },
}

struct Node {
    value: TensorData,
    /// Persistent accumulator, present iff `requires_grad`.
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
}

/// The recording tape. Cloning is cheap; clones share the same storage.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// A trainable leaf: gradients accumulate here.
    pub fn leaf(&self, value: TensorData) -> Tensor {
        self.push(value, true, Op::Leaf)
    }

    /// A constant: value participates in the forward pass, gradient does not flow.
    pub fn constant(&self, value: TensorData) -> Tensor {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar_constant(&self, v: f64) -> Tensor {
        self.constant(TensorData::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reset every gradient accumulator to zero.
    pub fn zero_grads(&self) {
        for node in &mut self.inner.borrow_mut().nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&self, value: TensorData, requires_grad: bool, op: Op) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let grad = requires_grad.then(|| vec![0.0; value.numel()]);
        inner.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Tensor {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    fn same_tape(&self, other: &Tape) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.inner) {
            Ok(())
        } else {
            Err(Error::Contract(
                "operands live on different tapes".to_string(),
            ))
        }
    }
}

/// Handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].value.shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.idx].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    /// Clone of the node's value, detached from the tape.
    pub fn value(&self) -> TensorData {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        debug_assert!(v.is_scalar());
        v.item()
    }

    /// Accumulated gradient; `None` when the node does not require one.
    pub fn grad(&self) -> Option<TensorData> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        node.grad.as_ref().map(|g| TensorData {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn with_value<R>(&self, f: impl FnOnce(&TensorData) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    fn binary_shapes(&self, rhs: &Tensor, op: &'static str) -> Result<(Vec<usize>, Vec<usize>)> {
        self.tape.same_tape(&rhs.tape)?;
        let lhs_shape = self.shape();
        let rhs_shape = rhs.shape();
        if lhs_shape != rhs_shape {
            return Err(Error::Shape {
                op,
                lhs: lhs_shape,
                rhs: rhs_shape,
            });
        }
        Ok((lhs_shape, rhs_shape))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, _) = self.binary_shapes(rhs, "add")?;
        let data = self.with_value(|a| {
            rhs.with_value(|b| a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
        });
        let req = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            TensorData { shape, data },
            req,
            Op::Add {
                a: self.idx,
                b: rhs.idx,
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, _) = self.binary_shapes(rhs, "sub")?;
        let data = self.with_value(|a| {
            rhs.with_value(|b| a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect())
        });
        let req = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            TensorData { shape, data },
            req,
            Op::Sub {
                a: self.idx,
                b: rhs.idx,
            },
        ))
    }

    /// Elementwise product. Multiplying by a zero constant yields an exact
    /// zero contribution in both value and gradient.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (shape, _) = self.binary_shapes(rhs, "mul")?;
        let data = self.with_value(|a| {
            rhs.with_value(|b| a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
        });
        let req = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            TensorData { shape, data },
            req,
            Op::Mul {
                a: self.idx,
                b: rhs.idx,
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let value = self.with_value(|a| TensorData {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| x * c).collect(),
        });
        self.tape
            .push(value, self.requires_grad(), Op::Scale { a: self.idx, c })
    }

    /// `self` with last axis k (leading axes flattened) times `rhs` [k,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.tape.same_tape(&rhs.tape)?;
        let lhs_shape = self.shape();
        let rhs_shape = rhs.shape();
        let valid = lhs_shape.len() >= 2
            && rhs_shape.len() == 2
            && lhs_shape.last() == Some(&rhs_shape[0]);
        if !valid {
            return Err(Error::Shape {
                op: "matmul",
                lhs: lhs_shape,
                rhs: rhs_shape,
            });
        }
        let k = rhs_shape[0];
        let n = rhs_shape[1];
        let m = lhs_shape[..lhs_shape.len() - 1].iter().product();
        let mut data = vec![0.0; m * n];
        self.with_value(|a| {
            rhs.with_value(|b| kernels::matmul_nn_acc(&a.data, &b.data, &mut data, m, k, n))
        });
        let mut shape = lhs_shape;
        *shape.last_mut().unwrap() = n;
        let req = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            TensorData { shape, data },
            req,
            Op::Matmul {
                a: self.idx,
                b: rhs.idx,
                m,
                k,
                n,
            },
        ))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let value = self.with_value(|a| {
            let width = a.last_dim();
            let mut data = a.data.clone();
            for row in data.chunks_mut(width) {
                kernels::softmax_row_inplace(row);
            }
            TensorData {
                shape: a.shape.clone(),
                data,
            }
        });
        self.tape
            .push(value, self.requires_grad(), Op::Softmax { a: self.idx })
    }

    /// Per-row `-log softmax(logits)[target]`, via log-sum-exp. The last axis
    /// is the vocabulary; one target id per remaining row.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let logits_shape = self.shape();
        let width = *logits_shape.last().ok_or_else(|| {
            Error::Contract("cross_entropy requires at least one axis".to_string())
        })?;
        let rows: usize = logits_shape[..logits_shape.len() - 1].iter().product();
        if targets.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} target ids for {} rows",
                targets.len(),
                rows
            )));
        }
        for (r, &t) in targets.iter().enumerate() {
            if t >= width {
                return Err(Error::Index(format!(
                    "cross_entropy: target id {} out of range [0, {}) at row {}",
                    t, width, r
                )));
            }
        }
        let (losses, probs) = self.with_value(|a| {
            let mut losses = Vec::with_capacity(rows);
            let mut probs = a.data.clone();
            for (r, row) in probs.chunks_mut(width).enumerate() {
                let lse = kernels::log_sum_exp(row);
                losses.push(lse - row[targets[r]]);
                kernels::softmax_row_inplace(row);
            }
            (losses, probs)
        });
        let out_shape = logits_shape[..logits_shape.len() - 1].to_vec();
        Ok(self.tape.push(
            TensorData {
                shape: out_shape,
                data: losses,
            },
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.idx,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Value-identical tensor through which no gradient flows.
    pub fn stop_gradient(&self) -> Tensor {
        self.tape.constant(self.value())
    }

    /// Row gather from a [V,D] table; output shape is `leading + [D]`.
    pub fn embed(&self, ids: &[usize], leading: &[usize]) -> Result<Tensor> {
        let table_shape = self.shape();
        if table_shape.len() != 2 {
            return Err(Error::Contract(format!(
                "embed: table must be 2-D, got {table_shape:?}"
            )));
        }
        let (vocab, dim) = (table_shape[0], table_shape[1]);
        let rows: usize = leading.iter().product();
        if rows != ids.len() {
            return Err(Error::Contract(format!(
                "embed: leading shape {:?} implies {} ids, got {}",
                leading,
                rows,
                ids.len()
            )));
        }
        let mut data = vec![0.0; rows * dim];
        self.with_value(|t| -> Result<()> {
            for (r, &id) in ids.iter().enumerate() {
                if id >= vocab {
                    return Err(Error::Index(format!(
                        "embed: token id {id} out of range [0, {vocab}) at row {r}"
                    )));
                }
                data[r * dim..(r + 1) * dim].copy_from_slice(&t.data[id * dim..(id + 1) * dim]);
            }
            Ok(())
        })?;
        let mut shape = leading.to_vec();
        shape.push(dim);
        Ok(self.tape.push(
            TensorData { shape, data },
            self.requires_grad(),
            Op::Embedding {
                table: self.idx,
                ids: ids.to_vec(),
            },
        ))
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Result<Tensor> {
        self.tape.same_tape(&gain.tape)?;
        let x_shape = self.shape();
        let gain_shape = gain.shape();
        let width = x_shape.last().copied().unwrap_or(0);
        if gain_shape != [width] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: x_shape,
                rhs: gain_shape,
            });
        }
        let rows = self.numel() / width;
        let mut inv_rms = Vec::with_capacity(rows);
        let data = self.with_value(|x| {
            gain.with_value(|g| {
                let mut out = vec![0.0; x.data.len()];
                for r in 0..rows {
                    let row = &x.data[r * width..(r + 1) * width];
                    let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / width as f64;
                    let inv = 1.0 / (mean_sq + eps).sqrt();
                    inv_rms.push(inv);
                    for j in 0..width {
                        out[r * width + j] = row[j] * inv * g.data[j];
                    }
                }
                out
            })
        });
        let req = self.requires_grad() || gain.requires_grad();
        Ok(self.tape.push(
            TensorData {
                shape: x_shape,
                data,
            },
            req,
            Op::RmsNorm {
                x: self.idx,
                gain: gain.idx,
                inv_rms,
            },
        ))
    }

    pub fn gelu(&self) -> Tensor {
        let value = self.with_value(|a| TensorData {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| kernels::gelu(x)).collect(),
        });
        self.tape
            .push(value, self.requires_grad(), Op::Gelu { a: self.idx })
    }

    /// Causal multi-head self-attention over [B,T,D] inputs, heads packed
    /// along the feature axis. Position i attends to positions <= i only.
    pub fn causal_attention(&self, key: &Tensor, val: &Tensor, n_heads: usize) -> Result<Tensor> {
        self.tape.same_tape(&key.tape)?;
        self.tape.same_tape(&val.tape)?;
        let q_shape = self.shape();
        if q_shape.len() != 3 || key.shape() != q_shape || val.shape() != q_shape {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: q_shape,
                rhs: key.shape(),
            });
        }
        let (b, t, d) = (q_shape[0], q_shape[1], q_shape[2]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Contract(format!(
                "causal_attention: feature dim {d} not divisible by {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * n_heads * t * t];
        let mut out = vec![0.0; b * t * d];
        self.with_value(|q| {
            key.with_value(|k| {
                val.with_value(|v| {
                    for bi in 0..b {
                        for h in 0..n_heads {
                            let col = h * dh;
                            for i in 0..t {
                                let q_row = &q.data[(bi * t + i) * d + col..][..dh];
                                let p_row = &mut probs
                                    [((bi * n_heads + h) * t + i) * t..][..t];
                                for j in 0..=i {
                                    let k_row = &k.data[(bi * t + j) * d + col..][..dh];
                                    let mut s = 0.0;
                                    for l in 0..dh {
                                        s += q_row[l] * k_row[l];
                                    }
                                    p_row[j] = s * scale;
                                }
                                kernels::softmax_row_inplace(&mut p_row[..=i]);
                                let o_row = &mut out[(bi * t + i) * d + col..][..dh];
                                for j in 0..=i {
                                    let p = p_row[j];
                                    let v_row = &v.data[(bi * t + j) * d + col..][..dh];
                                    for l in 0..dh {
                                        o_row[l] += p * v_row[l];
                                    }
                                }
                            }
                        }
                    }
                })
            })
        });
        let req = self.requires_grad() || key.requires_grad() || val.requires_grad();
        Ok(self.tape.push(
            TensorData {
                shape: q_shape,
                data: out,
            },
            req,
            Op::Attention {
                q: self.idx,
                k: key.idx,
                v: val.idx,
                n_heads,
                probs,
            },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.with_value(|a| a.data.iter().sum());
        self.tape.push(
            TensorData::scalar(total),
            self.requires_grad(),
            Op::Sum { a: self.idx },
        )
    }

    /// Scalar pick of a single element by full index.
    pub fn at(&self, indices: &[usize]) -> Result<Tensor> {
        let (flat, v) = self.with_value(|a| a.flat_index(indices).map(|f| (f, a.data[f])))?;
        Ok(self.tape.push(
            TensorData::scalar(v),
            self.requires_grad(),
            Op::Index { a: self.idx, flat },
        ))
    }

    /// Last-axis gather: out[..., j] = self[..., map[j]]. Duplicating an
    /// entry ties the corresponding output coordinates to one source.
    pub fn remap_last_axis(&self, map: &[usize]) -> Result<Tensor> {
        let in_shape = self.shape();
        let width = *in_shape
            .last()
            .ok_or_else(|| Error::Contract("remap_last_axis requires an axis".to_string()))?;
        for &m in map {
            if m >= width {
                return Err(Error::Index(format!(
                    "remap_last_axis: source {m} out of range [0, {width})"
                )));
            }
        }
        let rows = self.numel() / width;
        let mut data = vec![0.0; rows * map.len()];
        self.with_value(|a| {
            for r in 0..rows {
                for (j, &m) in map.iter().enumerate() {
                    data[r * map.len() + j] = a.data[r * width + m];
                }
            }
        });
        let mut shape = in_shape;
        *shape.last_mut().unwrap() = map.len();
        Ok(self.tape.push(
            TensorData { shape, data },
            self.requires_grad(),
            Op::RemapLastAxis {
                a: self.idx,
                map: map.to_vec(),
            },
        ))
    }

    /// Reverse pass from this scalar. Leaf gradients accumulate; call
    /// [`Tape::zero_grads`] between optimizer steps.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.idx].value;
            if !v.is_scalar() {
                return Err(Error::Contract(format!(
                    "backward requires a scalar, got shape {:?}",
                    v.shape
                )));
            }
        }
        let mut inner = self.tape.inner.borrow_mut();
        let inner = &mut *inner;
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.idx + 1];
        local[self.idx] = Some(vec![1.0]);
        for idx in (0..=self.idx).rev() {
            let Some(g) = local[idx].take() else { continue };
            propagate(&inner.nodes, idx, &g, &mut local);
            if let Some(acc) = &mut inner.nodes[idx].grad {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
        }
        Ok(())
    }
}

/// Add `g` (the cotangent of node `idx`) into the pass-local buffers of the
/// node's parents, per the recorded op's backward rule.
fn propagate(nodes: &[Node], idx: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    // Buffer accessor: lazily allocates a zero cotangent for a parent.
    macro_rules! buf {
        ($p:expr) => {
            local[$p].get_or_insert_with(|| vec![0.0; nodes[$p].value.numel()])
        };
    }
    let needs = |p: usize| nodes[p].requires_grad;

    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if needs(*a) {
                let acc = buf!(*a);
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            if needs(*b) {
                let acc = buf!(*b);
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x += gi;
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                let acc = buf!(*a);
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            if needs(*b) {
                let acc = buf!(*b);
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x -= gi;
                }
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                let b_data = &nodes[*b].value.data;
                let acc = buf!(*a);
                for i in 0..g.len() {
                    acc[i] += g[i] * b_data[i];
                }
            }
            if needs(*b) {
                let a_data = &nodes[*a].value.data;
                let acc = buf!(*b);
                for i in 0..g.len() {
                    acc[i] += g[i] * a_data[i];
                }
            }
        }
        Op::Scale { a, c } => {
            if needs(*a) {
                let acc = buf!(*a);
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x += c * gi;
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            if needs(*a) {
                let b_data = &nodes[*b].value.data;
                let acc = buf!(*a);
                kernels::matmul_nt_acc(g, b_data, acc, *m, *n, *k);
            }
            if needs(*b) {
                let a_data = &nodes[*a].value.data;
                let acc = buf!(*b);
                kernels::matmul_tn_acc(a_data, g, acc, *k, *m, *n);
            }
        }
        Op::Softmax { a } => {
            if needs(*a) {
                let probs = &nodes[idx].value;
                let width = probs.last_dim();
                let acc = buf!(*a);
                for r in 0..probs.numel() / width {
                    let p = &probs.data[r * width..(r + 1) * width];
                    let g_row = &g[r * width..(r + 1) * width];
                    let dot: f64 = g_row.iter().zip(p).map(|(gi, pi)| gi * pi).sum();
                    let acc_row = &mut acc[r * width..(r + 1) * width];
                    for j in 0..width {
                        acc_row[j] += p[j] * (g_row[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if needs(*logits) {
                let width = nodes[*logits].value.last_dim();
                let acc = buf!(*logits);
                for (r, &gr) in g.iter().enumerate() {
                    if gr == 0.0 {
                        // Exact zero upstream weight: masked positions must
                        // contribute an exact zero logit gradient.
                        continue;
                    }
                    let p = &probs[r * width..(r + 1) * width];
                    let acc_row = &mut acc[r * width..(r + 1) * width];
                    for j in 0..width {
                        acc_row[j] += gr * p[j];
                    }
                    acc_row[targets[r]] -= gr;
                }
            }
        }
        Op::Embedding { table, ids } => {
            if needs(*table) {
                let dim = nodes[*table].value.last_dim();
                let acc = buf!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    let g_row = &g[r * dim..(r + 1) * dim];
                    let acc_row = &mut acc[id * dim..(id + 1) * dim];
                    for j in 0..dim {
                        acc_row[j] += g_row[j];
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let width = nodes[*gain].value.numel();
            let x_data = &nodes[*x].value.data;
            let g_data = &nodes[*gain].value.data;
            if needs(*x) {
                let acc = buf!(*x);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let x_row = &x_data[r * width..(r + 1) * width];
                    let g_row = &g[r * width..(r + 1) * width];
                    let mut dot = 0.0;
                    for j in 0..width {
                        dot += g_row[j] * g_data[j] * x_row[j];
                    }
                    let coef = inv * inv * inv * dot / width as f64;
                    let acc_row = &mut acc[r * width..(r + 1) * width];
                    for j in 0..width {
                        acc_row[j] += inv * g_data[j] * g_row[j] - coef * x_row[j];
                    }
                }
            }
            if needs(*gain) {
                let acc = buf!(*gain);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let x_row = &x_data[r * width..(r + 1) * width];
                    let g_row = &g[r * width..(r + 1) * width];
                    for j in 0..width {
                        acc[j] += g_row[j] * x_row[j] * inv;
                    }
                }
            }
        }
        Op::Gelu { a } => {
            if needs(*a) {
                let x_data = &nodes[*a].value.data;
                let acc = buf!(*a);
                for i in 0..g.len() {
                    acc[i] += g[i] * kernels::gelu_deriv(x_data[i]);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            n_heads,
            probs,
        } => {
            let shape = &nodes[*q].value.shape;
            let (b, t, d) = (shape[0], shape[1], shape[2]);
            let dh = d / n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let q_data = &nodes[*q].value.data;
            let k_data = &nodes[*k].value.data;
            let v_data = &nodes[*v].value.data;
            let need_q = needs(*q);
            let need_k = needs(*k);
            let need_v = needs(*v);
            if !(need_q || need_k || need_v) {
                return;
            }
            // Ensure all three buffers exist before splitting borrows.
            for &p in [q, k, v].iter() {
                if needs(*p) {
                    let _ = buf!(*p);
                }
            }
            let mut dscore = vec![0.0; t];
            for bi in 0..b {
                for h in 0..*n_heads {
                    let col = h * dh;
                    for i in 0..t {
                        let g_row = &g[(bi * t + i) * d + col..][..dh];
                        let p_row = &probs[((bi * n_heads + h) * t + i) * t..][..t];
                        // dV and dP
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let v_row = &v_data[(bi * t + j) * d + col..][..dh];
                            let mut dp = 0.0;
                            for l in 0..dh {
                                dp += g_row[l] * v_row[l];
                            }
                            dscore[j] = dp;
                            dot += dp * p_row[j];
                        }
                        if need_v {
                            let acc_v = local[*v].as_mut().unwrap();
                            for j in 0..=i {
                                let p = p_row[j];
                                let acc_row = &mut acc_v[(bi * t + j) * d + col..][..dh];
                                for l in 0..dh {
                                    acc_row[l] += p * g_row[l];
                                }
                            }
                        }
                        // dS = P .* (dP - dot), then into q and k.
                        for j in 0..=i {
                            dscore[j] = p_row[j] * (dscore[j] - dot) * scale;
                        }
                        if need_q {
                            let acc_q = local[*q].as_mut().unwrap();
                            let base = (bi * t + i) * d + col;
                            for j in 0..=i {
                                let ds = dscore[j];
                                if ds == 0.0 {
                                    continue;
                                }
                                let k_row = &k_data[(bi * t + j) * d + col..][..dh];
                                for l in 0..dh {
                                    acc_q[base + l] += ds * k_row[l];
                                }
                            }
                        }
                        if need_k {
                            let acc_k = local[*k].as_mut().unwrap();
                            let q_base = (bi * t + i) * d + col;
                            for j in 0..=i {
                                let ds = dscore[j];
                                if ds == 0.0 {
                                    continue;
                                }
                                let acc_row = &mut acc_k[(bi * t + j) * d + col..][..dh];
                                for l in 0..dh {
                                    acc_row[l] += ds * q_data[q_base + l];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Sum { a } => {
            if needs(*a) {
                let acc = buf!(*a);
                let gs = g[0];
                for x in acc.iter_mut() {
                    *x += gs;
                }
            }
        }
        Op::Index { a, flat } => {
            if needs(*a) {
                let acc = buf!(*a);
                acc[*flat] += g[0];
            }
        }
        Op::RemapLastAxis { a, map } => {
            if needs(*a) {
                let width = nodes[*a].value.last_dim();
                let rows = nodes[*a].value.numel() / width;
                let acc = buf!(*a);
                for r in 0..rows {
                    for (j, &m) in map.iter().enumerate() {
                        acc[r * width + m] += g[r * map.len() + j];
                    }
                }
            }
        }
    }
}
