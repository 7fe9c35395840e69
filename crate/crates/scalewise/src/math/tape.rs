//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every primitive records (op kind, input handles) alongside its output
//! value. Nodes are appended in execution order, so the record is already
//! topologically sorted and the backward pass is a single reverse sweep.
//!
//! A tape with `recording == false` still executes ops and stores values (the
//! inference path uses this) but keeps no backward information.
//!
//! The FLOP counter tallies `2*m*k*n` per matmul and nothing else; analytic
//! cost models in the benchmark mirror exactly this convention.

use std::rc::Rc;

use super::mask::MaskMatrix;
use super::rope::RopePlan;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for normalization and relative-error computations.
pub const EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PId(pub(crate) usize);

/// Named, trainable tensor collection. Gradients accumulate on the tensors'
/// own gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor<f64>) -> PId {
        value.enable_grad();
        self.entries.push((name.into(), value));
        PId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.entries[id.0].0
    }

    pub fn value(&self, id: PId) -> &Tensor<f64> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: PId) -> &mut Tensor<f64> {
        &mut self.entries[id.0].1
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.entries.len()).map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PId, &str, &Tensor<f64>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (PId(i), n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

enum Op {
    Leaf,
    Matmul(Val, Val),
    Transpose(Val),
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Scale(Val, f64),
    AddScalar(Val, f64),
    Exp(Val),
    Silu(Val),
    GeluTanh(Val),
    RoundF32(Val),
    Softmax {
        x: Val,
        mask: Option<Rc<MaskMatrix>>,
    },
    LogSoftmax(Val),
    RmsNorm {
        x: Val,
        eps: f64,
    },
    LayerNorm {
        x: Val,
        eps: f64,
    },
    Rms(Val),
    Rope(Val, Rc<RopePlan>),
    ConcatRows(Vec<Val>),
    SliceRows {
        x: Val,
        start: usize,
    },
    ConcatCols(Vec<Val>),
    SliceCols {
        x: Val,
        start: usize,
    },
    Reshape(Val),
    GatherRows {
        table: Val,
        idx: Rc<Vec<usize>>,
    },
    PickPerRow {
        x: Val,
        idx: Rc<Vec<usize>>,
    },
    BroadcastRows(Val),
    SumAll(Val),
    MeanAll(Val),
    MeanRows(Val),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
}

/// Wengert tape: ordered op record plus value arena.
pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
    bindings: Vec<(usize, PId)>,
    recording: bool,
    flops: u64,
    /// Accumulated leaf gradients, indexed like `nodes`.
    leaf_grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new(recording: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            recording,
            flops: 0,
            leaf_grads: Vec::new(),
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Matmul multiply-add count times two, accumulated since creation.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Val) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a differentiable leaf, if backward has run.
    pub fn leaf_grad(&self, v: Val) -> Option<Tensor<F>> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("leaf grad shape"))
    }

    fn push(&mut self, value: Tensor<F>, op: Op, needs_grad: bool) -> Val {
        let op = if self.recording { op } else { Op::Leaf };
        let needs_grad = needs_grad && self.recording;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Val {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (gradient produced by [`Tape::backward`]).
    pub fn leaf(&mut self, t: Tensor<F>) -> Val {
        self.push(t, Op::Leaf, true)
    }

    /// Differentiable leaf bound to a parameter; [`Tape::grads_into_store`]
    /// later funnels its gradient back onto the parameter tensor.
    pub fn param(&mut self, store: &ParamStore, id: PId) -> Val {
        let v = self.leaf(store.value(id).cast::<F>());
        self.bindings.push((v.0, id));
        v
    }

    fn finish(&mut self, value: Tensor<F>, op_name: &'static str, op: Op, needs: bool) -> Result<Val> {
        value.ensure_finite(op_name)?;
        Ok(self.push(value, op, needs))
    }

    // ---- primitives -----------------------------------------------------

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_mat() || !tb.is_mat() || ta.cols() != tb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = raw_matmul(ta.data(), tb.data(), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        self.finish(Tensor::mat(m, n, data)?, "matmul", Op::Matmul(a, b), needs)
    }

    pub fn transpose(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let data = raw_transpose(t.data(), r, c);
        let needs = self.needs(x);
        self.finish(Tensor::mat(c, r, data)?, "transpose", Op::Transpose(x), needs)
    }

    fn zip2(&mut self, a: Val, b: Val, op_name: &'static str, f: impl Fn(F, F) -> F, op: Op) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.finish(Tensor::new(shape, data)?, op_name, op, needs)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.zip2(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.zip2(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.zip2(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map1(&mut self, x: Val, op_name: &'static str, f: impl Fn(F) -> F, op: Op) -> Result<Val> {
        let t = self.value(x);
        let data: Vec<F> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.finish(Tensor::new(shape, data)?, op_name, op, needs)
    }

    /// Scalar-tensor product (the one permitted broadcast).
    pub fn scale(&mut self, x: Val, c: f64) -> Result<Val> {
        let cf = F::from_f64(c);
        self.map1(x, "scale", |v| v * cf, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Val, c: f64) -> Result<Val> {
        let cf = F::from_f64(c);
        self.map1(x, "add_scalar", |v| v + cf, Op::AddScalar(x, c))
    }

    pub fn exp(&mut self, x: Val) -> Result<Val> {
        self.map1(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    pub fn silu(&mut self, x: Val) -> Result<Val> {
        self.map1(x, "silu", |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn gelu_tanh(&mut self, x: Val) -> Result<Val> {
        self.map1(x, "gelu_tanh", gelu_tanh_value, Op::GeluTanh(x))
    }

    /// Round every element to the nearest `f32`-representable value.
    /// Backward passes gradients through unchanged.
    pub fn round_f32(&mut self, x: Val) -> Result<Val> {
        self.map1(
            x,
            "round_f32",
            |v| F::from_f64(v.as_f64() as f32 as f64),
            Op::RoundF32(x),
        )
    }

    /// Row-wise softmax. With a mask, excluded columns produce exact zeros and
    /// take no part in the normalization. A row with no admissible column is a
    /// contract violation.
    pub fn softmax(&mut self, x: Val, mask: Option<Rc<MaskMatrix>>) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(m) = &mask {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Dimension {
                    op: "softmax",
                    lhs: vec![rows, cols],
                    rhs: vec![m.rows(), m.cols()],
                });
            }
        }
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let xrow = &t.data()[r * cols..(r + 1) * cols];
            let orow = &mut data[r * cols..(r + 1) * cols];
            let admissible = |c: usize| mask.as_ref().map_or(true, |m| m.allowed(r, c));
            let mut mx = F::neg_infinity();
            let mut any = false;
            for c in 0..cols {
                if admissible(c) {
                    any = true;
                    if xrow[c] > mx {
                        mx = xrow[c];
                    }
                }
            }
            if !any {
                return Err(Error::Contract(format!("softmax: row {r} fully masked")));
            }
            let mut sum = F::zero();
            for c in 0..cols {
                if admissible(c) {
                    let e = (xrow[c] - mx).exp();
                    orow[c] = e;
                    sum = sum + e;
                }
            }
            for c in 0..cols {
                if admissible(c) {
                    orow[c] = orow[c] / sum;
                }
            }
        }
        let needs = self.needs(x);
        self.finish(
            Tensor::mat(rows, cols, data)?,
            "softmax",
            Op::Softmax { x, mask },
            needs,
        )
    }

    /// Row-wise log-softmax (unmasked), the numerically stable path for
    /// cross-entropy.
    pub fn log_softmax(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() {
            return Err(Error::Dimension {
                op: "log_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let xrow = &t.data()[r * cols..(r + 1) * cols];
            let orow = &mut data[r * cols..(r + 1) * cols];
            let mx = xrow.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for c in 0..cols {
                sum = sum + (xrow[c] - mx).exp();
            }
            let lse = mx + sum.ln();
            for c in 0..cols {
                orow[c] = xrow[c] - lse;
            }
        }
        let needs = self.needs(x);
        self.finish(Tensor::mat(rows, cols, data)?, "log_softmax", Op::LogSoftmax(x), needs)
    }

    /// Row-wise RMS normalization: `y = x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, x: Val) -> Result<Val> {
        let eps = EPS;
        let t = self.value(x);
        if !t.is_mat() {
            return Err(Error::Dimension {
                op: "rms_norm",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let xrow = &t.data()[r * cols..(r + 1) * cols];
            let ms = xrow.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b)
                / F::from_f64(cols as f64);
            let inv = (ms + F::from_f64(eps)).sqrt().recip();
            for c in 0..cols {
                data[r * cols + c] = xrow[c] * inv;
            }
        }
        let needs = self.needs(x);
        self.finish(
            Tensor::mat(rows, cols, data)?,
            "rms_norm",
            Op::RmsNorm { x, eps },
            needs,
        )
    }

    /// Row-wise layer normalization (mean subtraction, no affine).
    pub fn layer_norm(&mut self, x: Val) -> Result<Val> {
        let eps = EPS;
        let t = self.value(x);
        if !t.is_mat() {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![F::zero(); rows * cols];
        let nf = F::from_f64(cols as f64);
        for r in 0..rows {
            let xrow = &t.data()[r * cols..(r + 1) * cols];
            let mean = xrow.iter().fold(F::zero(), |a, &b| a + b) / nf;
            let var = xrow
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(F::zero(), |a, b| a + b)
                / nf;
            let inv = (var + F::from_f64(eps)).sqrt().recip();
            for c in 0..cols {
                data[r * cols + c] = (xrow[c] - mean) * inv;
            }
        }
        let needs = self.needs(x);
        self.finish(
            Tensor::mat(rows, cols, data)?,
            "layer_norm",
            Op::LayerNorm { x, eps },
            needs,
        )
    }

    /// Root-mean-square of all elements, as a scalar.
    pub fn rms(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        let n = t.numel().max(1);
        let ms = t.data().iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b)
            / F::from_f64(n as f64);
        let needs = self.needs(x);
        self.finish(Tensor::scalar(ms.sqrt()), "rms", Op::Rms(x), needs)
    }

    /// Apply 2-D rotary embeddings to a `(tokens, heads*head_dim)` tensor.
    /// Rotations are isometries, so row norms are preserved.
    pub fn rope(&mut self, x: Val, plan: Rc<RopePlan>) -> Result<Val> {
        let t = self.value(x);
        let hd = plan.head_dim();
        if !t.is_mat() || t.cols() % hd != 0 || t.rows() != plan.tokens() {
            return Err(Error::Dimension {
                op: "rope",
                lhs: t.shape().to_vec(),
                rhs: vec![plan.tokens(), hd],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let heads = cols / hd;
        let mut data = t.data().to_vec();
        for r in 0..rows {
            for h in 0..heads {
                let base = r * cols + h * hd;
                for p in 0..hd / 2 {
                    let (c, s) = plan.angle(r, p);
                    let (cf, sf) = (F::from_f64(c), F::from_f64(s));
                    let (i0, i1) = (base + 2 * p, base + 2 * p + 1);
                    let (x0, x1) = (data[i0], data[i1]);
                    data[i0] = cf * x0 - sf * x1;
                    data[i1] = sf * x0 + cf * x1;
                }
            }
        }
        let needs = self.needs(x);
        self.finish(Tensor::mat(rows, cols, data)?, "rope", Op::Rope(x, plan), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero tensors".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_mat() || t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.finish(
            Tensor::mat(rows, cols, data)?,
            "concat_rows",
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    pub fn slice_rows(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() || start + len > t.rows() {
            return Err(Error::Range(format!(
                "slice_rows [{start}, {start}+{len}) of {} rows",
                t.rows()
            )));
        }
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        self.finish(
            Tensor::mat(len, cols, data)?,
            "slice_rows",
            Op::SliceRows { x, start },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_mat() || t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut data = vec![F::zero(); rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&t.data()[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.finish(
            Tensor::mat(rows, cols, data)?,
            "concat_cols",
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() || start + len > t.cols() {
            return Err(Error::Range(format!(
                "slice_cols [{start}, {start}+{len}) of {} cols",
                t.cols()
            )));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        self.finish(
            Tensor::mat(rows, len, data)?,
            "slice_cols",
            Op::SliceCols { x, start },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Result<Val> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = t.data().to_vec();
        let needs = self.needs(x);
        self.finish(Tensor::new(shape, data)?, "reshape", Op::Reshape(x), needs)
    }

    /// Embedding lookup: `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Val, idx: Rc<Vec<usize>>) -> Result<Val> {
        let t = self.value(table);
        if !t.is_mat() {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            if i >= t.rows() {
                return Err(Error::Range(format!(
                    "gather_rows index {i} out of {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let rows = idx.len();
        let needs = self.needs(table);
        self.finish(
            Tensor::mat(rows, cols, data)?,
            "gather_rows",
            Op::GatherRows { table, idx },
            needs,
        )
    }

    /// `out[i] = x[i, idx[i]]`, as a column of length `rows`.
    pub fn pick_per_row(&mut self, x: Val, idx: Rc<Vec<usize>>) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() || idx.len() != t.rows() {
            return Err(Error::Dimension {
                op: "pick_per_row",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(Error::Range(format!(
                    "pick_per_row column {c} out of {cols}"
                )));
            }
            data.push(t.data()[r * cols + c]);
        }
        let rows = idx.len();
        let needs = self.needs(x);
        self.finish(
            Tensor::new(vec![rows], data)?,
            "pick_per_row",
            Op::PickPerRow { x, idx },
            needs,
        )
    }

    /// Repeat a `(1, c)` row vector to `(rows, c)`.
    pub fn broadcast_rows(&mut self, x: Val, rows: usize) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() || t.rows() != 1 {
            return Err(Error::Dimension {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, t.cols()],
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let needs = self.needs(x);
        self.finish(
            Tensor::mat(rows, cols, data)?,
            "broadcast_rows",
            Op::BroadcastRows(x),
            needs,
        )
    }

    pub fn sum_all(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        let s = t.data().iter().fold(F::zero(), |a, &b| a + b);
        let needs = self.needs(x);
        self.finish(Tensor::scalar(s), "sum_all", Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        let n = t.numel().max(1);
        let s = t.data().iter().fold(F::zero(), |a, &b| a + b) / F::from_f64(n as f64);
        let needs = self.needs(x);
        self.finish(Tensor::scalar(s), "mean_all", Op::MeanAll(x), needs)
    }

    /// Column means of a `(n, c)` matrix, as a `(1, c)` row.
    pub fn mean_rows(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        if !t.is_mat() || t.rows() == 0 {
            return Err(Error::Dimension {
                op: "mean_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let nf = F::from_f64(rows as f64);
        let mut data = vec![F::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] = data[c] + t.data()[r * cols + c];
            }
        }
        for v in &mut data {
            *v = *v / nf;
        }
        let needs = self.needs(x);
        self.finish(Tensor::mat(1, cols, data)?, "mean_rows", Op::MeanRows(x), needs)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Visits each op exactly once, in
    /// reverse record order. Gradients of differentiable leaves accumulate
    /// across calls until [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if !self.recording {
            return Err(Error::Usage("backward on a non-recording tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // Inputs always precede node i, so split lets us read the current
            // gradient while accumulating into earlier ones.
            let (before, rest) = grads.split_at_mut(i);
            let g = rest[0].as_ref().unwrap();
            self.backward_one(i, g, before)?;
        }

        // Fold leaf gradients into persistent accumulators.
        for i in 0..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(g) = &grads[i] {
                match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a = *a + *b;
                        }
                    }
                    None => self.leaf_grads[i] = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    /// Clear accumulated leaf gradients.
    pub fn reset_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Accumulate gradients of parameter-bound leaves onto the store's
    /// parameter tensors.
    pub fn grads_into_store(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, pid) in &self.bindings {
            if let Some(g) = &self.leaf_grads[node] {
                let g64: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
                store.value_mut(pid).accumulate_grad(&g64)?;
            }
        }
        Ok(())
    }

    fn accumulate(slot: &mut Option<Vec<F>>, delta: &[F]) {
        match slot {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a = *a + *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn add_if_needed(&self, grads: &mut [Option<Vec<F>>], v: Val, delta: &[F]) {
        if self.nodes[v.0].needs_grad {
            Self::accumulate(&mut grads[v.0], delta);
        }
    }

    fn backward_one(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].needs_grad {
                    // dA = dC @ B^T
                    let bt = raw_transpose(tb.data(), k, n);
                    let da = raw_matmul(g, &bt, m, n, k);
                    Self::accumulate(&mut grads[a.0], &da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T @ dC
                    let at = raw_transpose(ta.data(), m, k);
                    let db = raw_matmul(&at, g, k, m, n);
                    Self::accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(x) => {
                let t = &node.value;
                let gt = raw_transpose(g, t.rows(), t.cols());
                self.add_if_needed(grads, *x, &gt);
            }
            Op::Add(a, b) => {
                self.add_if_needed(grads, *a, g);
                self.add_if_needed(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_if_needed(grads, *a, g);
                if self.nodes[b.0].needs_grad {
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    Self::accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let tb = self.value(*b);
                    let da: Vec<F> = g.iter().zip(tb.data()).map(|(&gi, &bi)| gi * bi).collect();
                    Self::accumulate(&mut grads[a.0], &da);
                }
                if self.nodes[b.0].needs_grad {
                    let ta = self.value(*a);
                    let db: Vec<F> = g.iter().zip(ta.data()).map(|(&gi, &ai)| gi * ai).collect();
                    Self::accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Scale(x, c) => {
                if self.nodes[x.0].needs_grad {
                    let cf = F::from_f64(*c);
                    let dx: Vec<F> = g.iter().map(|&v| v * cf).collect();
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::AddScalar(x, _) => {
                self.add_if_needed(grads, *x, g);
            }
            Op::Exp(x) => {
                if self.nodes[x.0].needs_grad {
                    let y = &node.value;
                    let dx: Vec<F> = g.iter().zip(y.data()).map(|(&gi, &yi)| gi * yi).collect();
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Silu(x) => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let dx: Vec<F> = g
                        .iter()
                        .zip(tx.data())
                        .map(|(&gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * s * (F::one() + xi * (F::one() - s))
                        })
                        .collect();
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::GeluTanh(x) => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let dx: Vec<F> = g
                        .iter()
                        .zip(tx.data())
                        .map(|(&gi, &xi)| gi * gelu_tanh_derivative(xi))
                        .collect();
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::RoundF32(x) => {
                // Straight-through: rounding is treated as identity.
                self.add_if_needed(grads, *x, g);
            }
            Op::Softmax { x, mask } => {
                if self.nodes[x.0].needs_grad {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let yrow = &y.data()[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot = yrow
                            .iter()
                            .zip(grow)
                            .map(|(&yi, &gi)| yi * gi)
                            .fold(F::zero(), |a, b| a + b);
                        for c in 0..cols {
                            let admissible = mask.as_ref().map_or(true, |m| m.allowed(r, c));
                            if admissible {
                                dx[r * cols + c] = yrow[c] * (grow[c] - dot);
                            }
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.nodes[x.0].needs_grad {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let yrow = &y.data()[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let gsum = grow.iter().fold(F::zero(), |a, &b| a + b);
                        for c in 0..cols {
                            dx[r * cols + c] = grow[c] - yrow[c].exp() * gsum;
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::RmsNorm { x, eps } => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let nf = F::from_f64(cols as f64);
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let xrow = &tx.data()[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let ms = xrow.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b) / nf;
                        let rr = (ms + F::from_f64(*eps)).sqrt();
                        let dot = xrow
                            .iter()
                            .zip(grow)
                            .map(|(&xi, &gi)| xi * gi)
                            .fold(F::zero(), |a, b| a + b);
                        let r3 = rr * rr * rr;
                        for c in 0..cols {
                            dx[r * cols + c] = grow[c] / rr - xrow[c] * dot / (nf * r3);
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::LayerNorm { x, eps } => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let y = &node.value;
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let nf = F::from_f64(cols as f64);
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let xrow = &tx.data()[r * cols..(r + 1) * cols];
                        let yrow = &y.data()[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mean = xrow.iter().fold(F::zero(), |a, &b| a + b) / nf;
                        let var = xrow
                            .iter()
                            .map(|&v| (v - mean) * (v - mean))
                            .fold(F::zero(), |a, b| a + b)
                            / nf;
                        let inv = (var + F::from_f64(*eps)).sqrt().recip();
                        let gmean = grow.iter().fold(F::zero(), |a, &b| a + b) / nf;
                        let gydot = grow
                            .iter()
                            .zip(yrow)
                            .map(|(&gi, &yi)| gi * yi)
                            .fold(F::zero(), |a, b| a + b)
                            / nf;
                        for c in 0..cols {
                            dx[r * cols + c] = inv * (grow[c] - gmean - yrow[c] * gydot);
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Rms(x) => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let n = tx.numel().max(1);
                    let r = node.value.data()[0];
                    let denom = (F::from_f64(n as f64) * r).max(F::from_f64(EPS));
                    let g0 = g[0];
                    let dx: Vec<F> = tx.data().iter().map(|&xi| g0 * xi / denom).collect();
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Rope(x, plan) => {
                if self.nodes[x.0].needs_grad {
                    // Inverse rotation of the upstream gradient.
                    let t = &node.value;
                    let (rows, cols) = (t.rows(), t.cols());
                    let hd = plan.head_dim();
                    let heads = cols / hd;
                    let mut dx = g.to_vec();
                    for r in 0..rows {
                        for h in 0..heads {
                            let base = r * cols + h * hd;
                            for p in 0..hd / 2 {
                                let (c, s) = plan.angle(r, p);
                                let (cf, sf) = (F::from_f64(c), F::from_f64(s));
                                let (i0, i1) = (base + 2 * p, base + 2 * p + 1);
                                let (g0, g1) = (dx[i0], dx[i1]);
                                dx[i0] = cf * g0 + sf * g1;
                                dx[i1] = -sf * g0 + cf * g1;
                            }
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.numel();
                    if self.nodes[p.0].needs_grad {
                        Self::accumulate(&mut grads[p.0], &g[start..start + len]);
                    }
                    start += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut dx = vec![F::zero(); tx.numel()];
                    dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let pc = t.cols();
                    if self.nodes[p.0].needs_grad {
                        let mut dp = vec![F::zero(); rows * pc];
                        for r in 0..rows {
                            dp[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                        }
                        Self::accumulate(&mut grads[p.0], &dp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let len = node.value.cols();
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Reshape(x) => {
                self.add_if_needed(grads, *x, g);
            }
            Op::GatherRows { table, idx } => {
                if self.nodes[table.0].needs_grad {
                    let t = self.value(*table);
                    let cols = t.cols();
                    let mut dt = vec![F::zero(); t.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dt[i * cols + c] = dt[i * cols + c] + g[r * cols + c];
                        }
                    }
                    Self::accumulate(&mut grads[table.0], &dt);
                }
            }
            Op::PickPerRow { x, idx } => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let mut dx = vec![F::zero(); tx.numel()];
                    for (r, &c) in idx.iter().enumerate() {
                        dx[r * cols + c] = g[r];
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::BroadcastRows(x) => {
                if self.nodes[x.0].needs_grad {
                    let cols = self.value(*x).cols();
                    let rows = node.value.rows();
                    let mut dx = vec![F::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[c] = dx[c] + g[r * cols + c];
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::SumAll(x) => {
                if self.nodes[x.0].needs_grad {
                    let n = self.value(*x).numel();
                    let dx = vec![g[0]; n];
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::MeanAll(x) => {
                if self.nodes[x.0].needs_grad {
                    let n = self.value(*x).numel().max(1);
                    let v = g[0] / F::from_f64(n as f64);
                    let dx = vec![v; self.value(*x).numel()];
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::MeanRows(x) => {
                if self.nodes[x.0].needs_grad {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let nf = F::from_f64(rows as f64);
                    let mut dx = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[c] / nf;
                        }
                    }
                    Self::accumulate(&mut grads[x.0], &dx);
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    (F::one() + (-x).exp()).recip()
}

fn gelu_tanh_value<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (F::one() + t)
}

fn gelu_tanh_derivative<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

pub(crate) fn raw_matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
    out
}

pub(crate) fn raw_transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
