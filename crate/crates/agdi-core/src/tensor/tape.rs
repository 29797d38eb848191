//! Wengert tape: records forward operations, replays them in reverse.
//!
//! The tape is rebuilt per forward pass (define-by-run). Every op validates
//! operand dims, and every forward value is checked finite before it is
//! recorded; a non-finite result is an error, never silent. Broadcast is
//! restricted to a leading batch axis (`add_rows`), which keeps each
//! backward rule a short closed form.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: u32,
}

#[derive(Debug)]
enum Op<S> {
    Leaf { tracked: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    /// `[r,c] + [c]`, the one permitted broadcast.
    AddRows(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Sum(NodeId),
    MeanRows(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    /// Embedding lookup: rows of `table` selected by token id.
    Gather(NodeId, Vec<usize>),
    /// One element per row of a `[T,V]` matrix, selected by column index.
    PickPerRow(NodeId, Vec<usize>),
    /// L2 normalization of a vector.
    Normalize(NodeId),
    CosineSim(NodeId, NodeId),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
}

/// Gradients produced by one backward pass, keyed by node id.
///
/// Every tracked leaf has an entry (zeros when the loss does not reach it);
/// interior nodes have entries only when touched by the sweep.
pub struct GradientMap<S> {
    tape: u64,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradientMap<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index as usize).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        assert_eq!(id.tape, self.id, "node from a different tape");
        &self.nodes[id.index as usize].value
    }

    fn own(&self, id: NodeId, op: &'static str) -> Result<usize> {
        if id.tape != self.id || id.index as usize >= self.nodes.len() {
            return Err(Error::contract(format!("{op}: node not on this tape")));
        }
        Ok(id.index as usize)
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::numeric(name, "non-finite forward value"));
        }
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Ok(NodeId {
            tape: self.id,
            index,
        })
    }

    /// Records an input tensor. Tracked leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, tracked: bool) -> NodeId {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: Op::Leaf { tracked },
        });
        NodeId {
            tape: self.id,
            index,
        }
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    // ── forward primitives ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.own(a, "matmul")?;
        self.own(b, "matmul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let (da, db) = (va.dims().to_vec(), vb.dims().to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: da,
                rhs: db,
            });
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![S::zero(); m * n];
        mm_nn(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.own(a, "transpose")?;
        let va = self.value(a);
        let d = va.dims().to_vec();
        if d.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: d,
                rhs: vec![],
            });
        }
        let value = transpose2d(va);
        self.push(Op::Transpose(a), value, "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        self.own(a, "reshape")?;
        let va = self.value(a);
        let numel: usize = dims.iter().product();
        if dims.is_empty() || numel != va.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: va.dims().to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let value = Tensor::new(dims.to_vec(), va.data().to_vec())?;
        self.push(Op::Reshape(a), value, "reshape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.own(a, "add")?;
        self.own(b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::Shape {
                op: "add",
                lhs: va.dims().to_vec(),
                rhs: vb.dims().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::Add(a, b), value, "add")
    }

    /// `[r,c] + [c]`: adds a vector to every row.
    pub fn add_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.own(a, "add_rows")?;
        self.own(b, "add_rows")?;
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = va.shape2d("add_rows")?;
        if vb.dims() != [c] {
            return Err(Error::Shape {
                op: "add_rows",
                lhs: va.dims().to_vec(),
                rhs: vb.dims().to_vec(),
            });
        }
        let mut data = va.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + vb.data()[j];
            }
        }
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::AddRows(a, b), value, "add_rows")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.own(a, "mul")?;
        self.own(b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::Shape {
                op: "mul",
                lhs: va.dims().to_vec(),
                rhs: vb.dims().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::Mul(a, b), value, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        self.own(a, "scale")?;
        let va = self.value(a);
        let data = va.data().iter().map(|x| *x * c).collect();
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::Scale(a, c), value, "scale")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.own(a, "sum")?;
        let total = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(total), "sum")
    }

    /// Mean over axis 0 of a `[r,c]` matrix.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.own(a, "mean_rows")?;
        let va = self.value(a);
        let (r, c) = va.shape2d("mean_rows")?;
        let inv = S::one() / lit::<S>(r as f64);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + va.data()[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let value = Tensor::new(vec![c], out)?;
        self.push(Op::MeanRows(a), value, "mean_rows")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.own(a, "tanh")?;
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::Tanh(a), value, "tanh")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.own(a, "softmax")?;
        let va = self.value(a);
        let (r, c) = va.shape2d("softmax")?;
        let mut data = va.data().to_vec();
        for i in 0..r {
            softmax_row(&mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::Softmax(a), value, "softmax")
    }

    /// Row-wise log-softmax, numerically stable via max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.own(a, "log_softmax")?;
        let va = self.value(a);
        let (r, c) = va.shape2d("log_softmax")?;
        let mut data = va.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let mx = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
            let lse = row
                .iter()
                .map(|v| (*v - mx).exp())
                .sum::<S>()
                .ln()
                + mx;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::LogSoftmax(a), value, "log_softmax")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.own(x, "layer_norm")?;
        self.own(gamma, "layer_norm")?;
        self.own(beta, "layer_norm")?;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = vx.shape2d("layer_norm")?;
        if vg.dims() != [c] || vb.dims() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vx.dims().to_vec(),
                rhs: vg.dims().to_vec(),
            });
        }
        let eps = lit::<S>(eps);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let (mean, inv_std) = ln_stats(row, eps);
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                data[i * c + j] = vg.data()[j] * xhat + vb.data()[j];
            }
        }
        let value = Tensor::new(vx.dims().to_vec(), data)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            value,
            "layer_norm",
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty part list"));
        }
        let mut c0 = None;
        let mut rows = 0;
        for &p in parts {
            self.own(p, "concat_rows")?;
            let (r, c) = self.value(p).shape2d("concat_rows")?;
            if *c0.get_or_insert(c) != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![c0.unwrap()],
                    rhs: self.value(p).dims().to_vec(),
                });
            }
            rows += r;
        }
        let c = c0.unwrap();
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push(Op::ConcatRows(parts.to_vec()), value, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.own(a, "slice_rows")?;
        let va = self.value(a);
        let (r, c) = va.shape2d("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: va.dims().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = va.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push(Op::SliceRows(a, start), value, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty part list"));
        }
        let mut r0 = None;
        let mut cols = 0;
        for &p in parts {
            self.own(p, "concat_cols")?;
            let (r, c) = self.value(p).shape2d("concat_cols")?;
            if *r0.get_or_insert(r) != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r0.unwrap()],
                    rhs: self.value(p).dims().to_vec(),
                });
            }
            cols += c;
        }
        let r = r0.unwrap();
        let mut data = vec![S::zero(); r * cols];
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            let (_, c) = vp.shape2d("concat_cols")?;
            for i in 0..r {
                data[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&vp.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor::new(vec![r, cols], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), value, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.own(a, "slice_cols")?;
        let va = self.value(a);
        let (r, c) = va.shape2d("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: va.dims().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&va.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push(Op::SliceCols(a, start), value, "slice_cols")
    }

    /// Embedding lookup: `table[ids[t], :]` stacked into `[T, d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.own(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::contract("gather: empty id list"));
        }
        let vt = self.value(table);
        let (v, d) = vt.shape2d("gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "gather: id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push(Op::Gather(table, ids.to_vec()), value, "gather")
    }

    /// `out[t] = a[t, ids[t]]` for a `[T, V]` matrix.
    pub fn pick_per_row(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.own(a, "pick_per_row")?;
        let va = self.value(a);
        let (r, c) = va.shape2d("pick_per_row")?;
        if ids.len() != r {
            return Err(Error::Shape {
                op: "pick_per_row",
                lhs: va.dims().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c) {
            return Err(Error::contract(format!(
                "pick_per_row: column {bad} out of range ({c} columns)"
            )));
        }
        let data = ids
            .iter()
            .enumerate()
            .map(|(t, &i)| va.data()[t * c + i])
            .collect();
        let value = Tensor::new(vec![r], data)?;
        self.push(Op::PickPerRow(a, ids.to_vec()), value, "pick_per_row")
    }

    /// L2 normalization of a vector; zero norm is a numeric error.
    pub fn normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.own(a, "normalize")?;
        let va = self.value(a);
        if va.dims().len() != 1 {
            return Err(Error::Shape {
                op: "normalize",
                lhs: va.dims().to_vec(),
                rhs: vec![],
            });
        }
        let norm = l2_norm(va.data());
        if norm <= S::zero() {
            return Err(Error::numeric("normalize", "zero-norm vector"));
        }
        let data = va.data().iter().map(|x| *x / norm).collect();
        let value = Tensor::new(va.dims().to_vec(), data)?;
        self.push(Op::Normalize(a), value, "normalize")
    }

    /// Cosine similarity of two equal-length vectors; scalar in `[-1, 1]`.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.own(a, "cosine_sim")?;
        self.own(b, "cosine_sim")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims().len() != 1 || va.dims() != vb.dims() {
            return Err(Error::Shape {
                op: "cosine_sim",
                lhs: va.dims().to_vec(),
                rhs: vb.dims().to_vec(),
            });
        }
        let (na, nb) = (l2_norm(va.data()), l2_norm(vb.data()));
        if na <= S::zero() || nb <= S::zero() {
            return Err(Error::numeric("cosine_sim", "zero-norm argument"));
        }
        let dot = dot(va.data(), vb.data());
        self.push(
            Op::CosineSim(a, b),
            Tensor::scalar(dot / (na * nb)),
            "cosine_sim",
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// tracked leaf (zeros when unreachable from the root).
    pub fn backward(&self, root: NodeId) -> Result<GradientMap<S>> {
        let root_idx = self.own(root, "backward")?;
        if !self.nodes[root_idx].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward: root must be scalar, got dims {:?}",
                self.nodes[root_idx].value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root_idx] = Some(Tensor::full(
            self.nodes[root_idx].value.dims(),
            S::one(),
        ));

        for idx in (0..=root_idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        // Tracked leaves always get an entry.
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { tracked: true } = node.op {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.dims()));
                }
            } else if !matches!(node.op, Op::Leaf { .. }) {
                // keep interior grads for callers inspecting intermediates
            }
        }
        Ok(GradientMap {
            tape: self.id,
            grads,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, contrib: Tensor<S>) {
        let slot = &mut grads[id.index as usize];
        match slot {
            Some(g) => g.add_assign(&contrib),
            None => *slot = Some(contrib),
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.dims()[0], va.dims()[1]);
                let n = vb.dims()[1];
                let mut da = vec![S::zero(); m * k];
                mm_nt(g.data(), vb.data(), m, n, k, &mut da);
                let mut db = vec![S::zero(); k * n];
                mm_tn(va.data(), g.data(), m, k, n, &mut db);
                self.acc(grads, *a, Tensor::new(vec![m, k], da)?);
                self.acc(grads, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, transpose2d(g));
            }
            Op::Reshape(a) => {
                let src_dims = self.value(*a).dims().to_vec();
                self.acc(grads, *a, Tensor::new(src_dims, g.data().to_vec())?);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRows(a, b) => {
                let (r, c) = self.value(*a).shape2d("add_rows")?;
                self.acc(grads, *a, g.clone());
                let mut db = vec![S::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] = db[j] + g.data()[i * c + j];
                    }
                }
                self.acc(grads, *b, Tensor::new(vec![c], db)?);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(gi, bi)| *gi * *bi)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gi, ai)| *gi * *ai)
                    .collect();
                self.acc(grads, *a, Tensor::new(va.dims().to_vec(), da)?);
                self.acc(grads, *b, Tensor::new(vb.dims().to_vec(), db)?);
            }
            Op::Scale(a, c) => {
                let da = g.data().iter().map(|gi| *gi * *c).collect();
                self.acc(
                    grads,
                    *a,
                    Tensor::new(self.value(*a).dims().to_vec(), da)?,
                );
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.acc(grads, *a, Tensor::full(va.dims(), g.item()));
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let (r, c) = va.shape2d("mean_rows")?;
                let inv = S::one() / lit::<S>(r as f64);
                let mut da = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g.data()[j] * inv;
                    }
                }
                self.acc(grads, *a, Tensor::new(va.dims().to_vec(), da)?);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let da = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| *gi * (S::one() - *yi * *yi))
                    .collect();
                self.acc(
                    grads,
                    *a,
                    Tensor::new(self.value(*a).dims().to_vec(), da)?,
                );
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.shape2d("softmax")?;
                let mut da = vec![S::zero(); r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: S = yr.iter().zip(gr).map(|(yi, gi)| *yi * *gi).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.dims().to_vec(), da)?);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.shape2d("log_softmax")?;
                let mut da = vec![S::zero(); r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let gsum: S = gr.iter().copied().sum();
                    for j in 0..c {
                        da[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.acc(grads, *a, Tensor::new(y.dims().to_vec(), da)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let (r, c) = vx.shape2d("layer_norm")?;
                let inv_c = S::one() / lit::<S>(c as f64);
                let mut dx = vec![S::zero(); r * c];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for i in 0..r {
                    let row = &vx.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let (mean, inv_std) = ln_stats(row, *eps);
                    let mut h_mean = S::zero();
                    let mut hx_mean = S::zero();
                    let mut xhat = vec![S::zero(); c];
                    let mut h = vec![S::zero(); c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv_std;
                        h[j] = gr[j] * vg.data()[j];
                        h_mean = h_mean + h[j] * inv_c;
                        hx_mean = hx_mean + h[j] * xhat[j] * inv_c;
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = inv_std * (h[j] - h_mean - xhat[j] * hx_mean);
                    }
                }
                self.acc(grads, *x, Tensor::new(vx.dims().to_vec(), dx)?);
                self.acc(grads, *gamma, Tensor::new(vec![c], dgamma)?);
                self.acc(grads, *beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::ConcatRows(parts) => {
                let c = self.nodes[idx].value.dims()[1];
                let mut row = 0;
                for &p in parts {
                    let (rp, _) = self.value(p).shape2d("concat_rows")?;
                    let slice = g.data()[row * c..(row + rp) * c].to_vec();
                    self.acc(grads, p, Tensor::new(vec![rp, c], slice)?);
                    row += rp;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let (r, c) = va.shape2d("slice_rows")?;
                let len = self.nodes[idx].value.dims()[0];
                let mut da = vec![S::zero(); r * c];
                da[start * c..(start + len) * c].copy_from_slice(g.data());
                self.acc(grads, *a, Tensor::new(va.dims().to_vec(), da)?);
            }
            Op::ConcatCols(parts) => {
                let (r, cols) = self.nodes[idx].value.shape2d("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let (_, cp) = self.value(p).shape2d("concat_cols")?;
                    let mut dp = vec![S::zero(); r * cp];
                    for i in 0..r {
                        dp[i * cp..(i + 1) * cp].copy_from_slice(
                            &g.data()[i * cols + offset..i * cols + offset + cp],
                        );
                    }
                    self.acc(grads, p, Tensor::new(vec![r, cp], dp)?);
                    offset += cp;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (r, c) = va.shape2d("slice_cols")?;
                let len = self.nodes[idx].value.dims()[1];
                let mut da = vec![S::zero(); r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.acc(grads, *a, Tensor::new(va.dims().to_vec(), da)?);
            }
            Op::Gather(table, ids) => {
                let vt = self.value(*table);
                let (v, d) = vt.shape2d("gather")?;
                let mut dt = vec![S::zero(); v * d];
                for (t, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + g.data()[t * d + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(vec![v, d], dt)?);
            }
            Op::PickPerRow(a, ids) => {
                let va = self.value(*a);
                let (r, c) = va.shape2d("pick_per_row")?;
                let mut da = vec![S::zero(); r * c];
                for (t, &i) in ids.iter().enumerate() {
                    da[t * c + i] = g.data()[t];
                }
                self.acc(grads, *a, Tensor::new(va.dims().to_vec(), da)?);
            }
            Op::Normalize(a) => {
                let va = self.value(*a);
                let y = &self.nodes[idx].value;
                let norm = l2_norm(va.data());
                let gy: S = g.data().iter().zip(y.data()).map(|(gi, yi)| *gi * *yi).sum();
                let da = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| (*gi - gy * *yi) / norm)
                    .collect();
                self.acc(grads, *a, Tensor::new(va.dims().to_vec(), da)?);
            }
            Op::CosineSim(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (l2_norm(va.data()), l2_norm(vb.data()));
                let cosv = self.nodes[idx].value.item();
                let gs = g.item();
                let scale_ab = S::one() / (na * nb);
                let da: Vec<S> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(ai, bi)| gs * (*bi * scale_ab - cosv * *ai / (na * na)))
                    .collect();
                let db: Vec<S> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(ai, bi)| gs * (*ai * scale_ab - cosv * *bi / (nb * nb)))
                    .collect();
                self.acc(grads, *a, Tensor::new(va.dims().to_vec(), da)?);
                self.acc(grads, *b, Tensor::new(vb.dims().to_vec(), db)?);
            }
        }
        Ok(())
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

/// C += A[m,k] * B[k,n], cache-friendly i-k-j order.
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C += A[m,n] * B[k,n]^T  -> [m,k]
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for j in 0..n {
                s = s + arow[j] * brow[j];
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// C += A[m,k]^T * B[m,n]  -> [k,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

fn transpose2d<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (t.dims()[0], t.dims()[1]);
    let mut data = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose dims")
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mx = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn ln_stats<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let inv_c = S::one() / lit::<S>(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() * inv_c;
    let var = row
        .iter()
        .map(|v| (*v - mean) * (*v - mean))
        .sum::<S>()
        * inv_c;
    (mean, S::one() / (var + eps).sqrt())
}

pub(crate) fn l2_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|x| *x * *x).sum::<S>().sqrt()
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}
