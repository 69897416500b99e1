//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only arena of [`Tensor`] nodes. Forward methods
//! compute values eagerly and record the op; [`Graph::backward`] walks the
//! tape in reverse and applies the chain rule, accumulating parameter
//! gradients into the owning [`ParamStore`]. Tensors are two-dimensional
//! (rows × cols); most ops are elementwise, with row-batched matrix ops for
//! the network layers.
//!
//! Buffers are recycled through a per-thread pool: a tape retains every
//! intermediate until the step ends, and without reuse each step pays
//! first-touch page faults on tens of megabytes of fresh memory.
//!
//! Shape violations are programmer errors and panic; numeric error states
//! (non-finite losses) are surfaced by the objective layer, which checks the
//! loss terms explicitly.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{GcrlError, Result};
use crate::numgrad::params::{ParamStore, SlotId};

// ── buffer pool ─────────────────────────────────────────────────────────

#[derive(Default)]
struct BufferPool {
    by_cap: HashMap<usize, Vec<Vec<f64>>>,
    held_bytes: usize,
}

const POOL_CAP_BYTES: usize = 192 << 20;

impl BufferPool {
    fn take(&mut self, len: usize) -> Vec<f64> {
        if let Some(bucket) = self.by_cap.get_mut(&len) {
            if let Some(mut buf) = bucket.pop() {
                self.held_bytes -= len * 8;
                buf.clear();
                buf.resize(len, 0.0);
                return buf;
            }
        }
        vec![0.0; len]
    }

    fn give(&mut self, buf: Vec<f64>) {
        let cap = buf.capacity();
        if cap == 0 || self.held_bytes + cap * 8 > POOL_CAP_BYTES {
            return;
        }
        self.held_bytes += cap * 8;
        self.by_cap.entry(cap).or_default().push(buf);
    }
}

thread_local! {
    static POOL: RefCell<BufferPool> = RefCell::new(BufferPool::default());
}

fn pool_take(len: usize) -> Vec<f64> {
    POOL.with(|p| p.borrow_mut().take(len))
}

fn pool_give(buf: Vec<f64>) {
    POOL.with(|p| p.borrow_mut().give(buf));
}

// ── tape ────────────────────────────────────────────────────────────────

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    Param(SlotId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddConst(TensorId),
    MulConst(TensorId, f64),
    Exp(TensorId),
    Ln(TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    LeakyRelu(TensorId, f64),
    Clamp(TensorId, f64, f64),
    MatMul(TensorId, TensorId),
    /// Fused x·W + b with a (1×m) bias row.
    Affine(TensorId, TensorId, TensorId),
    AddRow(TensorId, TensorId),
    MulRow(TensorId, TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    RowSum(TensorId),
    RowMean(TensorId),
    LogSumExpRow(TensorId),
    /// Fused Σ_j (a_ij − b_ij)² per row.
    SqErrRowSum(TensorId, TensorId),
    ConcatCols(Vec<TensorId>),
    SliceCols(TensorId, usize),
    RepeatRows(TensorId, usize),
    Reshape(TensorId),
    SelectRows(TensorId, Rc<Vec<usize>>),
    GroupCoMean(TensorId, Rc<Vec<usize>>),
    CumSumPairs(TensorId),
    Detach,
}

/// One node of the tape: a dense value buffer plus backward metadata.
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    op: Op,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Drop for Graph {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            pool_give(node.values);
            if let Some(g) = node.grad {
                pool_give(g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, rg: bool, op: Op) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Tensor {
            rows,
            cols,
            values,
            grad: None,
            requires_grad: rg,
            op,
        });
        TensorId((self.nodes.len() - 1) as u32)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    pub fn node(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.idx()]
    }

    pub fn vals(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.idx()].values
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.idx()];
        (n.rows, n.cols)
    }

    /// Value of a 1×1 tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.idx()];
        assert_eq!(n.len(), 1, "scalar() on non-scalar tensor");
        n.values[0]
    }

    pub fn grad_of(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.idx()].grad.as_deref()
    }

    fn vals2(&self, a: TensorId, b: TensorId) -> (&[f64], &[f64]) {
        (&self.nodes[a.idx()].values, &self.nodes[b.idx()].values)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        assert_eq!(values.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, values, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(1, 1, vec![v], false, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> TensorId {
        let v = pool_take(rows * cols);
        self.push(rows, cols, v, false, Op::Leaf)
    }

    /// Leaf tied to a parameter slot; backward accumulates into the store.
    pub fn param(&mut self, store: &ParamStore, slot: SlotId) -> TensorId {
        let e = store.entry(slot);
        let mut v = pool_take(e.len());
        v.copy_from_slice(&e.values);
        self.push(e.rows, e.cols, v, true, Op::Param(slot))
    }

    /// Non-parameter leaf that still collects gradient (for input-sensitivity
    /// checks; read it back with [`Graph::grad_of`]).
    pub fn variable(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        assert_eq!(values.len(), rows * cols, "variable shape mismatch");
        self.push(rows, cols, values, true, Op::Leaf)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert!(
            ar == br && ac == bc,
            "{what}: shape mismatch {ar}x{ac} vs {br}x{bc}"
        );
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorId {
        self.same_shape(a, b, what);
        let (r, c) = self.shape(a);
        let mut v = pool_take(r * c);
        {
            let (av, bv) = self.vals2(a, b);
            for ((o, &x), &y) in v.iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, v, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let (r, c) = self.shape(a);
        let mut v = pool_take(r * c);
        for (o, &x) in v.iter_mut().zip(self.vals(a)) {
            *o = f(x);
        }
        let rg = self.rg(a);
        self.push(r, c, v, rg, op)
    }

    pub fn add_const(&mut self, a: TensorId, k: f64) -> TensorId {
        self.unary(a, Op::AddConst(a), |x| x + k)
    }

    pub fn mul_const(&mut self, a: TensorId, k: f64) -> TensorId {
        self.unary(a, Op::MulConst(a, k), |x| x * k)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.mul_const(a, -1.0)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        self.unary(
            a,
            Op::LeakyRelu(a, slope),
            |x| if x > 0.0 { x } else { slope * x },
        )
    }

    /// Hard clamp; gradient is identity inside [lo, hi] and zero outside.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        assert!(lo <= hi, "clamp bounds inverted");
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Copy that blocks gradient flow.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let mut v = pool_take(r * c);
        v.copy_from_slice(self.vals(a));
        self.push(r, c, v, false, Op::Detach)
    }

    // ── matrix / broadcast ──────────────────────────────────────────────

    fn matmul_into(out: &mut [f64], av: &[f64], bv: &[f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (l, &x) in arow.iter().enumerate() {
                let brow = &bv[l * m..(l + 1) * m];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
    }

    /// (n×k) · (k×m) → (n×m).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner-dim mismatch {k} vs {k2}");
        let mut out = pool_take(n * m);
        {
            let (av, bv) = self.vals2(a, b);
            Self::matmul_into(&mut out, av, bv, n, k, m);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(n, m, out, rg, Op::MatMul(a, b))
    }

    /// Fused x·W + b: (n×k)·(k×m) + (1×m) → (n×m).
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        let (br, bm) = self.shape(b);
        assert_eq!(k, k2, "affine inner-dim mismatch {k} vs {k2}");
        assert!(br == 1 && bm == m, "affine bias wants 1x{m}, got {br}x{bm}");
        let mut out = pool_take(n * m);
        {
            let xv = self.vals(x);
            let wv = self.vals(w);
            let bv = &self.nodes[b.idx()].values;
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
            Self::matmul_into(&mut out, xv, wv, n, k, m);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(n, m, out, rg, Op::Affine(x, w, b))
    }

    /// (n×m) + (1×m) broadcast over rows (bias add).
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, m) = self.shape(a);
        let (br, bm) = self.shape(b);
        assert!(br == 1 && bm == m, "add_row wants 1x{m}, got {br}x{bm}");
        let mut v = pool_take(n * m);
        {
            let (av, bv) = self.vals2(a, b);
            for (orow, arow) in v.chunks_exact_mut(m).zip(av.chunks_exact(m)) {
                for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(bv) {
                    *o = x + y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(n, m, v, rg, Op::AddRow(a, b))
    }

    /// (n×m) ⊙ (1×m) broadcast over rows (per-column scaling / masking).
    pub fn mul_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, m) = self.shape(a);
        let (br, bm) = self.shape(b);
        assert!(br == 1 && bm == m, "mul_row wants 1x{m}, got {br}x{bm}");
        let mut v = pool_take(n * m);
        {
            let (av, bv) = self.vals2(a, b);
            for (orow, arow) in v.chunks_exact_mut(m).zip(av.chunks_exact(m)) {
                for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(bv) {
                    *o = x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(n, m, v, rg, Op::MulRow(a, b))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = self.vals(a).iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![v], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.node(a).len();
        assert!(n > 0, "mean_all of empty tensor");
        let v = self.vals(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        self.push(1, 1, vec![v], rg, Op::MeanAll(a))
    }

    /// Row sums: (n×m) → (n×1).
    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let (n, m) = self.shape(a);
        let mut v = pool_take(n);
        for (o, row) in v.iter_mut().zip(self.vals(a).chunks_exact(m)) {
            *o = row.iter().sum();
        }
        let rg = self.rg(a);
        self.push(n, 1, v, rg, Op::RowSum(a))
    }

    /// Row means: (n×m) → (n×1).
    pub fn row_mean(&mut self, a: TensorId) -> TensorId {
        let (n, m) = self.shape(a);
        assert!(m > 0, "row_mean of zero-width tensor");
        let mut v = pool_take(n);
        for (o, row) in v.iter_mut().zip(self.vals(a).chunks_exact(m)) {
            *o = row.iter().sum::<f64>() / m as f64;
        }
        let rg = self.rg(a);
        self.push(n, 1, v, rg, Op::RowMean(a))
    }

    /// Stable log-sum-exp per row: (n×m) → (n×1).
    pub fn logsumexp_row(&mut self, a: TensorId) -> TensorId {
        let (n, m) = self.shape(a);
        assert!(m > 0, "logsumexp_row of zero-width tensor");
        let mut v = pool_take(n);
        for (o, row) in v.iter_mut().zip(self.vals(a).chunks_exact(m)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            *o = if mx == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
            };
        }
        let rg = self.rg(a);
        self.push(n, 1, v, rg, Op::LogSumExpRow(a))
    }

    /// Fused squared-error row sum: Σ_j (a_ij − b_ij)² → (n×1).
    pub fn sq_err_row_sum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "sq_err_row_sum");
        let (n, m) = self.shape(a);
        let mut v = pool_take(n);
        {
            let (av, bv) = self.vals2(a, b);
            for ((o, arow), brow) in v
                .iter_mut()
                .zip(av.chunks_exact(m))
                .zip(bv.chunks_exact(m))
            {
                *o = arow
                    .iter()
                    .zip(brow)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(n, 1, v, rg, Op::SqErrRowSum(a, b))
    }

    // ── layout ──────────────────────────────────────────────────────────

    /// Concatenate along columns; all inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        for &p in parts {
            assert_eq!(self.shape(p).0, n, "concat_cols row mismatch");
        }
        let mut v = pool_take(n * total);
        let mut off = 0;
        for &p in parts {
            let (_, m) = self.shape(p);
            let pv = self.vals(p);
            for i in 0..n {
                v[i * total + off..i * total + off + m].copy_from_slice(&pv[i * m..(i + 1) * m]);
            }
            off += m;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(n, total, v, rg, Op::ConcatCols(parts.to_vec()))
    }

    /// Column slice [start, start+len).
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (n, m) = self.shape(a);
        assert!(start + len <= m, "slice_cols out of range");
        let mut v = pool_take(n * len);
        {
            let av = self.vals(a);
            for (orow, arow) in v.chunks_exact_mut(len).zip(av.chunks_exact(m)) {
                orow.copy_from_slice(&arow[start..start + len]);
            }
        }
        let rg = self.rg(a);
        self.push(n, len, v, rg, Op::SliceCols(a, start))
    }

    /// Repeat each row `times` consecutively: (n×m) → (n·times×m).
    pub fn repeat_rows(&mut self, a: TensorId, times: usize) -> TensorId {
        assert!(times > 0, "repeat_rows times=0");
        let (n, m) = self.shape(a);
        let mut v = pool_take(n * times * m);
        {
            let av = self.vals(a);
            for (i, arow) in av.chunks_exact(m).enumerate() {
                for t in 0..times {
                    let o = (i * times + t) * m;
                    v[o..o + m].copy_from_slice(arow);
                }
            }
        }
        let rg = self.rg(a);
        self.push(n * times, m, v, rg, Op::RepeatRows(a, times))
    }

    /// Reinterpret the buffer with a new shape of identical size.
    pub fn reshape(&mut self, a: TensorId, rows: usize, cols: usize) -> TensorId {
        let n = self.node(a).len();
        assert_eq!(n, rows * cols, "reshape size mismatch");
        let mut v = pool_take(n);
        v.copy_from_slice(self.vals(a));
        let rg = self.rg(a);
        self.push(rows, cols, v, rg, Op::Reshape(a))
    }

    /// Gather rows by index (indices may repeat).
    pub fn select_rows(&mut self, a: TensorId, idx: Rc<Vec<usize>>) -> TensorId {
        let (n, m) = self.shape(a);
        let mut v = pool_take(idx.len() * m);
        {
            let av = self.vals(a);
            for (o, &i) in idx.iter().enumerate() {
                assert!(i < n, "select_rows index out of range");
                v[o * m..(o + 1) * m].copy_from_slice(&av[i * m..(i + 1) * m]);
            }
        }
        let rg = self.rg(a);
        let rows = idx.len();
        self.push(rows, m, v, rg, Op::SelectRows(a, idx))
    }

    /// Mean of the other rows in the same group; zero when the row is alone.
    ///
    /// `groups[i]` labels row i; used for social pooling over co-agents.
    pub fn group_co_mean(&mut self, a: TensorId, groups: Rc<Vec<usize>>) -> TensorId {
        let (n, m) = self.shape(a);
        assert_eq!(groups.len(), n, "group_co_mean label count mismatch");
        let (sums, counts) = group_sums(self.vals(a), &groups, m);
        let mut v = pool_take(n * m);
        {
            let av = self.vals(a);
            for i in 0..n {
                let g = groups[i];
                let cnt = counts[g];
                if cnt > 1 {
                    let scale = 1.0 / (cnt - 1) as f64;
                    for j in 0..m {
                        v[i * m + j] = (sums[g * m + j] - av[i * m + j]) * scale;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(n, m, v, rg, Op::GroupCoMean(a, groups))
    }

    /// Prefix sums over (x, y) pairs within each row: column 2t accumulates
    /// columns 0,2,..,2t and likewise for odd columns. Turns per-step
    /// displacements into positions relative to the row origin.
    pub fn cumsum_pairs(&mut self, a: TensorId) -> TensorId {
        let (n, m) = self.shape(a);
        assert!(m % 2 == 0, "cumsum_pairs wants an even column count");
        let mut v = pool_take(n * m);
        {
            let av = self.vals(a);
            for (out, row) in v.chunks_exact_mut(m).zip(av.chunks_exact(m)) {
                let mut cx = 0.0;
                let mut cy = 0.0;
                for t in 0..m / 2 {
                    cx += row[2 * t];
                    cy += row[2 * t + 1];
                    out[2 * t] = cx;
                    out[2 * t + 1] = cy;
                }
            }
        }
        let rg = self.rg(a);
        self.push(n, m, v, rg, Op::CumSumPairs(a))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Parameter gradients are accumulated
    /// into `store` (repeated calls without `zero_grads` sum). Non-parameter
    /// `variable` leaves keep their gradient on the node.
    pub fn backward(&mut self, loss: TensorId, store: &mut ParamStore) -> Result<()> {
        if self.node(loss).len() != 1 {
            let (r, c) = self.shape(loss);
            return Err(GcrlError::Shape(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(()); // loss independent of every parameter
        }
        for n in &mut self.nodes {
            if let Some(g) = n.grad.take() {
                pool_give(g);
            }
        }
        self.nodes[loss.idx()].grad = Some(vec![1.0]);

        for i in (0..=loss.idx()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.apply_backward(i, &g, store);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f64> {
        let len = self.nodes[id.idx()].len();
        self.nodes[id.idx()]
            .grad
            .get_or_insert_with(|| pool_take(len))
    }

    fn accum(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if self.nodes[id.idx()].requires_grad {
            f(self.grad_buf(id));
        }
    }

    /// Values of `read` together with the gradient buffer of a different
    /// node `write`.
    fn val_and_grad(&mut self, read: TensorId, write: TensorId) -> (&[f64], &mut [f64]) {
        assert_ne!(read.idx(), write.idx());
        let len = self.nodes[write.idx()].len();
        self.nodes[write.idx()]
            .grad
            .get_or_insert_with(|| pool_take(len));
        let (r, w) = if read.idx() < write.idx() {
            let (lo, hi) = self.nodes.split_at_mut(write.idx());
            (&lo[read.idx()], &mut hi[0])
        } else {
            let (lo, hi) = self.nodes.split_at_mut(read.idx());
            (&hi[0], &mut lo[write.idx()])
        };
        (&r.values, w.grad.as_mut().unwrap())
    }

    /// One node's own values and gradient buffer (disjoint fields).
    fn node_val_grad(&mut self, id: TensorId) -> (&[f64], &mut [f64]) {
        let len = self.nodes[id.idx()].len();
        let Tensor { values, grad, .. } = &mut self.nodes[id.idx()];
        let g = grad.get_or_insert_with(|| pool_take(len));
        (values, g)
    }

    fn apply_backward(&mut self, i: usize, g: &[f64], store: &mut ParamStore) {
        let out_id = TensorId(i as u32);
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Detach => {}
            Op::Param(slot) => {
                let e = store.entry_mut(*slot);
                debug_assert_eq!(e.grad.len(), g.len(), "param grad shape mismatch");
                for (pg, &gi) in e.grad.iter_mut().zip(g) {
                    *pg += gi;
                }
            }
            Op::Add(a, b) => {
                self.accum(*a, |ga| add_into(ga, g, 1.0));
                self.accum(*b, |gb| add_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accum(*a, |ga| add_into(ga, g, 1.0));
                self.accum(*b, |gb| add_into(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                if a == b {
                    if self.rg(*a) {
                        let (av, ga) = self.node_val_grad(*a);
                        for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                            *o += 2.0 * gi * x;
                        }
                    }
                } else {
                    if self.rg(*a) {
                        let (bv, ga) = self.val_and_grad(*b, *a);
                        mul_add_into(ga, g, bv);
                    }
                    if self.rg(*b) {
                        let (av, gb) = self.val_and_grad(*a, *b);
                        mul_add_into(gb, g, av);
                    }
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let (bv, ga) = self.val_and_grad(*b, *a);
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi / bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.vals(*a).to_vec();
                    let (bv, gb) = self.node_val_grad(*b);
                    for (((o, &gi), &ai), &bi) in gb.iter_mut().zip(g).zip(&av).zip(bv) {
                        *o -= gi * ai / (bi * bi);
                    }
                }
            }
            Op::AddConst(a) => self.accum(*a, |ga| add_into(ga, g, 1.0)),
            Op::MulConst(a, k) => {
                let k = *k;
                self.accum(*a, |ga| add_into(ga, g, k));
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    let (ov, ga) = self.val_and_grad(out_id, *a);
                    mul_add_into(ga, g, ov);
                }
            }
            Op::Ln(a) => {
                if self.rg(*a) {
                    let (av, ga) = self.node_val_grad(*a);
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gi / x;
                    }
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let (ov, ga) = self.val_and_grad(out_id, *a);
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(ov) {
                        *o += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let (ov, ga) = self.val_and_grad(out_id, *a);
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(ov) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                if self.rg(*a) {
                    let (av, ga) = self.node_val_grad(*a);
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gi * if x > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                if self.rg(*a) {
                    let (av, ga) = self.node_val_grad(*a);
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x >= lo && x <= hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                if a == b {
                    if self.rg(*a) {
                        let av = self.vals(*a).to_vec();
                        let (_, ga) = self.node_val_grad(*a);
                        backprop_dx(ga, g, &av, n, k, m);
                        backprop_dw(ga, g, &av, n, k, m);
                    }
                } else {
                    if self.rg(*a) {
                        let (bv, ga) = self.val_and_grad(*b, *a);
                        backprop_dx(ga, g, bv, n, k, m);
                    }
                    if self.rg(*b) {
                        let (av, gb) = self.val_and_grad(*a, *b);
                        backprop_dw(gb, g, av, n, k, m);
                    }
                }
            }
            Op::Affine(x, w, bias) => {
                let (n, k) = self.shape(*x);
                let m = self.shape(*w).1;
                if self.rg(*x) {
                    let (wv, gx) = self.val_and_grad(*w, *x);
                    backprop_dx(gx, g, wv, n, k, m);
                }
                if self.rg(*w) {
                    let (xv, gw) = self.val_and_grad(*x, *w);
                    backprop_dw(gw, g, xv, n, k, m);
                }
                self.accum(*bias, |gb| {
                    for grow in g.chunks_exact(m) {
                        for (o, &gi) in gb.iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.accum(*a, |ga| add_into(ga, g, 1.0));
                let m = self.shape(*b).1;
                self.accum(*b, |gb| {
                    for grow in g.chunks_exact(m) {
                        for (o, &gi) in gb.iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::MulRow(a, b) => {
                let m = self.shape(*b).1;
                if self.rg(*a) {
                    let (bv, ga) = self.val_and_grad(*b, *a);
                    for (orow, grow) in ga.chunks_exact_mut(m).zip(g.chunks_exact(m)) {
                        for ((o, &gi), &y) in orow.iter_mut().zip(grow).zip(bv) {
                            *o += gi * y;
                        }
                    }
                }
                if self.rg(*b) {
                    let (av, gb) = self.val_and_grad(*a, *b);
                    for (arow, grow) in av.chunks_exact(m).zip(g.chunks_exact(m)) {
                        for ((o, &gi), &x) in gb.iter_mut().zip(grow).zip(arow) {
                            *o += gi * x;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g[0];
                self.accum(*a, |ga| {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.idx()].len();
                let s = g[0] / n as f64;
                self.accum(*a, |ga| {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                });
            }
            Op::RowSum(a) => {
                let m = self.shape(*a).1;
                self.accum(*a, |ga| {
                    for (orow, &gi) in ga.chunks_exact_mut(m).zip(g) {
                        for o in orow {
                            *o += gi;
                        }
                    }
                });
            }
            Op::RowMean(a) => {
                let m = self.shape(*a).1;
                self.accum(*a, |ga| {
                    for (orow, &gi) in ga.chunks_exact_mut(m).zip(g) {
                        let s = gi / m as f64;
                        for o in orow {
                            *o += s;
                        }
                    }
                });
            }
            Op::LogSumExpRow(a) => {
                let m = self.shape(*a).1;
                if self.rg(*a) {
                    let ov = self.nodes[i].values.clone();
                    let (av, ga) = self.node_val_grad(*a);
                    for (r, (orow, arow)) in ga
                        .chunks_exact_mut(m)
                        .zip(av.chunks_exact(m))
                        .enumerate()
                    {
                        let lse = ov[r];
                        let gi = g[r];
                        for (o, &x) in orow.iter_mut().zip(arow) {
                            *o += gi * (x - lse).exp();
                        }
                    }
                }
            }
            Op::SqErrRowSum(a, b) => {
                let m = self.shape(*a).1;
                if self.rg(*a) {
                    let diff = self.sq_err_diff(*a, *b, m, g);
                    self.accum(*a, |ga| add_into(ga, &diff, 1.0));
                }
                if self.rg(*b) {
                    let diff = self.sq_err_diff(*a, *b, m, g);
                    self.accum(*b, |gb| add_into(gb, &diff, -1.0));
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].cols;
                let mut off = 0;
                for &p in parts {
                    let m = self.shape(p).1;
                    self.accum(p, |gp| {
                        for (orow, grow) in
                            gp.chunks_exact_mut(m).zip(g.chunks_exact(total))
                        {
                            for (o, &gi) in orow.iter_mut().zip(&grow[off..off + m]) {
                                *o += gi;
                            }
                        }
                    });
                    off += m;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                let m = self.shape(*a).1;
                let len = self.nodes[i].cols;
                self.accum(*a, |ga| {
                    for (orow, grow) in ga.chunks_exact_mut(m).zip(g.chunks_exact(len)) {
                        for (o, &gi) in orow[start..start + len].iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::RepeatRows(a, times) => {
                let times = *times;
                let (n, m) = self.shape(*a);
                self.accum(*a, |ga| {
                    for i2 in 0..n {
                        let orow = &mut ga[i2 * m..(i2 + 1) * m];
                        for t in 0..times {
                            let grow = &g[(i2 * times + t) * m..(i2 * times + t + 1) * m];
                            for (o, &gi) in orow.iter_mut().zip(grow) {
                                *o += gi;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accum(*a, |ga| add_into(ga, g, 1.0)),
            Op::SelectRows(a, idx) => {
                let m = self.shape(*a).1;
                self.accum(*a, |ga| {
                    for (o, &src_row) in idx.iter().enumerate() {
                        for j in 0..m {
                            ga[src_row * m + j] += g[o * m + j];
                        }
                    }
                });
            }
            Op::GroupCoMean(a, groups) => {
                let (n, m) = self.shape(*a);
                let n_groups = groups.iter().copied().max().map_or(0, |x| x + 1);
                let mut gsum = vec![0.0; n_groups * m];
                let mut counts = vec![0usize; n_groups];
                for i2 in 0..n {
                    let gr = groups[i2];
                    counts[gr] += 1;
                    for j in 0..m {
                        gsum[gr * m + j] += g[i2 * m + j];
                    }
                }
                self.accum(*a, |ga| {
                    for i2 in 0..n {
                        let gr = groups[i2];
                        let cnt = counts[gr];
                        if cnt > 1 {
                            let scale = 1.0 / (cnt - 1) as f64;
                            for j in 0..m {
                                ga[i2 * m + j] += (gsum[gr * m + j] - g[i2 * m + j]) * scale;
                            }
                        }
                    }
                });
            }
            Op::CumSumPairs(a) => {
                let m = self.shape(*a).1;
                // d in[2t] = Σ_{τ≥t} g[2τ]  (reverse prefix sums per lane)
                self.accum(*a, |ga| {
                    for (orow, grow) in ga.chunks_exact_mut(m).zip(g.chunks_exact(m)) {
                        let mut sx = 0.0;
                        let mut sy = 0.0;
                        for t in (0..m / 2).rev() {
                            sx += grow[2 * t];
                            sy += grow[2 * t + 1];
                            orow[2 * t] += sx;
                            orow[2 * t + 1] += sy;
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    /// 2·(a − b) scaled per row by g, used by the fused squared-error
    /// backward.
    fn sq_err_diff(&self, a: TensorId, b: TensorId, m: usize, g: &[f64]) -> Vec<f64> {
        let (av, bv) = self.vals2(a, b);
        let mut out = vec![0.0; av.len()];
        for ((orow, arow), (brow, &gi)) in out
            .chunks_exact_mut(m)
            .zip(av.chunks_exact(m))
            .zip(bv.chunks_exact(m).zip(g))
        {
            for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(brow) {
                *o = 2.0 * gi * (x - y);
            }
        }
        out
    }
}

/// dX += G · Wᵀ for out = X·W (shapes: X n×k, W k×m, G n×m).
///
/// All-zero gradient rows are skipped: best-of-N prediction back-propagates
/// through one selected sample per agent, leaving most rows zero.
fn backprop_dx(gx: &mut [f64], g: &[f64], wv: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        if grow.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xrow = &mut gx[i * k..(i + 1) * k];
        for (l, o) in xrow.iter_mut().enumerate() {
            let wrow = &wv[l * m..(l + 1) * m];
            let mut acc = 0.0;
            for (&gi, &wi) in grow.iter().zip(wrow) {
                acc += gi * wi;
            }
            *o += acc;
        }
    }
}

/// dW += Xᵀ · G for out = X·W; zero gradient rows and zero inputs skipped.
fn backprop_dw(gw: &mut [f64], g: &[f64], xv: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        if grow.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xrow = &xv[i * k..(i + 1) * k];
        for (l, &x) in xrow.iter().enumerate() {
            if x != 0.0 {
                let orow = &mut gw[l * m..(l + 1) * m];
                for (o, &gi) in orow.iter_mut().zip(grow) {
                    *o += x * gi;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s * k;
    }
}

fn mul_add_into(dst: &mut [f64], g: &[f64], v: &[f64]) {
    for ((o, &gi), &vi) in dst.iter_mut().zip(g).zip(v) {
        *o += gi * vi;
    }
}

fn group_sums(vals: &[f64], groups: &[usize], m: usize) -> (Vec<f64>, Vec<usize>) {
    let n_groups = groups.iter().copied().max().map_or(0, |x| x + 1);
    let mut sums = vec![0.0; n_groups * m];
    let mut counts = vec![0usize; n_groups];
    for (i, &g) in groups.iter().enumerate() {
        counts[g] += 1;
        for j in 0..m {
            sums[g * m + j] += vals[i * m + j];
        }
    }
    (sums, counts)
}

/// Per-graph builder that caches parameter nodes so each slot is added once.
pub struct GraphBuild<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    param_nodes: HashMap<usize, TensorId>,
}

impl<'a> GraphBuild<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            param_nodes: HashMap::new(),
        }
    }

    pub fn param(&mut self, slot: SlotId) -> TensorId {
        if let Some(&id) = self.param_nodes.get(&slot.0) {
            return id;
        }
        let id = self.g.param(self.store, slot);
        self.param_nodes.insert(slot.0, id);
        id
    }
}
