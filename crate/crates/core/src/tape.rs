//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every forward op appends one entry to the tape and only references
//! earlier entries, so the record is acyclic by construction. `backward`
//! walks the entries once in reverse order, accumulating vector-Jacobian
//! products into the inputs.
//!
//! Besides the usual dense algebra the tape has a handful of graph
//! primitives (`gather_rows`, `scatter_add_rows`, `segment_softmax`,
//! `head_dot`, `head_scale`) so that edge-level attention over a whole
//! graph is a few dozen tape entries rather than one per edge.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{log1p_exp, sigmoid, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of the asymmetric multi-label loss.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AslSpec {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    AddRow(VarId, VarId),
    Scale(VarId, f64),
    AddConst(VarId),
    MulConst(VarId, Arc<Tensor>),
    Sigmoid(VarId),
    Tanh(VarId),
    LeakyRelu(VarId, f64),
    Softplus(VarId),
    Exp(VarId),
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    SliceCols(VarId, usize),
    GatherRows(VarId, Arc<[usize]>),
    ScatterAddRows(VarId, Arc<[usize]>),
    HeadDot(VarId, VarId, usize),
    HeadScale(VarId, VarId, usize),
    SegmentSoftmax(VarId, Arc<[usize]>, usize),
    RowSoftmax(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    RowCosine(VarId, VarId),
    Asl(VarId, Arc<Tensor>, AslSpec),
    EdgeHeadDot(VarId, VarId, Arc<[usize]>, Arc<[usize]>, usize),
    EdgeAggregate(VarId, VarId, Arc<[usize]>, Arc<[usize]>, usize),
}

impl Op {
    fn inputs(&self) -> Vec<VarId> {
        match self {
            Op::Leaf | Op::Const => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::HeadDot(a, b, _)
            | Op::HeadScale(a, b, _)
            | Op::RowCosine(a, b)
            | Op::EdgeHeadDot(a, b, ..)
            | Op::EdgeAggregate(a, b, ..) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::SegmentSoftmax(a, ..)
            | Op::RowSoftmax(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Asl(a, ..) => vec![*a],
            Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every tape entry that feeds it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero when `v` does not influence the loss.
    pub fn get(&self, v: VarId) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_opt(&self, v: VarId) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<VarId> {
        let value = check(name, value)?;
        Ok(self.push(value, op))
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Const)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).add(self.value(b))?;
        self.push_checked("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).sub(self.value(b))?;
        self.push_checked("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).mul(self.value(b))?;
        self.push_checked("mul", out, Op::Mul(a, b))
    }

    /// `a + row` with `row` (1 x c) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push_checked("add_row", out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let out = self.value(a).scale(c);
        self.push_checked("scale", out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let out = self.value(a).map(|v| v + c);
        self.push_checked("add_const", out, Op::AddConst(a))
    }

    /// Elementwise product with a constant (non-differentiated) tensor, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: VarId, mask: Arc<Tensor>) -> Result<VarId> {
        let out = self.value(a).mul(&mask)?;
        self.push_checked("mul_const", out, Op::MulConst(a, mask))
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let out = self.value(a).map(sigmoid);
        self.push_checked("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let out = self.value(a).map(f64::tanh);
        self.push_checked("tanh", out, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> Result<VarId> {
        let out = self
            .value(a)
            .map(|v| crate::tensor::leaky_relu(v, slope));
        self.push_checked("leaky_relu", out, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        let out = self.value(a).map(log1p_exp);
        self.push_checked("softplus", out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        let out = self.value(a).map(f64::exp);
        self.push_checked("exp", out, Op::Exp(a))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, width: usize) -> Result<VarId> {
        let x = self.value(a);
        if start + width > x.cols() {
            return Err(Error::shape("slice_cols", x.shape(), [start, width]));
        }
        let out = x.slice_cols(start, width);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: VarId, idx: Arc<[usize]>) -> Result<VarId> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape("gather_rows", x.shape(), [bad, 0]));
        }
        let out = x.select_rows(&idx);
        Ok(self.push(out, Op::GatherRows(a, idx)))
    }

    /// Output has `n` rows; row `idx[i]` accumulates row `i` of `a`.
    pub fn scatter_add_rows(&mut self, a: VarId, idx: Arc<[usize]>, n: usize) -> Result<VarId> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return Err(Error::shape("scatter_add_rows", x.shape(), [idx.len(), 1]));
        }
        let mut out = Tensor::zeros(n, x.cols());
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return Err(Error::shape("scatter_add_rows", [n, x.cols()], [dst, 0]));
            }
            for (o, v) in out.row_mut(dst).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.push_checked("scatter_add_rows", out, Op::ScatterAddRows(a, idx))
    }

    /// Per-head dot products: `a` and `b` have `heads * w` columns, the
    /// output has `heads` columns. `b` may be a single row broadcast over `a`.
    pub fn head_dot(&mut self, a: VarId, b: VarId, heads: usize) -> Result<VarId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() || heads == 0 || x.cols() % heads != 0 || !(y.rows() == x.rows() || y.rows() == 1) {
            return Err(Error::shape("head_dot", x.shape(), y.shape()));
        }
        let w = x.cols() / heads;
        let mut out = Tensor::zeros(x.rows(), heads);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = if y.rows() == 1 { y.row(0) } else { y.row(r) };
            let orow = out.row_mut(r);
            for (h, o) in orow.iter_mut().enumerate() {
                let s = h * w;
                *o = xr[s..s + w].iter().zip(&yr[s..s + w]).map(|(p, q)| p * q).sum();
            }
        }
        self.push_checked("head_dot", out, Op::HeadDot(a, b, heads))
    }

    /// Scales each head block of `x` (n x heads*w) by the matching column of `wts` (n x heads).
    pub fn head_scale(&mut self, x: VarId, wts: VarId, heads: usize) -> Result<VarId> {
        let (xv, wv) = (self.value(x), self.value(wts));
        if wv.cols() != heads || xv.rows() != wv.rows() || heads == 0 || xv.cols() % heads != 0 {
            return Err(Error::shape("head_scale", xv.shape(), wv.shape()));
        }
        let w = xv.cols() / heads;
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let wr = wv.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o *= wr[j / w];
            }
        }
        self.push_checked("head_scale", out, Op::HeadScale(x, wts, heads))
    }

    /// `out[e, h] = a[ia[e]] . b[ib[e]]` restricted to head block `h`.
    /// Equivalent to `head_dot(gather_rows(a, ia), gather_rows(b, ib))`.
    pub fn edge_head_dot(
        &mut self,
        a: VarId,
        b: VarId,
        ia: Arc<[usize]>,
        ib: Arc<[usize]>,
        heads: usize,
    ) -> Result<VarId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.cols() || heads == 0 || x.cols() % heads != 0 || ia.len() != ib.len() {
            return Err(Error::shape("edge_head_dot", x.shape(), y.shape()));
        }
        if ia.iter().any(|&r| r >= x.rows()) || ib.iter().any(|&r| r >= y.rows()) {
            return Err(Error::shape("edge_head_dot", x.shape(), y.shape()));
        }
        let w = x.cols() / heads;
        let mut out = Tensor::zeros(ia.len(), heads);
        for (e, (&ra, &rb)) in ia.iter().zip(ib.iter()).enumerate() {
            let (xr, yr) = (x.row(ra), y.row(rb));
            for (h, o) in out.row_mut(e).iter_mut().enumerate() {
                let blk = h * w..(h + 1) * w;
                *o = xr[blk.clone()].iter().zip(&yr[blk]).map(|(p, q)| p * q).sum();
            }
        }
        self.push_checked("edge_head_dot", out, Op::EdgeHeadDot(a, b, ia, ib, heads))
    }

    /// `out[dst[e]] += wts[e, h] * vals[src[e]]` per head block; `n` output rows.
    /// Equivalent to `scatter_add_rows(head_scale(gather_rows(vals, src), wts), dst, n)`.
    pub fn edge_aggregate(
        &mut self,
        wts: VarId,
        vals: VarId,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
        n: usize,
        heads: usize,
    ) -> Result<VarId> {
        let (wv, v) = (self.value(wts), self.value(vals));
        if wv.cols() != heads || heads == 0 || v.cols() % heads != 0 || wv.rows() != src.len() || src.len() != dst.len() {
            return Err(Error::shape("edge_aggregate", wv.shape(), v.shape()));
        }
        if src.iter().any(|&r| r >= v.rows()) || dst.iter().any(|&r| r >= n) {
            return Err(Error::shape("edge_aggregate", [n, v.cols()], v.shape()));
        }
        let w = v.cols() / heads;
        let mut out = Tensor::zeros(n, v.cols());
        for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
            let wrow = wv.row(e);
            let vrow = v.row(s);
            for (j, o) in out.row_mut(d).iter_mut().enumerate() {
                *o += wrow[j / w] * vrow[j];
            }
        }
        self.push_checked("edge_aggregate", out, Op::EdgeAggregate(wts, vals, src, dst, heads))
    }

    /// Column-wise softmax within groups of rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: VarId, seg: Arc<[usize]>, n_seg: usize) -> Result<VarId> {
        let x = self.value(a);
        if seg.len() != x.rows() {
            return Err(Error::shape("segment_softmax", x.shape(), [seg.len(), 1]));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(Error::shape("segment_softmax", [n_seg, 0], [bad, 0]));
        }
        let c = x.cols();
        let mut max = Tensor::filled(n_seg, c, f64::NEG_INFINITY);
        for (r, &s) in seg.iter().enumerate() {
            for (m, v) in max.row_mut(s).iter_mut().zip(x.row(r)) {
                if *v > *m {
                    *m = *v;
                }
            }
        }
        let mut out = x.clone();
        let mut total = vec![0.0; n_seg * c];
        let (md, od) = (max.data(), out.data_mut());
        for (r, &s) in seg.iter().enumerate() {
            let (o, m, t) = (&mut od[r * c..(r + 1) * c], &md[s * c..(s + 1) * c], &mut total[s * c..(s + 1) * c]);
            for j in 0..c {
                o[j] = (o[j] - m[j]).exp();
                t[j] += o[j];
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            let (o, t) = (&mut od[r * c..(r + 1) * c], &total[s * c..(s + 1) * c]);
            for j in 0..c {
                o[j] /= t[j];
            }
        }
        self.push_checked("segment_softmax", out, Op::SegmentSoftmax(a, seg, n_seg))
    }

    /// Softmax across the columns of each row.
    pub fn row_softmax(&mut self, a: VarId) -> Result<VarId> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::EmptyMask);
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push_checked("row_softmax", out, Op::RowSoftmax(a))
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_checked("sum_all", out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        self.push_checked("mean_all", out, Op::MeanAll(a))
    }

    /// Row-wise cosine similarity (n x 1). A row where either side is the
    /// zero vector yields 0 and passes no gradient.
    pub fn row_cosine(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("row_cosine", x.shape(), y.shape()));
        }
        let mut out = Tensor::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let (u, v) = (x.row(r), y.row(r));
            let (nu, nv) = (crate::tensor::norm(u), crate::tensor::norm(v));
            if nu > 0.0 && nv > 0.0 {
                out.set(r, 0, crate::tensor::dot(u, v) / (nu * nv));
            }
        }
        self.push_checked("row_cosine", out, Op::RowCosine(a, b))
    }

    /// Asymmetric multi-label loss averaged over rows, summed over columns.
    pub fn asl(&mut self, logits: VarId, labels: Arc<Tensor>, spec: AslSpec) -> Result<VarId> {
        let z = self.value(logits);
        if z.shape() != labels.shape() {
            return Err(Error::shape("asl", z.shape(), labels.shape()));
        }
        let mut total = 0.0;
        for (&zi, &yi) in z.data().iter().zip(labels.data()) {
            total += asl_term(zi, yi, spec).0;
        }
        let out = Tensor::scalar(total / z.rows().max(1) as f64);
        self.push_checked("asl", out, Op::Asl(logits, labels, spec))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: VarId, d: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d).expect("gradient shape"),
            slot @ None => *slot = Some(d),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: VarId| &self.nodes[v.0].value;
        let need = |v: VarId| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    let da = g.matmul(&val(*b).transpose())?;
                    self.acc(grads, *a, da);
                }
                if need(*b) {
                    let db = val(*a).transpose().matmul(g)?;
                    self.acc(grads, *b, db);
                }
            }
            Op::EdgeHeadDot(a, b, ia, ib, heads) => {
                let (x, y) = (val(*a), val(*b));
                let w = x.cols() / heads;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                let mut dy = Tensor::zeros(y.rows(), y.cols());
                for (e, (&ra, &rb)) in ia.iter().zip(ib.iter()).enumerate() {
                    let grow = g.row(e);
                    let (xr, yr) = (x.row(ra), y.row(rb));
                    for (h, &gv) in grow.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let blk = h * w..(h + 1) * w;
                        for (d, &yv) in dx.row_mut(ra)[blk.clone()].iter_mut().zip(&yr[blk.clone()]) {
                            *d += gv * yv;
                        }
                        for (d, &xv) in dy.row_mut(rb)[blk.clone()].iter_mut().zip(&xr[blk]) {
                            *d += gv * xv;
                        }
                    }
                }
                self.acc(grads, *a, dx);
                self.acc(grads, *b, dy);
            }
            Op::EdgeAggregate(wts, vals, src, dst, heads) => {
                let (wv, v) = (val(*wts), val(*vals));
                let w = v.cols() / heads;
                let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                let mut dv = Tensor::zeros(v.rows(), v.cols());
                for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                    let (grow, vrow) = (g.row(d), v.row(s));
                    let wrow = wv.row(e);
                    let dwr = dw.row_mut(e);
                    for h in 0..*heads {
                        let blk = h * w..(h + 1) * w;
                        dwr[h] = grow[blk.clone()].iter().zip(&vrow[blk]).map(|(p, q)| p * q).sum();
                    }
                    let dvr = dv.row_mut(s);
                    for (j, o) in dvr.iter_mut().enumerate() {
                        *o += wrow[j / w] * grow[j];
                    }
                }
                self.acc(grads, *wts, dw);
                self.acc(grads, *vals, dv);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.mul(val(*b))?);
                self.acc(grads, *b, g.mul(val(*a))?);
            }
            Op::AddRow(a, row) => {
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.acc(grads, *a, g.clone());
                self.acc(grads, *row, dr);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c)),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::MulConst(a, mask) => self.acc(grads, *a, g.mul(mask)?),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv));
                self.acc(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = zip_map(g, val(*a), |gv, xv| if xv >= 0.0 { gv } else { gv * slope });
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip_map(g, val(*a), |gv, xv| gv * sigmoid(xv));
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = zip_map(g, &node.value, |gv, yv| gv * yv);
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    self.acc(grads, p, g.slice_cols(start, w));
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let idx: Vec<usize> = (start..start + rows).collect();
                    self.acc(grads, p, g.select_rows(&idx));
                    start += rows;
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let w = g.cols();
                for r in 0..x.rows() {
                    d.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ScatterAddRows(a, idx) => {
                self.acc(grads, *a, g.select_rows(idx));
            }
            Op::HeadDot(a, b, heads) => {
                let (x, y) = (val(*a), val(*b));
                let w = x.cols() / heads;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                let mut dy = Tensor::zeros(y.rows(), y.cols());
                let broadcast = y.rows() == 1 && x.rows() != 1;
                for r in 0..x.rows() {
                    let yr_idx = if broadcast { 0 } else { r };
                    let grow = g.row(r);
                    for h in 0..*heads {
                        let gv = grow[h];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in h * w..(h + 1) * w {
                            let xv = x.get(r, j);
                            let yv = y.get(yr_idx, j);
                            dx.data_mut()[r * x.cols() + j] += gv * yv;
                            dy.data_mut()[yr_idx * y.cols() + j] += gv * xv;
                        }
                    }
                }
                self.acc(grads, *a, dx);
                self.acc(grads, *b, dy);
            }
            Op::HeadScale(x, wts, heads) => {
                let (xv, wv) = (val(*x), val(*wts));
                let w = xv.cols() / heads;
                let mut dx = g.clone();
                let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                for r in 0..xv.rows() {
                    let wr = wv.row(r).to_vec();
                    let grow = g.row(r);
                    let xrow = xv.row(r);
                    let dwr = dw.row_mut(r);
                    for j in 0..xv.cols() {
                        dwr[j / w] += grow[j] * xrow[j];
                    }
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d *= wr[j / w];
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *wts, dw);
            }
            Op::SegmentSoftmax(a, seg, n_seg) => {
                let y = &node.value;
                let c = y.cols();
                let mut s = Tensor::zeros(*n_seg, c);
                for (r, &sg) in seg.iter().enumerate() {
                    for ((acc, yv), gv) in s.row_mut(sg).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *acc += yv * gv;
                    }
                }
                let mut d = Tensor::zeros(y.rows(), c);
                for (r, &sg) in seg.iter().enumerate() {
                    let srow = s.row(sg);
                    let (yr, gr) = (y.row(r), g.row(r));
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - srow[j]);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let [r, c] = val(*a).shape();
                self.acc(grads, *a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let [r, c] = val(*a).shape();
                let n = (r * c).max(1) as f64;
                self.acc(grads, *a, Tensor::filled(r, c, g.data()[0] / n));
            }
            Op::RowCosine(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                let mut dy = Tensor::zeros(y.rows(), y.cols());
                for r in 0..x.rows() {
                    let (u, v) = (x.row(r), y.row(r));
                    let (nu, nv) = (crate::tensor::norm(u), crate::tensor::norm(v));
                    if nu == 0.0 || nv == 0.0 {
                        continue;
                    }
                    let c = node.value.get(r, 0);
                    let gv = g.get(r, 0);
                    for j in 0..u.len() {
                        dx.data_mut()[r * x.cols() + j] = gv * (v[j] / (nu * nv) - c * u[j] / (nu * nu));
                        dy.data_mut()[r * y.cols() + j] = gv * (u[j] / (nu * nv) - c * v[j] / (nv * nv));
                    }
                }
                self.acc(grads, *a, dx);
                self.acc(grads, *b, dy);
            }
            Op::Asl(z, labels, spec) => {
                let zv = val(*z);
                let scale = g.data()[0] / zv.rows().max(1) as f64;
                let mut d = Tensor::zeros(zv.rows(), zv.cols());
                for ((o, &zi), &yi) in d.data_mut().iter_mut().zip(zv.data()).zip(labels.data()) {
                    *o = scale * asl_term(zi, yi, *spec).1;
                }
                self.acc(grads, *z, d);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}


/// Value and derivative (w.r.t. the logit) of one ASL entry.
///
/// Positive: `(1-p)^gp * -ln p`. Negative: `pm^gn * -ln(1-pm)` with
/// `pm = max(p - margin, 0)`.
pub(crate) fn asl_term(z: f64, y: f64, spec: AslSpec) -> (f64, f64) {
    let p = sigmoid(z);
    let q = sigmoid(-z); // 1 - p without cancellation
    let mut value = 0.0;
    let mut deriv = 0.0;
    if y > 0.0 {
        let neg_log_p = log1p_exp(-z);
        let focus = if spec.gamma_pos == 0.0 { 1.0 } else { q.powf(spec.gamma_pos) };
        value += y * focus * neg_log_p;
        // d/dz = (1-p)^gp * (gp * p * ln p - (1-p))
        deriv += y * focus * (-spec.gamma_pos * p * neg_log_p - q);
    }
    if y < 1.0 {
        let w = 1.0 - y;
        if spec.margin == 0.0 {
            let neg_log_q = log1p_exp(z);
            let focus = if spec.gamma_neg == 0.0 { 1.0 } else { p.powf(spec.gamma_neg) };
            value += w * focus * neg_log_q;
            // d/dz = p^gn * (gn * (1-p) * -ln(1-p) + p)
            deriv += w * focus * (spec.gamma_neg * q * neg_log_q + p);
        } else if p > spec.margin {
            let pm = p - spec.margin;
            let one_minus_pm = q + spec.margin;
            let neg_log = -one_minus_pm.ln();
            let focus = if spec.gamma_neg == 0.0 { 1.0 } else { pm.powf(spec.gamma_neg) };
            value += w * focus * neg_log;
            let dfocus = if spec.gamma_neg == 0.0 {
                0.0
            } else {
                spec.gamma_neg * pm.powf(spec.gamma_neg - 1.0)
            };
            let d_dpm = dfocus * neg_log + focus / one_minus_pm;
            deriv += w * d_dpm * p * q;
        }
    }
    (value, deriv)
}
