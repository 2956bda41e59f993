use std::rc::Rc;

use super::{DiffError, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { x: Var, idx: Rc<[usize]> },
    SegmentSum { x: Var, seg: Rc<[usize]> },
    NeighborSoftmax { x: Var, seg: Rc<[usize]>, segments: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Rc<[(usize, usize, f64)]>, probs: Tensor, total_weight: f64 },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in evaluation order, so the reverse of the insertion
/// order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1×c` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(mismatch("add_row", xv, rv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// `x·W + b` with `W` stored as in×out and `b` as `1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same(bv, "add")?;
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same(bv, "mul")?;
        let mut out = av.clone();
        for (o, y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x))
    }

    /// Concatenate along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(DiffError::EmptyConcat)?);
        let out = if axis == 0 {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = self.value(*p);
                if t.cols() != cols {
                    return Err(mismatch("concat", first, t));
                }
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
            Tensor::new(rows, cols, data)?
        } else {
            let rows = first.rows();
            let mut cols = 0;
            for p in parts {
                let t = self.value(*p);
                if t.rows() != rows {
                    return Err(mismatch("concat", first, t));
                }
                cols += t.cols();
            }
            let mut out = Tensor::zeros(rows, cols);
            let mut off = 0;
            for p in parts {
                let t = self.value(*p);
                for r in 0..rows {
                    out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                }
                off += t.cols();
            }
            out
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Row `k` of the output is row `idx[k]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(DiffError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: xv.rows(),
            });
        }
        let out = xv.select_rows(&idx);
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    /// Sums rows of `x` into `segments` buckets: output row `s` is the sum of
    /// the rows `k` with `seg[k] == s`. Empty buckets are zero.
    pub fn segment_sum(&mut self, x: Var, seg: Rc<[usize]>, segments: usize) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_sum", xv, &seg, segments)?;
        let mut out = Tensor::zeros(segments, xv.cols());
        for (k, &s) in seg.iter().enumerate() {
            for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(k)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum { x, seg }))
    }

    /// Softmax over the rows sharing a segment id, independently per column,
    /// with max subtraction.
    pub fn neighbor_softmax(&mut self, x: Var, seg: Rc<[usize]>, segments: usize) -> Result<Var> {
        let xv = self.value(x);
        check_segments("neighbor_softmax", xv, &seg, segments)?;
        let cols = xv.cols();
        let mut max = Tensor::filled(segments, cols, f64::NEG_INFINITY);
        for (k, &s) in seg.iter().enumerate() {
            for (m, v) in max.row_mut(s).iter_mut().zip(xv.row(k)) {
                *m = m.max(*v);
            }
        }
        let mut out = xv.clone();
        let mut sum = Tensor::zeros(segments, cols);
        for (k, &s) in seg.iter().enumerate() {
            let mrow = max.row(s).to_vec();
            for ((o, m), acc) in out.row_mut(k).iter_mut().zip(&mrow).zip(sum.row_mut(s)) {
                *o = (*o - m).exp();
                *acc += *o;
            }
        }
        for (k, &s) in seg.iter().enumerate() {
            let srow = sum.row(s).to_vec();
            for (o, d) in out.row_mut(k).iter_mut().zip(&srow) {
                *o /= d;
            }
        }
        Ok(self.push(out, Op::NeighborSoftmax { x, seg, segments }))
    }

    /// Row-wise layer normalization with population variance, then
    /// `gain ⊙ x̂ + bias` (both `1×c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.shape() != (1, c) {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.shape() != (1, c) {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Weighted mean cross-entropy. `targets` holds `(row, class, weight)`;
    /// rows not listed do not contribute. Returns a `1×1` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[(usize, usize, f64)]>) -> Result<Var> {
        let lv = self.value(logits);
        let total_weight: f64 = targets.iter().map(|t| t.2).sum();
        if targets.is_empty() || total_weight <= 0.0 {
            return Err(DiffError::EmptyTargets);
        }
        for &(r, c, _) in targets.iter() {
            if r >= lv.rows() || c >= lv.cols() {
                return Err(DiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: r.max(c),
                    len: lv.rows().max(lv.cols()),
                });
            }
        }
        let probs = lv.softmax_rows();
        let mut loss = 0.0;
        for &(r, c, w) in targets.iter() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[c]);
        }
        loss /= total_weight;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                total_weight,
            },
        ))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(DiffError::NonScalarOutput(out.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                // keep gradients of leaves for the caller
                grads[idx] = Some(g);
                continue;
            }
            let mut send = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, g.matmul_t(bv));
                    send(*b, av.t_matmul(&g));
                }
                Op::AddRow(x, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(*row, gr);
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let mut ga = g.clone();
                    for (o, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= y;
                    }
                    let mut gb = g;
                    for (o, x) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= x;
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    for v in gx.data_mut() {
                        *v *= c;
                    }
                    send(*x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (o, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    send(*x, gx);
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut row = 0;
                        for p in parts {
                            let pr = self.value(*p).rows();
                            let cols = g.cols();
                            let data = g.data()[row * cols..(row + pr) * cols].to_vec();
                            send(*p, Tensor::new(pr, cols, data)?);
                            row += pr;
                        }
                    } else {
                        let mut off = 0;
                        for p in parts {
                            let pc = self.value(*p).cols();
                            send(*p, g.col_slice(off, off + pc));
                            off += pc;
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    send(*x, gx);
                }
                Op::SegmentSum { x, seg } => {
                    send(*x, g.select_rows(seg));
                }
                Op::NeighborSoftmax { x, seg, segments } => {
                    let y = &node.value;
                    let mut dot = Tensor::zeros(*segments, y.cols());
                    for (k, &s) in seg.iter().enumerate() {
                        for ((d, yv), gv) in dot.row_mut(s).iter_mut().zip(y.row(k)).zip(g.row(k)) {
                            *d += yv * gv;
                        }
                    }
                    let mut gx = g.clone();
                    for (k, &s) in seg.iter().enumerate() {
                        let drow = dot.row(s).to_vec();
                        for ((o, yv), d) in gx.row_mut(k).iter_mut().zip(y.row(k)).zip(&drow) {
                            *o = yv * (*o - d);
                        }
                    }
                    send(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let c = xhat.cols();
                    let mut ggain = Tensor::zeros(1, c);
                    let mut gbias = Tensor::zeros(1, c);
                    let mut gx = Tensor::zeros(xhat.rows(), c);
                    for r in 0..xhat.rows() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            ggain.data_mut()[j] += gr[j] * xr[j];
                            gbias.data_mut()[j] += gr[j];
                            let d = gr[j] * gv.data()[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        let scale = inv_std[r] / c as f64;
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            let d = gr[j] * gv.data()[j];
                            out[j] = scale * (c as f64 * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                    send(*gain, ggain);
                    send(*bias, gbias);
                    send(*x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    total_weight,
                } => {
                    let upstream = g.data()[0];
                    let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                    for &(r, c, w) in targets.iter() {
                        let coef = upstream * w / total_weight;
                        for (j, (o, p)) in gl.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            *o += coef * (p - if j == c { 1.0 } else { 0.0 });
                        }
                    }
                    send(*logits, gl);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    send(*x, Tensor::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn check_segments(op: &'static str, x: &Tensor, seg: &[usize], segments: usize) -> Result<()> {
    if seg.len() != x.rows() {
        return Err(DiffError::ShapeMismatch {
            op,
            left: x.shape(),
            right: (seg.len(), 1),
        });
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
        return Err(DiffError::IndexOutOfRange {
            op,
            index: bad,
            len: segments,
        });
    }
    Ok(())
}
