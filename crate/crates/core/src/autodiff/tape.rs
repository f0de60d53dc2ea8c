//! Wengert tape: every primitive records itself as it runs, and
//! [`Tape::backward`] replays the records in reverse.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    id: usize,
}

impl Var {
    /// Node id within the owning tape.
    pub fn id(self) -> usize {
        self.id
    }
}

/// How the right operand of a binary elementwise op is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[1, C]` over `[R, C]`.
    Row,
    /// One element over anything.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Softplus(usize),
    Sqrt(usize),
    Square(usize),
    Log(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    L2Norm(usize, usize),
    ClampMin(usize, f64),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    GatherRows(usize, Arc<[usize]>),
    SegmentSum(usize, Arc<[usize]>),
    SegmentSoftmax(usize, Arc<[usize]>),
    ScaleRows(usize, usize),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Scale(..) => "scalar_mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::L2Norm(..) => "l2_norm",
            Op::ClampMin(..) => "clamp_min",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::ScaleRows(..) => "scale_rows",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by leaf node id.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it does not require grad or the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A single-threaded differentiation tape. Create one per training step and
/// drop it after the optimizer update.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes per primitive kind.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            *counts.entry(node.op.kind()).or_insert(0) += 1;
        }
        counts
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers an already shared tensor without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable belongs to another tape");
        &self.nodes[var.id].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    fn check(&self, var: Var) -> Result<usize, TensorError> {
        if var.tape != self.id || var.id >= self.nodes.len() {
            return Err(TensorError::DetachedTape);
        }
        Ok(var.id)
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, id }
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Arc::new(value), op, rg)
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        let (m, k) = av.require_rank2("matmul")?;
        let (k2, n) = bv.require_rank2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        Ok(self.push_op(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    // ---- elementwise binary ---------------------------------------------

    fn bcast(&self, op: &'static str, a: usize, b: usize) -> Result<Bcast, TensorError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.val(b).numel() == 1 {
            return Ok(Bcast::Scalar);
        }
        if sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1] {
            return Ok(Bcast::Row);
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let mode = self.bcast(name, ia, ib)?;
        let (av, bv) = (self.val(ia), self.val(ib));
        let data: Vec<f64> = match mode {
            Bcast::Same => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let y = bv.data()[0];
                av.data().iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Row => {
                let c = av.cols();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[i % c]))
                    .collect()
            }
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, make(ia, ib, mode), &[ia, ib]))
    }

    /// `a + b`; `b` may be a scalar or a `[1, C]` row over `[R, C]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a[E,C]` with row `e` multiplied by `w[e,0]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        let (ia, iw) = (self.check(a)?, self.check(w)?);
        let (av, wv) = (self.val(ia), self.val(iw));
        let (e, c) = av.require_rank2("scale_rows")?;
        if wv.shape() != [e, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: av.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for (r, &s) in wv.data().iter().enumerate() {
            for x in &mut data[r * c..(r + 1) * c] {
                *x *= s;
            }
        }
        let out = Tensor::new(vec![e, c], data)?;
        Ok(self.push_op(out, Op::ScaleRows(ia, iw), &[ia, iw]))
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(f);
        Ok(self.push_op(out, op(ia), &[ia]))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary(a, |x| x * s, |i| Op::Scale(i, s))
    }

    /// `a + s` for a constant `s`.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary(a, |x| x + s, Op::AddScalar)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.scalar_mul(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        domain_check(self.val(ia), "sqrt", |x| x >= 0.0)?;
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        domain_check(self.val(ia), "log", |x| x > 0.0)?;
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// `max(a, lo)`; gradient passes only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var, TensorError> {
        self.unary(a, |x| if x > lo { x } else { lo }, |i| Op::ClampMin(i, lo))
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.val(ia).data().iter().sum());
        Ok(self.push_op(out, Op::Sum(ia), &[ia]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        if v.numel() == 0 {
            return Err(TensorError::Empty { op: "mean" });
        }
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        Ok(self.push_op(out, Op::Mean(ia), &[ia]))
    }

    /// Sums a rank-2 tensor along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        let (r, c) = v.require_rank2("sum_axis")?;
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for row in v.data().chunks(c.max(1)) {
                    for (o, x) in acc.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                Tensor::new(vec![1, c], acc)?
            }
            1 => Tensor::new(
                vec![r, 1],
                (0..r).map(|i| v.row_slice(i).iter().sum()).collect(),
            )?,
            _ => return Err(TensorError::Axis { op: "sum_axis", axis }),
        };
        Ok(self.push_op(out, Op::SumAxis(ia, axis), &[ia]))
    }

    /// Softmax of a rank-2 tensor along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        let (r, c) = v.require_rank2("softmax")?;
        let out = match axis {
            0 => {
                let mut data = vec![0.0; r * c];
                for j in 0..c {
                    let lane: Vec<f64> = (0..r).map(|i| v.data()[i * c + j]).collect();
                    for (i, s) in softmax_slice(&lane).into_iter().enumerate() {
                        data[i * c + j] = s;
                    }
                }
                data
            }
            1 => (0..r).flat_map(|i| softmax_slice(v.row_slice(i))).collect(),
            _ => return Err(TensorError::Axis { op: "softmax", axis }),
        };
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push_op(out, Op::Softmax(ia, axis), &[ia]))
    }

    /// Euclidean norm of a rank-2 tensor along `axis`.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        let (r, c) = v.require_rank2("l2_norm")?;
        let out = match axis {
            0 => Tensor::new(
                vec![1, c],
                (0..c)
                    .map(|j| (0..r).map(|i| v.data()[i * c + j].powi(2)).sum::<f64>().sqrt())
                    .collect(),
            )?,
            1 => Tensor::new(
                vec![r, 1],
                (0..r)
                    .map(|i| v.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect(),
            )?,
            _ => return Err(TensorError::Axis { op: "l2_norm", axis }),
        };
        Ok(self.push_op(out, Op::L2Norm(ia, axis), &[ia]))
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates rank-2 tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let (r0, c0) = self.val(ids[0]).require_rank2("concat")?;
        let mut total = 0;
        for &i in &ids {
            let (r, c) = self.val(i).require_rank2("concat")?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(TensorError::Axis { op: "concat", axis }),
            };
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            total += if axis == 0 { r } else { c };
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for &i in &ids {
                data.extend_from_slice(self.val(i).data());
            }
            Tensor::new(vec![total, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for row in 0..r0 {
                for &i in &ids {
                    data.extend_from_slice(self.val(i).row_slice(row));
                }
            }
            Tensor::new(vec![r0, total], data)?
        };
        Ok(self.push_op(out, Op::Concat(ids.clone(), axis), &ids))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = (*v).clone().reshaped(shape);
        Ok(self.push_op(out, Op::Reshape(ia), &[ia]))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        let (r, c) = v.require_rank2("gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push_op(out, Op::GatherRows(ia, index.into()), &[ia]))
    }

    /// Sums row `e` of `a` into output row `segment[e]`; output has `n` rows.
    pub fn segment_sum(&mut self, a: Var, segment: &[usize], n: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        let (e, c) = v.require_rank2("segment_sum")?;
        check_segments("segment_sum", segment, e, n)?;
        let mut data = vec![0.0; n * c];
        for (row, &s) in segment.iter().enumerate() {
            for (o, x) in data[s * c..(s + 1) * c].iter_mut().zip(v.row_slice(row)) {
                *o += x;
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push_op(out, Op::SegmentSum(ia, segment.into()), &[ia]))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segment: &[usize], n: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        let (e, c) = v.require_rank2("segment_softmax")?;
        check_segments("segment_softmax", segment, e, n)?;
        let mut max = vec![f64::NEG_INFINITY; n * c];
        for (row, &s) in segment.iter().enumerate() {
            for (m, &x) in max[s * c..(s + 1) * c].iter_mut().zip(v.row_slice(row)) {
                *m = m.max(x);
            }
        }
        let mut data = vec![0.0; e * c];
        let mut denom = vec![0.0; n * c];
        for (row, &s) in segment.iter().enumerate() {
            for j in 0..c {
                let ex = (v.data()[row * c + j] - max[s * c + j]).exp();
                data[row * c + j] = ex;
                denom[s * c + j] += ex;
            }
        }
        for (row, &s) in segment.iter().enumerate() {
            for j in 0..c {
                data[row * c + j] /= denom[s * c + j];
            }
        }
        let out = Tensor::new(vec![e, c], data)?;
        Ok(self.push_op(out, Op::SegmentSoftmax(ia, segment.into()), &[ia]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a one-element `loss`. Returns gradients for every
    /// leaf that requires grad and that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let root = self.check(loss)?;
        let lv = self.val(root);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        let mut out = HashMap::new();
        if !self.nodes[root].requires_grad {
            return Ok(Gradients {
                tape: self.id,
                grads: out,
            });
        }
        grads[root] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.insert(id, g);
                }
                op => self.propagate(op, id, &g, &mut grads),
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.val(id).shape());
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn reduce_bcast(&self, g: &Tensor, target: usize, mode: Bcast) -> Tensor {
        let shape = self.val(target).shape().to_vec();
        match mode {
            Bcast::Same => g.clone(),
            Bcast::Scalar => Tensor::full(shape, g.data().iter().sum()),
            Bcast::Row => {
                let c = g.cols();
                let mut acc = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (a, x) in acc.iter_mut().zip(row) {
                        *a += x;
                    }
                }
                Tensor::new(shape, acc).expect("row broadcast shape")
            }
        }
    }

    fn expand_bcast(&self, src: usize, like: &Tensor, mode: Bcast) -> Vec<f64> {
        let v = self.val(src);
        match mode {
            Bcast::Same => v.data().to_vec(),
            Bcast::Scalar => vec![v.data()[0]; like.numel()],
            Bcast::Row => {
                let c = like.cols();
                (0..like.numel()).map(|i| v.data()[i % c]).collect()
            }
        }
    }

    fn propagate(&self, op: &Op, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.val(id);
        let shaped = |data: Vec<f64>, like: usize| {
            Tensor::new(self.val(like).shape().to_vec(), data).expect("gradient shape")
        };
        let zip_map = |a: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = self.val(a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&g, &x), &y)| f(g, x, y))
                .collect();
            shaped(data, a)
        };
        match *op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.wants(a) {
                    let ga = matmul_bt_raw(g.data(), bv.data(), m, n, k);
                    self.accumulate(grads, a, shaped(ga, a));
                }
                if self.wants(b) {
                    let gb = matmul_at_raw(av.data(), g.data(), m, k, n);
                    self.accumulate(grads, b, shaped(gb, b));
                }
            }
            Op::Add(a, b, mode) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    let gb = self.reduce_bcast(g, b, mode);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Sub(a, b, mode) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    let gb = self.reduce_bcast(&g.map(|x| -x), b, mode);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Mul(a, b, mode) => {
                if self.wants(a) {
                    let bx = self.expand_bcast(b, g, mode);
                    let ga = g.data().iter().zip(&bx).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, a, shaped(ga, a));
                }
                if self.wants(b) {
                    let prod: Vec<f64> = g.data().iter().zip(self.val(a).data()).map(|(g, x)| g * x).collect();
                    let prod = Tensor::new(g.shape().to_vec(), prod).expect("shape");
                    let gb = self.reduce_bcast(&prod, b, mode);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::ScaleRows(a, w) => {
                let (av, wv) = (self.val(a), self.val(w));
                let c = av.cols();
                if self.wants(a) {
                    let mut ga = g.data().to_vec();
                    for (r, &s) in wv.data().iter().enumerate() {
                        for x in &mut ga[r * c..(r + 1) * c] {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, a, shaped(ga, a));
                }
                if self.wants(w) {
                    let gw = (0..av.rows())
                        .map(|r| g.row_slice(r).iter().zip(av.row_slice(r)).map(|(g, x)| g * x).sum())
                        .collect();
                    self.accumulate(grads, w, shaped(gw, w));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = g.clone().reshaped(self.val(a).shape().to_vec());
                self.accumulate(grads, a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_map(a, &|g, x, _| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_map(a, &|g, x, _| g * sigmoid(x));
                self.accumulate(grads, a, ga);
            }
            Op::Sqrt(a) => {
                let ga = zip_map(a, &|g, _, y| g / (2.0 * y));
                self.accumulate(grads, a, ga);
            }
            Op::Square(a) => {
                let ga = zip_map(a, &|g, x, _| 2.0 * g * x);
                self.accumulate(grads, a, ga);
            }
            Op::Log(a) => {
                let ga = zip_map(a, &|g, x, _| g / x);
                self.accumulate(grads, a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(a, &|g, _, y| g * y);
                self.accumulate(grads, a, ga);
            }
            Op::ClampMin(a, lo) => {
                let ga = zip_map(a, &|g, x, _| if x > lo { g } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.val(a).shape().to_vec(), g.item());
                self.accumulate(grads, a, ga);
            }
            Op::Mean(a) => {
                let n = self.val(a).numel() as f64;
                let ga = Tensor::full(self.val(a).shape().to_vec(), g.item() / n);
                self.accumulate(grads, a, ga);
            }
            Op::SumAxis(a, axis) => {
                let av = self.val(a);
                let c = av.cols();
                let ga = (0..av.numel())
                    .map(|i| if axis == 0 { g.data()[i % c] } else { g.data()[i / c] })
                    .collect();
                self.accumulate(grads, a, shaped(ga, a));
            }
            Op::Softmax(a, axis) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                if axis == 1 {
                    for i in 0..r {
                        let s = out.row_slice(i);
                        let gr = g.row_slice(i);
                        let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                        for j in 0..c {
                            ga[i * c + j] = s[j] * (gr[j] - dot);
                        }
                    }
                } else {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| out.data()[i * c + j] * g.data()[i * c + j]).sum();
                        for i in 0..r {
                            ga[i * c + j] = out.data()[i * c + j] * (g.data()[i * c + j] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, shaped(ga, a));
            }
            Op::L2Norm(a, axis) => {
                let av = self.val(a);
                let c = av.cols();
                let ga = (0..av.numel())
                    .map(|i| {
                        let k = if axis == 0 { i % c } else { i / c };
                        let n = out.data()[k];
                        if n > 0.0 {
                            g.data()[k] * av.data()[i] / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, a, shaped(ga, a));
            }
            Op::Concat(ref ids, axis) => {
                let total_cols = out.cols();
                let mut offset = 0;
                for &i in ids {
                    let v = self.val(i);
                    let (r, c) = (v.rows(), v.cols());
                    if self.wants(i) {
                        let gi: Vec<f64> = if axis == 0 {
                            g.data()[offset * c..(offset + r) * c].to_vec()
                        } else {
                            (0..r)
                                .flat_map(|row| {
                                    g.data()[row * total_cols + offset..row * total_cols + offset + c]
                                        .iter()
                                        .copied()
                                })
                                .collect()
                        };
                        self.accumulate(grads, i, shaped(gi, i));
                    }
                    offset += if axis == 0 { r } else { c };
                }
            }
            Op::GatherRows(a, ref index) => {
                let av = self.val(a);
                let c = av.cols();
                let mut ga = vec![0.0; av.numel()];
                for (row, &i) in index.iter().enumerate() {
                    for (o, x) in ga[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(row)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, a, shaped(ga, a));
            }
            Op::SegmentSum(a, ref segment) => {
                let ga = segment.iter().flat_map(|&s| g.row_slice(s).iter().copied()).collect();
                self.accumulate(grads, a, shaped(ga, a));
            }
            Op::SegmentSoftmax(a, ref segment) => {
                let c = out.cols();
                let n = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n * c];
                for (row, &s) in segment.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += out.data()[row * c + j] * g.data()[row * c + j];
                    }
                }
                let mut ga = vec![0.0; out.numel()];
                for (row, &s) in segment.iter().enumerate() {
                    for j in 0..c {
                        let k = row * c + j;
                        ga[k] = out.data()[k] * (g.data()[k] - dot[s * c + j]);
                    }
                }
                self.accumulate(grads, a, shaped(ga, a));
            }
        }
    }
}

fn check_segments(op: &'static str, segment: &[usize], rows: usize, n: usize) -> Result<(), TensorError> {
    if segment.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![rows],
            rhs: vec![segment.len()],
        });
    }
    if let Some(&bad) = segment.iter().find(|&&s| s >= n) {
        return Err(TensorError::Index { op, index: bad, len: n });
    }
    Ok(())
}

fn domain_check(t: &Tensor, op: &'static str, ok: impl Fn(f64) -> bool) -> Result<(), TensorError> {
    match t.data().iter().position(|&x| !ok(x)) {
        Some(index) => Err(TensorError::Domain {
            op,
            index,
            value: t.data()[index],
        }),
        None => Ok(()),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
