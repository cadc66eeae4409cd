//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Values are computed
//! eagerly, so the same code path serves plain evaluation (no leaf asks for a
//! gradient) and training (parameters registered with [`Tape::param`]).
//! [`Tape::backward`] walks the record in reverse and accumulates adjoints.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{FlowError, Result};
use crate::tensor::{gemm_at, gemm_bt, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulMasked(Var, Var, Arc<Tensor>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Expand(Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Powf(Var, f64),
    Sum(Var),
    SumCols(Var),
    ColMean(Var),
    GatherCols(Var, Arc<[usize]>),
    ScatterCols(Var, Arc<[usize]>),
    ConcatCols(Var, Var),
    Reshape(Var),
    LogSumExpLast(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// ∂loss/∂v. Values the loss does not depend on get a zero tensor.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        match &self.grads[v.index()] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index()]),
        }
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> FlowError {
    FlowError::dim(op, format!("{:?} and {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(FlowError::usage("variable is not recorded on this tape"));
        }
        Ok(())
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index()]
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.node(v).needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · (w ⊙ mask)`. Masked-out weight entries never receive gradient.
    pub fn matmul_masked(&mut self, a: Var, w: Var, mask: Arc<Tensor>) -> Result<Var> {
        let value = self.value(a).matmul_masked(self.value(w), &mask)?;
        let ng = self.ng(&[a, w]);
        Ok(self.push(value, Op::MatMulMasked(a, w, mask), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let value = ta.zip_map(tb, f)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.len() != ta.cols() {
            return Err(dim_err(name, ta, tb));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, tb.data()[k % c]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    /// `a[N×D] + b[D]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "add_row", |x, y| x + y, Op::AddRow(a, b))
    }

    /// `a[N×D] ⊙ b[D]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "mul_row", |x, y| x * y, Op::MulRow(a, b))
    }

    /// Repeat a one-element tensor into a vector of length `n`.
    pub fn expand(&mut self, s: Var, n: usize) -> Result<Var> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(FlowError::dim("expand", format!("expected one element, got {:?}", t.shape())));
        }
        let value = Tensor::full(&[n], t.item());
        let ng = self.ng(&[s]);
        Ok(self.push(value, Op::Expand(s), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x <= 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of `[N×D]`, shape `[N]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(FlowError::dim("sum_cols", format!("expected a matrix, got {:?}", t.shape())));
        }
        let value = Tensor::vector((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect());
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::SumCols(a), ng))
    }

    /// Column means of `[N×D]`, shape `[D]`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(FlowError::dim("col_mean", format!("expected a matrix, got {:?}", t.shape())));
        }
        let (n, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, &x) in out.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::vector(out), Op::ColMean(a), ng))
    }

    /// Columns `idx` of a matrix. Indices may repeat.
    pub fn gather_cols(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx = idx.into();
        let t = self.value(a);
        if t.ndim() != 2 || idx.iter().any(|&j| j >= t.cols()) {
            return Err(FlowError::dim("gather_cols", format!("indices {idx:?} into {:?}", t.shape())));
        }
        let value = t.select_cols(&idx);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::GatherCols(a, idx), ng))
    }

    /// Place the columns of `a` at distinct positions `idx` of a `width`-wide
    /// zero matrix.
    pub fn scatter_cols(&mut self, a: Var, idx: impl Into<Arc<[usize]>>, width: usize) -> Result<Var> {
        let idx = idx.into();
        let t = self.value(a);
        let mut seen = vec![false; width];
        let distinct = idx.iter().all(|&j| j < width && !std::mem::replace(&mut seen[j], true));
        if t.ndim() != 2 || t.cols() != idx.len() || !distinct {
            return Err(FlowError::dim("scatter_cols", format!("{:?} into width {width} at {idx:?}", t.shape())));
        }
        let n = t.rows();
        let mut out = vec![0.0; n * width];
        for r in 0..n {
            for (k, &j) in idx.iter().enumerate() {
                out[r * width + j] = t.get(r, k);
            }
        }
        let value = Tensor::matrix(n, width, out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::ScatterCols(a, idx), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.rows() != tb.rows() {
            return Err(dim_err("concat_cols", ta, tb));
        }
        let (n, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(ta.row_slice(r));
            out.extend_from_slice(tb.row_slice(r));
        }
        let value = Tensor::matrix(n, p + q, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Log-sum-exp over the last axis of `[R×C]`, shape `[R]`.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(FlowError::dim("logsumexp_last", format!("expected a matrix, got {:?}", t.shape())));
        }
        let value = Tensor::vector((0..t.rows()).map(|r| crate::tensor::log_sum_exp(t.row_slice(r))).collect());
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::LogSumExpLast(a), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(FlowError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.index() + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.index()].value;
        let wants = |v: Var| self.nodes[v.index()].needs_grad;
        let mut acc = |v: Var, contrib: Tensor| {
            if !wants(v) {
                return;
            }
            match &mut grads[v.index()] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::new(x.shape().to_vec(), x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect())
                .expect("same shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_bt(g.data(), tb.data(), &mut ga, m, n, k);
                    acc(*a, Tensor::new(ta.shape().to_vec(), ga).expect("shape"));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_at(ta.data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::new(tb.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::MatMulMasked(a, w, mask) => {
                let (ta, tw) = (val(*a), val(*w));
                let (m, k, n) = (ta.rows(), ta.cols(), tw.cols());
                if wants(*a) {
                    let eff: Vec<f64> = tw.data().iter().zip(mask.data()).map(|(x, y)| x * y).collect();
                    let mut ga = vec![0.0; m * k];
                    gemm_bt(g.data(), &eff, &mut ga, m, n, k);
                    acc(*a, Tensor::new(ta.shape().to_vec(), ga).expect("shape"));
                }
                if wants(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm_at(ta.data(), g.data(), &mut gw, m, k, n);
                    for (x, &keep) in gw.iter_mut().zip(mask.data()) {
                        if keep == 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(*w, Tensor::new(tw.shape().to_vec(), gw).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, elementwise(val(*b), &|bv, gv| bv * gv));
                acc(*b, elementwise(val(*a), &|av, gv| av * gv));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, column_sums(g));
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                if wants(*a) {
                    let ga = g.data().iter().enumerate().map(|(k, &gv)| gv * tb.data()[k % c]).collect();
                    acc(*a, Tensor::new(ta.shape().to_vec(), ga).expect("shape"));
                }
                if wants(*b) {
                    let prod = elementwise(ta, &|av, gv| av * gv);
                    acc(*b, Tensor::new(tb.shape().to_vec(), column_sums(&prod).into_data()).expect("shape"));
                }
            }
            Op::Expand(s) => acc(*s, Tensor::new(val(*s).shape().to_vec(), vec![g.sum()]).expect("shape")),
            Op::Neg(a) => acc(*a, g.map(|x| -x)),
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, elementwise(&node.value, &|y, gv| y * gv)),
            Op::Log(a) => acc(*a, elementwise(val(*a), &|x, gv| gv / x)),
            Op::Tanh(a) => acc(*a, elementwise(&node.value, &|y, gv| (1.0 - y * y) * gv)),
            Op::Relu(a) => acc(*a, elementwise(val(*a), &|x, gv| if x > 0.0 { gv } else { 0.0 })),
            Op::Square(a) => acc(*a, elementwise(val(*a), &|x, gv| 2.0 * x * gv)),
            Op::Powf(a, p) => acc(*a, elementwise(val(*a), &|x, gv| p * x.powf(p - 1.0) * gv)),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::SumCols(a) => {
                let t = val(*a);
                let c = t.cols();
                let data = (0..t.len()).map(|k| g.data()[k / c]).collect();
                acc(*a, Tensor::new(t.shape().to_vec(), data).expect("shape"));
            }
            Op::ColMean(a) => {
                let t = val(*a);
                let (n, c) = (t.rows() as f64, t.cols());
                let data = (0..t.len()).map(|k| g.data()[k % c] / n).collect();
                acc(*a, Tensor::new(t.shape().to_vec(), data).expect("shape"));
            }
            Op::GatherCols(a, idx) => {
                let t = val(*a);
                let (n, c, k) = (t.rows(), t.cols(), idx.len());
                let mut out = vec![0.0; n * c];
                for r in 0..n {
                    for (p, &j) in idx.iter().enumerate() {
                        out[r * c + j] += g.data()[r * k + p];
                    }
                }
                acc(*a, Tensor::new(t.shape().to_vec(), out).expect("shape"));
            }
            Op::ScatterCols(a, idx) => {
                let sel = g.select_cols(idx);
                acc(*a, Tensor::new(val(*a).shape().to_vec(), sel.into_data()).expect("shape"));
            }
            Op::ConcatCols(a, b) => {
                let p = val(*a).cols();
                let q = val(*b).cols();
                acc(*a, g.select_cols(&(0..p).collect::<Vec<_>>()));
                acc(*b, g.select_cols(&(p..p + q).collect::<Vec<_>>()));
            }
            Op::Reshape(a) => acc(*a, Tensor::new(val(*a).shape().to_vec(), g.data().to_vec()).expect("shape")),
            Op::LogSumExpLast(a) => {
                let t = val(*a);
                let c = t.cols();
                let lse = node.value.data();
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| g.data()[k / c] * (x - lse[k / c]).exp())
                    .collect();
                acc(*a, Tensor::new(t.shape().to_vec(), data).expect("shape"));
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for (k, &x) in g.data().iter().enumerate() {
        out[k % c] += x;
    }
    Tensor::vector(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            out.data_mut()[k] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.param(pseudo(&[3, 4], 1));
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(p).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn half_sum_of_squares_gradient_is_p() {
        let mut t = Tape::new();
        let p0 = pseudo(&[5], 2);
        let p = t.param(p0.clone());
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(p).max_abs_diff(&p0) < 1e-15);
    }

    #[test]
    fn untouched_parameter_gets_zero() {
        let mut t = Tape::new();
        let p = t.param(pseudo(&[2, 2], 3));
        let q = t.param(pseudo(&[3], 4));
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(q), Tensor::zeros(&[3]));
    }

    #[test]
    fn loss_from_another_tape_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let _ = a.param(Tensor::scalar(1.0));
        let pb = b.param(Tensor::scalar(1.0));
        let lb = b.sum(pb);
        assert!(matches!(a.backward(lb), Err(FlowError::Usage(_))));
        let v = a.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(a.backward(v).is_err());
    }

    #[test]
    fn masked_weight_gradient_is_exactly_zero() {
        let mask = Arc::new(Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap());
        let mut t = Tape::new();
        let x = t.constant(pseudo(&[4, 2], 5));
        let w = t.param(pseudo(&[2, 3], 6));
        let y = t.matmul_masked(x, w, mask.clone()).unwrap();
        let y2 = t.tanh(y);
        let l = t.sum(y2);
        let g = t.backward(l).unwrap().wrt(w);
        for (gv, m) in g.data().iter().zip(mask.data()) {
            if *m == 0.0 {
                assert_eq!(*gv, 0.0);
            } else {
                assert_ne!(*gv, 0.0);
            }
        }
    }

    /// Every primitive against central differences through a composite loss.
    #[test]
    fn primitives_match_finite_differences() {
        let mask = Arc::new(Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]).unwrap());
        let x0 = pseudo(&[4, 2], 10);
        let w0 = pseudo(&[2, 3], 11);
        let v0 = pseudo(&[3, 3], 12);
        let b0 = pseudo(&[3], 13);

        let build = |x: &Tensor, w: &Tensor, v: &Tensor, b: &Tensor, t: &mut Tape, grad: bool| {
            let leaf = |t: &mut Tape, v: &Tensor| if grad { t.param(v.clone()) } else { t.constant(v.clone()) };
            let (x, w, v, b) = (leaf(t, x), leaf(t, w), leaf(t, v), leaf(t, b));
            let h = t.matmul_masked(x, w, mask.clone()).unwrap();
            let h = t.add_row(h, b).unwrap();
            let h1 = t.tanh(h);
            let h2 = t.relu(h);
            let h = t.add(h1, h2).unwrap();
            let h = t.matmul(h, v).unwrap();
            let e = t.exp(h);
            let s = t.mul_row(e, b).unwrap();
            let sq = t.square(s);
            let sq = t.add_const(sq, 1.0);
            let lg = t.log(sq);
            let m = t.col_mean(lg).unwrap();
            let p = t.powf(sq, 0.5);
            let pm = t.gather_cols(p, vec![2, 0, 0]).unwrap();
            let d = t.sub(pm, lg).unwrap();
            let d = t.scatter_cols(d, vec![3, 1, 0], 4).unwrap();
            let d = t.concat_cols(d, h).unwrap();
            let r = t.reshape(d, &[14, 2]).unwrap();
            let r = t.neg(r);
            let l = t.logsumexp_last(r).unwrap();
            let rs = t.sum_cols(d).unwrap();
            let a = t.sum(l);
            let bsum = t.sum(m);
            let c = t.expand(bsum, 4).unwrap();
            let c = t.mul(c, rs).unwrap();
            let cs = t.sum(c);
            let total = t.add(a, cs).unwrap();
            let total = t.scale(total, 0.3);
            (total, [x, w, v, b])
        };

        let mut t = Tape::new();
        let (loss, leaves) = build(&x0, &w0, &v0, &b0, &mut t, true);
        let g = t.backward(loss).unwrap();

        let eval = |x: &Tensor, w: &Tensor, v: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (l, _) = build(x, w, v, b, &mut t, false);
            t.value(l).item()
        };
        let h = 1e-5;
        let fd = [
            central_diff(&|x| eval(x, &w0, &v0, &b0), &x0, h),
            central_diff(&|w| eval(&x0, w, &v0, &b0), &w0, h),
            central_diff(&|v| eval(&x0, &w0, v, &b0), &v0, h),
            central_diff(&|b| eval(&x0, &w0, &v0, b), &b0, h),
        ];
        for (leaf, num) in leaves.iter().zip(&fd) {
            let err = rel_err(&g.wrt(*leaf), num);
            assert!(err < 1e-4, "relative error {err}");
        }
    }
}
