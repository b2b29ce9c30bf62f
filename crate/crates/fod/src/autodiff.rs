//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward_params`]
//! walks the list in reverse and accumulates gradients into a [`ParamStore`].
//! Nodes are appended strictly after their parents, so a single reverse sweep
//! is a valid topological order. Several roots (the two phase losses) can be
//! back-propagated over one shared forward tape; gradients accumulate.
//!
//! Stop-gradient is a first-class node: its value passes through but no
//! gradient crosses it. For finite-difference verification the tape can
//! record the values seen at stop-gradient nodes and replay them on later
//! evaluations, holding those nodes constant on the numeric path as well.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Var {
    id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Tanh(usize),
    Recip(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    RowSum(usize),
    RowMean(usize),
    /// Row-wise scaling: `out[i, j] = x[i, j] * s[i]`.
    ScaleRows(usize, usize),
    /// Row-wise shift: `out[i, j] = x[i, j] - c[i]`.
    SubCol(usize, usize),
    /// Column-wise scaling: `out[i, j] = x[i, j] * v[j]`.
    MulRowVec(usize, usize),
    /// Column-wise shift: `out[i, j] = x[i, j] + v[j]`.
    AddRowVec(usize, usize),
    ConcatCols(Vec<usize>),
    /// Scalar variable times tensor.
    MulScalar(usize, usize),
    StopGradient(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

enum SgState {
    Live,
    Record(Vec<Tensor>),
    Replay { vals: Vec<Tensor>, next: usize },
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    sg: RefCell<SgState>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            sg: RefCell::new(SgState::Live),
        }
    }

    /// Tape that records the value seen at every stop-gradient node.
    pub fn recording_sg() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            sg: RefCell::new(SgState::Record(Vec::new())),
        }
    }

    /// Tape that substitutes previously recorded values at stop-gradient
    /// nodes, in encounter order.
    pub fn replaying_sg(vals: Vec<Tensor>) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            sg: RefCell::new(SgState::Replay { vals, next: 0 }),
        }
    }

    pub fn into_sg_record(self) -> Vec<Tensor> {
        match self.sg.into_inner() {
            SgState::Record(v) => v,
            _ => Vec::new(),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    // ---- leaves ------------------------------------------------------

    /// Non-learnable input; no gradient is reported for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf bound to a parameter; backward accumulates into its grad.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<(Tensor, Tensor)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "{name}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        Ok((ta.clone(), tb.clone()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape(a, b, "add")?;
        let mut out = ta;
        out.add_assign(&tb);
        Ok(self.push(out, Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape(a, b, "sub")?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape(a, b, "mul")?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a.id, b.id)))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape(a, b, "div")?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x / y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Div(a.id, b.id)))
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes.borrow()[a.id].value.map(f);
        self.push(value, op)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, Op::Neg(a.id), |x| -x)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a.id), |x| x + c)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    /// Natural log; callers clamp first when the argument can reach zero.
    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a.id), f64::ln)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.id), f64::sqrt)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.id), f64::tanh)
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Op::Recip(a.id), |x| 1.0 / x)
    }

    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a.id, floor), |x| x.max(floor))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            matmul(&nodes[a.id].value, &nodes[b.id].value)?
        };
        Ok(self.push(value, Op::MatMul(a.id, b.id)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            if t.rank() != 2 {
                return Err(Error::dim(format!(
                    "transpose needs rank 2, got {:?}",
                    t.shape()
                )));
            }
            t.transposed()
        };
        Ok(self.push(value, Op::Transpose(a.id)))
    }

    /// Row-stochastic softmax with row-max subtraction for stability.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            if t.rank() != 2 {
                return Err(Error::dim(format!(
                    "softmax_rows needs rank 2, got {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite("softmax_rows input".into()));
            }
            softmax_rows_value(t)
        };
        Ok(self.push(value, Op::SoftmaxRows(a.id)))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let s: f64 = self.nodes.borrow()[a.id].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.id))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let d = nodes[a.id].value.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        drop(nodes);
        self.push(Tensor::scalar(m), Op::MeanAll(a.id))
    }

    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            if t.rank() != 2 {
                return Err(Error::dim(format!("row_sum needs rank 2, got {:?}", t.shape())));
            }
            let (n, m) = (t.rows(), t.cols());
            Tensor::from_fn(vec![n], |i| t.data()[i * m..(i + 1) * m].iter().sum())
        };
        Ok(self.push(value, Op::RowSum(a.id)))
    }

    pub fn row_mean(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.id].value;
            if t.rank() != 2 {
                return Err(Error::dim(format!(
                    "row_mean needs rank 2, got {:?}",
                    t.shape()
                )));
            }
            let (n, m) = (t.rows(), t.cols());
            Tensor::from_fn(vec![n], |i| {
                t.data()[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64
            })
        };
        Ok(self.push(value, Op::RowMean(a.id)))
    }

    // ---- broadcasting helpers ------------------------------------------

    fn rows_vec_pair(&self, x: Var, v: Var, name: &str, want_rows: bool) -> Result<(Tensor, Tensor)> {
        let nodes = self.nodes.borrow();
        let (tx, tv) = (&nodes[x.id].value, &nodes[v.id].value);
        if tx.rank() != 2 || tv.rank() != 1 {
            return Err(Error::dim(format!(
                "{name}: need rank-2 and rank-1, got {:?} and {:?}",
                tx.shape(),
                tv.shape()
            )));
        }
        let expect = if want_rows { tx.rows() } else { tx.cols() };
        if tv.len() != expect {
            return Err(Error::dim(format!(
                "{name}: vector length {} does not match extent {}",
                tv.len(),
                expect
            )));
        }
        Ok((tx.clone(), tv.clone()))
    }

    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = self.rows_vec_pair(x, s, "scale_rows", true)?;
        let m = tx.cols();
        let value = Tensor::from_fn(vec![tx.rows(), m], |i| tx.data()[i] * ts.data()[i / m]);
        Ok(self.push(value, Op::ScaleRows(x.id, s.id)))
    }

    pub fn sub_col(&self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = self.rows_vec_pair(x, c, "sub_col", true)?;
        let m = tx.cols();
        let value = Tensor::from_fn(vec![tx.rows(), m], |i| tx.data()[i] - tc.data()[i / m]);
        Ok(self.push(value, Op::SubCol(x.id, c.id)))
    }

    pub fn mul_row_vec(&self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = self.rows_vec_pair(x, v, "mul_row_vec", false)?;
        let m = tx.cols();
        let value = Tensor::from_fn(vec![tx.rows(), m], |i| tx.data()[i] * tv.data()[i % m]);
        Ok(self.push(value, Op::MulRowVec(x.id, v.id)))
    }

    pub fn add_row_vec(&self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = self.rows_vec_pair(x, v, "add_row_vec", false)?;
        let m = tx.cols();
        let value = Tensor::from_fn(vec![tx.rows(), m], |i| tx.data()[i] + tv.data()[i % m]);
        Ok(self.push(value, Op::AddRowVec(x.id, v.id)))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols of zero parts"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[parts[0].id].value.rows();
            let mut total = 0;
            for p in parts {
                let t = &nodes[p.id].value;
                if t.rank() != 2 || t.rows() != n {
                    return Err(Error::dim("concat_cols: row counts differ"));
                }
                total += t.cols();
            }
            let mut out = Tensor::zeros(vec![n, total]);
            let mut col0 = 0;
            for p in parts {
                let t = &nodes[p.id].value;
                let m = t.cols();
                for i in 0..n {
                    let src = t.row(i);
                    let dst = &mut out.data_mut()[i * total + col0..i * total + col0 + m];
                    dst.copy_from_slice(src);
                }
                col0 += m;
            }
            out
        };
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Multiply a tensor by a scalar variable (shape `[]`).
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[s.id].value;
            if ts.len() != 1 {
                return Err(Error::dim(format!(
                    "mul_scalar: scalar operand has shape {:?}",
                    ts.shape()
                )));
            }
            nodes[x.id].value.map(|v| v * ts.item())
        };
        Ok(self.push(value, Op::MulScalar(x.id, s.id)))
    }

    /// Value passthrough that blocks gradient flow.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let incoming = self.nodes.borrow()[x.id].value.clone();
        let value = {
            let mut sg = self.sg.borrow_mut();
            match &mut *sg {
                SgState::Live => incoming,
                SgState::Record(rec) => {
                    rec.push(incoming.clone());
                    incoming
                }
                SgState::Replay { vals, next } => {
                    let v = vals
                        .get(*next)
                        .expect("stop-gradient replay exhausted")
                        .clone();
                    assert_eq!(
                        v.shape(),
                        incoming.shape(),
                        "stop-gradient replay shape drift"
                    );
                    *next += 1;
                    v
                }
            }
        };
        self.push(value, Op::StopGradient(x.id))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar root, adding parameter gradients into
    /// the store. May be called multiple times on one tape; contributions
    /// accumulate.
    pub fn backward_params(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::dim(format!(
                "backward root must be scalar, got {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::new(
            nodes[root.id].value.shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=root.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        store.accumulate_grad(*pid, &g);
                    }
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, &nodes, *a, g.clone());
                    add_grad(&mut grads, &nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, &nodes, *a, g.clone());
                    add_grad(&mut grads, &nodes, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = zip_map(&g, tb, |gi, bi| gi * bi);
                    let gb = zip_map(&g, ta, |gi, ai| gi * ai);
                    add_grad(&mut grads, &nodes, *a, ga);
                    add_grad(&mut grads, &nodes, *b, gb);
                }
                Op::Div(a, b) => {
                    let (tb, tout) = (&nodes[*b].value, &node.value);
                    let ga = zip_map(&g, tb, |gi, bi| gi / bi);
                    let gb = Tensor::from_fn(g.shape().to_vec(), |i| {
                        -g.data()[i] * tout.data()[i] / tb.data()[i]
                    });
                    add_grad(&mut grads, &nodes, *a, ga);
                    add_grad(&mut grads, &nodes, *b, gb);
                }
                Op::Neg(a) => add_grad(&mut grads, &nodes, *a, g.map(|v| -v)),
                Op::Scale(a, c) => {
                    let c = *c;
                    add_grad(&mut grads, &nodes, *a, g.map(|v| v * c));
                }
                Op::AddScalar(a) => add_grad(&mut grads, &nodes, *a, g),
                Op::Exp(a) => {
                    let ga = zip_map(&g, &node.value, |gi, oi| gi * oi);
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = zip_map(&g, &nodes[*a].value, |gi, xi| gi / xi);
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = zip_map(&g, &node.value, |gi, oi| {
                        if oi > 0.0 {
                            gi * 0.5 / oi
                        } else {
                            0.0
                        }
                    });
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |gi, oi| gi * (1.0 - oi * oi));
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = zip_map(&g, &node.value, |gi, oi| -gi * oi * oi);
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::ClampMin(a, floor) => {
                    let floor = *floor;
                    let ga = zip_map(&g, &nodes[*a].value, |gi, xi| {
                        if xi > floor {
                            gi
                        } else {
                            0.0
                        }
                    });
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = matmul_nt(&g, tb)?;
                    let gb = matmul_tn(ta, &g)?;
                    add_grad(&mut grads, &nodes, *a, ga);
                    add_grad(&mut grads, &nodes, *b, gb);
                }
                Op::Transpose(a) => {
                    add_grad(&mut grads, &nodes, *a, g.transposed());
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let (n, m) = (s.rows(), s.cols());
                    let mut ga = Tensor::zeros(vec![n, m]);
                    for i in 0..n {
                        let srow = s.row(i);
                        let grow = &g.data()[i * m..(i + 1) * m];
                        let dot: f64 = srow.iter().zip(grow.iter()).map(|(si, gi)| si * gi).sum();
                        let orow = &mut ga.data_mut()[i * m..(i + 1) * m];
                        for j in 0..m {
                            orow[j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let ga = Tensor::filled(nodes[*a].value.shape().to_vec(), gv);
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::MeanAll(a) => {
                    let len = nodes[*a].value.len() as f64;
                    let gv = g.item() / len;
                    let ga = Tensor::filled(nodes[*a].value.shape().to_vec(), gv);
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::RowSum(a) => {
                    let t = &nodes[*a].value;
                    let m = t.cols();
                    let ga = Tensor::from_fn(t.shape().to_vec(), |i| g.data()[i / m]);
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::RowMean(a) => {
                    let t = &nodes[*a].value;
                    let m = t.cols();
                    let ga = Tensor::from_fn(t.shape().to_vec(), |i| g.data()[i / m] / m as f64);
                    add_grad(&mut grads, &nodes, *a, ga);
                }
                Op::ScaleRows(x, s) => {
                    let (tx, ts) = (&nodes[*x].value, &nodes[*s].value);
                    let m = tx.cols();
                    let gx = Tensor::from_fn(tx.shape().to_vec(), |i| g.data()[i] * ts.data()[i / m]);
                    let gs = Tensor::from_fn(vec![tx.rows()], |i| {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g.data()[i * m + j] * tx.data()[i * m + j];
                        }
                        acc
                    });
                    add_grad(&mut grads, &nodes, *x, gx);
                    add_grad(&mut grads, &nodes, *s, gs);
                }
                Op::SubCol(x, c) => {
                    let tx = &nodes[*x].value;
                    let m = tx.cols();
                    let gc = Tensor::from_fn(vec![tx.rows()], |i| {
                        -g.data()[i * m..(i + 1) * m].iter().sum::<f64>()
                    });
                    add_grad(&mut grads, &nodes, *x, g);
                    add_grad(&mut grads, &nodes, *c, gc);
                }
                Op::MulRowVec(x, v) => {
                    let (tx, tv) = (&nodes[*x].value, &nodes[*v].value);
                    let (n, m) = (tx.rows(), tx.cols());
                    let gx = Tensor::from_fn(tx.shape().to_vec(), |i| g.data()[i] * tv.data()[i % m]);
                    let gv = Tensor::from_fn(vec![m], |j| {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += g.data()[i * m + j] * tx.data()[i * m + j];
                        }
                        acc
                    });
                    add_grad(&mut grads, &nodes, *x, gx);
                    add_grad(&mut grads, &nodes, *v, gv);
                }
                Op::AddRowVec(x, v) => {
                    let tx = &nodes[*x].value;
                    let (n, m) = (tx.rows(), tx.cols());
                    let gv = Tensor::from_fn(vec![m], |j| {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += g.data()[i * m + j];
                        }
                        acc
                    });
                    add_grad(&mut grads, &nodes, *x, g);
                    add_grad(&mut grads, &nodes, *v, gv);
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.rows();
                    let total = node.value.cols();
                    let mut col0 = 0;
                    for &p in parts {
                        let m = nodes[p].value.cols();
                        let gp = Tensor::from_fn(vec![n, m], |i| {
                            let (r, c) = (i / m, i % m);
                            g.data()[r * total + col0 + c]
                        });
                        add_grad(&mut grads, &nodes, p, gp);
                        col0 += m;
                    }
                }
                Op::MulScalar(x, s) => {
                    let (tx, ts) = (&nodes[*x].value, &nodes[*s].value);
                    let sv = ts.item();
                    let gx = g.map(|v| v * sv);
                    let gs_val: f64 = g.data().iter().zip(tx.data()).map(|(gi, xi)| gi * xi).sum();
                    let gs = Tensor::new(ts.shape().to_vec(), vec![gs_val])?;
                    add_grad(&mut grads, &nodes, *x, gx);
                    add_grad(&mut grads, &nodes, *s, gs);
                }
                Op::StopGradient(blocked) => {
                    // Blocked: nothing flows upstream of `blocked`.
                    debug_assert!(*blocked < id);
                }
            }
        }
        Ok(())
    }
}

fn add_grad(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    debug_assert_eq!(
        nodes[id].value.shape(),
        delta.shape(),
        "gradient shape mismatch at node {id}"
    );
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape().to_vec(), |i| f(a.data()[i], b.data()[i]))
}

/// Plain (non-taped) row softmax, shared with scoring.
pub fn softmax_rows_value(t: &Tensor) -> Tensor {
    let (n, m) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let row = t.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let orow = &mut out.data_mut()[i * m..(i + 1) * m];
        for j in 0..m {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}
