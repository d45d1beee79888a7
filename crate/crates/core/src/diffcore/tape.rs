//! Reverse-mode differentiation over batched dense values.
//!
//! Every node holds a `rows x cols` value; rows are independent samples. A tape
//! borrows the networks it evaluates, so parameters cannot change while a
//! recording is alive. Networks registered as non-trainable still pass
//! gradients to their inputs but never accumulate parameter gradients.

use super::{GradientBuffer, Matrix, Mlp, OutputActivation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { input: usize, param: usize, layer: usize },
    Relu(usize),
    Tanh(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulConst(usize, Matrix),
    ColAffine(usize, Vec<f64>),
    Abs(usize),
    Square(usize),
    Gate(usize, Vec<bool>),
    Column(usize, usize),
    Concat(usize, usize),
    WrapColumn(usize),
    SumAll(usize),
    MeanAll(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug)]
struct ParamSlot<'a> {
    net: &'a Mlp,
    trainable: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node>,
    params: Vec<ParamSlot<'a>>,
}

fn shape_err(context: &'static str, expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::Tape(format!(
        "{context}: shape {}x{} does not match {}x{}",
        got.0, got.1, expected.0, expected.1
    ))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Makes `net` available to [`Tape::affine`] and [`Tape::mlp`].
    pub fn register(&mut self, net: &'a Mlp, trainable: bool) -> ParamId {
        self.params.push(ParamSlot { net, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn net(&self, param: ParamId) -> &'a Mlp {
        self.params[param.0].net
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(a);
        self.push(op, value, needs)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn affine(&mut self, input: NodeId, param: ParamId, layer: usize) -> Result<NodeId> {
        let slot = &self.params[param.0];
        let l = slot.net.layers().get(layer).ok_or_else(|| {
            Error::Tape(format!("layer {layer} out of range"))
        })?;
        let x = &self.nodes[input.0].value;
        if x.cols() != l.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "affine input",
                expected: l.in_dim(),
                got: x.cols(),
            });
        }
        let value = l.affine(x);
        let needs = slot.trainable || self.needs(input);
        Ok(self.push(
            Op::Affine {
                input: input.0,
                param: param.0,
                layer,
            },
            value,
            needs,
        ))
    }

    /// Full network forward pass recorded layer by layer.
    pub fn mlp(&mut self, param: ParamId, input: NodeId) -> Result<NodeId> {
        let net = self.params[param.0].net;
        let last = net.layers().len() - 1;
        let mut h = input;
        for i in 0..=last {
            h = self.affine(h, param, i)?;
            if i < last {
                h = self.relu(h);
            } else if net.output_activation() == OutputActivation::Tanh {
                h = self.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a.0), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a.0), f64::abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a.0), |v| v * v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, Op::Scale(a.0, factor), |v| v * factor)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(context, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: NodeId, c: &Matrix) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.shape() != c.shape() {
            return Err(shape_err("add_const", va.shape(), c.shape()));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let needs = self.needs(a);
        Ok(self.push(Op::AddConst(a.0), value, needs))
    }

    /// `a * c` elementwise for a constant `c` of the same shape.
    pub fn mul_const(&mut self, a: NodeId, c: Matrix) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.shape() != c.shape() {
            return Err(shape_err("mul_const", va.shape(), c.shape()));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let needs = self.needs(a);
        Ok(self.push(Op::MulConst(a.0, c), value, needs))
    }

    /// Per-column `a[:, j] * scale[j] + shift[j]`.
    pub fn col_affine(&mut self, a: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if scale.len() != va.cols() || shift.len() != va.cols() {
            return Err(Error::DimensionMismatch {
                context: "col_affine",
                expected: va.cols(),
                got: scale.len().min(shift.len()),
            });
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for ((v, s), t) in value.row_mut(r).iter_mut().zip(scale).zip(shift) {
                *v = *v * s + t;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::ColAffine(a.0, scale.to_vec()), value, needs))
    }

    /// Passes `a` where `mask` is true and 0 elsewhere. The mask is a
    /// constant of the recording; no gradient flows through the decision.
    pub fn gate(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if mask.len() != va.data().len() {
            return Err(Error::DimensionMismatch {
                context: "gate mask",
                expected: va.data().len(),
                got: mask.len(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let needs = self.needs(a);
        Ok(self.push(Op::Gate(a.0, mask), value, needs))
    }

    /// Gate `a` on a predicate evaluated over the current value of `cond`.
    pub fn gate_where(
        &mut self,
        a: NodeId,
        cond: NodeId,
        pred: impl Fn(f64) -> bool,
    ) -> Result<NodeId> {
        let mask = self.nodes[cond.0].value.data().iter().map(|&v| pred(v)).collect();
        self.gate(a, mask)
    }

    pub fn column(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if col >= va.cols() {
            return Err(Error::Tape(format!("column {col} out of range")));
        }
        let value = Matrix::from_vec(va.rows(), 1, va.column(col));
        let needs = self.needs(a);
        Ok(self.push(Op::Column(a.0, col), value, needs))
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rows() != vb.rows() {
            return Err(Error::DimensionMismatch {
                context: "concat rows",
                expected: va.rows(),
                got: vb.rows(),
            });
        }
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Matrix::from_vec(va.rows(), cols, data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat(a.0, b.0), value, needs))
    }

    /// Wraps column `col` periodically into `[lo, hi)`. The wrap offset is
    /// piecewise constant, so the gradient passes through unchanged.
    pub fn wrap_column(&mut self, a: NodeId, col: usize, lo: f64, hi: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if col >= va.cols() {
            return Err(Error::Tape(format!("column {col} out of range")));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            let v = value.get(r, col);
            value.set(r, col, wrap_into(v, lo, hi));
        }
        let needs = self.needs(a);
        Ok(self.push(Op::WrapColumn(a.0), value, needs))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.nodes[a.0].value.sum());
        let needs = self.needs(a);
        self.push(Op::SumAll(a.0), value, needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Matrix::scalar(va.sum() / va.data().len() as f64);
        let needs = self.needs(a);
        self.push(Op::MeanAll(a.0), value, needs)
    }

    /// Reverse pass from a scalar node seeded with `seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::Tape("backward called before any forward recording".into()));
        }
        if self.nodes[output.0].value.shape() != (1, 1) {
            let (r, c) = self.nodes[output.0].value.shape();
            return Err(Error::Tape(format!("backward needs a scalar output, got {r}x{c}")));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        let mut params: Vec<Option<GradientBuffer>> = self
            .params
            .iter()
            .map(|p| p.trainable.then(|| GradientBuffer::zeros_like(p.net)))
            .collect();
        adj[output.0] = Some(Matrix::scalar(seed));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                adj[i] = None;
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Affine {
                    input,
                    param,
                    layer,
                } => {
                    let slot = &self.params[*param];
                    let l = &slot.net.layers()[*layer];
                    let x = &self.nodes[*input].value;
                    if let Some(buf) = params[*param].as_mut() {
                        let gw = &mut buf.weights[*layer];
                        let gb = &mut buf.biases[*layer];
                        for r in 0..g.rows() {
                            let gr = g.row(r);
                            let xr = x.row(r);
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                gb[o] += go;
                                for (w, &xi) in gw.row_mut(o).iter_mut().zip(xr) {
                                    *w += go * xi;
                                }
                            }
                        }
                    }
                    if self.nodes[*input].needs_grad {
                        let mut gx = Matrix::zeros(x.rows(), x.cols());
                        for r in 0..g.rows() {
                            let gr = g.row(r);
                            let out = gx.row_mut(r);
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                for (gi, &w) in out.iter_mut().zip(l.weights().row(o)) {
                                    *gi += go * w;
                                }
                            }
                        }
                        accumulate(&mut adj, *input, gx);
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let gx = zip_map(&g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj, *a, gx);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let gx = zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut adj, *a, gx);
                }
                Op::Add(a, b) => {
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut adj, *b, zip_map(&g, va, |gv, av| gv * av));
                    }
                    accumulate(&mut adj, *a, zip_map(&g, vb, |gv, bv| gv * bv));
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut adj, *a, g.map(|v| v * f));
                }
                Op::AddConst(a) | Op::WrapColumn(a) => accumulate(&mut adj, *a, g),
                Op::MulConst(a, c) => {
                    accumulate(&mut adj, *a, zip_map(&g, c, |gv, cv| gv * cv));
                }
                Op::ColAffine(a, scale) => {
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        for (v, s) in gx.row_mut(r).iter_mut().zip(scale) {
                            *v *= s;
                        }
                    }
                    accumulate(&mut adj, *a, gx);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[*a].value;
                    let gx = zip_map(&g, x, |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *a, gx);
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    accumulate(&mut adj, *a, zip_map(&g, x, |gv, xv| 2.0 * gv * xv));
                }
                Op::Gate(a, mask) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&v, &m)| if m { v } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::Column(a, col) => {
                    let src = &self.nodes[*a].value;
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        gx.set(r, *col, g.get(r, 0));
                    }
                    accumulate(&mut adj, *a, gx);
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let rows = g.rows();
                    if self.nodes[*a].needs_grad {
                        let mut ga = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            ga.extend_from_slice(&g.row(r)[..ca]);
                        }
                        accumulate(&mut adj, *a, Matrix::from_vec(rows, ca, ga));
                    }
                    if self.nodes[*b].needs_grad {
                        let mut gb = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            gb.extend_from_slice(&g.row(r)[ca..]);
                        }
                        accumulate(&mut adj, *b, Matrix::from_vec(rows, cb, gb));
                    }
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let n = (r * c) as f64;
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0) / n));
                }
            }
        }

        Ok(Gradients {
            nodes: adj,
            params,
        })
    }
}

/// Periodic wrap of `v` into `[lo, hi)`.
pub fn wrap_into(v: f64, lo: f64, hi: f64) -> f64 {
    let period = hi - lo;
    let mut w = v - period * ((v - lo) / period).floor();
    if w >= hi {
        w -= period;
    }
    if w < lo {
        w += period;
    }
    w
}

fn zip_map(g: &Matrix, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Matrix::from_vec(g.rows(), g.cols(), data)
}

fn accumulate(adj: &mut [Option<Matrix>], idx: usize, grad: Matrix) {
    match &mut adj[idx] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<GradientBuffer>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if it influenced the output.
    pub fn wrt(&self, leaf: NodeId) -> Option<&Matrix> {
        self.nodes.get(leaf.0).and_then(Option::as_ref)
    }

    /// Parameter gradient for a trainable network.
    pub fn param(&self, param: ParamId) -> Option<&GradientBuffer> {
        self.params.get(param.0).and_then(Option::as_ref)
    }

    /// Adds this pass's parameter gradient into `buffer`.
    pub fn accumulate_into(&self, param: ParamId, buffer: &mut GradientBuffer) -> Result<()> {
        let g = self
            .param(param)
            .ok_or_else(|| Error::Tape("parameter was not registered as trainable".into()))?;
        if g.weights.len() != buffer.weights.len()
            || g.weights.iter().zip(&buffer.weights).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Tape("gradient buffer shape mismatch".into()));
        }
        buffer.add_assign(g);
        Ok(())
    }
}
