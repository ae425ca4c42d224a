//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! The op set is exactly what the layers in this crate need: matrix
//! products, a few elementwise maps, masked softmax, masked weighted
//! sums, concatenation, slicing and embedding-row gathers. Masked
//! positions are excluded from every reduction (not multiplied by zero),
//! so values stored at masked positions can never leak into unmasked
//! outputs, bit for bit.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBroadcast { m: Var, v: Var },
    MulRowBroadcast { m: Var, v: Var },
    Scale { x: Var, c: Real },
    Neg { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    SoftmaxMasked { x: Var, mask: Rc<[bool]> },
    SoftmaxMaskedRows { x: Var, mask: Rc<[bool]> },
    MaskRows { x: Var, mask: Rc<[bool]> },
    MaskedWeightedSum { w: Var, x: Var, mask: Rc<[bool]> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, rows: usize },
    GatherRows { table: Var, ids: Rc<[usize]> },
    SumAll { x: Var },
    Dot { a: Var, b: Var },
    Reshape { x: Var },
}

struct Node {
    values: Vec<Real>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// Append-only computation record; backward walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
}

fn stable_softplus(x: Real) -> Real {
    // ln(1 + e^x) without overflow for large |x|
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out[r x t] += a[r x s] . b[s x t]
fn mm_acc(out: &mut [Real], a: &[Real], b: &[Real], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let orow = &mut out[i * t..(i + 1) * t];
        for kk in 0..s {
            let av = a[i * s + kk];
            let brow = &b[kk * t..(kk + 1) * t];
            for j in 0..t {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[r x s] += g[r x t] . b^T  (b is s x t)
fn mm_nt_acc(out: &mut [Real], g: &[Real], b: &[Real], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let grow = &g[i * t..(i + 1) * t];
        let orow = &mut out[i * s..(i + 1) * s];
        for kk in 0..s {
            let brow = &b[kk * t..(kk + 1) * t];
            let mut acc = 0.0;
            for j in 0..t {
                acc += grow[j] * brow[j];
            }
            orow[kk] += acc;
        }
    }
}

/// out[s x t] += a^T . g  (a is r x s, g is r x t)
fn mm_tn_acc(out: &mut [Real], a: &[Real], g: &[Real], r: usize, s: usize, t: usize) {
    for i in 0..r {
        let grow = &g[i * t..(i + 1) * t];
        for kk in 0..s {
            let av = a[i * s + kk];
            let orow = &mut out[kk * t..(kk + 1) * t];
            for j in 0..t {
                orow[j] += av * grow[j];
            }
        }
    }
}

fn softmax_masked_into(out: &mut [Real], x: &[Real], mask: &[bool]) {
    let mut max = Real::NEG_INFINITY;
    for (v, &m) in x.iter().zip(mask) {
        if m && *v > max {
            max = *v;
        }
    }
    let mut sum = 0.0;
    for i in 0..x.len() {
        if mask[i] {
            let e = (x[i] - max).exp();
            out[i] = e;
            sum += e;
        } else {
            out[i] = 0.0;
        }
    }
    for (o, &m) in out.iter_mut().zip(mask) {
        if m {
            *o /= sum;
        }
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

    pub fn values(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.values(v).to_vec()).unwrap()
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn take_grad(&mut self, v: Var) -> Option<Vec<Real>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, values: Vec<Real>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            values,
            shape,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape(v).to_vec(),
                what: "expected a matrix".into(),
            }),
        }
    }

    fn vec_len(&self, v: Var, op: &'static str) -> Result<usize> {
        match *self.shape(v) {
            [n] => Ok(n),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape(v).to_vec(),
                what: "expected a vector".into(),
            }),
        }
    }

    pub fn leaf(&mut self, values: Vec<Real>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != values.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape,
                what: format!("does not match {} values", values.len()),
            });
        }
        Ok(self.push(values, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, values: Vec<Real>, shape: Vec<usize>) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = numel(&shape);
        self.push(vec![0.0; n], shape, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.rows_cols(a, "matmul")?;
        let (s2, t) = self.rows_cols(b, "matmul")?;
        if s != s2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; r * t];
        mm_acc(&mut out, self.values(a), self.values(b), r, s, t);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![r, t], ng, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "transpose")?;
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![c, r], ng, Op::Transpose { x }))
    }

    fn elementwise_pair(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add")?;
        let out: Vec<Real> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        Ok(self.push(out, shape, ng, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub")?;
        let out: Vec<Real> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        Ok(self.push(out, shape, ng, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul")?;
        let out: Vec<Real> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        Ok(self.push(out, shape, ng, Op::Mul { a, b }))
    }

    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(m, "add_row_broadcast")?;
        let n = self.vec_len(v, "add_row_broadcast")?;
        if n != c {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] + vv[j];
            }
        }
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(out, vec![r, c], ng, Op::AddRowBroadcast { m, v }))
    }

    pub fn mul_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(m, "mul_row_broadcast")?;
        let n = self.vec_len(v, "mul_row_broadcast")?;
        if n != c {
            return Err(Error::ShapeMismatch {
                op: "mul_row_broadcast",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] * vv[j];
            }
        }
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(out, vec![r, c], ng, Op::MulRowBroadcast { m, v }))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out: Vec<Real> = self.values(x).iter().map(|v| v * c).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(out, shape, ng, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out: Vec<Real> = self.values(x).iter().map(|v| -v).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(out, shape, ng, Op::Neg { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<Real> = self.values(x).iter().map(|v| v.tanh()).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(out, shape, ng, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<Real> = self.values(x).iter().map(|v| sigmoid(*v)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(out, shape, ng, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out: Vec<Real> = self.values(x).iter().map(|v| stable_softplus(*v)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        self.push(out, shape, ng, Op::Softplus { x })
    }

    /// Exp-normalizes the unmasked entries of a vector; masked entries are
    /// exactly zero in the output.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.vec_len(x, "softmax_masked")?;
        if mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_masked",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let mut out = vec![0.0; n];
        softmax_masked_into(&mut out, self.values(x), mask);
        let ng = self.needs(x);
        Ok(self.push(out, vec![n], ng, Op::SoftmaxMasked { x, mask: mask.into() }))
    }

    /// Row-wise masked softmax of a matrix; `mask` selects columns.
    pub fn softmax_masked_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "softmax_masked_rows")?;
        if mask.len() != c {
            return Err(Error::ShapeMismatch {
                op: "softmax_masked_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_masked_into(&mut out[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c], mask);
        }
        let ng = self.needs(x);
        Ok(self.push(
            out,
            vec![r, c],
            ng,
            Op::SoftmaxMaskedRows { x, mask: mask.into() },
        ))
    }

    /// Zeroes the masked rows of a matrix.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "mask_rows")?;
        if mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "mask_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let xv = self.values(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            if mask[i] {
                out[i * c..(i + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![r, c], ng, Op::MaskRows { x, mask: mask.into() }))
    }

    /// sum_i w[i] * x[i, :] over unmasked i only. Masked rows of `x` and
    /// masked entries of `w` never enter the sum.
    pub fn masked_weighted_sum(&mut self, w: Var, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.vec_len(w, "masked_weighted_sum")?;
        let (r, c) = self.rows_cols(x, "masked_weighted_sum")?;
        if n != r || mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "masked_weighted_sum",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let wv = self.values(w);
        let xv = self.values(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            if mask[i] {
                let row = &xv[i * c..(i + 1) * c];
                for j in 0..c {
                    out[j] += wv[i] * row[j];
                }
            }
        }
        let ng = self.needs(w) || self.needs(x);
        Ok(self.push(out, vec![c], ng, Op::MaskedWeightedSum { w, x, mask: mask.into() }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p, "concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &pc) in parts.iter().zip(&widths) {
            let pv = self.values(p);
            for i in 0..r {
                out[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, vec![r, total], ng, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, c) = self.rows_cols(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.rows_cols(p, "concat_rows")?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += pr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, vec![total, c], ng, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "slice_rows")?;
        if start + rows > r || rows == 0 {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: self.shape(x).to_vec(),
                what: format!("rows {start}..{} out of range", start + rows),
            });
        }
        let out = self.values(x)[start * c..(start + rows) * c].to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, vec![rows, c], ng, Op::SliceRows { x, start, rows }))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: self.shape(table).to_vec(),
                what: format!("row id {bad} out of range"),
            });
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let ng = self.needs(table);
        Ok(self.push(out, vec![ids.len(), c], ng, Op::GatherRows { table, ids: ids.into() }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: Real = self.values(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], ng, Op::SumAll { x })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.vec_len(a, "dot")?;
        let n2 = self.vec_len(b, "dot")?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let s: Real = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![s], vec![1], ng, Op::Dot { a, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.values(x).len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                what: format!("does not match {} values", self.values(x).len()),
            });
        }
        let out = self.values(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, shape, ng, Op::Reshape { x }))
    }

    /// Mean of a list of scalars.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let rows: Result<Vec<Var>> = parts.iter().map(|&p| self.reshape(p, vec![1, 1])).collect();
        let stacked = self.concat_rows(&rows?)?;
        let total = self.sum_all(stacked);
        Ok(self.scale(total, 1.0 / parts.len() as Real))
    }

    fn add_into(dst: &mut Option<Vec<Real>>, n: usize) -> &mut [Real] {
        dst.get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
    }

    /// Accumulates d(loss)/d(node) for every node that requires it.
    /// `loss` must be scalar. Gradients from an earlier backward pass are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            // Split borrows: nodes are read-only here, grads are written.
            let (node, grads) = (&self.nodes[idx], &mut self.grads);
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (r, s) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let t = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].needs_grad {
                        let bv = &self.nodes[b.0].values;
                        mm_nt_acc(Self::add_into(&mut grads[a.0], r * s), &g, bv, r, s, t);
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = &self.nodes[a.0].values;
                        mm_tn_acc(Self::add_into(&mut grads[b.0], s * t), av, &g, r, s, t);
                    }
                }
                Op::Transpose { x } => {
                    if self.nodes[x.0].needs_grad {
                        let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                        let dx = Self::add_into(&mut grads[x.0], r * c);
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &p in [a, b].iter() {
                        if self.nodes[p.0].needs_grad {
                            let d = Self::add_into(&mut grads[p.0], g.len());
                            for (di, gi) in d.iter_mut().zip(&g) {
                                *di += gi;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        let d = Self::add_into(&mut grads[a.0], g.len());
                        for (di, gi) in d.iter_mut().zip(&g) {
                            *di += gi;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let d = Self::add_into(&mut grads[b.0], g.len());
                        for (di, gi) in d.iter_mut().zip(&g) {
                            *di -= gi;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        let bv = &self.nodes[b.0].values;
                        let d = Self::add_into(&mut grads[a.0], g.len());
                        for i in 0..g.len() {
                            d[i] += g[i] * bv[i];
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = &self.nodes[a.0].values;
                        let d = Self::add_into(&mut grads[b.0], g.len());
                        for i in 0..g.len() {
                            d[i] += g[i] * av[i];
                        }
                    }
                }
                Op::AddRowBroadcast { m, v } => {
                    let c = self.nodes[v.0].shape[0];
                    if self.nodes[m.0].needs_grad {
                        let d = Self::add_into(&mut grads[m.0], g.len());
                        for (di, gi) in d.iter_mut().zip(&g) {
                            *di += gi;
                        }
                    }
                    if self.nodes[v.0].needs_grad {
                        let d = Self::add_into(&mut grads[v.0], c);
                        for (i, gi) in g.iter().enumerate() {
                            d[i % c] += gi;
                        }
                    }
                }
                Op::MulRowBroadcast { m, v } => {
                    let c = self.nodes[v.0].shape[0];
                    if self.nodes[m.0].needs_grad {
                        let vv = &self.nodes[v.0].values;
                        let d = Self::add_into(&mut grads[m.0], g.len());
                        for (i, gi) in g.iter().enumerate() {
                            d[i] += gi * vv[i % c];
                        }
                    }
                    if self.nodes[v.0].needs_grad {
                        let mv = &self.nodes[m.0].values;
                        let d = Self::add_into(&mut grads[v.0], c);
                        for (i, gi) in g.iter().enumerate() {
                            d[i % c] += gi * mv[i];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.nodes[x.0].needs_grad {
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for (di, gi) in d.iter_mut().zip(&g) {
                            *di += gi * c;
                        }
                    }
                }
                Op::Neg { x } => {
                    if self.nodes[x.0].needs_grad {
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for (di, gi) in d.iter_mut().zip(&g) {
                            *di -= gi;
                        }
                    }
                }
                Op::Tanh { x } => {
                    if self.nodes[x.0].needs_grad {
                        let y = &node.values;
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for i in 0..g.len() {
                            d[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if self.nodes[x.0].needs_grad {
                        let y = &node.values;
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for i in 0..g.len() {
                            d[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
                Op::Softplus { x } => {
                    if self.nodes[x.0].needs_grad {
                        let xv = &self.nodes[x.0].values;
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for i in 0..g.len() {
                            d[i] += g[i] * sigmoid(xv[i]);
                        }
                    }
                }
                Op::SoftmaxMasked { x, mask } => {
                    if self.nodes[x.0].needs_grad {
                        let y = &node.values;
                        let mut inner = 0.0;
                        for i in 0..g.len() {
                            if mask[i] {
                                inner += g[i] * y[i];
                            }
                        }
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for i in 0..g.len() {
                            if mask[i] {
                                d[i] += y[i] * (g[i] - inner);
                            }
                        }
                    }
                }
                Op::SoftmaxMaskedRows { x, mask } => {
                    if self.nodes[x.0].needs_grad {
                        let y = &node.values;
                        let c = mask.len();
                        let rows = g.len() / c;
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for i in 0..rows {
                            let (ys, gs) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                            let mut inner = 0.0;
                            for j in 0..c {
                                if mask[j] {
                                    inner += gs[j] * ys[j];
                                }
                            }
                            for j in 0..c {
                                if mask[j] {
                                    d[i * c + j] += ys[j] * (gs[j] - inner);
                                }
                            }
                        }
                    }
                }
                Op::MaskRows { x, mask } => {
                    if self.nodes[x.0].needs_grad {
                        let c = g.len() / mask.len();
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for (i, &keep) in mask.iter().enumerate() {
                            if keep {
                                for j in 0..c {
                                    d[i * c + j] += g[i * c + j];
                                }
                            }
                        }
                    }
                }
                Op::MaskedWeightedSum { w, x, mask } => {
                    let c = g.len();
                    if self.nodes[w.0].needs_grad {
                        let xv = &self.nodes[x.0].values;
                        let d = Self::add_into(&mut grads[w.0], mask.len());
                        for (i, &keep) in mask.iter().enumerate() {
                            if keep {
                                let row = &xv[i * c..(i + 1) * c];
                                let mut acc = 0.0;
                                for j in 0..c {
                                    acc += g[j] * row[j];
                                }
                                d[i] += acc;
                            }
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let wv = &self.nodes[w.0].values;
                        let d = Self::add_into(&mut grads[x.0], mask.len() * c);
                        for (i, &keep) in mask.iter().enumerate() {
                            if keep {
                                for j in 0..c {
                                    d[i * c + j] += wv[i] * g[j];
                                }
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts
                        .iter()
                        .map(|&p| self.nodes[p.0].shape[1])
                        .sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].shape[1];
                        if self.nodes[p.0].needs_grad {
                            let d = Self::add_into(&mut grads[p.0], rows * pc);
                            for i in 0..rows {
                                for j in 0..pc {
                                    d[i * pc + j] += g[i * total + offset + j];
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].values.len();
                        if self.nodes[p.0].needs_grad {
                            let d = Self::add_into(&mut grads[p.0], n);
                            for j in 0..n {
                                d[j] += g[offset + j];
                            }
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { x, start, rows } => {
                    if self.nodes[x.0].needs_grad {
                        let c = g.len() / rows;
                        let n = self.nodes[x.0].values.len();
                        let d = Self::add_into(&mut grads[x.0], n);
                        for j in 0..g.len() {
                            d[start * c + j] += g[j];
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    if self.nodes[table.0].needs_grad {
                        let c = g.len() / ids.len();
                        let n = self.nodes[table.0].values.len();
                        let d = Self::add_into(&mut grads[table.0], n);
                        for (i, &row) in ids.iter().enumerate() {
                            for j in 0..c {
                                d[row * c + j] += g[i * c + j];
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[x.0].needs_grad {
                        let n = self.nodes[x.0].values.len();
                        let d = Self::add_into(&mut grads[x.0], n);
                        for di in d.iter_mut() {
                            *di += g[0];
                        }
                    }
                }
                Op::Dot { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        let bv = &self.nodes[b.0].values;
                        let d = Self::add_into(&mut grads[a.0], bv.len());
                        for i in 0..bv.len() {
                            d[i] += g[0] * bv[i];
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = &self.nodes[a.0].values;
                        let d = Self::add_into(&mut grads[b.0], av.len());
                        for i in 0..av.len() {
                            d[i] += g[0] * av[i];
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.nodes[x.0].needs_grad {
                        let d = Self::add_into(&mut grads[x.0], g.len());
                        for (di, gi) in d.iter_mut().zip(&g) {
                            *di += gi;
                        }
                    }
                }
            }
            // Non-leaf gradients are not retained once propagated.
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = None;
            } else {
                self.grads[idx] = Some(g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tape() -> Tape {
        Tape::new()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = tape();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let out = t.matmul(i2, a).unwrap();
        assert_eq!(t.values(out), &[1.0, 2.0, 3.0, 4.0]);

        let row = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let zeros = t.constant(vec![0.0, 0.0], vec![2, 1]).unwrap();
        let out = t.matmul(row, zeros).unwrap();
        assert_eq!(t.values(out), &[0.0]);
    }

    #[test]
    fn matmul_hand_oracle_2x2() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] multiplied by hand.
        let mut t = tape();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.values(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = tape();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn softmax_masked_basics() {
        let mut t = tape();
        let x = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let y = t.softmax_masked(x, &[true, true]).unwrap();
        assert_eq!(t.values(y), &[0.5, 0.5]);

        let x = t.constant(vec![5.0, -100.0], vec![2]).unwrap();
        let y = t.softmax_masked(x, &[true, false]).unwrap();
        assert_eq!(t.values(y), &[1.0, 0.0]);

        // softmax(ln 1, ln 2, ln 3) = (1/6, 2/6, 3/6), closed form checked
        // with an independent calculator.
        let x = t
            .constant(vec![(1.0 as Real).ln(), (2.0 as Real).ln(), (3.0 as Real).ln()], vec![3])
            .unwrap();
        let y = t.softmax_masked(x, &[true, true, true]).unwrap();
        let v = t.values(y);
        assert_relative_eq!(v[0], 1.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(v[1], 2.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(v[2], 0.5, max_relative = 1e-12);
        let sum: Real = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_rejected() {
        let mut t = tape();
        let x = t.constant(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(matches!(
            t.softmax_masked(x, &[false, false]),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut t = tape();
        let xs = [0.3, -1.2, 4.0, 0.0];
        let x = t.constant(xs.to_vec(), vec![4]).unwrap();
        let shifted: Vec<Real> = xs.iter().map(|v| v + 123.25).collect();
        let xc = t.constant(shifted, vec![4]).unwrap();
        let mask = [true, true, false, true];
        let y = t.softmax_masked(x, &mask).unwrap();
        let yc = t.softmax_masked(xc, &mask).unwrap();
        for (a, b) in t.values(y).iter().zip(t.values(yc)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x*x), d/dx = 2x
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_through_matmul_and_dot() {
        // loss = u . (A x), gradients checked against hand-derived forms.
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let x = t.leaf(vec![5.0, 6.0], vec![2, 1], true).unwrap();
        let ax = t.matmul(a, x).unwrap();
        let axv = t.reshape(ax, vec![2]).unwrap();
        let u = t.leaf(vec![1.0, -1.0], vec![2], true).unwrap();
        let loss = t.dot(u, axv).unwrap();
        t.backward(loss).unwrap();
        // d/dA = u x^T, d/dx = A^T u, d/du = A x
        assert_eq!(t.grad(a).unwrap(), &[5.0, 6.0, -5.0, -6.0]);
        assert_eq!(t.grad(x).unwrap(), &[1.0 - 3.0, 2.0 - 4.0]);
        assert_eq!(t.grad(u).unwrap(), &[17.0, 39.0]);
    }

    #[test]
    fn masked_weighted_sum_skips_masked_rows() {
        let mut t = tape();
        let w = t.leaf(vec![0.25, 0.75, 0.5], vec![3], true).unwrap();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0], vec![3, 2], true)
            .unwrap();
        let mask = [true, true, false];
        let out = t.masked_weighted_sum(w, x, &mask).unwrap();
        assert_eq!(t.values(out), &[0.25 + 2.25, 0.5 + 3.0]);
        let o2 = t.reshape(out, vec![2]).unwrap();
        let loss = t.sum_all(o2);
        t.backward(loss).unwrap();
        // Masked row contributes no gradient.
        assert_eq!(t.grad(w).unwrap(), &[3.0, 7.0, 0.0]);
        assert_eq!(t.grad(x).unwrap(), &[0.25, 0.25, 0.75, 0.75, 0.0, 0.0]);
    }

    #[test]
    fn gather_scatter_gradients() {
        let mut t = tape();
        let table = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2], true)
            .unwrap();
        let g = t.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.values(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = t.sum_all(g);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        let b = t.leaf(vec![3.0, 4.0], vec![1, 2], true).unwrap();
        let rows = t.concat_rows(&[a, b]).unwrap();
        let cols = t.concat_cols(&[rows, rows]).unwrap();
        assert_eq!(t.shape(cols), &[2, 4]);
        let sl = t.slice_rows(cols, 1, 1).unwrap();
        assert_eq!(t.values(sl), &[3.0, 4.0, 3.0, 4.0]);
        let loss = t.sum_all(sl);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn values_stay_finite_on_extreme_inputs() {
        let mut t = tape();
        let x = t.constant(vec![1000.0, -1000.0, 0.0], vec![3]).unwrap();
        let sp = t.softplus(x);
        let sg = t.sigmoid(x);
        let sm = t.softmax_masked(x, &[true, true, true]).unwrap();
        for v in [sp, sg, sm] {
            assert!(t.values(v).iter().all(|x| x.is_finite()));
        }
    }
}
