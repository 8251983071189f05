//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every operation appends one node holding its forward value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes once, in
//! reverse append order, pushing adjoints into the inputs that require
//! gradients. Nodes that do not (directly or transitively) depend on a
//! `requires_grad` leaf are skipped entirely, so frozen branches cost
//! nothing on the way back.

use crate::error::{Error, Result};
use crate::tensor::{
    self, matmul_into, matmul_nt_into, matmul_tn_into, normal_cdf, normal_pdf, row_stats,
    Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ColScale(Var, Var),
    Gelu(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Row(Var, usize),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::ColScale(..) => "col_scale",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax_t",
            Op::LogSoftmax(..) => "log_softmax_t",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Row(..) => "row",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, or zeros shaped like `like` when no path exists.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Scalar gradient of a one-element variable (0 when unreachable).
    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, Tensor::item)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fails if any operation so far produced NaN or ±∞.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        // Leaves are not checked: a non-finite input surfaces in the first
        // operation that reads it.
        if self.non_finite.is_none() && !matches!(op, Op::Leaf) && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(b).numel() != n {
            return Err(Error::Dimension(format!(
                "add_row {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&bias) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `s · a` for a one-element variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension(format!(
                "scale_by expects a scalar, got {:?}",
                self.value(s).shape()
            )));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    /// `a · diag(v)`: column `j` of `a` scaled by `v[j]`.
    pub fn col_scale(&mut self, a: Var, v: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(v).numel() != n {
            return Err(Error::Dimension(format!(
                "col_scale {:?} by {:?}",
                self.value(a).shape(),
                self.value(v).shape()
            )));
        }
        let scale = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, s) in row.iter_mut().zip(&scale) {
                *x *= s;
            }
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(out, Op::ColScale(a, v), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise `softmax(a / tau)`.
    pub fn softmax_t(&mut self, a: Var, tau: f64) -> Result<Var> {
        let out = tensor::softmax_t(self.value(a), tau)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, tau), rg))
    }

    /// Row-wise `log softmax(a / tau)`.
    pub fn log_softmax_t(&mut self, a: Var, tau: f64) -> Result<Var> {
        let out = tensor::log_softmax_t(self.value(a), tau)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, tau), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Dimension(format!(
                "layer_norm over {d} features with gain {:?}",
                self.value(gain).shape()
            )));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        let rows = out.numel() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(d) {
            let (mean, r) = row_stats(row);
            inv_std.push(r);
            for (j, v) in row.iter_mut().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                *v = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows `ids` of the matrix `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).select_rows(ids)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row `i` of a matrix, as a `[1, n]` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let out = self.value(a).select_rows(&[i])?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Row(a, i), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("shape")))
            .collect();
        Ok(Gradients { grads })
    }

    /// Adjoint buffer of `v`, allocated on first use; `None` for frozen nodes.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = node.value.last_dim();
                if let Some(da) = self.slot(*a, grads) {
                    matmul_nt_into(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(*b, grads) {
                    matmul_tn_into(self.value(*a).data(), g, db, k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = node.value.last_dim();
                if let Some(da) = self.slot(*a, grads) {
                    matmul_into(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(*b, grads) {
                    matmul_tn_into(g, self.value(*a).data(), db, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(*v, grads) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.slot(*a, grads) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.slot(*b, grads) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(*a, grads) {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.slot(*b, grads) {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(*a, grads) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                if let Some(da) = self.slot(*a, grads) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
                if let Some(ds) = self.slot(*s, grads) {
                    let av = self.value(*a).data();
                    ds[0] += g.iter().zip(av).map(|(g, x)| g * x).sum::<f64>();
                }
            }
            Op::ColScale(a, v) => {
                let n = node.value.last_dim();
                if let Some(da) = self.slot(*a, grads) {
                    let vv = self.value(*v).data();
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * vv[i % n];
                    }
                }
                if let Some(dv) = self.slot(*v, grads) {
                    let av = self.value(*a).data();
                    for (i, (gi, ai)) in g.iter().zip(av).enumerate() {
                        dv[i % n] += gi * ai;
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(da) = self.slot(*a, grads) {
                    let x = self.value(*a).data();
                    for i in 0..da.len() {
                        da[i] += g[i] * (normal_cdf(x[i]) + x[i] * normal_pdf(x[i]));
                    }
                }
            }
            Op::Softmax(a, tau) => {
                if let Some(da) = self.slot(*a, grads) {
                    let n = node.value.last_dim();
                    let y = node.value.data();
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot) / tau;
                        }
                    }
                }
            }
            Op::LogSoftmax(a, tau) => {
                if let Some(da) = self.slot(*a, grads) {
                    let n = node.value.last_dim();
                    let y = node.value.data();
                    for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] += (gr[j] - yr[j].exp() * gsum) / tau;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                if let Some(db) = self.slot(*bias, grads) {
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(b, g)| *b += g);
                    }
                }
                if let Some(dg) = self.slot(*gain, grads) {
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row[j] * hrow[j];
                        }
                    }
                }
                if let Some(dx) = self.slot(*x, grads) {
                    let gamma = self.value(*gain).data();
                    let mut dh = vec![0.0; d];
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * gamma[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dxr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = self.slot(*table, grads) {
                    let d = node.value.last_dim();
                    for (k, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[k * d..(k + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Row(a, i) => {
                if let Some(da) = self.slot(*a, grads) {
                    let n = node.value.last_dim();
                    da[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(*a, grads) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.param(Tensor::scalar(-2.5));
        let p = t.mul(x, y).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.scalar(x), -2.5);
        assert_eq!(g.scalar(y), 3.0);
    }

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let xs = Tensor::vector(vec![1.0, -2.0, 0.5, 4.0]);
        let x = t.param(xs.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), xs.map(|v| 2.0 * v).data());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let p = t.mul(x, c).unwrap();
        let g = t.backward(p).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.scalar(x), 5.0);
    }

    #[test]
    fn non_finite_values_surface_on_backward() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(f64::MAX));
        let y = t.scale(x, 10.0);
        assert!(t.check_finite().is_err());
        assert!(matches!(t.backward(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut t = Tape::new();
            let a = t.param(Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]]).unwrap());
            let s = t.softmax_t(a, 1.3).unwrap();
            let h = t.gelu(s);
            let l = t.sum(h);
            let g = t.backward(l).unwrap();
            (t.value(l).item().to_bits(), g.get(a).unwrap().clone())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1, l2);
        assert!(g1
            .data()
            .iter()
            .zip(g2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
