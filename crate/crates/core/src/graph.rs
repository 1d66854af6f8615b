//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node
//! holding its output value; [`Graph::backward`] walks the tape in reverse
//! and returns [`Gradients`] for every node that requires a gradient.
//!
//! "Row" ops treat a tensor as `numel / last_dim` rows of length `last_dim`.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log1p(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MeanRows(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    DotRows(Var, Var),
    L2Norm(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    Take(Var, Vec<usize>),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    MaskedMeanPool(Var, Vec<f64>),
    MaskedMaxPool(Var, Vec<Option<usize>>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.value.len() / c,
        }
    }
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// was reachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `tensor`'s accumulator.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.wrt(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// The compute tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_passes: usize,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    /// Number of completed backward passes on this graph.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding a copy of `t`; requires grad iff `t` is trainable.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.is_trainable())
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    /// Leaf that requires grad.
    pub fn variable(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("variable", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, true))
    }

    /// A constant copy of `v`'s current value, cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    /// `a [.., k] x b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].rows();
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds the vector `b [n]` to every row of `x [.., n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        let n = self.nodes[x.0].cols();
        if sx.is_empty() || numel(sb) != n {
            return Err(Error::shape("add_row", sx, sb));
        }
        let bv = &self.nodes[b.0].value;
        let out = self.nodes[x.0]
            .value
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let shape = sx.clone();
        let rg = self.rg(&[x, b]);
        Ok(self.push(shape, out, Op::AddRow(x, b), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.map(a, Op::Log1p(a), f64::ln_1p)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    fn row_map(&mut self, a: Var, op: Op, f: impl Fn(&[f64], &mut [f64])) -> Var {
        let node = &self.nodes[a.0];
        let c = node.cols();
        let mut out = vec![0.0; node.value.len()];
        if c > 0 {
            for (src, dst) in node.value.chunks(c).zip(out.chunks_mut(c)) {
                f(src, dst);
            }
        }
        let shape = node.shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.row_map(a, Op::SoftmaxRows(a), |src, dst| {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        })
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.row_map(a, Op::LogSoftmaxRows(a), |src, dst| {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        })
    }

    fn row_reduce(&mut self, a: Var, op_for: impl FnOnce(Vec<usize>) -> Op, f: impl Fn(&[f64]) -> (f64, usize)) -> Var {
        let node = &self.nodes[a.0];
        let c = node.cols();
        let rows = node.rows();
        let mut out = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let (v, i) = f(&node.value[r * c..(r + 1) * c]);
            out.push(v);
            arg.push(i);
        }
        let shape = node.shape[..node.shape.len().saturating_sub(1)].to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, op_for(arg), rg)
    }

    /// Mean over the last dimension.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        self.row_reduce(a, |_| Op::MeanRows(a), |r| (r.iter().sum::<f64>() / r.len() as f64, 0))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.row_reduce(a, |_| Op::SumRows(a), |r| (r.iter().sum::<f64>(), 0))
    }

    /// Max over the last dimension. Ties route the gradient to the first
    /// maximal index.
    pub fn max_rows(&mut self, a: Var) -> Var {
        self.row_reduce(
            a,
            |arg| Op::MaxRows(a, arg),
            |r| {
                let mut best = 0;
                for (i, &x) in r.iter().enumerate() {
                    if x > r[best] {
                        best = i;
                    }
                }
                (r.get(best).copied().unwrap_or(f64::NEG_INFINITY), best)
            },
        )
    }

    /// Row-wise dot product of two equally shaped tensors.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot_rows", a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let c = na.cols();
        let out: Vec<f64> = if c == 0 {
            vec![0.0; na.rows()]
        } else {
            na.value
                .chunks(c)
                .zip(nb.value.chunks(c))
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
                .collect()
        };
        let shape = na.shape[..na.shape.len().saturating_sub(1)].to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::DotRows(a, b), rg))
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![v], Op::L2Norm(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![v], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0].value;
        let v = n.iter().sum::<f64>() / n.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![v], Op::Mean(a), rg)
    }

    /// Selects rows of `table [V, d]` by index: `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let node = &self.nodes[table.0];
        if node.shape.len() != 2 {
            return Err(Error::shape("gather_rows", &node.shape, &[]));
        }
        let (v, d) = (node.shape[0], node.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("gather_rows: index {bad} out of range for {v} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&node.value[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![indices.len(), d], out, Op::GatherRows(table, indices.to_vec()), rg))
    }

    /// Picks flat elements of `a` into a new tensor of `shape`.
    pub fn take(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if numel(&shape) != indices.len() {
            return Err(Error::shape("take", &shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("take: index {bad} out of range for {n} elements")));
        }
        let out = indices.iter().map(|&i| self.nodes[a.0].value[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Take(a, indices), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let node = &self.nodes[a.0];
        if numel(&shape) != node.value.len() {
            return Err(Error::shape("reshape", &node.shape, &shape));
        }
        let out = node.value.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let lead = self.nodes[first.0].shape[..self.nodes[first.0].shape.len().saturating_sub(1)].to_vec();
        let rows = self.nodes[first.0].rows();
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_cols", &self.nodes[first.0].shape, s));
            }
            total += self.nodes[p.0].cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let n = &self.nodes[p.0];
                let c = n.cols();
                out.extend_from_slice(&n.value[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    fn pool_dims(&self, op: &'static str, x: Var, mask: &[f64]) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::shape(op, s, &[mask.len()]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Mean over positions of `x [B, L, d]` where `mask [B*L]` is nonzero.
    /// Rows with no unmasked position pool to zero.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (b, l, d) = self.pool_dims("masked_mean_pool", x, mask)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let count: f64 = mask[i * l..(i + 1) * l].iter().sum();
            if count == 0.0 {
                continue;
            }
            let orow = &mut out[i * d..(i + 1) * d];
            for p in 0..l {
                let w = mask[i * l + p];
                if w == 0.0 {
                    continue;
                }
                let base = (i * l + p) * d;
                for (o, v) in orow.iter_mut().zip(&xv[base..base + d]) {
                    *o += w * v;
                }
            }
            orow.iter_mut().for_each(|o| *o /= count);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, d], out, Op::MaskedMeanPool(x, mask.to_vec()), rg))
    }

    /// Max over unmasked positions of `x [B, L, d]`, per feature. Ties go to
    /// the first position; rows with no unmasked position pool to zero.
    pub fn masked_max_pool(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (b, l, d) = self.pool_dims("masked_max_pool", x, mask)?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; b * d];
        let mut arg = vec![None; b * d];
        for i in 0..b {
            for j in 0..d {
                let mut best: Option<usize> = None;
                for p in 0..l {
                    if mask[i * l + p] == 0.0 {
                        continue;
                    }
                    let v = xv[(i * l + p) * d + j];
                    if best.is_none_or(|bp| v > xv[(i * l + bp) * d + j]) {
                        best = Some(p);
                    }
                }
                if let Some(p) = best {
                    out[i * d + j] = xv[(i * l + p) * d + j];
                }
                arg[i * d + j] = best;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, d], out, Op::MaskedMaxPool(x, arg), rg))
    }

    /// Backpropagates from the scalar `loss`.
    ///
    /// Every node reachable from `loss` that requires grad receives
    /// `d loss / d node` in the returned [`Gradients`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        self.backward_passes += 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Runs `f` on the (lazily zeroed) gradient buffer of `v` if it needs one.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let (k, n) = (nb.shape[0], nb.shape[1]);
                let m = na.rows();
                with(*a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &nb.value[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                with(*b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = na.value[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (node.shape[1], node.shape[0]);
                with(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with(*a, &mut |ga| add_into(ga, g));
                with(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |ga| add_into(ga, g));
                with(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                with(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                with(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = node.cols();
                with(*x, &mut |gx| add_into(gx, g));
                with(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => with(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x)),
            Op::Relu(a) => {
                let va = &nodes[a.0].value;
                with(*a, &mut |ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(va) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Log1p(a) => {
                let va = &nodes[a.0].value;
                with(*a, &mut |ga| {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(va) {
                        *o += x / (1.0 + v);
                    }
                });
            }
            Op::Exp(a) => with(*a, &mut |ga| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *o += x * y;
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = node.cols();
                with(*a, &mut |ga| {
                    for ((gr, yr), orow) in g.chunks(c).zip(node.value.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, x), y) in orow.iter_mut().zip(gr).zip(yr) {
                            *o += y * (x - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.cols();
                with(*a, &mut |ga| {
                    for ((gr, yr), orow) in g.chunks(c).zip(node.value.chunks(c)).zip(ga.chunks_mut(c)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((o, x), y) in orow.iter_mut().zip(gr).zip(yr) {
                            *o += x - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::MeanRows(a) | Op::SumRows(a) => {
                let c = nodes[a.0].cols();
                let div = if matches!(node.op, Op::MeanRows(_)) { c as f64 } else { 1.0 };
                with(*a, &mut |ga| {
                    for (orow, x) in ga.chunks_mut(c.max(1)).zip(g) {
                        orow.iter_mut().for_each(|o| *o += x / div);
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let c = nodes[a.0].cols();
                with(*a, &mut |ga| {
                    for (r, (&j, x)) in arg.iter().zip(g).enumerate() {
                        if c > 0 {
                            ga[r * c + j] += x;
                        }
                    }
                });
            }
            Op::DotRows(a, b) => {
                let c = nodes[a.0].cols();
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                for (target, other) in [(*a, vb), (*b, va)] {
                    with(target, &mut |gt| {
                        for (r, x) in g.iter().enumerate() {
                            for j in 0..c {
                                gt[r * c + j] += x * other[r * c + j];
                            }
                        }
                    });
                }
            }
            Op::L2Norm(a) => {
                let y = node.value[0];
                if y > 0.0 {
                    let va = &nodes[a.0].value;
                    with(*a, &mut |ga| {
                        for (o, v) in ga.iter_mut().zip(va) {
                            *o += g[0] * v / y;
                        }
                    });
                }
            }
            Op::Sum(a) => with(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                with(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::GatherRows(t, idx) => {
                let d = nodes[t.0].shape[1];
                with(*t, &mut |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Take(a, idx) => with(*a, &mut |ga| {
                for (&i, x) in idx.iter().zip(g) {
                    ga[i] += x;
                }
            }),
            Op::Reshape(a) => with(*a, &mut |ga| add_into(ga, g)),
            Op::ConcatCols(parts) => {
                let total = node.cols();
                let rows = node.rows();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].cols();
                    with(*p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::MaskedMeanPool(x, mask) => {
                let s = &nodes[x.0].shape;
                let (b, l, d) = (s[0], s[1], s[2]);
                with(*x, &mut |gx| {
                    for i in 0..b {
                        let count: f64 = mask[i * l..(i + 1) * l].iter().sum();
                        if count == 0.0 {
                            continue;
                        }
                        for p in 0..l {
                            let w = mask[i * l + p] / count;
                            if w == 0.0 {
                                continue;
                            }
                            let base = (i * l + p) * d;
                            for j in 0..d {
                                gx[base + j] += w * g[i * d + j];
                            }
                        }
                    }
                });
            }
            Op::MaskedMaxPool(x, arg) => {
                let s = &nodes[x.0].shape;
                let (l, d) = (s[1], s[2]);
                with(*x, &mut |gx| {
                    for (k, a) in arg.iter().enumerate() {
                        if let Some(p) = a {
                            let (i, j) = (k / d, k % d);
                            gx[(i * l + p) * d + j] += g[k];
                        }
                    }
                });
            }
        }
    }
}
