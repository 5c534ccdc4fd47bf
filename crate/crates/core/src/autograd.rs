//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node returns the gradient of that scalar
//! with respect to every node that was created with [`Tape::param`] (or that
//! depends on one).

use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SignedSqrt(Var),
    Exp(Var),
    PairRows(Var, usize),
    PairCols(Var, usize),
    GroupSum(Var, usize),
    PairSoftmax { x: Var, n: usize, groups: usize },
    PairAggregate { alpha: Var, msg: Var, n: usize },
    RowSoftmax(Var),
    LayerNorm(Var, f64),
    SumAll(Var),
    WeightedRowSum(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    CrossEntropy(Var, Vec<Option<usize>>),
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

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn head_of(c: usize, cols: usize, groups: usize) -> usize {
    c / (cols / groups)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let g = self.needs(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "add shape mismatch"
        );
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "sub shape mismatch"
        );
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "mul shape mismatch"
        );
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.rows == 1 && vr.cols == va.cols, "add_row shape mismatch");
        let mut value = va.clone();
        for r in 0..value.rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&vr.data) {
                *x += y;
            }
        }
        let g = self.needs(&[a, row]);
        self.push(value, Op::AddRow(a, row), g)
    }

    /// Multiplies every row of `a` elementwise by a `[1, c]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(vr.rows == 1 && vr.cols == va.cols, "mul_row shape mismatch");
        let mut value = va.clone();
        for r in 0..value.rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&vr.data) {
                *x *= y;
            }
        }
        let g = self.needs(&[a, row]);
        self.push(value, Op::MulRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let g = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let g = self.needs(&[a]);
        self.push(value, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), g)
    }

    /// `sqrt(relu(x)) - sqrt(relu(-x))`.
    pub fn signed_sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(signed_sqrt);
        let g = self.needs(&[a]);
        self.push(value, Op::SignedSqrt(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let g = self.needs(&[a]);
        self.push(value, Op::Exp(a), g)
    }

    /// `[n, c] -> [n*n, c]` with row `i*n + j` equal to row `i`.
    pub fn pair_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.rows;
        let mut value = Tensor::zeros(n * n, va.cols);
        for i in 0..n {
            for j in 0..n {
                value.row_mut(i * n + j).copy_from_slice(va.row(i));
            }
        }
        let g = self.needs(&[a]);
        self.push(value, Op::PairRows(a, n), g)
    }

    /// `[n, c] -> [n*n, c]` with row `i*n + j` equal to row `j`.
    pub fn pair_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.rows;
        let mut value = Tensor::zeros(n * n, va.cols);
        for i in 0..n {
            for j in 0..n {
                value.row_mut(i * n + j).copy_from_slice(va.row(j));
            }
        }
        let g = self.needs(&[a]);
        self.push(value, Op::PairCols(a, n), g)
    }

    /// Sums each of `groups` contiguous channel blocks: `[r, c] -> [r, groups]`.
    pub fn group_sum(&mut self, a: Var, groups: usize) -> Var {
        let va = self.value(a);
        assert!(
            groups > 0 && va.cols % groups == 0,
            "group_sum: groups must divide cols"
        );
        let width = va.cols / groups;
        let mut value = Tensor::zeros(va.rows, groups);
        for r in 0..va.rows {
            let row = va.row(r);
            for h in 0..groups {
                value.set(r, h, row[h * width..(h + 1) * width].iter().sum());
            }
        }
        let g = self.needs(&[a]);
        self.push(value, Op::GroupSum(a, groups), g)
    }

    /// Softmax over `j` of logits laid out as `[n*n, groups]`, independently
    /// per row `i` and group. Columns `j` with `mask[j] == false` receive
    /// exactly zero weight.
    pub fn pair_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let va = self.value(a);
        let groups = va.cols;
        let n = (va.rows as f64).sqrt().round() as usize;
        assert_eq!(n * n, va.rows, "pair_softmax expects n*n rows");
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        assert!((0..n).any(keep), "pair_softmax: every column is masked");
        let mut value = Tensor::zeros(va.rows, groups);
        for i in 0..n {
            for h in 0..groups {
                let mut max = f64::NEG_INFINITY;
                for j in (0..n).filter(|&j| keep(j)) {
                    max = max.max(va.get(i * n + j, h));
                }
                let mut total = 0.0;
                for j in (0..n).filter(|&j| keep(j)) {
                    let e = (va.get(i * n + j, h) - max).exp();
                    value.set(i * n + j, h, e);
                    total += e;
                }
                for j in (0..n).filter(|&j| keep(j)) {
                    let v = value.get(i * n + j, h) / total;
                    value.set(i * n + j, h, v);
                }
            }
        }
        let g = self.needs(&[a]);
        self.push(value, Op::PairSoftmax { x: a, n, groups }, g)
    }

    /// `out[i, c] = sum_j alpha[i*n + j, head(c)] * msg[i*n + j, c]`.
    pub fn pair_aggregate(&mut self, alpha: Var, msg: Var) -> Var {
        let (va, vm) = (self.value(alpha), self.value(msg));
        assert_eq!(va.rows, vm.rows, "pair_aggregate row mismatch");
        let n = (va.rows as f64).sqrt().round() as usize;
        assert_eq!(n * n, va.rows);
        let groups = va.cols;
        let cols = vm.cols;
        assert!(
            cols % groups == 0,
            "pair_aggregate: heads must divide channels"
        );
        let mut value = Tensor::zeros(n, cols);
        for i in 0..n {
            for j in 0..n {
                let r = i * n + j;
                let m = vm.row(r);
                let a = va.row(r);
                let out = &mut value.data[i * cols..(i + 1) * cols];
                for c in 0..cols {
                    out[c] += a[head_of(c, cols, groups)] * m[c];
                }
            }
        }
        let g = self.needs(&[alpha, msg]);
        self.push(value, Op::PairAggregate { alpha, msg, n }, g)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        let g = self.needs(&[a]);
        self.push(value, Op::RowSoftmax(a), g)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows {
            normalize_row(value.row_mut(r), eps);
        }
        let g = self.needs(&[a]);
        self.push(value, Op::LayerNorm(a, eps), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::filled(1, 1, self.value(a).sum());
        let g = self.needs(&[a]);
        self.push(value, Op::SumAll(a), g)
    }

    /// `sum_r weights[r] * a[r, :]`, a `[1, c]` row.
    pub fn weighted_row_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(weights.len(), va.rows, "weighted_row_sum length");
        let mut value = Tensor::zeros(1, va.cols);
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, x) in value.data.iter_mut().zip(va.row(r)) {
                *o += w * x;
            }
        }
        let g = self.needs(&[a]);
        self.push(value, Op::WeightedRowSum(a, weights), g)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        let g = self.needs(&[a]);
        self.push(value, Op::GatherRows(a, idx), g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows, "concat_cols row mismatch");
        let cols = va.cols + vb.cols;
        let mut value = Tensor::zeros(va.rows, cols);
        for r in 0..va.rows {
            value.row_mut(r)[..va.cols].copy_from_slice(va.row(r));
            value.row_mut(r)[va.cols..].copy_from_slice(vb.row(r));
        }
        let g = self.needs(&[a, b]);
        self.push(value, Op::ConcatCols(a, b), g)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.cols, "concat_rows column mismatch");
        let mut data = Vec::with_capacity(va.data.len() + vb.data.len());
        data.extend_from_slice(&va.data);
        data.extend_from_slice(&vb.data);
        let value = Tensor::from_vec(va.rows + vb.rows, va.cols, data).expect("sized");
        let g = self.needs(&[a, b]);
        self.push(value, Op::ConcatRows(a, b), g)
    }

    /// Summed cross-entropy of row-wise logits against class targets; rows
    /// with `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let vl = self.value(logits);
        assert_eq!(targets.len(), vl.rows, "cross_entropy target count");
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = vl.row(r);
                total += log_sum_exp(row) - row[t];
            }
        }
        let g = self.needs(&[logits]);
        self.push(
            Tensor::filled(1, 1, total),
            Op::CrossEntropy(logits, targets),
            g,
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let rv = self.value(root);
        assert!(
            rv.rows == 1 && rv.cols == 1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMulNt(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, gout.matmul(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, gout.matmul_tn(self.value(a)));
                }
            }
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, gout.matmul_nt(self.value(b)));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, self.value(a).matmul_tn(gout));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gout.clone());
                self.accumulate(grads, b, gout.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, gout.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, gout.scale(-1.0));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, gout.zip_map(self.value(b), |g, y| g * y));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, gout.zip_map(self.value(a), |g, x| g * x));
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, gout.clone());
                if self.wants(row) {
                    let mut gr = Tensor::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for (o, x) in gr.data.iter_mut().zip(gout.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, row, gr);
                }
            }
            &Op::MulRow(a, row) => {
                let (va, vr) = (self.value(a), self.value(row));
                if self.wants(a) {
                    let mut ga = gout.clone();
                    for r in 0..ga.rows {
                        for (o, y) in ga.row_mut(r).iter_mut().zip(&vr.data) {
                            *o *= y;
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.wants(row) {
                    let mut gr = Tensor::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for ((o, g), x) in gr.data.iter_mut().zip(gout.row(r)).zip(va.row(r)) {
                            *o += g * x;
                        }
                    }
                    self.accumulate(grads, row, gr);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, gout.scale(s)),
            &Op::Relu(a) => {
                let ga = gout.zip_map(self.value(a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = gout.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                self.accumulate(grads, a, ga);
            }
            &Op::SignedSqrt(a) => {
                let ga = gout.zip_map(self.value(a), |g, x| g * signed_sqrt_derivative(x));
                self.accumulate(grads, a, ga);
            }
            &Op::Exp(a) => {
                let ga = gout.zip_map(&node.value, |g, y| g * y);
                self.accumulate(grads, a, ga);
            }
            &Op::PairRows(a, n) => {
                let mut ga = Tensor::zeros(n, gout.cols);
                for i in 0..n {
                    for j in 0..n {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(gout.row(i * n + j)) {
                            *o += x;
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::PairCols(a, n) => {
                let mut ga = Tensor::zeros(n, gout.cols);
                for i in 0..n {
                    for j in 0..n {
                        for (o, x) in ga.row_mut(j).iter_mut().zip(gout.row(i * n + j)) {
                            *o += x;
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::GroupSum(a, groups) => {
                let va = self.value(a);
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    for c in 0..va.cols {
                        ga.set(r, c, gout.get(r, head_of(c, va.cols, groups)));
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::PairSoftmax { x, n, groups } => {
                let y = &node.value;
                let mut gx = Tensor::zeros(n * n, groups);
                for i in 0..n {
                    for h in 0..groups {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += y.get(i * n + j, h) * gout.get(i * n + j, h);
                        }
                        for j in 0..n {
                            let yj = y.get(i * n + j, h);
                            gx.set(i * n + j, h, yj * (gout.get(i * n + j, h) - s));
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::PairAggregate { alpha, msg, n } => {
                let (va, vm) = (self.value(alpha), self.value(msg));
                let groups = va.cols;
                let cols = vm.cols;
                if self.wants(alpha) {
                    let mut ga = Tensor::zeros(n * n, groups);
                    for i in 0..n {
                        let go = gout.row(i);
                        for j in 0..n {
                            let r = i * n + j;
                            let m = vm.row(r);
                            for c in 0..cols {
                                let h = head_of(c, cols, groups);
                                ga.data[r * groups + h] += go[c] * m[c];
                            }
                        }
                    }
                    self.accumulate(grads, alpha, ga);
                }
                if self.wants(msg) {
                    let mut gm = Tensor::zeros(n * n, cols);
                    for i in 0..n {
                        let go = gout.row(i);
                        for j in 0..n {
                            let r = i * n + j;
                            let a = va.row(r);
                            let out = gm.row_mut(r);
                            for c in 0..cols {
                                out[c] = a[head_of(c, cols, groups)] * go[c];
                            }
                        }
                    }
                    self.accumulate(grads, msg, gm);
                }
            }
            &Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let s = dot(y.row(r), gout.row(r));
                    for c in 0..y.cols {
                        ga.set(r, c, y.get(r, c) * (gout.get(r, c) - s));
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::LayerNorm(a, eps) => {
                let va = self.value(a);
                let y = &node.value;
                let cols = va.cols as f64;
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    let x = va.row(r);
                    let mean = x.iter().sum::<f64>() / cols;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g = gout.row(r);
                    let yr = y.row(r);
                    let g_mean = g.iter().sum::<f64>() / cols;
                    let gy_mean = dot(g, yr) / cols;
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (g[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            &Op::SumAll(a) => {
                let va = self.value(a);
                self.accumulate(grads, a, Tensor::filled(va.rows, va.cols, gout.data[0]));
            }
            Op::WeightedRowSum(a, weights) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for (r, &w) in weights.iter().enumerate() {
                    for (o, g) in ga.row_mut(r).iter_mut().zip(&gout.data) {
                        *o = w * g;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for (o, &i) in idx.iter().enumerate() {
                    for (x, g) in ga.row_mut(i).iter_mut().zip(gout.row(o)) {
                        *x += g;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols;
                let cb = self.value(b).cols;
                let mut ga = Tensor::zeros(gout.rows, ca);
                let mut gb = Tensor::zeros(gout.rows, cb);
                for r in 0..gout.rows {
                    ga.row_mut(r).copy_from_slice(&gout.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&gout.row(r)[ca..]);
                }
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            &Op::ConcatRows(a, b) => {
                let ra = self.value(a).rows;
                let split = ra * gout.cols;
                let ga =
                    Tensor::from_vec(ra, gout.cols, gout.data[..split].to_vec()).expect("sized");
                let gb = Tensor::from_vec(gout.rows - ra, gout.cols, gout.data[split..].to_vec())
                    .expect("sized");
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::CrossEntropy(logits, targets) => {
                let vl = self.value(*logits);
                let scale = gout.data[0];
                let mut gl = Tensor::zeros(vl.rows, vl.cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let out = gl.row_mut(r);
                        out.copy_from_slice(vl.row(r));
                        softmax_in_place(out);
                        out[t] -= 1.0;
                        for v in out.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

pub fn signed_sqrt(x: f64) -> f64 {
    x.max(0.0).sqrt() - (-x).max(0.0).sqrt()
}

fn signed_sqrt_derivative(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        0.5 / x.abs().sqrt()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn normalize_row(row: &mut [f64], eps: f64) {
    let cols = row.len() as f64;
    let mean = row.iter().sum::<f64>() / cols;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
    let inv = 1.0 / (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central differences of `f` at `x`, compared to the tape gradient.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or(Tensor::zeros(x.rows, x.cols));
        let h = 1e-6;
        let eval = |t: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let out = build(&mut tape, v);
            tape.value(out).data[0]
        };
        for k in 0..x.data.len() {
            let mut plus = x.clone();
            plus.data[k] += h;
            let mut minus = x.clone();
            minus.data[k] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data[k];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "entry {k}: analytic {a} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn pair_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(9, 4, &mut rng);
        let x = random(3, 4, &mut rng);
        let wc = w.clone();
        check(
            move |t, v| {
                let r = t.pair_rows(v);
                let c = t.pair_cols(v);
                let p = t.mul(r, c);
                let wv = t.constant(wc.clone());
                let e = t.add(p, wv);
                let logits = t.group_sum(e, 2);
                let a = t.pair_softmax(logits, Some(&[true, false, true]));
                let agg = t.pair_aggregate(a, e);
                let ln = t.layer_norm(agg, 1e-5);
                let s = t.signed_sqrt(ln);
                let q = t.mul(s, s);
                t.sum_all(q)
            },
            x,
        );
    }

    #[test]
    fn softmax_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(4, 3, &mut rng);
        check(
            |t, v| {
                let s = t.row_softmax(v);
                let e = t.exp(s);
                let ce = t.cross_entropy(e, vec![Some(0), None, Some(2), Some(1)]);
                let g = t.gather_rows(v, vec![1, 1, 3]);
                let g = t.concat_rows(g, v);
                let g = t.gather_rows(g, vec![0, 4, 2]);
                let gs = t.sigmoid(g);
                let pooled = t.weighted_row_sum(gs, vec![0.5, 0.25, 1.0]);
                let ps = t.sum_all(pooled);
                t.add(ce, ps)
            },
            x,
        );
    }

    #[test]
    fn masked_columns_get_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(4, 1, 0.3));
        let a = tape.pair_softmax(x, Some(&[true, false]));
        assert_eq!(tape.value(a).data, vec![1.0, 0.0, 1.0, 0.0]);
    }
}
