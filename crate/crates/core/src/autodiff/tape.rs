use super::func;
use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddN(Vec<Var>),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Recip(Var),
    Sum(Var),
    Dot(Var, Var),
    /// `s * a` with `s` a scalar.
    ScaleBy(Var, Var),
    /// `x W^T (+ b)` for `x` of shape `[in]` or `[n, in]`, `W` of shape `[out, in]`.
    Linear { x: Var, w: Var, b: Option<Var> },
    /// `a B` for `a` of shape `[k]` or `[n, k]`, `B` of shape `[k, m]`.
    MatMul(Var, Var),
    /// `x^T W y` with `W` of shape `[dx, dy, m]`.
    Bilinear { x: Var, w: Var, y: Var },
    /// Contracts the middle axis of `W` (`[d1, d2, m]`) with `y`, giving `[d1, m]`.
    ContractMiddle { w: Var, y: Var },
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Row { a: Var, row: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    SumRows(Var),
    MaxRows { a: Var, argmax: Vec<usize> },
    ScaleRows { a: Var, w: Var },
    Softmax(Var),
    LogSoftmax(Var),
    SoftplusScaled { x: Var, psi: Var },
    /// Forward value is fixed; gradient flows to the soft input unchanged.
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Every op evaluates eagerly; [`Tape::backward`] walks the record in reverse
/// once, visiting each node a single time.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Reverse-mode gradients of one scalar with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "not a scalar");
        d[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = self.any_grad(parents);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "shape mismatch between operands"
        );
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect());
        self.derived(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.same_shape(a, b);
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.derived(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds a constant array of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        assert_eq!(self.data(a).len(), c.len(), "shape mismatch in add_const");
        let data = self.data(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        self.derived(value, Op::AddConst(a), &[a])
    }

    /// Sum of same-shaped values.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n needs at least one operand");
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            assert_eq!(self.shape(x), acc.shape(), "shape mismatch in add_n");
            for (o, v) in acc.data_mut().iter_mut().zip(self.data(x)) {
                *o += v;
            }
        }
        self.derived(acc, Op::AddN(xs.to_vec()), xs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, func::sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, func::softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.data(a).len(), self.data(b).len(), "shape mismatch in dot");
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        self.derived(Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    pub fn scale_by(&mut self, s: Var, a: Var) -> Var {
        let c = self.scalar(s);
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * c).collect());
        self.derived(value, Op::ScaleBy(s, a), &[s, a])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear weight must be a matrix");
        let (out, inp) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        let (rows, out_shape) = match xs.as_slice() {
            [k] => {
                assert_eq!(*k, inp, "linear input width mismatch");
                (1, vec![out])
            }
            [n, k] => {
                assert_eq!(*k, inp, "linear input width mismatch");
                (*n, vec![*n, out])
            }
            _ => panic!("linear input must be a vector or matrix"),
        };
        let xd = self.data(x);
        let wd = self.data(w);
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wd[o * inp..(o + 1) * inp];
                y[r * out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            assert_eq!(bd.len(), out, "bias width mismatch");
            for r in 0..rows {
                for o in 0..out {
                    y[r * out + o] += bd[o];
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.derived(Tensor::new(out_shape, y), Op::Linear { x, w, b }, &parents)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let bs = self.shape(b).to_vec();
        assert_eq!(bs.len(), 2, "matmul right operand must be a matrix");
        let (k, m) = (bs[0], bs[1]);
        let (rows, out_shape) = match self.shape(a) {
            [ka] => {
                assert_eq!(*ka, k, "matmul inner dimension mismatch");
                (1, vec![m])
            }
            [n, ka] => {
                assert_eq!(*ka, k, "matmul inner dimension mismatch");
                (*n, vec![*n, m])
            }
            _ => panic!("matmul left operand must be a vector or matrix"),
        };
        let ad = self.data(a);
        let bd = self.data(b);
        let mut y = vec![0.0; rows * m];
        for r in 0..rows {
            let yr = &mut y[r * m..(r + 1) * m];
            for (i, &av) in ad[r * k..(r + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in yr.iter_mut().zip(&bd[i * m..(i + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
        self.derived(Tensor::new(out_shape, y), Op::MatMul(a, b), &[a, b])
    }

    pub fn bilinear(&mut self, x: Var, w: Var, y: Var) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3, "bilinear weight must be rank 3");
        assert_eq!(self.data(x).len(), ws[0], "bilinear left width mismatch");
        assert_eq!(self.data(y).len(), ws[1], "bilinear right width mismatch");
        let out = func::bilinear_form(self.data(x), self.data(w), self.data(y), ws[2])
            .expect("shapes checked");
        self.derived(Tensor::vector(out), Op::Bilinear { x, w, y }, &[x, w, y])
    }

    pub fn contract_middle(&mut self, w: Var, y: Var) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3, "contract_middle weight must be rank 3");
        let (d1, d2, m) = (ws[0], ws[1], ws[2]);
        assert_eq!(self.data(y).len(), d2, "contract_middle width mismatch");
        let wd = self.data(w);
        let yd = self.data(y);
        let mut g = vec![0.0; d1 * m];
        for a in 0..d1 {
            let ga = &mut g[a * m..(a + 1) * m];
            for (j, &yj) in yd.iter().enumerate() {
                let base = (a * d2 + j) * m;
                for (o, wv) in ga.iter_mut().zip(&wd[base..base + m]) {
                    *o += wv * yj;
                }
            }
        }
        self.derived(Tensor::matrix(d1, m, g), Op::ContractMiddle { w, y }, &[w, y])
    }

    /// Flat concatenation of vectors.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.data(x));
        }
        self.derived(Tensor::vector(data), Op::Concat(xs.to_vec()), xs)
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Var {
        let width = self.data(xs[0]).len();
        let mut data = Vec::with_capacity(width * xs.len());
        for &x in xs {
            assert_eq!(self.data(x).len(), width, "ragged rows in stack_rows");
            data.extend_from_slice(self.data(x));
        }
        let value = Tensor::matrix(xs.len(), width, data);
        self.derived(value, Op::Concat(xs.to_vec()), xs)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let data = self.data(a)[start..start + len].to_vec();
        self.derived(Tensor::vector(data), Op::Slice { a, start }, &[a])
    }

    /// Single element as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let x = self.data(a)[i];
        self.derived(Tensor::scalar(x), Op::Slice { a, start: i }, &[a])
    }

    pub fn row(&mut self, a: Var, row: usize) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "row() needs a matrix");
        let w = s[1];
        let data = self.data(a)[row * w..(row + 1) * w].to_vec();
        self.derived(Tensor::vector(data), Op::Row { a, row }, &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "select_rows needs a matrix");
        let w = s[1];
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let value = Tensor::matrix(rows.len(), w, data);
        self.derived(
            value,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (n, w) = self.matrix_dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; w];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&src[r * w..(r + 1) * w]) {
                *o += v;
            }
        }
        self.derived(Tensor::vector(out), Op::SumRows(a), &[a])
    }

    /// Column-wise maximum over rows.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let (n, w) = self.matrix_dims(a);
        assert!(n > 0, "max_rows of an empty matrix");
        let src = self.data(a);
        let mut out = src[..w].to_vec();
        let mut argmax = vec![0; w];
        for r in 1..n {
            for c in 0..w {
                let v = src[r * w + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        self.derived(Tensor::vector(out), Op::MaxRows { a, argmax }, &[a])
    }

    /// Multiplies row `i` of `a` by `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let (n, cols) = self.matrix_dims(a);
        assert_eq!(self.data(w).len(), n, "scale_rows weight length mismatch");
        let wd = self.data(w);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * wd[i / cols])
            .collect();
        self.derived(Tensor::matrix(n, cols, data), Op::ScaleRows { a, w }, &[a, w])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let data = func::softmax(self.data(a));
        self.derived(Tensor::vector(data), Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let data = func::log_softmax(self.data(a));
        self.derived(Tensor::vector(data), Op::LogSoftmax(a), &[a])
    }

    /// `psi * softplus(x / psi)` for scalar `x` and positive scalar `psi`.
    pub fn softplus_scaled(&mut self, x: Var, psi: Var) -> Var {
        let p = self.scalar(psi);
        assert!(p > 0.0, "softplus scale must be positive, got {p}");
        let y = p * func::softplus(self.scalar(x) / p);
        self.derived(Tensor::scalar(y), Op::SoftplusScaled { x, psi }, &[x, psi])
    }

    /// Value `hard`, gradient of `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Var {
        assert_eq!(self.data(soft).len(), hard.len(), "straight-through length mismatch");
        let value = Tensor::new(self.shape(soft).to_vec(), hard);
        self.derived(value, Op::StraightThrough(soft), &[soft])
    }

    fn matrix_dims(&self, a: Var) -> (usize, usize) {
        match self.shape(a) {
            [n, w] => (*n, *w),
            s => panic!("expected a matrix, got shape {s:?}"),
        }
    }

    /// Reverse-mode accumulation of `d loss / d node` for every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.data(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += c * x)),
            Op::AddConst(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::AddN(xs) => {
                for &x in xs {
                    acc(x, &mut |s| add_into(s, g));
                }
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if ad[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Softplus(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * func::sigmoid(ad[i]);
                    }
                })
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / ad[i];
                    }
                })
            }
            Op::Recip(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * out[i] * out[i];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Dot(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| s.iter_mut().zip(bd).for_each(|(o, y)| *o += g[0] * y));
                acc(*b, &mut |s| s.iter_mut().zip(ad).for_each(|(o, x)| *o += g[0] * x));
            }
            Op::ScaleBy(sv, a) => {
                let c = self.scalar(*sv);
                let ad = self.data(*a);
                acc(*sv, &mut |s| s[0] += g.iter().zip(ad).map(|(x, y)| x * y).sum::<f64>());
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += c * x));
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (outw, inp) = (ws[0], ws[1]);
                let rows = g.len() / outw;
                let (xd, wd) = (self.data(*x), self.data(*w));
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        for o in 0..outw {
                            let go = g[r * outw + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wd[o * inp..(o + 1) * inp];
                            for (si, wv) in s[r * inp..(r + 1) * inp].iter_mut().zip(wr) {
                                *si += go * wv;
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for r in 0..rows {
                        let xr = &xd[r * inp..(r + 1) * inp];
                        for o in 0..outw {
                            let go = g[r * outw + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (si, xv) in s[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                                *si += go * xv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for r in 0..rows {
                            add_into(s, &g[r * outw..(r + 1) * outw]);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let bs = self.shape(*b);
                let (k, m) = (bs[0], bs[1]);
                let rows = g.len() / m;
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for r in 0..rows {
                        let gr = &g[r * m..(r + 1) * m];
                        for i in 0..k {
                            s[r * k + i] += gr.iter().zip(&bd[i * m..(i + 1) * m]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..rows {
                        let gr = &g[r * m..(r + 1) * m];
                        for i in 0..k {
                            let av = ad[r * k + i];
                            if av == 0.0 {
                                continue;
                            }
                            for (si, gv) in s[i * m..(i + 1) * m].iter_mut().zip(gr) {
                                *si += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Bilinear { x, w, y } => {
                let ws = self.shape(*w);
                let (dx, dy, m) = (ws[0], ws[1], ws[2]);
                let (xd, wd, yd) = (self.data(*x), self.data(*w), self.data(*y));
                acc(*x, &mut |s| {
                    for i in 0..dx {
                        let mut t = 0.0;
                        for j in 0..dy {
                            let base = (i * dy + j) * m;
                            let inner: f64 = wd[base..base + m].iter().zip(g).map(|(a, b)| a * b).sum();
                            t += inner * yd[j];
                        }
                        s[i] += t;
                    }
                });
                acc(*y, &mut |s| {
                    for i in 0..dx {
                        if xd[i] == 0.0 {
                            continue;
                        }
                        for j in 0..dy {
                            let base = (i * dy + j) * m;
                            let inner: f64 = wd[base..base + m].iter().zip(g).map(|(a, b)| a * b).sum();
                            s[j] += xd[i] * inner;
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for i in 0..dx {
                        for j in 0..dy {
                            let c = xd[i] * yd[j];
                            if c == 0.0 {
                                continue;
                            }
                            let base = (i * dy + j) * m;
                            for (si, gv) in s[base..base + m].iter_mut().zip(g) {
                                *si += c * gv;
                            }
                        }
                    }
                });
            }
            Op::ContractMiddle { w, y } => {
                let ws = self.shape(*w);
                let (d1, d2, m) = (ws[0], ws[1], ws[2]);
                let (wd, yd) = (self.data(*w), self.data(*y));
                acc(*w, &mut |s| {
                    for a in 0..d1 {
                        let ga = &g[a * m..(a + 1) * m];
                        for (j, &yj) in yd.iter().enumerate() {
                            if yj == 0.0 {
                                continue;
                            }
                            let base = (a * d2 + j) * m;
                            for (si, gv) in s[base..base + m].iter_mut().zip(ga) {
                                *si += gv * yj;
                            }
                        }
                    }
                });
                acc(*y, &mut |s| {
                    for a in 0..d1 {
                        let ga = &g[a * m..(a + 1) * m];
                        for (j, sj) in s.iter_mut().enumerate() {
                            let base = (a * d2 + j) * m;
                            *sj += wd[base..base + m].iter().zip(ga).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.len();
                    acc(x, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Slice { a, start } => {
                acc(*a, &mut |s| add_into(&mut s[*start..*start + g.len()], g));
            }
            Op::Row { a, row } => {
                let w = g.len();
                acc(*a, &mut |s| add_into(&mut s[row * w..(row + 1) * w], g));
            }
            Op::SelectRows { a, rows } => {
                let w = self.shape(*a)[1];
                acc(*a, &mut |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut s[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                    }
                });
            }
            Op::SumRows(a) => {
                let w = g.len();
                acc(*a, &mut |s| {
                    for chunk in s.chunks_mut(w) {
                        add_into(chunk, g);
                    }
                });
            }
            Op::MaxRows { a, argmax } => {
                let w = g.len();
                acc(*a, &mut |s| {
                    for (c, &r) in argmax.iter().enumerate() {
                        s[r * w + c] += g[c];
                    }
                });
            }
            Op::ScaleRows { a, w } => {
                let cols = self.shape(*a)[1];
                let (ad, wd) = (self.data(*a), self.data(*w));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * wd[i / cols];
                    }
                });
                acc(*w, &mut |s| {
                    for (r, sr) in s.iter_mut().enumerate() {
                        *sr += (0..cols).map(|c| g[r * cols + c] * ad[r * cols + c]).sum::<f64>();
                    }
                });
            }
            Op::Softmax(a) => {
                let dotp: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += out[i] * (g[i] - dotp);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] - out[i].exp() * total;
                    }
                });
            }
            Op::SoftplusScaled { x, psi } => {
                let (xv, p) = (self.scalar(*x), self.scalar(*psi));
                let z = xv / p;
                let sig = func::sigmoid(z);
                acc(*x, &mut |s| s[0] += g[0] * sig);
                acc(*psi, &mut |s| s[0] += g[0] * (func::softplus(z) - z * sig));
            }
            Op::StraightThrough(soft) => acc(*soft, &mut |s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
