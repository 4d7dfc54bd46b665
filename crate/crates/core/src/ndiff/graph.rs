//! Define-by-run reverse-mode tape over dense matrices.
//!
//! Every operation evaluates eagerly and records its parents; [`Graph::backward`]
//! walks the tape in reverse. Binary elementwise ops broadcast `1`-sized
//! dimensions. A fresh graph is built for every evaluation.

use super::tensor::Tensor;

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
    Min(Var, Var),
    Max(Var, Var),
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Reciprocal(Var),
    Neg(Var),
    Scale(Var, f64),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    /// `pos` where `key >= 0`, else `neg`; `key` carries no gradient.
    SelectBySign { key: Var, pos: Var, neg: Var },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    let ia = |i: usize, j: usize| a.get(if a.rows() == 1 { 0 } else { i }, if a.cols() == 1 { 0 } else { j });
    let ib = |i: usize, j: usize| b.get(if b.rows() == 1 { 0 } else { i }, if b.cols() == 1 { 0 } else { j });
    Tensor::from_fn(r, c, |i, j| f(ia(i, j), ib(i, j)))
}

/// Value of `x` at the broadcast position `(i, j)`.
fn at(x: &Tensor, i: usize, j: usize) -> f64 {
    x.get(if x.rows() == 1 { 0 } else { i }, if x.cols() == 1 { 0 } else { j })
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (ri, cj) = (if shape.0 == 1 { 0 } else { i }, if shape.1 == 1 { 0 } else { j });
            let v = out.get(ri, cj) + g.get(i, j);
            out.set(ri, cj, v);
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), f64::min);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Min(a, b), v, ng)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), f64::max);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Max(a, b), v, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let v = match (trans_a, trans_b) {
            (false, false) => va.matmul(vb),
            (false, true) => va.matmul_nt(vb),
            (true, false) => va.matmul_tn(vb),
            (true, true) => va.transpose().matmul_nt(vb),
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            v,
            ng,
        )
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(op, v, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(a, Op::Reciprocal(a), f64::recip)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise sum, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::column((0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(Op::SumCols(a), v, ng)
    }

    /// Column-wise sum, `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut acc = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (s, v) in acc.iter_mut().zip(x.row_slice(r)) {
                *s += v;
            }
        }
        let ng = self.ng(a);
        self.push(Op::SumRows(a), Tensor::row(acc), ng)
    }

    pub fn select_by_sign(&mut self, key: Var, pos: Var, neg: Var) -> Var {
        let (k, p, n) = (self.value(key), self.value(pos), self.value(neg));
        let (r, c) = broadcast_shape(broadcast_shape(k.shape(), p.shape()), n.shape());
        let v = Tensor::from_fn(r, c, |i, j| if at(k, i, j) >= 0.0 { at(p, i, j) } else { at(n, i, j) });
        let ng = self.ng(pos) || self.ng(neg);
        self.push(Op::SelectBySign { key, pos, neg }, v, ng)
    }

    /// `|a|` with subgradient `+1` at zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.select_by_sign(a, a, n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|&p| self.value(p).rows() == rows), "concat row mismatch");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_vec(rows, cols, data), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let cols: Vec<usize> = (start..end).collect();
        let v = x.select_cols(&cols);
        let ng = self.ng(a);
        self.push(Op::SliceCols(a, start, end), v, ng)
    }

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let (r, c) = self.value(output).shape();
        self.backward_with_seed(output, Tensor::filled(r, c, 1.0))
    }

    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                let t = reduce_to(t, self.value(v).shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        send(&mut grads, *a, broadcast_zip(&g, vb, |x, y| x * y));
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, broadcast_zip(&g, va, |x, y| x * y));
                    }
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let pick_a = |i, j| {
                        let (x, y) = (at(va, i, j), at(vb, i, j));
                        if is_min { x <= y } else { x >= y }
                    };
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| if pick_a(i, j) { g.get(i, j) } else { 0.0 });
                    let gb = Tensor::from_fn(g.rows(), g.cols(), |i, j| if pick_a(i, j) { 0.0 } else { g.get(i, j) });
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::MatMul { a, b, trans_a, trans_b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        // C = op(A) op(B); dop(A) = G op(B)ᵀ
                        let d = match (trans_a, trans_b) {
                            (false, false) => g.matmul_nt(vb),
                            (false, true) => g.matmul(vb),
                            (true, false) => vb.matmul_nt(&g),
                            (true, true) => g.matmul(vb).transpose(),
                        };
                        send(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        // dop(B) = op(A)ᵀ G
                        let d = match (trans_a, trans_b) {
                            (false, false) => va.matmul_tn(&g),
                            (false, true) => g.matmul_tn(va),
                            (true, false) => va.matmul(&g),
                            (true, true) => va.matmul(&g).transpose(),
                        };
                        send(&mut grads, *b, d);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(&mut grads, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Tanh(a) => send(&mut grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))),
                Op::Exp(a) => send(&mut grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
                Op::Log(a) => {
                    let x = self.value(*a);
                    send(&mut grads, *a, g.zip_map(x, |gi, xi| gi / xi));
                }
                Op::Reciprocal(a) => send(&mut grads, *a, g.zip_map(y, |gi, yi| -gi * yi * yi)),
                Op::Neg(a) => send(&mut grads, *a, g.map(|x| -x)),
                Op::Scale(a, k) => {
                    let k = *k;
                    send(&mut grads, *a, g.map(|x| k * x));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(&mut grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(&mut grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
                }
                Op::SelectBySign { key, pos, neg } => {
                    let k = self.value(*key);
                    if self.ng(*pos) {
                        let gp = Tensor::from_fn(g.rows(), g.cols(), |i, j| if at(k, i, j) >= 0.0 { g.get(i, j) } else { 0.0 });
                        send(&mut grads, *pos, gp);
                    }
                    if self.ng(*neg) {
                        let gn = Tensor::from_fn(g.rows(), g.cols(), |i, j| if at(k, i, j) >= 0.0 { 0.0 } else { g.get(i, j) });
                        send(&mut grads, *neg, gn);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let cols: Vec<usize> = (start..start + w).collect();
                            send(&mut grads, p, g.select_cols(&cols));
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.value(*a).shape();
                    let (s, e) = (*start, *end);
                    send(
                        &mut grads,
                        *a,
                        Tensor::from_fn(r, c, |i, j| if j >= s && j < e { g.get(i, j - s) } else { 0.0 }),
                    );
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.relu(x);
        assert_eq!(g.backward(y).get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(Tensor::row(vec![3.0, 4.0]));
        let p = g.mul(x, c);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    /// Central differences of a scalar-valued graph builder.
    fn check_fd(build: impl Fn(&mut Graph, Var) -> Var, x0: Tensor) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let grad = g.backward(y).get_or_zeros(x, x0.shape());
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |d: f64| {
                let mut t = x0.clone();
                t.data_mut()[k] += d;
                let mut g = Graph::new();
                let x = g.input(t);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {k}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = Tensor::from_vec(2, 3, vec![0.3, -0.7, 1.2, 0.5, 2.0, -1.5]);
        check_fd(
            |g, x| {
                let t = g.tanh(x);
                let e = g.exp(t);
                let sq = g.mul(x, x);
                let one = g.scalar(1.0);
                let d = g.add(sq, one);
                let l = g.log(d);
                let r = g.reciprocal(d);
                let m = g.min(e, l);
                let mx = g.max(m, r);
                let a = g.abs(x);
                let s = g.mul(mx, a);
                let sc = g.scale(s, 0.7);
                let rc = g.sum_cols(sc);
                let rr = g.sum_rows(rc);
                g.sum(rr)
            },
            x0,
        );
    }

    #[test]
    fn matmul_broadcast_concat_slice_match_finite_differences() {
        let w = Tensor::from_fn(4, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let x0 = Tensor::from_fn(3, 5, |i, j| ((i + 2 * j) as f64 * 0.21).cos());
        check_fd(
            move |g, x| {
                let wv = g.constant(w.clone());
                let h = g.matmul_t(x, wv, false, true);
                let b = g.constant(Tensor::row(vec![0.1, -0.2, 0.3, 0.0]));
                let hb = g.add(h, b);
                let r = g.relu(hb);
                let s = g.slice_cols(r, 1, 3);
                let cat = g.concat_cols(&[s, x]);
                let tn = g.matmul_t(cat, cat, true, false);
                let nt = g.matmul_t(x, x, false, true);
                let a = g.sum(tn);
                let c = g.sum(nt);
                let neg = g.neg(c);
                let key = g.constant(Tensor::row(vec![1.0, -1.0]));
                let both = g.concat_cols(&[a, neg]);
                let pick = g.select_by_sign(key, both, neg);
                let st = g.sub(pick, a);
                g.sum(st)
            },
            x0,
        );
    }
}
