//! Reverse-mode differentiation over small dense tensors.
//!
//! Every operation appends a node holding its forward value; node inputs
//! always precede the node, so a single reverse sweep over the node list
//! is a valid topological order.
//!
//! Binary elementwise operations broadcast a `1×1`, `r×1` or `1×c` operand
//! against an `r×c` one; the adjoint is summed back over the broadcast axes.

use std::sync::Arc;

use super::scalar::{gelu, gelu_grad, sigmoid, softplus};
use super::{GradError, Gradients, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    ClampMin(Var, f64),
    Sum(Var),
    RowSum(Var),
    Row(Var, usize),
    MaskedSoftmax(Var, Arc<[bool]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::Row(..) => "row",
            Op::MaskedSoftmax(..) => "masked_softmax",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    #[cfg(test)]
    fault: Option<(&'static str, f64)>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(sa.0, sa.1, data);
    }
    let (r, c) = broadcast_shape(sa, sb);
    Tensor::from_fn(r, c, |i, j| f(a.data()[bidx(sa, i, j)], b.data()[bidx(sb, i, j)]))
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

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a registered parameter. Registering the same parameter
    /// twice accumulates both adjoints.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Elementwise `max(x, floor)`; the adjoint is zero where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// `r×c → r×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::col_vector((0..t.rows()).map(|i| t.row(i).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    /// Row `r` of `a`, as `1×c`.
    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let v = Tensor::row_vector(self.value(a).row(r).to_vec());
        let ng = self.ng(a);
        self.push(v, Op::Row(a, r), ng)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries are exactly zero and rows with no admissible entry are all
    /// zero. Evaluated as `exp(x - max)` over the admissible entries.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<[bool]>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "mask does not match logits");
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = (row[j] - max).exp();
                    out.set(i, j, e);
                    z += e;
                }
            }
            for j in 0..c {
                if m[j] {
                    out.set(i, j, out.get(i, j) / z);
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedSoftmax(a, mask), ng)
    }

    #[cfg(test)]
    pub(crate) fn inject_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    /// Reverse sweep from a scalar node. Returns adjoints for every
    /// parameter in `store`; parameters absent from the tape get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, GradError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(GradError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for n in (0..=loss.0).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            if !g.all_finite() {
                return Err(GradError::NonFinite {
                    node: n,
                    op: node.op.name(),
                });
            }
            let mut contributions = self.local_adjoints(node, &g);
            #[cfg(test)]
            if let Some((op, factor)) = self.fault {
                if op == node.op.name() {
                    for (_, t) in &mut contributions {
                        for x in t.data_mut() {
                            *x *= factor;
                        }
                    }
                }
            }
            contributions.retain(|(input, _)| self.nodes[input.0].needs_grad);
            if contributions.iter().any(|(_, t)| !t.all_finite()) {
                return Err(GradError::NonFinite {
                    node: n,
                    op: node.op.name(),
                });
            }
            for (input, t) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            // leaves keep their adjoint for collection below
            if matches!(node.op, Op::Leaf) {
                grads[n] = Some(g);
            }
        }
        let mut out = store.zeros_like();
        for &(id, v) in &self.params {
            if v.0 <= loss.0 {
                if let Some(g) = &grads[v.0] {
                    out.0[id.0].add_assign(g);
                }
            }
        }
        Ok(out)
    }

    fn reduce_to(shape: (usize, usize), full: &Tensor, f: impl Fn(usize, usize, f64) -> f64) -> Tensor {
        let mut out = Tensor::zeros(shape.0, shape.1);
        let (r, c) = full.shape();
        let data = out.data_mut();
        for i in 0..r {
            for j in 0..c {
                data[bidx(shape, i, j)] += f(i, j, full.get(i, j));
            }
        }
        out
    }

    fn local_adjoints(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = Self::reduce_to(val(*a).shape(), g, |_, _, x| x);
                let gb = Self::reduce_to(val(*b).shape(), g, |_, _, x| sign * x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let ga = Self::reduce_to(sa, g, |i, j, x| x * tb.data()[bidx(sb, i, j)]);
                let gb = Self::reduce_to(sb, g, |i, j, x| x * ta.data()[bidx(sa, i, j)]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.ng(*a) {
                    out.push((*a, g.matmul_t(val(*b))));
                }
                if self.ng(*b) {
                    out.push((*b, val(*a).t_matmul(g)));
                }
                out
            }
            Op::MatMulT(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.ng(*a) {
                    out.push((*a, g.matmul(val(*b))));
                }
                if self.ng(*b) {
                    out.push((*b, g.t_matmul(val(*a))));
                }
                out
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| c * x))],
            Op::Exp(a) => vec![(*a, elementwise(g, &node.value, |gi, y| gi * y))],
            Op::Log(a) => vec![(*a, elementwise(g, val(*a), |gi, x| gi / x))],
            Op::Sigmoid(a) => vec![(*a, elementwise(g, &node.value, |gi, y| gi * y * (1.0 - y)))],
            Op::Softplus(a) => vec![(*a, elementwise(g, val(*a), |gi, x| gi * sigmoid(x)))],
            Op::Gelu(a) => vec![(*a, elementwise(g, val(*a), |gi, x| gi * gelu_grad(x)))],
            Op::ClampMin(a, floor) => {
                let f = *floor;
                vec![(*a, elementwise(g, val(*a), |gi, x| if x > f { gi } else { 0.0 }))]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::filled(r, c, g.item()))]
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)))]
            }
            Op::Row(a, r) => {
                let (rows, cols) = val(*a).shape();
                let mut t = Tensor::zeros(rows, cols);
                for j in 0..cols {
                    t.set(*r, j, g.get(0, j));
                }
                vec![(*a, t)]
            }
            Op::MaskedSoftmax(a, mask) => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| y.get(i, j) * g.get(i, j)).sum();
                    for j in 0..c {
                        if mask[i * c + j] {
                            t.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                }
                vec![(*a, t)]
            }
        }
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect();
    Tensor::new(g.rows(), g.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graddiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.register(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn softplus_sum_gradient_at_zero() {
        let store = store_with(&[("x", Tensor::zeros(2, 3))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ParamId(0));
        let y = tape.softplus(x);
        let l = tape.sum(y);
        let g = tape.backward(l, &store).unwrap();
        assert!(g.get(ParamId(0)).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn product_rule() {
        let store = store_with(&[("x", Tensor::scalar(2.0)), ("y", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ParamId(0));
        let y = tape.param(&store, ParamId(1));
        let l = tape.mul(x, y);
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(ParamId(0)).item(), 3.0);
        assert_eq!(g.get(ParamId(1)).item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = store_with(&[("x", Tensor::zeros(2, 2))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ParamId(0));
        assert!(matches!(
            tape.backward(x, &store),
            Err(GradError::NonScalarLoss((2, 2)))
        ));
    }

    #[test]
    fn nan_in_reverse_sweep_names_the_node() {
        let store = store_with(&[("x", Tensor::scalar(0.0))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ParamId(0));
        let lx = tape.log(x); // d/dx ln x at 0 is infinite
        let l = tape.sum(lx);
        let c = tape.constant_scalar(0.0);
        let l = tape.mul(l, c);
        match tape.backward(l, &store) {
            Err(GradError::NonFinite { op, .. }) => assert_eq!(op, "log"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let store = store_with(&[("x", Tensor::scalar(1.0)), ("unused", Tensor::zeros(3, 1))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ParamId(0));
        let l = tape.exp(x);
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(ParamId(1)), &Tensor::zeros(3, 1));
    }

    #[test]
    fn masked_softmax_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 3, vec![1.0, 2.0, 900.0, 1e3, -1e3, 5.0]));
        let mask: Arc<[bool]> = vec![true, true, false, false, false, false].into();
        let y = tape.masked_softmax(x, mask);
        let v = tape.value(y);
        assert!((v.get(0, 0) + v.get(0, 1) - 1.0).abs() < 1e-15);
        assert_eq!(v.get(0, 2), 0.0);
        assert!(v.row(1).iter().all(|&x| x == 0.0));
    }

    /// Composite touching every primitive.
    fn build_all(tape: &mut Tape, store: &ParamStore) -> Var {
        let a = tape.param(store, ParamId(0)); // 3x4
        let b = tape.param(store, ParamId(1)); // 4x2
        let c = tape.param(store, ParamId(2)); // 1x2
        let d = tape.param(store, ParamId(3)); // 3x1
        let m = tape.matmul(a, b); // 3x2
        let m = tape.add(m, c);
        let m = tape.mul(m, d);
        let gl = tape.gelu(m);
        let s = tape.sigmoid(gl);
        let sp = tape.softplus(m);
        let e = tape.exp(s);
        let lg = tape.log(sp);
        let q = tape.sub(e, lg);
        let q = tape.clamp_min(q, -50.0);
        let logits = tape.matmul_t(q, q); // 3x3
        let mask: Arc<[bool]> = vec![false, false, false, true, false, false, true, true, false].into();
        let att = tape.masked_softmax(logits, mask);
        let att = tape.scale(att, 1.7);
        let r1 = tape.row(att, 2);
        let rs = tape.row_sum(att);
        let t1 = tape.sum(r1);
        let t2 = tape.matmul_t(rs, d); // 3x3
        let t2 = tape.sum(t2);
        let qs = tape.sum(q);
        let l = tape.add(t1, t2);
        tape.add(l, qs)
    }

    fn all_primitives(store: &ParamStore) -> Result<(f64, Gradients), GradError> {
        let mut tape = Tape::new();
        let l = build_all(&mut tape, store);
        Ok((tape.scalar(l), tape.backward(l, store)?))
    }

    fn build_g(tape: &mut Tape, store: &ParamStore) -> Var {
        let a = tape.param(store, ParamId(0));
        let e = tape.exp(a);
        tape.sum(e)
    }

    fn random_store(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut r = |n: usize, m: usize| Tensor::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let (a, b, c, d) = (r(3, 4), r(4, 2), r(1, 2), r(3, 1));
        store_with(&[("a", a), ("b", b), ("c", c), ("d", d)])
    }

    #[test]
    fn composite_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = random_store(&mut rng);
        assert_eq!(store.num_scalars(), 12 + 8 + 2 + 3);
        let rep = grad_check(&store, 1e-5, 1e-4, all_primitives).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn primitives_match_differences_at_random_points() {
        type Build = fn(&mut Tape, Var) -> Var;
        let prims: [(&str, Build); 8] = [
            ("exp", |t, x| t.exp(x)),
            ("log", |t, x| {
                let e = t.exp(x);
                t.log(e)
            }),
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("softplus", |t, x| t.softplus(x)),
            ("gelu", |t, x| t.gelu(x)),
            ("mul", |t, x| t.mul(x, x)),
            ("matmul", |t, x| t.matmul_t(x, x)),
            ("masked_softmax", |t, x| {
                let l = t.matmul_t(x, x);
                t.masked_softmax(l, vec![true, true, false, true].into())
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (name, build) in prims {
            for _ in 0..100 {
                let x = Tensor::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
                let w = Tensor::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
                let store = store_with(&[("x", x)]);
                let f = |s: &ParamStore| {
                    let mut tape = Tape::new();
                    let xv = tape.param(s, ParamId(0));
                    let y = build(&mut tape, xv);
                    let wv = tape.constant(w.clone());
                    let y = tape.mul(y, wv);
                    let l = tape.sum(y);
                    Ok((tape.scalar(l), tape.backward(l, s)?))
                };
                let rep = grad_check(&store, 1e-5, 1e-6, f).unwrap();
                assert!(rep.passed, "{name}: {rep:?}");
            }
        }
    }

    #[test]
    fn gradient_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = random_store(&mut rng);
        let (ca, cb) = (2.5, -0.75);
        let grad_of = |build: &dyn Fn(&mut Tape, &ParamStore) -> Var| {
            let mut tape = Tape::new();
            let l = build(&mut tape, &store);
            tape.backward(l, &store).unwrap()
        };
        let combined = grad_of(&|t: &mut Tape, s: &ParamStore| {
            let f = build_all(t, s);
            let g = build_g(t, s);
            let f = t.scale(f, ca);
            let g = t.scale(g, cb);
            t.add(f, g)
        });
        let mut expect = grad_of(&build_all);
        expect.scale(ca);
        let mut gg = grad_of(&build_g);
        gg.scale(cb);
        expect.add_assign(&gg);
        for (x, y) in combined.flat().iter().zip(expect.flat()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn identical_tapes_give_bit_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = random_store(&mut rng);
        let (_, g1) = all_primitives(&store).unwrap();
        let (_, g2) = all_primitives(&store).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn corrupted_primitive_fails_the_check_naming_the_parameter() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::row_vector(vec![0.3, -0.2])).unwrap();
        store.register("v", Tensor::row_vector(vec![0.1, 0.4])).unwrap();
        let f = |s: &ParamStore| {
            let mut tape = Tape::new();
            tape.inject_fault("sigmoid", 1.5);
            let w = tape.param(s, ParamId(0));
            let v = tape.param(s, ParamId(1));
            let sg = tape.sigmoid(w);
            let sv = tape.exp(v);
            let a = tape.sum(sg);
            let b = tape.sum(sv);
            let l = tape.add(a, b);
            Ok((tape.scalar(l), tape.backward(l, s)?))
        };
        let rep = grad_check(&store, 1e-5, 1e-4, f).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst.as_deref(), Some("w"));
        let v_entry = rep.entries.iter().find(|e| e.name == "v").unwrap();
        assert!(v_entry.max_rel_error < 1e-6);
    }
}
