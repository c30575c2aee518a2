//! Reverse-mode automatic differentiation over `f64` n-d arrays.
//!
//! A [`Graph`] is a single-use tape: every operation appends a node holding
//! its forward value, and [`Graph::backward`] walks the tape in reverse.
//! Parameters are bound by name so that a weight read several times inside
//! one forward pass is a single leaf and its gradient accumulates.
//!
//! Binary elementwise operations follow numpy broadcasting rules; the
//! backward pass sums gradients over broadcast axes.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, BTreeSet};

use ndarray::{concatenate, linalg::general_mat_mul, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn, Slice, Zip};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SumAxis(Var),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    IndexSelect(Var, usize, Vec<usize>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, Var>>,
    track: bool,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for parameters and `leaf` inputs.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            track: true,
        }
    }

    /// A graph that never records gradients (momentum encoders, evaluation).
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op) -> Var {
        let needs_grad = self.track && {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|p| nodes[p.0].needs_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: ArrayD<f64>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs_grad && self.track,
        });
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push_leaf(value, false)
    }

    /// Input that receives a gradient (when the graph tracks).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds a named parameter. Repeated binds of the same name return the
    /// same leaf.
    pub fn param(&self, name: &str, value: &ArrayD<f64>) -> Var {
        if let Some(v) = self.params.borrow().get(name) {
            return *v;
        }
        let v = self.push_leaf(value.clone(), true);
        self.params.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Names of every parameter read by this graph.
    pub fn bound_params(&self) -> BTreeSet<String> {
        self.params.borrow().keys().cloned().collect()
    }

    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on node with shape {:?}", val.shape());
        *val.iter().next().unwrap()
    }

    fn map_value<F: FnOnce(&ArrayD<f64>) -> ArrayD<f64>>(&self, v: Var, f: F) -> ArrayD<f64> {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn map2<F: FnOnce(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>>(&self, a: Var, b: Var, f: F) -> ArrayD<f64> {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.map_value(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a [.., m, k] @ b`, where `b` is either `[k, n]` or shares `a`'s
    /// leading dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, batched_matmul);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let v = self.map_value(a, |x| x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned());
        self.push(v, Op::Permute(a, axes.to_vec()))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = self.map_value(a, |x| reshape(x, shape));
        self.push(v, Op::Reshape(a))
    }

    /// Softmax over the last axis. `-inf` entries receive zero probability.
    pub fn softmax(&self, a: Var) -> Var {
        let v = self.map_value(a, softmax_last);
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        let v = self.map_value(a, log_softmax_last);
        self.push(v, Op::LogSoftmax(a))
    }

    /// Zero-mean unit-variance normalisation over the last axis (no affine).
    pub fn normalize(&self, a: Var) -> Var {
        let v = self.map_value(a, |x| {
            let mut out = x.clone();
            let d = *x.shape().last().unwrap() as f64;
            for mut row in out.rows_mut() {
                let mean = row.sum() / d;
                let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                row.mapv_inplace(|e| (e - mean) * inv);
            }
            out
        });
        self.push(v, Op::Normalize(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let v = self.map_value(a, |x| x.mapv(|e| 0.5 * e * (1.0 + (GELU_C * (e + 0.044715 * e * e * e)).tanh())));
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.map_value(a, |x| x.mapv(f64::exp));
        self.push(v, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        let v = self.map_value(a, |x| x.mapv(f64::ln));
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.map_value(a, |x| x.mapv(f64::sqrt));
        self.push(v, Op::Sqrt(a))
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let v = self.map_value(a, |x| x.sum_axis(Axis(axis)).insert_axis(Axis(axis)));
        self.push(v, Op::SumAxis(a))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Sum of all elements, as a 0-d array.
    pub fn sum(&self, a: Var) -> Var {
        let v = self.map_value(a, |x| ArrayD::from_elem(IxDyn(&[]), x.sum()));
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shapes")
        };
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.map_value(a, |x| x.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned());
        self.push(v, Op::Narrow(a, axis, start))
    }

    /// Gathers entries of `axis` (indices may repeat).
    pub fn index_select(&self, a: Var, axis: usize, idx: &[usize]) -> Var {
        let v = self.map_value(a, |x| x.select(Axis(axis), idx));
        self.push(v, Op::IndexSelect(a, axis, idx.to_vec()))
    }

    /// Row-wise L2 normalisation over the last axis.
    pub fn l2_normalize(&self, a: Var) -> Var {
        let last = self.shape(a).len() - 1;
        let sq = self.mul(a, a);
        let ss = self.sum_axis(sq, last);
        let norm = self.sqrt(ss);
        self.div(a, norm)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(self.track, "backward() on an inference graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].needs_grad;
            let send = |v: Var, contrib: ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(&g, val(*a).shape()), &mut grads);
                    }
                    if wants(*b) {
                        send(*b, unbroadcast(&g, val(*b).shape()), &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(&g, val(*a).shape()), &mut grads);
                    }
                    if wants(*b) {
                        send(*b, -unbroadcast(&g, val(*b).shape()), &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(&(&g * val(*b)), val(*a).shape()), &mut grads);
                    }
                    if wants(*b) {
                        send(*b, unbroadcast(&(&g * val(*a)), val(*b).shape()), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    if wants(*a) {
                        send(*a, unbroadcast(&(&g / y), x.shape()), &mut grads);
                    }
                    if wants(*b) {
                        let gy = -(&g * &node.value) / y;
                        send(*b, unbroadcast(&gy, y.shape()), &mut grads);
                    }
                }
                Op::Scale(a, c) => send(*a, &g * *c, &mut grads),
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(val(*a), val(*b), &g, wants(*a), wants(*b));
                    if let Some(ga) = ga {
                        send(*a, ga, &mut grads);
                    }
                    if let Some(gb) = gb {
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let ga = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
                    send(*a, ga, &mut grads);
                }
                Op::Reshape(a) => send(*a, reshape(&g, val(*a).shape()), &mut grads),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let last = Axis(y.ndim() - 1);
                    let dot = (&g * y).sum_axis(last).insert_axis(last);
                    send(*a, y * &(&g - &dot), &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let last = Axis(y.ndim() - 1);
                    let gsum = g.sum_axis(last).insert_axis(last);
                    send(*a, &g - &(y.mapv(f64::exp) * &gsum), &mut grads);
                }
                Op::Normalize(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d = *x.shape().last().unwrap() as f64;
                    let mut gx = g.clone();
                    for ((mut gr, xr), yr) in gx.rows_mut().into_iter().zip(x.rows()).zip(y.rows()) {
                        let mean = xr.sum() / d;
                        let var = xr.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean = gr.sum() / d;
                        let gymean = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        Zip::from(&mut gr).and(&yr).for_each(|ge, &ye| {
                            *ge = inv * (*ge - gmean - ye * gymean);
                        });
                    }
                    send(*a, gx, &mut grads);
                }
                Op::Gelu(a) => {
                    let dx = val(*a).mapv(|e| {
                        let t = (GELU_C * (e + 0.044715 * e * e * e)).tanh();
                        0.5 * (1.0 + t) + 0.5 * e * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * e * e)
                    });
                    send(*a, &g * &dx, &mut grads);
                }
                Op::Exp(a) => send(*a, &g * &node.value, &mut grads),
                Op::Log(a) => send(*a, &g / val(*a), &mut grads),
                Op::Sqrt(a) => send(*a, &g * &node.value.mapv(|y| 0.5 / y), &mut grads),
                Op::SumAxis(a) | Op::SumAll(a) => {
                    let shape = val(*a).raw_dim();
                    let ga = g.broadcast(shape).expect("sum broadcast").to_owned();
                    send(*a, ga, &mut grads);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).shape()[*axis];
                        if wants(*p) {
                            let gp = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                            send(*p, gp, &mut grads);
                        }
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let mut ga = ArrayD::zeros(val(*a).raw_dim());
                    let len = g.shape()[*axis];
                    ga.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(&g);
                    send(*a, ga, &mut grads);
                }
                Op::IndexSelect(a, axis, idx) => {
                    let mut ga = ArrayD::zeros(val(*a).raw_dim());
                    for (k, &src) in idx.iter().enumerate() {
                        let mut dst = ga.index_axis_mut(Axis(*axis), src);
                        dst += &g.index_axis(Axis(*axis), k);
                    }
                    send(*a, ga, &mut grads);
                }
            }
        }
        Grads { grads }
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, ArrayD<f64>> {
        self.params
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Permute(a, _)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Normalize(a)
        | Op::Gelu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::SumAxis(a)
        | Op::SumAll(a)
        | Op::Narrow(a, _, _)
        | Op::IndexSelect(a, _, _) => vec![*a],
        Op::Concat(parts, _) => parts.clone(),
    }
}

pub(crate) fn reshape(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

/// Sums `g` down to `shape` over numpy-broadcast axes.
fn unbroadcast(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

pub(crate) fn softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|e| (e - max).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    out
}

fn log_softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|e| e - lse);
    }
    out
}

fn split_batch(shape: &[usize]) -> (usize, usize, usize) {
    let nd = shape.len();
    let (m, k) = (shape[nd - 2], shape[nd - 1]);
    (shape[..nd - 2].iter().product(), m, k)
}

fn as_mat(x: ArrayViewD<'_, f64>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    x.into_shape_with_order((rows, cols)).expect("contiguous matrix view")
}

fn batched_matmul(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    assert!(a.ndim() >= 2 && b.ndim() >= 2, "matmul needs >= 2-d operands");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (batch, m, k) = split_batch(a.shape());
    let mut out_shape = a.shape().to_vec();
    if b.ndim() == 2 {
        assert_eq!(b.shape()[0], k, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let n = b.shape()[1];
        *out_shape.last_mut().unwrap() = n;
        let a2 = as_mat(a.view(), batch * m, k);
        let b2 = as_mat(b.view(), k, n);
        let out = a2.dot(&b2);
        return out.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
    }
    assert_eq!(a.shape()[..a.ndim() - 2], b.shape()[..b.ndim() - 2], "matmul batch dims");
    let (_, kb, n) = split_batch(b.shape());
    assert_eq!(kb, k, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    *out_shape.last_mut().unwrap() = n;
    let a3 = a.view().into_shape_with_order((batch, m, k)).unwrap();
    let b3 = b.view().into_shape_with_order((batch, k, n)).unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        let mut o = out.index_axis_mut(Axis(0), i);
        general_mat_mul(1.0, &a3.index_axis(Axis(0), i), &b3.index_axis(Axis(0), i), 0.0, &mut o);
    }
    out.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap()
}

fn matmul_backward(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    g: &ArrayD<f64>,
    want_a: bool,
    want_b: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let g = g.as_standard_layout();
    let (batch, m, k) = split_batch(a.shape());
    if b.ndim() == 2 {
        let n = b.shape()[1];
        let a2 = as_mat(a.view(), batch * m, k);
        let b2 = as_mat(b.view(), k, n);
        let g2 = as_mat(g.view(), batch * m, n);
        let ga = want_a.then(|| {
            g2.dot(&b2.t())
                .into_dyn()
                .into_shape_with_order(IxDyn(a.shape()))
                .unwrap()
        });
        let gb = want_b.then(|| a2.t().dot(&g2).into_dyn());
        return (ga, gb);
    }
    let n = *b.shape().last().unwrap();
    let a3 = a.view().into_shape_with_order((batch, m, k)).unwrap();
    let b3 = b.view().into_shape_with_order((batch, k, n)).unwrap();
    let g3 = g.view().into_shape_with_order((batch, m, n)).unwrap();
    let ga = want_a.then(|| {
        let mut out = ndarray::Array3::<f64>::zeros((batch, m, k));
        for i in 0..batch {
            let mut o = out.index_axis_mut(Axis(0), i);
            general_mat_mul(1.0, &g3.index_axis(Axis(0), i), &b3.index_axis(Axis(0), i).t(), 0.0, &mut o);
        }
        out.into_dyn().into_shape_with_order(IxDyn(a.shape())).unwrap()
    });
    let gb = want_b.then(|| {
        let mut out = ndarray::Array3::<f64>::zeros((batch, k, n));
        for i in 0..batch {
            let mut o = out.index_axis_mut(Axis(0), i);
            general_mat_mul(1.0, &a3.index_axis(Axis(0), i).t(), &g3.index_axis(Axis(0), i), 0.0, &mut o);
        }
        out.into_dyn().into_shape_with_order(IxDyn(b.shape())).unwrap()
    });
    (ga, gb)
}

/// Dense `[rows, cols]` copy of a 2-d array stored as `ArrayD`.
pub fn to_matrix(x: &ArrayD<f64>) -> Array2<f64> {
    x.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a 2-d array")
        .to_owned()
}
