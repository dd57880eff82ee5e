//! Reverse-mode automatic differentiation on a tape of `ndarray` values.
//!
//! Every operation appends a node holding its eagerly computed value.
//! [`Graph::grad`] walks the tape backwards and builds the adjoints *as new
//! tape nodes*, so gradients are themselves differentiable. That is what
//! makes the WGAN gradient penalty trainable: the critic's input gradient
//! becomes part of the graph and a second `grad` call differentiates the
//! penalty with respect to the critic parameters.
//!
//! All values are `f64`. Shapes are dynamic (`IxDyn`); matrix products are
//! defined for 2-d operands, and helpers in [`crate::models`] fold batch and
//! time axes as needed.

use std::sync::Arc;

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Ln(usize),
    /// sqrt(x + eps); eps = 0 is the exact square root.
    SqrtEps(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    BroadcastTo(usize),
    SumTo(usize),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    /// Place the input into a zero tensor along `axis` starting at
    /// `start`. Adjoint of `Narrow`.
    Embed {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    /// Gather columns (last axis) at `indices`.
    SelectCols {
        input: usize,
        indices: Arc<Vec<usize>>,
    },
    /// Scatter columns into a zero tensor of the given last-axis width.
    /// Adjoint of `SelectCols`.
    SpreadCols {
        input: usize,
        indices: Arc<Vec<usize>>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sum_to_value(x: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut v = x.to_owned();
    while v.ndim() > target.len() {
        v = v.sum_axis(Axis(0));
    }
    for i in 0..target.len() {
        if v.shape()[i] != target[i] {
            debug_assert_eq!(target[i], 1, "sum_to target must be broadcast-compatible");
            v = v.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    v
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

    pub fn value(&self, t: Tensor) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    /// Value of a single-element tensor as a scalar.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        debug_assert_eq!(v.len(), 1, "expected a scalar tensor");
        v.iter().copied().next().unwrap()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Tensor {
        self.nodes.push(Node { value, op });
        Tensor(self.nodes.len() - 1)
    }

    // ----- leaves -------------------------------------------------------

    /// New leaf from an owned array. Leaves are valid `wrt` targets.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Op::Leaf)
    }

    /// Constant leaf (alias of [`Graph::leaf`], named for intent).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Tensor {
        self.leaf(value)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        self.leaf(ArrayD::zeros(IxDyn(shape)))
    }

    /// Cut the tape: a new leaf carrying a copy of `t`'s value.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let v = self.nodes[t.0].value.clone();
        self.leaf(v)
    }

    // ----- elementwise --------------------------------------------------

    fn assert_same_shape(&self, a: Tensor, b: Tensor, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape(a, b, "div");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let v = -&self.nodes[a.0].value;
        self.push(v, Op::Neg(a.0))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulScalar(a.0, c))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn sqrt_eps(&mut self, a: Tensor, eps: f64) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| (x + eps).sqrt());
        self.push(v, Op::SqrtEps(a.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a.0, slope))
    }

    // ----- linear algebra -----------------------------------------------

    /// 2-d matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions differ");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let v = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose needs a 2-d tensor")
            .t()
            .to_owned()
            .into_dyn();
        self.push(v, Op::Transpose(a.0))
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a.0))
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let v = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: incompatible shapes")
            .to_owned();
        self.push(v, Op::BroadcastTo(a.0))
    }

    /// Sum-reduce to a broadcast-compatible `shape` (`&[]` sums everything).
    pub fn sum_to(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let v = sum_to_value(&self.nodes[a.0].value, shape);
        self.push(v, Op::SumTo(a.0))
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        self.sum_to(a, &[])
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn narrow(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::Narrow { input: a.0, axis, start })
    }

    pub fn embed(&mut self, a: Tensor, axis: usize, start: usize, full_len: usize) -> Tensor {
        let src = &self.nodes[a.0].value;
        let mut shape = src.shape().to_vec();
        let len = shape[axis];
        shape[axis] = full_len;
        let mut v = ArrayD::<f64>::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(src);
        self.push(v, Op::Embed { input: a.0, axis, start })
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let inputs = parts.iter().map(|t| t.0).collect();
        self.push(v, Op::Concat { inputs, axis })
    }

    pub fn select_cols(&mut self, a: Tensor, indices: &[usize]) -> Tensor {
        let src = &self.nodes[a.0].value;
        let last = src.ndim() - 1;
        let v = src.select(Axis(last), indices);
        self.push(
            v,
            Op::SelectCols { input: a.0, indices: Arc::new(indices.to_vec()) },
        )
    }

    pub fn spread_cols(&mut self, a: Tensor, indices: &[usize], width: usize) -> Tensor {
        let src = &self.nodes[a.0].value;
        let last = src.ndim() - 1;
        let mut shape = src.shape().to_vec();
        shape[last] = width;
        let mut v = ArrayD::<f64>::zeros(IxDyn(&shape));
        for (k, &col) in indices.iter().enumerate() {
            let mut dst = v.slice_axis_mut(Axis(last), Slice::from(col..col + 1));
            dst += &src.slice_axis(Axis(last), Slice::from(k..k + 1));
        }
        self.push(
            v,
            Op::SpreadCols { input: a.0, indices: Arc::new(indices.to_vec()) },
        )
    }

    // ----- differentiation ----------------------------------------------

    /// Gradient of the scalar `y` with respect to each tensor in `wrt`.
    ///
    /// The adjoints are recorded on the tape, so any function of the
    /// returned tensors can be differentiated again.
    pub fn grad(&mut self, y: Tensor, wrt: &[Tensor]) -> Vec<Tensor> {
        assert_eq!(
            self.nodes[y.0].value.len(),
            1,
            "grad target must be a scalar, got shape {:?}",
            self.shape(y)
        );
        let mut adjoint: Vec<Option<Tensor>> = vec![None; y.0 + 1];
        let ones = {
            let shape = self.shape(y).to_vec();
            self.leaf(ArrayD::from_elem(IxDyn(&shape), 1.0))
        };
        adjoint[y.0] = Some(ones);

        for id in (0..=y.0).rev() {
            let Some(dy) = adjoint[id] else { continue };
            let op = self.nodes[id].op.clone();
            for (input, contrib) in self.vjp(Tensor(id), &op, dy) {
                adjoint[input] = Some(match adjoint[input] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }

        wrt.iter()
            .map(|t| {
                adjoint
                    .get(t.0)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| {
                        let shape = self.shape(*t).to_vec();
                        self.zeros(&shape)
                    })
            })
            .collect()
    }

    /// Adjoint contributions `(input id, gradient tensor)` for one node.
    fn vjp(&mut self, out: Tensor, op: &Op, dy: Tensor) -> Vec<(usize, Tensor)> {
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, dy), (b, dy)],
            Op::Sub(a, b) => {
                let nb = self.neg(dy);
                vec![(a, dy), (b, nb)]
            }
            Op::Mul(a, b) => {
                let da = self.mul(dy, Tensor(b));
                let db = self.mul(dy, Tensor(a));
                vec![(a, da), (b, db)]
            }
            Op::Div(a, b) => {
                let da = self.div(dy, Tensor(b));
                // db = -dy * a / b^2
                let bb = self.mul(Tensor(b), Tensor(b));
                let num = self.mul(dy, Tensor(a));
                let frac = self.div(num, bb);
                let db = self.neg(frac);
                vec![(a, da), (b, db)]
            }
            Op::Neg(a) => {
                let da = self.neg(dy);
                vec![(a, da)]
            }
            Op::AddScalar(a) => vec![(a, dy)],
            Op::MulScalar(a, c) => {
                let da = self.mul_scalar(dy, c);
                vec![(a, da)]
            }
            Op::Exp(a) => {
                let da = self.mul(dy, out);
                vec![(a, da)]
            }
            Op::Ln(a) => {
                let da = self.div(dy, Tensor(a));
                vec![(a, da)]
            }
            Op::SqrtEps(a) => {
                // d/dx sqrt(x + eps) = 1 / (2 sqrt(x + eps))
                let half = self.mul_scalar(dy, 0.5);
                let da = self.div(half, out);
                vec![(a, da)]
            }
            Op::Sigmoid(a) => {
                // y (1 - y)
                let ny = self.neg(out);
                let one_minus = self.add_scalar(ny, 1.0);
                let d = self.mul(out, one_minus);
                let da = self.mul(dy, d);
                vec![(a, da)]
            }
            Op::Tanh(a) => {
                // 1 - y^2
                let yy = self.mul(out, out);
                let nyy = self.neg(yy);
                let d = self.add_scalar(nyy, 1.0);
                let da = self.mul(dy, d);
                vec![(a, da)]
            }
            Op::LeakyRelu(a, slope) => {
                // The mask is piecewise constant in the input.
                let mask = self.nodes[a]
                    .value
                    .mapv(|x| if x > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                let da = self.mul(dy, m);
                vec![(a, da)]
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(Tensor(b));
                let da = self.matmul(dy, bt);
                let at = self.transpose(Tensor(a));
                let db = self.matmul(at, dy);
                vec![(a, da), (b, db)]
            }
            Op::Transpose(a) => {
                let da = self.transpose(dy);
                vec![(a, da)]
            }
            Op::Reshape(a) => {
                let shape = self.shape(Tensor(a)).to_vec();
                let da = self.reshape(dy, &shape);
                vec![(a, da)]
            }
            Op::BroadcastTo(a) => {
                let shape = self.shape(Tensor(a)).to_vec();
                let da = self.sum_to(dy, &shape);
                vec![(a, da)]
            }
            Op::SumTo(a) => {
                let shape = self.shape(Tensor(a)).to_vec();
                let da = self.broadcast_to(dy, &shape);
                vec![(a, da)]
            }
            Op::Narrow { input, axis, start } => {
                let full_len = self.shape(Tensor(input))[axis];
                let da = self.embed(dy, axis, start, full_len);
                vec![(input, da)]
            }
            Op::Embed { input, axis, start } => {
                let len = self.shape(Tensor(input))[axis];
                let da = self.narrow(dy, axis, start, len);
                vec![(input, da)]
            }
            Op::Concat { ref inputs, axis } => {
                let mut grads = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &input in inputs {
                    let len = self.shape(Tensor(input))[axis];
                    let da = self.narrow(dy, axis, offset, len);
                    grads.push((input, da));
                    offset += len;
                }
                grads
            }
            Op::SelectCols { input, ref indices } => {
                let width = *self.shape(Tensor(input)).last().unwrap();
                let da = self.spread_cols(dy, indices, width);
                vec![(input, da)]
            }
            Op::SpreadCols { input, ref indices } => {
                let da = self.select_cols(dy, indices);
                vec![(input, da)]
            }
        }
    }
}

// ----- generic graph helpers used across modules --------------------------

/// `x @ w + b` for `x: [M,I]`, `w: [I,O]`, `b: [O]`.
pub fn linear(g: &mut Graph, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
    let xw = g.matmul(x, w);
    let out_shape = g.shape(xw).to_vec();
    let o = g.shape(b)[0];
    let b_row = g.reshape(b, &[1, o]);
    let b_full = g.broadcast_to(b_row, &out_shape);
    g.add(xw, b_full)
}

/// Frame-wise linear over `x: [B,T,I]` producing `[B,T,O]`.
pub fn seq_linear(g: &mut Graph, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
    let (bs, t, i) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    let o = g.shape(w)[1];
    let flat = g.reshape(x, &[bs * t, i]);
    let y = linear(g, flat, w, b);
    g.reshape(y, &[bs, t, o])
}

/// Numerically stable log-softmax over the last axis.
pub fn log_softmax_last(g: &mut Graph, x: Tensor) -> Tensor {
    let shape = g.shape(x).to_vec();
    let k = *shape.last().unwrap();
    let rows: usize = shape.iter().product::<usize>() / k;
    let flat = g.reshape(x, &[rows, k]);
    // Row maxima are a piecewise-constant shift; treating them as constant
    // leaves the derivative exact.
    let maxes = {
        let v = g.value(flat);
        let m = v
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .rows()
            .into_iter()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect::<Vec<_>>();
        g.constant(ArrayD::from_shape_vec(IxDyn(&[rows, 1]), m).unwrap())
    };
    let maxes_b = g.broadcast_to(maxes, &[rows, k]);
    let shifted = g.sub(flat, maxes_b);
    let e = g.exp(shifted);
    let sums = g.sum_to(e, &[rows, 1]);
    let lse = g.ln(sums);
    let lse_b = g.broadcast_to(lse, &[rows, k]);
    let out = g.sub(shifted, lse_b);
    g.reshape(out, &shape)
}

/// Softmax over the last axis.
pub fn softmax_last(g: &mut Graph, x: Tensor) -> Tensor {
    let ls = log_softmax_last(g, x);
    g.exp(ls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn leaf2(g: &mut Graph, data: ndarray::Array2<f64>) -> Tensor {
        g.leaf(data.into_dyn())
    }

    /// Central finite differences of `f` w.r.t. each element of `x0`.
    fn fd_grad(x0: &ArrayD<f64>, f: impl Fn(&ArrayD<f64>) -> f64) -> ArrayD<f64> {
        let h = 1e-6;
        let mut out = ArrayD::zeros(x0.raw_dim());
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "mismatch: {x} vs {y}"
            );
        }
    }

    #[test]
    fn grad_of_elementwise_chain_matches_fd() {
        let x0 = arr2(&[[0.3, -0.7], [1.2, 0.05]]).into_dyn();
        let f = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let t = g.leaf(x.clone());
            let s = g.sigmoid(t);
            let th = g.tanh(s);
            let e = g.exp(th);
            let m = g.mul(e, t);
            let y = g.sum_all(m);
            g.scalar_value(y)
        };
        let mut g = Graph::new();
        let t = g.leaf(x0.clone());
        let s = g.sigmoid(t);
        let th = g.tanh(s);
        let e = g.exp(th);
        let m = g.mul(e, t);
        let y = g.sum_all(m);
        let dx = g.grad(y, &[t])[0];
        assert_close(g.value(dx), &fd_grad(&x0, f), 1e-7);
    }

    #[test]
    fn grad_of_matmul_chain_matches_fd() {
        let a0 = arr2(&[[0.5, -0.2, 0.1], [0.3, 0.9, -0.4]]).into_dyn();
        let b0 = arr2(&[[0.2, 0.7], [-0.3, 0.4], [0.6, -0.1]]).into_dyn();
        let f = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
            let mut g = Graph::new();
            let ta = g.leaf(a.clone());
            let tb = g.leaf(b.clone());
            let p = g.matmul(ta, tb);
            let l = g.leaky_relu(p, 0.2);
            let y = g.sum_all(l);
            g.scalar_value(y)
        };
        let mut g = Graph::new();
        let ta = g.leaf(a0.clone());
        let tb = g.leaf(b0.clone());
        let p = g.matmul(ta, tb);
        let l = g.leaky_relu(p, 0.2);
        let y = g.sum_all(l);
        let grads = g.grad(y, &[ta, tb]);
        assert_close(g.value(grads[0]), &fd_grad(&a0, |a| f(a, &b0)), 1e-7);
        assert_close(g.value(grads[1]), &fd_grad(&b0, |b| f(&a0, b)), 1e-7);
    }

    #[test]
    fn grad_through_shape_ops_matches_fd() {
        let x0 = arr2(&[[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]]).into_dyn();
        let f = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let t = g.leaf(x.clone());
            let r = g.reshape(t, &[4, 2]);
            let n = g.narrow(r, 0, 1, 2);
            let c = g.concat(&[n, n], 1);
            let sel = g.select_cols(c, &[0, 3, 3]);
            let s = g.sum_to(sel, &[2, 1]);
            let b = g.broadcast_to(s, &[2, 5]);
            let y = g.mean_all(b);
            g.scalar_value(y)
        };
        let mut g = Graph::new();
        let t = g.leaf(x0.clone());
        let r = g.reshape(t, &[4, 2]);
        let n = g.narrow(r, 0, 1, 2);
        let c = g.concat(&[n, n], 1);
        let sel = g.select_cols(c, &[0, 3, 3]);
        let s = g.sum_to(sel, &[2, 1]);
        let b = g.broadcast_to(s, &[2, 5]);
        let y = g.mean_all(b);
        let dx = g.grad(y, &[t])[0];
        assert_close(g.value(dx), &fd_grad(&x0, f), 1e-7);
    }

    #[test]
    fn second_order_gradient_matches_fd() {
        // y = sum(tanh(x)^2); z = ||grad_x y||^2. Check dz/dx against FD.
        let x0 = arr1(&[0.4, -0.9, 1.3]).into_dyn();
        let z_of = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let t = g.leaf(x.clone());
            let th = g.tanh(t);
            let sq = g.mul(th, th);
            let y = g.sum_all(sq);
            let dx = g.grad(y, &[t])[0];
            let dsq = g.mul(dx, dx);
            let z = g.sum_all(dsq);
            g.scalar_value(z)
        };
        let mut g = Graph::new();
        let t = g.leaf(x0.clone());
        let th = g.tanh(t);
        let sq = g.mul(th, th);
        let y = g.sum_all(sq);
        let dx = g.grad(y, &[t])[0];
        let dsq = g.mul(dx, dx);
        let z = g.sum_all(dsq);
        let dz = g.grad(z, &[t])[0];
        assert_close(g.value(dz), &fd_grad(&x0, z_of), 1e-6);
    }

    #[test]
    fn log_softmax_is_stable_and_grad_matches_fd() {
        // Second row has a huge logit; naive exp would overflow.
        let x0 = arr2(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 400.0]]).into_dyn();
        let mut g = Graph::new();
        let t = g.leaf(x0.clone());
        let ls = log_softmax_last(&mut g, t);
        let probs = g.exp(ls);
        let row_sums = g.sum_to(probs, &[2, 1]);
        for &s in g.value(row_sums).iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(g.value(ls).iter().all(|v| v.is_finite()));

        // Gradient check on a moderate input.
        let x1 = arr2(&[[0.4, -0.3, 0.9], [1.1, 0.0, -0.7]]).into_dyn();
        let f = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let t = g.leaf(x.clone());
            let ls = log_softmax_last(&mut g, t);
            let w = g.leaf(arr2(&[[0.2, -0.4, 0.6], [0.1, 0.5, -0.3]]).into_dyn());
            let m = g.mul(ls, w);
            let y = g.sum_all(m);
            g.scalar_value(y)
        };
        let mut g = Graph::new();
        let t = g.leaf(x1.clone());
        let ls = log_softmax_last(&mut g, t);
        let w = g.leaf(arr2(&[[0.2, -0.4, 0.6], [0.1, 0.5, -0.3]]).into_dyn());
        let m = g.mul(ls, w);
        let y = g.sum_all(m);
        let dx = g.grad(y, &[t])[0];
        assert_close(g.value(dx), &fd_grad(&x1, f), 1e-7);
    }

    #[test]
    fn seq_linear_preserves_batch_and_time() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 5, 3]), 0.5));
        let w = leaf2(&mut g, arr2(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]));
        let b = g.leaf(arr1(&[1.0, -1.0]).into_dyn());
        let y = seq_linear(&mut g, x, w, b);
        assert_eq!(g.shape(y), &[2, 5, 2]);
        // 0.5*(0.1+0.3+0.5) + 1 = 1.45 in column 0
        assert!((g.value(y)[[0, 0, 0]] - 1.45).abs() < 1e-12);
    }

    #[test]
    fn grad_accumulates_over_reused_tensors() {
        // y = sum(x * x) + sum(x): adjoint accumulates two contributions.
        let x0 = arr1(&[0.5, -1.5]).into_dyn();
        let mut g = Graph::new();
        let t = g.leaf(x0.clone());
        let sq = g.mul(t, t);
        let s1 = g.sum_all(sq);
        let s2 = g.sum_all(t);
        let y = g.add(s1, s2);
        let dx = g.grad(y, &[t])[0];
        let expect = arr1(&[2.0, -2.0]).into_dyn();
        assert_close(g.value(dx), &expect, 1e-12);
    }

    #[test]
    fn grad_of_unused_leaf_is_zero() {
        let mut g = Graph::new();
        let a = g.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let b = g.leaf(arr1(&[3.0, 4.0]).into_dyn());
        let y = g.sum_all(a);
        let grads = g.grad(y, &[a, b]);
        assert_eq!(g.value(grads[1]).iter().copied().sum::<f64>(), 0.0);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut g = Graph::new();
        let x = g.leaf(arr1(&[2.0]).into_dyn());
        let d = g.detach(x);
        let p = g.mul(x, d);
        let y = g.sum_all(p);
        let dx = g.grad(y, &[x])[0];
        // d/dx (x * const(2)) = 2, not 4.
        assert!((g.value(dx)[[0]] - 2.0).abs() < 1e-12);
    }
}
