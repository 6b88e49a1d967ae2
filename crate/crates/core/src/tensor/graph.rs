//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are borrowed rather than copied, so a graph is cheap to build per sample
//! and is confined to the thread that built it. [`Graph::backward`] walks the
//! tape in reverse and returns the gradient of a scalar root with respect to
//! every node that requires one.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, PoolGeometry, PADDING};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Hinge constants for the capsule margin loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConstants {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginConstants {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

/// Stabilizer in the squash denominator; makes `squash(0) == 0`.
pub const SQUASH_EPS: f64 = 1e-9;

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Affine {
        input: usize,
        weights: usize,
        bias: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Add(usize, usize),
    Scale(usize, f64),
    MulConst {
        input: usize,
        factors: Vec<f64>,
    },
    Reshape(usize),
    Gather {
        input: usize,
        index: Vec<usize>,
    },
    SquashRows {
        input: usize,
        dim: usize,
    },
    Votes {
        caps: usize,
        weights: usize,
    },
    RouteSum {
        couplings: usize,
        votes: usize,
    },
    Agreement {
        votes: usize,
        outputs: usize,
    },
    MarginLoss {
        caps: usize,
        target: usize,
        constants: MarginConstants,
    },
    SquaredError {
        input: usize,
        target: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        target: usize,
    },
    SumSquares(usize),
    Sum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax_axis",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::SquashRows { .. } => "squash",
            Op::Votes { .. } => "votes",
            Op::RouteSum { .. } => "route_sum",
            Op::Agreement { .. } => "agreement",
            Op::MarginLoss { .. } => "margin_loss",
            Op::SquaredError { .. } => "squared_error",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SumSquares(_) => "sum_squares",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One recorded computation.
pub struct Graph<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), true)
    }

    /// An owned leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), false)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    fn var(&self, index: usize) -> Var {
        Var { graph: self.id, index }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotRecorded(format!("{v:?} does not belong to this graph")));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable used with a foreign graph");
        &self.nodes[v.index].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let (x, k, b) = (self.idx(input)?, self.idx(kernels)?, self.idx(bias)?);
        let geom = ConvGeometry::new(self.val(x).shape(), self.val(k).shape(), stride, pad)?;
        if self.val(b).len() != geom.out_channels {
            return Err(Error::shape("conv2d", "bias length differs from kernel count"));
        }
        let (out, cols) = kernels::conv2d_forward(self.val(x).data(), self.val(k).data(), self.val(b).data(), &geom);
        let out = Tensor::new(&[geom.out_channels, geom.out_h, geom.out_w], out)?;
        self.push(
            out,
            Op::Conv2d {
                input: x,
                kernels: k,
                bias: b,
                geom,
                cols,
            },
            &[x, k, b],
        )
    }

    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize), stride: usize, zero_pad: bool) -> Result<Var> {
        let x = self.idx(input)?;
        let geom = PoolGeometry::new(self.val(x).shape(), window, stride, zero_pad)?;
        let (out, argmax) = kernels::maxpool_forward(self.val(x).data(), &geom);
        let out = Tensor::new(&[geom.channels, geom.out_h, geom.out_w], out)?;
        self.push(out, Op::MaxPool { input: x, argmax }, &[x])
    }

    pub fn affine(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.idx(input)?, self.idx(weights)?, self.idx(bias)?);
        kernels::check_affine(self.val(x), self.val(w), self.val(b))?;
        let out = kernels::affine_forward(self.val(x).data(), self.val(w).data(), self.val(b).data());
        let out = Tensor::new(&[out.len()], out)?;
        self.push(
            out,
            Op::Affine {
                input: x,
                weights: w,
                bias: b,
            },
            &[x, w, b],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let out = kernels::relu(self.val(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let out = kernels::sigmoid(self.val(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.idx(input)?;
        let (outer, len, inner) = kernels::axis_layout(self.val(x).shape(), axis)?;
        let out = kernels::softmax_forward(self.val(x).data(), outer, len, inner);
        let out = Tensor::new(self.val(x).shape(), out)?;
        self.push(
            out,
            Op::Softmax {
                input: x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.val(a).shape(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.idx(input)?;
        let data = self.val(x).data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.val(x).shape(), data)?;
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Elementwise product with a constant factor per element (masks, dropout).
    pub fn mul_const(&mut self, input: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.idx(input)?;
        if factors.len() != self.val(x).len() {
            return Err(Error::shape("mul_const", "factor count differs from tensor length"));
        }
        let data = self.val(x).data().iter().zip(&factors).map(|(v, f)| v * f).collect();
        let out = Tensor::new(self.val(x).shape(), data)?;
        self.push(out, Op::MulConst { input: x, factors }, &[x])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.idx(input)?;
        let out = self.val(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `out[i] = input[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.idx(input)?;
        let src = self.val(x).data();
        if let Some(bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range {}", src.len()),
            ));
        }
        let out = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        self.push(out, Op::Gather { input: x, index }, &[x])
    }

    /// Squashes every row of the last axis: `v = ‖s‖²/((1+‖s‖²)(‖s‖+ε)) · s`.
    pub fn squash_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let shape = self.val(x).shape().to_vec();
        let dim = *shape.last().expect("tensors have rank >= 1");
        let mut out = self.val(x).data().to_vec();
        for row in out.chunks_exact_mut(dim) {
            let f = squash_factor(row.iter().map(|v| v * v).sum::<f64>().sqrt());
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::SquashRows { input: x, dim }, &[x])
    }

    /// Capsule votes: `û[p,j] = W[p,j] · u[p]` for `u: [P,Din]`, `W: [P,J,Dout,Din]`.
    pub fn votes(&mut self, caps: Var, weights: Var) -> Result<Var> {
        let (u, w) = (self.idx(caps)?, self.idx(weights)?);
        let (p, d_in) = match *self.val(u).shape() {
            [p, d] => (p, d),
            ref s => return Err(Error::shape("votes", format!("capsules must be [P,D], got {s:?}"))),
        };
        let (classes, d_out) = match *self.val(w).shape() {
            [wp, j, o, i] if wp == p && i == d_in => (j, o),
            ref s => {
                return Err(Error::shape(
                    "votes",
                    format!("weights {s:?} incompatible with capsules [{p},{d_in}]"),
                ))
            }
        };
        let (ud, wd) = (self.val(u).data(), self.val(w).data());
        let mut out = Vec::with_capacity(p * classes * d_out);
        for pi in 0..p {
            let up = &ud[pi * d_in..(pi + 1) * d_in];
            for row in wd[pi * classes * d_out * d_in..(pi + 1) * classes * d_out * d_in].chunks_exact(d_in) {
                out.push(kernels::dot(row, up));
            }
        }
        let out = Tensor::new(&[p, classes, d_out], out)?;
        self.push(out, Op::Votes { caps: u, weights: w }, &[u, w])
    }

    /// `s[j] = Σ_p c[p,j] · û[p,j]` for `c: [P,J]`, `û: [P,J,D]`.
    pub fn route_sum(&mut self, couplings: Var, votes: Var) -> Result<Var> {
        let (c, u) = (self.idx(couplings)?, self.idx(votes)?);
        let (p, j, d) = votes_dims(self.val(u).shape(), self.val(c).shape(), "route_sum")?;
        let (cd, ud) = (self.val(c).data(), self.val(u).data());
        let mut out = vec![0.0; j * d];
        for pi in 0..p {
            for ji in 0..j {
                let w = cd[pi * j + ji];
                let src = &ud[(pi * j + ji) * d..(pi * j + ji + 1) * d];
                for (o, s) in out[ji * d..(ji + 1) * d].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let out = Tensor::new(&[j, d], out)?;
        self.push(out, Op::RouteSum { couplings: c, votes: u }, &[c, u])
    }

    /// Agreement `a[p,j] = û[p,j] · v[j]` for `û: [P,J,D]`, `v: [J,D]`.
    pub fn agreement(&mut self, votes: Var, outputs: Var) -> Result<Var> {
        let (u, v) = (self.idx(votes)?, self.idx(outputs)?);
        let (p, j, d) = match (self.val(u).shape(), self.val(v).shape()) {
            (&[p, j, d], &[vj, vd]) if vj == j && vd == d => (p, j, d),
            (a, b) => return Err(Error::shape("agreement", format!("votes {a:?}, outputs {b:?}"))),
        };
        let (ud, vd) = (self.val(u).data(), self.val(v).data());
        let mut out = Vec::with_capacity(p * j);
        for pi in 0..p {
            for ji in 0..j {
                out.push(kernels::dot(
                    &ud[(pi * j + ji) * d..(pi * j + ji + 1) * d],
                    &vd[ji * d..(ji + 1) * d],
                ));
            }
        }
        let out = Tensor::new(&[p, j], out)?;
        self.push(out, Op::Agreement { votes: u, outputs: v }, &[u, v])
    }

    /// Σ_k T_k·max(0, m⁺−‖v_k‖)² + λ·(1−T_k)·max(0, ‖v_k‖−m⁻)² over capsule rows.
    pub fn margin_loss(&mut self, caps: Var, target: usize, constants: MarginConstants) -> Result<Var> {
        let v = self.idx(caps)?;
        let [classes, dim] = *self.val(v).shape() else {
            return Err(Error::shape("margin_loss", "capsules must be [J,D]"));
        };
        if target >= classes {
            return Err(Error::invalid(
                "margin_loss",
                format!("target {target} of {classes} classes"),
            ));
        }
        let data = self.val(v).data();
        let loss: f64 = (0..classes)
            .map(|k| {
                let n = norm(&data[k * dim..(k + 1) * dim]);
                margin_term(n, k == target, &constants)
            })
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::MarginLoss {
                caps: v,
                target,
                constants,
            },
            &[v],
        )
    }

    /// Σ (x − target)².
    pub fn squared_error(&mut self, input: Var, target: &[f64]) -> Result<Var> {
        let x = self.idx(input)?;
        if target.len() != self.val(x).len() {
            return Err(Error::shape(
                "squared_error",
                format!("{} predictions vs {} targets", self.val(x).len(), target.len()),
            ));
        }
        let loss = self
            .val(x)
            .data()
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                input: x,
                target: target.to_vec(),
            },
            &[x],
        )
    }

    /// `logsumexp(z) − z_target` for a logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.idx(logits)?;
        let data = self.val(z).data();
        if target >= data.len() {
            return Err(Error::invalid("softmax_cross_entropy", "target out of range"));
        }
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        self.push(
            Tensor::scalar(lse - data[target]),
            Op::SoftmaxCrossEntropy { logits: z, target },
            &[z],
        )
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let s = self.val(x).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root = self.idx(root)?;
        if self.val(root).len() != 1 {
            return Err(Error::NotRecorded(format!(
                "root has shape {:?}, expected a scalar",
                self.val(root).shape()
            )));
        }
        if matches!(self.nodes[root].op, Op::Leaf) {
            return Err(Error::NotRecorded("root is a leaf, not a recorded operation".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Gradients { graph: self.id, grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.val(i).data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => {
                let kd = self.val(*kernels).data();
                let cg = kernels::conv2d_backward(cols, kd, g, geom, self.wants(*input));
                if let Some(gi) = cg.input {
                    accumulate(grads, *input, gi);
                }
                if self.wants(*kernels) {
                    accumulate(grads, *kernels, cg.kernels);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, cg.bias);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![0.0; self.val(*input).len()];
                for (&src, gv) in argmax.iter().zip(g) {
                    if src != PADDING {
                        gi[src] += gv;
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::Affine { input, weights, bias } => {
                let x = self.val(*input).data();
                let w = self.val(*weights).data();
                let n = x.len();
                if self.wants(*input) {
                    let mut gi = vec![0.0; n];
                    for (row, gm) in w.chunks_exact(n).zip(g) {
                        for (acc, wv) in gi.iter_mut().zip(row) {
                            *acc += gm * wv;
                        }
                    }
                    accumulate(grads, *input, gi);
                }
                if self.wants(*weights) {
                    let mut gw = Vec::with_capacity(w.len());
                    for gm in g {
                        gw.extend(x.iter().map(|xv| gm * xv));
                    }
                    accumulate(grads, *weights, gw);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, g.to_vec());
                }
            }
            Op::Relu(x) => {
                let xd = self.val(*x).data();
                let gi = xd
                    .iter()
                    .zip(g)
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gi);
            }
            Op::Sigmoid(x) => {
                let gi = out.iter().zip(g).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                accumulate(grads, *x, gi);
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let mut gi = vec![0.0; out.len()];
                for o in 0..*outer {
                    for c in 0..*inner {
                        let at = |k: usize| (o * len + k) * inner + c;
                        let dotp: f64 = (0..*len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..*len {
                            gi[at(k)] = out[at(k)] * (g[at(k)] - dotp);
                        }
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|v| v * f).collect()),
            Op::MulConst { input, factors } => {
                accumulate(grads, *input, g.iter().zip(factors).map(|(v, f)| v * f).collect())
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Gather { input, index } => {
                let mut gi = vec![0.0; self.val(*input).len()];
                for (&src, gv) in index.iter().zip(g) {
                    gi[src] += gv;
                }
                accumulate(grads, *input, gi);
            }
            Op::SquashRows { input, dim } => {
                let s = self.val(*input).data();
                let mut gi = vec![0.0; s.len()];
                for ((srow, grow), out_row) in s
                    .chunks_exact(*dim)
                    .zip(g.chunks_exact(*dim))
                    .zip(gi.chunks_exact_mut(*dim))
                {
                    let n = norm(srow);
                    let f = squash_factor(n);
                    let df_over_n = squash_factor_derivative_over_norm(n);
                    let sg = kernels::dot(srow, grow);
                    for ((o, sv), gv) in out_row.iter_mut().zip(srow).zip(grow) {
                        *o = f * gv + df_over_n * sg * sv;
                    }
                }
                accumulate(grads, *input, gi);
            }
            Op::Votes { caps, weights } => {
                let u = self.val(*caps).data();
                let w = self.val(*weights).data();
                let [p, d_in] = *self.val(*caps).shape() else {
                    unreachable!()
                };
                let rows_per_caps = g.len() / p;
                if self.wants(*caps) {
                    let mut gu = vec![0.0; u.len()];
                    for pi in 0..p {
                        let dst = &mut gu[pi * d_in..(pi + 1) * d_in];
                        for r in 0..rows_per_caps {
                            let gv = g[pi * rows_per_caps + r];
                            let row = &w[(pi * rows_per_caps + r) * d_in..(pi * rows_per_caps + r + 1) * d_in];
                            for (d, wv) in dst.iter_mut().zip(row) {
                                *d += gv * wv;
                            }
                        }
                    }
                    accumulate(grads, *caps, gu);
                }
                if self.wants(*weights) {
                    let mut gw = Vec::with_capacity(w.len());
                    for pi in 0..p {
                        let up = &u[pi * d_in..(pi + 1) * d_in];
                        for r in 0..rows_per_caps {
                            let gv = g[pi * rows_per_caps + r];
                            gw.extend(up.iter().map(|uv| gv * uv));
                        }
                    }
                    accumulate(grads, *weights, gw);
                }
            }
            Op::RouteSum { couplings, votes } => {
                let c = self.val(*couplings).data();
                let u = self.val(*votes).data();
                let [p, j, d] = *self.val(*votes).shape() else {
                    unreachable!()
                };
                if self.wants(*couplings) {
                    let mut gc = Vec::with_capacity(p * j);
                    for pi in 0..p {
                        for ji in 0..j {
                            gc.push(kernels::dot(
                                &g[ji * d..(ji + 1) * d],
                                &u[(pi * j + ji) * d..(pi * j + ji + 1) * d],
                            ));
                        }
                    }
                    accumulate(grads, *couplings, gc);
                }
                if self.wants(*votes) {
                    let mut gu = Vec::with_capacity(u.len());
                    for pi in 0..p {
                        for ji in 0..j {
                            let cv = c[pi * j + ji];
                            gu.extend(g[ji * d..(ji + 1) * d].iter().map(|gv| cv * gv));
                        }
                    }
                    accumulate(grads, *votes, gu);
                }
            }
            Op::Agreement { votes, outputs } => {
                let u = self.val(*votes).data();
                let v = self.val(*outputs).data();
                let [p, j, d] = *self.val(*votes).shape() else {
                    unreachable!()
                };
                if self.wants(*votes) {
                    let mut gu = Vec::with_capacity(u.len());
                    for pi in 0..p {
                        for ji in 0..j {
                            let gv = g[pi * j + ji];
                            gu.extend(v[ji * d..(ji + 1) * d].iter().map(|vv| gv * vv));
                        }
                    }
                    accumulate(grads, *votes, gu);
                }
                if self.wants(*outputs) {
                    let mut gv = vec![0.0; v.len()];
                    for pi in 0..p {
                        for ji in 0..j {
                            let ga = g[pi * j + ji];
                            let src = &u[(pi * j + ji) * d..(pi * j + ji + 1) * d];
                            for (o, uv) in gv[ji * d..(ji + 1) * d].iter_mut().zip(src) {
                                *o += ga * uv;
                            }
                        }
                    }
                    accumulate(grads, *outputs, gv);
                }
            }
            Op::MarginLoss {
                caps,
                target,
                constants,
            } => {
                let v = self.val(*caps).data();
                let [classes, dim] = *self.val(*caps).shape() else {
                    unreachable!()
                };
                let mut gv = vec![0.0; v.len()];
                for k in 0..classes {
                    let row = &v[k * dim..(k + 1) * dim];
                    let n = norm(row);
                    if n == 0.0 {
                        continue;
                    }
                    let dl_dn = margin_term_derivative(n, k == *target, constants) * g[0];
                    for (o, x) in gv[k * dim..(k + 1) * dim].iter_mut().zip(row) {
                        *o = dl_dn * x / n;
                    }
                }
                accumulate(grads, *caps, gv);
            }
            Op::SquaredError { input, target } => {
                let x = self.val(*input).data();
                let gi = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b) * g[0]).collect();
                accumulate(grads, *input, gi);
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let z = self.val(*logits).data();
                let probs = kernels::softmax_forward(z, 1, z.len(), 1);
                let gi = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (p - if k == *target { 1.0 } else { 0.0 }) * g[0])
                    .collect();
                accumulate(grads, *logits, gi);
            }
            Op::SumSquares(x) => {
                let gi = self.val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                accumulate(grads, *x, gi);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.val(*x).len()]),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    match &mut grads[i] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn votes_dims(votes: &[usize], couplings: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match (votes, couplings) {
        (&[p, j, d], &[cp, cj]) if cp == p && cj == j => Ok((p, j, d)),
        (a, b) => Err(Error::shape(op, format!("votes {a:?}, couplings {b:?}"))),
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scalar multiplier `f(n)` with `squash(s) = f(‖s‖)·s`.
pub(crate) fn squash_factor(n: f64) -> f64 {
    let n2 = n * n;
    n2 / ((1.0 + n2) * (n + SQUASH_EPS))
}

/// `f'(n)/n`, finite at `n = 0` where it is multiplied by `O(n²)` terms.
fn squash_factor_derivative_over_norm(n: f64) -> f64 {
    let n2 = n * n;
    let denom = (1.0 + n2) * (n + SQUASH_EPS);
    let denom_prime = 2.0 * n * (n + SQUASH_EPS) + (1.0 + n2);
    (2.0 * denom - n * denom_prime) / (denom * denom)
}

pub(crate) fn margin_term(n: f64, is_target: bool, c: &MarginConstants) -> f64 {
    if is_target {
        (c.m_plus - n).max(0.0).powi(2)
    } else {
        c.lambda * (n - c.m_minus).max(0.0).powi(2)
    }
}

fn margin_term_derivative(n: f64, is_target: bool, c: &MarginConstants) -> f64 {
    if is_target {
        -2.0 * (c.m_plus - n).max(0.0)
    } else {
        2.0 * c.lambda * (n - c.m_minus).max(0.0)
    }
}

/// Gradients from one reverse pass.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}
