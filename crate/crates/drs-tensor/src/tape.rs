//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding the forward value and enough
//! information to run its backward rule. Nodes are referenced by [`TensorId`]
//! in insertion order, so the tape is topologically sorted by construction
//! and one reverse sweep propagates gradients to every leaf.
//!
//! Forward results are checked for NaN/Inf as they are produced; the first
//! non-finite value aborts with an error naming the node. Summation orders
//! are fixed, so a given graph evaluates bit-identically on every run.

use crate::conv;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: TensorId,
        weights: TensorId,
        bias: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Exp {
        input: TensorId,
    },
    Log {
        input: TensorId,
    },
    Square {
        input: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        input: TensorId,
        factor: S,
    },
    AddScalar {
        input: TensorId,
    },
    Clamp {
        input: TensorId,
        lo: S,
        hi: S,
    },
    Sum {
        input: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
    },
    Reshape {
        input: TensorId,
    },
    SliceLast {
        input: TensorId,
        from: usize,
        to: usize,
    },
    SquareNormalize {
        input: TensorId,
    },
    GaussianMixtureNll {
        y: TensorId,
        weights: TensorId,
        means: TensorId,
        logvars: TensorId,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Dense { .. } => "dense",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Square { .. } => "square",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::SliceLast { .. } => "slice_last",
            Op::SquareNormalize { .. } => "square_normalize",
            Op::GaussianMixtureNll { .. } => "gaussian_mixture_nll",
        }
    }
}

struct Node<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    active: bool,
    op: Op<S>,
    label: Option<String>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor<S>) -> Result<TensorId, TensorError> {
        self.insert_leaf(
            tensor.dims().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    /// Inserts a constant leaf that never receives gradients.
    pub fn constant(&mut self, dims: Vec<usize>, data: Vec<S>) -> Result<TensorId, TensorError> {
        self.insert_leaf(dims, data, false)
    }

    pub fn insert_leaf(
        &mut self,
        dims: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let numel: usize = dims.iter().product();
        if numel != data.len() || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("dims {:?} do not describe {} elements", dims, data.len()),
            });
        }
        let node = Node {
            dims,
            data,
            grad: None,
            active: requires_grad,
            op: Op::Leaf,
            label: None,
        };
        self.push_checked(node)
    }

    pub fn set_label(&mut self, id: TensorId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Moves a leaf's gradient out of the tape (e.g. back into a parameter).
    pub fn take_grad(&mut self, id: TensorId) -> Option<Vec<S>> {
        self.nodes[id.0].grad.take()
    }

    pub fn value_tensor(&self, id: TensorId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].dims.clone(), self.nodes[id.0].data.clone())
            .expect("tape node dims are consistent")
    }

    fn push_checked(&mut self, node: Node<S>) -> Result<TensorId, TensorError> {
        if let Some(index) = node.data.iter().position(|v| !v.is_finite()) {
            let name = node
                .label
                .clone()
                .unwrap_or_else(|| format!("node{}", self.nodes.len()));
            return Err(TensorError::NonFinite {
                op: node.op.name(),
                node: name,
                index,
            });
        }
        self.nodes.push(node);
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn push_op(
        &mut self,
        dims: Vec<usize>,
        data: Vec<S>,
        op: Op<S>,
        inputs: &[TensorId],
    ) -> Result<TensorId, TensorError> {
        let active = inputs.iter().any(|id| self.nodes[id.0].active);
        self.push_checked(Node {
            dims,
            data,
            grad: None,
            active,
            op,
            label: None,
        })
    }

    fn expect_dims3(&self, id: TensorId, op: &'static str, role: &str) -> Result<(usize, usize, usize), TensorError> {
        let d = self.dims(id);
        if d.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{role} must be rank 3, got dims {d:?}"),
            });
        }
        Ok((d[0], d[1], d[2]))
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// 2-D convolution of `[H, W, Cin]` with kernels `[k, k, Cin, Cout]`
    /// and bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, TensorError> {
        let (h, w, cin) = self.expect_dims3(input, "conv2d", "input")?;
        let kd = self.dims(kernels);
        if kd.len() != 4 || kd[0] != kd[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernels must be [k, k, Cin, Cout], got dims {kd:?}"),
            });
        }
        let (k, kcin, cout) = (kd[0], kd[2], kd[3]);
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel input-channel dim {kcin} does not match input channels {cin}"),
            });
        }
        if self.dims(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias dims {:?} do not match output channels [{cout}]",
                    self.dims(bias)
                ),
            });
        }
        let oh = conv::conv2d_out_extent(h, k, stride, padding)?;
        let ow = conv::conv2d_out_extent(w, k, stride, padding)?;
        let mut out = vec![S::zero(); oh * ow * cout];
        conv::conv2d_forward(
            self.value(input),
            (h, w, cin),
            self.value(kernels),
            k,
            self.value(bias),
            cout,
            stride,
            padding,
            &mut out,
            (oh, ow),
        );
        self.push_op(
            vec![oh, ow, cout],
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            &[input, kernels, bias],
        )
    }

    /// Transposed 2-D convolution of `[H, W, Cin]` with kernels
    /// `[k, k, Cout, Cin]` and bias `[Cout]`. With a shared kernel buffer this
    /// is the exact linear adjoint of [`Tape::conv2d`].
    pub fn conv_transpose2d(
        &mut self,
        input: TensorId,
        kernels: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId, TensorError> {
        let (h, w, cin) = self.expect_dims3(input, "conv_transpose2d", "input")?;
        let kd = self.dims(kernels);
        if kd.len() != 4 || kd[0] != kd[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("kernels must be [k, k, Cout, Cin], got dims {kd:?}"),
            });
        }
        let (k, cout, kcin) = (kd[0], kd[2], kd[3]);
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("kernel input-channel dim {kcin} does not match input channels {cin}"),
            });
        }
        if self.dims(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!(
                    "bias dims {:?} do not match output channels [{cout}]",
                    self.dims(bias)
                ),
            });
        }
        let oh = conv::convt2d_out_extent(h, k, stride, padding)?;
        let ow = conv::convt2d_out_extent(w, k, stride, padding)?;
        let mut out = vec![S::zero(); oh * ow * cout];
        conv::convt2d_forward(
            self.value(input),
            (h, w, cin),
            self.value(kernels),
            k,
            self.value(bias),
            cout,
            stride,
            padding,
            &mut out,
            (oh, ow),
        );
        self.push_op(
            vec![oh, ow, cout],
            out,
            Op::ConvTranspose2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            &[input, kernels, bias],
        )
    }

    /// Fully connected layer: `out = W x + b` with `x: [n]`, `W: [m, n]`,
    /// `b: [m]`.
    pub fn dense(
        &mut self,
        input: TensorId,
        weights: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xd = self.dims(input);
        if xd.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("input must be rank 1, got dims {xd:?}"),
            });
        }
        let n = xd[0];
        let wd = self.dims(weights);
        if wd.len() != 2 || wd[1] != n {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("weights dims {wd:?} do not match input length {n}"),
            });
        }
        let m = wd[0];
        if self.dims(bias) != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("bias dims {:?} do not match output length [{m}]", self.dims(bias)),
            });
        }
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        let mut out = vec![S::zero(); m];
        for r in 0..m {
            let row = &w[r * n..r * n + n];
            let mut acc = b[r];
            for i in 0..n {
                acc += row[i] * x[i];
            }
            out[r] = acc;
        }
        self.push_op(
            vec![m],
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
            &[input, weights, bias],
        )
    }

    // ── Elementwise ops ─────────────────────────────────────────────────

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self
            .value(input)
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::Relu { input }, &[input])
    }

    pub fn sigmoid(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self
            .value(input)
            .iter()
            .map(|&v| {
                if v >= S::zero() {
                    S::one() / (S::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (S::one() + e)
                }
            })
            .collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::Sigmoid { input }, &[input])
    }

    pub fn exp(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.value(input).iter().map(|v| v.exp()).collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::Exp { input }, &[input])
    }

    /// Natural logarithm. Non-positive inputs are rejected before any NaN can
    /// propagate.
    pub fn log(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        if let Some(index) = self.value(input).iter().position(|v| *v <= S::zero()) {
            return Err(TensorError::LogDomain {
                index,
                value: self.value(input)[index].into_f64(),
            });
        }
        let data: Vec<S> = self.value(input).iter().map(|v| v.ln()).collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::Log { input }, &[input])
    }

    pub fn square(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.value(input).iter().map(|&v| v * v).collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::Square { input }, &[input])
    }

    fn binary_check(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!(
                    "operand dims {:?} and {:?} differ",
                    self.dims(a),
                    self.dims(b)
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_check("add", a, b)?;
        let data: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.dims(a).to_vec();
        self.push_op(dims, data, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_check("sub", a, b)?;
        let data: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let dims = self.dims(a).to_vec();
        self.push_op(dims, data, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_check("mul", a, b)?;
        let data: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = self.dims(a).to_vec();
        self.push_op(dims, data, Op::Mul { a, b }, &[a, b])
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: TensorId, factor: S) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.value(input).iter().map(|&v| v * factor).collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::Scale { input, factor }, &[input])
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, input: TensorId, offset: S) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self.value(input).iter().map(|&v| v + offset).collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::AddScalar { input }, &[input])
    }

    /// Clamps to `[lo, hi]`; the gradient passes through unclipped elements
    /// and is zero on clipped ones.
    pub fn clamp(&mut self, input: TensorId, lo: S, hi: S) -> Result<TensorId, TensorError> {
        let data: Vec<S> = self
            .value(input)
            .iter()
            .map(|&v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
            .collect();
        let dims = self.dims(input).to_vec();
        self.push_op(dims, data, Op::Clamp { input, lo, hi }, &[input])
    }

    /// Sum of all elements, producing a scalar (`[1]`) tensor.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let mut acc = S::zero();
        for &v in self.value(input) {
            acc += v;
        }
        self.push_op(vec![1], vec![acc], Op::Sum { input }, &[input])
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: "no inputs".to_string(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.dims(p).len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("inputs must be rank 1, got dims {:?}", self.dims(p)),
                });
            }
            data.extend_from_slice(self.value(p));
        }
        let len = data.len();
        self.push_op(
            vec![len],
            data,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn reshape(&mut self, input: TensorId, dims: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = dims.iter().product();
        if numel != self.value(input).len() || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot reshape {} elements to dims {dims:?}",
                    self.value(input).len()
                ),
            });
        }
        let data = self.value(input).to_vec();
        self.push_op(dims, data, Op::Reshape { input }, &[input])
    }

    /// Slices `[from, to)` along the last dimension.
    pub fn slice_last(
        &mut self,
        input: TensorId,
        from: usize,
        to: usize,
    ) -> Result<TensorId, TensorError> {
        let d = self.dims(input).to_vec();
        let c = *d.last().ok_or(TensorError::ShapeMismatch {
            op: "slice_last",
            detail: "input must have at least one dimension".to_string(),
        })?;
        if from >= to || to > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_last",
                detail: format!("slice [{from}, {to}) out of range for last dim {c}"),
            });
        }
        let prefix = self.value(input).len() / c;
        let width = to - from;
        let mut data = Vec::with_capacity(prefix * width);
        let src = self.value(input);
        for p in 0..prefix {
            data.extend_from_slice(&src[p * c + from..p * c + to]);
        }
        let mut dims = d;
        *dims.last_mut().unwrap() = width;
        self.push_op(dims, data, Op::SliceLast { input, from, to }, &[input])
    }

    /// Squares and normalizes along the last dimension so each group sums to
    /// one. Groups whose raw square-sum is below 1e-12 fall back to uniform
    /// weights (with zero gradient).
    pub fn square_normalize(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let d = self.dims(input);
        let n = *d.last().ok_or(TensorError::ShapeMismatch {
            op: "square_normalize",
            detail: "input must have at least one dimension".to_string(),
        })?;
        let src = self.value(input);
        let groups = src.len() / n;
        let eps = S::from_f64(1e-12);
        let uniform = S::one() / S::from_f64(n as f64);
        let mut data = vec![S::zero(); src.len()];
        for g in 0..groups {
            let raw = &src[g * n..g * n + n];
            let mut s = S::zero();
            for &r in raw {
                s += r * r;
            }
            let out = &mut data[g * n..g * n + n];
            if s < eps {
                out.iter_mut().for_each(|v| *v = uniform);
            } else {
                for i in 0..n {
                    out[i] = raw[i] * raw[i] / s;
                }
            }
        }
        let dims = d.to_vec();
        self.push_op(dims, data, Op::SquareNormalize { input }, &[input])
    }

    /// Negative log-likelihood of `y` under a per-cell Gaussian mixture,
    /// summed over cells, computed with log-sum-exp stabilization.
    ///
    /// `y` has one value per cell; `weights`, `means`, and `logvars` carry
    /// `n` components per cell in their last dimension.
    pub fn gaussian_mixture_nll(
        &mut self,
        y: TensorId,
        weights: TensorId,
        means: TensorId,
        logvars: TensorId,
    ) -> Result<TensorId, TensorError> {
        let n = *self.dims(weights).last().unwrap_or(&0);
        let cells = self.value(y).len();
        for (id, role) in [(weights, "weights"), (means, "means"), (logvars, "logvars")] {
            if self.value(id).len() != cells * n || *self.dims(id).last().unwrap_or(&0) != n {
                return Err(TensorError::ShapeMismatch {
                    op: "gaussian_mixture_nll",
                    detail: format!(
                        "{role} dims {:?} do not match {cells} cells x {n} components",
                        self.dims(id)
                    ),
                });
            }
        }
        let (total, _) = gmm_nll_forward(
            self.value(y),
            self.value(weights),
            self.value(means),
            self.value(logvars),
            cells,
            n,
        )?;
        self.push_op(
            vec![1],
            vec![total],
            Op::GaussianMixtureNll {
                y,
                weights,
                means,
                logvars,
            },
            &[y, weights, means, logvars],
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Resets all gradients, then back-propagates from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_accumulate(loss)
    }

    /// Back-propagates without clearing existing leaf gradients, so repeated
    /// calls sum their contributions.
    pub fn backward_accumulate(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(TensorError::NonScalarLoss { len: loss_len });
        }
        // Internal (non-leaf) node gradients never persist between calls.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        for node in &mut self.nodes {
            if node.active && node.grad.is_none() {
                node.grad = Some(vec![S::zero(); node.data.len()]);
            }
        }
        if !self.nodes[loss.0].active {
            // Loss does not depend on any gradient leaf; nothing to do.
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] += S::one();
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].active {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn is_active(&self, id: TensorId) -> bool {
        self.nodes[id.0].active
    }

    /// Takes a node's grad buffer out, runs `f` with it, and puts it back.
    /// Needed because an op's inputs and output alias the same arena.
    fn with_grad_of<R>(&mut self, id: TensorId, f: impl FnOnce(&mut Self, &mut [S]) -> R) -> R {
        let mut g = self.nodes[id.0]
            .grad
            .take()
            .expect("active node has a grad buffer");
        let r = f(self, &mut g);
        self.nodes[id.0].grad = Some(g);
        r
    }

    fn step_backward(&mut self, i: usize) {
        let out_grad = match self.nodes[i].grad.take() {
            Some(g) => g,
            None => return,
        };
        // Ops are matched by moving lightweight copies of their fields.
        enum Plan<S> {
            None,
            Unary(TensorId, UnaryKind<S>),
            Binary(TensorId, TensorId, BinaryKind),
            Structured,
        }
        enum UnaryKind<S> {
            Relu,
            Sigmoid,
            Exp,
            Log,
            Square,
            Scale(S),
            AddScalar,
            Clamp(S, S),
            Sum,
            Reshape,
        }
        enum BinaryKind {
            Add,
            Sub,
            Mul,
        }
        let plan = match &self.nodes[i].op {
            Op::Leaf => Plan::None,
            Op::Relu { input } => Plan::Unary(*input, UnaryKind::Relu),
            Op::Sigmoid { input } => Plan::Unary(*input, UnaryKind::Sigmoid),
            Op::Exp { input } => Plan::Unary(*input, UnaryKind::Exp),
            Op::Log { input } => Plan::Unary(*input, UnaryKind::Log),
            Op::Square { input } => Plan::Unary(*input, UnaryKind::Square),
            Op::Scale { input, factor } => Plan::Unary(*input, UnaryKind::Scale(*factor)),
            Op::AddScalar { input } => Plan::Unary(*input, UnaryKind::AddScalar),
            Op::Clamp { input, lo, hi } => Plan::Unary(*input, UnaryKind::Clamp(*lo, *hi)),
            Op::Sum { input } => Plan::Unary(*input, UnaryKind::Sum),
            Op::Reshape { input } => Plan::Unary(*input, UnaryKind::Reshape),
            Op::Add { a, b } => Plan::Binary(*a, *b, BinaryKind::Add),
            Op::Sub { a, b } => Plan::Binary(*a, *b, BinaryKind::Sub),
            Op::Mul { a, b } => Plan::Binary(*a, *b, BinaryKind::Mul),
            _ => Plan::Structured,
        };
        match plan {
            Plan::None => {}
            Plan::Unary(input, kind) => {
                if self.is_active(input) {
                    self.with_grad_of(input, |tape, gi| {
                        let x = tape.value(input);
                        let out = &tape.nodes[i].data;
                        match kind {
                            UnaryKind::Relu => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    if x[j] > S::zero() {
                                        gi[j] += *g;
                                    }
                                }
                            }
                            UnaryKind::Sigmoid => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    gi[j] += *g * out[j] * (S::one() - out[j]);
                                }
                            }
                            UnaryKind::Exp => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    gi[j] += *g * out[j];
                                }
                            }
                            UnaryKind::Log => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    gi[j] += *g / x[j];
                                }
                            }
                            UnaryKind::Square => {
                                let two = S::from_f64(2.0);
                                for (j, g) in out_grad.iter().enumerate() {
                                    gi[j] += *g * two * x[j];
                                }
                            }
                            UnaryKind::Scale(factor) => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    gi[j] += *g * factor;
                                }
                            }
                            UnaryKind::AddScalar => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    gi[j] += *g;
                                }
                            }
                            UnaryKind::Clamp(lo, hi) => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    if x[j] >= lo && x[j] <= hi {
                                        gi[j] += *g;
                                    }
                                }
                            }
                            UnaryKind::Sum => {
                                let g = out_grad[0];
                                for v in gi.iter_mut() {
                                    *v += g;
                                }
                            }
                            UnaryKind::Reshape => {
                                for (j, g) in out_grad.iter().enumerate() {
                                    gi[j] += *g;
                                }
                            }
                        }
                    });
                }
            }
            Plan::Binary(a, b, kind) => {
                if self.is_active(a) {
                    self.with_grad_of(a, |tape, ga| match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            for (j, g) in out_grad.iter().enumerate() {
                                ga[j] += *g;
                            }
                        }
                        BinaryKind::Mul => {
                            let bv = tape.value(b);
                            for (j, g) in out_grad.iter().enumerate() {
                                ga[j] += *g * bv[j];
                            }
                        }
                    });
                }
                if self.is_active(b) {
                    self.with_grad_of(b, |tape, gb| match kind {
                        BinaryKind::Add => {
                            for (j, g) in out_grad.iter().enumerate() {
                                gb[j] += *g;
                            }
                        }
                        BinaryKind::Sub => {
                            for (j, g) in out_grad.iter().enumerate() {
                                gb[j] -= *g;
                            }
                        }
                        BinaryKind::Mul => {
                            let av = tape.value(a);
                            for (j, g) in out_grad.iter().enumerate() {
                                gb[j] += *g * av[j];
                            }
                        }
                    });
                }
            }
            Plan::Structured => self.structured_backward(i, &out_grad),
        }
        self.nodes[i].grad = Some(out_grad);
    }

    fn structured_backward(&mut self, i: usize, out_grad: &[S]) {
        match &self.nodes[i].op {
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let (input, kernels, bias, stride, padding) =
                    (*input, *kernels, *bias, *stride, *padding);
                let (h, w, cin) = {
                    let d = self.dims(input);
                    (d[0], d[1], d[2])
                };
                let k = self.dims(kernels)[0];
                let cout = self.dims(kernels)[3];
                let (oh, ow) = (self.nodes[i].dims[0], self.nodes[i].dims[1]);
                let mut di = self.take_active_grad(input);
                let mut dk = self.take_active_grad(kernels);
                let mut db = self.take_active_grad(bias);
                conv::conv2d_backward(
                    out_grad,
                    self.value(input),
                    (h, w, cin),
                    self.value(kernels),
                    k,
                    cout,
                    stride,
                    padding,
                    (oh, ow),
                    di.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.restore_grad(input, di);
                self.restore_grad(kernels, dk);
                self.restore_grad(bias, db);
            }
            Op::ConvTranspose2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let (input, kernels, bias, stride, padding) =
                    (*input, *kernels, *bias, *stride, *padding);
                let (h, w, cin) = {
                    let d = self.dims(input);
                    (d[0], d[1], d[2])
                };
                let k = self.dims(kernels)[0];
                let cout = self.dims(kernels)[2];
                let (oh, ow) = (self.nodes[i].dims[0], self.nodes[i].dims[1]);
                let mut di = self.take_active_grad(input);
                let mut dk = self.take_active_grad(kernels);
                let mut db = self.take_active_grad(bias);
                conv::convt2d_backward(
                    out_grad,
                    self.value(input),
                    (h, w, cin),
                    self.value(kernels),
                    k,
                    cout,
                    stride,
                    padding,
                    (oh, ow),
                    di.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.restore_grad(input, di);
                self.restore_grad(kernels, dk);
                self.restore_grad(bias, db);
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let (input, weights, bias) = (*input, *weights, *bias);
                let n = self.dims(input)[0];
                let m = self.dims(weights)[0];
                if self.is_active(input) {
                    self.with_grad_of(input, |tape, gi| {
                        let w = tape.value(weights);
                        for r in 0..m {
                            let g = out_grad[r];
                            let row = &w[r * n..r * n + n];
                            for j in 0..n {
                                gi[j] += g * row[j];
                            }
                        }
                    });
                }
                if self.is_active(weights) {
                    self.with_grad_of(weights, |tape, gw| {
                        let x = tape.value(input);
                        for r in 0..m {
                            let g = out_grad[r];
                            let row = &mut gw[r * n..r * n + n];
                            for j in 0..n {
                                row[j] += g * x[j];
                            }
                        }
                    });
                }
                if self.is_active(bias) {
                    self.with_grad_of(bias, |_, gb| {
                        for r in 0..m {
                            gb[r] += out_grad[r];
                        }
                    });
                }
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    if self.is_active(p) {
                        self.with_grad_of(p, |_, gp| {
                            for j in 0..len {
                                gp[j] += out_grad[offset + j];
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::SliceLast { input, from, to } => {
                let (input, from, to) = (*input, *from, *to);
                let c = *self.dims(input).last().unwrap();
                let width = to - from;
                if self.is_active(input) {
                    self.with_grad_of(input, |_, gi| {
                        let prefix = gi.len() / c;
                        for p in 0..prefix {
                            for j in 0..width {
                                gi[p * c + from + j] += out_grad[p * width + j];
                            }
                        }
                    });
                }
            }
            Op::SquareNormalize { input } => {
                let input = *input;
                let n = *self.dims(input).last().unwrap();
                if self.is_active(input) {
                    let out = self.nodes[i].data.clone();
                    self.with_grad_of(input, |tape, gi| {
                        let raw = tape.value(input);
                        let eps = S::from_f64(1e-12);
                        let two = S::from_f64(2.0);
                        let groups = raw.len() / n;
                        for g in 0..groups {
                            let r = &raw[g * n..g * n + n];
                            let w = &out[g * n..g * n + n];
                            let go = &out_grad[g * n..g * n + n];
                            let mut s = S::zero();
                            for &v in r {
                                s += v * v;
                            }
                            if s < eps {
                                continue; // uniform fallback has zero gradient
                            }
                            let mut dot = S::zero();
                            for j in 0..n {
                                dot += go[j] * w[j];
                            }
                            for j in 0..n {
                                gi[g * n + j] += two * r[j] / s * (go[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::GaussianMixtureNll {
                y,
                weights,
                means,
                logvars,
            } => {
                let (y, weights, means, logvars) = (*y, *weights, *means, *logvars);
                let n = *self.dims(weights).last().unwrap();
                let cells = self.value(y).len();
                let g = out_grad[0];
                let (dy, dw, dmu, dlv) = gmm_nll_backward(
                    self.value(y),
                    self.value(weights),
                    self.value(means),
                    self.value(logvars),
                    cells,
                    n,
                    g,
                    self.is_active(y),
                    self.is_active(weights),
                    self.is_active(means),
                    self.is_active(logvars),
                );
                self.accumulate_grad(y, dy);
                self.accumulate_grad(weights, dw);
                self.accumulate_grad(means, dmu);
                self.accumulate_grad(logvars, dlv);
            }
            _ => unreachable!("structured_backward only sees structured ops"),
        }
    }

    fn take_active_grad(&mut self, id: TensorId) -> Option<Vec<S>> {
        if self.is_active(id) {
            self.nodes[id.0].grad.take()
        } else {
            None
        }
    }

    fn restore_grad(&mut self, id: TensorId, grad: Option<Vec<S>>) {
        if let Some(g) = grad {
            self.nodes[id.0].grad = Some(g);
        }
    }

    fn accumulate_grad(&mut self, id: TensorId, contribution: Option<Vec<S>>) {
        if let Some(c) = contribution {
            if let Some(g) = self.nodes[id.0].grad.as_mut() {
                for (gv, cv) in g.iter_mut().zip(&c) {
                    *gv += *cv;
                }
            }
        }
    }
}

/// Stable mixture NLL: sum over cells of `-log Σ_i w_i N(y | μ_i, σ_i²)`.
fn gmm_nll_forward<S: Scalar>(
    y: &[S],
    w: &[S],
    mu: &[S],
    lv: &[S],
    cells: usize,
    n: usize,
) -> Result<(S, ()), TensorError> {
    let half = S::from_f64(0.5);
    let ln_2pi = S::from_f64((2.0 * std::f64::consts::PI).ln());
    let mut total = S::zero();
    for c in 0..cells {
        let yv = y[c];
        let mut max_g = S::neg_infinity();
        let mut comp_log = [S::neg_infinity(); 16];
        debug_assert!(n <= 16, "mixture components capped at 16");
        for i in 0..n {
            let wi = w[c * n + i];
            if wi <= S::zero() {
                continue;
            }
            let lvi = lv[c * n + i];
            let d = yv - mu[c * n + i];
            let log_n = -half * (ln_2pi + lvi) - half * d * d * (-lvi).exp();
            let gi = wi.ln() + log_n;
            comp_log[i] = gi;
            if gi > max_g {
                max_g = gi;
            }
        }
        if !max_g.is_finite() {
            return Err(TensorError::LogDomain {
                index: c,
                value: 0.0,
            });
        }
        let mut s = S::zero();
        for item in comp_log.iter().take(n) {
            if item.is_finite() {
                s += (*item - max_g).exp();
            }
        }
        total -= max_g + s.ln();
    }
    Ok((total, ()))
}

type GmmGrads<S> = (
    Option<Vec<S>>,
    Option<Vec<S>>,
    Option<Vec<S>>,
    Option<Vec<S>>,
);

#[allow(clippy::too_many_arguments)]
fn gmm_nll_backward<S: Scalar>(
    y: &[S],
    w: &[S],
    mu: &[S],
    lv: &[S],
    cells: usize,
    n: usize,
    seed: S,
    need_y: bool,
    need_w: bool,
    need_mu: bool,
    need_lv: bool,
) -> GmmGrads<S> {
    let half = S::from_f64(0.5);
    let ln_2pi = S::from_f64((2.0 * std::f64::consts::PI).ln());
    let mut dy = need_y.then(|| vec![S::zero(); cells]);
    let mut dw = need_w.then(|| vec![S::zero(); cells * n]);
    let mut dmu = need_mu.then(|| vec![S::zero(); cells * n]);
    let mut dlv = need_lv.then(|| vec![S::zero(); cells * n]);
    let mut comp_log = [S::neg_infinity(); 16];
    let mut log_dens = [S::neg_infinity(); 16];
    for c in 0..cells {
        let yv = y[c];
        let mut max_g = S::neg_infinity();
        for i in 0..n {
            let wi = w[c * n + i];
            let lvi = lv[c * n + i];
            let d = yv - mu[c * n + i];
            let log_n = -half * (ln_2pi + lvi) - half * d * d * (-lvi).exp();
            log_dens[i] = log_n;
            if wi > S::zero() {
                let gi = wi.ln() + log_n;
                comp_log[i] = gi;
                if gi > max_g {
                    max_g = gi;
                }
            } else {
                comp_log[i] = S::neg_infinity();
            }
        }
        let mut s = S::zero();
        for item in comp_log.iter().take(n) {
            if item.is_finite() {
                s += (*item - max_g).exp();
            }
        }
        let log_mix = max_g + s.ln();
        for i in 0..n {
            let lvi = lv[c * n + i];
            let d = yv - mu[c * n + i];
            let inv_var = (-lvi).exp();
            // Responsibility r_i = w_i N_i / mix (zero for w_i = 0).
            let r = if comp_log[i].is_finite() {
                (comp_log[i] - log_mix).exp()
            } else {
                S::zero()
            };
            if let Some(dmu) = dmu.as_mut() {
                dmu[c * n + i] += seed * (-r * d * inv_var);
            }
            if let Some(dlv) = dlv.as_mut() {
                dlv[c * n + i] += seed * r * (half - half * d * d * inv_var);
            }
            if let Some(dw) = dw.as_mut() {
                // d nll / d w_i = -N_i / mix, valid even at w_i = 0.
                dw[c * n + i] += seed * (-(log_dens[i] - log_mix).exp());
            }
            if let Some(dy) = dy.as_mut() {
                dy[c] += seed * r * d * inv_var;
            }
        }
    }
    (dy, dw, dmu, dlv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn leaf_grad(tape: &mut Tape<f64>, dims: Vec<usize>, data: Vec<f64>) -> TensorId {
        tape.insert_leaf(dims, data, true).unwrap()
    }

    #[test]
    fn conv2d_ones_matches_hand_convolution() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3, 3, 1], vec![1.0; 9]).unwrap();
        let k = t.constant(vec![2, 2, 1, 1], vec![1.0; 4]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.dims(y), &[2, 2, 1]);
        assert_eq!(t.value(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = t.constant(vec![4, 3, 1], data.clone()).unwrap();
        let k = t.constant(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.value(y), data.as_slice());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_with_named_dimension() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3, 3, 2], vec![0.0; 18]).unwrap();
        let k = t.constant(vec![2, 2, 3, 1], vec![0.0; 12]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let err = t.conv2d(x, k, b, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input-channel"), "message: {msg}");
        assert!(msg.contains('3') && msg.contains('2'), "message: {msg}");
    }

    #[test]
    fn conv_transpose_1x1_input_expands_to_scaled_kernel() {
        let mut t = Tape::<f64>::new();
        let v = 2.5;
        let x = t.constant(vec![1, 1, 1], vec![v]).unwrap();
        let k = t
            .constant(vec![2, 2, 1, 1], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv_transpose2d(x, k, b, 2, 0).unwrap();
        assert_eq!(t.dims(y), &[2, 2, 1]);
        assert_eq!(t.value(y), &[v * 1.0, v * -2.0, v * 3.0, v * 0.5]);
    }

    #[test]
    fn conv_transpose_shape_formula() {
        // H' = (H - 1) * stride - 2 * padding + k
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 2, 1], vec![1.0; 4]).unwrap();
        let k = t.constant(vec![2, 2, 1, 1], vec![1.0; 4]).unwrap();
        let b = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.conv_transpose2d(x, k, b, 2, 0).unwrap();
        assert_eq!(t.dims(y), &[4, 4, 1]);
    }

    #[test]
    fn dense_matches_hand_matrix_multiply() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let w = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = t.dense(x, w, b).unwrap();
        assert_eq!(t.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn dense_identity_weights() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let w = t
            .constant(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap();
        let b = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = t.dense(x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let w = t.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        let b = t.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(t.dense(x, w, b).is_err());
    }

    #[test]
    fn relu_definition_at_sign_boundaries() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1], vec![0.0]).unwrap();
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y), &[0.5]);
    }

    #[test]
    fn exp_log_inverse_pair() {
        let mut t = Tape::<f64>::new();
        let vals = vec![0.1, 1.0, 3.7, 42.0];
        let x = t.constant(vec![4], vals.clone()).unwrap();
        let y = t.log(x).unwrap();
        let z = t.exp(y).unwrap();
        for (a, b) in t.value(z).iter().zip(&vals) {
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn log_rejects_non_positive_before_nan() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3], vec![1.0, 0.0, 2.0]).unwrap();
        let err = t.log(x).unwrap_err();
        assert!(matches!(err, TensorError::LogDomain { index: 1, .. }));
    }

    #[test]
    fn backward_sum_gives_all_ones() {
        let mut t = Tape::<f64>::new();
        let x = leaf_grad(&mut t, vec![2, 3], vec![0.3; 6]);
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::<f64>::new();
        let x = leaf_grad(&mut t, vec![2], vec![1.0, 2.0]);
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = leaf_grad(&mut t, vec![2], vec![1.0, 2.0]);
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { len: 2 }));
    }

    #[test]
    fn backward_resets_then_accumulates_by_default() {
        let mut t = Tape::<f64>::new();
        let x = leaf_grad(&mut t, vec![2], vec![1.0, 2.0]);
        let sq = t.square(x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
        t.backward_accumulate(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn clamp_passes_gradient_only_inside_range() {
        let mut t = Tape::<f64>::new();
        let x = leaf_grad(&mut t, vec![3], vec![-2.0, 0.5, 3.0]);
        let c = t.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(t.value(c), &[0.0, 0.5, 1.0]);
        let loss = t.sum(c).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut t = Tape::<f64>::new();
        let a = leaf_grad(&mut t, vec![2], vec![1.0, 2.0]);
        let b = leaf_grad(&mut t, vec![3], vec![3.0, 4.0, 5.0]);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = t.slice_last(c, 1, 4).unwrap();
        assert_eq!(t.value(s), &[2.0, 3.0, 4.0]);
        let loss = t.sum(s).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn slice_last_on_rank3_extracts_channels() {
        let mut t = Tape::<f64>::new();
        let x = t
            .constant(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let s = t.slice_last(x, 2, 3).unwrap();
        assert_eq!(t.dims(s), &[1, 2, 1]);
        assert_eq!(t.value(s), &[3.0, 6.0]);
    }

    #[test]
    fn square_normalize_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 3], vec![1.0, 1.0, 1.0, 2.0, 0.0, 0.0]).unwrap();
        let w = t.square_normalize(x).unwrap();
        let v = t.value(w);
        for i in 0..3 {
            assert_relative_eq!(v[i], 1.0 / 3.0, max_relative = 1e-12);
        }
        assert_eq!(&v[3..6], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn square_normalize_zero_fallback_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = leaf_grad(&mut t, vec![3], vec![0.0, 0.0, 0.0]);
        let w = t.square_normalize(x).unwrap();
        for &v in t.value(w) {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
        }
        let loss = t.sum(w).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gmm_nll_single_component_matches_gaussian() {
        // With one unit-weight component the mixture NLL must equal the
        // closed-form Gaussian NLL with the same mean and log variance.
        let mut t = Tape::<f64>::new();
        let y = t.constant(vec![2, 1, 1], vec![0.3, -0.7]).unwrap();
        let w = t.constant(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let mu = t.constant(vec![2, 1, 1], vec![0.1, 0.2]).unwrap();
        let lv = t.constant(vec![2, 1, 1], vec![0.4, -0.3]).unwrap();
        let nll = t.gaussian_mixture_nll(y, w, mu, lv).unwrap();
        let expected: f64 = [(0.3, 0.1, 0.4), (-0.7, 0.2, -0.3)]
            .iter()
            .map(|&(yv, m, l): &(f64, f64, f64)| {
                0.5 * ((2.0 * std::f64::consts::PI).ln() + l)
                    + 0.5 * (yv - m) * (yv - m) * (-l).exp()
            })
            .sum();
        assert_relative_eq!(t.scalar_value(nll), expected, max_relative = 1e-12);
    }

    #[test]
    fn finite_check_catches_overflow_and_names_the_op() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![1], vec![200.0]).unwrap();
        let err = t.exp(x).unwrap_err();
        match err {
            TensorError::NonFinite { op, .. } => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shared_subexpression_sums_gradients() {
        // loss = sum(x * x') where both factors are the same node: d/dx = 2x.
        let mut t = Tape::<f64>::new();
        let x = leaf_grad(&mut t, vec![2], vec![3.0, -1.5]);
        let y = t.mul(x, x).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, -3.0]);
    }
}
