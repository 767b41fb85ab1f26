//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Values are computed eagerly as operations are recorded; `backward`
//! replays the tape in reverse, accumulating adjoints into every node
//! that can reach a trainable parameter. A tape is rebuilt per training
//! sequence, which is the simplest correct form of backpropagation
//! through time for variable-length recurrences.
//!
//! Node handles are plain indices and are only meaningful for the tape
//! that issued them.

mod conv;
mod gradcheck;

pub use gradcheck::{grad_check, op_fd_suite, CheckScale, GradCheckReport, OpCheck};

use crate::linalg::{self, LinalgError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("non-finite input to {op} at flat index {index}")]
    NonFiniteInput { op: &'static str, index: usize },
    #[error("{op} produced a non-finite value (node {node}, flat index {index})")]
    NonFinite {
        op: &'static str,
        node: usize,
        index: usize,
    },
    #[error("{op} produced a non-finite gradient (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("stride must be positive, got ({0}, {1})")]
    ZeroStride(usize, usize),
    #[error("window ({wy}, {wx}) invalid for input ({h}, {w})")]
    BadWindow {
        wy: usize,
        wx: usize,
        h: usize,
        w: usize,
    },
    #[error("kernel ({kh}, {kw}) exceeds unpadded input ({h}, {w})")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
    },
    #[error("slice {start}..{end} out of range for length {len}")]
    SliceOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("gather index {index} out of range for {len} elements")]
    GatherOutOfRange { index: usize, len: usize },
    #[error("packed length {len} is not a triangular number")]
    NotTriangular { len: usize },
    #[error("{op} expects {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("jacobian shape {jac:?} inconsistent with input {input:?} and output {output:?}")]
    BadJacobian {
        jac: Vec<usize>,
        input: Vec<usize>,
        output: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Handle to a node on a [`Tape`]; valid only for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero-padding policy for `conv2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output spatial extent is `ceil(in / stride)`.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat(NodeId, NodeId),
    Slice {
        input: NodeId,
        start: usize,
    },
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    Sum(NodeId),
    SumSquares(NodeId),
    Relu(NodeId),
    /// Forward identical to `Relu`; adjoint deliberately wrong. Used by the
    /// gradient-check harness to prove it detects broken adjoints.
    FaultyRelu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    ChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    ResponseNorm {
        input: NodeId,
        target_mean: NodeId,
        log_var: NodeId,
        eps: f64,
    },
    SpdSolve {
        a: NodeId,
        b: NodeId,
        chol: Tensor,
    },
    LowerTriExpDiag {
        input: NodeId,
        dim: usize,
    },
    MapWithJacobian {
        input: NodeId,
        jacobian: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::MulElem(..) => "mul_elem",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Relu(..) => "relu",
            Op::FaultyRelu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Dropout { .. } => "dropout",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::MaxPool { .. } => "max_pool",
            Op::ResponseNorm { .. } => "response_norm",
            Op::SpdSolve { .. } => "spd_solve",
            Op::LowerTriExpDiag { .. } => "lower_triangular_expdiag",
            Op::MapWithJacobian { .. } => "map_with_jacobian",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of operations; inputs always precede their outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Per-node adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a trainable parameter; backward guarantees allocation.
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("parameter gradient allocated by backward")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        if let Some(index) = value.first_non_finite() {
            return Err(GraphError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
                index,
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        if let Some(index) = value.first_non_finite() {
            return Err(GraphError::NonFiniteInput {
                op: "constant",
                index,
            });
        }
        self.push(value, Op::Constant, false)
    }

    pub fn parameter(&mut self, init: Tensor) -> Result<NodeId> {
        if let Some(index) = init.first_non_finite() {
            return Err(GraphError::NonFiniteInput {
                op: "parameter",
                index,
            });
        }
        let id = self.push(init, Op::Parameter, true)?;
        self.params.push(id);
        Ok(id)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul_elem(self.value(b))?;
        self.push(v, Op::MulElem(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor), self.needs(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::Matmul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a), self.needs(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        self.push(v, Op::Reshape(a), self.needs(a))
    }

    /// Concatenates two vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [a, b] {
            if !self.value(id).is_vector() {
                return Err(GraphError::BadRank {
                    op: "concat",
                    expected: "vectors",
                    shape: self.value(id).shape().to_vec(),
                });
            }
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(
            Tensor::vector(data),
            Op::Concat(a, b),
            self.needs(a) || self.needs(b),
        )
    }

    /// Contiguous sub-vector `start..start+len` of a vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if !v.is_vector() {
            return Err(GraphError::BadRank {
                op: "slice",
                expected: "a vector",
                shape: v.shape().to_vec(),
            });
        }
        let end = start + len;
        if end > v.numel() || len == 0 {
            return Err(GraphError::SliceOutOfRange {
                start,
                end,
                len: v.numel(),
            });
        }
        let data = v.data()[start..end].to_vec();
        self.push(Tensor::vector(data), Op::Slice { input: a, start }, self.needs(a))
    }

    /// Picks flat-index elements from any tensor into a vector.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        for &i in indices {
            if i >= v.numel() {
                return Err(GraphError::GatherOutOfRange {
                    index: i,
                    len: v.numel(),
                });
            }
        }
        let data: Vec<f64> = indices.iter().map(|&i| v.data()[i]).collect();
        self.push(
            Tensor::vector(data),
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            self.needs(a),
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), self.needs(a))
    }

    /// Sum of squared elements, as a scalar node.
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        self.push(v, Op::SumSquares(a), self.needs(a))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.needs(a))
    }

    /// Same forward as [`Tape::relu`] with a deliberately broken adjoint.
    #[doc(hidden)]
    pub fn relu_with_broken_adjoint(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::FaultyRelu(a), self.needs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), self.needs(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a), self.needs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a), self.needs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), self.needs(a))
    }

    /// Inverted dropout: keeps each element with probability `keep_prob`
    /// and scales survivors by `1/keep_prob`. The mask is drawn at record
    /// time from the caller's RNG.
    pub fn dropout(
        &mut self,
        a: NodeId,
        keep_prob: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<NodeId> {
        assert!(
            keep_prob > 0.0 && keep_prob <= 1.0,
            "keep_prob must be in (0, 1]"
        );
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep_prob {
                    1.0 / keep_prob
                } else {
                    0.0
                }
            })
            .collect();
        let v = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(&mask)
                .map(|(x, m)| x * m)
                .collect(),
        )?;
        self.push(v, Op::Dropout { input: a, mask }, self.needs(a))
    }

    /// 2-D cross-correlation over an `H x W x Cin` input with an
    /// `kh x kw x Cin x Cout` kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        let (v, pad) = conv::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            self.needs(input) || self.needs(kernel),
        )
    }

    /// Adds a per-channel bias vector to an `H x W x C` tensor.
    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.shape().len() != 3 || !b.is_vector() || b.numel() != x.shape()[2] {
            return Err(GraphError::BadRank {
                op: "channel_bias",
                expected: "an HxWxC input and a C-length bias",
                shape: x.shape().to_vec(),
            });
        }
        let c = b.numel();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.push(
            v,
            Op::ChannelBias { input, bias },
            self.needs(input) || self.needs(bias),
        )
    }

    /// Per-channel max pooling; gradient routes to the argmax, ties to the
    /// lowest flat index.
    pub fn max_pool(
        &mut self,
        input: NodeId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let (v, argmax) = conv::max_pool_forward(self.value(input), window, stride)?;
        self.push(v, Op::MaxPool { input, argmax }, self.needs(input))
    }

    /// Normalizes all elements of `x` to the learned target statistics:
    /// `y = (x - mean(x)) / sqrt(max(var(x), eps)) * exp(log_var / 2) + target_mean`.
    ///
    /// Statistics are taken over the whole tensor for the current sample.
    /// The `eps` floor only engages for near-constant inputs, so for any
    /// ordinary activation the output statistics equal the targets exactly.
    pub fn response_norm(
        &mut self,
        x: NodeId,
        target_mean: NodeId,
        log_var: NodeId,
    ) -> Result<NodeId> {
        const EPS: f64 = 1e-6;
        for (id, name) in [(target_mean, "target_mean"), (log_var, "log_var")] {
            if !self.value(id).is_scalar() {
                return Err(GraphError::BadRank {
                    op: "response_norm",
                    expected: "scalar target_mean and log_var",
                    shape: self.value(id).shape().to_vec(),
                });
            }
            let _ = name;
        }
        let xv = self.value(x);
        let m = xv.mean();
        let s = xv.variance().max(EPS).sqrt();
        let gain = (self.value(log_var).item() / 2.0).exp();
        let bias = self.value(target_mean).item();
        let v = xv.map(|u| (u - m) / s * gain + bias);
        self.push(
            v,
            Op::ResponseNorm {
                input: x,
                target_mean,
                log_var,
                eps: EPS,
            },
            self.needs(x) || self.needs(target_mean) || self.needs(log_var),
        )
    }

    /// Solves `A X = B` for symmetric positive definite `A` (n x n) and
    /// matrix `B` (n x m). `A` is symmetrized before factorization so the
    /// adjoint is consistent with entrywise perturbations.
    pub fn spd_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if !av.is_matrix() || av.rows() != av.cols() {
            return Err(GraphError::BadRank {
                op: "spd_solve",
                expected: "a square matrix A",
                shape: av.shape().to_vec(),
            });
        }
        if !bv.is_matrix() || bv.rows() != av.rows() {
            return Err(GraphError::BadRank {
                op: "spd_solve",
                expected: "a right-hand side with matching rows",
                shape: bv.shape().to_vec(),
            });
        }
        let sym = av.symmetrize()?;
        let chol = linalg::cholesky(&sym)?;
        let x = linalg::chol_solve(&chol, bv)?;
        self.push(
            x,
            Op::SpdSolve { a, b, chol },
            self.needs(a) || self.needs(b),
        )
    }

    /// Builds an `n x n` lower-triangular matrix from a packed vector of
    /// length `n(n+1)/2` laid out row-major (L11, L21, L22, ...), with the
    /// diagonal entries exponentiated.
    pub fn lower_triangular_expdiag(&mut self, packed: NodeId) -> Result<NodeId> {
        let pv = self.value(packed);
        if !pv.is_vector() {
            return Err(GraphError::BadRank {
                op: "lower_triangular_expdiag",
                expected: "a packed vector",
                shape: pv.shape().to_vec(),
            });
        }
        let len = pv.numel();
        let dim = triangular_dim(len).ok_or(GraphError::NotTriangular { len })?;
        let mut out = vec![0.0; dim * dim];
        let mut k = 0;
        for i in 0..dim {
            for j in 0..=i {
                out[i * dim + j] = if i == j {
                    pv.data()[k].exp()
                } else {
                    pv.data()[k]
                };
                k += 1;
            }
        }
        let v = Tensor::new(vec![dim, dim], out)?;
        self.push(v, Op::LowerTriExpDiag { input: packed, dim }, self.needs(packed))
    }

    /// Records an externally computed differentiable map `value = f(x)`
    /// together with its Jacobian `d f / d x` at the evaluation point.
    /// The caller is responsible for their consistency.
    pub fn map_with_jacobian(
        &mut self,
        input: NodeId,
        value: Tensor,
        jacobian: Tensor,
    ) -> Result<NodeId> {
        let x = self.value(input);
        if !jacobian.is_matrix()
            || jacobian.cols() != x.numel()
            || jacobian.rows() != value.numel()
        {
            return Err(GraphError::BadJacobian {
                jac: jacobian.shape().to_vec(),
                input: x.shape().to_vec(),
                output: value.shape().to_vec(),
            });
        }
        let needs = self.needs(input);
        self.push(value, Op::MapWithJacobian { input, jacobian }, needs)
    }

    /// Reverse sweep from a scalar loss. Every node that can reach a
    /// parameter receives an adjoint of its own shape; parameters that do
    /// not influence the loss receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(GraphError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for &p in &self.params {
            if grads[p.0].is_none() {
                grads[p.0] = Some(Tensor::zeros(self.value(p).shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds `contribution` into the adjoint of `target` if it participates
    /// in differentiation.
    fn deposit(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        contribution: Tensor,
        op: &'static str,
    ) -> Result<()> {
        if !self.needs(target) {
            return Ok(());
        }
        if !contribution.all_finite() {
            return Err(GraphError::NonFiniteGradient {
                op,
                node: target.0,
            });
        }
        debug_assert_eq!(contribution.shape(), self.value(target).shape());
        match &mut grads[target.0] {
            Some(g) => g.axpy(1.0, &contribution),
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::Add(a, b) => {
                self.deposit(grads, *a, g.clone(), "add")?;
                self.deposit(grads, *b, g.clone(), "add")?;
            }
            Op::Sub(a, b) => {
                self.deposit(grads, *a, g.clone(), "sub")?;
                self.deposit(grads, *b, g.scale(-1.0), "sub")?;
            }
            Op::MulElem(a, b) => {
                self.deposit(grads, *a, g.mul_elem(self.value(*b))?, "mul_elem")?;
                self.deposit(grads, *b, g.mul_elem(self.value(*a))?, "mul_elem")?;
            }
            Op::Scale(a, factor) => {
                self.deposit(grads, *a, g.scale(*factor), "scale")?;
            }
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if bv.is_matrix() {
                    // C = A B: dA = G B^T, dB = A^T G
                    self.deposit(grads, *a, g.matmul(&bv.transpose()?)?, "matmul")?;
                    self.deposit(grads, *b, av.transpose()?.matmul(g)?, "matmul")?;
                } else {
                    // y = A x: dA = g (x)^T, dx = A^T g
                    self.deposit(grads, *a, g.outer(bv)?, "matmul")?;
                    self.deposit(grads, *b, av.transpose()?.matmul(g)?, "matmul")?;
                }
            }
            Op::Transpose(a) => {
                self.deposit(grads, *a, g.transpose()?, "transpose")?;
            }
            Op::Reshape(a) => {
                let back = g.reshaped(self.value(*a).shape().to_vec())?;
                self.deposit(grads, *a, back, "reshape")?;
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                let ga = Tensor::vector(g.data()[..na].to_vec());
                let gb = Tensor::vector(g.data()[na..].to_vec());
                self.deposit(grads, *a, ga, "concat")?;
                self.deposit(grads, *b, gb, "concat")?;
            }
            Op::Slice { input, start } => {
                let mut back = Tensor::zeros(self.value(*input).shape());
                back.data_mut()[*start..*start + g.numel()].copy_from_slice(g.data());
                self.deposit(grads, *input, back, "slice")?;
            }
            Op::Gather { input, indices } => {
                let mut back = Tensor::zeros(self.value(*input).shape());
                for (k, &i) in indices.iter().enumerate() {
                    back.data_mut()[i] += g.data()[k];
                }
                self.deposit(grads, *input, back, "gather")?;
            }
            Op::Sum(a) => {
                let back = Tensor::filled(self.value(*a).shape(), g.item());
                self.deposit(grads, *a, back, "sum")?;
            }
            Op::SumSquares(a) => {
                let back = self.value(*a).scale(2.0 * g.item());
                self.deposit(grads, *a, back, "sum_squares")?;
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                let back = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gg)| if x > 0.0 { gg } else { 0.0 })
                        .collect(),
                )?;
                self.deposit(grads, *a, back, "relu")?;
            }
            Op::FaultyRelu(a) => {
                // passes the adjoint through unmasked, which is wrong
                self.deposit(grads, *a, g.clone(), "relu")?;
            }
            Op::Exp(a) => {
                self.deposit(grads, *a, g.mul_elem(out)?, "exp")?;
            }
            Op::Ln(a) => {
                let back = g.mul_elem(&self.value(*a).map(|x| 1.0 / x))?;
                self.deposit(grads, *a, back, "ln")?;
            }
            Op::Sigmoid(a) => {
                let back = g.mul_elem(&out.map(|y| y * (1.0 - y)))?;
                self.deposit(grads, *a, back, "sigmoid")?;
            }
            Op::Tanh(a) => {
                let back = g.mul_elem(&out.map(|y| 1.0 - y * y))?;
                self.deposit(grads, *a, back, "tanh")?;
            }
            Op::Dropout { input, mask } => {
                let back = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(gg, m)| gg * m).collect(),
                )?;
                self.deposit(grads, *input, back, "dropout")?;
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (gi, gk) = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *pad,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(gi) = gi {
                    self.deposit(grads, *input, gi, "conv2d")?;
                }
                if let Some(gk) = gk {
                    self.deposit(grads, *kernel, gk, "conv2d")?;
                }
            }
            Op::ChannelBias { input, bias } => {
                self.deposit(grads, *input, g.clone(), "channel_bias")?;
                let c = self.value(*bias).numel();
                let mut gb = vec![0.0; c];
                for (i, &gg) in g.data().iter().enumerate() {
                    gb[i % c] += gg;
                }
                self.deposit(grads, *bias, Tensor::vector(gb), "channel_bias")?;
            }
            Op::MaxPool { input, argmax } => {
                let mut back = Tensor::zeros(self.value(*input).shape());
                for (k, &src) in argmax.iter().enumerate() {
                    back.data_mut()[src] += g.data()[k];
                }
                self.deposit(grads, *input, back, "max_pool")?;
            }
            Op::ResponseNorm {
                input,
                target_mean,
                log_var,
                eps,
            } => {
                let xv = self.value(*input);
                let n = xv.numel() as f64;
                let m = xv.mean();
                let var = xv.variance();
                let floored = var.max(*eps);
                let s = floored.sqrt();
                let gain = (self.value(*log_var).item() / 2.0).exp();
                let xhat = xv.map(|u| (u - m) / s);
                let g_mean = g.mean();
                let gx_dot = g.dot(&xhat)? / n;
                let back_x = if var > *eps {
                    Tensor::new(
                        xv.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(xhat.data())
                            .map(|(&gg, &xh)| gain / s * (gg - g_mean - xh * gx_dot))
                            .collect(),
                    )?
                } else {
                    // the variance floor is active: s is locally constant
                    g.map(|gg| gain / s * (gg - g_mean))
                };
                self.deposit(grads, *input, back_x, "response_norm")?;
                self.deposit(grads, *target_mean, Tensor::scalar(g.sum()), "response_norm")?;
                let dlv = 0.5 * gain * g.dot(&xhat)?;
                self.deposit(grads, *log_var, Tensor::scalar(dlv), "response_norm")?;
            }
            Op::SpdSolve { a, b, chol } => {
                // X = S^{-1} B with S = sym(A):
                //   dB = S^{-1} G
                //   dA = sym(-S^{-1} G X^T)
                let w = linalg::chol_solve(chol, g)?;
                if self.needs(*a) {
                    let ga = w.matmul(&out.transpose()?)?.scale(-1.0).symmetrize()?;
                    self.deposit(grads, *a, ga, "spd_solve")?;
                }
                self.deposit(grads, *b, w, "spd_solve")?;
            }
            Op::LowerTriExpDiag { input, dim } => {
                let mut back = vec![0.0; self.value(*input).numel()];
                let mut k = 0;
                for i in 0..*dim {
                    for j in 0..=i {
                        back[k] = if i == j {
                            // diagonal was exponentiated; chain through exp
                            g.data()[i * dim + j] * out.data()[i * dim + j]
                        } else {
                            g.data()[i * dim + j]
                        };
                        k += 1;
                    }
                }
                self.deposit(grads, *input, Tensor::vector(back), "lower_triangular_expdiag")?;
            }
            Op::MapWithJacobian { input, jacobian } => {
                let back = jacobian.transpose()?.matmul(g)?;
                let back = back.reshaped(self.value(*input).shape().to_vec())?;
                self.deposit(grads, *input, back, "map_with_jacobian")?;
            }
        }
        Ok(())
    }
}

/// Inverse triangular number: returns `n` if `len == n(n+1)/2`.
pub fn triangular_dim(len: usize) -> Option<usize> {
    let mut n = 0usize;
    let mut total = 0usize;
    while total < len {
        n += 1;
        total += n;
    }
    (total == len && len > 0).then_some(n)
}

/// Flat positions of the diagonal entries within the packed row-major
/// lower-triangular layout of an `n x n` matrix.
pub fn packed_diag_indices(n: usize) -> Vec<usize> {
    (0..n).map(|k| k * (k + 3) / 2).collect()
}
