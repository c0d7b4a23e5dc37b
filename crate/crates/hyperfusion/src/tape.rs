//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward computation as an append-only list of
//! nodes; node ids are topologically ordered by construction, so the
//! backward pass is a single reverse sweep that accumulates exactly one
//! gradient per reachable node. A tape belongs to one training step and is
//! not shared across threads.

use crate::kernels;
use crate::rng::{self, Prng};
use crate::tensor::{Tensor, TensorError};

pub type NodeId = usize;

/// Floor used when taking logs of probabilities.
pub const LN_CLAMP: f64 = 1e-12;

/// Train/eval switch for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBiasRows,
    AddBiasChannels,
    ChannelAffine,
    Matmul,
    MatmulTb,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    BatchedLinear,
    BatchedConv2d {
        stride: usize,
        pad: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
    },
    Relu,
    PRelu,
    MaxPool2d {
        argmax: Vec<usize>,
    },
    GlobalAvgPool,
    BatchNorm {
        train: bool,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
    Softmax,
    LnClamped,
    MulConst(Tensor),
    Sum,
    Mean,
    Reshape,
    ConcatCols,
    Dropout {
        mask: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBiasRows => "add_bias_rows",
            Op::AddBiasChannels => "add_bias_channels",
            Op::ChannelAffine => "channel_affine",
            Op::Matmul => "matmul",
            Op::MatmulTb => "matmul_tb",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchedLinear => "batched_linear",
            Op::BatchedConv2d { .. } => "batched_conv2d",
            Op::Relu => "relu",
            Op::PRelu => "prelu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::Softmax => "softmax",
            Op::LnClamped => "ln_clamped",
            Op::MulConst(_) => "mul_const",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape => "reshape",
            Op::ConcatCols => "concat_cols",
            Op::Dropout { .. } => "dropout",
        }
    }
}

/// Differentiable operation names exposed by the tape, one entry per op.
pub fn op_catalog() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "scale",
        "add_bias_rows",
        "add_bias_channels",
        "channel_affine",
        "matmul",
        "matmul_tb",
        "conv2d",
        "batched_linear",
        "batched_conv2d",
        "relu",
        "prelu",
        "max_pool2d",
        "global_avg_pool",
        "batch_norm2d",
        "softmax",
        "ln_clamped",
        "mul_const",
        "sum",
        "mean",
        "reshape",
        "concat_cols",
        "dropout",
    ]
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// One recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    mode: Option<Mode>,
    dropout_rng: Option<Prng>,
    /// Smallest distance to a non-differentiable point observed while
    /// recording (relu/prelu kinks, pooling ties). Consumed by grad_check.
    kink_margin: f64,
    param_bindings: Vec<(String, NodeId)>,
}

impl Tape {
    /// A tape with no mode set; mode-dependent ops will error.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode: None,
            dropout_rng: None,
            kink_margin: f64::INFINITY,
            param_bindings: Vec::new(),
        }
    }

    /// Training-mode tape; `seed` drives dropout masks.
    pub fn train(seed: u64) -> Self {
        let mut t = Tape::new();
        t.mode = Some(Mode::Train);
        t.dropout_rng = Some(rng::seeded(seed));
        t
    }

    pub fn eval() -> Self {
        let mut t = Tape::new();
        t.mode = Some(Mode::Eval);
        t
    }

    pub fn mode(&self) -> Option<Mode> {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last backward pass with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Named parameter leaves registered on this tape, in creation order.
    pub fn param_bindings(&self) -> &[(String, NodeId)] {
        &self.param_bindings
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value });
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Leaf bound to a parameter name so its gradient can be collected
    /// after backward.
    pub fn param_leaf(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.param_bindings.push((name.to_string(), id));
        id
    }

    /// Node id a parameter name was bound to, if any.
    pub fn bound_node(&self, name: &str) -> Option<NodeId> {
        self.param_bindings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape_of(a).to_vec(),
            rhs: self.shape_of(b).to_vec(),
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape_of(a), data).expect("add shape");
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape_of(a), data).expect("sub shape");
        Ok(self.push(Op::Sub, vec![a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape_of(a), data).expect("mul shape");
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|x| c * x).collect();
        let value = Tensor::new(self.shape_of(a), data).expect("scale shape");
        self.push(Op::Scale(c), vec![a], value)
    }

    /// Elementwise product with a constant tensor (no gradient for the constant).
    pub fn mul_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId, TensorError> {
        if self.shape_of(a) != c.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape_of(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape_of(a), data).expect("mul_const shape");
        Ok(self.push(Op::MulConst(c.clone()), vec![a], value))
    }

    // ---- broadcasts -----------------------------------------------------

    /// x: [n, f] plus bias [f], broadcast over rows.
    pub fn add_bias_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xs, bs) = (self.shape_of(x), self.shape_of(bias));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(self.mismatch("add_bias_rows", x, bias));
        }
        let (n, f) = (xs[0], xs[1]);
        let mut data = self.nodes[x].value.data().to_vec();
        let b = self.nodes[bias].value.data();
        for i in 0..n {
            for j in 0..f {
                data[i * f + j] += b[j];
            }
        }
        let value = Tensor::new(&[n, f], data).expect("add_bias_rows shape");
        Ok(self.push(Op::AddBiasRows, vec![x, bias], value))
    }

    /// x: [n, c, h, w] plus bias [c], broadcast per channel.
    pub fn add_bias_channels(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xs, bs) = (
            self.shape_of(x).to_vec(),
            self.shape_of(bias).to_vec(),
        );
        if xs.len() != 4 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(self.mismatch("add_bias_channels", x, bias));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut data = self.nodes[x].value.data().to_vec();
        let b = self.nodes[bias].value.data();
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for v in &mut data[base..base + h * w] {
                    *v += b[ch];
                }
            }
        }
        let value = Tensor::new(&xs, data).expect("add_bias_channels shape");
        Ok(self.push(Op::AddBiasChannels, vec![x, bias], value))
    }

    /// Per-sample, per-channel affine: y[n,c,h,w] = gamma[n,c]*x[n,c,h,w] + beta[n,c].
    pub fn channel_affine(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape_of(x).to_vec();
        let gs = self.shape_of(gamma).to_vec();
        if xs.len() != 4 || gs.len() != 2 || gs[0] != xs[0] || gs[1] != xs[1] {
            return Err(self.mismatch("channel_affine", x, gamma));
        }
        if self.shape_of(beta) != gs.as_slice() {
            return Err(self.mismatch("channel_affine", gamma, beta));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut data = self.nodes[x].value.data().to_vec();
        let g = self.nodes[gamma].value.data();
        let b = self.nodes[beta].value.data();
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let (gv, bv) = (g[img * c + ch], b[img * c + ch]);
                for v in &mut data[base..base + h * w] {
                    *v = gv * *v + bv;
                }
            }
        }
        let value = Tensor::new(&xs, data).expect("channel_affine shape");
        Ok(self.push(Op::ChannelAffine, vec![x, gamma, beta], value))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(&[m, n], out).expect("matmul shape");
        Ok(self.push(Op::Matmul, vec![a, b], value))
    }

    /// a: [m, k] times b: [n, k] transposed, giving [m, n].
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.mismatch("matmul_tb", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_tb(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(&[m, n], out).expect("matmul_tb shape");
        Ok(self.push(Op::MatmulTb, vec![a, b], value))
    }

    /// x: [n, c_in, h, w] convolved with kernel [c_out, c_in, kh, kw].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape_of(x).to_vec();
        let ks = self.shape_of(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(self.mismatch("conv2d", x, kernel));
        }
        if stride == 0 || xs[2] + 2 * pad < ks[2] || xs[3] + 2 * pad < ks[3] {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {ks:?} does not fit input {xs:?} with pad {pad}"),
            });
        }
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        let ho = kernels::conv_out_dim(h, kh, stride, pad);
        let wo = kernels::conv_out_dim(w, kw, stride, pad);
        let mut out = vec![0.0; n * c_out * ho * wo];
        kernels::conv2d(
            self.nodes[x].value.data(),
            self.nodes[kernel].value.data(),
            &mut out,
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
        );
        let value = Tensor::new(&[n, c_out, ho, wo], out).expect("conv2d shape");
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, kernel], value))
    }

    /// Per-sample linear map: x[i] is transformed by the i-th generated
    /// weight block. w: [n, out*in] (each row reshapes row-major to
    /// [out, in]), b: [n, out].
    pub fn batched_linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 2 {
            return Err(self.mismatch("batched_linear", x, w));
        }
        let (n, f_in) = (xs[0], xs[1]);
        let f_out = bs[1];
        if ws[0] != n || bs[0] != n || ws[1] != f_out * f_in {
            return Err(self.mismatch("batched_linear", x, w));
        }
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = vec![0.0; n * f_out];
        for i in 0..n {
            let x_row = &xv[i * f_in..(i + 1) * f_in];
            let w_row = &wv[i * f_out * f_in..(i + 1) * f_out * f_in];
            for o in 0..f_out {
                let w_block = &w_row[o * f_in..(o + 1) * f_in];
                let mut acc = bv[i * f_out + o];
                for (xj, wj) in x_row.iter().zip(w_block.iter()) {
                    acc += xj * wj;
                }
                out[i * f_out + o] = acc;
            }
        }
        let value = Tensor::new(&[n, f_out], out).expect("batched_linear shape");
        Ok(self.push(Op::BatchedLinear, vec![x, w, b], value))
    }

    /// Per-sample convolution: sample i is convolved with its own kernel.
    /// w: [n, c_out*c_in*kh*kw] (row reshapes to [c_out, c_in, kh, kw]),
    /// b: [n, c_out].
    #[allow(clippy::too_many_arguments)]
    pub fn batched_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 4 || ws.len() != 2 || bs.len() != 2 {
            return Err(self.mismatch("batched_conv2d", x, w));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        if ws[0] != n || bs[0] != n || ws[1] != c_out * c_in * kh * kw || bs[1] != c_out {
            return Err(self.mismatch("batched_conv2d", w, b));
        }
        let ho = kernels::conv_out_dim(h, kh, stride, pad);
        let wo = kernels::conv_out_dim(wd, kw, stride, pad);
        let xv = self.nodes[x].value.data();
        let wv = self.nodes[w].value.data();
        let bv = self.nodes[b].value.data();
        let per_in = c_in * h * wd;
        let per_out = c_out * ho * wo;
        let per_k = c_out * c_in * kh * kw;
        let mut out = vec![0.0; n * per_out];
        for i in 0..n {
            kernels::conv2d(
                &xv[i * per_in..(i + 1) * per_in],
                &wv[i * per_k..(i + 1) * per_k],
                &mut out[i * per_out..(i + 1) * per_out],
                1,
                c_in,
                h,
                wd,
                c_out,
                kh,
                kw,
                stride,
                pad,
            );
            for co in 0..c_out {
                let base = i * per_out + co * ho * wo;
                let bias = bv[i * c_out + co];
                for v in &mut out[base..base + ho * wo] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::new(&[n, c_out, ho, wo], out).expect("batched_conv2d shape");
        Ok(self.push(
            Op::BatchedConv2d {
                stride,
                pad,
                c_out,
                kh,
                kw,
            },
            vec![x, w, b],
        value))
    }

    // ---- activations and pooling ---------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut margin = self.kink_margin;
        let data: Vec<f64> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| {
                margin = margin.min(v.abs());
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        self.kink_margin = margin;
        let value = Tensor::new(self.shape_of(x), data).expect("relu shape");
        self.push(Op::Relu, vec![x], value)
    }

    /// Parametric ReLU with a single trainable slope (shape [1]).
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId, TensorError> {
        if self.shape_of(slope) != [1] {
            return Err(TensorError::RankMismatch {
                op: "prelu",
                expected: 1,
                shape: self.shape_of(slope).to_vec(),
            });
        }
        let a = self.nodes[slope].value.item();
        let mut margin = self.kink_margin;
        let data: Vec<f64> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| {
                margin = margin.min(v.abs());
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            })
            .collect();
        self.kink_margin = margin;
        let value = Tensor::new(self.shape_of(x), data).expect("prelu shape");
        Ok(self.push(Op::PRelu, vec![x, slope], value))
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId, TensorError> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "max_pool2d",
                expected: 4,
                shape: xs,
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                msg: format!("pool k={k} stride={stride} does not fit input {xs:?}"),
            });
        }
        let ho = kernels::conv_out_dim(h, k, stride, 0);
        let wo = kernels::conv_out_dim(w, k, stride, 0);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        let margin = kernels::max_pool2d(
            self.nodes[x].value.data(),
            &mut out,
            &mut argmax,
            n,
            c,
            h,
            w,
            k,
            stride,
        );
        self.kink_margin = self.kink_margin.min(margin);
        let value = Tensor::new(&[n, c, ho, wo], out).expect("max_pool2d shape");
        Ok(self.push(Op::MaxPool2d { argmax }, vec![x], value))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "global_avg_pool",
                expected: 4,
                shape: xs,
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            let base = i * h * w;
            out[i] = xv[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        let value = Tensor::new(&[n, c], out).expect("gap shape");
        Ok(self.push(Op::GlobalAvgPool, vec![x], value))
    }

    /// Batch normalization over [n, c, h, w] with per-channel gamma/beta.
    ///
    /// In train mode normalizes with batch statistics and returns the
    /// updated running statistics for the caller to commit; in eval mode
    /// it is a pure affine map using `running`.
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &BnStats,
        eps: f64,
        momentum: f64,
    ) -> Result<(NodeId, Option<BnStats>), TensorError> {
        let mode = self.mode.ok_or(TensorError::ModeUnset { op: "batch_norm2d" })?;
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch {
                op: "batch_norm2d",
                expected: 4,
                shape: xs,
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape_of(gamma) != [c] || self.shape_of(beta) != [c] {
            return Err(self.mismatch("batch_norm2d", x, gamma));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm2d",
                msg: format!("running stats have {} channels, input has {c}", running.mean.len()),
            });
        }
        let m = (n * h * w) as f64;
        let xv = self.nodes[x].value.data();
        let gv = self.nodes[gamma].value.data().to_vec();
        let bv = self.nodes[beta].value.data().to_vec();

        let (mean, var, update) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for img in 0..n {
                        let base = (img * c + ch) * h * w;
                        s += xv[base..base + h * w].iter().sum::<f64>();
                    }
                    mean[ch] = s / m;
                    let mut v = 0.0;
                    for img in 0..n {
                        let base = (img * c + ch) * h * w;
                        for &val in &xv[base..base + h * w] {
                            let d = val - mean[ch];
                            v += d * d;
                        }
                    }
                    var[ch] = v / m;
                }
                // Running variance uses the unbiased estimate, like the usual
                // framework convention; normalization uses the biased one.
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let new = BnStats {
                    mean: running
                        .mean
                        .iter()
                        .zip(&mean)
                        .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                        .collect(),
                    var: running
                        .var
                        .iter()
                        .zip(&var)
                        .map(|(r, b)| (1.0 - momentum) * r + momentum * b * unbias)
                        .collect(),
                };
                (mean, var, Some(new))
            }
            Mode::Eval => (running.mean.clone(), running.var.clone(), None),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for i in 0..h * w {
                    out[base + i] = gv[ch] * (xv[base + i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out).expect("bn shape");
        let id = self.push(
            Op::BatchNorm {
                train: mode == Mode::Train,
                inv_std,
                mean,
            },
            vec![x, gamma, beta],
            value,
        );
        Ok((id, update))
    }

    // ---- reductions, shape, misc ----------------------------------------

    /// Row-wise softmax of a [n, c] tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "softmax",
                expected: 2,
                shape: xs,
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let value = Tensor::new(&xs, out).expect("softmax shape");
        Ok(self.push(Op::Softmax, vec![x], value))
    }

    /// Elementwise ln(max(x, 1e-12)).
    pub fn ln_clamped(&mut self, x: NodeId) -> NodeId {
        let mut margin = self.kink_margin;
        let data: Vec<f64> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| {
                margin = margin.min((v - LN_CLAMP).abs());
                v.max(LN_CLAMP).ln()
            })
            .collect();
        self.kink_margin = margin;
        let value = Tensor::new(self.shape_of(x), data).expect("ln shape");
        self.push(Op::LnClamped, vec![x], value)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.data();
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean, vec![x], Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.nodes[x].value.reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Concatenate two [n, f1] and [n, f2] tensors along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (n, f1, f2) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let mut out = Vec::with_capacity(n * (f1 + f2));
        for i in 0..n {
            out.extend_from_slice(&av[i * f1..(i + 1) * f1]);
            out.extend_from_slice(&bv[i * f2..(i + 1) * f2]);
        }
        let value = Tensor::new(&[n, f1 + f2], out).expect("concat shape");
        Ok(self.push(Op::ConcatCols, vec![a, b], value))
    }

    /// Inverted dropout. Identity in eval mode (returns the input node);
    /// in train mode keeps each element with probability 1-rate and scales
    /// by 1/(1-rate).
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, TensorError> {
        let mode = self.mode.ok_or(TensorError::ModeUnset { op: "dropout" })?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train => {
                if rate == 0.0 {
                    return Ok(x);
                }
                let rng = self
                    .dropout_rng
                    .as_mut()
                    .ok_or(TensorError::ModeUnset { op: "dropout" })?;
                let keep = 1.0 - rate;
                let n = self.nodes[x].value.numel();
                let mask: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng::uniform(rng, 0.0, 1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let data: Vec<f64> = self.nodes[x]
                    .value
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(v, m)| v * m)
                    .collect();
                let value = Tensor::new(self.shape_of(x), data).expect("dropout shape");
                Ok(self.push(Op::Dropout { mask }, vec![x], value))
            }
        }
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// the loss depends on; parameters reached through generated weights get
    /// theirs via the chain rule like any other node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss].value.shape().to_vec(),
            });
        }
        if !self.nodes[loss].value.item().is_finite() {
            return Err(TensorError::NanInBackward {
                node: loss,
                op: self.nodes[loss].op.name(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !g.is_finite() {
                return Err(TensorError::NanInBackward {
                    node: id,
                    op: self.nodes[id].op.name(),
                });
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], add: &[f64]) {
        match &mut grads[id] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(add) {
                    *a += b;
                }
            }
            None => {
                grads[id] = Some(Tensor::new(shape, add.to_vec()).expect("grad shape"));
            }
        }
    }

    fn backward_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for &i in ins.iter().take(2) {
                    Self::accumulate(grads, i, g.shape(), gv);
                }
            }
            Op::Sub => {
                Self::accumulate(grads, ins[0], g.shape(), gv);
                let neg: Vec<f64> = gv.iter().map(|v| -v).collect();
                Self::accumulate(grads, ins[1], g.shape(), &neg);
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                let da: Vec<f64> = gv
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = gv
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                Self::accumulate(grads, a, g.shape(), &da);
                Self::accumulate(grads, b, g.shape(), &db);
            }
            Op::Scale(c) => {
                let da: Vec<f64> = gv.iter().map(|v| c * v).collect();
                Self::accumulate(grads, ins[0], g.shape(), &da);
            }
            Op::MulConst(c) => {
                let da: Vec<f64> = gv.iter().zip(c.data()).map(|(g, v)| g * v).collect();
                Self::accumulate(grads, ins[0], g.shape(), &da);
            }
            Op::AddBiasRows => {
                let (n, f) = (g.shape()[0], g.shape()[1]);
                Self::accumulate(grads, ins[0], g.shape(), gv);
                let mut db = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        db[j] += gv[i * f + j];
                    }
                }
                Self::accumulate(grads, ins[1], &[f], &db);
            }
            Op::AddBiasChannels => {
                let s = g.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                Self::accumulate(grads, ins[0], s, gv);
                let mut db = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        db[ch] += gv[base..base + hw].iter().sum::<f64>();
                    }
                }
                Self::accumulate(grads, ins[1], &[c], &db);
            }
            Op::ChannelAffine => {
                let s = g.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = self.nodes[ins[0]].value.data();
                let gam = self.nodes[ins[1]].value.data();
                let mut dx = vec![0.0; gv.len()];
                let mut dgam = vec![0.0; n * c];
                let mut dbeta = vec![0.0; n * c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        let gvch = gam[img * c + ch];
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for i in 0..hw {
                            let gg = gv[base + i];
                            dx[base + i] = gg * gvch;
                            sg += gg;
                            sgx += gg * xv[base + i];
                        }
                        dgam[img * c + ch] = sgx;
                        dbeta[img * c + ch] = sg;
                    }
                }
                Self::accumulate(grads, ins[0], s, &dx);
                Self::accumulate(grads, ins[1], &[n, c], &dgam);
                Self::accumulate(grads, ins[2], &[n, c], &dbeta);
            }
            Op::Matmul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[1];
                // da = g * b^T
                let mut da = vec![0.0; m * k];
                kernels::matmul_tb(gv, self.nodes[b].value.data(), &mut da, m, n, k);
                // db = a^T * g
                let mut db = vec![0.0; k * n];
                matmul_ta(self.nodes[a].value.data(), gv, &mut db, m, k, n);
                Self::accumulate(grads, a, &[m, k], &da);
                Self::accumulate(grads, b, &[k, n], &db);
            }
            Op::MatmulTb => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[0];
                // da = g * b
                let mut da = vec![0.0; m * k];
                kernels::matmul(gv, self.nodes[b].value.data(), &mut da, m, n, k);
                // db = g^T * a
                let mut db = vec![0.0; n * k];
                matmul_ta(gv, self.nodes[a].value.data(), &mut db, m, n, k);
                Self::accumulate(grads, a, &[m, k], &da);
                Self::accumulate(grads, b, &[n, k], &db);
            }
            Op::Conv2d { stride, pad } => {
                let (x, kn) = (ins[0], ins[1]);
                let xs = self.nodes[x].value.shape().to_vec();
                let ks = self.nodes[kn].value.shape().to_vec();
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                let mut dk = vec![0.0; self.nodes[kn].value.numel()];
                kernels::conv2d_backward(
                    self.nodes[x].value.data(),
                    self.nodes[kn].value.data(),
                    gv,
                    &mut dx,
                    &mut dk,
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    ks[0],
                    ks[2],
                    ks[3],
                    *stride,
                    *pad,
                );
                Self::accumulate(grads, x, &xs, &dx);
                Self::accumulate(grads, kn, &ks, &dk);
            }
            Op::BatchedLinear => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let xs = self.nodes[x].value.shape();
                let (n, f_in) = (xs[0], xs[1]);
                let f_out = self.nodes[b].value.shape()[1];
                let xv = self.nodes[x].value.data();
                let wv = self.nodes[w].value.data();
                let mut dx = vec![0.0; n * f_in];
                let mut dw = vec![0.0; n * f_out * f_in];
                for i in 0..n {
                    for o in 0..f_out {
                        let gg = gv[i * f_out + o];
                        if gg == 0.0 {
                            continue;
                        }
                        let w_block = &wv[(i * f_out + o) * f_in..(i * f_out + o + 1) * f_in];
                        let dw_block = &mut dw[(i * f_out + o) * f_in..(i * f_out + o + 1) * f_in];
                        let x_row = &xv[i * f_in..(i + 1) * f_in];
                        let dx_row = &mut dx[i * f_in..(i + 1) * f_in];
                        for j in 0..f_in {
                            dx_row[j] += gg * w_block[j];
                            dw_block[j] += gg * x_row[j];
                        }
                    }
                }
                Self::accumulate(grads, x, &[n, f_in], &dx);
                Self::accumulate(grads, w, &[n, f_out * f_in], &dw);
                Self::accumulate(grads, b, &[n, f_out], gv);
            }
            Op::BatchedConv2d {
                stride,
                pad,
                c_out,
                kh,
                kw,
            } => {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let xs = self.nodes[x].value.shape().to_vec();
                let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ho = kernels::conv_out_dim(h, *kh, *stride, *pad);
                let wo = kernels::conv_out_dim(wd, *kw, *stride, *pad);
                let per_in = c_in * h * wd;
                let per_out = c_out * ho * wo;
                let per_k = c_out * c_in * kh * kw;
                let xv = self.nodes[x].value.data();
                let wv = self.nodes[w].value.data();
                let mut dx = vec![0.0; n * per_in];
                let mut dw = vec![0.0; n * per_k];
                let mut db = vec![0.0; n * c_out];
                for i in 0..n {
                    kernels::conv2d_backward(
                        &xv[i * per_in..(i + 1) * per_in],
                        &wv[i * per_k..(i + 1) * per_k],
                        &gv[i * per_out..(i + 1) * per_out],
                        &mut dx[i * per_in..(i + 1) * per_in],
                        &mut dw[i * per_k..(i + 1) * per_k],
                        1,
                        c_in,
                        h,
                        wd,
                        *c_out,
                        *kh,
                        *kw,
                        *stride,
                        *pad,
                    );
                    for co in 0..*c_out {
                        let base = i * per_out + co * ho * wo;
                        db[i * c_out + co] = gv[base..base + ho * wo].iter().sum::<f64>();
                    }
                }
                Self::accumulate(grads, x, &xs, &dx);
                Self::accumulate(grads, w, &[n, per_k], &dw);
                Self::accumulate(grads, b, &[n, *c_out], &db);
            }
            Op::Relu => {
                let xv = self.nodes[ins[0]].value.data();
                let dx: Vec<f64> = gv
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                Self::accumulate(grads, ins[0], g.shape(), &dx);
            }
            Op::PRelu => {
                let xv = self.nodes[ins[0]].value.data();
                let a = self.nodes[ins[1]].value.item();
                let mut da = 0.0;
                let dx: Vec<f64> = gv
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else {
                            da += g * x;
                            g * a
                        }
                    })
                    .collect();
                Self::accumulate(grads, ins[0], g.shape(), &dx);
                Self::accumulate(grads, ins[1], &[1], &[da]);
            }
            Op::MaxPool2d { argmax } => {
                let mut dx = vec![0.0; self.nodes[ins[0]].value.numel()];
                for (i, &src) in argmax.iter().enumerate() {
                    dx[src] += gv[i];
                }
                Self::accumulate(grads, ins[0], self.nodes[ins[0]].value.shape(), &dx);
            }
            Op::GlobalAvgPool => {
                let xs = self.nodes[ins[0]].value.shape().to_vec();
                let hw = xs[2] * xs[3];
                let mut dx = vec![0.0; self.nodes[ins[0]].value.numel()];
                for i in 0..xs[0] * xs[1] {
                    let gg = gv[i] / hw as f64;
                    for v in &mut dx[i * hw..(i + 1) * hw] {
                        *v = gg;
                    }
                }
                Self::accumulate(grads, ins[0], &xs, &dx);
            }
            Op::BatchNorm {
                train,
                inv_std,
                mean,
            } => {
                let (x, gamma, _beta) = (ins[0], ins[1], ins[2]);
                let xs = self.nodes[x].value.shape().to_vec();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = (n * hw) as f64;
                let xv = self.nodes[x].value.data();
                let gam = self.nodes[gamma].value.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgam = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let istd = inv_std[ch];
                    let mu = mean[ch];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for img in 0..n {
                        let base = (img * c + ch) * hw;
                        for i in 0..hw {
                            let gg = gv[base + i];
                            sum_g += gg;
                            sum_gx += gg * (xv[base + i] - mu) * istd;
                        }
                    }
                    dgam[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    for img in 0..n {
                        let base = (img * c + ch) * hw;
                        for i in 0..hw {
                            let xhat = (xv[base + i] - mu) * istd;
                            let gg = gv[base + i];
                            dx[base + i] = if *train {
                                gam[ch] * istd * (gg - sum_g / m - xhat * sum_gx / m)
                            } else {
                                gam[ch] * istd * gg
                            };
                        }
                    }
                }
                Self::accumulate(grads, x, &xs, &dx);
                Self::accumulate(grads, gamma, &[c], &dgam);
                Self::accumulate(grads, ins[2], &[c], &dbeta);
            }
            Op::Softmax => {
                let s = g.shape();
                let (n, c) = (s[0], s[1]);
                let yv = node.value.data();
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    let y_row = &yv[i * c..(i + 1) * c];
                    let g_row = &gv[i * c..(i + 1) * c];
                    let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[i * c + j] = y_row[j] * (g_row[j] - dot);
                    }
                }
                Self::accumulate(grads, ins[0], s, &dx);
            }
            Op::LnClamped => {
                let xv = self.nodes[ins[0]].value.data();
                let dx: Vec<f64> = gv
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > LN_CLAMP { g / x } else { 0.0 })
                    .collect();
                Self::accumulate(grads, ins[0], g.shape(), &dx);
            }
            Op::Sum => {
                let n = self.nodes[ins[0]].value.numel();
                let dx = vec![gv[0]; n];
                Self::accumulate(grads, ins[0], self.nodes[ins[0]].value.shape(), &dx);
            }
            Op::Mean => {
                let n = self.nodes[ins[0]].value.numel();
                let dx = vec![gv[0] / n as f64; n];
                Self::accumulate(grads, ins[0], self.nodes[ins[0]].value.shape(), &dx);
            }
            Op::Reshape => {
                Self::accumulate(grads, ins[0], self.nodes[ins[0]].value.shape(), gv);
            }
            Op::ConcatCols => {
                let (a, b) = (ins[0], ins[1]);
                let f1 = self.nodes[a].value.shape()[1];
                let f2 = self.nodes[b].value.shape()[1];
                let n = self.nodes[a].value.shape()[0];
                let mut da = vec![0.0; n * f1];
                let mut db = vec![0.0; n * f2];
                for i in 0..n {
                    da[i * f1..(i + 1) * f1].copy_from_slice(&gv[i * (f1 + f2)..i * (f1 + f2) + f1]);
                    db[i * f2..(i + 1) * f2]
                        .copy_from_slice(&gv[i * (f1 + f2) + f1..(i + 1) * (f1 + f2)]);
                }
                Self::accumulate(grads, a, &[n, f1], &da);
                Self::accumulate(grads, b, &[n, f2], &db);
            }
            Op::Dropout { mask } => {
                let dx: Vec<f64> = gv.iter().zip(mask).map(|(g, m)| g * m).collect();
                Self::accumulate(grads, ins[0], g.shape(), &dx);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// out[p,q] = sum_m a[m,p] * b[m,q]  (a^T * b)
fn matmul_ta(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let b_row = &b[i * q..(i + 1) * q];
        for (j, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[j * q..(j + 1) * q];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn square_loss_has_analytic_gradient() {
        // loss = x^2 at x=3 -> dloss/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        close(tape.grad(x).unwrap().item(), 6.0, 1e-12);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = tape.leaf(eye);
        let b = tape.leaf(x.clone());
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s).data() {
            close(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xk = tape.leaf(x.clone());
        let k = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(xk, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 3]));
        match tape.add(a, b).unwrap_err() {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dropout_requires_mode() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        assert!(matches!(
            tape.dropout(x, 0.5).unwrap_err(),
            TensorError::ModeUnset { .. }
        ));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::eval();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_is_deterministic_per_seed() {
        let run = |seed| {
            let mut tape = Tape::train(seed);
            let x = tape.leaf(Tensor::from_vec(vec![1.0; 32]));
            let y = tape.dropout(x, 0.5).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn bn_eval_is_pure_affine() {
        // With fixed running stats, eval-mode BN must be an affine map of x.
        let running = BnStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let f = |v: f64| {
            let mut tape = Tape::eval();
            let x = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![v, 0.0]).unwrap());
            let g = tape.leaf(Tensor::from_vec(vec![2.0]));
            let b = tape.leaf(Tensor::from_vec(vec![0.5]));
            let (y, upd) = tape.batch_norm2d(x, g, b, &running, 1e-5, 0.1).unwrap();
            assert!(upd.is_none());
            tape.value(y).data()[0]
        };
        // affinity: f(a+b) - f(a) - f(b) + f(0) == 0
        let lhs = f(3.0) - f(1.0) - f(2.0) + f(0.0);
        close(lhs, 0.0, 1e-12);
    }

    #[test]
    fn bn_train_returns_updated_running_stats() {
        let running = BnStats {
            mean: vec![0.0],
            var: vec![1.0],
        };
        let mut tape = Tape::train(0);
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.leaf(Tensor::from_vec(vec![1.0]));
        let b = tape.leaf(Tensor::from_vec(vec![0.0]));
        let (_, upd) = tape.batch_norm2d(x, g, b, &running, 1e-5, 0.1).unwrap();
        let upd = upd.unwrap();
        close(upd.mean[0], 0.9 * 0.0 + 0.1 * 2.5, 1e-12);
        // biased var = 1.25, unbiased = 1.25 * 4/3
        close(upd.var[0], 0.9 * 1.0 + 0.1 * (1.25 * 4.0 / 3.0), 1e-12);
    }

    #[test]
    fn batched_linear_matches_per_sample_loop() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor::new(
            &[2, 6],
            vec![
                // sample 0: W = [[1,0,0],[0,1,0]]
                1.0, 0.0, 0.0, 0.0, 1.0, 0.0,
                // sample 1: W = [[0,0,1],[2,0,0]]
                0.0, 0.0, 1.0, 2.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let b = Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (xn, wn, bn) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let y = tape.batched_linear(xn, wn, bn).unwrap();
        let got = tape.value(y).data();
        let want = [1.0 + 0.1, 2.0 + 0.2, 2.0 + 0.3, -2.0 + 0.4];
        for (a, b) in got.iter().zip(want.iter()) {
            close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn gradient_accumulates_over_shared_inputs() {
        // y = x*x + x -> dy/dx = 2x + 1 = 7 at x=3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        close(tape.grad(x).unwrap().item(), 7.0, 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::train(9);
            let x = tape.leaf(Tensor::new(&[2, 2], vec![0.3, -0.2, 0.9, 0.4]).unwrap());
            let w = tape.leaf(Tensor::new(&[2, 2], vec![0.5, 0.1, -0.3, 0.8]).unwrap());
            let y = tape.matmul(x, w).unwrap();
            let r = tape.relu(y);
            let m = tape.mean(r);
            tape.backward(m).unwrap();
            tape.grad(w).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical seeds/inputs must give bit-identical gradients");
    }

    #[test]
    fn relu_tracks_kink_margin() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.5, -0.001, 2.0]));
        let _ = tape.relu(x);
        close(tape.kink_margin(), 0.001, 1e-12);
    }
}
