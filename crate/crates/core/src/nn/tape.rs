//! Operation tape for reverse-mode differentiation.
//!
//! Forward calls append nodes that hold their output value plus whatever the
//! backward rule needs (pool argmax indices, dropout masks, normalized batch
//! statistics). `backward` walks the tape in reverse creation order and
//! accumulates gradients into every node that requires them. A tape is
//! consumed by `backward`; rebuilding the graph means running forward again.

use rand::Rng;

use super::kernels::{self, ConvDims};
use super::tensor::Tensor;
use super::{Activation, NnError, PROB_CLAMP};

/// Epsilon inside the batch-normalization denominator.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-channel batch statistics produced by a train-mode batchnorm pass.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: ConvDims,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        batch: usize,
        f_in: usize,
        f_out: usize,
    },
    Sigmoid {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        cols: usize,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Reshape {
        x: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        a_cols: usize,
        b_cols: usize,
    },
    SoftmaxXent {
        logits: NodeId,
        probs: Tensor,
        labels: Vec<usize>,
    },
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: NodeId,
        coeffs: Vec<f64>,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient populated by `backward`, if this node received one.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Valid convolution, stride 1: x `[B,C,H,W]`, w `[K,C,s,s]`, b `[K]`
    /// produce `[B,K,H-s+1,W-s+1]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d expects x[B,C,H,W], w[K,C,s,s], b[K]; got x{:?} w{:?} b{:?}",
                xs, ws, bs
            )));
        }
        let (batch, in_ch, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, k) = (ws[0], ws[3]);
        if ws[1] != in_ch || ws[2] != ws[3] || bs[0] != out_ch {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d filter/bias disagree with input: x{:?} w{:?} b{:?}",
                xs, ws, bs
            )));
        }
        if h < k || w_in < k {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d kernel {k} exceeds input {h}x{w_in}"
            )));
        }
        let dims = ConvDims {
            batch,
            in_ch,
            h,
            w: w_in,
            out_ch,
            k,
            out_h: h - k + 1,
            out_w: w_in - k + 1,
        };
        let mut y = Tensor::zeros(&[batch, out_ch, dims.out_h, dims.out_w]);
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
            y.data_mut(),
        );
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(y, rq, Op::Conv2d { x, w, b, dims }))
    }

    /// Affine map plus activation: x `[B,F_in]`, w `[F_in,F_out]`, b `[F_out]`.
    pub fn dense(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        activation: Activation,
    ) -> Result<NodeId, NnError> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects x[B,F_in], w[F_in,F_out], b[F_out]; got x{:?} w{:?} b{:?}",
                xs, ws, bs
            )));
        }
        let (batch, f_in, f_out) = (xs[0], ws[0], ws[1]);
        let mut y = Tensor::zeros(&[batch, f_out]);
        kernels::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            f_in,
            f_out,
            y.data_mut(),
        );
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        let affine = self.push(
            y,
            rq,
            Op::Dense {
                x,
                w,
                b,
                batch,
                f_in,
                f_out,
            },
        );
        self.activate(affine, activation)
    }

    /// Applies an activation as its own node; `Identity` is a no-op.
    pub fn activate(&mut self, x: NodeId, activation: Activation) -> Result<NodeId, NnError> {
        match activation {
            Activation::Identity => Ok(x),
            Activation::Sigmoid => Ok(self.sigmoid(x)),
            Activation::Relu => Ok(self.relu(x)),
            Activation::Softmax => self.softmax(x),
        }
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut y = Tensor::zeros(self.value(x).shape());
        kernels::unary_map(self.value(x).data(), y.data_mut(), kernels::sigmoid_scalar);
        let rq = self.requires(x);
        self.push(y, rq, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = Tensor::zeros(self.value(x).shape());
        kernels::unary_map(self.value(x).data(), y.data_mut(), |p| p.max(0.0));
        let rq = self.requires(x);
        self.push(y, rq, Op::Relu { x })
    }

    /// Row-wise softmax over the last axis of a `[B,J]` tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(NnError::ShapeMismatch(format!(
                "softmax expects [B,J], got {:?}",
                shape
            )));
        }
        let cols = shape[1];
        let mut y = Tensor::zeros(&shape);
        kernels::softmax_rows(self.value(x).data(), cols, y.data_mut());
        let rq = self.requires(x);
        Ok(self.push(y, rq, Op::Softmax { x, cols }))
    }

    /// Non-overlapping max pooling with stride equal to the window size.
    /// Output extent is `floor(m/pool)`; trailing rows/columns are dropped.
    pub fn maxpool2d(&mut self, x: NodeId, pool: usize) -> Result<NodeId, NnError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 || pool == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "maxpool2d expects x[B,C,H,W] and pool >= 1, got {:?} pool {}",
                shape, pool
            )));
        }
        let (batch, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (out_h, out_w) = (h / pool, w / pool);
        if out_h == 0 || out_w == 0 {
            return Err(NnError::DegenerateOutput { h, w, pool });
        }
        let mut y = Tensor::zeros(&[batch, ch, out_h, out_w]);
        let mut argmax = vec![0usize; y.numel()];
        kernels::maxpool_forward(
            self.value(x).data(),
            batch * ch,
            h,
            w,
            pool,
            out_h,
            out_w,
            y.data_mut(),
            &mut argmax,
        );
        let rq = self.requires(x);
        Ok(self.push(y, rq, Op::MaxPool { x, argmax }))
    }

    /// Train-mode batch normalization over `[B,C,H,W]` with per-channel
    /// statistics. Returns the output node and the batch statistics so the
    /// caller can update its running averages.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats), NnError> {
        let shape = self.value(x).shape().to_vec();
        let channels = self.check_batchnorm_shapes(&shape, gamma, beta)?;
        if shape[0] < 2 {
            return Err(NnError::BatchTooSmall { got: shape[0] });
        }
        let (batch, plane) = (shape[0], shape[2] * shape[3]);
        let (mean, var) = kernels::channel_mean_var(self.value(x).data(), batch, channels, plane);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let node = self.batchnorm_node(x, gamma, beta, &mean, &inv_std, true);
        Ok((node, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization using stored running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId, NnError> {
        let shape = self.value(x).shape().to_vec();
        let channels = self.check_batchnorm_shapes(&shape, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(NnError::ShapeMismatch(format!(
                "running stats hold {} channels, input has {}",
                running_mean.len(),
                channels
            )));
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        Ok(self.batchnorm_node(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn check_batchnorm_shapes(
        &self,
        shape: &[usize],
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<usize, NnError> {
        if shape.len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "batchnorm expects x[B,C,H,W], got {:?}",
                shape
            )));
        }
        let channels = shape[1];
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(NnError::ShapeMismatch(format!(
                "batchnorm scale/shift must be [{}]",
                channels
            )));
        }
        Ok(channels)
    }

    fn batchnorm_node(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let (channels, plane) = (shape[1], shape[2] * shape[3]);
        let mut normalized = Tensor::zeros(&shape);
        let mut y = Tensor::zeros(&shape);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let norm = normalized.data_mut();
            // Single writer per (n, c) plane.
            kernels::for_each_chunk2(norm, y.data_mut(), plane, plane, |nc, np, yp| {
                let c = nc % channels;
                let (mu, istd, g, b) = (mean[c], inv_std[c], gd[c], bd[c]);
                let xp = &xd[nc * plane..][..plane];
                for ((nv, yv), xv) in np.iter_mut().zip(yp.iter_mut()).zip(xp) {
                    let xn = (xv - mu) * istd;
                    *nv = xn;
                    *yv = g * xn + b;
                }
            });
        }
        let rq = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            y,
            rq,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std: inv_std.to_vec(),
                train,
            },
        )
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// `1/(1-rate)`. Inference is the identity, so no inference variant exists.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        let scale = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    scale
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let y = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let rq = self.requires(x);
        self.push(y, rq, Op::Dropout { x, mask })
    }

    /// Collapses `[B, ...]` to `[B, rest]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(NnError::ShapeMismatch(format!(
                "flatten expects a batched tensor, got {:?}",
                shape
            )));
        }
        let rest: usize = shape[1..].iter().product();
        let y = self.value(x).reshaped(&[shape[0], rest])?;
        let rq = self.requires(x);
        Ok(self.push(y, rq, Op::Reshape { x }))
    }

    /// Concatenates two `[B, F]` tensors along the feature axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(NnError::ShapeMismatch(format!(
                "concat expects matching [B,F] tensors, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (batch, a_cols, b_cols) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(batch * (a_cols + b_cols));
        for n in 0..batch {
            data.extend_from_slice(&self.value(a).data()[n * a_cols..][..a_cols]);
            data.extend_from_slice(&self.value(b).data()[n * b_cols..][..b_cols]);
        }
        let y = Tensor::from_vec(&[batch, a_cols + b_cols], data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(
            y,
            rq,
            Op::Concat {
                a,
                b,
                a_cols,
                b_cols,
            },
        ))
    }

    /// Fused softmax + categorical cross-entropy on logits `[B,J]`, averaged
    /// over the batch. The backward rule is `(probs - onehot) / B`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NnError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(NnError::ShapeMismatch(format!(
                "softmax_cross_entropy expects logits[B,J] with B labels; got {:?} and {} labels",
                shape,
                labels.len()
            )));
        }
        let (batch, cols) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(NnError::ShapeMismatch(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut probs = Tensor::zeros(&shape);
        kernels::softmax_rows(self.value(logits).data(), cols, probs.data_mut());
        let mut loss = 0.0;
        for (n, &label) in labels.iter().enumerate() {
            loss -= probs.data()[n * cols + label].max(PROB_CLAMP).ln();
        }
        loss /= batch as f64;
        let rq = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rq,
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of already-normalized probability rows.
    /// Rows must sum to 1 within 1e-6.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId, NnError> {
        let shape = self.value(probs).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(NnError::ShapeMismatch(format!(
                "cross_entropy expects probs[B,J] with B labels; got {:?} and {} labels",
                shape,
                labels.len()
            )));
        }
        let (batch, cols) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(NnError::ShapeMismatch(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        for n in 0..batch {
            let sum: f64 = self.value(probs).data()[n * cols..][..cols].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(NnError::InvalidProbabilities { row: n, sum });
            }
        }
        let mut loss = 0.0;
        for (n, &label) in labels.iter().enumerate() {
            loss -= self.value(probs).data()[n * cols + label]
                .max(PROB_CLAMP)
                .ln();
        }
        loss /= batch as f64;
        let rq = self.requires(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            rq,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Scalar `sum_i coeffs[i] * x[i]` over the flattened tensor. Used by the
    /// gradient checker to exercise backward rules with a non-uniform
    /// upstream gradient.
    pub fn weighted_sum(&mut self, x: NodeId, coeffs: &[f64]) -> Result<NodeId, NnError> {
        if coeffs.len() != self.value(x).numel() {
            return Err(NnError::ShapeMismatch(format!(
                "weighted_sum needs {} coefficients, got {}",
                self.value(x).numel(),
                coeffs.len()
            )));
        }
        let value = kernels_dot(self.value(x).data(), coeffs);
        let rq = self.requires(x);
        Ok(self.push(
            Tensor::scalar(value),
            rq,
            Op::WeightedSum {
                x,
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss node. Consumes the tape: a second call
    /// without a fresh forward pass fails with `GraphConsumed`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.dispatch_backward(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    /// True when every populated gradient buffer is finite.
    pub fn grads_finite(&self) -> bool {
        self.nodes
            .iter()
            .filter_map(|n| n.grad.as_ref())
            .all(|g| g.is_finite())
    }

    fn dispatch_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                if self.requires(*x) {
                    let dx = self.accum(grads, *x);
                    kernels::conv2d_backward_x(g.data(), self.value(*w).data(), dims, dx);
                }
                if self.requires(*w) {
                    let dw = self.accum(grads, *w);
                    kernels::conv2d_backward_w(self.value(*x).data(), g.data(), dims, dw);
                }
                if self.requires(*b) {
                    let db = self.accum(grads, *b);
                    kernels::conv2d_backward_b(g.data(), dims, db);
                }
            }
            Op::Dense {
                x,
                w,
                b,
                batch,
                f_in,
                f_out,
            } => {
                if self.requires(*x) {
                    let dx = self.accum(grads, *x);
                    kernels::dense_backward_x(g.data(), self.value(*w).data(), *f_in, *f_out, dx);
                }
                if self.requires(*w) {
                    let dw = self.accum(grads, *w);
                    kernels::dense_backward_w(
                        self.value(*x).data(),
                        g.data(),
                        *batch,
                        *f_in,
                        *f_out,
                        dw,
                    );
                }
                if self.requires(*b) {
                    let db = self.accum(grads, *b);
                    kernels::col_sums(g.data(), *batch, *f_out, db);
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let y = self.nodes[i].value.data();
                    let dx = self.accum(grads, *x);
                    kernels::zip2_accum(dx, g.data(), y, |gv, yv| gv * yv * (1.0 - yv));
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let y = self.nodes[i].value.data();
                    let dx = self.accum(grads, *x);
                    kernels::zip2_accum(dx, g.data(), y, |gv, yv| {
                        if yv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                }
            }
            Op::Softmax { x, cols } => {
                if self.requires(*x) {
                    let y = self.nodes[i].value.data();
                    let cols = *cols;
                    let dx = self.accum(grads, *x);
                    for n in 0..y.len() / cols {
                        let yrow = &y[n * cols..][..cols];
                        let grow = &g.data()[n * cols..][..cols];
                        let s = kernels_dot(yrow, grow);
                        let dxrow = &mut dx[n * cols..][..cols];
                        for ((dxv, yv), gv) in dxrow.iter_mut().zip(yrow).zip(grow) {
                            *dxv += yv * (gv - s);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.requires(*x) {
                    let dx = self.accum(grads, *x);
                    for (gv, &ai) in g.data().iter().zip(argmax) {
                        dx[ai] += gv;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            } => {
                let shape = self.value(*x).shape();
                let (batch, channels, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = (batch * plane) as f64;
                // Per-channel reductions of g and g * normalized.
                let mut g_sum = vec![0.0; channels];
                let mut gx_sum = vec![0.0; channels];
                for nc in 0..batch * channels {
                    let c = nc % channels;
                    let gp = &g.data()[nc * plane..][..plane];
                    let np = &normalized.data()[nc * plane..][..plane];
                    let mut s = 0.0;
                    let mut sx = 0.0;
                    for (gv, nv) in gp.iter().zip(np) {
                        s += gv;
                        sx += gv * nv;
                    }
                    g_sum[c] += s;
                    gx_sum[c] += sx;
                }
                if self.requires(*gamma) {
                    let dgamma = self.accum(grads, *gamma);
                    for (d, s) in dgamma.iter_mut().zip(&gx_sum) {
                        *d += s;
                    }
                }
                if self.requires(*beta) {
                    let dbeta = self.accum(grads, *beta);
                    for (d, s) in dbeta.iter_mut().zip(&g_sum) {
                        *d += s;
                    }
                }
                if self.requires(*x) {
                    let gd = self.value(*gamma).data().to_vec();
                    let train = *train;
                    let g_data = g.data();
                    let n_data = normalized.data();
                    let dx = self.accum(grads, *x);
                    kernels::for_each_chunk(dx, plane, |nc, dxp| {
                        let c = nc % channels;
                        let scale = gd[c] * inv_std[c];
                        let gp = &g_data[nc * plane..][..plane];
                        if train {
                            let (gm, gxm) = (g_sum[c] / m, gx_sum[c] / m);
                            let np = &n_data[nc * plane..][..plane];
                            for ((dxv, gv), nv) in dxp.iter_mut().zip(gp).zip(np) {
                                *dxv += scale * (gv - gm - nv * gxm);
                            }
                        } else {
                            for (dxv, gv) in dxp.iter_mut().zip(gp) {
                                *dxv += scale * gv;
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires(*x) {
                    let dx = self.accum(grads, *x);
                    for ((dxv, gv), mv) in dx.iter_mut().zip(g.data()).zip(mask) {
                        *dxv += gv * mv;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    let dx = self.accum(grads, *x);
                    for (dxv, gv) in dx.iter_mut().zip(g.data()) {
                        *dxv += gv;
                    }
                }
            }
            Op::Concat {
                a,
                b,
                a_cols,
                b_cols,
            } => {
                let (a_cols, b_cols) = (*a_cols, *b_cols);
                let total = a_cols + b_cols;
                let rows = g.numel() / total;
                if self.requires(*a) {
                    let da = self.accum(grads, *a);
                    for n in 0..rows {
                        let grow = &g.data()[n * total..][..a_cols];
                        for (dv, gv) in da[n * a_cols..][..a_cols].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                }
                if self.requires(*b) {
                    let db = self.accum(grads, *b);
                    for n in 0..rows {
                        let grow = &g.data()[n * total + a_cols..][..b_cols];
                        for (dv, gv) in db[n * b_cols..][..b_cols].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                if self.requires(*logits) {
                    let gs = g.scalar_value();
                    let cols = probs.shape()[1];
                    let batch = labels.len() as f64;
                    let dl = self.accum(grads, *logits);
                    for (n, &label) in labels.iter().enumerate() {
                        let prow = &probs.data()[n * cols..][..cols];
                        let drow = &mut dl[n * cols..][..cols];
                        for (j, (dv, pv)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == label { 1.0 } else { 0.0 };
                            *dv += gs * (pv - target) / batch;
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if self.requires(*probs) {
                    let gs = g.scalar_value();
                    let cols = self.value(*probs).shape()[1];
                    let batch = labels.len() as f64;
                    let pdata = self.value(*probs).data();
                    let dp = self.accum(grads, *probs);
                    for (n, &label) in labels.iter().enumerate() {
                        let p = pdata[n * cols + label];
                        if p >= PROB_CLAMP {
                            dp[n * cols + label] -= gs / (batch * p);
                        }
                    }
                }
            }
            Op::WeightedSum { x, coeffs } => {
                if self.requires(*x) {
                    let gs = g.scalar_value();
                    let dx = self.accum(grads, *x);
                    for (dxv, cv) in dx.iter_mut().zip(coeffs) {
                        *dxv += gs * cv;
                    }
                }
            }
        }
    }

    /// Returns the gradient buffer for `id`, creating zeros on first touch.
    fn accum<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> &'g mut [f64] {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        slot.as_mut().expect("just filled").data_mut()
    }
}

fn kernels_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
