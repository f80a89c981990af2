//! Operation tape for reverse-mode differentiation.
//!
//! Forward methods append nodes in topological order (operands always
//! precede their consumers), so one reverse sweep in [`Tape::backward`]
//! visits every node exactly once. Gradients accumulate — they are never
//! overwritten — which is what makes weight sharing work: a parameter
//! registered once and used three times receives the sum of all three
//! path gradients. Repeated `backward` calls without a reset keep
//! accumulating, matching optimizer-side gradient accumulation.

use super::kernels;
use super::{Element, Shape, Tensor, TensorError, EPS_STAT};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Spatial axis selector for [`Tape::axis_mean`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Axis {
    Height,
    Width,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Resize {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxStack {
        inputs: Vec<Var>,
        index: usize,
    },
    ChannelMean {
        x: Var,
    },
    ChannelStd {
        x: Var,
    },
    AxisMean {
        x: Var,
        axis: Axis,
    },
    MulBcast {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddScalar {
        x: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Clamp01 {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input. Only leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Vec<E> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![E::ZERO; self.nodes[v.0].value.shape().numel()],
        }
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite values in forward result");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ─── forward operations ───────────────────────────────────────────

    /// 2-D convolution with zero padding. Weights are (c_out, c_in, k, k)
    /// with k ∈ {1, 3} and pad = k/2; bias is a length-c_out vector carried
    /// as a (1, c_out, 1, 1) tensor.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        let k = ws.h;
        if ws.h != ws.w || !(k == 1 || k == 3) {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel must be square with size 1 or 3, got {ws}"),
            });
        }
        if pad != k / 2 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("padding must be {} for kernel size {k}, got {pad}", k / 2),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be at least 1".into(),
            });
        }
        if xs.c != ws.c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs.numel() != ws.n {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: ws,
                rhs: bs,
            });
        }
        let out = kernels::conv2d_fwd(
            self.value(x),
            self.value(w),
            self.value(b).data(),
            stride,
            pad,
        );
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(out, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Bilinear resize with half-pixel-center sampling and border clamping.
    pub fn resize_bilinear(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid {
                op: "resize_bilinear",
                msg: format!("target size {out_h}x{out_w} must be at least 1x1"),
            });
        }
        let out = kernels::resize_bilinear_fwd(self.value(x), out_h, out_w);
        let rg = self.any_requires(&[x]);
        Ok(self.push(out, rg, Op::Resize { x }))
    }

    /// Concatenate along the channel dimension. The first operand occupies
    /// the leading channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_channels",
                msg: "no operands".into(),
            });
        }
        let first = self.shape(parts[0]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first,
                    rhs: s,
                });
            }
            c_total += s.c;
        }
        let os = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Tensor::zeros(os);
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &p in parts {
                let s = self.shape(p);
                let src = s.idx(n, 0, 0, 0);
                let dst = os.idx(n, c_off, 0, 0);
                out.data_mut()[dst..dst + s.c * plane]
                    .copy_from_slice(&self.value(p).data()[src..src + s.c * plane]);
                c_off += s.c;
            }
        }
        let rg = self.any_requires(parts);
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        debug_assert!(slope > 0.0 && slope < 1.0, "leaky slope must be in (0,1)");
        let s = E::from_f64(slope);
        let out = self.map_unary(x, |v| if v > E::ZERO { v } else { s * v });
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, |v| v.tanh());
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, |v| E::ONE / (E::ONE + (-v).exp()));
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::Sigmoid { x })
    }

    fn map_unary(&self, x: Var, f: impl Fn(E) -> E) -> Tensor<E> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        Tensor::from_vec(v.shape(), data).expect("same length")
    }

    /// Softmax across a stack of same-shape logit tensors, applied
    /// independently at every (batch, channel, y, x) position. Returns one
    /// weight tensor per input; at each position the weights are positive
    /// and sum to 1.
    pub fn softmax_over_stack(&mut self, logits: &[Var]) -> Result<Vec<Var>, TensorError> {
        if logits.is_empty() {
            return Err(TensorError::EmptyStack);
        }
        let s = self.shape(logits[0]);
        for &l in logits {
            if self.shape(l) != s {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_over_stack",
                    lhs: s,
                    rhs: self.shape(l),
                });
            }
        }
        let weights = softmax_stack_values(
            &logits.iter().map(|&l| self.value(l).clone()).collect::<Vec<_>>(),
        );
        let rg = self.any_requires(logits);
        let vars = weights
            .into_iter()
            .enumerate()
            .map(|(index, w)| {
                self.push(
                    w,
                    rg,
                    Op::SoftmaxStack {
                        inputs: logits.to_vec(),
                        index,
                    },
                )
            })
            .collect();
        Ok(vars)
    }

    /// Per-channel mean over all batch and spatial positions, shape (1,c,1,1).
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let out = channel_mean_values(self.value(x));
        let rg = self.any_requires(&[x]);
        debug_assert!(xs.n * xs.h * xs.w >= 1);
        self.push(out, rg, Op::ChannelMean { x })
    }

    /// Per-channel population standard deviation over all batch and spatial
    /// positions, computed as sqrt(var + ε) so it is differentiable and
    /// never zero. Shape (1,c,1,1).
    pub fn channel_std(&mut self, x: Var) -> Var {
        let out = channel_std_values(self.value(x));
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::ChannelStd { x })
    }

    /// Mean and population std per channel, as two (1,c,1,1) tensors.
    pub fn channel_stats(&mut self, x: Var) -> (Var, Var) {
        (self.channel_mean(x), self.channel_std(x))
    }

    /// Mean over one spatial axis; the pooled axis keeps size 1.
    pub fn axis_mean(&mut self, x: Var, axis: Axis) -> Var {
        let xs = self.shape(x);
        let os = match axis {
            Axis::Height => Shape::new(xs.n, xs.c, 1, xs.w),
            Axis::Width => Shape::new(xs.n, xs.c, xs.h, 1),
        };
        let inv = E::from_f64(1.0 / reduced_len(xs, axis) as f64);
        let mut out = Tensor::zeros(os);
        let v = self.value(x);
        for n in 0..xs.n {
            for c in 0..xs.c {
                for y in 0..xs.h {
                    for xw in 0..xs.w {
                        let (oy, ox) = match axis {
                            Axis::Height => (0, xw),
                            Axis::Width => (y, 0),
                        };
                        let i = os.idx(n, c, oy, ox);
                        out.data_mut()[i] += v.at(n, c, y, xw);
                    }
                }
            }
        }
        for e in out.data_mut() {
            *e *= inv;
        }
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::AxisMean { x, axis })
    }

    /// Elementwise product where every dimension of `b` either matches `a`
    /// or is 1 (broadcast). Output has `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = (sb.n == sa.n || sb.n == 1)
            && (sb.c == sa.c || sb.c == 1)
            && (sb.h == sa.h || sb.h == 1)
            && (sb.w == sa.w || sb.w == 1);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "mul_bcast",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = kernels::mul_bcast_fwd(self.value(a), self.value(b));
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::MulBcast { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += *v;
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let ke = E::from_f64(k);
        let out = self.map_unary(x, |v| v + ke);
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::AddScalar { x })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let ke = E::from_f64(k);
        let out = self.map_unary(x, |v| v * ke);
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::Scale { x, k })
    }

    /// Clamp to [0, 1]. The gradient passes through wherever the input lies
    /// inside the bounds (inclusive) and is zero outside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.map_unary(x, |v| v.maximum(E::ZERO).minimum(E::ONE));
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::Clamp01 { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for v in self.value(x).data() {
            acc += *v;
        }
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![acc]).expect("scalar");
        let rg = self.any_requires(&[x]);
        self.push(out, rg, Op::SumAll { x })
    }

    /// Mean cross-entropy between logits (n, K, 1, 1) and integer labels,
    /// stabilized by max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        if s.h != 1 || s.w != 1 || s.n != labels.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("logits {s} incompatible with {} labels", labels.len()),
            });
        }
        for &l in labels {
            if l >= s.c {
                return Err(TensorError::LabelOutOfRange {
                    label: l,
                    classes: s.c,
                });
            }
        }
        let v = self.value(logits);
        let mut total = E::ZERO;
        for (n, &label) in labels.iter().enumerate() {
            let row = &v.data()[n * s.c..(n + 1) * s.c];
            let m = row.iter().fold(row[0], |a, &b| a.maximum(b));
            let mut lse = E::ZERO;
            for &l in row {
                lse += (l - m).exp();
            }
            let lse = m + lse.ln();
            total += lse - row[label];
        }
        let loss = total * E::from_f64(1.0 / labels.len() as f64);
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![loss]).expect("scalar");
        let rg = self.any_requires(&[logits]);
        Ok(self.push(
            out,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    // ─── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients propagate through
    /// per-call working buffers and are then added into each node's
    /// persistent accumulator, so repeated calls accumulate and a leaf
    /// used several times receives the sum over all paths. Leaves the
    /// loss never reaches keep a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: ls });
        }
        let mut work: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(vec![E::ONE]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = work[i].clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            for (parent, contribution) in self.op_backward(i, &op, &g) {
                let buf = work[parent.0].get_or_insert_with(|| {
                    vec![E::ZERO; self.nodes[parent.0].value.shape().numel()]
                });
                for (b, c) in buf.iter_mut().zip(&contribution) {
                    *b += *c;
                }
            }
        }
        for (node, local) in self.nodes.iter_mut().zip(work) {
            if let Some(local) = local {
                let grad = node
                    .grad
                    .get_or_insert_with(|| vec![E::ZERO; node.value.shape().numel()]);
                for (g, c) in grad.iter_mut().zip(&local) {
                    *g += *c;
                }
            }
        }
        Ok(())
    }

    fn op_backward(&self, idx: usize, op: &Op, g: &[E]) -> Vec<(Var, Vec<E>)> {
        let out_shape = self.nodes[idx].value.shape();
        let gt = Tensor::from_vec(out_shape, g.to_vec()).expect("grad shape");
        let mut contribs: Vec<(Var, Vec<E>)> = Vec::new();
        let mut push = |v: Var, data: Vec<E>| {
            if self.nodes[v.0].requires_grad {
                contribs.push((v, data));
            }
        };
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                if self.nodes[x.0].requires_grad {
                    push(
                        *x,
                        kernels::conv2d_bwd_x(&gt, self.shape(*x), self.value(*w), *stride, *pad)
                            .into_data(),
                    );
                }
                if self.nodes[w.0].requires_grad {
                    push(
                        *w,
                        kernels::conv2d_bwd_w(&gt, self.value(*x), self.shape(*w), *stride, *pad)
                            .into_data(),
                    );
                }
                push(*b, kernels::conv2d_bwd_b(&gt));
            }
            Op::Resize { x } => {
                push(*x, kernels::resize_bilinear_bwd(&gt, self.shape(*x)).into_data());
            }
            Op::Concat { parts } => {
                let os = out_shape;
                let plane = os.h * os.w;
                let mut c_off = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let mut gp = vec![E::ZERO; s.numel()];
                    for n in 0..os.n {
                        let src = os.idx(n, c_off, 0, 0);
                        let dst = s.idx(n, 0, 0, 0);
                        gp[dst..dst + s.c * plane]
                            .copy_from_slice(&g[src..src + s.c * plane]);
                    }
                    push(p, gp);
                    c_off += s.c;
                }
            }
            Op::LeakyRelu { x, slope } => {
                let s = E::from_f64(*slope);
                let xv = self.value(*x).data();
                push(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > E::ZERO { gv } else { s * gv })
                        .collect(),
                );
            }
            Op::Tanh { x } => {
                let yv = self.nodes[idx].value.data();
                push(
                    *x,
                    g.iter()
                        .zip(yv)
                        .map(|(&gv, &y)| gv * (E::ONE - y * y))
                        .collect(),
                );
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[idx].value.data();
                push(
                    *x,
                    g.iter()
                        .zip(yv)
                        .map(|(&gv, &y)| gv * y * (E::ONE - y))
                        .collect(),
                );
            }
            Op::SoftmaxStack { inputs, index } => {
                // d l_i = w_out (δ_i,out − w_i) g, recomputed from the inputs
                let values: Vec<Tensor<E>> =
                    inputs.iter().map(|&l| self.value(l).clone()).collect();
                let weights = softmax_stack_values(&values);
                let numel = out_shape.numel();
                for (i, &input) in inputs.iter().enumerate() {
                    let mut gi = vec![E::ZERO; numel];
                    let w_out = weights[*index].data();
                    let w_i = weights[i].data();
                    for p in 0..numel {
                        let delta = if i == *index { E::ONE } else { E::ZERO };
                        gi[p] = g[p] * w_out[p] * (delta - w_i[p]);
                    }
                    push(input, gi);
                }
            }
            Op::ChannelMean { x } => {
                let xs = self.shape(*x);
                let count = E::from_f64((xs.n * xs.h * xs.w) as f64);
                let mut gx = vec![E::ZERO; xs.numel()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let gv = g[c] / count;
                        let base = xs.idx(n, c, 0, 0);
                        for e in &mut gx[base..base + xs.h * xs.w] {
                            *e += gv;
                        }
                    }
                }
                push(*x, gx);
            }
            Op::ChannelStd { x } => {
                // dσ_c/dx_i = (x_i − μ_c) / (N σ_c)
                let xs = self.shape(*x);
                let xv = self.value(*x);
                let mean = channel_mean_values(xv);
                let std = self.nodes[idx].value.data();
                let count = E::from_f64((xs.n * xs.h * xs.w) as f64);
                let mut gx = vec![E::ZERO; xs.numel()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let factor = g[c] / (count * std[c]);
                        let mu = mean.data()[c];
                        let base = xs.idx(n, c, 0, 0);
                        for (e, &v) in gx[base..base + xs.h * xs.w]
                            .iter_mut()
                            .zip(&xv.data()[base..base + xs.h * xs.w])
                        {
                            *e += factor * (v - mu);
                        }
                    }
                }
                push(*x, gx);
            }
            Op::AxisMean { x, axis } => {
                let xs = self.shape(*x);
                let os = out_shape;
                let inv = E::from_f64(1.0 / reduced_len(xs, *axis) as f64);
                let mut gx = vec![E::ZERO; xs.numel()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        for y in 0..xs.h {
                            for xw in 0..xs.w {
                                let (oy, ox) = match axis {
                                    Axis::Height => (0, xw),
                                    Axis::Width => (y, 0),
                                };
                                gx[xs.idx(n, c, y, xw)] += g[os.idx(n, c, oy, ox)] * inv;
                            }
                        }
                    }
                }
                push(*x, gx);
            }
            Op::MulBcast { a, b } => {
                let bv = self.value(*b);
                push(*a, kernels::mul_bcast_fwd(&gt, bv).into_data());
                push(
                    *b,
                    kernels::mul_bcast_bwd_b(&gt, self.value(*a), self.shape(*b)).into_data(),
                );
            }
            Op::Add { a, b } => {
                push(*a, g.to_vec());
                push(*b, g.to_vec());
            }
            Op::AddScalar { x } => {
                push(*x, g.to_vec());
            }
            Op::Scale { x, k } => {
                let ke = E::from_f64(*k);
                push(*x, g.iter().map(|&gv| gv * ke).collect());
            }
            Op::Clamp01 { x } => {
                let xv = self.value(*x).data();
                push(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| {
                            if v >= E::ZERO && v <= E::ONE {
                                gv
                            } else {
                                E::ZERO
                            }
                        })
                        .collect(),
                );
            }
            Op::SumAll { x } => {
                let numel = self.shape(*x).numel();
                push(*x, vec![g[0]; numel]);
            }
            Op::CrossEntropy { logits, labels } => {
                let s = self.shape(*logits);
                let v = self.value(*logits);
                let inv_n = E::from_f64(1.0 / labels.len() as f64);
                let mut gl = vec![E::ZERO; s.numel()];
                for (n, &label) in labels.iter().enumerate() {
                    let row = &v.data()[n * s.c..(n + 1) * s.c];
                    let m = row.iter().fold(row[0], |a, &b| a.maximum(b));
                    let mut z = E::ZERO;
                    for &l in row {
                        z += (l - m).exp();
                    }
                    for (k, &l) in row.iter().enumerate() {
                        let p = (l - m).exp() / z;
                        let delta = if k == label { E::ONE } else { E::ZERO };
                        gl[n * s.c + k] = g[0] * (p - delta) * inv_n;
                    }
                }
                push(*logits, gl);
            }
        }
        contribs
    }
}

fn reduced_len(s: Shape, axis: Axis) -> usize {
    match axis {
        Axis::Height => s.h,
        Axis::Width => s.w,
    }
}

fn channel_mean_values<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let count = E::from_f64((s.n * s.h * s.w) as f64);
    let mut out = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.idx(n, c, 0, 0);
            let mut acc = E::ZERO;
            for v in &x.data()[base..base + s.h * s.w] {
                acc += *v;
            }
            out.data_mut()[c] += acc;
        }
    }
    for v in out.data_mut() {
        *v = *v / count;
    }
    out
}

fn channel_std_values<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let count = E::from_f64((s.n * s.h * s.w) as f64);
    let mean = channel_mean_values(x);
    let mut out: Tensor<E> = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let mu = mean.data()[c];
            let base = s.idx(n, c, 0, 0);
            let mut acc = E::ZERO;
            for &v in &x.data()[base..base + s.h * s.w] {
                let d = v - mu;
                acc += d * d;
            }
            out.data_mut()[c] += acc;
        }
    }
    let eps = E::from_f64(EPS_STAT);
    for v in out.data_mut() {
        *v = (*v / count + eps).sqrt();
    }
    out
}

fn softmax_stack_values<E: Element>(logits: &[Tensor<E>]) -> Vec<Tensor<E>> {
    let shape = logits[0].shape();
    let numel = shape.numel();
    let mut out: Vec<Tensor<E>> = logits.iter().map(|_| Tensor::zeros(shape)).collect();
    for p in 0..numel {
        let mut m = logits[0].data()[p];
        for l in logits {
            m = m.maximum(l.data()[p]);
        }
        let mut z = E::ZERO;
        for l in logits {
            z += (l.data()[p] - m).exp();
        }
        for (o, l) in out.iter_mut().zip(logits) {
            o.data_mut()[p] = (l.data()[p] - m).exp() / z;
        }
    }
    out
}
