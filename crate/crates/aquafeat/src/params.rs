//! Named trainable tensors and the basic convolution layer pair.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Shape, Tape, Tensor, TensorError, Var};

/// A named parameter: the unit of checkpointing and optimization.
#[derive(Clone, Debug)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Shape) -> Self {
        Param::new(name, Tensor::zeros(shape))
    }

    /// Register this parameter on a tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> Var {
        tape.leaf(self.value.clone(), true)
    }

    pub fn numel(&self) -> usize {
        self.value.shape().numel()
    }

    /// Convert to another precision, keeping the name.
    pub fn cast<F: Element>(&self) -> Param<F> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
        }
    }
}

/// Draw a (c_out, c_in, k, k) weight tensor with He-normal entries,
/// std = sqrt(2 / (c_in · k²)).
pub fn he_normal<E: Element>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Tensor<E> {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let shape = Shape::new(c_out, c_in, k, k);
    let data = (0..shape.numel())
        .map(|_| E::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("sized buffer")
}

/// Weight + bias pair of one convolution layer. Bias is carried as a
/// (1, c_out, 1, 1) tensor.
#[derive(Clone, Debug)]
pub struct ConvParams<E: Element> {
    pub w: Param<E>,
    pub b: Param<E>,
}

impl<E: Element> ConvParams<E> {
    /// He-normal weights, zero bias.
    pub fn init(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvParams {
            w: Param::new(format!("{prefix}.w"), he_normal(c_out, c_in, k, rng)),
            b: Param::zeros(format!("{prefix}.b"), Shape::new(1, c_out, 1, 1)),
        }
    }

    /// All-zero weights and bias (for residual branches that must be
    /// neutral at initialization).
    pub fn init_zero(prefix: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        ConvParams {
            w: Param::zeros(format!("{prefix}.w"), Shape::new(c_out, c_in, k, k)),
            b: Param::zeros(format!("{prefix}.b"), Shape::new(1, c_out, 1, 1)),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> ConvVars {
        let w = self.w.bind(tape);
        let b = self.b.bind(tape);
        order.push(w);
        order.push(b);
        ConvVars { w, b }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        out.push(&self.w);
        out.push(&self.b);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

/// Tape handles of one bound convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

impl ConvVars {
    /// Convolve with padding k/2 (spatial size preserved at stride 1).
    pub fn apply<E: Element>(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let k = tape.shape(self.w).h;
        tape.conv2d(x, self.w, self.b, stride, k / 2)
    }
}
