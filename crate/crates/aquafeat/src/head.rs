//! Toy classification head: the downstream task whose loss trains the
//! enhancer end-to-end at desk scale.

use rand::Rng;

use crate::params::{ConvParams, ConvVars, Param};
use crate::tensor::{Axis, Element, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct ToyHeadParams<E: Element> {
    pub conv1: ConvParams<E>,
    pub conv2: ConvParams<E>,
    pub conv3: ConvParams<E>,
    pub classifier: ConvParams<E>,
}

impl<E: Element> ToyHeadParams<E> {
    pub fn init(num_classes: usize, rng: &mut impl Rng) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        ToyHeadParams {
            conv1: ConvParams::init("head.conv1", 3, 16, 3, rng),
            conv2: ConvParams::init("head.conv2", 16, 32, 3, rng),
            conv3: ConvParams::init("head.conv3", 32, 32, 3, rng),
            classifier: ConvParams::init("head.classifier", 32, num_classes, 1, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> ToyHeadVars {
        ToyHeadVars {
            conv1: self.conv1.bind(tape, order),
            conv2: self.conv2.bind(tape, order),
            conv3: self.conv3.bind(tape, order),
            classifier: self.classifier.bind(tape, order),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        self.conv1.collect(out);
        self.conv2.collect(out);
        self.conv3.collect(out);
        self.classifier.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        self.conv1.collect_mut(out);
        self.conv2.collect_mut(out);
        self.conv3.collect_mut(out);
        self.classifier.collect_mut(out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ToyHeadVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
    pub conv3: ConvVars,
    pub classifier: ConvVars,
}

impl ToyHeadVars {
    /// Conv stack with two stride-2 stages, global average pooling, and a
    /// linear classifier. Returns logits of shape (n, K, 1, 1).
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        slope: f64,
    ) -> Result<Var, TensorError> {
        let h = self.conv1.apply(tape, x, 1)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.conv2.apply(tape, h, 2)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.conv3.apply(tape, h, 2)?;
        let h = tape.leaky_relu(h, slope);
        let pooled = tape.axis_mean(h, Axis::Height);
        let pooled = tape.axis_mean(pooled, Axis::Width);
        self.classifier.apply(tape, pooled, 1)
    }
}

/// Row-major (n × K) view of a logits tensor.
pub fn logits_rows<E: Element>(t: &Tensor<E>) -> Vec<Vec<f64>> {
    let s = t.shape();
    (0..s.n)
        .map(|n| (0..s.c).map(|c| t.at(n, c, 0, 0).to_f64()).collect())
        .collect()
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
