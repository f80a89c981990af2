//! Shared-weight feature encoder applied at three resolutions.
//!
//! Input frames are processed at full, one-quarter and one-eighth
//! resolution by the same encoder: a SpecialConv entry layer followed by
//! six 3×3 convolutions with dense skip connections (layer i consumes the
//! concatenation of the entry output and every preceding layer output).
//! One parameter set serves all three streams; during training the three
//! streams' gradients accumulate into it.

use rand::Rng;

use crate::params::{ConvParams, ConvVars, Param};
use crate::special_conv::{SpecialConvParams, SpecialConvVars};
use crate::tensor::{Element, Tape, TensorError, Var};

pub const NUM_DENSE_LAYERS: usize = 6;

#[derive(Clone, Debug)]
pub struct UfenParams<E: Element> {
    pub entry: SpecialConvParams<E>,
    /// Layer i (1-based) maps feature_width·i channels to feature_width.
    pub layers: Vec<ConvParams<E>>,
}

impl<E: Element> UfenParams<E> {
    pub fn init(feature_width: usize, rng: &mut impl Rng) -> Self {
        let entry = SpecialConvParams::init("ufen.entry", 3, feature_width, rng);
        let layers = (1..=NUM_DENSE_LAYERS)
            .map(|i| {
                ConvParams::init(
                    &format!("ufen.layer{i}"),
                    feature_width * i,
                    feature_width,
                    3,
                    rng,
                )
            })
            .collect();
        UfenParams { entry, layers }
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> UfenVars {
        UfenVars {
            entry: self.entry.bind(tape, order),
            layers: self.layers.iter().map(|l| l.bind(tape, order)).collect(),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        self.entry.collect(out);
        for l in &self.layers {
            l.collect(out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        self.entry.collect_mut(out);
        for l in &mut self.layers {
            l.collect_mut(out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct UfenVars {
    pub entry: SpecialConvVars,
    pub layers: Vec<ConvVars>,
}

impl UfenVars {
    /// Encode a 3-channel image tensor into feature_width channels at the
    /// input's spatial size.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        slope: f64,
    ) -> Result<Var, TensorError> {
        let h0 = self.entry.forward(tape, x, slope)?;
        let h0 = tape.leaky_relu(h0, slope);
        let mut outputs = vec![h0];
        for layer in &self.layers {
            let input = if outputs.len() == 1 {
                outputs[0]
            } else {
                tape.concat_channels(&outputs)?
            };
            let h = layer.apply(tape, input, 1)?;
            outputs.push(tape.leaky_relu(h, slope));
        }
        Ok(*outputs.last().expect("at least the entry output"))
    }
}

/// The three input streams fed to the shared encoder.
#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub full: Var,
    pub quarter: Var,
    pub eighth: Var,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Downsample an image tensor to quarter and eighth resolution (ceiling
/// division per axis). Inputs smaller than 8×8 are rejected: the eighth
/// stream would degenerate.
pub fn build_pyramid<E: Element>(tape: &mut Tape<E>, img: Var) -> Result<Pyramid, TensorError> {
    let s = tape.shape(img);
    if s.c != 3 {
        return Err(TensorError::Invalid {
            op: "build_pyramid",
            msg: format!("expected a 3-channel image tensor, got {s}"),
        });
    }
    if s.h < 8 || s.w < 8 {
        return Err(TensorError::Invalid {
            op: "build_pyramid",
            msg: format!("image {}x{} smaller than the 8x8 minimum", s.h, s.w),
        });
    }
    let quarter = tape.resize_bilinear(img, ceil_div(s.h, 4), ceil_div(s.w, 4))?;
    let eighth = tape.resize_bilinear(img, ceil_div(s.h, 8), ceil_div(s.w, 8))?;
    Ok(Pyramid {
        full: img,
        quarter,
        eighth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{Shape, Tensor};

    #[test]
    fn pyramid_shapes_use_ceiling_division() {
        let mut tape: Tape<f32> = Tape::new();
        let img = tape.leaf(Tensor::zeros(Shape::new(1, 3, 100, 60)), false);
        let p = build_pyramid(&mut tape, img).unwrap();
        let q = tape.shape(p.quarter);
        let e = tape.shape(p.eighth);
        assert_eq!((q.h, q.w), (25, 15));
        assert_eq!((e.h, e.w), (13, 8));
    }

    #[test]
    fn pyramid_of_constant_image_is_constant() {
        let mut tape: Tape<f32> = Tape::new();
        let img = tape.leaf(Tensor::filled(Shape::new(1, 3, 16, 16), 0.42), false);
        let p = build_pyramid(&mut tape, img).unwrap();
        for v in [p.quarter, p.eighth] {
            for &e in tape.value(v).data() {
                assert_eq!(e, 0.42);
            }
        }
    }

    #[test]
    fn undersized_image_is_rejected() {
        let mut tape: Tape<f32> = Tape::new();
        let img = tape.leaf(Tensor::zeros(Shape::new(1, 3, 7, 64)), false);
        assert!(build_pyramid(&mut tape, img).is_err());
    }

    #[test]
    fn output_shape_preserves_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = UfenParams::<f32>::init(8, &mut rng);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = p.bind(&mut tape, &mut order);
        let x = tape.leaf(Tensor::filled(Shape::new(1, 3, 12, 9), 0.3), false);
        let out = vars.forward(&mut tape, x, 0.1).unwrap();
        assert_eq!(tape.shape(out), Shape::new(1, 8, 12, 9));
    }

    #[test]
    fn dense_connectivity_changes_the_output() {
        // Feeding each layer only the previous output must differ from the
        // dense wiring, otherwise the skip connections are dead code.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cf = 4;
        let p = UfenParams::<f64>::init(cf, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| {
            rng2.gen_range(-1.0..1.0)
        });

        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = p.bind(&mut tape, &mut order);
        let xv = tape.leaf(x.clone(), false);
        let dense = vars.forward(&mut tape, xv, 0.1).unwrap();

        // chain variant: layer i sees only h_{i-1}, padded with zero
        // tensors to reach the expected channel count
        let mut chain_tape: Tape<f64> = Tape::new();
        let mut order2 = Vec::new();
        let vars2 = p.bind(&mut chain_tape, &mut order2);
        let xv2 = chain_tape.leaf(x, false);
        let h0 = vars2.entry.forward(&mut chain_tape, xv2, 0.1).unwrap();
        let mut h = chain_tape.leaky_relu(h0, 0.1);
        for (i, layer) in vars2.layers.iter().enumerate() {
            let needed = cf * (i + 1);
            let cur = chain_tape.shape(h).c;
            let input = if needed > cur {
                let pad = chain_tape.leaf(
                    Tensor::zeros(Shape::new(1, needed - cur, 8, 8)),
                    false,
                );
                chain_tape.concat_channels(&[h, pad]).unwrap()
            } else {
                h
            };
            let y = layer.apply(&mut chain_tape, input, 1).unwrap();
            h = chain_tape.leaky_relu(y, 0.1);
        }

        let a = tape.value(dense).data();
        let b = chain_tape.value(h).data();
        assert!(
            a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9),
            "dense and chain wiring should differ"
        );
    }

    #[test]
    fn shared_weights_mean_one_parameter_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = UfenParams::<f32>::init(8, &mut rng);
        let mut out = Vec::new();
        p.collect(&mut out);
        // entry (6 tensors) + six layers (2 each)
        assert_eq!(out.len(), 6 + 2 * NUM_DENSE_LAYERS);
        // three streams reuse the same bound leaves: binding once, running
        // forward three times keeps the leaf count unchanged
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = p.bind(&mut tape, &mut order);
        let before = order.len();
        for size in [16, 8, 8] {
            let x = tape.leaf(Tensor::filled(Shape::new(1, 3, size, size), 0.2), false);
            vars.forward(&mut tape, x, 0.1).unwrap();
        }
        assert_eq!(order.len(), before);
    }
}
