//! Final feature aggregation and the bounded residual image output.
//!
//! The eighth-scale features are upsampled to the attention output's size,
//! concatenated channel-wise, and merged by a 3×3 convolution. A terminal
//! SpecialConv turns the merged features into a 3-channel residual that is
//! squashed by tanh and added onto the color-corrected input. The terminal
//! layer starts entirely at zero, so a fresh model reproduces its input.

use rand::Rng;

use crate::params::{ConvParams, ConvVars, Param};
use crate::special_conv::{SpecialConvParams, SpecialConvVars};
use crate::tensor::{Element, Tape, TensorError, Var};

#[derive(Clone, Debug)]
pub struct FusionParams<E: Element> {
    pub merge: ConvParams<E>,
    pub out_special: SpecialConvParams<E>,
}

impl<E: Element> FusionParams<E> {
    pub fn init(feature_width: usize, rng: &mut impl Rng) -> Self {
        FusionParams {
            merge: ConvParams::init("fusion.merge", 2 * feature_width, feature_width, 3, rng),
            out_special: SpecialConvParams::init_zero("fusion.out_special", feature_width, 3),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> FusionVars {
        FusionVars {
            merge: self.merge.bind(tape, order),
            out_special: self.out_special.bind(tape, order),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        self.merge.collect(out);
        self.out_special.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        self.merge.collect_mut(out);
        self.out_special.collect_mut(out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub merge: ConvVars,
    pub out_special: SpecialConvVars,
}

impl FusionVars {
    /// Upsample the eighth-scale stream to the attention output's size,
    /// concatenate, and merge back to feature_width channels.
    pub fn aggregate_with_eighth<E: Element>(
        &self,
        tape: &mut Tape<E>,
        gsam_out: Var,
        eighth_feat: Var,
        slope: f64,
    ) -> Result<Var, TensorError> {
        let gs = tape.shape(gsam_out);
        let up = tape.resize_bilinear(eighth_feat, gs.h, gs.w)?;
        let cat = tape.concat_channels(&[gsam_out, up])?;
        let merged = self.merge.apply(tape, cat, 1)?;
        Ok(tape.leaky_relu(merged, slope))
    }

    /// Tanh-bounded RGB residual added to the (color-corrected) base image,
    /// clipped to [0,1]. Each residual component lies in (−1, 1).
    pub fn residual_output<E: Element>(
        &self,
        tape: &mut Tape<E>,
        fused: Var,
        base_img: Var,
        slope: f64,
        residual_scale: f64,
    ) -> Result<Var, TensorError> {
        let raw = self.out_special.forward(tape, fused, slope)?;
        let residual = tape.tanh(raw);
        let residual = if residual_scale == 1.0 {
            residual
        } else {
            tape.scale(residual, residual_scale)
        };
        let sum = tape.add(base_img, residual)?;
        Ok(tape.clamp01(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{Shape, Tensor};

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn aggregate_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FusionParams::<f32>::init(8, &mut rng);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let v = p.bind(&mut tape, &mut order);
        let gsam = tape.leaf(Tensor::zeros(Shape::new(1, 8, 64, 64)), false);
        let eighth = tape.leaf(Tensor::zeros(Shape::new(1, 8, 8, 8)), false);
        let fused = v
            .aggregate_with_eighth(&mut tape, gsam, eighth, 0.1)
            .unwrap();
        assert_eq!(tape.shape(fused), Shape::new(1, 8, 64, 64));
    }

    #[test]
    fn zero_terminal_layer_returns_base_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FusionParams::<f64>::init(4, &mut rng);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let v = p.bind(&mut tape, &mut order);
        let fused = tape.leaf(random(Shape::new(1, 4, 6, 6), 3), false);
        let base = tape.leaf(random(Shape::new(1, 3, 6, 6), 4), false);
        let out = v
            .residual_output(&mut tape, fused, base, 0.1, 1.0)
            .unwrap();
        assert_eq!(tape.value(out).data(), tape.value(base).data());
    }

    #[test]
    fn residual_is_bounded_and_output_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = FusionParams::<f64>::init(4, &mut rng);
        for v in p.out_special.conv_w.value.data_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let v = p.bind(&mut tape, &mut order);
        let fused = tape.leaf(random(Shape::new(1, 4, 5, 5), 6), false);
        let base = tape.leaf(random(Shape::new(1, 3, 5, 5), 7), false);

        let raw = v.out_special.forward(&mut tape, fused, 0.1).unwrap();
        let residual = tape.tanh(raw);
        for &r in tape.value(residual).data() {
            assert!(r > -1.0 && r < 1.0);
        }
        let out = v
            .residual_output(&mut tape, fused, base, 0.1, 1.0)
            .unwrap();
        for (&o, &b) in tape.value(out).data().iter().zip(tape.value(base).data()) {
            assert!((0.0..=1.0).contains(&o));
            assert!((o - b).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn fused_output_matches_independent_recomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = FusionParams::<f64>::init(4, &mut rng);
        let gsam_val = random(Shape::new(1, 4, 8, 8), 9);
        let eighth_val = random(Shape::new(1, 4, 1, 1), 10);

        let mut tape = Tape::new();
        let mut order = Vec::new();
        let v = p.bind(&mut tape, &mut order);
        let gsam = tape.leaf(gsam_val.clone(), false);
        let eighth = tape.leaf(eighth_val.clone(), false);
        let fused = v
            .aggregate_with_eighth(&mut tape, gsam, eighth, 0.1)
            .unwrap();

        // recomposition from the primitive ops
        let mut t2: Tape<f64> = Tape::new();
        let mut order2 = Vec::new();
        let v2 = p.bind(&mut t2, &mut order2);
        let g2 = t2.leaf(gsam_val, false);
        let e2 = t2.leaf(eighth_val, false);
        let up = t2.resize_bilinear(e2, 8, 8).unwrap();
        let cat = t2.concat_channels(&[g2, up]).unwrap();
        let conv = t2.conv2d(cat, v2.merge.w, v2.merge.b, 1, 1).unwrap();
        let act = t2.leaky_relu(conv, 0.1);

        for (a, b) in tape.value(fused).data().iter().zip(t2.value(act).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
