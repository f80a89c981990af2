//! Global-Scale Attention Module: two parallel refinement paths summed
//! with the input.
//!
//! GFA (global feature-aware) pools the feature map along each spatial
//! coordinate, squeezes the pooled descriptors through a shared reduction,
//! and gates the input with a pair of sigmoid attention maps — one per
//! axis. SAFA (scale-aware feature aggregation) projects the
//! full-resolution map and an upsampled lower-resolution context map into
//! a common embedding space and blends them with per-position softmax
//! weights. Both branches end in zero-initialized projections, so the
//! whole module is the identity map on a fresh model:
//!
//!   gsam(x, ctx) = x + gfa(x) + safa(x, ctx)

use rand::Rng;

use crate::params::{ConvParams, ConvVars, Param};
use crate::tensor::{Axis, Element, Tape, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GfaParams<E: Element> {
    pub reduce: ConvParams<E>,
    pub expand_h: ConvParams<E>,
    pub expand_w: ConvParams<E>,
    pub out_proj: ConvParams<E>,
}

impl<E: Element> GfaParams<E> {
    pub fn init(feature_width: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let reduced = feature_width / reduction;
        GfaParams {
            reduce: ConvParams::init("gfa.reduce", feature_width, reduced, 1, rng),
            expand_h: ConvParams::init("gfa.expand_h", reduced, feature_width, 1, rng),
            expand_w: ConvParams::init("gfa.expand_w", reduced, feature_width, 1, rng),
            out_proj: ConvParams::init_zero("gfa.out_proj", feature_width, feature_width, 1),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> GfaVars {
        GfaVars {
            reduce: self.reduce.bind(tape, order),
            expand_h: self.expand_h.bind(tape, order),
            expand_w: self.expand_w.bind(tape, order),
            out_proj: self.out_proj.bind(tape, order),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        self.reduce.collect(out);
        self.expand_h.collect(out);
        self.expand_w.collect(out);
        self.out_proj.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        self.reduce.collect_mut(out);
        self.expand_h.collect_mut(out);
        self.expand_w.collect_mut(out);
        self.out_proj.collect_mut(out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GfaVars {
    pub reduce: ConvVars,
    pub expand_h: ConvVars,
    pub expand_w: ConvVars,
    pub out_proj: ConvVars,
}

impl GfaVars {
    /// Coordinate-pooled spatial attention. Pools over width to get a
    /// per-row descriptor and over height for a per-column descriptor,
    /// reduces both with the shared 1×1 squeeze, expands each into a
    /// sigmoid gate, and modulates the input with both gates.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        slope: f64,
    ) -> Result<Var, TensorError> {
        let row_desc = tape.axis_mean(x, Axis::Width); // (n, c, h, 1)
        let col_desc = tape.axis_mean(x, Axis::Height); // (n, c, 1, w)

        let rh = self.reduce.apply(tape, row_desc, 1)?;
        let rh = tape.leaky_relu(rh, slope);
        let rw = self.reduce.apply(tape, col_desc, 1)?;
        let rw = tape.leaky_relu(rw, slope);

        let eh = self.expand_h.apply(tape, rh, 1)?;
        let gate_h = tape.sigmoid(eh); // (n, c, h, 1)
        let ew = self.expand_w.apply(tape, rw, 1)?;
        let gate_w = tape.sigmoid(ew); // (n, c, 1, w)

        let modulated = tape.mul_bcast(x, gate_h)?;
        let modulated = tape.mul_bcast(modulated, gate_w)?;
        self.out_proj.apply(tape, modulated, 1)
    }
}

#[derive(Clone, Debug)]
pub struct SafaParams<E: Element> {
    pub proj_hi: ConvParams<E>,
    pub proj_ctx: ConvParams<E>,
    pub score_hi: ConvParams<E>,
    pub score_ctx: ConvParams<E>,
    pub back_proj: ConvParams<E>,
}

impl<E: Element> SafaParams<E> {
    pub fn init(feature_width: usize, embed_width: usize, rng: &mut impl Rng) -> Self {
        SafaParams {
            proj_hi: ConvParams::init("safa.proj_hi", feature_width, embed_width, 1, rng),
            proj_ctx: ConvParams::init("safa.proj_ctx", feature_width, embed_width, 1, rng),
            score_hi: ConvParams::init("safa.score_hi", embed_width, 1, 1, rng),
            score_ctx: ConvParams::init("safa.score_ctx", embed_width, 1, 1, rng),
            back_proj: ConvParams::init_zero("safa.back_proj", embed_width, feature_width, 1),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> SafaVars {
        SafaVars {
            proj_hi: self.proj_hi.bind(tape, order),
            proj_ctx: self.proj_ctx.bind(tape, order),
            score_hi: self.score_hi.bind(tape, order),
            score_ctx: self.score_ctx.bind(tape, order),
            back_proj: self.back_proj.bind(tape, order),
        }
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        self.proj_hi.collect(out);
        self.proj_ctx.collect(out);
        self.score_hi.collect(out);
        self.score_ctx.collect(out);
        self.back_proj.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        self.proj_hi.collect_mut(out);
        self.proj_ctx.collect_mut(out);
        self.score_hi.collect_mut(out);
        self.score_ctx.collect_mut(out);
        self.back_proj.collect_mut(out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SafaVars {
    pub proj_hi: ConvVars,
    pub proj_ctx: ConvVars,
    pub score_hi: ConvVars,
    pub score_ctx: ConvVars,
    pub back_proj: ConvVars,
}

impl SafaVars {
    /// Scale-aware aggregation of a high-resolution map with a
    /// lower-resolution context map (upsampled internally). The two
    /// embeddings are blended with per-position softmax weights that sum
    /// to one at every pixel.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        x_hi: Var,
        x_ctx: Var,
    ) -> Result<Var, TensorError> {
        let hs = tape.shape(x_hi);
        let up = tape.resize_bilinear(x_ctx, hs.h, hs.w)?;
        let e_hi = self.proj_hi.apply(tape, x_hi, 1)?;
        let e_ctx = self.proj_ctx.apply(tape, up, 1)?;
        let l_hi = self.score_hi.apply(tape, e_hi, 1)?;
        let l_ctx = self.score_ctx.apply(tape, e_ctx, 1)?;
        let weights = tape.softmax_over_stack(&[l_hi, l_ctx])?;
        let a_hi = tape.mul_bcast(e_hi, weights[0])?;
        let a_ctx = tape.mul_bcast(e_ctx, weights[1])?;
        let agg = tape.add(a_hi, a_ctx)?;
        self.back_proj.apply(tape, agg, 1)
    }
}

/// Tripartite sum of the input, the GFA refinement, and the SAFA
/// aggregation. The residual path is never scaled.
pub fn gsam_forward<E: Element>(
    tape: &mut Tape<E>,
    x_full: Var,
    x_ctx: Var,
    gfa: &GfaVars,
    safa: &SafaVars,
    slope: f64,
) -> Result<Var, TensorError> {
    let spatial = gfa.forward(tape, x_full, slope)?;
    let scales = safa.forward(tape, x_full, x_ctx)?;
    let sum = tape.add(x_full, spatial)?;
    tape.add(sum, scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{Shape, Tensor};

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fresh_gsam_is_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gfa = GfaParams::<f64>::init(8, 4, &mut rng);
        let safa = SafaParams::<f64>::init(8, 4, &mut rng);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let gv = gfa.bind(&mut tape, &mut order);
        let sv = safa.bind(&mut tape, &mut order);
        let x = tape.leaf(random(Shape::new(1, 8, 12, 10), 2), false);
        let ctx = tape.leaf(random(Shape::new(1, 8, 3, 3), 3), false);
        let out = gsam_forward(&mut tape, x, ctx, &gv, &sv, 0.1).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(x).data());
    }

    #[test]
    fn gfa_with_identity_projection_and_zero_gates_scales_by_quarter() {
        // zero attention convs → both sigmoids are 0.5 → x/4
        let fw = 4;
        let mut gfa = GfaParams::<f64>::init(fw, 4, &mut ChaCha8Rng::seed_from_u64(4));
        for p in [
            &mut gfa.reduce,
            &mut gfa.expand_h,
            &mut gfa.expand_w,
        ] {
            for v in p.w.value.data_mut() {
                *v = 0.0;
            }
            for v in p.b.value.data_mut() {
                *v = 0.0;
            }
        }
        // identity 1×1 out_proj
        for c in 0..fw {
            gfa.out_proj.w.value.set(c, c, 0, 0, 1.0);
        }
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let gv = gfa.bind(&mut tape, &mut order);
        let x = tape.leaf(random(Shape::new(1, fw, 5, 6), 8), false);
        let out = gv.forward(&mut tape, x, 0.1).unwrap();
        for (o, i) in tape.value(out).data().iter().zip(tape.value(x).data()) {
            assert!((o - 0.25 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn gfa_gates_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gfa = GfaParams::<f64>::init(8, 4, &mut rng);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let gv = gfa.bind(&mut tape, &mut order);
        let x = tape.leaf(random(Shape::new(2, 8, 6, 7), 9), false);
        let rd = tape.axis_mean(x, Axis::Width);
        let r = gv.reduce.apply(&mut tape, rd, 1).unwrap();
        let r = tape.leaky_relu(r, 0.1);
        let e = gv.expand_h.apply(&mut tape, r, 1).unwrap();
        let gate = tape.sigmoid(e);
        for &v in tape.value(gate).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn safa_weights_form_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let safa = SafaParams::<f64>::init(8, 4, &mut rng);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let sv = safa.bind(&mut tape, &mut order);
        let hi = tape.leaf(random(Shape::new(1, 8, 6, 6), 11), false);
        let ctx = tape.leaf(random(Shape::new(1, 8, 2, 2), 12), false);
        let hs = tape.shape(hi);
        let up = tape.resize_bilinear(ctx, hs.h, hs.w).unwrap();
        let e1 = sv.proj_hi.apply(&mut tape, hi, 1).unwrap();
        let e2 = sv.proj_ctx.apply(&mut tape, up, 1).unwrap();
        let l1 = sv.score_hi.apply(&mut tape, e1, 1).unwrap();
        let l2 = sv.score_ctx.apply(&mut tape, e2, 1).unwrap();
        let w = tape.softmax_over_stack(&[l1, l2]).unwrap();
        let w1 = tape.value(w[0]).data();
        let w2 = tape.value(w[1]).data();
        for (a, b) in w1.iter().zip(w2) {
            assert!((a + b - 1.0).abs() < 1e-6);
            assert!(*a > 0.0 && *b > 0.0);
        }
    }

    #[test]
    fn safa_symmetric_projections_give_convex_combination() {
        // ctx == hi at the same resolution with tied projections and
        // scores: the aggregation equals the projection itself
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut safa = SafaParams::<f64>::init(6, 3, &mut rng);
        safa.proj_ctx = ConvParams {
            w: Param::new("safa.proj_ctx.w", safa.proj_hi.w.value.clone()),
            b: Param::new("safa.proj_ctx.b", safa.proj_hi.b.value.clone()),
        };
        safa.score_ctx = ConvParams {
            w: Param::new("safa.score_ctx.w", safa.score_hi.w.value.clone()),
            b: Param::new("safa.score_ctx.b", safa.score_hi.b.value.clone()),
        };
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let sv = safa.bind(&mut tape, &mut order);
        let hi = tape.leaf(random(Shape::new(1, 6, 4, 4), 14), false);

        let e1 = sv.proj_hi.apply(&mut tape, hi, 1).unwrap();
        // run the full branch with ctx = hi
        let up = tape.resize_bilinear(hi, 4, 4).unwrap();
        let e2 = sv.proj_ctx.apply(&mut tape, up, 1).unwrap();
        let l1 = sv.score_hi.apply(&mut tape, e1, 1).unwrap();
        let l2 = sv.score_ctx.apply(&mut tape, e2, 1).unwrap();
        let w = tape.softmax_over_stack(&[l1, l2]).unwrap();
        let a1 = tape.mul_bcast(e1, w[0]).unwrap();
        let a2 = tape.mul_bcast(e2, w[1]).unwrap();
        let agg = tape.add(a1, a2).unwrap();
        for (got, want) in tape.value(agg).data().iter().zip(tape.value(e1).data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn tripartite_sum_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut gfa = GfaParams::<f64>::init(8, 4, &mut rng);
        let mut safa = SafaParams::<f64>::init(8, 4, &mut rng);
        // non-trivial projections
        for v in gfa.out_proj.w.value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in safa.back_proj.w.value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let gv = gfa.bind(&mut tape, &mut order);
        let sv = safa.bind(&mut tape, &mut order);
        let x = tape.leaf(random(Shape::new(1, 8, 8, 8), 16), false);
        let ctx = tape.leaf(random(Shape::new(1, 8, 2, 2), 17), false);
        let out = gsam_forward(&mut tape, x, ctx, &gv, &sv, 0.1).unwrap();
        let spatial = gv.forward(&mut tape, x, 0.1).unwrap();
        let scales = sv.forward(&mut tape, x, ctx).unwrap();
        let xs = tape.value(x).data();
        let sp = tape.value(spatial).data();
        let sc = tape.value(scales).data();
        for (i, o) in tape.value(out).data().iter().enumerate() {
            assert!((o - (xs[i] + sp[i] + sc[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn branch_outputs_share_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let gfa = GfaParams::<f64>::init(8, 4, &mut rng);
        let safa = SafaParams::<f64>::init(8, 4, &mut rng);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let gv = gfa.bind(&mut tape, &mut order);
        let sv = safa.bind(&mut tape, &mut order);
        let x = tape.leaf(random(Shape::new(1, 8, 64, 64), 20), false);
        let ctx = tape.leaf(random(Shape::new(1, 8, 16, 16), 21), false);
        let out = gsam_forward(&mut tape, x, ctx, &gv, &sv, 0.1).unwrap();
        assert_eq!(tape.shape(out), Shape::new(1, 8, 64, 64));
    }
}
