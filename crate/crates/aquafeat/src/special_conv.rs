//! Content-aware convolution with statistic-driven channel multipliers.
//!
//! A SpecialConv layer runs an ordinary 3×3 convolution and then rescales
//! each output channel by a multiplier computed from the layer input's
//! per-channel mean and standard deviation. The multiplier map is a small
//! two-layer network ending in 1 + tanh, so multipliers stay in (0,2) and —
//! because its last layer starts at zero — the layer is exactly a plain
//! convolution at initialization.

use rand::Rng;

use crate::params::{he_normal, Param};
use crate::tensor::{Element, Shape, Tape, TensorError, Var};

/// Hidden width of the multiplier network.
pub fn stat_hidden_width(c_out: usize) -> usize {
    (c_out / 2).max(4)
}

#[derive(Clone, Debug)]
pub struct SpecialConvParams<E: Element> {
    pub conv_w: Param<E>,
    pub conv_b: Param<E>,
    pub stat_w1: Param<E>,
    pub stat_b1: Param<E>,
    pub stat_w2: Param<E>,
    pub stat_b2: Param<E>,
}

impl<E: Element> SpecialConvParams<E> {
    /// Random convolution, random first statistics layer, zero final
    /// statistics layer (identity at initialization).
    pub fn init(prefix: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let hidden = stat_hidden_width(c_out);
        SpecialConvParams {
            conv_w: Param::new(format!("{prefix}.conv_w"), he_normal(c_out, c_in, 3, rng)),
            conv_b: Param::zeros(format!("{prefix}.conv_b"), Shape::new(1, c_out, 1, 1)),
            stat_w1: Param::new(
                format!("{prefix}.stat_w1"),
                he_normal(hidden, 2 * c_in, 1, rng),
            ),
            stat_b1: Param::zeros(format!("{prefix}.stat_b1"), Shape::new(1, hidden, 1, 1)),
            stat_w2: Param::zeros(
                format!("{prefix}.stat_w2"),
                Shape::new(c_out, hidden, 1, 1),
            ),
            stat_b2: Param::zeros(format!("{prefix}.stat_b2"), Shape::new(1, c_out, 1, 1)),
        }
    }

    /// Everything zero, including the convolution itself. Used by the
    /// terminal residual layer so a fresh model emits a zero residual.
    pub fn init_zero(prefix: &str, c_in: usize, c_out: usize) -> Self {
        let hidden = stat_hidden_width(c_out);
        SpecialConvParams {
            conv_w: Param::zeros(format!("{prefix}.conv_w"), Shape::new(c_out, c_in, 3, 3)),
            conv_b: Param::zeros(format!("{prefix}.conv_b"), Shape::new(1, c_out, 1, 1)),
            stat_w1: Param::zeros(
                format!("{prefix}.stat_w1"),
                Shape::new(hidden, 2 * c_in, 1, 1),
            ),
            stat_b1: Param::zeros(format!("{prefix}.stat_b1"), Shape::new(1, hidden, 1, 1)),
            stat_w2: Param::zeros(
                format!("{prefix}.stat_w2"),
                Shape::new(c_out, hidden, 1, 1),
            ),
            stat_b2: Param::zeros(format!("{prefix}.stat_b2"), Shape::new(1, c_out, 1, 1)),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> SpecialConvVars {
        let vars = SpecialConvVars {
            conv_w: self.conv_w.bind(tape),
            conv_b: self.conv_b.bind(tape),
            stat_w1: self.stat_w1.bind(tape),
            stat_b1: self.stat_b1.bind(tape),
            stat_w2: self.stat_w2.bind(tape),
            stat_b2: self.stat_b2.bind(tape),
        };
        order.extend([
            vars.conv_w,
            vars.conv_b,
            vars.stat_w1,
            vars.stat_b1,
            vars.stat_w2,
            vars.stat_b2,
        ]);
        vars
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        out.extend([
            &self.conv_w,
            &self.conv_b,
            &self.stat_w1,
            &self.stat_b1,
            &self.stat_w2,
            &self.stat_b2,
        ]);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        out.push(&mut self.conv_w);
        out.push(&mut self.conv_b);
        out.push(&mut self.stat_w1);
        out.push(&mut self.stat_b1);
        out.push(&mut self.stat_w2);
        out.push(&mut self.stat_b2);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpecialConvVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub stat_w1: Var,
    pub stat_b1: Var,
    pub stat_w2: Var,
    pub stat_b2: Var,
}

impl SpecialConvVars {
    /// Per-channel multipliers m = 1 + tanh(W₂·leaky(W₁·s + b₁) + b₂) from
    /// the statistics vector s = [mean(x) ‖ std(x)], shape (1, c_out, 1, 1).
    /// Every component lies strictly inside (0, 2).
    pub fn multiplier<E: Element>(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        slope: f64,
    ) -> Result<Var, TensorError> {
        let (mean, std) = tape.channel_stats(x);
        let stats = tape.concat_channels(&[mean, std])?;
        let hidden = tape.conv2d(stats, self.stat_w1, self.stat_b1, 1, 0)?;
        let hidden = tape.leaky_relu(hidden, slope);
        let z = tape.conv2d(hidden, self.stat_w2, self.stat_b2, 1, 0)?;
        let t = tape.tanh(z);
        Ok(tape.add_scalar(t, 1.0))
    }

    /// Convolution followed by per-channel rescaling; differentiable
    /// through both the convolution and the statistics path.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        slope: f64,
    ) -> Result<Var, TensorError> {
        let y = tape.conv2d(x, self.conv_w, self.conv_b, 1, 1)?;
        let m = self.multiplier(tape, x, slope)?;
        tape.mul_bcast(y, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    fn random_input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_at_init_matches_plain_conv_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SpecialConvParams::<f64>::init("t", 3, 8, &mut rng);
        let x = random_input(Shape::new(2, 3, 5, 5), 1);

        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = p.bind(&mut tape, &mut order);
        let xv = tape.leaf(x.clone(), false);
        let special = vars.forward(&mut tape, xv, 0.1).unwrap();
        let plain = tape
            .conv2d(xv, vars.conv_w, vars.conv_b, 1, 1)
            .unwrap();
        assert_eq!(tape.value(special).data(), tape.value(plain).data());
    }

    #[test]
    fn multipliers_stay_inside_unit_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = SpecialConvParams::<f64>::init("t", 2, 6, &mut rng);
        // make the final statistics layer non-trivial
        for v in p.stat_w2.value.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        for trial in 0..5 {
            let x = random_input(Shape::new(1, 2, 4, 4), 100 + trial);
            let mut tape = Tape::new();
            let mut order = Vec::new();
            let vars = p.bind(&mut tape, &mut order);
            let xv = tape.leaf(x, false);
            let m = vars.multiplier(&mut tape, xv, 0.1).unwrap();
            for &v in tape.value(m).data() {
                assert!(v > 0.0 && v < 2.0, "multiplier {v} outside (0,2)");
            }
        }
    }

    #[test]
    fn constant_input_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SpecialConvParams::<f64>::init("t", 3, 4, &mut rng);
        let x = Tensor::filled(Shape::new(1, 3, 4, 4), 0.7);
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = p.bind(&mut tape, &mut order);
        let xv = tape.leaf(x, false);
        let out = vars.forward(&mut tape, xv, 0.1).unwrap();
        assert!(tape.value(out).all_finite());
        // std of a constant channel is sqrt(eps)
        let (_, std) = tape.channel_stats(xv);
        for &v in tape.value(std).data() {
            assert!((v - crate::tensor::EPS_STAT.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn multiplier_matches_scalar_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = SpecialConvParams::<f64>::init("t", 2, 4, &mut rng);
        for v in p.stat_w2.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in p.stat_b2.value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = random_input(Shape::new(1, 2, 3, 3), 5);

        // scalar oracle: means/stds by hand, then the two-layer map
        let n = 9.0;
        let mut stats = Vec::new();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|y| (0..3).map(move |xx| (y, xx)))
                .map(|(y, xx)| x.at(0, c, y, xx))
                .collect();
            stats.push(vals.iter().sum::<f64>() / n);
        }
        for c in 0..2 {
            let mean = stats[c];
            let var: f64 = (0..3)
                .flat_map(|y| (0..3).map(move |xx| (y, xx)))
                .map(|(y, xx)| (x.at(0, c, y, xx) - mean).powi(2))
                .sum::<f64>()
                / n;
            stats.push((var + crate::tensor::EPS_STAT).sqrt());
        }
        let hidden = stat_hidden_width(4);
        let mut h = vec![0.0; hidden];
        for (i, hv) in h.iter_mut().enumerate() {
            let mut acc = p.stat_b1.value.data()[i];
            for (j, s) in stats.iter().enumerate() {
                acc += p.stat_w1.value.at(i, j, 0, 0) * s;
            }
            *hv = if acc > 0.0 { acc } else { 0.1 * acc };
        }
        let mut expected = vec![0.0; 4];
        for (c, e) in expected.iter_mut().enumerate() {
            let mut acc = p.stat_b2.value.data()[c];
            for (j, hv) in h.iter().enumerate() {
                acc += p.stat_w2.value.at(c, j, 0, 0) * hv;
            }
            *e = 1.0 + acc.tanh();
        }

        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = p.bind(&mut tape, &mut order);
        let xv = tape.leaf(x, false);
        let m = vars.multiplier(&mut tape, xv, 0.1).unwrap();
        for (got, want) in tape.value(m).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
