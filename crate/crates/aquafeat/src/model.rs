//! Model assembly: configuration, initialization, and the full
//! image-to-image forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::white_balance_to_median;
use crate::fusion::{FusionParams, FusionVars};
use crate::gsam::{gsam_forward, GfaParams, GfaVars, SafaParams, SafaVars};
use crate::head::{ToyHeadParams, ToyHeadVars};
use crate::image_io::ImageRGB;
use crate::params::Param;
use crate::tensor::{Element, Tape, TensorError, Var};
use crate::ufen::{build_pyramid, UfenParams, UfenVars};

/// Architecture hyperparameters. Everything downstream (embedding sizes,
/// hidden widths) derives from these.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel width of the encoder features (C_f).
    pub feature_width: usize,
    /// Embedding width of the scale-fusion branch, normally C_f/2.
    pub embed_width: usize,
    /// Squeeze ratio of the coordinate-attention branch.
    pub gfa_reduction: usize,
    /// Classes of the downstream toy task.
    pub num_classes: usize,
    /// Negative slope shared by every LeakyReLU.
    pub leaky_slope: f64,
    /// Scale of the residual added onto the color-corrected input.
    pub residual_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let feature_width = 8;
        ModelConfig {
            feature_width,
            embed_width: feature_width / 2,
            gfa_reduction: 4,
            num_classes: 4,
            leaky_slope: 0.1,
            residual_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| TensorError::Invalid {
            op: "ModelConfig",
            msg,
        };
        if self.feature_width < 4 {
            return Err(bad(format!(
                "feature_width {} below minimum 4",
                self.feature_width
            )));
        }
        if self.feature_width % self.gfa_reduction != 0 {
            return Err(bad(format!(
                "feature_width {} not divisible by gfa_reduction {}",
                self.feature_width, self.gfa_reduction
            )));
        }
        if self.embed_width == 0 {
            return Err(bad("embed_width must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(bad(format!("num_classes {} below 2", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return Err(bad(format!(
                "leaky_slope {} outside (0,1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Every trainable tensor of the enhancer.
#[derive(Clone, Debug)]
pub struct EnhancerParams<E: Element> {
    pub ufen: UfenParams<E>,
    pub gfa: GfaParams<E>,
    pub safa: SafaParams<E>,
    pub fusion: FusionParams<E>,
}

impl<E: Element> EnhancerParams<E> {
    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Param<E>>) {
        self.ufen.collect(out);
        self.gfa.collect(out);
        self.safa.collect(out);
        self.fusion.collect(out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<E>>) {
        self.ufen.collect_mut(out);
        self.gfa.collect_mut(out);
        self.safa.collect_mut(out);
        self.fusion.collect_mut(out);
    }

    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> EnhancerVars {
        EnhancerVars {
            ufen: self.ufen.bind(tape, order),
            gfa: self.gfa.bind(tape, order),
            safa: self.safa.bind(tape, order),
            fusion: self.fusion.bind(tape, order),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnhancerVars {
    pub ufen: UfenVars,
    pub gfa: GfaVars,
    pub safa: SafaVars,
    pub fusion: FusionVars,
}

impl EnhancerVars {
    /// Full enhancement pass on an already color-corrected image tensor:
    /// pyramid → shared encoder ×3 → attention fusion of full+quarter →
    /// aggregation with the eighth stream → bounded residual on top of the
    /// input. Output shape equals input shape.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        corrected: Var,
        cfg: &ModelConfig,
    ) -> Result<Var, TensorError> {
        let slope = cfg.leaky_slope;
        let pyramid = build_pyramid(tape, corrected)?;
        let f_full = self.ufen.forward(tape, pyramid.full, slope)?;
        let f_quarter = self.ufen.forward(tape, pyramid.quarter, slope)?;
        let f_eighth = self.ufen.forward(tape, pyramid.eighth, slope)?;
        let attended = gsam_forward(tape, f_full, f_quarter, &self.gfa, &self.safa, slope)?;
        let fused = self
            .fusion
            .aggregate_with_eighth(tape, attended, f_eighth, slope)?;
        self.fusion
            .residual_output(tape, fused, corrected, slope, cfg.residual_scale)
    }
}

/// The complete trainable model: enhancer plus downstream toy head.
#[derive(Clone, Debug)]
pub struct Model<E: Element> {
    pub config: ModelConfig,
    pub enhancer: EnhancerParams<E>,
    pub head: ToyHeadParams<E>,
    /// Set on checkpoints trained with the enhancer frozen out of the
    /// pipeline; evaluation then feeds images straight to the head.
    pub enhancer_bypassed: bool,
}

impl<E: Element> Model<E> {
    /// Deterministic initialization from a seed. Residual branches start
    /// at zero, making the whole enhancer the identity map.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enhancer = EnhancerParams {
            ufen: UfenParams::init(config.feature_width, &mut rng),
            gfa: GfaParams::init(config.feature_width, config.gfa_reduction, &mut rng),
            safa: SafaParams::init(config.feature_width, config.embed_width, &mut rng),
            fusion: FusionParams::init(config.feature_width, &mut rng),
        };
        let head = ToyHeadParams::init(config.num_classes, &mut rng);
        Ok(Model {
            config,
            enhancer,
            head,
            enhancer_bypassed: false,
        })
    }

    /// All parameters in canonical order: encoder, attention branches,
    /// fusion, head; declaration order within each block.
    pub fn params(&self) -> Vec<&Param<E>> {
        let mut out = Vec::new();
        self.enhancer.collect(&mut out);
        self.head.collect(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut out = Vec::new();
        self.enhancer.collect_mut(&mut out);
        self.head.collect_mut(&mut out);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Register every parameter on a tape. `order` lines up with
    /// [`Model::params`].
    pub fn bind(&self, tape: &mut Tape<E>, order: &mut Vec<Var>) -> ModelVars {
        let enhancer = self.enhancer.bind(tape, order);
        let head = self.head.bind(tape, order);
        ModelVars { enhancer, head }
    }

    /// Enhance one image: white balance outside the tape, then the full
    /// differentiable pipeline with this model's weights.
    pub fn enhance_frame(&self, img: &ImageRGB) -> Result<ImageRGB, TensorError> {
        let corrected = white_balance_to_median(img);
        let mut tape: Tape<E> = Tape::new();
        let mut order = Vec::new();
        let vars = self.enhancer.bind(&mut tape, &mut order);
        let input = tape.leaf(corrected.to_tensor(), false);
        let out = vars.forward(&mut tape, input, &self.config)?;
        ImageRGB::from_tensor(tape.value(out))
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            config: self.config,
            enhancer: EnhancerParams {
                ufen: UfenParams {
                    entry: cast_special(&self.enhancer.ufen.entry),
                    layers: self
                        .enhancer
                        .ufen
                        .layers
                        .iter()
                        .map(cast_conv)
                        .collect(),
                },
                gfa: GfaParams {
                    reduce: cast_conv(&self.enhancer.gfa.reduce),
                    expand_h: cast_conv(&self.enhancer.gfa.expand_h),
                    expand_w: cast_conv(&self.enhancer.gfa.expand_w),
                    out_proj: cast_conv(&self.enhancer.gfa.out_proj),
                },
                safa: SafaParams {
                    proj_hi: cast_conv(&self.enhancer.safa.proj_hi),
                    proj_ctx: cast_conv(&self.enhancer.safa.proj_ctx),
                    score_hi: cast_conv(&self.enhancer.safa.score_hi),
                    score_ctx: cast_conv(&self.enhancer.safa.score_ctx),
                    back_proj: cast_conv(&self.enhancer.safa.back_proj),
                },
                fusion: FusionParams {
                    merge: cast_conv(&self.enhancer.fusion.merge),
                    out_special: cast_special(&self.enhancer.fusion.out_special),
                },
            },
            head: ToyHeadParams {
                conv1: cast_conv(&self.head.conv1),
                conv2: cast_conv(&self.head.conv2),
                conv3: cast_conv(&self.head.conv3),
                classifier: cast_conv(&self.head.classifier),
            },
            enhancer_bypassed: self.enhancer_bypassed,
        }
    }
}

fn cast_conv<E: Element, F: Element>(
    c: &crate::params::ConvParams<E>,
) -> crate::params::ConvParams<F> {
    crate::params::ConvParams {
        w: c.w.cast(),
        b: c.b.cast(),
    }
}

fn cast_special<E: Element, F: Element>(
    s: &crate::special_conv::SpecialConvParams<E>,
) -> crate::special_conv::SpecialConvParams<F> {
    crate::special_conv::SpecialConvParams {
        conv_w: s.conv_w.cast(),
        conv_b: s.conv_b.cast(),
        stat_w1: s.stat_w1.cast(),
        stat_b1: s.stat_b1.cast(),
        stat_w2: s.stat_w2.cast(),
        stat_b2: s.stat_b2.cast(),
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub enhancer: EnhancerVars,
    pub head: ToyHeadVars,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fresh_model_reproduces_the_color_corrected_input() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let img = ImageRGB::from_fn(24, 16, |_, _| {
            [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
        });
        let expected = white_balance_to_median(&img);
        let got = model.enhance_frame(&img).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn gray_input_passes_through_untouched() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 7).unwrap();
        let img = ImageRGB::filled(16, 16, [0.5, 0.5, 0.5]);
        assert_eq!(model.enhance_frame(&img).unwrap(), img);
    }

    #[test]
    fn param_names_are_unique_and_order_matches_bind() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 1).unwrap();
        let params = model.params();
        let mut names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total, "duplicate parameter names");

        let mut tape: Tape<f32> = Tape::new();
        let mut order = Vec::new();
        model.bind(&mut tape, &mut order);
        assert_eq!(order.len(), total);
        for (var, p) in order.iter().zip(&params) {
            assert_eq!(tape.shape(*var), p.value.shape());
        }
    }

    #[test]
    fn output_resolution_matches_input() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 2).unwrap();
        for (w, h) in [(8, 8), (9, 13), (33, 17)] {
            let img = ImageRGB::filled(w, h, [0.2, 0.5, 0.4]);
            let out = model.enhance_frame(&img).unwrap();
            assert_eq!((out.width(), out.height()), (w, h));
        }
    }

    #[test]
    fn undersized_input_is_rejected() {
        let model: Model<f32> = Model::init(ModelConfig::default(), 3).unwrap();
        let img = ImageRGB::filled(7, 12, [0.3, 0.3, 0.3]);
        assert!(model.enhance_frame(&img).is_err());
    }
}
