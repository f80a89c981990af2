//! White-balance color correction toward the median channel.
//!
//! Water absorbs red light much faster than green or blue, which skews the
//! channel means of underwater frames. This preprocessor rescales each
//! channel so its mean matches the median of the three channel means. It is
//! fixed (non-trainable) and runs outside the differentiation tape.

use crate::image_io::ImageRGB;

/// Smallest channel mean used as a gain denominator.
pub const EPS_WB: f64 = 1e-6;
/// Per-channel gains are clamped to this range; unbounded gains on
/// near-black channels would amplify noise.
pub const GAIN_RANGE: (f64, f64) = (0.25, 4.0);

/// Per-channel gains μ_med / μ_c, clamped to [`GAIN_RANGE`].
pub fn channel_gains(means: [f64; 3]) -> [f64; 3] {
    let mut sorted = means;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("means are finite"));
    let median = sorted[1];
    let mut gains = [0.0; 3];
    for c in 0..3 {
        let g = median / means[c].max(EPS_WB);
        gains[c] = g.clamp(GAIN_RANGE.0, GAIN_RANGE.1);
    }
    gains
}

/// Scale every channel toward the median channel mean, clipping to [0,1].
///
/// The median channel itself has gain exactly 1, so it passes through
/// unchanged. Absent clipping, a second application is a no-op: after the
/// first pass all channel means equal the median, so all gains are 1.
pub fn white_balance_to_median(img: &ImageRGB) -> ImageRGB {
    let gains = channel_gains(img.channel_means());
    let gains_f32 = [gains[0] as f32, gains[1] as f32, gains[2] as f32];
    ImageRGB::from_fn(img.width(), img.height(), |x, y| {
        let px = img.pixel(x, y);
        [
            px[0] * gains_f32[0],
            px[1] * gains_f32[1],
            px[2] * gains_f32[2],
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn means_of(img: &ImageRGB) -> [f64; 3] {
        img.channel_means()
    }

    #[test]
    fn gray_image_is_unchanged() {
        let img = ImageRGB::filled(4, 4, [0.5, 0.5, 0.5]);
        assert_eq!(white_balance_to_median(&img), img);
    }

    #[test]
    fn hand_computed_gains() {
        // channel means (0.2, 0.4, 0.8) → median 0.4 → gains (2.0, 1.0, 0.5)
        let img = ImageRGB::filled(2, 2, [0.2, 0.4, 0.8]);
        let gains = channel_gains(means_of(&img));
        assert_eq!(gains, [2.0, 1.0, 0.5]);
        let out = white_balance_to_median(&img);
        let px = out.pixel(0, 0);
        assert!((px[0] - 0.4).abs() < 1e-6);
        assert!((px[1] - 0.4).abs() < 1e-6);
        assert!((px[2] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn extreme_ratio_clamps_gain() {
        // means (0.01, 0.5, 0.6): median/red = 50 → clamp at 4.0
        let img = ImageRGB::filled(3, 3, [0.01, 0.5, 0.6]);
        let gains = channel_gains(means_of(&img));
        assert_eq!(gains[0], 4.0);
        let out = white_balance_to_median(&img);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn second_pass_is_identity_without_clipping() {
        let img = ImageRGB::from_fn(8, 8, |x, y| {
            [
                0.1 + 0.02 * (x as f32 / 8.0),
                0.2 + 0.02 * (y as f32 / 8.0),
                0.3 + 0.01 * ((x + y) as f32 / 16.0),
            ]
        });
        let once = white_balance_to_median(&img);
        // no clipping occurred: all values well below 1
        assert!(once.data().iter().all(|&v| v < 0.99));
        let twice = white_balance_to_median(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_means_converge_to_median() {
        let img = ImageRGB::from_fn(16, 16, |x, _| {
            [0.3 + 0.001 * x as f32, 0.42, 0.5 - 0.001 * x as f32]
        });
        let med = {
            let mut m = means_of(&img);
            m.sort_by(|a, b| a.partial_cmp(b).unwrap());
            m[1]
        };
        let out = white_balance_to_median(&img);
        for mean in means_of(&out) {
            assert!((mean - med).abs() < 1e-6, "{mean} vs {med}");
        }
    }
}
