//! Synthetic paired data: clean toy scenes, a parametric underwater
//! degradation model, and deterministic dataset materialization.
//!
//! The degradation follows the single-scatter formation model. Direct
//! light decays exponentially with depth at a per-channel rate (red
//! fastest), backscatter fills in as a veiling color, a gamma exponent
//! darkens the result, and Gaussian sensor noise is added:
//!
//!   t_c   = exp(−β_c · depth)
//!   out_c = (in_c · t_c + B_c · (1 − t_c))^γ + N(0, σ)
//!
//! clipped to [0,1]. Everything is a pure function of its seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image_io::{read_image, write_image, ImageIoError, ImageRGB};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Image(#[from] ImageIoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("invalid degradation parameters: {0}")]
    BadParams(String),
    #[error("class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("sample size {0} below the 32-pixel minimum")]
    TooSmall(usize),
}

/// Parameters of the underwater image formation model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationParams {
    /// Per-channel attenuation coefficients (1/m) for (R, G, B).
    pub beta: [f64; 3],
    /// Optical path length in meters.
    pub depth: f64,
    /// Veiling color approached as depth grows.
    pub backscatter: [f64; 3],
    /// Darkening exponent (≥ 1).
    pub gamma: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        DegradationParams {
            beta: [1.2, 0.6, 0.4],
            depth: 2.0,
            backscatter: [0.10, 0.30, 0.35],
            gamma: 1.8,
            noise_sigma: 0.02,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.beta.iter().any(|b| *b < 0.0) {
            return Err(DataError::BadParams("attenuation must be nonnegative".into()));
        }
        if self.beta[0] < self.beta[2] {
            return Err(DataError::BadParams(
                "red attenuation must be at least blue attenuation".into(),
            ));
        }
        if self.depth < 0.0 {
            return Err(DataError::BadParams("depth must be nonnegative".into()));
        }
        if self.backscatter.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(DataError::BadParams("backscatter outside [0,1]".into()));
        }
        if self.gamma < 1.0 {
            return Err(DataError::BadParams("gamma must be at least 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::BadParams("noise sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Apply the formation model. Deterministic for a fixed seed; exact
/// identity when depth = 0, γ = 1 and σ = 0.
pub fn degrade(img: &ImageRGB, p: &DegradationParams, seed: u64) -> ImageRGB {
    let t = [
        (-p.beta[0] * p.depth).exp(),
        (-p.beta[1] * p.depth).exp(),
        (-p.beta[2] * p.depth).exp(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if p.noise_sigma > 0.0 {
        Some(Normal::new(0.0, p.noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    ImageRGB::from_fn(img.width(), img.height(), |x, y| {
        let px = img.pixel(x, y);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let mut v = px[c] as f64 * t[c] + p.backscatter[c] * (1.0 - t[c]);
            if p.gamma != 1.0 {
                v = v.powf(p.gamma);
            }
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            out[c] = v as f32;
        }
        out
    })
}

/// One generated training example.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub clean: ImageRGB,
    pub degraded: ImageRGB,
    pub label: usize,
    /// The parameters that produced `degraded` (recorded in the manifest).
    pub degradation: DegradationParams,
}

pub const NUM_CLASSES: usize = 4;

/// Depth range the per-sample degradation draws from.
const DEPTH_RANGE: (f64, f64) = (1.2, 3.0);

fn rotate(u: f64, v: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * u + s * v, -s * u + c * v)
}

/// Point-in-shape predicates in unit-disk local coordinates, one shape
/// per class: ellipse, triangle, crescent, ring.
fn inside(class: usize, u: f64, v: f64, aspect: f64) -> bool {
    match class {
        0 => u * u + (v / aspect) * (v / aspect) <= 1.0,
        1 => {
            // equilateral triangle, vertices at 90°, 210°, 330°
            let verts = [
                (0.0, 1.0),
                (-0.866_025_403_784, -0.5),
                (0.866_025_403_784, -0.5),
            ];
            let mut sign = 0.0f64;
            for i in 0..3 {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % 3];
                let cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax);
                if cross != 0.0 {
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if sign != cross.signum() {
                        return false;
                    }
                }
            }
            true
        }
        2 => {
            let d2 = u * u + v * v;
            let hole = (u - 0.45) * (u - 0.45) + v * v;
            d2 <= 1.0 && hole > 0.64
        }
        3 => {
            let d2 = u * u + v * v;
            (0.55 * 0.55..=1.0).contains(&d2)
        }
        _ => false,
    }
}

/// Render a class-distinctive shape with randomized pose over a mildly
/// textured dark background, then degrade it with parameters drawn from
/// seeded ranges. Fully reproducible from (class, size, seed).
pub fn gen_toy_sample(class_id: usize, size: usize, seed: u64) -> Result<ToySample, DataError> {
    if class_id >= NUM_CLASSES {
        return Err(DataError::BadClass {
            class: class_id,
            classes: NUM_CLASSES,
        });
    }
    if size < 32 {
        return Err(DataError::TooSmall(size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // pose
    let cx = rng.gen_range(0.38..0.62) * size as f64;
    let cy = rng.gen_range(0.38..0.62) * size as f64;
    let radius = rng.gen_range(0.20..0.30) * size as f64;
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let aspect = rng.gen_range(0.62..1.0);

    // bright foreground over a dark textured background
    let fg = [
        rng.gen_range(0.65..0.95) as f32,
        rng.gen_range(0.65..0.95) as f32,
        rng.gen_range(0.65..0.95) as f32,
    ];
    let base = [
        rng.gen_range(0.18..0.30) as f32,
        rng.gen_range(0.18..0.30) as f32,
        rng.gen_range(0.18..0.30) as f32,
    ];
    let amp = rng.gen_range(0.02..0.06) as f32;
    let (fx, fy) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let (phx, phy) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );

    let tau = std::f64::consts::TAU;
    let clean = ImageRGB::from_fn(size, size, |x, y| {
        let tex = ((tau * fx * x as f64 / size as f64 + phx).sin()
            * (tau * fy * y as f64 / size as f64 + phy).sin()) as f32
            * amp;
        // 2×2 supersampled coverage
        let mut hits = 0;
        for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let (u, v) = rotate(
                (x as f64 + dx - cx) / radius,
                (y as f64 + dy - cy) / radius,
                theta,
            );
            if inside(class_id, u, v, aspect) {
                hits += 1;
            }
        }
        let cov = hits as f32 / 4.0;
        [
            base[0] + tex + cov * (fg[0] - (base[0] + tex)),
            base[1] + tex + cov * (fg[1] - (base[1] + tex)),
            base[2] + tex + cov * (fg[2] - (base[2] + tex)),
        ]
    });

    let degradation = DegradationParams {
        depth: rng.gen_range(DEPTH_RANGE.0..DEPTH_RANGE.1),
        ..DegradationParams::default()
    };
    let degraded = degrade(&clean, &degradation, seed ^ 0x9e37_79b9_7f4a_7c15);

    Ok(ToySample {
        clean,
        degraded,
        label: class_id,
        degradation,
    })
}

/// Sizes of the generated splits.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    pub classes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train: 512,
            val: 128,
            test: 256,
            size: 64,
            classes: NUM_CLASSES,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn mix_seed(seed: u64, split: u64, index: u64) -> u64 {
    // splitmix64 over the packed identity
    let mut z = seed
        .wrapping_add(split.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Materialize the dataset under `root`:
/// `<root>/<split>/<class>/<seed>_clean.ppm` plus `<seed>_degraded.ppm`,
/// and a tab-separated `manifest.tsv` with columns
/// (split, class, seed, depth, sigma).
pub fn generate_dataset(root: &Path, seed: u64, spec: &DatasetSpec) -> Result<(), DataError> {
    let mut manifest = String::from("split\tclass\tseed\tdepth\tsigma\n");
    for (split_id, (split, count)) in SPLITS
        .iter()
        .zip([spec.train, spec.val, spec.test])
        .enumerate()
    {
        for i in 0..count {
            let class = i % spec.classes;
            let sample_seed = mix_seed(seed, split_id as u64, i as u64);
            let sample = gen_toy_sample(class, spec.size, sample_seed)?;
            let dir = root.join(split).join(class.to_string());
            fs::create_dir_all(&dir).map_err(|source| DataError::Io {
                path: dir.clone(),
                source,
            })?;
            write_image(&sample.clean, &dir.join(format!("{sample_seed}_clean.ppm")))?;
            write_image(
                &sample.degraded,
                &dir.join(format!("{sample_seed}_degraded.ppm")),
            )?;
            manifest.push_str(&format!(
                "{split}\t{class}\t{sample_seed}\t{:.6}\t{:.6}\n",
                sample.degradation.depth, sample.degradation.noise_sigma
            ));
        }
    }
    let path = root.join("manifest.tsv");
    let mut f = fs::File::create(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    f.write_all(manifest.as_bytes())
        .map_err(|source| DataError::Io { path, source })
}

/// One loaded example: the degraded image and its class label.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub degraded: ImageRGB,
    pub label: usize,
}

/// Load every sample of one split, driven by the manifest. Any missing or
/// corrupt file rejects the whole load.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<LoadedSample>, DataError> {
    let path = root.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some("split\tclass\tseed\tdepth\tsigma") => {}
        other => {
            return Err(DataError::Manifest {
                path,
                msg: format!("unexpected header {other:?}"),
            })
        }
    }
    let mut samples = Vec::new();
    for (no, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(DataError::Manifest {
                path,
                msg: format!("row {} has {} fields, expected 5", no + 2, fields.len()),
            });
        }
        if fields[0] != split {
            continue;
        }
        let label: usize = fields[1].parse().map_err(|_| DataError::Manifest {
            path: path.clone(),
            msg: format!("row {}: bad class {:?}", no + 2, fields[1]),
        })?;
        let file = root
            .join(split)
            .join(fields[1])
            .join(format!("{}_degraded.ppm", fields[2]));
        samples.push(LoadedSample {
            degraded: read_image(&file)?,
            label,
        });
    }
    if samples.is_empty() {
        return Err(DataError::Manifest {
            path,
            msg: format!("no rows for split {split:?}"),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_depth_unit_gamma_is_identity() {
        let img = ImageRGB::from_fn(8, 8, |x, y| [x as f32 / 7.0, y as f32 / 7.0, 0.5]);
        let p = DegradationParams {
            depth: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            ..DegradationParams::default()
        };
        assert_eq!(degrade(&img, &p, 1), img);
    }

    #[test]
    fn infinite_depth_limit_is_backscatter() {
        let img = ImageRGB::filled(4, 4, [0.9, 0.1, 0.5]);
        let p = DegradationParams {
            depth: 500.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            ..DegradationParams::default()
        };
        let out = degrade(&img, &p, 1);
        let px = out.pixel(2, 2);
        for c in 0..3 {
            assert!((px[c] as f64 - p.backscatter[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let img = ImageRGB::filled(2, 2, [0.8, 0.8, 0.8]);
        let p = DegradationParams {
            beta: [1.2, 0.6, 0.4],
            depth: 1.0,
            backscatter: [0.1, 0.3, 0.35],
            gamma: 1.0,
            noise_sigma: 0.0,
        };
        let out = degrade(&img, &p, 0);
        let px = out.pixel(0, 0);
        for c in 0..3 {
            let t = (-p.beta[c] * 1.0f64).exp();
            let want = 0.8 * t + p.backscatter[c] * (1.0 - t);
            assert!((px[c] as f64 - want).abs() < 1e-6, "channel {c}");
        }
    }

    #[test]
    fn deeper_water_moves_pixels_toward_backscatter() {
        let img = ImageRGB::filled(3, 3, [0.9, 0.05, 0.6]);
        let p0 = DegradationParams {
            gamma: 1.0,
            noise_sigma: 0.0,
            ..DegradationParams::default()
        };
        let mut last = f64::INFINITY;
        for depth in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let p = DegradationParams { depth, ..p0 };
            let px = degrade(&img, &p, 0).pixel(1, 1);
            let dist: f64 = (0..3)
                .map(|c| (px[c] as f64 - p.backscatter[c]).abs())
                .sum();
            assert!(dist <= last + 1e-9, "distance grew at depth {depth}");
            last = dist;
        }
    }

    #[test]
    fn degradation_reduces_contrast() {
        let img = ImageRGB::from_fn(16, 16, |x, y| {
            [
                ((x * 7 + y * 3) % 16) as f32 / 15.0,
                ((x * 3 + y * 11) % 16) as f32 / 15.0,
                ((x + y) % 16) as f32 / 15.0,
            ]
        });
        let p = DegradationParams {
            depth: 1.5,
            gamma: 1.0,
            noise_sigma: 0.0,
            ..DegradationParams::default()
        };
        let out = degrade(&img, &p, 0);
        for c in 0..3 {
            let std = |im: &ImageRGB| {
                let vals: Vec<f64> = (0..16)
                    .flat_map(|y| (0..16).map(move |x| (x, y)))
                    .map(|(x, y)| im.pixel(x, y)[c] as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64)
                    .sqrt()
            };
            assert!(std(&out) <= std(&img) + 1e-9);
        }
    }

    #[test]
    fn samples_are_reproducible() {
        let a = gen_toy_sample(2, 32, 99).unwrap();
        let b = gen_toy_sample(2, 32, 99).unwrap();
        assert_eq!(a.clean, b.clean);
        assert_eq!(a.degraded, b.degraded);
        assert_eq!(a.degradation, b.degradation);
    }

    #[test]
    fn invalid_class_is_rejected() {
        assert!(gen_toy_sample(NUM_CLASSES, 32, 0).is_err());
        assert!(gen_toy_sample(0, 16, 0).is_err());
    }

    #[test]
    fn ellipse_and_triangle_separate_by_bbox_fill() {
        // pixel-count probe: fraction of bright pixels inside their own
        // bounding box distinguishes class 0 from class 1
        let mut correct = 0;
        let trials = 200;
        for s in 0..trials {
            for class in [0usize, 1] {
                let sample = gen_toy_sample(class, 64, 7000 + s).unwrap();
                let img = &sample.clean;
                let (mut minx, mut maxx, mut miny, mut maxy) = (usize::MAX, 0, usize::MAX, 0);
                let mut count = 0usize;
                for y in 0..64 {
                    for x in 0..64 {
                        let p = img.pixel(x, y);
                        let lum = 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2];
                        if lum > 0.5 {
                            count += 1;
                            minx = minx.min(x);
                            maxx = maxx.max(x);
                            miny = miny.min(y);
                            maxy = maxy.max(y);
                        }
                    }
                }
                assert!(count > 0, "no bright pixels in class {class} seed {s}");
                let bbox = ((maxx - minx + 1) * (maxy - miny + 1)) as f64;
                let fill = count as f64 / bbox;
                let predicted = if fill > 0.58 { 0 } else { 1 };
                if predicted == class {
                    correct += 1;
                }
            }
        }
        let accuracy = correct as f64 / (2 * trials) as f64;
        assert!(accuracy >= 0.99, "separability probe accuracy {accuracy}");
    }

    #[test]
    fn dataset_layout_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            train: 8,
            val: 4,
            test: 4,
            size: 32,
            classes: 4,
        };
        generate_dataset(dir.path(), 5, &spec).unwrap();
        let train = load_split(dir.path(), "train").unwrap();
        assert_eq!(train.len(), 8);
        let mut per_class = [0; 4];
        for s in &train {
            per_class[s.label] += 1;
        }
        assert_eq!(per_class, [2, 2, 2, 2]);
        assert!(load_split(dir.path(), "nope").is_err());
    }
}
