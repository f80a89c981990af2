//! Floating-point RGB images and file I/O (binary PPM and 8-bit PNG).
//!
//! [`ImageRGB`] is the boundary type between files and tensors: components
//! live in [0,1], stored interleaved in row-major order. Files are 8-bit;
//! the float↔byte conversion is round(v·255)/255, so a write/read round
//! trip moves no component by more than 1/510.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Element, Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed image: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("{path}: unsupported format: {msg}")]
    Unsupported { path: PathBuf, msg: String },
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Height×width×3 float image with components in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageIoError> {
        if width == 0 || height == 0 {
            return Err(ImageIoError::Invalid(format!(
                "dimensions {width}x{height} must be positive"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(ImageIoError::Invalid(format!(
                "buffer length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageIoError::Invalid(format!(
                "component {v} outside [0,1]"
            )));
        }
        Ok(ImageRGB {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageRGB {
            width,
            height,
            data,
        }
    }

    /// Build from a per-pixel function; components are clamped to [0,1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        ImageRGB {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0].clamp(0.0, 1.0);
        self.data[i + 1] = rgb[1].clamp(0.0, 1.0);
        self.data[i + 2] = rgb[2].clamp(0.0, 1.0);
    }

    /// Mean of each channel over the whole image.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            sums[0] += px[0] as f64;
            sums[1] += px[1] as f64;
            sums[2] += px[2] as f64;
        }
        let n = (self.width * self.height) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    /// Interleaved HWC → planar NCHW tensor of shape (1, 3, h, w).
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let shape = Shape::new(1, 3, self.height, self.width);
        let mut t = Tensor::zeros(shape);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(x, y);
                for c in 0..3 {
                    t.set(0, c, y, x, E::from_f64(px[c] as f64));
                }
            }
        }
        t
    }

    /// Planar (1, 3, h, w) tensor → image, clamping to [0,1].
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Result<Self, TensorError> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(TensorError::Invalid {
                op: "ImageRGB::from_tensor",
                msg: format!("expected shape (1, 3, h, w), got {s}"),
            });
        }
        let mut data = Vec::with_capacity(s.h * s.w * 3);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    data.push((t.at(0, c, y, x).to_f64() as f32).clamp(0.0, 1.0));
                }
            }
        }
        Ok(ImageRGB {
            width: s.w,
            height: s.h,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self, ImageIoError> {
        if bytes.len() != width * height * 3 {
            return Err(ImageIoError::Invalid(format!(
                "byte length {} does not match {width}x{height}x3",
                bytes.len()
            )));
        }
        Ok(ImageRGB {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

/// Read a PPM (binary P6) or 8-bit PNG image, dispatching on extension.
pub fn read_image(path: &Path) -> Result<ImageRGB, ImageIoError> {
    match extension(path) {
        Some("ppm") => read_ppm(path),
        Some("png") => read_png(path),
        _ => Err(ImageIoError::Unsupported {
            path: path.to_path_buf(),
            msg: "expected a .ppm or .png file".into(),
        }),
    }
}

/// Write an image, dispatching on extension. The write is atomic: a
/// temporary sibling file is renamed into place.
pub fn write_image(img: &ImageRGB, path: &Path) -> Result<(), ImageIoError> {
    let bytes = match extension(path) {
        Some("ppm") => encode_ppm(img),
        Some("png") => encode_png(img, path)?,
        _ => {
            return Err(ImageIoError::Unsupported {
                path: path.to_path_buf(),
                msg: "expected a .ppm or .png file".into(),
            })
        }
    };
    let ext = extension(path).unwrap_or("img");
    let tmp = path.with_extension(format!("{ext}.tmp"));
    fs::write(&tmp, &bytes).map_err(|source| ImageIoError::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| ImageIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

fn read_ppm(path: &Path) -> Result<ImageRGB, ImageIoError> {
    let bytes = fs::read(path).map_err(|source| ImageIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_ppm(&bytes).map_err(|msg| ImageIoError::Malformed {
        path: path.to_path_buf(),
        msg,
    })
}

/// Parse binary PPM: `P6`, then width, height, maxval tokens separated by
/// whitespace (with `#` comments), one whitespace byte, then raw triples.
pub fn parse_ppm(bytes: &[u8]) -> Result<ImageRGB, String> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err("missing P6 magic".into());
    }
    let mut pos = 2;
    let token = |pos: &mut usize| -> Result<usize, String> {
        // skip whitespace and comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err("missing header token".into());
        }
        std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| "bad token".to_string())?
            .parse::<usize>()
            .map_err(|e| format!("bad header number: {e}"))
    };
    let width = token(&mut pos)?;
    let height = token(&mut pos)?;
    let maxval = token(&mut pos)?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (only 8-bit supported)"));
    }
    if width == 0 || height == 0 {
        return Err(format!("invalid dimensions {width}x{height}"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing whitespace after header".into());
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!(
            "truncated raster: expected {need} bytes, found {}",
            raster.len()
        ));
    }
    ImageRGB::from_bytes(width, height, &raster[..need]).map_err(|e| e.to_string())
}

fn read_png(path: &Path) -> Result<ImageRGB, ImageIoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ImageIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |e| ImageIoError::Malformed {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
    )?;
    match &decoded {
        image::DynamicImage::ImageRgb8(_)
        | image::DynamicImage::ImageRgba8(_)
        | image::DynamicImage::ImageLuma8(_)
        | image::DynamicImage::ImageLumaA8(_) => {}
        other => {
            return Err(ImageIoError::Unsupported {
                path: path.to_path_buf(),
                msg: format!("only 8-bit PNG supported, got {:?}", other.color()),
            })
        }
    }
    let rgb = decoded.to_rgb8();
    ImageRGB::from_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

fn encode_png(img: &ImageRGB, path: &Path) -> Result<Vec<u8>, ImageIoError> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.to_bytes())
            .expect("buffer sized from image");
    let mut out = Vec::new();
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| ImageIoError::Malformed {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_stays_within_quantization_bound() {
        let img = ImageRGB::from_fn(7, 5, |x, y| {
            [
                (x as f32) / 6.0,
                (y as f32) / 4.0,
                ((x + y) as f32 / 10.0).min(1.0),
            ]
        });
        let dir = tempfile::tempdir().unwrap();
        for name in ["t.ppm", "t.png"] {
            let path = dir.path().join(name);
            write_image(&img, &path).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!(back.width(), 7);
            assert_eq!(back.height(), 5);
            for (a, b) in img.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn parses_minimal_p6() {
        let mut bytes = b"P6\n4 2\n255\n".to_vec();
        bytes.extend(std::iter::repeat(128u8).take(4 * 2 * 3));
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (4, 2));
        assert!((img.pixel(3, 1)[2] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_truncated_file() {
        let mut bytes = b"P6\n4 2\n255\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(10)); // needs 24
        let err = parse_ppm(&bytes).unwrap_err();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_wide_maxval() {
        let err = parse_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(err.contains("maxval"), "{err}");
    }

    #[test]
    fn ppm_comments_are_skipped() {
        let mut bytes = b"P6\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend([0, 0, 0, 255, 255, 255]);
        let img = parse_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(1, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let img = ImageRGB::from_fn(6, 4, |x, y| [0.25, x as f32 / 5.0, y as f32 / 3.0]);
        let t: crate::tensor::Tensor<f32> = img.to_tensor();
        let back = ImageRGB::from_tensor(&t).unwrap();
        assert_eq!(img, back);
    }
}
