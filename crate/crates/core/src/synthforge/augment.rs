use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageReader, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Training-time augmentations: horizontal flip, JPEG re-compression, brightness/contrast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub flip_p: f64,
    pub jpeg_p: f64,
    pub jpeg_quality_min: u8,
    pub jpeg_quality_max: u8,
    pub brightness_contrast_p: f64,
    /// Maximum magnitude of both the brightness shift and the relative contrast change.
    pub brightness_contrast_delta: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            flip_p: 0.5,
            jpeg_p: 0.3,
            jpeg_quality_min: 30,
            jpeg_quality_max: 90,
            brightness_contrast_p: 0.3,
            brightness_contrast_delta: 0.2,
        }
    }
}

impl AugConfig {
    /// All probabilities zero: augmentation is the identity.
    pub fn none() -> Self {
        AugConfig {
            flip_p: 0.0,
            jpeg_p: 0.0,
            brightness_contrast_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("aug.flip_p", self.flip_p),
            ("aug.jpeg_p", self.jpeg_p),
            ("aug.brightness_contrast_p", self.brightness_contrast_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(field, format!("probability must be in [0, 1], got {p}")));
            }
        }
        if self.jpeg_quality_min == 0 || self.jpeg_quality_min > self.jpeg_quality_max || self.jpeg_quality_max > 100 {
            return Err(Error::validation(
                "aug.jpeg_quality_min",
                format!(
                    "need 1 <= min <= max <= 100, got {}..{}",
                    self.jpeg_quality_min, self.jpeg_quality_max
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.brightness_contrast_delta) {
            return Err(Error::validation(
                "aug.brightness_contrast_delta",
                format!("must be in [0, 1], got {}", self.brightness_contrast_delta),
            ));
        }
        Ok(())
    }
}

/// `[3, h, w]` tensor in `[0, 1]` to an 8-bit image (rounded, clamped).
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::Shape(format!("expected [3, h, w], got {:?}", t.shape())));
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    }))
}

/// 8-bit image to a `[3, h, w]` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        f32::from(raw[rest * 3 + c]) / 255.0
    })
}

fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (row, x) = (i / w, i % w);
        d[row * w + (w - 1 - x)]
    })
}

/// Encode to JPEG at `quality` and decode back.
pub fn jpeg_round_trip(t: &Tensor<f32>, quality: u8) -> Result<Tensor<f32>> {
    let img = tensor_to_rgb(t)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&img)
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
    let decoded = ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg)
        .decode()
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
    Ok(rgb_to_tensor(&decoded.to_rgb8()))
}

/// Apply each enabled augmentation with its probability; output stays in `[0, 1]`.
///
/// Random draws happen in a fixed order regardless of which augmentations fire, so
/// the rng advances by the same amount for every image.
pub fn apply_augmentations<R: Rng + ?Sized>(image: &Tensor<f32>, cfg: &AugConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let flip = rng.random::<f64>() < cfg.flip_p;
    let jpeg = rng.random::<f64>() < cfg.jpeg_p;
    let quality = rng.random_range(cfg.jpeg_quality_min..=cfg.jpeg_quality_max);
    let bc = rng.random::<f64>() < cfg.brightness_contrast_p;
    let d = cfg.brightness_contrast_delta;
    let brightness = rng.random_range(-d..=d) as f32;
    let contrast = rng.random_range(-d..=d) as f32;

    let mut out = if flip { flip_horizontal(image) } else { image.clone() };
    if jpeg {
        out = jpeg_round_trip(&out, quality)?;
    }
    if bc {
        out = out.map(|v| (1.0 + contrast) * v + brightness);
    }
    if flip || jpeg || bc {
        out = out.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fixture() -> Tensor<f32> {
        Tensor::from_fn(&[3, 16, 16], |i| {
            let (x, y) = ((i % 16) as f32, ((i / 16) % 16) as f32);
            (0.5 + 0.3 * ((x * 0.7).sin() * (y * 0.4).cos())).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn identity_when_disabled() {
        let img = fixture();
        let out = apply_augmentations(&img, &AugConfig::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn certain_flip_mirrors() {
        let img = fixture();
        let cfg = AugConfig {
            flip_p: 1.0,
            ..AugConfig::none()
        };
        let out = apply_augmentations(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(out.data()[(c * 16 + y) * 16 + x], img.data()[(c * 16 + y) * 16 + 15 - x]);
                }
            }
        }
    }

    #[test]
    fn jpeg_changes_pixels_not_shape() {
        let img = fixture();
        let out = jpeg_round_trip(&img, 30).unwrap();
        assert_eq!(out.shape(), img.shape());
        let l1: f32 = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 > 0.0);
    }

    #[test]
    fn rgb_round_trip_is_exact_on_quantized_values() {
        let img = fixture().map(|v| (v * 255.0).round() / 255.0);
        assert!(rgb_to_tensor(&tensor_to_rgb(&img).unwrap()).max_abs_diff(&img) < 1e-7);
    }

    #[test]
    fn validation_names_field() {
        let cfg = AugConfig {
            jpeg_p: 1.5,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "aug.jpeg_p"),
            other => panic!("{other:?}"),
        }
    }
}
