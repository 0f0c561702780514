//! Input-transformation defenses: JPEG re-compression and random
//! resize-and-pad, with a parseable defense-chain syntax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{rgb_to_tensor, tensor_to_rgb};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// JPEG-compress and decompress the image at the given quality (1..=100).
pub fn jpeg_defense<A: Scalar>(image: &Tensor<A>, quality: u8) -> Result<Tensor<A>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "jpeg quality must lie in 1..=100, got {quality}"
        )));
    }
    let rgb = tensor_to_rgb(image)?;
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode(
        rgb.as_raw(),
        rgb.width(),
        rgb.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    let decoded = image::load_from_memory(&buf)?.to_rgb8();
    Ok(rgb_to_tensor(&decoded))
}

/// Bilinear resize of a [3, H, W] image to (new_h, new_w).
pub fn bilinear_resize<A: Scalar>(
    image: &Tensor<A>,
    new_h: usize,
    new_w: usize,
) -> Result<Tensor<A>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("expected [3, H, W] image, got {s:?}"))),
    };
    if new_h == 0 || new_w == 0 {
        return Err(Error::Input("resize target must be nonzero".into()));
    }
    let mut out = Tensor::zeros(&[3, new_h, new_w]);
    // Align-corners=false convention: sample at pixel centers.
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let p00 = image.at3(c, y0, x0).to_f64_();
                let p01 = image.at3(c, y0, x1).to_f64_();
                let p10 = image.at3(c, y1, x0).to_f64_();
                let p11 = image.at3(c, y1, x1).to_f64_();
                let top = p00 * (1.0 - wx) + p01 * wx;
                let bot = p10 * (1.0 - wx) + p11 * wx;
                out.set3(c, y, x, A::from_f64_(top * (1.0 - wy) + bot * wy));
            }
        }
    }
    Ok(out)
}

/// Randomly downscale by a factor in [min_scale, max_scale] and zero-pad
/// back to the original size at a random offset.
pub fn randomization_defense<A: Scalar>(
    image: &Tensor<A>,
    min_scale: f64,
    max_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<A>> {
    if !(0.0 < min_scale && min_scale <= max_scale && max_scale <= 1.0) {
        return Err(Error::Config(format!(
            "randomization scales must satisfy 0 < min <= max <= 1, got {min_scale}-{max_scale}"
        )));
    }
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::Input(format!("expected [3, H, W] image, got {s:?}"))),
    };
    let s = if min_scale == max_scale {
        min_scale
    } else {
        rng.gen_range(min_scale..=max_scale)
    };
    let new_h = ((h as f64 * s).round() as usize).clamp(1, h);
    let new_w = ((w as f64 * s).round() as usize).clamp(1, w);
    let small = bilinear_resize(image, new_h, new_w)?;
    let off_y = if h > new_h { rng.gen_range(0..=(h - new_h)) } else { 0 };
    let off_x = if w > new_w { rng.gen_range(0..=(w - new_w)) } else { 0 };
    let mut out = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for y in 0..new_h {
            for x in 0..new_w {
                out.set3(c, y + off_y, x + off_x, small.at3(c, y, x));
            }
        }
    }
    Ok(out)
}

/// One parsed defense stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DefenseSpec {
    Jpeg { quality: u8 },
    Randomization { min_scale: f64, max_scale: f64 },
}

impl DefenseSpec {
    /// Parse one token: `jpeg:60` or `randomization:0.875-1.0`.
    pub fn parse(token: &str) -> Result<Self> {
        let (name, arg) = token
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("defense token '{token}' missing ':'")))?;
        match name {
            "jpeg" => {
                let quality: u8 = arg.parse().map_err(|_| {
                    Error::Config(format!("invalid jpeg quality '{arg}' in '{token}'"))
                })?;
                if !(1..=100).contains(&quality) {
                    return Err(Error::Config(format!(
                        "jpeg quality must lie in 1..=100, got {quality}"
                    )));
                }
                Ok(Self::Jpeg { quality })
            }
            "randomization" => {
                let (lo, hi) = arg.split_once('-').ok_or_else(|| {
                    Error::Config(format!("randomization arg '{arg}' must be 'min-max'"))
                })?;
                let min_scale: f64 = lo.parse().map_err(|_| {
                    Error::Config(format!("invalid scale '{lo}' in '{token}'"))
                })?;
                let max_scale: f64 = hi.parse().map_err(|_| {
                    Error::Config(format!("invalid scale '{hi}' in '{token}'"))
                })?;
                if !(0.0 < min_scale && min_scale <= max_scale && max_scale <= 1.0) {
                    return Err(Error::Config(format!(
                        "randomization scales must satisfy 0 < min <= max <= 1, got {arg}"
                    )));
                }
                Ok(Self::Randomization { min_scale, max_scale })
            }
            other => Err(Error::Config(format!("unknown defense '{other}'"))),
        }
    }

    pub fn apply<A: Scalar>(&self, image: &Tensor<A>, rng: &mut ChaCha8Rng) -> Result<Tensor<A>> {
        match *self {
            Self::Jpeg { quality } => jpeg_defense(image, quality),
            Self::Randomization { min_scale, max_scale } => {
                randomization_defense(image, min_scale, max_scale, rng)
            }
        }
    }
}

/// Parse a comma-separated defense chain, e.g. `jpeg:60,randomization:0.875-1.0`.
pub fn parse_defense_chain(spec: &str) -> Result<Vec<DefenseSpec>> {
    spec.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(DefenseSpec::parse)
        .collect()
}

/// Apply the stages in order; the seed fixes all random choices.
pub fn apply_defense_chain<A: Scalar>(
    chain: &[DefenseSpec],
    image: &Tensor<A>,
    seed: u64,
) -> Result<Tensor<A>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = image.clone();
    for stage in chain {
        x = stage.apply(&x, &mut rng)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(h: usize, w: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.2 + 0.6 * (y as f64 / h as f64) * ((c + 1) as f64 / 3.0)
                        + 0.1 * (x as f64 / w as f64);
                    t.set3(c, y, x, v);
                }
            }
        }
        t
    }

    #[test]
    fn jpeg_high_quality_is_near_identity_on_smooth_images() {
        let img = smooth_image(32, 16);
        let out = jpeg_defense(&img, 95).unwrap();
        assert_eq!(out.shape(), img.shape());
        let max_err = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.1, "max_err {max_err}");
    }

    #[test]
    fn jpeg_low_quality_distorts_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img: Tensor<f64> =
            crate::nn::uniform_tensor::<f64>(&mut rng, &[3, 32, 16], 0.5).map(|v| v + 0.5);
        let err = |q: u8| {
            let out = jpeg_defense(&img, q).unwrap();
            img.data()
                .iter()
                .zip(out.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        assert!(err(10) > err(95));
    }

    #[test]
    fn jpeg_rejects_bad_quality() {
        let img = smooth_image(8, 8);
        assert!(jpeg_defense(&img, 0).is_err());
        assert!(jpeg_defense(&img, 101).is_err());
    }

    #[test]
    fn bilinear_preserves_constant_images() {
        let img: Tensor<f64> = Tensor::full(&[3, 10, 8], 0.37);
        let out = bilinear_resize(&img, 7, 5).unwrap();
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let img = smooth_image(9, 6);
        let out = bilinear_resize(&img, 9, 6).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_2x_downsample_averages_hand_oracle() {
        // 2x2 single-channel-per-plane image downsampled to 1x1 samples the
        // center: the average of all four pixels.
        let img: Tensor<f64> = Tensor::new(
            vec![3, 2, 2],
            vec![
                0.0, 1.0, 2.0, 3.0, // c0
                4.0, 5.0, 6.0, 7.0, // c1
                0.0, 0.0, 0.0, 0.0, // c2
            ],
        );
        let out = bilinear_resize(&img, 1, 1).unwrap();
        assert!((out.at3(0, 0, 0) - 1.5).abs() < 1e-12);
        assert!((out.at3(1, 0, 0) - 5.5).abs() < 1e-12);
    }

    #[test]
    fn randomization_preserves_shape_and_is_seeded() {
        let img = smooth_image(16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randomization_defense(&img, 0.875, 1.0, &mut rng).unwrap();
        assert_eq!(a.shape(), img.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = randomization_defense(&img, 0.875, 1.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn randomization_at_scale_one_is_identity() {
        let img = smooth_image(12, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = randomization_defense(&img, 1.0, 1.0, &mut rng).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_parsing_roundtrip() {
        let chain = parse_defense_chain("jpeg:60, randomization:0.875-1.0").unwrap();
        assert_eq!(
            chain,
            vec![
                DefenseSpec::Jpeg { quality: 60 },
                DefenseSpec::Randomization { min_scale: 0.875, max_scale: 1.0 },
            ]
        );
        assert!(DefenseSpec::parse("jpeg").is_err());
        assert!(DefenseSpec::parse("jpeg:400").is_err());
        assert!(DefenseSpec::parse("randomization:1.5-2.0").is_err());
        assert!(DefenseSpec::parse("blur:3").is_err());
    }

    #[test]
    fn chain_application_is_deterministic() {
        let img = smooth_image(16, 8);
        let chain = parse_defense_chain("randomization:0.875-1.0,jpeg:60").unwrap();
        let a = apply_defense_chain(&chain, &img, 7).unwrap();
        let b = apply_defense_chain(&chain, &img, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), img.shape());
    }
}
