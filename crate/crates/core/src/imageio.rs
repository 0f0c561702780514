//! Conversions between `[3, H, W]` float tensors in [0, 1] and 8-bit RGB
//! images, plus PNG file helpers.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_image_shape<A: Scalar>(t: &Tensor<A>) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::Input(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

/// Quantize a [0, 1] float image to 8-bit RGB (values are clamped).
pub fn tensor_to_rgb<A: Scalar>(t: &Tensor<A>) -> Result<RgbImage> {
    let (h, w) = check_image_shape(t)?;
    let mut img = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let v = t.at3(c, y, x).to_f64_().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    Ok(img)
}

/// Load an 8-bit RGB image into a [0, 1] float tensor of shape [3, H, W].
pub fn rgb_to_tensor<A: Scalar>(img: &RgbImage) -> Tensor<A> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let Rgb([r, g, b]) = *img.get_pixel(x as u32, y as u32);
            for (c, v) in [r, g, b].into_iter().enumerate() {
                t.set3(c, y, x, A::from_f64_(v as f64 / 255.0));
            }
        }
    }
    t
}

pub fn save_png<A: Scalar>(t: &Tensor<A>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save(path).map_err(Error::from)
}

pub fn load_png<A: Scalar>(path: &Path) -> Result<Tensor<A>> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_for_quantized_values() {
        let mut t: Tensor<f64> = Tensor::zeros(&[3, 4, 5]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_png(&t, &path).unwrap();
        let back: Tensor<f64> = load_png(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_image_shapes() {
        let t: Tensor<f64> = Tensor::zeros(&[4, 4]);
        assert!(tensor_to_rgb(&t).is_err());
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let t: Tensor<f64> = Tensor::new(vec![3, 1, 1], vec![-0.5, 0.5, 1.5]);
        let img = tensor_to_rgb(&t).unwrap();
        assert_eq!(*img.get_pixel(0, 0), Rgb([0, 128, 255]));
    }
}
