//! PNG <-> `(3, H, W)` tensor conversion.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn from_rgb_image<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t[(c * h + y as usize) * w + x as usize] = T::lit(px.0[c] as f64 / 255.0);
        }
    }
    t
}

/// Quantizes a `(3, H, W)` tensor in `[0, 1]` to 8-bit RGB.
pub fn to_rgb_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::input(format!("expected (3, H, W) image, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::input(format!("expected 3 channels, got {c}")));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let q = |ch: usize| {
            let v = t[(ch * h + y as usize) * w + x as usize].as_f64().clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        Rgb([q(0), q(1), q(2)])
    }))
}

pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(from_rgb_image(&img.to_rgb8()))
}

pub fn save_rgb<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb_image(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Mirrors a `(C, H, W)` image left to right.
pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = t.clone();
    for plane in 0..t.len() / (h * w) {
        for y in 0..h {
            for x in 0..w {
                out[(plane * h + y) * w + x] = t[(plane * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_round_trip_is_exact() {
        let t = Tensor::<f32>::from_fn(&[3, 4, 5], |i| (i * 7 % 256) as f32 / 255.0);
        let back: Tensor<f32> = from_rgb_image(&to_rgb_image(&t).unwrap());
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn hflip_is_involution() {
        let t = Tensor::<f64>::from_fn(&[3, 2, 5], |i| i as f64);
        assert_ne!(hflip(&t), t);
        assert_eq!(hflip(&hflip(&t)), t);
    }
}
