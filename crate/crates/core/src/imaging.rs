//! Conversions between tensors and 8-bit RGB images.

use std::io::Cursor;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Model values in `[-1, 1]` to `[0, 1]`.
pub fn to_unit<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    t.map(|v| (v + T::one()) * half)
}

/// `[0, 1]` to model values in `[-1, 1]`.
pub fn to_model<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let two = T::lit(2.0);
    t.map(|v| v * two - T::one())
}

fn quantize<T: Real>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3,H,W]` (or `[1,3,H,W]`) in `[0, 1]` to an RGB image; values are clamped.
pub fn unit_to_rgb<T: Real>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(invalid(format!("expected a single CHW image, got shape {s:?}"))),
    };
    if c != 3 {
        return Err(invalid(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])])
    }))
}

/// `[H,W]` in `[0, 1]` to a grayscale image.
pub fn unit_to_gray<T: Real>(t: &Tensor<T>) -> Result<GrayImage> {
    let [h, w] = match t.shape() {
        [h, w] => [*h, *w],
        s => return Err(invalid(format!("expected an HW plane, got shape {s:?}"))),
    };
    let d = t.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([quantize(d[y as usize * w + x as usize])])
    }))
}

/// RGB image to `[3,H,W]` in `[0, 1]`.
pub fn rgb_to_unit<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = T::lit(p[c] as f64 / 255.0);
        }
    }
    Tensor::new([3, h, w], data).expect("consistent extents")
}

/// Optionally center-crop to a square, then resize to `size × size`.
pub fn prepare(img: &DynamicImage, size: u32, center_crop: bool) -> RgbImage {
    let mut rgb = img.to_rgb8();
    if center_crop {
        let side = rgb.width().min(rgb.height());
        let (x, y) = ((rgb.width() - side) / 2, (rgb.height() - side) / 2);
        rgb = imageops::crop_imm(&rgb, x, y, side, side).to_image();
    }
    if rgb.dimensions() == (size, size) {
        rgb
    } else {
        imageops::resize(&rgb, size, size, FilterType::Triangle)
    }
}

pub fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    Ok(image::load_from_memory(bytes)?)
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Tile equally sized images row-major into a `rows × cols` grid.
pub fn grid(images: &[RgbImage], cols: usize, rows: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| invalid("grid of no images"))?;
    let (w, h) = first.dimensions();
    if images.len() > rows * cols {
        return Err(invalid("more images than grid cells"));
    }
    let mut out = RgbImage::new(w * cols as u32, h * rows as u32);
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(invalid("grid images differ in size"));
        }
        let (r, c) = (i / cols, i % cols);
        imageops::replace(&mut out, img, (c as u32 * w) as i64, (r as u32 * h) as i64);
    }
    Ok(out)
}

/// Side of the smallest square grid holding `n` cells.
pub fn grid_side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([x as u8 * 40, y as u8 * 90, 255]));
        let t: Tensor<f64> = rgb_to_unit(&img);
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(unit_to_rgb(&t).unwrap(), img);
    }

    #[test]
    fn grid_sides() {
        assert_eq!(grid_side(1), 1);
        assert_eq!(grid_side(10), 4);
        assert_eq!(grid_side(16), 4);
        let tiles = vec![RgbImage::new(2, 2); 5];
        let g = grid(&tiles, 3, 3).unwrap();
        assert_eq!(g.dimensions(), (6, 6));
    }

    #[test]
    fn crop_then_resize() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(40, 20));
        assert_eq!(prepare(&img, 8, true).dimensions(), (8, 8));
    }
}
