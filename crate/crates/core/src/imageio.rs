//! PNG conversion for channels-first `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub fn to_rgb8(img: &Tensor) -> Result<RgbImage> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err!("expected a [3, H, W] image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

pub fn from_rgb8(im: &RgbImage) -> Tensor {
    let (w, h) = (im.width() as usize, im.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in im.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    to_rgb8(img)?.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    Ok(from_rgb8(&image::open(path)?.to_rgb8()))
}

/// Nearest-neighbour resize to `res x res`.
pub fn resize_nearest(img: &Tensor, res: usize) -> Tensor {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    if h == res && w == res {
        return img.clone();
    }
    let d = img.data();
    Tensor::from_fn(&[c, res, res], |i| {
        let ch = i / (res * res);
        let y = (i / res) % res;
        let x = i % res;
        d[(ch * h + y * h / res) * w + x * w / res]
    })
}

/// Side-by-side grid of equally sized images.
pub fn hstack(images: &[Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else { return Err(shape_err!("no images to stack")) };
    let (c, h, w) = (first.dim(0), first.dim(1), first.dim(2));
    if images.iter().any(|im| im.shape() != first.shape()) {
        return Err(shape_err!("images differ in shape"));
    }
    let n = images.len();
    Ok(Tensor::from_fn(&[c, h, w * n], |i| {
        let ch = i / (h * w * n);
        let y = (i / (w * n)) % h;
        let x = i % (w * n);
        images[x / w].data()[(ch * h + y) * w + x % w]
    }))
}
