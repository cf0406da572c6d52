//! Square teacher crops cut from raw images.

use crate::geometry::BBox;
use crate::tensorcore::Tensor;
use crate::{Error, Result};

/// Bilinear resize of the region `[x1, x2] × [y1, y2]` of `image: [h, w, 3]`
/// to `side × side`. Output pixel centres map to source pixel centres; the
/// aspect ratio is not preserved.
pub fn resize_region(image: &Tensor<f32>, region: &BBox, side: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let src = image.data();
    let (sx, sy) = (region.width() / side as f64, region.height() / side as f64);
    let mut out = Vec::with_capacity(side * side * 3);
    for i in 0..side {
        let fy = (region.y1() + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, (fy - fy.floor()) as f32);
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..side {
            let fx = (region.x1() + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, (fx - fx.floor()) as f32);
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let p = |y: usize, x: usize| src[(y * w + x) * 3 + c];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Tensor::new([side, side, 3], out).expect("crop shape")
}

/// Centre square of side `min(h, w)`, resized to `side`.
pub fn make_global_crop(image: &Tensor<f32>, side: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    let s = h.min(w);
    let x1 = (w - s) / 2.0;
    let y1 = (h - s) / 2.0;
    let region = BBox::new(x1, y1, x1 + s, y1 + s).expect("non-empty image");
    resize_region(image, &region, side)
}

/// Union region clamped to the image, stretched to `side × side`.
pub fn make_union_crop(image: &Tensor<f32>, union: &BBox, side: usize) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    let region = union.clamp(w, h).ok_or(Error::BoxOutsideImage)?;
    Ok(resize_region(image, &region, side))
}
