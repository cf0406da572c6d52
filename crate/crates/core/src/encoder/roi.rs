//! ROI-Align onto a fixed 7×7 grid.

use crate::geometry::BBox;
use crate::tensorcore::Tensor;
use crate::{Error, Result};

use super::trunk::{bilinear_into, FeatureMap};

/// Output cells per side.
pub const ROI_SIZE: usize = 7;
/// Cells in one pooled patch.
pub const ROI_CELLS: usize = ROI_SIZE * ROI_SIZE;
const SAMPLES: usize = 2;

/// Pools `bbox` (image pixels) to `[7, 7, D]`.
///
/// Each output cell averages 2×2 bilinear samples placed at the centres of
/// its sub-bins. Grid cell `c` covers feature coordinates `[c, c+1)` and its
/// value sits at `c + 0.5`; samples beyond the outermost centres are clamped.
pub fn roi_align(fm: &FeatureMap, bbox: &BBox) -> Result<Tensor<f32>> {
    if bbox.x2() <= 0.0 || bbox.y2() <= 0.0 || bbox.x1() >= fm.image_w as f64 || bbox.y1() >= fm.image_h as f64 {
        return Err(Error::BoxOutsideImage);
    }
    let (h, w, d) = (fm.height(), fm.width(), fm.dim());
    let s = fm.stride as f64;
    let (x1, y1) = (bbox.x1() / s, bbox.y1() / s);
    let (bw, bh) = (bbox.width() / s / ROI_SIZE as f64, bbox.height() / s / ROI_SIZE as f64);
    let src = fm.grid.data();
    let weight = 1.0 / (SAMPLES * SAMPLES) as f32;
    let mut out = vec![0.0f32; ROI_CELLS * d];
    for i in 0..ROI_SIZE {
        for j in 0..ROI_SIZE {
            let dst = &mut out[(i * ROI_SIZE + j) * d..][..d];
            for sy in 0..SAMPLES {
                let y = y1 + bh * (i as f64 + (sy as f64 + 0.5) / SAMPLES as f64) - 0.5;
                let fy = y.clamp(0.0, (h - 1) as f64) as f32;
                for sx in 0..SAMPLES {
                    let x = x1 + bw * (j as f64 + (sx as f64 + 0.5) / SAMPLES as f64) - 0.5;
                    let fx = x.clamp(0.0, (w - 1) as f64) as f32;
                    bilinear_into(src, h, w, d, fy, fx, weight, dst);
                }
            }
        }
    }
    Ok(Tensor::new([ROI_SIZE, ROI_SIZE, d], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(h: usize, w: usize, d: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..d {
                    data.push(f(y, x, c));
                }
            }
        }
        FeatureMap { grid: Tensor::new([h, w, d], data).unwrap(), image_w: w * 8, image_h: h * 8, stride: 8 }
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn constant_grid_gives_constant_patch() {
        let m = fm(8, 8, 4, |_, _, c| c as f32 - 1.5);
        let p = roi_align(&m, &bx(3.0, 5.0, 40.0, 22.0)).unwrap();
        assert_eq!(p.shape(), &[7, 7, 4]);
        for cell in p.data().chunks(4) {
            for (c, v) in cell.iter().enumerate() {
                assert!((v - (c as f32 - 1.5)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn full_box_is_a_convex_combination() {
        let m = fm(8, 8, 3, |y, x, c| ((y * 13 + x * 7 + c * 5) % 17) as f32 - 8.0);
        let p = roi_align(&m, &bx(0.0, 0.0, 64.0, 64.0)).unwrap();
        for c in 0..3 {
            let vals: Vec<f32> = m.grid.data().iter().skip(c).step_by(3).copied().collect();
            let (lo, hi) = vals.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for cell in p.data().chunks(3) {
                assert!(cell[c] >= lo - 1e-5 && cell[c] <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        // f(x, y) = x at grid coordinate x + 0.5; bilinear interpolation is
        // exact for linear data, so every interior cell equals the mean of
        // its sample abscissae.
        let m = fm(8, 8, 1, |_, x, _| x as f32 + 0.5);
        let b = bx(12.0, 8.0, 52.0, 50.0);
        let p = roi_align(&m, &b).unwrap();
        let bw = b.width() / 8.0 / 7.0;
        for i in 0..7 {
            for j in 0..7 {
                let expected = (0..2).map(|s| b.x1() / 8.0 + bw * (j as f64 + (s as f64 + 0.5) / 2.0)).sum::<f64>() / 2.0;
                assert!((p.data()[i * 7 + j] as f64 - expected).abs() < 1e-5, "cell {i},{j}");
            }
        }
    }

    #[test]
    fn whole_stride_shift_is_consistent() {
        let f = |y: usize, x: usize, c: usize| ((y * 31 + x * 17 + c * 3) % 23) as f32 / 7.0;
        let a = fm(10, 10, 2, f);
        let shifted = fm(10, 10, 2, |y, x, c| f(y.saturating_sub(1), x.saturating_sub(2), c));
        let b = bx(20.0, 18.0, 44.0, 50.0);
        let pa = roi_align(&a, &b).unwrap();
        let pb = roi_align(&shifted, &b.translate(16.0, 8.0)).unwrap();
        for (u, v) in pa.data().iter().zip(pb.data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn boxes_outside_the_image_are_rejected() {
        let m = fm(8, 8, 1, |_, _, _| 0.0);
        assert!(matches!(roi_align(&m, &bx(64.0, 0.0, 80.0, 10.0)), Err(Error::BoxOutsideImage)));
        assert!(roi_align(&m, &bx(-10.0, -10.0, 5.0, 5.0)).is_ok());
    }
}
