//! Rasterizes a scene into an `[h, w, 3]` tensor in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::BBox;
use crate::tensorcore::Tensor;

use super::rules::{object_look, torso_color, Pattern, Rgb, IDLE_TORSO, LEGS, SKIN};
use super::scene::SceneSpec;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f32>,
}

impl Canvas {
    /// Calls `f(u, v)` for each pixel whose centre lies in `b`, with `(u, v)`
    /// the centre's position inside `b` in `[0, 1)`.
    fn fill(&mut self, b: &BBox, mut f: impl FnMut(f64, f64) -> Option<Rgb>) {
        let y0 = (b.y1() - 0.5).ceil().max(0.0) as usize;
        let x0 = (b.x1() - 0.5).ceil().max(0.0) as usize;
        for y in y0..self.h {
            let cy = y as f64 + 0.5;
            if cy >= b.y2() {
                break;
            }
            for x in x0..self.w {
                let cx = x as f64 + 0.5;
                if cx >= b.x2() {
                    break;
                }
                if let Some(c) = f((cx - b.x1()) / b.width(), (cy - b.y1()) / b.height()) {
                    self.px[(y * self.w + x) * 3..][..3].copy_from_slice(&c);
                }
            }
        }
    }
}

fn shade(c: Rgb, k: f32) -> Rgb {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

pub fn render(scene: &SceneSpec, num_objects: usize) -> Tensor<f32> {
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.image_id ^ 0x5e_ed0f_ba5e);
    let base: Rgb = [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)];
    let mut px = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h {
        let n: f32 = rng.random_range(-0.04..0.04);
        px.extend(base.iter().map(|c| c + n));
    }
    let mut canvas = Canvas { w, h, px };

    // objects first so people stand in front of what they ride
    for e in scene.entities.iter().filter(|e| !e.is_human()) {
        let (color, pattern) = object_look(e.object_index().expect("object entity"));
        let k = ChaCha8Rng::seed_from_u64(e.appearance).random_range(0.85..1.1);
        let (on, off) = (shade(color, k), shade(color, 0.3 * k));
        canvas.fill(&e.bbox, |u, v| {
            let lit = match pattern {
                Pattern::Solid => true,
                Pattern::HStripes => ((v * 4.0) as usize).is_multiple_of(2),
                Pattern::VStripes => ((u * 4.0) as usize).is_multiple_of(2),
                Pattern::Checker => ((u * 3.0) as usize + (v * 3.0) as usize).is_multiple_of(2),
                Pattern::Ring => ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() > 0.22,
            };
            Some(if lit { on } else { off })
        });
    }
    for (i, e) in scene.entities.iter().enumerate().filter(|(_, e)| e.is_human()) {
        let torso = scene.human_verb(i, num_objects).map_or(IDLE_TORSO, torso_color);
        let k = ChaCha8Rng::seed_from_u64(e.appearance).random_range(0.9..1.08);
        let (torso, skin, legs) = (shade(torso, k), shade(SKIN, k), shade(LEGS, k));
        canvas.fill(&e.bbox, |u, v| match v {
            v if v < 0.25 => (0.25..0.75).contains(&u).then_some(skin),
            v if v < 0.62 => Some(torso),
            _ => (!(0.4..0.6).contains(&u)).then_some(legs),
        });
    }
    Tensor::new([h, w, 3], canvas.px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("image shape")
}
