//! Stand-in for a frozen object detector: jittered true boxes plus a few
//! background false positives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Proposal, PERSON_CLASS};

use super::scene::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Each coordinate moves by up to this fraction of the box size.
    pub jitter: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    pub cap: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { jitter: 0.1, fp_rate: 0.5, cap: 20 }
    }
}

/// `{image_id, proposals: [...]}` in descending score order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageProposals {
    pub image_id: u64,
    pub proposals: Vec<Proposal>,
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, j: f64, w: f64, h: f64) -> Option<BBox> {
    if j == 0.0 {
        return b.clamp(w, h);
    }
    for _ in 0..8 {
        let mut d = || rng.random_range(-j..=j);
        let (dw, dh) = (b.width(), b.height());
        let c = BBox::new(b.x1() + d() * dw, b.y1() + d() * dh, b.x2() + d() * dw, b.y2() + d() * dh)
            .ok()
            .and_then(|c| c.clamp(w, h));
        if c.is_some() {
            return c;
        }
    }
    b.clamp(w, h)
}

pub fn detect(scene: &SceneSpec, num_objects: usize, config: &DetectorConfig, seed: u64) -> ImageProposals {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut out = Vec::new();
    for e in &scene.entities {
        if let Some(bbox) = jittered(&mut rng, &e.bbox, config.jitter, w, h) {
            let score = rng.random_range(0.6..1.0);
            out.push(Proposal { bbox, score, class_id: e.class_id, is_human: e.is_human() });
        }
    }
    let n_fp = if config.fp_rate > 0.0 {
        Poisson::new(config.fp_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        let (bw, bh) = (rng.random_range(6.0..20.0), rng.random_range(6.0..20.0));
        let x = rng.random_range(0.0..w - bw);
        let y = rng.random_range(0.0..h - bh);
        let class_id = PERSON_CLASS + rng.random_range(0..=num_objects as u32);
        out.push(Proposal {
            bbox: BBox::new(x, y, x + bw, y + bh).expect("positive extent"),
            score: rng.random_range(0.3..0.9),
            class_id,
            is_human: class_id == PERSON_CLASS,
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(config.cap);
    ImageProposals { image_id: scene.image_id, proposals: out }
}
