//! Scene layout: where people and objects go, and who interacts with what.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, PERSON_CLASS};

use super::rules::{band, split_hoi, verb_of};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Seeds the entity's brightness and texture noise.
    pub appearance: u64,
}

impl Entity {
    pub fn is_human(&self) -> bool {
        self.class_id == PERSON_CLASS
    }

    /// Object index for non-human entities.
    pub fn object_index(&self) -> Option<usize> {
        (!self.is_human()).then(|| (self.class_id - PERSON_CLASS - 1) as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub human: usize,
    pub object: usize,
    pub hoi_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    pub entities: Vec<Entity>,
    /// The first interaction is the scene's dominant one.
    pub interactions: Vec<Interaction>,
}

impl SceneSpec {
    /// Verb index of each human's interaction, if any.
    pub fn human_verb(&self, human: usize, num_objects: usize) -> Option<usize> {
        self.interactions
            .iter()
            .find(|i| i.human == human)
            .map(|i| split_hoi(i.hoi_id, num_objects).0)
    }
}

/// Layout knobs.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayoutParams {
    pub size: usize,
    pub num_verbs: usize,
    pub num_objects: usize,
    pub p_idle: f64,
    pub p_distractor: f64,
}

const TRIES: usize = 60;

fn human_box(rng: &mut impl Rng, scale: f64) -> (f64, f64) {
    (rng.random_range(10.0..13.0) * scale, rng.random_range(20.0..25.0) * scale)
}

fn object_size(rng: &mut impl Rng, scale: f64) -> (f64, f64) {
    let s = rng.random_range(8.0..12.0) * scale;
    (s * rng.random_range(0.85..1.15), s * rng.random_range(0.85..1.15))
}

/// Human and object boxes for `verb`, placed uniformly where both fit.
fn place_pair(rng: &mut impl Rng, verb: usize, scale: f64, size: f64) -> Option<(BBox, BBox)> {
    let (hw, hh) = human_box(rng, scale);
    let (ow, oh) = object_size(rng, scale);
    let b = band(verb);
    // stay strictly inside the band so jitter-free boxes re-derive the verb
    let pad = |lo: f64, hi: f64| (lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo));
    let (dx0, dx1) = pad(b.dx.0, b.dx.1);
    let (dy0, dy1) = pad(b.dy.0, b.dy.1);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let cx = hw / 2.0 + side * rng.random_range(dx0..=dx1) * hw;
    let cy = rng.random_range(dy0..=dy1) * hh;
    let h = BBox::new(0.0, 0.0, hw, hh).ok()?;
    let o = BBox::new(cx - ow / 2.0, cy - oh / 2.0, cx + ow / 2.0, cy + oh / 2.0).ok()?;
    let u = h.union(&o);
    if u.width() > size || u.height() > size {
        return None;
    }
    let tx = rng.random_range(0.0..=size - u.width()) - u.x1();
    let ty = rng.random_range(0.0..=size - u.height()) - u.y1();
    Some((h.translate(tx, ty), o.translate(tx, ty)))
}

fn place_free(rng: &mut impl Rng, w: f64, h: f64, size: f64) -> BBox {
    let x = rng.random_range(0.0..=size - w);
    let y = rng.random_range(0.0..=size - h);
    BBox::new(x, y, x + w, y + h).expect("positive extent")
}

fn clear_of(b: &BBox, others: &[Entity]) -> bool {
    others.iter().all(|e| e.bbox.intersection_area(b) <= 0.0)
}

/// No human/object pair outside `interactions` may fall in a verb band.
fn no_spurious_relations(entities: &[Entity], interactions: &[Interaction], num_verbs: usize) -> bool {
    for (hi, h) in entities.iter().enumerate().filter(|(_, e)| e.is_human()) {
        for (oi, o) in entities.iter().enumerate().filter(|(_, e)| !e.is_human()) {
            let linked = interactions.iter().any(|i| i.human == hi && i.object == oi);
            if !linked && verb_of(&h.bbox, &o.bbox, num_verbs).is_some() {
                return false;
            }
        }
    }
    true
}

fn try_add_pair(
    rng: &mut ChaCha8Rng,
    params: &LayoutParams,
    hoi: u32,
    scale: f64,
    entities: &mut Vec<Entity>,
    interactions: &mut Vec<Interaction>,
) -> bool {
    let (v, o) = split_hoi(hoi, params.num_objects);
    for _ in 0..TRIES {
        let Some((hb, ob)) = place_pair(rng, v, scale, params.size as f64) else { continue };
        if !clear_of(&hb.union(&ob), entities) {
            continue;
        }
        let n = entities.len();
        let mut es = entities.clone();
        es.push(Entity { class_id: PERSON_CLASS, bbox: hb, appearance: rng.random() });
        es.push(Entity { class_id: object_class(o), bbox: ob, appearance: rng.random() });
        let mut is = interactions.clone();
        is.push(Interaction { human: n, object: n + 1, hoi_id: hoi });
        if no_spurious_relations(&es, &is, params.num_verbs) {
            *entities = es;
            *interactions = is;
            return true;
        }
    }
    false
}

fn try_add_single(rng: &mut ChaCha8Rng, params: &LayoutParams, human: bool, entities: &mut Vec<Entity>, interactions: &[Interaction]) {
    for _ in 0..TRIES {
        let (w, h) = if human { human_box(rng, 0.85) } else { object_size(rng, 0.9) };
        let b = place_free(rng, w, h, params.size as f64);
        if !clear_of(&b, entities) {
            continue;
        }
        let class_id = if human { PERSON_CLASS } else { object_class(rng.random_range(0..params.num_objects)) };
        let mut es = entities.clone();
        es.push(Entity { class_id, bbox: b, appearance: rng.random() });
        if no_spurious_relations(&es, interactions, params.num_verbs) {
            *entities = es;
            return;
        }
    }
}

fn object_class(o: usize) -> u32 {
    PERSON_CLASS + 1 + o as u32
}

/// Lays out the dominant pair, an optional smaller second pair, then maybe
/// an idle person and a distractor object.
pub(crate) fn generate_scene(
    rng: &mut ChaCha8Rng,
    image_id: u64,
    params: &LayoutParams,
    primary: u32,
    secondary: Option<u32>,
) -> SceneSpec {
    let mut entities = Vec::new();
    let mut interactions = Vec::new();
    // an empty canvas always fits the dominant pair once it is small enough
    let mut scale = 1.0;
    while !try_add_pair(rng, params, primary, scale, &mut entities, &mut interactions) {
        scale *= 0.9;
    }
    if let Some(hoi) = secondary {
        try_add_pair(rng, params, hoi, 0.75, &mut entities, &mut interactions);
    }
    if rng.random_bool(params.p_idle) {
        try_add_single(rng, params, true, &mut entities, &interactions);
    }
    if rng.random_bool(params.p_distractor) {
        try_add_single(rng, params, false, &mut entities, &interactions);
    }
    SceneSpec { image_id, width: params.size, height: params.size, entities, interactions }
}
