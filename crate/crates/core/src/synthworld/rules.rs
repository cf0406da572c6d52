//! The rule table: how a verb places its object relative to the human, and
//! how classes look.

use crate::geometry::BBox;

pub const DEFAULT_VERBS: [&str; 6] = ["hold", "ride", "kick", "carry", "throw", "wave"];
pub const DEFAULT_OBJECTS: [&str; 5] = ["ball", "bike", "cup", "kite", "horse"];

/// Object placement band for one verb, in human-box units.
///
/// `dx = |cx_o − cx_h| / w_h` and `dy = (cy_o − y1_h) / h_h`; the object side
/// (left or right) is free.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub dx: (f64, f64),
    pub dy: (f64, f64),
}

/// One band per verb slot; verbs beyond the table reuse it cyclically with
/// a wider offset, which keeps bands disjoint.
const BANDS: [Band; 6] = [
    Band { dx: (0.75, 1.05), dy: (0.35, 0.6) },  // beside, at hand height
    Band { dx: (0.0, 0.2), dy: (1.0, 1.25) },    // underneath
    Band { dx: (0.75, 1.1), dy: (0.85, 1.05) },  // at the feet
    Band { dx: (0.0, 0.2), dy: (-0.5, -0.25) },  // overhead
    Band { dx: (1.7, 2.3), dy: (-0.45, -0.1) },  // far and high
    Band { dx: (0.75, 1.05), dy: (-0.05, 0.15) }, // beside the head
];

pub fn band(verb: usize) -> Band {
    let b = BANDS[verb % BANDS.len()];
    let shift = 3.0 * (verb / BANDS.len()) as f64;
    Band { dx: (b.dx.0 + shift, b.dx.1 + shift), dy: b.dy }
}

/// Relative position of `object` w.r.t. `human` as `(dx, dy)`.
pub fn relation(human: &BBox, object: &BBox) -> (f64, f64) {
    let (hx, _) = human.center();
    let (ox, oy) = object.center();
    ((ox - hx).abs() / human.width(), (oy - human.y1()) / human.height())
}

/// Verb whose band contains the pair's relation, if any.
pub fn verb_of(human: &BBox, object: &BBox, num_verbs: usize) -> Option<usize> {
    let (dx, dy) = relation(human, object);
    (0..num_verbs).find(|&v| {
        let b = band(v);
        (b.dx.0..=b.dx.1).contains(&dx) && (b.dy.0..=b.dy.1).contains(&dy)
    })
}

/// `hoi_id = v · O + o + 1`.
pub fn hoi_id(verb: usize, object: usize, num_objects: usize) -> u32 {
    (verb * num_objects + object + 1) as u32
}

/// Inverse of [`hoi_id`].
pub fn split_hoi(hoi_id: u32, num_objects: usize) -> (usize, usize) {
    let i = hoi_id as usize - 1;
    (i / num_objects, i % num_objects)
}

pub type Rgb = [f32; 3];

pub const SKIN: Rgb = [0.96, 0.8, 0.62];
pub const LEGS: Rgb = [0.12, 0.12, 0.4];
/// Torso colour of a human not involved in any interaction.
pub const IDLE_TORSO: Rgb = [0.55, 0.55, 0.55];

/// Torso colour that marks a verb.
pub fn torso_color(verb: usize) -> Rgb {
    const T: [Rgb; 6] = [
        [0.92, 0.12, 0.12],
        [0.12, 0.78, 0.2],
        [0.18, 0.3, 0.95],
        [0.95, 0.85, 0.1],
        [0.85, 0.2, 0.85],
        [0.1, 0.85, 0.85],
    ];
    hue_cycle(T[verb % T.len()], verb / T.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    HStripes,
    VStripes,
    Checker,
    Ring,
}

/// Fill colour and pattern of an object class.
pub fn object_look(object: usize) -> (Rgb, Pattern) {
    const L: [(Rgb, Pattern); 5] = [
        ([1.0, 0.55, 0.0], Pattern::Solid),
        ([0.95, 0.95, 0.95], Pattern::HStripes),
        ([0.55, 0.3, 0.1], Pattern::Checker),
        ([0.5, 0.1, 0.65], Pattern::Ring),
        ([0.0, 0.45, 0.45], Pattern::VStripes),
    ];
    let (c, p) = L[object % L.len()];
    (hue_cycle(c, object / L.len()), p)
}

fn hue_cycle(c: Rgb, k: usize) -> Rgb {
    let mut out = c;
    out.rotate_left(k % 3);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_are_disjoint() {
        for a in 0..12 {
            for b in a + 1..12 {
                let (p, q) = (band(a), band(b));
                let overlap_x = p.dx.0 <= q.dx.1 && q.dx.0 <= p.dx.1;
                let overlap_y = p.dy.0 <= q.dy.1 && q.dy.0 <= p.dy.1;
                assert!(!(overlap_x && overlap_y), "bands {a} and {b} overlap");
            }
        }
    }

    #[test]
    fn hoi_ids_round_trip() {
        for v in 0..6 {
            for o in 0..5 {
                assert_eq!(split_hoi(hoi_id(v, o, 5), 5), (v, o));
            }
        }
        assert_eq!(hoi_id(0, 0, 5), 1);
        assert_eq!(hoi_id(5, 4, 5), 30);
    }
}
