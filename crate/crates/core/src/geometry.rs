//! Pixel-space boxes, detector proposals, and the pairwise spatial encoding.

use serde::{Deserialize, Serialize};

/// Person class id; object classes follow it.
pub const PERSON_CLASS: u32 = 1;

/// Length of [`spatial_encode`]'s output.
pub const SPATIAL_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid box [{0}, {1}, {2}, {3}]")]
pub struct InvalidBox(pub f64, pub f64, pub f64, pub f64);

/// Axis-aligned box in continuous pixel coordinates, `x1 < x2`, `y1 < y2`.
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = InvalidBox;

    fn try_from(v: [f64; 4]) -> Result<Self, InvalidBox> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, InvalidBox> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 < x2 && y1 < y2;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(InvalidBox(x1, y1, x2, y2))
        }
    }

    /// Box covering a whole `w × h` image.
    pub fn full(w: f64, h: f64) -> Self {
        Self::new(0.0, 0.0, w, h).expect("positive image extent")
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Restriction to `[0, w] × [0, h]`; `None` when nothing with positive area remains.
    pub fn clamp(&self, w: f64, h: f64) -> Option<BBox> {
        BBox::new(self.x1.max(0.0), self.y1.max(0.0), self.x2.min(w), self.y2.min(h)).ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }
}

/// `union_box` as a free function.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    a.union(b)
}

/// Detector output: a box with confidence and class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
    pub is_human: bool,
}

/// Relative layout of a human-object pair:
///
/// `[cx_h/W, cy_h/H, w_h/W, h_h/H, cx_o/W, cy_o/H, w_o/W, h_o/H,
///   (cx_o−cx_h)/W, (cy_o−cy_h)/H, ln(w_o/w_h), ln(h_o/h_h)]`
///
/// Boxes are clamped to the image first. Returns `None` if either box has no
/// area inside the image.
pub fn spatial_encode(human: &BBox, object: &BBox, img_w: f64, img_h: f64) -> Option<[f64; SPATIAL_DIM]> {
    let h = human.clamp(img_w, img_h)?;
    let o = object.clamp(img_w, img_h)?;
    let (hx, hy) = h.center();
    let (ox, oy) = o.center();
    Some([
        hx / img_w,
        hy / img_h,
        h.width() / img_w,
        h.height() / img_h,
        ox / img_w,
        oy / img_h,
        o.width() / img_w,
        o.height() / img_h,
        (ox - hx) / img_w,
        (oy - hy) / img_h,
        (o.width() / h.width()).ln(),
        (o.height() / h.height()).ln(),
    ])
}
