//! HOI detection mAP with dual-IoU matching and Full/Rare/Non-Rare splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::labels::LabelSpace;
use crate::{Error, Result};

/// Both boxes must reach this IoU.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: u64,
    pub human: BBox,
    pub object: BBox,
    pub hoi_id: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtInstance {
    pub image_id: u64,
    pub human: BBox,
    pub object: BBox,
    pub hoi_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageInfo {
    pub id: u64,
    pub w: usize,
    pub h: usize,
}

/// `{images: [{id, w, h}], instances: [{image_id, human, object, hoi_id}]}`
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub images: Vec<ImageInfo>,
    pub instances: Vec<GtInstance>,
}

/// One detection inside an [`ImageDetections`] record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    pub human: BBox,
    pub object: BBox,
    pub hoi_id: u32,
    pub score: f64,
}

/// `{image_id, detections: [{human, object, hoi_id, score}]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<DetectionEntry>,
}

/// Flattens per-image records, keeping file order.
pub fn flatten(images: &[ImageDetections]) -> Vec<Detection> {
    images
        .iter()
        .flat_map(|im| {
            im.detections.iter().map(move |d| Detection {
                image_id: im.image_id,
                human: d.human,
                object: d.object,
                hoi_id: d.hoi_id,
                score: d.score,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per class in id order; 0 for classes without ground truth.
    pub per_class_ap: Vec<f64>,
    pub per_class_gt: Vec<usize>,
    pub map_full: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
    pub n_full: usize,
    pub n_rare: usize,
    pub n_nonrare: usize,
    pub rare_threshold: usize,
}

impl EvalReport {
    /// Markdown table with Full / Rare / Non-Rare columns (mAP in percent).
    pub fn markdown(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {title} | Full | Rare | Non-Rare |");
        let _ = writeln!(s, "|---|---|---|---|");
        let _ = writeln!(
            s,
            "| mAP | {:.2} | {:.2} | {:.2} |",
            100.0 * self.map_full,
            100.0 * self.map_rare,
            100.0 * self.map_nonrare
        );
        let _ = writeln!(s, "| classes | {} | {} | {} |", self.n_full, self.n_rare, self.n_nonrare);
        s
    }
}

fn min_iou(h: &BBox, o: &BBox, gt: &GtInstance) -> f64 {
    h.iou(&gt.human).min(o.iou(&gt.object))
}

/// TP flags for detections of one class.
///
/// `dets` must already be in rank order. Each detection claims the unmatched
/// ground truth (same image) with the largest `min(IoU_h, IoU_o)` at or above
/// the threshold; the first such ground truth wins ties.
pub fn match_detections(dets: &[&Detection], gts: &[&GtInstance]) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image_id != d.image_id {
                    continue;
                }
                let q = min_iou(&d.human, &d.object, g);
                if q >= IOU_THRESHOLD && best.is_none_or(|(_, b)| q > b) {
                    best = Some((j, q));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

pub fn average_precision(flags: &[bool], num_gt: usize, mode: ApMode) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // envelope: best precision at this or any later rank
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    match mode {
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall.iter().position(|&r| r >= t - 1e-12).map_or(0.0, |i| precision[i])
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = xs.fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

/// Per-class AP and split means. Classes are rare when their `train_count`
/// is below `rare_threshold`; means only cover classes present in `gts`.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GtInstance],
    labels: &LabelSpace,
    rare_threshold: usize,
    mode: ApMode,
) -> Result<EvalReport> {
    let n = labels.len();
    let mut by_class_det: BTreeMap<u32, Vec<&Detection>> = BTreeMap::new();
    for d in dets {
        labels.get(d.hoi_id)?;
        if !d.score.is_finite() {
            return Err(Error::Numeric(format!("detection score {} for hoi {}", d.score, d.hoi_id)));
        }
        by_class_det.entry(d.hoi_id).or_default().push(d);
    }
    let mut by_class_gt: BTreeMap<u32, Vec<&GtInstance>> = BTreeMap::new();
    for g in gts {
        labels.get(g.hoi_id)?;
        by_class_gt.entry(g.hoi_id).or_default().push(g);
    }
    let mut per_class_ap = vec![0.0; n];
    let mut per_class_gt = vec![0; n];
    for id in 1..=n as u32 {
        let gt = by_class_gt.remove(&id).unwrap_or_default();
        let mut ds = by_class_det.remove(&id).unwrap_or_default();
        // stable: equal scores keep insertion order
        ds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let flags = match_detections(&ds, &gt);
        per_class_gt[id as usize - 1] = gt.len();
        per_class_ap[id as usize - 1] = average_precision(&flags, gt.len(), mode);
    }
    let present = |i: &usize| per_class_gt[*i] > 0;
    let rare = |i: &usize| labels.hois[*i].train_count < rare_threshold;
    let (map_full, n_full) = mean((0..n).filter(present).map(|i| per_class_ap[i]));
    let (map_rare, n_rare) = mean((0..n).filter(present).filter(rare).map(|i| per_class_ap[i]));
    let (map_nonrare, n_nonrare) =
        mean((0..n).filter(present).filter(|i| !rare(i)).map(|i| per_class_ap[i]));
    Ok(EvalReport {
        per_class_ap,
        per_class_gt,
        map_full,
        map_rare,
        map_nonrare,
        n_full,
        n_rare,
        n_nonrare,
        rare_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(image_id: u64, hoi_id: u32) -> GtInstance {
        GtInstance { image_id, human: b(0.0, 0.0, 10.0, 10.0), object: b(20.0, 0.0, 30.0, 10.0), hoi_id }
    }

    fn det_of(g: &GtInstance, score: f64) -> Detection {
        Detection { image_id: g.image_id, human: g.human, object: g.object, hoi_id: g.hoi_id, score }
    }

    #[test]
    fn matching_rules() {
        let g = gt(1, 1);
        let d = det_of(&g, 0.9);
        assert_eq!(match_detections(&[&d, &d], &[&g]), vec![true, false]);

        // human IoU 0.6, object IoU 0.4
        let mut bad = d.clone();
        bad.human = b(0.0, 0.0, 10.0, 6.0);
        bad.object = b(20.0, 0.0, 30.0, 4.0);
        assert!((bad.human.iou(&g.human) - 0.6).abs() < 1e-12);
        assert!((bad.object.iou(&g.object) - 0.4).abs() < 1e-12);
        assert_eq!(match_detections(&[&bad], &[&g]), vec![false]);

        let mut other = d.clone();
        other.image_id = 2;
        assert_eq!(match_detections(&[&other], &[&g]), vec![false]);
    }

    #[test]
    fn matching_prefers_best_overlap() {
        let g1 = gt(1, 1);
        let mut g2 = gt(1, 1);
        g2.human = b(0.0, 0.0, 10.0, 8.0);
        let mut d = det_of(&g1, 0.9);
        d.human = b(0.0, 0.0, 10.0, 8.0);
        let d2 = det_of(&g1, 0.8);
        // d overlaps g2 exactly, so g1 stays free for d2
        assert_eq!(match_detections(&[&d, &d2], &[&g1, &g2]), vec![true, true]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], 2, ApMode::AllPoint), 1.0);
        let ap = average_precision(&[true, false, true], 2, ApMode::AllPoint);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3, ApMode::AllPoint), 0.0);
        assert_eq!(average_precision(&[true], 0, ApMode::AllPoint), 0.0);
        assert_eq!(average_precision(&[true], 1, ApMode::ElevenPoint), 1.0);
        let eleven = average_precision(&[true, false, true], 2, ApMode::ElevenPoint);
        assert!((eleven - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_detections_score_one() {
        let mut labels = LabelSpace::product(&["hold", "ride"], &["cup", "bike"]);
        labels.hois[0].train_count = 3;
        labels.hois[1].train_count = 50;
        let gts = vec![gt(1, 1), gt(1, 2), gt(2, 2)];
        let dets: Vec<Detection> = gts.iter().map(|g| det_of(g, 0.5)).collect();
        let r = evaluate(&dets, &gts, &labels, 10, ApMode::AllPoint).unwrap();
        assert_eq!((r.map_full, r.map_rare, r.map_nonrare), (1.0, 1.0, 1.0));
        assert_eq!((r.n_full, r.n_rare, r.n_nonrare), (2, 1, 1));
        assert_eq!(r.per_class_gt, vec![1, 2, 0, 0]);
    }

    #[test]
    fn unknown_class_is_an_error() {
        let labels = LabelSpace::product(&["hold"], &["cup"]);
        let d = det_of(&gt(1, 2), 0.5);
        assert!(matches!(evaluate(&[d], &[], &labels, 10, ApMode::AllPoint), Err(Error::UnknownHoi(2))));
    }

    #[test]
    fn detections_round_trip_json() {
        let im = ImageDetections {
            image_id: 4,
            detections: vec![DetectionEntry {
                human: b(0.0, 0.0, 1.0, 1.0),
                object: b(1.0, 1.0, 2.0, 2.0),
                hoi_id: 3,
                score: 0.25,
            }],
        };
        let s = serde_json::to_string(&im).unwrap();
        assert!(s.contains("\"human\":[0.0,0.0,1.0,1.0]"));
        assert_eq!(serde_json::from_str::<ImageDetections>(&s).unwrap(), im);
        assert_eq!(flatten(&[im])[0].image_id, 4);
    }
}
