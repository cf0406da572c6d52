//! Turning branch scores into ranked HOI detections.

use rayon::prelude::*;

use crate::branches::{fuse, FuseInputs, ImageFeatures, ScoreBundle, StudentModel, Variant};
use crate::distill::{ImageSupervision, SupervisionCache};
use crate::encoder::Trunk;
use crate::evaluator::{DetectionEntry, ImageDetections};
use crate::labels::LabelSpace;
use crate::synthworld::Split;
use crate::tensorcore::Tensor;
use crate::{Error, Result};

/// Frozen-trunk features for every image of `split`.
pub fn extract_split(trunk: &Trunk, split: &Split, max_pairs: usize) -> Result<Vec<ImageFeatures>> {
    (0..split.len())
        .into_par_iter()
        .map(|i| {
            let id = split.gt.images[i].id;
            ImageFeatures::extract(trunk, id, &split.images[i], &split.proposals[i].proposals, max_pairs)
        })
        .collect()
}

/// For each detector class id, the HOI class indices sharing its object.
fn classes_by_object(labels: &LabelSpace) -> Vec<(u32, Vec<usize>)> {
    labels
        .objects
        .iter()
        .filter_map(|o| {
            let id = labels.object_class_id(o)?;
            Some((id, labels.hois.iter().enumerate().filter(|(_, h)| &h.object == o).map(|(i, _)| i).collect()))
        })
        .collect()
}

/// Detections for one image. A pair only proposes the classes whose object
/// matches the object proposal's class; pairs whose second box is a person
/// or an unknown class propose nothing.
pub fn detect_image(
    labels: &LabelSpace,
    feats: &ImageFeatures,
    bundle: Option<&ScoreBundle>,
    teacher: Option<&ImageSupervision>,
    variant: Variant,
    gamma: f64,
) -> Result<ImageDetections> {
    let by_object = classes_by_object(labels);
    let mut detections = Vec::new();
    for (m, pair) in feats.pairs.iter().enumerate() {
        let Some((_, classes)) = by_object.iter().find(|(id, _)| *id == pair.object.class_id) else {
            continue;
        };
        let inputs = FuseInputs {
            s_g: bundle.and_then(|b| b.s_g.as_deref()),
            s_u: bundle.and_then(|b| b.s_u.get(m)).map(|r| r.as_slice()),
            p_ho: bundle.and_then(|b| b.p_ho.get(m)).map(|r| r.as_slice()),
            d_g: teacher.map(|t| t.d_g.as_slice()),
            d_u: teacher.and_then(|t| t.d_u.get(m)).map(|r| r.as_slice()),
        };
        let scores = fuse(&inputs, pair.human.score.clamp(0.0, 1.0), pair.object.score.clamp(0.0, 1.0), gamma, variant)?;
        for &c in classes {
            detections.push(DetectionEntry {
                human: pair.human.bbox,
                object: pair.object.bbox,
                hoi_id: labels.hois[c].id,
                score: scores[c],
            });
        }
    }
    Ok(ImageDetections { image_id: feats.image_id, detections })
}

/// Source of per-pair class scores at inference.
pub enum Scorer<'a> {
    Student { model: &'a StudentModel, embedding: &'a Tensor<f32> },
    /// Precomputed teacher distributions for the evaluated split.
    Teacher(&'a SupervisionCache),
}

/// Runs `scorer` over every image. Results are in `features` order.
pub fn infer(
    labels: &LabelSpace,
    features: &[ImageFeatures],
    scorer: &Scorer,
    variant: Variant,
    gamma: f64,
) -> Result<Vec<ImageDetections>> {
    if variant.training_free() != matches!(scorer, Scorer::Teacher(_)) {
        return Err(Error::Config(format!(
            "variant {} needs {} scores",
            variant.name(),
            if variant.training_free() { "teacher" } else { "student" }
        )));
    }
    features
        .par_iter()
        .map(|f| match scorer {
            Scorer::Student { model, embedding } => {
                let bundle = model.scores(f, embedding)?;
                detect_image(labels, f, Some(&bundle), None, variant, gamma)
            }
            Scorer::Teacher(cache) => {
                let sup = cache.lookup(f.image_id, &f.pairs)?;
                detect_image(labels, f, None, Some(sup), variant, gamma)
            }
        })
        .collect()
}
