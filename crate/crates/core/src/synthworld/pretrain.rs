//! Supervised pretraining of the teacher on labeled crops.
//!
//! This stands in for large-scale vision-language pretraining: the teacher
//! sees ground-truth labels here, the student never does.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::crops::{make_global_crop, make_union_crop};
use crate::encoder::{stack_patches, TeacherModel};
use crate::evaluator::{average_precision, ApMode};
use crate::tensorcore::{AdamW, AdamWConfig, Graph, Tensor};
use crate::{Error, Result};

use crate::geometry::BBox;
use crate::seeds::{item_seed, sub_seed};

use super::dataset::{generate_dataset, Split, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// The learning rate drops ×0.1 after this many iterations.
    pub decay_iter: usize,
    /// Minimum held-out top-1 for the teacher to count as usable.
    pub gate: f64,
    /// Images in the teacher's own pretraining corpus (uniform over classes).
    pub corpus_images: usize,
    /// Union boxes move by up to this fraction of their size during pretraining.
    pub box_jitter: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iters: 8000, batch: 32, lr: 1e-2, decay_iter: 6000, gate: 0.7, corpus_images: 4000, box_jitter: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropKind {
    Global,
    Union,
}

#[derive(Clone, Debug)]
pub struct LabeledCrop {
    pub crop: Tensor<f32>,
    /// Class index (`hoi_id − 1`).
    pub label: usize,
    pub kind: CropKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub train_top1: f64,
    pub heldout_top1: f64,
    pub heldout_global_top1: f64,
    pub heldout_union_top1: f64,
    /// Image-level recognition mAP on test images from global crops.
    pub recognition_map: f64,
    /// The same metric for a scorer that ranks images at random (class prevalence).
    pub recognition_chance: f64,
    pub passed_gate: bool,
}

/// Global crops labeled by the image's dominant HOI, union crops by their
/// pair's HOI. With `jitter > 0` each union box is perturbed (seeded per image).
pub fn labeled_crops(split: &Split, resolution: usize, jitter: f64, seed: u64) -> Result<Vec<LabeledCrop>> {
    let per_image: Vec<Result<Vec<LabeledCrop>>> = split
        .gt
        .images
        .par_iter()
        .zip(&split.images)
        .map(|(info, image)| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, "crop-jitter", info.id));
            let gts = split.gt_for(info.id);
            let mut out = Vec::with_capacity(1 + gts.len());
            if let Some(first) = gts.first() {
                out.push(LabeledCrop {
                    crop: make_global_crop(image, resolution),
                    label: first.hoi_id as usize - 1,
                    kind: CropKind::Global,
                });
            }
            for g in gts {
                out.push(LabeledCrop {
                    crop: make_union_crop(image, &jitter_box(&mut rng, &g.human.union(&g.object), jitter), resolution)?,
                    label: g.hoi_id as usize - 1,
                    kind: CropKind::Union,
                });
            }
            Ok(out)
        })
        .collect();
    Ok(per_image.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, j: f64) -> BBox {
    if j <= 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.random_range(-j..=j);
    BBox::new(b.x1() + d() * w, b.y1() + d() * h, b.x2() + d() * w, b.y2() + d() * h).unwrap_or(*b)
}

fn top1(teacher: &TeacherModel, patches: &[Tensor<f32>], crops: &[&LabeledCrop]) -> Result<f64> {
    if crops.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (chunk_p, chunk_c) in patches.chunks(256).zip(crops.chunks(256)) {
        let probs = teacher.score_patches(chunk_p)?;
        hits += probs.iter().zip(chunk_c).filter(|(p, c)| Tensor::vector(p).argmax() == c.label).count();
    }
    Ok(hits as f64 / crops.len() as f64)
}

fn patches_of(teacher: &TeacherModel, crops: &[LabeledCrop]) -> Result<Vec<Tensor<f32>>> {
    crops.par_iter().map(|c| teacher.patch(&c.crop)).collect()
}

/// Image-level recognition mAP of the teacher's global-crop scores.
#[allow(clippy::needless_range_loop)]
pub fn recognition_map(teacher: &TeacherModel, split: &Split) -> Result<(f64, f64)> {
    let res = teacher.config.resolution;
    let probs = teacher.score_batch(&split.images.iter().map(|im| make_global_crop(im, res)).collect::<Vec<_>>())?;
    let n = teacher.num_classes();
    let (mut ap_sum, mut chance_sum, mut classes) = (0.0, 0.0, 0);
    for c in 0..n {
        let positive: Vec<bool> = split
            .gt
            .images
            .iter()
            .map(|info| split.gt_for(info.id).iter().any(|g| g.hoi_id as usize == c + 1))
            .collect();
        let num_pos = positive.iter().filter(|&&p| p).count();
        if num_pos == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..positive.len()).collect();
        order.sort_by(|&a, &b| probs[b][c].total_cmp(&probs[a][c]));
        let flags: Vec<bool> = order.iter().map(|&i| positive[i]).collect();
        ap_sum += average_precision(&flags, num_pos, ApMode::AllPoint);
        chance_sum += num_pos as f64 / positive.len() as f64;
        classes += 1;
    }
    let k = classes.max(1) as f64;
    Ok((ap_sum / k, chance_sum / k))
}

/// Trains the teacher's pool, alignment head and logit scale with
/// cross-entropy on crops from its own corpus (drawn from `world` with every
/// class equally likely), then freezes it and measures it on `heldout`.
pub fn pretrain_teacher(
    mut teacher: TeacherModel,
    world: &WorldConfig,
    heldout: &Split,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(TeacherModel, TeacherReport)> {
    if config.batch == 0 || config.iters == 0 || config.corpus_images == 0 {
        return Err(Error::Config("teacher pretraining needs a positive batch, iteration count and corpus".into()));
    }
    let res = teacher.config.resolution;
    let corpus_world = WorldConfig { n_train: config.corpus_images, n_test: 0, zipf: 0.0, ..world.clone() };
    let corpus = generate_dataset(&corpus_world, sub_seed(seed, "corpus"))?;
    if corpus.labels.pairs() != teacher.embedding.labels {
        return Err(Error::Config("teacher embedding and world label space differ".into()));
    }
    let train = labeled_crops(&corpus.train, res, config.box_jitter, sub_seed(seed, "jitter"))?;
    let train_patches = patches_of(&teacher, &train)?;
    if train.is_empty() {
        return Err(Error::Config("no labeled training crops".into()));
    }
    let n = teacher.num_classes();
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, ..AdamWConfig::default() }, &teacher.params);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "batches"));
    let batch = config.batch.min(train.len());
    for it in 0..config.iters {
        if it == config.decay_iter {
            opt.set_lr(config.lr * 0.1);
        }
        let idx = sample(&mut rng, train.len(), batch).into_vec();
        let mut g = Graph::<f32>::new();
        let p = teacher.params.bind(&mut g);
        let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &train_patches[i]).collect();
        let x = g.constant(stack_patches(&refs)?);
        let w = g.constant(teacher.embedding.matrix.clone());
        let logits = teacher.logits(&mut g, &p, x, w)?;
        let probs = g.softmax(logits, 1)?;
        let probs = g.add_scalar(probs, 1e-12)?;
        let lp = g.log(probs)?;
        let mut onehot = vec![0.0f32; batch * n];
        for (r, &i) in idx.iter().enumerate() {
            onehot[r * n + train[i].label] = 1.0;
        }
        let y = g.constant(Tensor::new([batch, n], onehot)?);
        let picked = g.mul(lp, y)?;
        let total = g.sum(picked)?;
        let loss = g.scale(total, -1.0 / batch as f64)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!("teacher loss diverged at iteration {it}")));
        }
        let grads = g.backward(loss)?;
        teacher.params.accumulate(&p, &grads, 1.0);
        opt.step(&mut teacher.params)?;
        teacher.clamp_scale();
    }
    teacher.freeze();

    let train_refs: Vec<&LabeledCrop> = train.iter().collect();
    let train_top1 = top1(&teacher, &train_patches, &train_refs)?;
    let held = labeled_crops(heldout, res, 0.0, 0)?;
    let held_patches = patches_of(&teacher, &held)?;
    let pick = |kind: Option<CropKind>| -> (Vec<Tensor<f32>>, Vec<&LabeledCrop>) {
        held.iter()
            .zip(&held_patches)
            .filter(|(c, _)| kind.is_none_or(|k| c.kind == k))
            .map(|(c, p)| (p.clone(), c))
            .unzip()
    };
    let (ap, ac) = pick(None);
    let (gp, gc) = pick(Some(CropKind::Global));
    let (up, uc) = pick(Some(CropKind::Union));
    let heldout_top1 = top1(&teacher, &ap, &ac)?;
    let (recognition_map, recognition_chance) = recognition_map(&teacher, heldout)?;
    let report = TeacherReport {
        train_top1,
        heldout_top1,
        heldout_global_top1: top1(&teacher, &gp, &gc)?,
        heldout_union_top1: top1(&teacher, &up, &uc)?,
        recognition_map,
        recognition_chance,
        passed_gate: heldout_top1 >= config.gate,
    };
    Ok((teacher, report))
}
