//! Student training loop and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branches::{ImageFeatures, StudentConfig, StudentModel, Variant, DEFAULT_GAMMA};
use crate::encoder::TeacherModel;
use crate::seeds::sub_seed;
use crate::tensorcore::{read_archive, write_archive, AdamW, AdamWConfig, Graph, Tensor, TensorError};
use crate::{Error, Result};

use super::loss::{loss_graph, LossBreakdown, LossOptions, Routing};
use super::supervision::{restrict, SupervisionCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    /// The learning rate is multiplied by `decay_factor` from this iteration on.
    pub decay_iter: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Feature width; must equal the trunk's.
    pub dim: usize,
    pub heads: usize,
    pub spatial_dim: usize,
    pub seed: u64,
    pub routing: Routing,
    pub variant: Variant,
    /// Train on this many randomly chosen classes (all when `None`).
    pub nprime: Option<usize>,
    pub nprime_seed: u64,
    pub loss: LossOptions,
    pub temperature: f64,
    pub normalize: bool,
    pub max_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            total_iters: 2000,
            decay_iter: 1000,
            decay_factor: 0.1,
            weight_decay: 0.01,
            gamma: DEFAULT_GAMMA,
            dim: 32,
            heads: 4,
            spatial_dim: 64,
            seed: 0,
            routing: Routing::default(),
            variant: Variant::Full,
            nprime: None,
            nprime_seed: 0,
            loss: LossOptions::default(),
            temperature: 1.0,
            normalize: true,
            max_pairs: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_iter >= self.total_iters {
            return Err(Error::Config(format!(
                "decay_iter ({}) must be below total_iters ({})",
                self.decay_iter, self.total_iters
            )));
        }
        if self.batch_size == 0 || self.lr < 0.0 || !self.lr.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config("batch_size must be positive, lr and gamma non-negative".into()));
        }
        if self.variant.training_free() {
            return Err(Error::Config(format!("variant {} has nothing to train", self.variant.name())));
        }
        if self.nprime == Some(0) {
            return Err(Error::Config("nprime must be at least 1".into()));
        }
        self.routing.validate()
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            heads: self.heads,
            spatial_dim: self.spatial_dim,
            normalize: self.normalize,
            temperature: self.temperature,
            max_pairs: self.max_pairs,
            variant: self.variant,
        }
    }

    fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.decay_iter {
            self.lr
        } else {
            self.lr * self.decay_factor
        }
    }
}

/// Sorted random subset of `k` out of `n` class indices.
pub fn class_subset(n: usize, k: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let k = k.unwrap_or(n);
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot choose {k} of {n} classes")));
    }
    let mut all: Vec<usize> = (0..n).collect();
    if k < n {
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        all.truncate(k);
        all.sort_unstable();
    }
    Ok(all)
}

/// One row of the loss curve (batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub fn curve_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("iter,L_g,L_u,L_ho,total,lr\n");
    for r in rows {
        let l = &r.loss;
        writeln!(s, "{},{},{},{},{},{}", r.iter, l.l_g, l.l_u, l.l_ho, l.total, r.lr).expect("string write");
    }
    s
}

/// Mean total loss over the first and last `window` rows.
pub fn curve_endpoints(rows: &[LossRow], window: usize) -> (f64, f64) {
    let w = window.min(rows.len()).max(1);
    let mean = |rs: &[LossRow]| rs.iter().map(|r| r.loss.total).sum::<f64>() / rs.len() as f64;
    (mean(&rows[..w]), mean(&rows[rows.len() - w..]))
}

pub struct TrainRun {
    pub model: StudentModel,
    pub curve: Vec<LossRow>,
    /// Class indices the student was trained on.
    pub classes: Vec<usize>,
    pub trunk_hash_before: String,
    pub trunk_hash_after: String,
}

/// Per-image teacher targets restricted to the training classes.
struct Targets {
    d_g: Vec<f32>,
    d_u: Vec<Vec<f32>>,
}

type Grads = Vec<Option<Tensor<f32>>>;

fn image_step(
    model: &StudentModel,
    feats: &ImageFeatures,
    t: &Targets,
    w: &Tensor<f32>,
    cfg: &TrainConfig,
) -> Result<Option<(LossBreakdown, Grads)>> {
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g);
    let wv = g.constant(w.clone());
    let scale = g.constant(Tensor::vector(&[model.logit_scale]));
    let fw = model.forward(&mut g, &p, feats, wv, scale).map_err(|e| match e {
        TensorError::NonFinite { op } => Error::Numeric(format!("image {}: branch forward, op {op} is not finite", feats.image_id)),
        other => Error::Tensor(other),
    })?;
    let loss = loss_graph(&mut g, &fw, &t.d_g, &t.d_u, &cfg.routing, &cfg.loss).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("image {}: {m}", feats.image_id)),
        other => other,
    })?;
    let Some(loss) = loss else {
        return Ok(None);
    };
    let values = LossBreakdown::read(&g, &loss);
    if let Some(term) = values.non_finite() {
        return Err(Error::Numeric(format!("image {}: {term} is not finite ({values:?})", feats.image_id)));
    }
    let grads = g.backward(loss.total)?;
    let per_param = model
        .params
        .iter()
        .zip(p.vars())
        .map(|(param, &v)| (!param.frozen).then(|| grads.get_or_zeros(v)))
        .collect();
    Ok(Some((values, per_param)))
}

/// Trains a student on precomputed features and teacher supervision.
///
/// Per-image gradients may be computed in parallel; they are summed in batch
/// order, so the result does not depend on the thread count.
pub fn train(teacher: &TeacherModel, features: &[ImageFeatures], cache: &SupervisionCache, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.dim != teacher.trunk.dim() {
        return Err(Error::Config(format!("dim {} does not match the trunk's {}", cfg.dim, teacher.trunk.dim())));
    }
    if features.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    if cfg.max_pairs != cache.max_pairs {
        return Err(Error::Cache(format!("cache built with max_pairs {}, config asks {}", cache.max_pairs, cfg.max_pairs)));
    }
    let classes = class_subset(teacher.num_classes(), cfg.nprime, cfg.nprime_seed)?;
    let w = teacher.embedding.subset(&classes).matrix;
    let targets = features
        .iter()
        .map(|f| {
            let s = cache.lookup(f.image_id, &f.pairs)?;
            Ok(Targets { d_g: restrict(&s.d_g, &classes), d_u: s.d_u.iter().map(|d| restrict(d, &classes)).collect() })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model = StudentModel::new(teacher, cfg.student_config(), sub_seed(cfg.seed, "student"))?;
    let trunk_hash_before = model.frozen_fingerprint();
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "order"));
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.total_iters);

    for iter in 0..cfg.total_iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let lr = cfg.lr_at(iter);
        opt.set_lr(lr);
        let results = batch
            .par_iter()
            .map(|&i| image_step(&model, &features[i], &targets[i], &w, cfg))
            .collect::<Vec<_>>();
        let inv = 1.0 / cfg.batch_size as f64;
        let mut mean = LossBreakdown::default();
        model.params.zero_grads();
        for r in results {
            let r = r.map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("iteration {iter}, {m}")),
                other => other,
            })?;
            if let Some((values, grads)) = r {
                mean.add_scaled(&values, inv);
                model.params.accumulate_tensors(&grads, inv as f32)?;
            }
        }
        // trainable parameters that saw no image this batch still need a buffer
        model.params.accumulate_tensors(&vec![None; model.params.len()], 0.0)?;
        opt.step(&mut model.params)?;
        curve.push(LossRow { iter, loss: mean, lr });
    }
    let trunk_hash_after = model.frozen_fingerprint();
    Ok(TrainRun { model, curve, classes, trunk_hash_before, trunk_hash_after })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudentMeta {
    student: StudentConfig,
    train: TrainConfig,
    classes: Vec<usize>,
}

/// Writes `student.json` and the student's parameter archive under `dir`.
pub fn save_student(dir: &Path, run: &TrainRun, cfg: &TrainConfig) -> Result<()> {
    let wdir = dir.join("weights");
    write_archive(&wdir, &run.model.params.entries()).map_err(Error::io(&wdir))?;
    let meta = StudentMeta { student: run.model.config.clone(), train: cfg.clone(), classes: run.classes.clone() };
    let path = dir.join("student.json");
    let json = serde_json::to_string_pretty(&meta).map_err(Error::json(&path))?;
    fs::write(&path, json).map_err(Error::io(&path))
}

/// Restores a student written by [`save_student`]; the trunk comes from
/// `teacher`.
pub fn load_student(dir: &Path, teacher: &TeacherModel) -> Result<(StudentModel, TrainConfig)> {
    let path = dir.join("student.json");
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let meta: StudentMeta = serde_json::from_str(&text).map_err(Error::json(&path))?;
    let wdir = dir.join("weights");
    let entries = read_archive(&wdir).map_err(Error::io(&wdir))?;
    let mut model = StudentModel::new(teacher, meta.student, 0)?;
    model.params.load(&entries)?;
    Ok((model, meta.train))
}
