//! Frozen teacher: trunk, its own attention pool, and the HOI embedding.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::tensorcore::nn::linear;
use crate::tensorcore::{read_archive, write_archive, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

use super::pool::{class_logits, stack_patches, AttentionPool};
use super::roi::roi_align;
use super::text::HoiEmbedding;
use super::trunk::{Trunk, TrunkConfig};

/// Upper bound on the learned logit scale.
pub const MAX_LOGIT_SCALE: f32 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Crop side `R_t`.
    pub resolution: usize,
    pub heads: usize,
    /// Cosine scores (both sides normalized) times the logit scale.
    pub normalize: bool,
    pub init_logit_scale: f32,
    /// Hidden width of the residual alignment MLP applied after pooling;
    /// 0 disables it.
    pub align_hidden: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { resolution: 32, heads: 4, normalize: true, init_logit_scale: 1.0 / 0.07, align_hidden: 64 }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub config: TeacherConfig,
    pub trunk: Arc<Trunk>,
    pub params: ParamStore,
    pub pool: AttentionPool,
    /// Stored as `ln(scale)`.
    pub log_scale: ParamId,
    align: Option<[ParamId; 4]>,
    pub embedding: HoiEmbedding,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TeacherMeta {
    config: TeacherConfig,
    trunk: TrunkConfig,
    labels: Vec<(String, String)>,
}

impl TeacherModel {
    pub fn new(trunk: Arc<Trunk>, embedding: HoiEmbedding, config: TeacherConfig, seed: u64) -> Result<Self> {
        if embedding.dim() != trunk.dim() {
            return Err(Error::Config(format!("embedding dim {} != trunk dim {}", embedding.dim(), trunk.dim())));
        }
        let mut params = ParamStore::new();
        let pool = AttentionPool::register(&mut params, "teacher.pool", trunk.dim(), config.heads, seed)?;
        let log_scale = params.add("teacher.log_scale", Tensor::vector(&[config.init_logit_scale.ln()]));
        let align = (config.align_hidden > 0).then(|| {
            let (d, h) = (trunk.dim(), config.align_hidden);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11e);
            let mut normal = |n: usize, std: f64| -> Vec<f32> {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            };
            let w1 = Tensor::new([d, h], normal(d * h, (2.0 / d as f64).sqrt())).expect("shape");
            let w2 = Tensor::new([h, d], normal(h * d, 0.1 / (h as f64).sqrt())).expect("shape");
            [
                params.add("teacher.align.w1", w1),
                params.add("teacher.align.b1", Tensor::zeros([h])),
                params.add("teacher.align.w2", w2),
                params.add("teacher.align.b2", Tensor::zeros([d])),
            ]
        });
        Ok(Self { config, trunk, params, pool, log_scale, align, embedding })
    }

    /// Residual alignment MLP `[w1, b1, w2, b2]`, when enabled.
    pub fn align_params(&self) -> Option<[ParamId; 4]> {
        self.align
    }

    pub fn num_classes(&self) -> usize {
        self.embedding.len()
    }

    pub fn logit_scale(&self) -> f32 {
        self.params.get(self.log_scale).value.item().exp().min(MAX_LOGIT_SCALE)
    }

    /// Keeps the learned scale within `[1, MAX_LOGIT_SCALE]`.
    pub fn clamp_scale(&mut self) {
        let v = &mut self.params.get_mut(self.log_scale).value;
        let c = v.item().clamp(0.0, MAX_LOGIT_SCALE.ln());
        v.data_mut()[0] = c;
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen("", true);
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint(|_| true)
    }

    /// ROI patch of the whole crop.
    pub fn patch(&self, crop: &Tensor<f32>) -> Result<Tensor<f32>> {
        let r = self.config.resolution;
        if crop.shape() != [r, r, 3] {
            return Err(Error::Resolution { expected: r, got: crop.shape().to_vec() });
        }
        let fm = self.trunk.encode(crop)?;
        roi_align(&fm, &BBox::full(r as f64, r as f64))
    }

    /// Logits `[B, N]` for `patches: [B, 49, D]`, with parameters bound by
    /// the caller (so pretraining can differentiate through them).
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var, w: Var) -> Result<Var> {
        let mut v = self.pool.forward(g, p, patches)?;
        if let Some([w1, b1, w2, b2]) = self.align {
            let hidden = linear(g, v, p[w1], p[b1])?;
            let hidden = g.relu(hidden)?;
            let delta = linear(g, hidden, p[w2], p[b2])?;
            v = g.add(v, delta)?;
        }
        let ls = g.exp(p[self.log_scale])?;
        Ok(class_logits(g, v, w, ls, self.config.normalize, 1.0)?)
    }

    /// Probability vector over the `N` classes for one crop.
    pub fn score(&self, crop: &Tensor<f32>) -> Result<Vec<f32>> {
        Ok(self.score_patches(&[self.patch(crop)?])?.remove(0))
    }

    /// Scores many crops; each crop is evaluated on its own so results do not
    /// depend on batching or thread count.
    pub fn score_batch(&self, crops: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        crops.par_iter().map(|c| self.score(c)).collect()
    }

    pub(crate) fn score_patches(&self, patches: &[Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::<f32>::new();
        let mut frozen = self.params.clone();
        frozen.set_frozen("", true);
        let p = frozen.bind(&mut g);
        let refs: Vec<&Tensor<f32>> = patches.iter().collect();
        let x = g.constant(stack_patches(&refs)?);
        let w = g.constant(self.embedding.matrix.clone());
        let logits = self.logits(&mut g, &p, x, w)?;
        let probs = g.softmax(logits, 1)?;
        let n = self.num_classes();
        Ok(g.value(probs).data().chunks(n).map(|r| r.to_vec()).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut entries = self.trunk.entries();
        entries.extend(self.params.entries());
        entries.push(("teacher.embedding".into(), self.embedding.matrix.clone()));
        let wdir = dir.join("weights");
        write_archive(&wdir, &entries).map_err(Error::io(&wdir))?;
        let meta = TeacherMeta {
            config: self.config.clone(),
            trunk: self.trunk.config().clone(),
            labels: self.embedding.labels.clone(),
        };
        let path = dir.join("teacher.json");
        let json = serde_json::to_string_pretty(&meta).map_err(Error::json(&path))?;
        fs::write(&path, json).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("teacher.json");
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let meta: TeacherMeta = serde_json::from_str(&text).map_err(Error::json(&path))?;
        let wdir = dir.join("weights");
        let entries = read_archive(&wdir).map_err(Error::io(&wdir))?;
        let trunk = Arc::new(Trunk::from_entries(meta.trunk, &entries)?);
        let matrix = entries
            .iter()
            .find(|(n, _)| n == "teacher.embedding")
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Config("teacher checkpoint lacks its embedding".into()))?;
        let embedding = HoiEmbedding { matrix, labels: meta.labels };
        let mut t = Self::new(trunk, embedding, meta.config, 0)?;
        t.params.load(&entries)?;
        t.freeze();
        Ok(t)
    }
}
