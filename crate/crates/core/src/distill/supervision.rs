//! Teacher supervision: `d_g` per image and `d_u` per enumerated pair.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::branches::{enumerate_pairs, PairCandidate};
use crate::encoder::TeacherModel;
use crate::synthworld::Split;
use crate::tensorcore::{read_archive, write_archive, Tensor};
use crate::{Error, Result};

use super::crops::{make_global_crop, make_union_crop};

/// Teacher distributions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSupervision {
    pub image_id: u64,
    pub d_g: Vec<f32>,
    /// One row per pair, in enumeration order.
    pub d_u: Vec<Vec<f32>>,
    pub pair_hash: String,
}

/// Digest of the pair list (indices and box coordinates, bit-exact).
pub fn pair_hash(pairs: &[PairCandidate]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update((p.human_idx as u64).to_le_bytes());
        h.update((p.object_idx as u64).to_le_bytes());
        for v in p.human.bbox.to_array().into_iter().chain(p.object.bbox.to_array()) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionCache {
    pub num_classes: usize,
    pub max_pairs: usize,
    pub images: Vec<ImageSupervision>,
    index: HashMap<u64, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairManifest {
    num_classes: usize,
    max_pairs: usize,
    images: Vec<PairRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    image_id: u64,
    num_pairs: usize,
    pair_hash: String,
}

fn key(kind: &str, id: u64) -> String {
    format!("{kind}/{id:08}")
}

/// Runs the teacher on the centre crop and every union crop of `split`.
pub fn precompute_supervision(split: &Split, teacher: &TeacherModel, max_pairs: usize) -> Result<SupervisionCache> {
    let r = teacher.config.resolution;
    let images = (0..split.len())
        .into_par_iter()
        .map(|i| {
            let img = &split.images[i];
            let info = &split.gt.images[i];
            let pairs = enumerate_pairs(&split.proposals[i].proposals, info.w as f64, info.h as f64, max_pairs);
            let mut crops = vec![make_global_crop(img, r)];
            for p in &pairs {
                crops.push(make_union_crop(img, &p.union, r)?);
            }
            let mut scores = crops.iter().map(|c| teacher.score(c)).collect::<Result<Vec<_>>>()?;
            let d_g = scores.remove(0);
            Ok(ImageSupervision { image_id: info.id, d_g, d_u: scores, pair_hash: pair_hash(&pairs) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SupervisionCache::from_images(teacher.num_classes(), max_pairs, images))
}

impl SupervisionCache {
    pub fn from_images(num_classes: usize, max_pairs: usize, images: Vec<ImageSupervision>) -> Self {
        let index = images.iter().enumerate().map(|(i, s)| (s.image_id, i)).collect();
        Self { num_classes, max_pairs, images, index }
    }

    pub fn get(&self, image_id: u64) -> Option<&ImageSupervision> {
        self.index.get(&image_id).map(|&i| &self.images[i])
    }

    /// Entry for `image_id`, checked against the pairs the caller enumerated.
    pub fn lookup(&self, image_id: u64, pairs: &[PairCandidate]) -> Result<&ImageSupervision> {
        let s = self.get(image_id).ok_or_else(|| Error::Cache(format!("image {image_id} not in cache")))?;
        if s.d_u.len() != pairs.len() || s.pair_hash != pair_hash(pairs) {
            return Err(Error::Cache(format!(
                "image {image_id}: cached {} pairs (hash {}), enumerated {} (hash {})",
                s.d_u.len(),
                &s.pair_hash[..12],
                pairs.len(),
                &pair_hash(pairs)[..12]
            )));
        }
        Ok(s)
    }

    /// Number of stored vectors: one `d_g` plus one `d_u` per pair.
    pub fn vector_count(&self) -> usize {
        self.images.iter().map(|s| 1 + s.d_u.len()).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let n = self.num_classes;
        let mut entries = Vec::new();
        for s in &self.images {
            entries.push((key("d_g", s.image_id), Tensor::vector(&s.d_g)));
            if !s.d_u.is_empty() {
                let flat: Vec<f32> = s.d_u.iter().flatten().copied().collect();
                entries.push((key("d_u", s.image_id), Tensor::new([s.d_u.len(), n], flat)?));
            }
        }
        let adir = dir.join("archive");
        write_archive(&adir, &entries).map_err(Error::io(&adir))?;
        let manifest = PairManifest {
            num_classes: n,
            max_pairs: self.max_pairs,
            images: self
                .images
                .iter()
                .map(|s| PairRecord { image_id: s.image_id, num_pairs: s.d_u.len(), pair_hash: s.pair_hash.clone() })
                .collect(),
        };
        let path = dir.join("pairs.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
        fs::write(&path, json).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("pairs.json");
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: PairManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        let adir = dir.join("archive");
        let entries: HashMap<String, Tensor<f32>> =
            read_archive(&adir).map_err(Error::io(&adir))?.into_iter().collect();
        let n = manifest.num_classes;
        let mut images = Vec::with_capacity(manifest.images.len());
        for rec in manifest.images {
            let d_g = entries
                .get(&key("d_g", rec.image_id))
                .ok_or_else(|| Error::Cache(format!("image {}: d_g missing", rec.image_id)))?;
            let d_u = match entries.get(&key("d_u", rec.image_id)) {
                Some(t) => t.data().chunks(n).map(|r| r.to_vec()).collect(),
                None => Vec::new(),
            };
            if d_g.len() != n || d_u.len() != rec.num_pairs {
                return Err(Error::Cache(format!("image {}: stored shapes disagree with pairs.json", rec.image_id)));
            }
            images.push(ImageSupervision { image_id: rec.image_id, d_g: d_g.data().to_vec(), d_u, pair_hash: rec.pair_hash });
        }
        Ok(Self::from_images(n, manifest.max_pairs, images))
    }
}

/// `d` restricted to `rows` and renormalized. Falls back to uniform when the
/// subset carries no mass at all.
pub fn restrict(d: &[f32], rows: &[usize]) -> Vec<f32> {
    let sub: Vec<f64> = rows.iter().map(|&r| d[r] as f64).collect();
    let z: f64 = sub.iter().sum();
    if z <= 0.0 {
        return vec![1.0 / rows.len() as f32; rows.len()];
    }
    sub.iter().map(|v| (v / z) as f32).collect()
}
