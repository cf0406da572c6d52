//! Whole-dataset generation and the on-disk layout.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::evaluator::{GroundTruth, GtInstance, ImageInfo};
use crate::labels::LabelSpace;
use crate::seeds::{item_seed, sub_seed};
use crate::tensorcore::{read_archive, write_archive, Tensor};
use crate::{Error, Result};

use super::detector::{detect, DetectorConfig, ImageProposals};
use super::render::render;
use super::rules::{DEFAULT_OBJECTS, DEFAULT_VERBS};
use super::scene::{generate_scene, LayoutParams, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Exponent of the class-frequency power law.
    pub zipf: f64,
    pub p_second_pair: f64,
    pub p_idle: f64,
    pub p_distractor: f64,
    pub detector: DetectorConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            verbs: DEFAULT_VERBS.iter().map(|s| s.to_string()).collect(),
            objects: DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(),
            image_size: 64,
            n_train: 600,
            n_test: 200,
            zipf: 1.2,
            p_second_pair: 0.3,
            p_idle: 0.35,
            p_distractor: 0.5,
            detector: DetectorConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn label_space(&self) -> LabelSpace {
        let v: Vec<&str> = self.verbs.iter().map(String::as_str).collect();
        let o: Vec<&str> = self.objects.iter().map(String::as_str).collect();
        LabelSpace::product(&v, &o)
    }

    pub fn validate(&self) -> Result<()> {
        if self.verbs.is_empty() || self.objects.is_empty() {
            return Err(Error::Config("world needs at least one verb and one object".into()));
        }
        if self.image_size < 48 {
            return Err(Error::Config(format!("image_size {} is below 48", self.image_size)));
        }
        for p in [self.p_second_pair, self.p_idle, self.p_distractor] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.zipf < 0.0 || self.detector.jitter < 0.0 || self.detector.fp_rate < 0.0 || self.detector.cap == 0 {
            return Err(Error::Config("zipf, jitter and fp_rate must be non-negative and cap positive".into()));
        }
        self.label_space().validate()
    }
}

/// One split held in memory. `images[i]` belongs to `gt.images[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Vec<Tensor<f32>>,
    pub gt: GroundTruth,
    pub proposals: Vec<ImageProposals>,
    pub scenes: Vec<SceneSpec>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Ground truth of one image, in scene order (dominant first).
    pub fn gt_for(&self, image_id: u64) -> Vec<&GtInstance> {
        self.gt.instances.iter().filter(|g| g.image_id == image_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelSpace,
    pub train: Split,
    pub test: Split,
}

/// Class sampling weights `∝ rank^-zipf` over a seeded permutation of ids.
pub fn class_weights(n: usize, zipf: f64, seed: u64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut w = vec![0.0; n];
    for (rank, &c) in order.iter().enumerate() {
        w[c] = ((rank + 1) as f64).powf(-zipf);
    }
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

fn generate_split(config: &WorldConfig, seed: u64, name: &str, count: usize, id_base: u64, weights: &[f64]) -> Split {
    let n = weights.len();
    let sampler = WeightedIndex::new(weights).expect("positive weights");
    let params = LayoutParams {
        size: config.image_size,
        num_verbs: config.verbs.len(),
        num_objects: config.objects.len(),
        p_idle: config.p_idle,
        p_distractor: config.p_distractor,
    };
    let results: Vec<(SceneSpec, Tensor<f32>, ImageProposals)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, name, i as u64));
            // the first N images cover every class once
            let primary = if i < n { i } else { sampler.sample(&mut rng) } as u32 + 1;
            let secondary = rng.random_bool(config.p_second_pair).then(|| sampler.sample(&mut rng) as u32 + 1);
            let image_id = id_base + i as u64;
            let scene = generate_scene(&mut rng, image_id, &params, primary, secondary);
            let image = render(&scene, config.objects.len());
            let det_seed = item_seed(seed, &format!("{name}-detector"), i as u64);
            let props = detect(&scene, config.objects.len(), &config.detector, det_seed);
            (scene, image, props)
        })
        .collect();
    let mut split = Split { images: Vec::new(), gt: GroundTruth::default(), proposals: Vec::new(), scenes: Vec::new() };
    for (scene, image, props) in results {
        split.gt.images.push(ImageInfo { id: scene.image_id, w: scene.width, h: scene.height });
        for it in &scene.interactions {
            split.gt.instances.push(GtInstance {
                image_id: scene.image_id,
                human: scene.entities[it.human].bbox,
                object: scene.entities[it.object].bbox,
                hoi_id: it.hoi_id,
            });
        }
        split.images.push(image);
        split.proposals.push(props);
        split.scenes.push(scene);
    }
    split
}

/// Renders train and test splits; `train_count` is filled from train GT.
pub fn generate_dataset(config: &WorldConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut labels = config.label_space();
    let weights = class_weights(labels.len(), config.zipf, sub_seed(seed, "class-order"));
    let train = generate_split(config, seed, "train", config.n_train, 0, &weights);
    let test = generate_split(config, seed, "test", config.n_test, 1_000_000, &weights);
    for h in &mut labels.hois {
        h.train_count = train.gt.instances.iter().filter(|g| g.hoi_id == h.id).count();
    }
    Ok(Dataset { labels, train, test })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value).map_err(Error::json(path))?;
    fs::write(path, json).map_err(Error::io(path))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

fn image_name(id: u64) -> String {
    format!("{id:08}")
}

impl Split {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let named: Vec<(String, Tensor<f32>)> =
            self.gt.images.iter().zip(&self.images).map(|(info, t)| (image_name(info.id), t.clone())).collect();
        let idir = dir.join("images");
        write_archive(&idir, &named).map_err(Error::io(&idir))?;
        write_json(&dir.join("gt.json"), &self.gt)?;
        write_json(&dir.join("proposals.json"), &self.proposals)?;
        write_json(&dir.join("scenes.json"), &self.scenes)
    }

    /// Loads images, ground truth and proposals. Scene layouts are only read
    /// when `with_scenes` is set.
    pub fn load(dir: &Path, with_scenes: bool) -> Result<Self> {
        let gt: GroundTruth = read_json(&dir.join("gt.json"))?;
        let proposals: Vec<ImageProposals> = read_json(&dir.join("proposals.json"))?;
        let idir = dir.join("images");
        let mut archive = read_archive(&idir).map_err(Error::io(&idir))?;
        archive.sort_by(|a, b| a.0.cmp(&b.0));
        let mut images = Vec::with_capacity(gt.images.len());
        for info in &gt.images {
            let name = image_name(info.id);
            let i = archive
                .binary_search_by(|(n, _)| n.as_str().cmp(&name))
                .map_err(|_| Error::Config(format!("{}: image {name} missing", idir.display())))?;
            images.push(archive[i].1.clone());
        }
        if proposals.len() != images.len() || proposals.iter().zip(&gt.images).any(|(p, i)| p.image_id != i.id) {
            return Err(Error::Config(format!("{}: proposals do not line up with gt.json images", dir.display())));
        }
        let scenes = if with_scenes { read_json(&dir.join("scenes.json"))? } else { Vec::new() };
        Ok(Self { images, gt, proposals, scenes })
    }
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        write_json(&dir.join("labels.json"), &self.labels)?;
        self.train.save(&dir.join("train"))?;
        self.test.save(&dir.join("test"))
    }

    pub fn load(dir: &Path, with_scenes: bool) -> Result<Self> {
        let labels: LabelSpace = read_json(&dir.join("labels.json"))?;
        labels.validate()?;
        Ok(Self {
            labels,
            train: Split::load(&dir.join("train"), with_scenes)?,
            test: Split::load(&dir.join("test"), with_scenes)?,
        })
    }
}
