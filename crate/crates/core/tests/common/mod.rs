#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hoikd::branches::{ImageFeatures, StudentConfig, StudentModel, Variant};
use hoikd::encoder::{embed_labels, TeacherConfig, TeacherModel, Trunk, TrunkConfig};
use hoikd::geometry::{BBox, Proposal, PERSON_CLASS};
use hoikd::labels::LabelSpace;
use hoikd::synthworld::rules::{DEFAULT_OBJECTS, DEFAULT_VERBS};
use hoikd::tensorcore::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

pub fn labels() -> LabelSpace {
    LabelSpace::product(&DEFAULT_VERBS, &DEFAULT_OBJECTS)
}

/// Untrained teacher over the default label space.
pub fn teacher(seed: u64) -> TeacherModel {
    let trunk = Arc::new(Trunk::random(TrunkConfig::default(), seed));
    let emb = embed_labels(&labels().pairs(), 32, seed + 1).unwrap();
    TeacherModel::new(trunk, emb, TeacherConfig::default(), seed + 2).unwrap()
}

pub fn student(teacher: &TeacherModel, variant: Variant, seed: u64) -> StudentModel {
    let mut s = StudentModel::new(teacher, StudentConfig { variant, ..StudentConfig::default() }, seed).unwrap();
    // move every head away from the shared warm start so branches differ
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in s.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    s
}

pub fn noise_image(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([size, size, 3], (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn prop(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: u32) -> Proposal {
    Proposal { bbox: BBox::new(x1, y1, x2, y2).unwrap(), score, class_id, is_human: class_id == PERSON_CLASS }
}

/// One human and two objects: exactly two pairs.
pub fn two_pair_features(trunk: &Trunk, seed: u64) -> ImageFeatures {
    let props = vec![
        prop(10.0, 8.0, 30.0, 50.0, 0.9, PERSON_CLASS),
        prop(34.0, 20.0, 46.0, 32.0, 0.8, 2),
        prop(4.0, 40.0, 16.0, 56.0, 0.7, 4),
    ];
    let f = ImageFeatures::extract(trunk, 7, &noise_image(64, seed), &props, 64).unwrap();
    assert_eq!(f.num_pairs(), 2);
    f
}

/// Bound parameters for gradchecks: trainable entries come from `vars` (in
/// store order), frozen ones become constants.
pub fn bind_f64(store: &ParamStore, g: &mut Graph<f64>, vars: &[Var]) -> Bound {
    let mut it = vars.iter();
    let all = store
        .iter()
        .map(|p| if p.frozen { g.constant(p.value.cast()) } else { *it.next().expect("one var per trainable") })
        .collect();
    Bound::from_vars(all)
}

pub fn trainable_f64(store: &ParamStore) -> Vec<Tensor<f64>> {
    store.iter().filter(|p| !p.frozen).map(|p| p.value.cast()).collect()
}

/// Fixed random weights for reducing a score matrix to a scalar.
pub fn weights<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).unwrap()
}
pub mod checks;
