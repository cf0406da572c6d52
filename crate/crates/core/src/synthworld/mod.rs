//! Procedural HOI world: scene layout, rendering, a detector stub, dataset
//! IO and teacher pretraining.

mod dataset;
mod detector;
mod pretrain;
mod render;
pub mod rules;
mod scene;

pub use dataset::{class_weights, generate_dataset, Dataset, Split, WorldConfig};
pub use detector::{detect, DetectorConfig, ImageProposals};
pub use pretrain::{labeled_crops, pretrain_teacher, recognition_map, CropKind, LabeledCrop, PretrainConfig, TeacherReport};
pub use render::render;
pub use scene::{Entity, Interaction, SceneSpec};
