//! Visual trunk, ROI pooling, attention pooling, the text-side embedding and
//! the teacher scorer.

mod pool;
mod roi;
mod teacher;
pub mod text;
mod trunk;

pub use pool::{class_logits, stack_patches, AttentionPool};
pub use roi::{roi_align, ROI_CELLS, ROI_SIZE};
pub use teacher::{TeacherConfig, TeacherModel, MAX_LOGIT_SCALE};
pub use text::{build_prompts, embed_labels, embed_prompts, HoiEmbedding};
pub use trunk::{FeatureMap, Trunk, TrunkConfig, MIN_EDGE};
