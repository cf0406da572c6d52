//! Teacher supervision, the distillation objective and the training loop.

pub mod crops;
pub mod loss;
pub mod supervision;
pub mod train;

pub use crops::{make_global_crop, make_union_crop, resize_region};
pub use loss::{loss_graph, LossBreakdown, LossOptions, LossVars, Routing, Supervision};
pub use supervision::{pair_hash, precompute_supervision, restrict, ImageSupervision, SupervisionCache};
pub use train::{
    class_subset, curve_csv, curve_endpoints, load_student, save_student, train, LossRow, TrainConfig, TrainRun,
};
