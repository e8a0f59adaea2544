pub mod checkpoint;
pub mod dataset;
pub mod losses;
pub mod targets;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{generate_synthetic_dataset, Dataset, GtObject, Sample, ShapeKind};
pub use losses::{focal_loss, iou_loss, l1_border_loss, total_loss, FocalParams, LossBreakdown};
pub use targets::{assign_border_targets, assign_coarse_targets, BorderTargets, CoarseTargets};
pub use train::{compute_gradients, evaluate_loss, train, BatchSampler, IterationRecord, Sgd, TrainConfig, TrainLog};
