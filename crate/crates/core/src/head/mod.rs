//! Segmentation head and training losses.

pub mod decode;
pub mod loss;
pub mod train;

pub use decode::{decode, decode_backward, decode_forward, DecodeCache, HeadGrads, HeadParams};
pub use loss::{
    ce_loss, ce_loss_grad, iou_loss, iou_loss_grad, proto_loss, proto_loss_grad, total_loss, GradCheckEntry,
    LossReport, LossWeights, PROB_CLAMP,
};
pub use train::{mean_prototype_cosine, train_demo, train_from, write_trajectory_csv, TrainResult, DEFAULT_LR};
