//! PointInfoNCE objective, small differentiable encoders, and the joint
//! view + geometric-prior training loop.

pub mod encoder;
pub mod features;
pub mod loss;
pub mod train;

pub use encoder::{
    chunk_backward, encode_chunk, encode_chunk_subset_cached, encode_image, encode_image_cached,
    image_backward, EncoderError, EncoderParams,
};
pub use features::{pixel_to_featmap_coord, FeatureMap, FeatureStore, VoxelFeatures};
pub use loss::{point_info_nce, point_info_nce_grad, LossError, LossReport};
pub use train::{
    eval_pairs_of, evaluate_objective, joint_loss, subsample_pixel_voxel, train,
    view_invariance_score, JointLossOutput, TermStats, TraceRow, TrainConfig, TrainError,
    TrainResult, TrainingTuple, ViewEvalPair,
};
