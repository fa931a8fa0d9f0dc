//! Geometric pre-training machinery for RGB-D sequences: multi-view pixel
//! correspondence mining, occupancy-chunk geometric priors, and the
//! PointInfoNCE contrastive objective with analytic gradients.

pub mod contrastive;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod scenes;
pub mod voxels;
