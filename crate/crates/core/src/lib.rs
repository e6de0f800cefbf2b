//! Sparse voxel completion of LiDAR-style point clouds and canonical-domain label transfer.

pub mod adversarial;
pub mod cloud;
pub mod data;
pub mod error;
pub mod grid;
pub mod io;
pub mod kdtree;
pub mod lidar;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod segmenter;
pub mod svcn;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use cloud::{PointCloud, Point3, RigidTransform, UNLABELED};
pub use error::{Error, Result};
pub use grid::{CoordSet, KernelMap, SparseGrid, VoxelCoord};
pub use matrix::Matrix;
