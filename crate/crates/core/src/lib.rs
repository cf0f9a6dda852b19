//! Global registration of LiDAR point clouds.
//!
//! The pipeline turns each cloud into a set of Gaussian ellipsoid models
//! (planes, clusters and lines), matches them by Wasserstein distance,
//! prunes the matches with a pyramid of compatibility graphs solved for
//! maximum cliques, estimates one pose per pyramid level with a truncated
//! distribution-to-distribution solver and finally picks the pose that best
//! explains the raw geometry.
//!
//! ```no_run
//! use gemreg::{cloud_io, Config};
//!
//! # fn main() -> gemreg::Result<()> {
//! let src = cloud_io::load_kitti_bin("000000.bin")?.cloud;
//! let tgt = cloud_io::load_kitti_bin("000100.bin")?.cloud;
//! let report = gemreg::register(&src, &tgt, &Config::default())?;
//! println!("success: {} score: {}", report.success, report.score);
//! # Ok(())
//! # }
//! ```

pub mod association;
pub mod bench;
pub mod cloud_io;
pub mod config;
pub mod error;
pub mod estimator;
pub mod gem;
pub mod geometry;
pub mod pagor;
pub mod pipeline;
pub mod segmentation;
pub mod verification;

pub use cloud_io::{PointCloud, VoxelCell, VoxelMap};
pub use config::Config;
pub use error::{Error, Result};
pub use gem::{Gem, PrimitiveType};
pub use pipeline::{register, PipelineReport};
