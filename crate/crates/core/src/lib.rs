//! Self-supervised point cloud upsampling.
//!
//! A sparse cloud is densified by minimizing four losses that compare it
//! with the dense result: an earth mover's distance to a farthest point
//! downsampling, a multi-view soft silhouette difference, a Hausdorff term
//! and a uniformity term. The silhouettes come from a differentiable
//! renderer that turns every point into a small camera-facing triangle.
//!
//! The dense coordinates can be optimized directly ([`optim::upsample_direct`])
//! or produced by a small neighbour expansion network trained on patches
//! ([`optim::train_neu`]).
//!
//! ```
//! use densify::cloud::PointCloud;
//! use densify::metrics::chamfer;
//!
//! let a = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]])?;
//! let b = PointCloud::from_xyz(&[[1.0, 0.0, 0.0]])?;
//! assert_eq!(chamfer(&a, &b)?, 2.0);
//! # Ok::<(), densify::Error>(())
//! ```

pub mod cli;
pub mod cloud;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod neu;
pub mod optim;
pub mod render;

pub use cloud::{Point, PointCloud};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/point-clouds.md")]
    mod point_clouds {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/upsampler.md")]
    mod upsampler {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/gradient-checks.md")]
    mod gradient_checks {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
