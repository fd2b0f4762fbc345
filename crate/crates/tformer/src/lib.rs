//! 3D tooth segmentation on intra-oral scan meshes.
//!
//! The pipeline turns a labeled triangle mesh into a per-face feature point
//! cloud (coordinates, normals, discrete Gaussian curvature, and a point
//! curvature measuring local normal variation), feeds it through an
//! EdgeConv + shared-QK attention network with dual segmentation heads, and
//! trains with a curvature-guided focal loss on top of plain cross entropy.
//! Full-resolution meshes are segmented by tiling the point cloud into
//! network-sized batches and merging the per-tile predictions.
//!
//! Entry points:
//! - [`synth`]: procedural labeled dental-arch scans for experiments
//! - [`mesh`]: OBJ / ASCII-PLY I/O and derived face quantities
//! - [`geometry`]: per-point features, curvature, kNN graphs, down-sampling
//! - [`autodiff`]: the reverse-mode array engine everything trains on
//! - [`network`]: the segmentation network itself
//! - [`losses`], [`trainer`], [`inference`], [`metrics`]: the training and
//!   evaluation loop
//! - [`cli`]: the `tformer` command-line front end
//!
//! See the crate `examples/` directory for one runnable program per
//! capability.

pub mod autodiff;
pub mod fdi;
pub mod geometry;
pub mod mesh;
pub mod synth;
