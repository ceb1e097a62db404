//! Quality-adaptive semantic TSDF mapping.
//!
//! `map-adapt` builds volumetric maps from posed RGB-D frames with per-pixel
//! semantic observations. Instead of committing to one voxel size, the map
//! stores a coarse voxel grid and subdivides individual cells to middle or
//! fine resolution wherever the content demands it: semantic classes carry a
//! quality requirement (a chair deserves 1 cm voxels, a wall does not), and
//! local surface complexity can force finer voxels on its own. Coarse cells
//! keep integrating while split, so dropping back to a coarser level never
//! loses the running estimate.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`core_map`]: the adaptive voxel map, sparse per-voxel semantic
//!   distributions, split/merge logic, and binary map serialization.
//! - [`integrator`]: projecting depth frames to labeled points, per-level
//!   point admission, and TSDF raycasting into the map.
//! - [`curvature`]: per-frame geometric complexity from the structure tensor
//!   of local point neighborhoods.
//! - [`mesher`]: multi-resolution marching cubes with voxel substitution
//!   across resolution boundaries, plus PLY output.
//! - [`fixed`]: a deliberately plain single-resolution TSDF pipeline, used
//!   both as a degenerate mode (`--fixed-size`) and as an oracle in tests.
//! - [`metrics`]: mesh sampling, nearest-neighbor reconstruction metrics,
//!   and semantic scoring.
//! - [`dataset_io`]: readers and writers for the on-disk dataset layout
//!   (depth/color PNG, semantic rasters, poses, policies, manifests).
//! - [`scene_synth`]: analytic scenes, a depth/semantic renderer, and
//!   ground-truth sampling for end-to-end experiments without real sensors.
//!
//! The examples directory is the best starting point; each one exercises a
//! single capability end to end:
//!
//! ```text
//! examples/
//! ├── synthesize_dataset.rs    render a synthetic RGB-D+semantics sequence
//! ├── semantic_fusion.rs       sparse Bayesian label fusion on one voxel
//! ├── curvature_complexity.rs  structure-tensor complexity on plane vs sphere
//! ├── reconstruct_scene.rs     full adaptive reconstruction of a scene
//! ├── extract_mesh.rs          multi-resolution marching cubes to PLY
//! ├── adaptive_vs_fixed.rs     memory/runtime against a fixed-size map
//! └── evaluate_reconstruction.rs  completion/accuracy/mIoU report
//! ```
//!
//! Run one with `cargo run --release --example reconstruct_scene`.
//!
//! A thin CLI (`mapadapt`) wraps the same library calls for scripted use:
//! `synth`, `reconstruct`, `mesh`, `eval`, `info`.
//!
//! # Concurrency
//!
//! Map mutation is single-writer: integration takes `&mut` on the map, and
//! mesh extraction takes `&` with no concurrent writer (enforced by the
//! borrow checker in-process). Pure per-point stages (complexity estimation,
//! metric queries) parallelize internally with rayon; set `MAPADAPT_THREADS`
//! to cap the worker count when using the CLI.

pub mod core_map;
pub mod curvature;
pub mod dataset_io;
pub mod error;
pub mod fixed;
pub mod integrator;
pub mod mesher;
pub mod metrics;
pub mod scene_synth;
pub mod spatial;

pub use error::{Error, Result};
