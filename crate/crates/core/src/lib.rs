//! Hierarchical image classification grounded on nested superpixel
//! segmentation.
//!
//! The crate covers the full desk-scale pipeline: taxonomies and tree-path
//! targets ([`taxonomy`]), a synthetic hierarchical-shapes dataset
//! ([`data`]), superpixel tokenization ([`superpixel`]), the segment
//! transformer with graph pooling ([`model`], [`pool`]), training objectives
//! ([`losses`]), hierarchical metrics ([`metrics`]), Grad-CAM style
//! diagnostics and segmentation scoring ([`analysis`]), the training loop
//! and ablations ([`trainer`]), and the command-line front end ([`cli`]).

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod superpixel;
pub mod tape;
pub mod taxonomy;
pub mod trainer;

pub use error::{HcastError, Result};
pub use exec::Execution;
pub use model::{Architecture, HeadMode, LevelLogits, Model, ModelConfig, SegmentHierarchy};
pub use taxonomy::{LabelPath, TaxonomyTree, TreePathTarget};
