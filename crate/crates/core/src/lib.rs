//! Partial-label segmentation pipeline: box prompts from a specialist's
//! predictions, pseudo-label refinement of a promptable generalist's output,
//! voxel-level selection losses, metrics, and the iterative orchestration,
//! with the models behind oracle traits.

pub mod error;
pub mod manifest;
pub mod metrics;
pub mod nifti;
pub mod oracles;
pub mod pipeline;
pub mod prompting;
pub mod refinement;
pub mod vls;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::{Dims, LabelMap, Mask, ProbVolume, Spacing, Volume};
