//! Segmentation models behind two small traits.
//!
//! The specialist is trainable and predicts every class; the generalist is a
//! frozen promptable model that segments one organ from a pair of box
//! prompts. Phantom implementations derive their output from registered
//! ground truth so the whole pipeline can run at desk scale; the file
//! implementation talks to external model processes through an exchange
//! directory.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::prompting::BoxPromptPair;
use crate::vls::SupervisionTarget;
use crate::volgrid::{Mask, ProbVolume, Volume};

pub mod file;
pub mod phantom;

pub use file::{FileOracle, EXCHANGE_DIR_ENV};
pub use phantom::{
    generate_phantom, Ellipsoid, GeneralistParams, NoiseGeneralist, PhantomGeneralist,
    PhantomLayout, PhantomSpec, PhantomSpecialist, SpecialistParams,
};

/// One scan's worth of supervision handed to [`Specialist::fit`].
#[derive(Debug, Clone, Copy)]
pub struct TrainingItem<'a> {
    pub scan_id: &'a str,
    pub image: &'a Volume,
    pub target: &'a SupervisionTarget,
    /// Foreground classes whose absence in the target carries information.
    /// Under full supervision this is every class; under partial supervision
    /// it is the labeled and pseudo-labeled classes.
    pub supervised: &'a BTreeSet<u8>,
    /// Voxel-level selection mask; `None` means every voxel counts.
    pub selection: Option<&'a Mask>,
}

pub trait Specialist: Send + Sync {
    fn num_classes(&self) -> usize;

    fn predict(&self, scan_id: &str, image: &Volume) -> Result<ProbVolume>;

    fn fit(&mut self, items: &[TrainingItem<'_>]) -> Result<()>;
}

/// Generalist output: a binary candidate and a two-channel
/// `{background, organ}` probability field.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub probs: ProbVolume,
}

pub trait Generalist: Send + Sync {
    fn segment(
        &self,
        scan_id: &str,
        image: &Volume,
        prompts: &BoxPromptPair,
    ) -> Result<Segmentation>;
}

/// FNV-1a, used to derive stable per-scan random streams.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
