//! Pseudo-label refinement: class-probability threshold, ROI constraint from
//! the box prompts, and the mean-entropy acceptance gate.

use std::fmt;

use crate::error::{Error, Result};
use crate::prompting::BoxPromptPair;
use crate::volgrid::{voxel_entropy, Dims, Mask, ProbVolume};

pub const DEFAULT_TAU_CLS: f32 = 0.4;
pub const DEFAULT_DELTA_ROI: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementConfig {
    pub tau_cls: f32,
    pub delta_roi: usize,
    pub gate_active: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            tau_cls: DEFAULT_TAU_CLS,
            delta_roi: DEFAULT_DELTA_ROI,
            gate_active: false,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_cls > 0.0 && self.tau_cls < 1.0) {
            return Err(Error::Config(format!(
                "tau_cls must lie in (0, 1), got {}",
                self.tau_cls
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptedEntropy {
    pub round: usize,
    pub mean_entropy: f64,
}

/// Refinement memory for one organ of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganRefinementState {
    pub class_id: u8,
    pub current_pseudo: Option<Mask>,
    /// Generalist class probability for each voxel of `current_pseudo`'s
    /// source candidate; used to settle overlaps between organs.
    pub current_confidence: Option<Vec<f32>>,
    /// Mean entropies of accepted candidates, oldest first.
    pub history: Vec<AcceptedEntropy>,
    pub rounds_completed: usize,
}

impl OrganRefinementState {
    pub fn new(class_id: u8) -> Self {
        OrganRefinementState {
            class_id,
            current_pseudo: None,
            current_confidence: None,
            history: Vec::new(),
            rounds_completed: 0,
        }
    }

    pub fn last_accepted_entropy(&self) -> Option<f64> {
        self.history.last().map(|h| h.mean_entropy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RejectReason {
    /// Threshold and ROI removed every voxel.
    Emptied,
    EntropyNotDecreased {
        previous: f64,
        candidate: f64,
    },
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Emptied => f.write_str("emptied"),
            RejectReason::EntropyNotDecreased { .. } => f.write_str("entropy-not-decreased"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateDecision {
    Accept,
    Reject(RejectReason),
}

impl GateDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, GateDecision::Accept)
    }
}

/// Keeps candidate voxels whose class probability is at least `tau_cls`.
pub fn apply_class_threshold(
    candidate: &Mask,
    probs: &ProbVolume,
    class_id: usize,
    tau_cls: f32,
) -> Result<Mask> {
    candidate.dims().check_same(probs.dims())?;
    if class_id >= probs.num_classes() {
        return Err(Error::ClassOutOfRange {
            class: class_id,
            num_classes: probs.num_classes(),
        });
    }
    let p = probs.channel(class_id);
    let data = candidate
        .data()
        .iter()
        .zip(p)
        .map(|(&m, &pi)| m && pi >= tau_cls)
        .collect();
    Mask::new(candidate.dims(), data)
}

/// Inclusive 3D box, `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl RoiBox {
    /// `x` from the axial box, `z` from the sagittal box, `y` as the union of
    /// both boxes' `y` ranges; then widened by `delta` and clamped.
    pub fn from_prompts(prompts: &BoxPromptPair, delta: usize, dims: Dims) -> RoiBox {
        let ax = &prompts.axial;
        let sg = &prompts.sagittal;
        let lo = [ax.lo[0], ax.lo[1].min(sg.lo[0]), sg.lo[1]];
        let hi = [ax.hi[0], ax.hi[1].max(sg.hi[0]), sg.hi[1]];
        RoiBox {
            lo: lo.map(|v| v.saturating_sub(delta)),
            hi: [0, 1, 2].map(|k| (hi[k] + delta).min(dims.0[k] - 1)),
        }
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|k| self.lo[k] <= p[k] && p[k] <= self.hi[k])
    }

    pub fn to_mask(&self, dims: Dims) -> Mask {
        Mask::from_fn(dims, |p| self.contains(p))
    }
}

pub fn build_roi(prompts: &BoxPromptPair, delta_roi: usize, dims: Dims) -> Mask {
    RoiBox::from_prompts(prompts, delta_roi, dims).to_mask(dims)
}

pub fn apply_roi(candidate: &Mask, roi: &Mask) -> Result<Mask> {
    candidate.and(roi)
}

pub fn mean_mask_entropy(mask: &Mask, entropy: &[f32]) -> Result<f64> {
    if entropy.len() != mask.dims().len() {
        return Err(Error::InvalidInput(format!(
            "entropy field has {} values for {} voxels",
            entropy.len(),
            mask.dims().len()
        )));
    }
    let (sum, n) = mask
        .data()
        .iter()
        .zip(entropy)
        .filter(|(&m, _)| m)
        .fold((0.0f64, 0usize), |(s, n), (_, &h)| (s + h as f64, n + 1));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Accepts unless the gate is active and the candidate's mean entropy fails
/// to drop strictly below the last accepted one.
pub fn entropy_gate(
    state: &OrganRefinementState,
    candidate_mean_entropy: f64,
    gate_active: bool,
) -> GateDecision {
    match state.last_accepted_entropy() {
        Some(previous) if gate_active && candidate_mean_entropy >= previous => {
            GateDecision::Reject(RejectReason::EntropyNotDecreased {
                previous,
                candidate: candidate_mean_entropy,
            })
        }
        _ => GateDecision::Accept,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    /// Candidate after threshold and ROI filtering.
    pub refined: Mask,
    pub mean_entropy: Option<f64>,
    pub decision: GateDecision,
}

/// Runs the three constraints on one candidate and updates `state`.
///
/// `class_channel` selects the organ's channel in `probs`, the probability
/// field that came with the candidate. On acceptance the refined mask
/// replaces `state.current_pseudo`; on rejection the stored pseudo-label is
/// left as it was.
pub fn refine_pseudo_label(
    candidate: &Mask,
    probs: &ProbVolume,
    class_channel: usize,
    prompts: &BoxPromptPair,
    config: &RefinementConfig,
    state: &mut OrganRefinementState,
    round: usize,
) -> Result<RefineOutcome> {
    config.validate()?;
    let dims = candidate.dims();
    let thresholded = apply_class_threshold(candidate, probs, class_channel, config.tau_cls)?;
    let refined = apply_roi(&thresholded, &build_roi(prompts, config.delta_roi, dims))?;
    state.rounds_completed += 1;

    if refined.is_empty() {
        return Ok(RefineOutcome {
            refined,
            mean_entropy: None,
            decision: GateDecision::Reject(RejectReason::Emptied),
        });
    }
    let h = mean_mask_entropy(&refined, &voxel_entropy(probs))?;
    let decision = entropy_gate(state, h, config.gate_active);
    if decision.is_accept() {
        state.history.push(AcceptedEntropy {
            round,
            mean_entropy: h,
        });
        state.current_pseudo = Some(refined.clone());
        state.current_confidence = Some(probs.channel(class_channel).to_vec());
    }
    Ok(RefineOutcome {
        refined,
        mean_entropy: Some(h),
        decision,
    })
}
