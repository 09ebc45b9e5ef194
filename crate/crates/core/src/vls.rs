//! Voxel-level selection (VLS) and the masked losses it feeds.
//!
//! A voxel whose target comes from a pseudo-labeled class contributes to the
//! loss only when the model's current argmax agrees with that target; voxels
//! of ground-truth classes (and background) always contribute.
//!
//! Losses take class-major probabilities in `f64` and return gradients with
//! respect to those probabilities, in the same layout.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::volgrid::{argmax_labelmap, LabelMap, Mask, ProbVolume};

pub const CE_PROB_FLOOR: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-5;

/// Supervision labels for one scan plus the classes that came from
/// pseudo-labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionTarget {
    labels: LabelMap,
    pseudo_classes: BTreeSet<u8>,
}

impl SupervisionTarget {
    pub fn new(labels: LabelMap, pseudo_classes: BTreeSet<u8>) -> Result<Self> {
        if let Some(&bad) = pseudo_classes
            .iter()
            .find(|&&c| c == 0 || c as usize >= labels.num_classes())
        {
            return Err(Error::InvalidInput(format!(
                "pseudo class {bad} must be a foreground class below {}",
                labels.num_classes()
            )));
        }
        Ok(SupervisionTarget {
            labels,
            pseudo_classes,
        })
    }

    /// Ground truth only.
    pub fn ground_truth(labels: LabelMap) -> Self {
        SupervisionTarget {
            labels,
            pseudo_classes: BTreeSet::new(),
        }
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn pseudo_classes(&self) -> &BTreeSet<u8> {
        &self.pseudo_classes
    }
}

pub fn vls_mask(pred: &ProbVolume, target: &SupervisionTarget) -> Result<Mask> {
    let labels = target.labels();
    pred.dims().check_same(labels.dims())?;
    let argmax = argmax_labelmap(pred);
    let pseudo = target.pseudo_classes();
    let data = labels
        .data()
        .iter()
        .zip(argmax.data())
        .map(|(&y, &yhat)| !pseudo.contains(&y) || yhat == y)
        .collect();
    Mask::new(labels.dims(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_shapes(probs: &[f64], labels: &LabelMap, mask: Option<&Mask>) -> Result<()> {
    let n = labels.dims().len();
    if probs.len() != n * labels.num_classes() {
        return Err(Error::InvalidInput(format!(
            "probability field has {} values, expected {}",
            probs.len(),
            n * labels.num_classes()
        )));
    }
    if let Some(m) = mask {
        labels.dims().check_same(m.dims())?;
    }
    Ok(())
}

/// Mean `-ln p_y` over selected voxels; zero when nothing is selected.
pub fn masked_cross_entropy(probs: &[f64], labels: &LabelMap, mask: &Mask) -> Result<LossGrad> {
    check_shapes(probs, labels, Some(mask))?;
    let n = labels.dims().len();
    let selected = mask.count();
    let norm = selected.max(1) as f64;
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    for (v, (&y, &m)) in labels.data().iter().zip(mask.data()).enumerate() {
        if !m {
            continue;
        }
        let i = y as usize * n + v;
        let p = probs[i];
        total -= p.max(CE_PROB_FLOOR).ln();
        if p > CE_PROB_FLOOR {
            grad[i] = -1.0 / (norm * p);
        }
    }
    Ok(LossGrad {
        value: total / norm,
        grad,
    })
}

/// Unmasked mean cross-entropy over all voxels.
pub fn cross_entropy(probs: &[f64], labels: &LabelMap) -> Result<LossGrad> {
    check_shapes(probs, labels, None)?;
    let n = labels.dims().len();
    let mut grad = vec![0.0; probs.len()];
    let total: f64 = labels
        .data()
        .iter()
        .enumerate()
        .map(|(v, &y)| {
            let i = y as usize * n + v;
            if probs[i] > CE_PROB_FLOOR {
                grad[i] = -1.0 / (n as f64 * probs[i]);
            }
            -probs[i].max(CE_PROB_FLOOR).ln()
        })
        .sum();
    Ok(LossGrad {
        value: total / n as f64,
        grad,
    })
}

struct DiceSums {
    inter: f64,
    pred: f64,
    target: f64,
}

fn dice_from_sums(
    probs: &[f64],
    labels: &LabelMap,
    sums: &[DiceSums],
    selected: impl Fn(usize) -> bool,
) -> LossGrad {
    let n = labels.dims().len();
    let present: Vec<usize> = (1..labels.num_classes())
        .filter(|&c| sums[c].target > 0.0)
        .collect();
    let mut grad = vec![0.0; probs.len()];
    if present.is_empty() {
        return LossGrad { value: 0.0, grad };
    }
    let k = present.len() as f64;
    let mut mean_dice = 0.0;
    for &c in &present {
        let s = &sums[c];
        let num = 2.0 * s.inter + DICE_EPS;
        let den = s.pred + s.target + DICE_EPS;
        mean_dice += num / den;
        for (v, &y) in labels.data().iter().enumerate() {
            if !selected(v) {
                continue;
            }
            let t = if y as usize == c { 1.0 } else { 0.0 };
            // d(num/den)/dp = (2 t den - num) / den^2
            grad[c * n + v] = -(2.0 * t * den - num) / (den * den) / k;
        }
    }
    LossGrad {
        value: 1.0 - mean_dice / k,
        grad,
    }
}

/// `1 - mean_c D_c` over foreground classes present in the selected target.
pub fn masked_soft_dice(probs: &[f64], labels: &LabelMap, mask: &Mask) -> Result<LossGrad> {
    check_shapes(probs, labels, Some(mask))?;
    let n = labels.dims().len();
    let sums: Vec<DiceSums> = (0..labels.num_classes())
        .map(|c| {
            let mut s = DiceSums {
                inter: 0.0,
                pred: 0.0,
                target: 0.0,
            };
            for (v, (&y, &m)) in labels.data().iter().zip(mask.data()).enumerate() {
                let m = if m { 1.0 } else { 0.0 };
                let p = m * probs[c * n + v];
                let t = m * if y as usize == c { 1.0 } else { 0.0 };
                s.inter += p * t;
                s.pred += p;
                s.target += t;
            }
            s
        })
        .collect();
    Ok(dice_from_sums(probs, labels, &sums, |v| mask.data()[v]))
}

/// Unmasked soft Dice loss.
pub fn soft_dice(probs: &[f64], labels: &LabelMap) -> Result<LossGrad> {
    check_shapes(probs, labels, None)?;
    let n = labels.dims().len();
    let sums: Vec<DiceSums> = (0..labels.num_classes())
        .map(|c| {
            let mut s = DiceSums {
                inter: 0.0,
                pred: 0.0,
                target: 0.0,
            };
            for (v, &y) in labels.data().iter().enumerate() {
                let p = probs[c * n + v];
                let t = if y as usize == c { 1.0 } else { 0.0 };
                s.inter += p * t;
                s.pred += p;
                s.target += t;
            }
            s
        })
        .collect();
    Ok(dice_from_sums(probs, labels, &sums, |_| true))
}

/// VLS-masked cross-entropy and soft Dice for one prediction.
pub fn vls_losses(pred: &ProbVolume, target: &SupervisionTarget) -> Result<(LossGrad, LossGrad)> {
    let mask = vls_mask(pred, target)?;
    let p = pred.to_f64();
    Ok((
        masked_cross_entropy(&p, target.labels(), &mask)?,
        masked_soft_dice(&p, target.labels(), &mask)?,
    ))
}
