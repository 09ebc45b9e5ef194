//! Synthetic ellipsoid phantoms and oracles whose behaviour is a closed-form
//! function of the registered ground truth.
//!
//! Every random choice is drawn from a ChaCha stream keyed by the oracle
//! seed and a stable hash of the scan id (and, for the generalist, of the
//! prompts), so outputs are bitwise reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{stable_hash, Generalist, Segmentation, Specialist, TrainingItem};
use crate::error::{Error, Result};
use crate::metrics::boundary;
use crate::prompting::{Box2D, BoxPromptPair};
use crate::refinement::RoiBox;
use crate::volgrid::{class_mask, Dims, LabelMap, Mask, ProbVolume, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    /// Voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in voxels, before rotation.
    pub radii: [f64; 3],
    /// Rotation about the `z` axis, radians.
    pub angle: f64,
}

impl Ellipsoid {
    pub fn sphere(center: [f64; 3], r: f64) -> Self {
        Ellipsoid {
            center,
            radii: [r; 3],
            angle: 0.0,
        }
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        let d = [0, 1, 2].map(|k| p[k] as f64 - self.center[k]);
        let (s, c) = self.angle.sin_cos();
        let u = c * d[0] + s * d[1];
        let v = -s * d[0] + c * d[1];
        let r = self.radii;
        (u / r[0]).powi(2) + (v / r[1]).powi(2) + (d[2] / r[2]).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Organ `k` becomes class `k + 1`. Where ellipsoids overlap the lower
    /// index wins.
    pub organs: Vec<Ellipsoid>,
    pub intensity_noise: f32,
}

impl PhantomSpec {
    pub fn num_classes(&self) -> usize {
        (self.organs.len() + 1).max(2)
    }
}

pub fn organ_intensity(class: u8) -> f32 {
    if class == 0 {
        0.0
    } else {
        100.0 + 40.0 * class as f32
    }
}

/// Rasterises the organs and renders a noisy image.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelMap)> {
    if spec.organs.len() > 255 {
        return Err(Error::InvalidInput("at most 255 organs".into()));
    }
    let dims = spec.dims;
    let mut labels = vec![0u8; dims.len()];
    for (k, organ) in spec.organs.iter().enumerate() {
        for (i, l) in labels.iter_mut().enumerate() {
            if *l == 0 && organ.contains(dims.coords(i)) {
                *l = k as u8 + 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, spec.intensity_noise.max(0.0))
        .map_err(|e| Error::InvalidInput(format!("intensity noise: {e}")))?;
    let image = labels
        .iter()
        .map(|&l| organ_intensity(l) + noise.sample(&mut rng))
        .collect();
    Ok((
        Volume::new(dims, spec.spacing, image)?,
        LabelMap::new(spec.num_classes(), dims, labels)?,
    ))
}

/// Recipe for sampling random phantom specs: organs sit one per grid cell,
/// which keeps them disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayout {
    pub dims: Dims,
    pub spacing: Spacing,
    pub cells: [usize; 3],
    pub num_organs: usize,
    /// Range of the two in-plane semi-axes.
    pub radius_xy: (f64, f64),
    pub radius_z: (f64, f64),
    pub intensity_noise: f32,
}

impl Default for PhantomLayout {
    fn default() -> Self {
        PhantomLayout {
            dims: Dims([66, 44, 40]),
            spacing: Spacing([1.0; 3]),
            cells: [3, 2, 1],
            num_organs: 6,
            radius_xy: (8.0, 9.5),
            radius_z: (9.0, 15.0),
            intensity_noise: 10.0,
        }
    }
}

impl PhantomLayout {
    pub fn validate(&self) -> Result<()> {
        let cells = self.cells.iter().product::<usize>();
        if self.num_organs > cells || self.num_organs > 255 {
            return Err(Error::Config(format!(
                "{} organs do not fit {cells} layout cells",
                self.num_organs
            )));
        }
        let cell = [0, 1, 2].map(|k| self.dims.0[k] as f64 / self.cells[k] as f64);
        let (lo_xy, hi_xy) = self.radius_xy;
        let (lo_z, hi_z) = self.radius_z;
        if !(0.5 <= lo_xy && lo_xy <= hi_xy && 0.5 <= lo_z && lo_z <= hi_z) {
            return Err(Error::Config(
                "phantom radius ranges must be ordered and >= 0.5".into(),
            ));
        }
        if 2.0 * (hi_xy + 1.0) > cell[0].min(cell[1]) || 2.0 * (hi_z + 1.0) > cell[2] {
            return Err(Error::Config(format!(
                "organs up to radius {hi_xy}/{hi_z} do not fit cells of {cell:?} voxels"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<PhantomSpec> {
        self.validate()?;
        let cell = [0, 1, 2].map(|k| self.dims.0[k] as f64 / self.cells[k] as f64);
        let organs = (0..self.num_organs)
            .map(|k| {
                let idx = [
                    k % self.cells[0],
                    (k / self.cells[0]) % self.cells[1],
                    k / (self.cells[0] * self.cells[1]),
                ];
                let rxy = [
                    rng.gen_range(self.radius_xy.0..=self.radius_xy.1),
                    rng.gen_range(self.radius_xy.0..=self.radius_xy.1),
                ];
                let rz = rng.gen_range(self.radius_z.0..=self.radius_z.1);
                let reach = [rxy[0].max(rxy[1]), rxy[0].max(rxy[1]), rz];
                let center = [0, 1, 2].map(|a| {
                    let mid = (idx[a] as f64 + 0.5) * cell[a];
                    let slack = (cell[a] / 2.0 - reach[a] - 1.0).max(0.0);
                    mid + rng.gen_range(-slack..=slack)
                });
                Ellipsoid {
                    center,
                    radii: [rxy[0], rxy[1], rz],
                    angle: rng.gen_range(0.0..PI),
                }
            })
            .collect();
        Ok(PhantomSpec {
            dims: self.dims,
            spacing: self.spacing,
            organs,
            intensity_noise: self.intensity_noise,
        })
    }
}

fn scan_rng(seed: u64, scan_id: &str, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(scan_id.as_bytes()) ^ salt.rotate_left(29))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecialistParams {
    /// Logit scale of the one-hot prediction.
    pub kappa: f32,
    /// Correctly supervised voxels at which quality reaches half its purity.
    pub half_saturation: f64,
    /// Weight of voxels labeled as a class they do not belong to.
    pub noise_weight: f64,
    /// Weight of voxels of a class that the target marks as something else.
    pub conflict_weight: f64,
    /// Probability, at zero quality, that a background voxel touching an
    /// organ is predicted as that organ.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SpecialistParams {
    fn default() -> Self {
        SpecialistParams {
            kappa: 4.0,
            half_saturation: 15_000.0,
            noise_weight: 3.0,
            conflict_weight: 1.0,
            jitter: 0.5,
            seed: 0,
        }
    }
}

/// Specialist stand-in. Each class has a quality `q` in `[0, 1]`; a voxel of
/// a known class is dropped to background with probability
/// `(1 - q) (C - 1) / C`, background voxels face-adjacent to a known organ
/// are claimed by it with probability `(1 - q) * jitter`, and classes never
/// seen in supervision are never predicted.
#[derive(Debug, Clone)]
pub struct PhantomSpecialist {
    params: SpecialistParams,
    num_classes: usize,
    truth: BTreeMap<String, LabelMap>,
    /// `None` until the first fit.
    quality: Option<Vec<Option<f64>>>,
}

impl PhantomSpecialist {
    pub fn untrained(num_classes: usize, params: SpecialistParams) -> Self {
        PhantomSpecialist {
            params,
            num_classes,
            truth: BTreeMap::new(),
            quality: None,
        }
    }

    /// Every foreground class known at quality `q`.
    pub fn with_quality(num_classes: usize, params: SpecialistParams, q: f64) -> Self {
        let mut s = PhantomSpecialist::untrained(num_classes, params);
        let mut quality = vec![Some(q.clamp(0.0, 1.0)); num_classes];
        quality[0] = None;
        s.quality = Some(quality);
        s
    }

    pub fn register(&mut self, scan_id: impl Into<String>, truth: LabelMap) {
        self.truth.insert(scan_id.into(), truth);
    }

    /// Quality of a class, `None` when untrained or never supervised.
    pub fn quality(&self, class: u8) -> Option<f64> {
        self.quality
            .as_ref()?
            .get(class as usize)
            .copied()
            .flatten()
    }

    fn truth_for(&self, scan_id: &str) -> Result<&LabelMap> {
        self.truth.get(scan_id).ok_or_else(|| {
            Error::InvalidInput(format!("scan {scan_id:?} has no registered phantom truth"))
        })
    }

    /// Hard prediction before the softmax.
    pub fn predict_labels(&self, scan_id: &str) -> Result<Option<LabelMap>> {
        let Some(quality) = &self.quality else {
            return Ok(None);
        };
        let gt = self.truth_for(scan_id)?;
        let dims = gt.dims();
        let c = self.num_classes as f64;
        let mut rng = scan_rng(self.params.seed, scan_id, 0x5bec);
        let u: Vec<f64> = (0..dims.len()).map(|_| rng.gen()).collect();
        let d = dims.0;
        let mut out = vec![0u8; dims.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let g = gt.data()[i];
            if g != 0 {
                if let Some(q) = quality.get(g as usize).copied().flatten() {
                    if u[i] >= (1.0 - q) * (c - 1.0) / c {
                        *o = g;
                    }
                }
                continue;
            }
            let [x, y, z] = dims.coords(i);
            let neighbours = [
                (x > 0).then(|| dims.index(x - 1, y, z)),
                (x + 1 < d[0]).then(|| dims.index(x + 1, y, z)),
                (y > 0).then(|| dims.index(x, y - 1, z)),
                (y + 1 < d[1]).then(|| dims.index(x, y + 1, z)),
                (z > 0).then(|| dims.index(x, y, z - 1)),
                (z + 1 < d[2]).then(|| dims.index(x, y, z + 1)),
            ];
            let adjacent = neighbours
                .iter()
                .flatten()
                .map(|&j| gt.data()[j])
                .filter(|&l| l != 0 && quality.get(l as usize).copied().flatten().is_some())
                .min();
            if let Some(l) = adjacent {
                let q = quality[l as usize].unwrap();
                if u[i] < (1.0 - q) * self.params.jitter {
                    *o = l;
                }
            }
        }
        Ok(Some(LabelMap::new(self.num_classes, dims, out)?))
    }
}

impl Specialist for PhantomSpecialist {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, scan_id: &str, image: &Volume) -> Result<ProbVolume> {
        let Some(labels) = self.predict_labels(scan_id)? else {
            return ProbVolume::uniform(self.num_classes, image.dims());
        };
        image.dims().check_same(labels.dims())?;
        let n = labels.dims().len();
        let c = self.num_classes;
        let hot = self.params.kappa.exp();
        let z = hot + (c - 1) as f32;
        let (p_hot, p_cold) = (hot / z, 1.0 / z);
        let mut data = vec![p_cold; c * n];
        for (v, &l) in labels.data().iter().enumerate() {
            data[l as usize * n + v] = p_hot;
        }
        ProbVolume::new(c, labels.dims(), data)
    }

    /// Closed-form "training to convergence" on the given set: each class's
    /// quality is recomputed from the voxels the set supervises.
    fn fit(&mut self, items: &[TrainingItem<'_>]) -> Result<()> {
        let c = self.num_classes;
        let mut support = vec![0.0f64; c];
        let mut noise = vec![0.0f64; c];
        let mut conflict = vec![0.0f64; c];
        for item in items {
            let gt = self.truth_for(item.scan_id)?;
            let labels = item.target.labels();
            gt.dims().check_same(labels.dims())?;
            for (v, (&y, &g)) in labels.data().iter().zip(gt.data()).enumerate() {
                if item.selection.is_some_and(|m| !m.data()[v]) {
                    continue;
                }
                if y != 0 {
                    if y == g {
                        support[y as usize] += 1.0;
                    } else {
                        noise[y as usize] += 1.0;
                    }
                }
                if g != 0 && g != y && item.supervised.contains(&g) {
                    conflict[g as usize] += 1.0;
                }
            }
        }
        let p = &self.params;
        let quality = (0..c)
            .map(|k| {
                (k > 0 && support[k] > 0.0).then(|| {
                    let sat = support[k] / (support[k] + p.half_saturation);
                    let purity = support[k]
                        / (support[k]
                            + p.noise_weight * noise[k]
                            + p.conflict_weight * conflict[k]);
                    sat * purity
                })
            })
            .collect();
        self.quality = Some(quality);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralistParams {
    /// 1 reproduces the organ exactly from good prompts.
    pub cooperativeness: f64,
    /// At zero cooperativeness, the fraction of non-organ ROI voxels added to
    /// the candidate with moderate confidence.
    pub spurious_rate: f64,
    /// At zero cooperativeness, the number of confident blobs placed away
    /// from the prompts.
    pub far_blobs: usize,
    pub far_blob_radius: usize,
    pub seed: u64,
}

impl Default for GeneralistParams {
    fn default() -> Self {
        GeneralistParams {
            cooperativeness: 0.8,
            spurious_rate: 0.0,
            far_blobs: 0,
            far_blob_radius: 2,
            seed: 0,
        }
    }
}

/// Mean 2D IoU below which the prompts count as missing the organ.
pub const PROMPT_IOU_FLOOR: f64 = 0.25;
/// Class probability outside the returned candidate.
const OUTSIDE_PROB: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Bbox3 {
    lo: [usize; 3],
    hi: [usize; 3],
}

fn rect_iou(a_lo: [usize; 2], a_hi: [usize; 2], b_lo: [usize; 2], b_hi: [usize; 2]) -> f64 {
    let side = |k: usize| {
        let lo = a_lo[k].max(b_lo[k]);
        let hi = a_hi[k].min(b_hi[k]);
        if hi >= lo {
            hi - lo + 1
        } else {
            0
        }
    };
    let area = |lo: [usize; 2], hi: [usize; 2]| (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1);
    let inter = side(0) * side(1);
    let union = area(a_lo, a_hi) + area(b_lo, b_hi) - inter;
    inter as f64 / union as f64
}

fn box_iou(b: &Box2D, organ: &Bbox3) -> f64 {
    // axial compares (x, y), sagittal compares (y, z)
    let (a, c) = match b.plane {
        crate::prompting::Plane::Axial => (0, 1),
        crate::prompting::Plane::Sagittal => (1, 2),
    };
    rect_iou(
        b.lo,
        b.hi,
        [organ.lo[a], organ.lo[c]],
        [organ.hi[a], organ.hi[c]],
    )
}

/// Generalist stand-in: picks the organ whose bounding box best matches the
/// prompts and returns its ground truth, degraded by low cooperativeness or
/// poorly fitting prompts.
#[derive(Debug, Clone)]
pub struct PhantomGeneralist {
    params: GeneralistParams,
    truth: BTreeMap<String, (LabelMap, BTreeMap<u8, Bbox3>)>,
}

impl PhantomGeneralist {
    pub fn new(params: GeneralistParams) -> Self {
        PhantomGeneralist {
            params,
            truth: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, scan_id: impl Into<String>, truth: LabelMap) {
        let dims = truth.dims();
        let mut boxes: BTreeMap<u8, Bbox3> = BTreeMap::new();
        for (i, &l) in truth.data().iter().enumerate() {
            if l == 0 {
                continue;
            }
            let p = dims.coords(i);
            let b = boxes.entry(l).or_insert(Bbox3 { lo: p, hi: p });
            for k in 0..3 {
                b.lo[k] = b.lo[k].min(p[k]);
                b.hi[k] = b.hi[k].max(p[k]);
            }
        }
        self.truth.insert(scan_id.into(), (truth, boxes));
    }

    /// Prompt fit against the organ's box: mean IoU of the two 2D boxes.
    pub fn prompt_iou(&self, scan_id: &str, prompts: &BoxPromptPair, class: u8) -> Option<f64> {
        let (_, boxes) = self.truth.get(scan_id)?;
        boxes
            .get(&class)
            .map(|b| 0.5 * (box_iou(&prompts.axial, b) + box_iou(&prompts.sagittal, b)))
    }

    /// Organ confidence on the candidate for a prompt fit of `iou`.
    pub fn confidence(&self, iou: f64) -> f32 {
        if iou < PROMPT_IOU_FLOOR {
            0.5
        } else {
            (0.55 + 0.4 * self.params.cooperativeness * (iou / 0.6).min(1.0)) as f32
        }
    }
}

fn two_channel(dims: Dims, organ: Vec<f32>) -> Result<ProbVolume> {
    let mut data: Vec<f32> = organ.iter().map(|&p| 1.0 - p).collect();
    data.extend(organ);
    ProbVolume::new(2, dims, data)
}

impl Generalist for PhantomGeneralist {
    fn segment(
        &self,
        scan_id: &str,
        image: &crate::volgrid::Volume,
        prompts: &BoxPromptPair,
    ) -> Result<Segmentation> {
        let (gt, boxes) = self.truth.get(scan_id).ok_or_else(|| {
            Error::InvalidInput(format!("scan {scan_id:?} has no registered phantom truth"))
        })?;
        let dims = gt.dims();
        image.dims().check_same(dims)?;

        let best = boxes
            .iter()
            .map(|(&c, b)| {
                (
                    c,
                    0.5 * (box_iou(&prompts.axial, b) + box_iou(&prompts.sagittal, b)),
                )
            })
            .fold(None, |acc: Option<(u8, f64)>, (c, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((c, s)),
            });
        let Some((organ, iou)) = best.filter(|&(_, s)| s > 0.0) else {
            return Ok(Segmentation {
                mask: Mask::empty(dims),
                probs: ProbVolume::uniform(2, dims)?,
            });
        };

        let g = self.params.cooperativeness.clamp(0.0, 1.0);
        let salt = stable_hash(prompts.to_prompt_file().as_bytes());
        let mut rng = scan_rng(self.params.seed, scan_id, salt);
        let truth = class_mask(gt, organ as usize)?;
        let conf = self.confidence(iou);
        let mut mask = Mask::empty(dims);
        let mut p = vec![OUTSIDE_PROB; dims.len()];

        if iou < PROMPT_IOU_FLOOR {
            // missed prompt: eroded organ shifted along x, at the tie level
            let core = boundary(&truth);
            for [x, y, z] in truth.foreground() {
                if core.get(x, y, z) || x + 3 >= dims.nx() {
                    continue;
                }
                let i = dims.index(x + 3, y, z);
                mask.data_mut()[i] = true;
                p[i] = conf;
            }
            return Ok(Segmentation {
                mask,
                probs: two_channel(dims, p)?,
            });
        }

        let flip = 0.5 * (1.0 - g);
        let edge = boundary(&truth);
        for (i, &t) in truth.data().iter().enumerate() {
            if !t {
                continue;
            }
            if edge.data()[i] && rng.gen::<f64>() < flip {
                p[i] = 0.3;
            } else {
                mask.data_mut()[i] = true;
                p[i] = conf;
            }
        }
        let d = dims.0;
        for i in 0..dims.len() {
            if truth.data()[i] {
                continue;
            }
            let [x, y, z] = dims.coords(i);
            let touches = (x > 0 && truth.get(x - 1, y, z))
                || (x + 1 < d[0] && truth.get(x + 1, y, z))
                || (y > 0 && truth.get(x, y - 1, z))
                || (y + 1 < d[1] && truth.get(x, y + 1, z))
                || (z > 0 && truth.get(x, y, z - 1))
                || (z + 1 < d[2] && truth.get(x, y, z + 1));
            if touches && rng.gen::<f64>() < flip {
                mask.data_mut()[i] = true;
                p[i] = 0.5;
            }
        }

        let roi = RoiBox::from_prompts(prompts, 0, dims);
        let spurious = self.params.spurious_rate * (1.0 - g);
        if spurious > 0.0 {
            for i in 0..dims.len() {
                if !mask.data()[i]
                    && !truth.data()[i]
                    && roi.contains(dims.coords(i))
                    && rng.gen::<f64>() < spurious
                {
                    mask.data_mut()[i] = true;
                    p[i] = 0.55;
                }
            }
        }

        let blobs = (self.params.far_blobs as f64 * (1.0 - g)).round() as usize;
        let r = self.params.far_blob_radius;
        for _ in 0..blobs {
            let c = [0, 1, 2].map(|k| rng.gen_range(0..d[k]));
            let far = (0..3).any(|k| c[k] + r + 1 < roi.lo[k] || c[k] > roi.hi[k] + r + 1);
            if !far {
                continue;
            }
            for dz in 0..=2 * r {
                for dy in 0..=2 * r {
                    for dx in 0..=2 * r {
                        let q = [c[0] + dx, c[1] + dy, c[2] + dz].map(|v| v as i64 - r as i64);
                        if dims.contains(q) {
                            let i = dims.index(q[0] as usize, q[1] as usize, q[2] as usize);
                            if !truth.data()[i] {
                                mask.data_mut()[i] = true;
                                p[i] = 0.9;
                            }
                        }
                    }
                }
            }
        }

        Ok(Segmentation {
            mask,
            probs: two_channel(dims, p)?,
        })
    }
}

/// Adversarial generalist: random voxels inside the prompt box, every voxel
/// at probability one half.
#[derive(Debug, Clone, Copy)]
pub struct NoiseGeneralist {
    pub seed: u64,
}

impl Generalist for NoiseGeneralist {
    fn segment(
        &self,
        scan_id: &str,
        image: &crate::volgrid::Volume,
        prompts: &BoxPromptPair,
    ) -> Result<Segmentation> {
        let dims = image.dims();
        let roi = RoiBox::from_prompts(prompts, 0, dims);
        let mut rng = scan_rng(self.seed, scan_id, prompts.class_id as u64);
        let mask = Mask::from_fn(dims, |p| roi.contains(p) && rng.gen_bool(0.5));
        Ok(Segmentation {
            mask,
            probs: ProbVolume::uniform(2, dims)?,
        })
    }
}

/// Classes present in a label map, background excluded.
pub fn present_classes(labels: &LabelMap) -> BTreeSet<u8> {
    labels.data().iter().copied().filter(|&l| l != 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::make_box_prompts;
    use crate::vls::SupervisionTarget;
    use crate::volgrid::argmax_labelmap;

    fn sphere_spec() -> PhantomSpec {
        PhantomSpec {
            dims: Dims::new(32, 32, 32).unwrap(),
            spacing: Spacing::default(),
            organs: vec![Ellipsoid::sphere([16.0, 16.0, 16.0], 5.0)],
            intensity_noise: 5.0,
        }
    }

    fn suite(seed: u64) -> (PhantomSpec, Volume, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = PhantomLayout::default().sample(&mut rng).unwrap();
        let (img, gt) = generate_phantom(&spec, seed).unwrap();
        (spec, img, gt)
    }

    #[test]
    fn no_organs_is_background() {
        let spec = PhantomSpec {
            organs: vec![],
            ..sphere_spec()
        };
        let (_, gt) = generate_phantom(&spec, 1).unwrap();
        assert!(gt.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn sphere_count_matches_lattice_count() {
        let (_, gt) = generate_phantom(&sphere_spec(), 3).unwrap();
        let mut brute = 0;
        for z in 0..32i64 {
            for y in 0..32i64 {
                for x in 0..32i64 {
                    if (x - 16).pow(2) + (y - 16).pow(2) + (z - 16).pow(2) <= 25 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(gt.data().iter().filter(|&&l| l == 1).count(), brute);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom(&sphere_spec(), 9).unwrap();
        let b = generate_phantom(&sphere_spec(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&sphere_spec(), 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn layout_organs_are_all_present() {
        let (spec, _, gt) = suite(4);
        assert_eq!(present_classes(&gt).len(), spec.organs.len());
    }

    #[test]
    fn perfect_specialist_reproduces_truth() {
        let (spec, img, gt) = suite(5);
        let mut s =
            PhantomSpecialist::with_quality(spec.num_classes(), SpecialistParams::default(), 1.0);
        s.register("a", gt.clone());
        assert_eq!(argmax_labelmap(&s.predict("a", &img).unwrap()), gt);
    }

    #[test]
    fn untrained_specialist_is_uniform() {
        let (spec, img, _) = suite(5);
        let s = PhantomSpecialist::untrained(spec.num_classes(), SpecialistParams::default());
        let p = s.predict("a", &img).unwrap();
        assert_eq!(
            p,
            ProbVolume::uniform(spec.num_classes(), img.dims()).unwrap()
        );
    }

    #[test]
    fn zero_quality_is_chance_on_foreground() {
        let (spec, img, gt) = suite(6);
        let c = spec.num_classes();
        let mut s = PhantomSpecialist::with_quality(c, SpecialistParams::default(), 0.0);
        s.register("a", gt.clone());
        let pred = argmax_labelmap(&s.predict("a", &img).unwrap());
        let (hit, total) = gt
            .data()
            .iter()
            .zip(pred.data())
            .filter(|(&g, _)| g != 0)
            .fold((0usize, 0usize), |(h, t), (&g, &p)| {
                (h + (g == p) as usize, t + 1)
            });
        let acc = hit as f64 / total as f64;
        assert!((acc - 1.0 / c as f64).abs() < 0.02, "accuracy {acc}");
    }

    #[test]
    fn unsupervised_class_is_invisible() {
        let (spec, img, gt) = suite(7);
        let c = spec.num_classes();
        let mut s = PhantomSpecialist::untrained(c, SpecialistParams::default());
        s.register("a", gt.clone());
        // supervise every class except 3
        let partial: Vec<u8> = gt
            .data()
            .iter()
            .map(|&l| if l == 3 { 0 } else { l })
            .collect();
        let target = SupervisionTarget::ground_truth(LabelMap::new(c, gt.dims(), partial).unwrap());
        let supervised: BTreeSet<u8> = (1..c as u8).filter(|&k| k != 3).collect();
        s.fit(&[TrainingItem {
            scan_id: "a",
            image: &img,
            target: &target,
            supervised: &supervised,
            selection: None,
        }])
        .unwrap();
        assert_eq!(s.quality(3), None);
        let p = s.predict("a", &img).unwrap();
        assert!(p.channel(3).iter().zip(p.channel(0)).all(|(&a, &b)| a <= b));
        assert!(s.quality(1).unwrap() > 0.0);
    }

    #[test]
    fn generalist_perfect_prompts() {
        let (_, img, gt) = suite(8);
        let mut g = PhantomGeneralist::new(GeneralistParams {
            cooperativeness: 1.0,
            ..Default::default()
        });
        g.register("a", gt.clone());
        let prompts = make_box_prompts(&gt, 2, 0).unwrap();
        let out = g.segment("a", &img, &prompts).unwrap();
        assert_eq!(out.mask, class_mask(&gt, 2).unwrap());
        assert!(out
            .mask
            .foreground()
            .all(|[x, y, z]| out.probs.prob(1, img.dims().index(x, y, z)) >= 0.9));
    }

    #[test]
    fn generalist_off_organ_prompts() {
        let (_, img, gt) = suite(8);
        let mut g = PhantomGeneralist::new(GeneralistParams::default());
        g.register("a", gt.clone());
        let d = img.dims();
        // corner boxes touch no organ
        let prompts = BoxPromptPair::new(
            1,
            Box2D::new(crate::prompting::Plane::Axial, 0, [0, 0], [1, 1], d).unwrap(),
            Box2D::new(crate::prompting::Plane::Sagittal, 0, [0, 0], [1, 1], d).unwrap(),
        )
        .unwrap();
        let out = g.segment("a", &img, &prompts).unwrap();
        assert!(out.mask.is_empty());
    }
}
