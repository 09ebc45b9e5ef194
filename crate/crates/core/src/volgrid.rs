//! Voxel grids shared by every stage of the pipeline.
//!
//! All grids use the same linear layout: `x` varies fastest, then `y`, then
//! `z`. Per-class fields ([`ProbVolume`]) are class-major, so channel `c`
//! occupies `data[c * n .. (c + 1) * n]` where `n` is the voxel count. This is
//! also the payload order of the NIfTI files written by [`crate::nifti`].

use crate::error::{Error, Result};

/// Grid extent `[nx, ny, nz]`, each at least one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidInput(format!(
                "dims must be >= 1 on every axis, got [{nx}, {ny}, {nz}]"
            )));
        }
        Ok(Dims([nx, ny, nz]))
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn nz(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.0[0];
        let yz = i / self.0[0];
        [x, yz % self.0[1], yz / self.0[1]]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < self.0[k])
    }

    pub(crate) fn check_same(&self, other: Dims) -> Result<()> {
        if *self != other {
            return Err(Error::DimMismatch {
                expected: self.0,
                actual: other.0,
            });
        }
        Ok(())
    }
}

/// Voxel size in millimetres along `x`, `y`, `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(sx: f64, sy: f64, sz: f64) -> Result<Self> {
        let s = [sx, sy, sz];
        if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "spacing must be finite and > 0, got {s:?}"
            )));
        }
        Ok(Spacing(s))
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Spacing::new(self.0[0] * k, self.0[1] * k, self.0[2] * k)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing([1.0; 3])
    }
}

/// Scalar image volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidInput(format!(
                "volume data has {} values, dims {:?} need {}",
                data.len(),
                dims.0,
                dims.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidInput(format!(
                "mask has {} voxels, dims {:?} need {}",
                data.len(),
                dims.0,
                dims.len()
            )));
        }
        Ok(Mask { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![true; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        Mask { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.dims.check_same(other.dims)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Mask {
            dims: self.dims,
            data,
        })
    }

    /// True when every voxel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Iterator over coordinates of set voxels, in layout order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.dims.coords(i))
    }
}

/// Per-voxel class probabilities, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    num_classes: usize,
    dims: Dims,
    data: Vec<f32>,
}

/// Per-voxel tolerance on `sum_c p_c(v) = 1`.
pub const PROB_SUM_TOLERANCE: f32 = 1e-5;

impl ProbVolume {
    pub fn new(num_classes: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        let pv = ProbVolume {
            num_classes,
            dims,
            data,
        };
        pv.validate()?;
        Ok(pv)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let n = self.dims.len();
        if self.data.len() != n * self.num_classes {
            return Err(Error::InvalidInput(format!(
                "probability field has {} values, expected {}",
                self.data.len(),
                n * self.num_classes
            )));
        }
        if let Some(bad) = self.data.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!(
                "probability {} at flat index {bad} outside [0, 1]",
                self.data[bad]
            )));
        }
        for v in 0..n {
            let s: f32 = (0..self.num_classes).map(|c| self.data[c * n + v]).sum();
            if (s - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "probabilities at voxel {v} sum to {s}"
                )));
            }
        }
        Ok(())
    }

    /// Every voxel gets `1 / C` for every class.
    pub fn uniform(num_classes: usize, dims: Dims) -> Result<Self> {
        ProbVolume::new(
            num_classes,
            dims,
            vec![1.0 / num_classes as f32; num_classes * dims.len()],
        )
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Probabilities of one class for every voxel.
    pub fn channel(&self, class: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[class * n..(class + 1) * n]
    }

    #[inline]
    pub fn prob(&self, class: usize, voxel: usize) -> f32 {
        self.data[class * self.dims.len() + voxel]
    }

    /// Widened copy of the data for 64-bit loss evaluation.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&p| p as f64).collect()
    }
}

/// Integer label grid with `0` as background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    num_classes: usize,
    dims: Dims,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(num_classes: usize, dims: Dims, data: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::InvalidInput(format!(
                "label maps support 2..=256 classes, got {num_classes}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidInput(format!(
                "label map has {} voxels, dims {:?} need {}",
                data.len(),
                dims.0,
                dims.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::ClassOutOfRange {
                class: bad as usize,
                num_classes,
            });
        }
        Ok(LabelMap {
            num_classes,
            dims,
            data,
        })
    }

    pub fn background(num_classes: usize, dims: Dims) -> Result<Self> {
        LabelMap::new(num_classes, dims, vec![0; dims.len()])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Writes one voxel label, checking it against the class count.
    pub fn set(&mut self, voxel: usize, label: u8) -> Result<()> {
        if label as usize >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class: label as usize,
                num_classes: self.num_classes,
            });
        }
        self.data[voxel] = label;
        Ok(())
    }

    /// Same labels, larger class count (used when a file lacks the full range).
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        LabelMap::new(num_classes, self.dims, self.data)
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.data.contains(&class)
    }
}

fn check_class(class: usize, num_classes: usize) -> Result<()> {
    if class >= num_classes {
        return Err(Error::ClassOutOfRange { class, num_classes });
    }
    Ok(())
}

/// Per-voxel softmax over a class-major logit field.
pub fn softmax_from_logits(num_classes: usize, dims: Dims, logits: &[f32]) -> Result<ProbVolume> {
    if num_classes < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 classes, got {num_classes}"
        )));
    }
    let n = dims.len();
    if logits.len() != n * num_classes {
        return Err(Error::InvalidInput(format!(
            "logit field has {} values, expected {}",
            logits.len(),
            n * num_classes
        )));
    }
    if let Some(bad) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite logit {} at flat index {bad}",
            logits[bad]
        )));
    }
    let mut out = vec![0.0f32; logits.len()];
    for v in 0..n {
        let max = (0..num_classes)
            .map(|c| logits[c * n + v])
            .fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for c in 0..num_classes {
            let e = (logits[c * n + v] - max).exp();
            out[c * n + v] = e;
            sum += e;
        }
        for c in 0..num_classes {
            out[c * n + v] /= sum;
        }
    }
    ProbVolume::new(num_classes, dims, out)
}

/// Voxel-wise argmax; ties go to the smallest class index.
pub fn argmax_labelmap(p: &ProbVolume) -> LabelMap {
    let n = p.dims.len();
    let data = (0..n)
        .map(|v| {
            let mut best = 0usize;
            let mut best_p = p.data[v];
            for c in 1..p.num_classes {
                let q = p.data[c * n + v];
                if q > best_p {
                    best = c;
                    best_p = q;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        num_classes: p.num_classes,
        dims: p.dims,
        data,
    }
}

pub fn class_mask(labels: &LabelMap, class_id: usize) -> Result<Mask> {
    check_class(class_id, labels.num_classes)?;
    let c = class_id as u8;
    Ok(Mask {
        dims: labels.dims,
        data: labels.data.iter().map(|&l| l == c).collect(),
    })
}

/// Shannon entropy (natural log) per voxel, with `0 ln 0 = 0`.
pub fn voxel_entropy(p: &ProbVolume) -> Vec<f32> {
    let n = p.dims.len();
    let max_h = (p.num_classes as f32).ln();
    (0..n)
        .map(|v| {
            let h: f32 = (0..p.num_classes)
                .map(|c| {
                    let q = p.data[c * n + v];
                    if q > 0.0 {
                        -q * q.ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            h.clamp(0.0, max_h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_voxel() -> Dims {
        Dims::new(1, 1, 1).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_from_logits(2, one_voxel(), &[0.0, 0.0]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let p = softmax_from_logits(2, one_voxel(), &[1000.0, 0.0]).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);

        let p = softmax_from_logits(2, one_voxel(), &[std::f32::consts::LN_2, 0.0]).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_from_logits(2, one_voxel(), &[f32::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(softmax_from_logits(2, one_voxel(), &[f32::INFINITY, 0.0]).is_err());
        assert!(softmax_from_logits(1, one_voxel(), &[0.0]).is_err());
    }

    #[test]
    fn argmax_examples() {
        let p = ProbVolume::new(3, one_voxel(), vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(argmax_labelmap(&p).data(), &[1]);

        let p = ProbVolume::new(2, one_voxel(), vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_labelmap(&p).data(), &[0]);

        let dims = Dims::new(2, 3, 2).unwrap();
        let u = ProbVolume::uniform(3, dims).unwrap();
        assert!(argmax_labelmap(&u).data().iter().all(|&l| l == 0));
    }

    #[test]
    fn class_mask_examples() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let zeros = LabelMap::background(3, dims).unwrap();
        assert!(class_mask(&zeros, 1).unwrap().is_empty());

        let twos = LabelMap::new(3, dims, vec![2; 4]).unwrap();
        assert_eq!(class_mask(&twos, 2).unwrap().count(), 4);

        let mixed = LabelMap::new(3, dims, vec![0, 1, 1, 2]).unwrap();
        assert_eq!(
            class_mask(&mixed, 1).unwrap().data(),
            &[false, true, true, false]
        );
        assert!(matches!(
            class_mask(&mixed, 3),
            Err(Error::ClassOutOfRange { class: 3, .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        let p = ProbVolume::new(2, one_voxel(), vec![1.0, 0.0]).unwrap();
        assert_eq!(voxel_entropy(&p), vec![0.0]);

        let p = ProbVolume::uniform(4, one_voxel()).unwrap();
        assert!((voxel_entropy(&p)[0] - 4f32.ln()).abs() < 1e-6);

        let p = ProbVolume::new(2, one_voxel(), vec![0.5, 0.5]).unwrap();
        assert!((voxel_entropy(&p)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(Dims::new(0, 1, 1).is_err());
        assert!(Spacing::new(1.0, 0.0, 1.0).is_err());
        assert!(Spacing::new(1.0, f64::NAN, 1.0).is_err());
        assert!(ProbVolume::new(2, one_voxel(), vec![0.6, 0.6]).is_err());
        assert!(ProbVolume::new(2, one_voxel(), vec![1.5, -0.5]).is_err());
        assert!(LabelMap::new(3, one_voxel(), vec![3]).is_err());
        assert!(Volume::new(one_voxel(), Spacing::default(), vec![]).is_err());
    }

    #[test]
    fn layout_is_x_fastest() {
        let d = Dims::new(3, 4, 5).unwrap();
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
        for i in 0..d.len() {
            let [x, y, z] = d.coords(i);
            assert_eq!(d.index(x, y, z), i);
        }
    }
}
