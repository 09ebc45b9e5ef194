//! Orthogonal box prompts derived from a predicted organ mask.
//!
//! For a class mask the axial prompt lives on the lower-median `z` slice that
//! contains foreground and the sagittal prompt on the lower-median `x` slice.
//! Each is the tight in-plane bounding box of that slice, padded by `p`
//! voxels and clamped to the grid.
//!
//! In-plane coordinates are `(a, b) = (x, y)` for axial boxes and
//! `(a, b) = (y, z)` for sagittal boxes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volgrid::{class_mask, Dims, LabelMap, Mask};

pub const DEFAULT_PADDING: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    /// Fixed `z`.
    Axial,
    /// Fixed `x`.
    Sagittal,
}

impl Plane {
    /// Axis held fixed by the plane, and the two in-plane axes `(a, b)`.
    fn axes(self) -> (usize, [usize; 2]) {
        match self {
            Plane::Axial => (2, [0, 1]),
            Plane::Sagittal => (0, [1, 2]),
        }
    }

    pub fn in_plane_dims(self, dims: Dims) -> [usize; 2] {
        let (_, [a, b]) = self.axes();
        [dims.0[a], dims.0[b]]
    }

    pub fn slice_count(self, dims: Dims) -> usize {
        dims.0[self.axes().0]
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Plane::Axial => "axial",
            Plane::Sagittal => "sagittal",
        })
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::InvalidInput(format!("unknown plane {other:?}"))),
        }
    }
}

/// Axis-aligned box on one slice, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Box2D {
    pub plane: Plane,
    pub slice: usize,
    pub lo: [usize; 2],
    pub hi: [usize; 2],
}

impl Box2D {
    pub fn new(
        plane: Plane,
        slice: usize,
        lo: [usize; 2],
        hi: [usize; 2],
        dims: Dims,
    ) -> Result<Self> {
        let [na, nb] = plane.in_plane_dims(dims);
        if slice >= plane.slice_count(dims)
            || lo[0] > hi[0]
            || lo[1] > hi[1]
            || hi[0] >= na
            || hi[1] >= nb
        {
            return Err(Error::InvalidInput(format!(
                "{plane} box slice {slice} {lo:?}..={hi:?} does not fit dims {:?}",
                dims.0
            )));
        }
        Ok(Box2D {
            plane,
            slice,
            lo,
            hi,
        })
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        (self.lo[0]..=self.hi[0]).contains(&a) && (self.lo[1]..=self.hi[1]).contains(&b)
    }

    /// True when `other` lies on the same slice and within this box.
    pub fn encloses(&self, other: &Box2D) -> bool {
        self.plane == other.plane
            && self.slice == other.slice
            && self.lo[0] <= other.lo[0]
            && self.lo[1] <= other.lo[1]
            && self.hi[0] >= other.hi[0]
            && self.hi[1] >= other.hi[1]
    }

    pub fn area(&self) -> usize {
        (self.hi[0] - self.lo[0] + 1) * (self.hi[1] - self.lo[1] + 1)
    }
}

impl fmt::Display for Box2D {
    /// One prompt-file line: `axis slice a_min b_min a_max b_max`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.plane, self.slice, self.lo[0], self.lo[1], self.hi[0], self.hi[1]
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoxPromptPair {
    pub class_id: u8,
    pub axial: Box2D,
    pub sagittal: Box2D,
}

impl BoxPromptPair {
    pub fn new(class_id: u8, axial: Box2D, sagittal: Box2D) -> Result<Self> {
        if axial.plane != Plane::Axial || sagittal.plane != Plane::Sagittal {
            return Err(Error::InvalidInput(
                "prompt pair needs one axial and one sagittal box".into(),
            ));
        }
        Ok(BoxPromptPair {
            class_id,
            axial,
            sagittal,
        })
    }

    /// Prompt file body: the two box lines, axial first.
    pub fn to_prompt_file(&self) -> String {
        format!("{}\n{}\n", self.axial, self.sagittal)
    }

    /// Parses a prompt file. Blank lines and `#` comments are skipped; exactly
    /// one box per plane is required.
    pub fn parse_prompt_file(text: &str, class_id: u8, dims: Dims) -> Result<Self> {
        let mut axial = None;
        let mut sagittal = None;
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::Protocol(format!(
                    "prompt line {line:?} needs 6 fields"
                )));
            }
            let plane: Plane = fields[0].parse()?;
            let n: Vec<usize> = fields[1..]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Protocol(format!("non-integer field in {line:?}")))?;
            let b = Box2D::new(plane, n[0], [n[1], n[2]], [n[3], n[4]], dims)?;
            let slot = match plane {
                Plane::Axial => &mut axial,
                Plane::Sagittal => &mut sagittal,
            };
            if slot.replace(b).is_some() {
                return Err(Error::Protocol(format!("duplicate {plane} box")));
            }
        }
        match (axial, sagittal) {
            (Some(a), Some(s)) => BoxPromptPair::new(class_id, a, s),
            _ => Err(Error::Protocol(
                "prompt file needs an axial and a sagittal box".into(),
            )),
        }
    }
}

/// A 2D cut through a mask, indexed by in-plane `(a, b)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSlice {
    pub size: [usize; 2],
    data: Vec<bool>,
}

impl MaskSlice {
    pub fn new(size: [usize; 2], data: Vec<bool>) -> Result<Self> {
        if data.len() != size[0] * size[1] {
            return Err(Error::InvalidInput("slice data length mismatch".into()));
        }
        Ok(MaskSlice { size, data })
    }

    pub fn extract(mask: &Mask, plane: Plane, index: usize) -> Self {
        let dims = mask.dims();
        let size = plane.in_plane_dims(dims);
        let mut data = Vec::with_capacity(size[0] * size[1]);
        for b in 0..size[1] {
            for a in 0..size[0] {
                let v = match plane {
                    Plane::Axial => mask.get(a, b, index),
                    Plane::Sagittal => mask.get(index, a, b),
                };
                data.push(v);
            }
        }
        MaskSlice { size, data }
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.data[a + self.size[0] * b]
    }
}

/// Lower median of the slice indices along `plane`'s fixed axis that hold
/// at least one foreground voxel.
pub fn median_foreground_slice(mask: &Mask, plane: Plane) -> Result<usize> {
    let (axis, _) = plane.axes();
    let mut occupied = vec![false; mask.dims().0[axis]];
    for p in mask.foreground() {
        occupied[p[axis]] = true;
    }
    let slices: Vec<usize> = occupied
        .iter()
        .enumerate()
        .filter(|(_, &o)| o)
        .map(|(i, _)| i)
        .collect();
    if slices.is_empty() {
        return Err(Error::NoForeground);
    }
    Ok(slices[(slices.len() - 1) / 2])
}

/// Tight inclusive bounds of the foreground in a slice.
pub fn bbox_2d(slice: &MaskSlice) -> Result<([usize; 2], [usize; 2])> {
    let mut lo = [usize::MAX; 2];
    let mut hi = [0usize; 2];
    let mut any = false;
    for b in 0..slice.size[1] {
        for a in 0..slice.size[0] {
            if slice.get(a, b) {
                any = true;
                lo = [lo[0].min(a), lo[1].min(b)];
                hi = [hi[0].max(a), hi[1].max(b)];
            }
        }
    }
    if !any {
        return Err(Error::NoForeground);
    }
    Ok((lo, hi))
}

pub fn pad_box(b: &Box2D, p: usize, dims: Dims) -> Box2D {
    let [na, nb] = b.plane.in_plane_dims(dims);
    Box2D {
        lo: [b.lo[0].saturating_sub(p), b.lo[1].saturating_sub(p)],
        hi: [(b.hi[0] + p).min(na - 1), (b.hi[1] + p).min(nb - 1)],
        ..*b
    }
}

fn plane_box(mask: &Mask, plane: Plane, p: usize) -> Result<Box2D> {
    let slice = median_foreground_slice(mask, plane)?;
    let (lo, hi) = bbox_2d(&MaskSlice::extract(mask, plane, slice))?;
    Ok(pad_box(
        &Box2D {
            plane,
            slice,
            lo,
            hi,
        },
        p,
        mask.dims(),
    ))
}

/// Axial and sagittal prompts for one class of a predicted label map.
pub fn make_box_prompts(pred: &LabelMap, class_id: u8, p: usize) -> Result<BoxPromptPair> {
    let mask = class_mask(pred, class_id as usize)?;
    if mask.is_empty() {
        return Err(Error::NoPrediction(class_id));
    }
    prompts_from_mask(&mask, class_id, p)
}

/// Same as [`make_box_prompts`] for an already extracted mask.
pub fn prompts_from_mask(mask: &Mask, class_id: u8, p: usize) -> Result<BoxPromptPair> {
    if mask.is_empty() {
        return Err(Error::NoPrediction(class_id));
    }
    Ok(BoxPromptPair {
        class_id,
        axial: plane_box(mask, Plane::Axial, p)?,
        sagittal: plane_box(mask, Plane::Sagittal, p)?,
    })
}
