//! Single-file NIfTI-1 (`.nii`) reader and writer for the subset used by the
//! pipeline: `uint8` label grids, `float32` image volumes and 4D `float32`
//! class-probability fields.
//!
//! Files are always written little-endian with `vox_offset = 352` (the 348
//! byte header followed by a zeroed 4 byte extension flag). Big-endian files
//! are detected from `sizeof_hdr` and byte-swapped on read. Orientation
//! fields (qform/sform) are carried through untouched but never interpreted.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volgrid::{Dims, LabelMap, Mask, ProbVolume, Spacing, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN: usize = 256;
    pub const SROW: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i16)]
pub enum Datatype {
    Uint8 = 2,
    Float32 = 16,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            16 => Ok(Datatype::Float32),
            other => Err(Error::UnsupportedFormat(other)),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Float32 => 4,
        }
    }

    fn bitpix(self) -> i16 {
        8 * self.bytes_per_voxel() as i16
    }
}

/// qform/sform block, preserved verbatim across read-modify-write.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    /// srow_x, srow_y, srow_z, row-major
    pub srow: [f32; 12],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub orientation: Orientation,
}

impl NiftiHeader {
    fn for_grid(
        datatype: Datatype,
        dims: Dims,
        channels: Option<usize>,
        spacing: Spacing,
    ) -> Result<Self> {
        let mut dim = [1i16; 8];
        let to_i16 = |v: usize| {
            i16::try_from(v)
                .map_err(|_| Error::InvalidInput(format!("dimension {v} exceeds NIfTI-1 limit")))
        };
        dim[0] = if channels.is_some() { 4 } else { 3 };
        for k in 0..3 {
            dim[k + 1] = to_i16(dims.0[k])?;
        }
        if let Some(c) = channels {
            dim[4] = to_i16(c)?;
        }
        let mut pixdim = [0f32; 8];
        pixdim[0] = 1.0;
        for k in 0..3 {
            pixdim[k + 1] = spacing.0[k] as f32;
        }
        if channels.is_some() {
            pixdim[4] = 1.0;
        }
        let mut descrip = [0u8; 80];
        descrip[..4].copy_from_slice(b"ipnp");
        Ok(NiftiHeader {
            dim,
            datatype,
            pixdim,
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // millimetres
            xyzt_units: 2,
            descrip,
            orientation: Orientation::default(),
        })
    }

    pub fn dims(&self) -> Result<Dims> {
        let d = |k: usize| usize::try_from(self.dim[k]).unwrap_or(0);
        Dims::new(d(1), d(2), d(3))
    }

    pub fn spacing(&self) -> Result<Spacing> {
        Spacing::new(
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        )
    }

    /// Number of channels on the 4th axis, `None` for 3D files.
    pub fn channels(&self) -> Option<usize> {
        (self.dim[0] == 4).then(|| usize::try_from(self.dim[4]).unwrap_or(0))
    }

    fn payload_len(&self) -> Result<usize> {
        let vox = self.dims()?.len() * self.channels().unwrap_or(1);
        Ok(vox * self.datatype.bytes_per_voxel())
    }

    fn encode(&self) -> [u8; VOX_OFFSET] {
        let mut b = [0u8; VOX_OFFSET];
        put_i32(&mut b, offsets::SIZEOF_HDR, HEADER_SIZE as i32);
        for (k, d) in self.dim.iter().enumerate() {
            put_i16(&mut b, offsets::DIM + 2 * k, *d);
        }
        put_i16(&mut b, offsets::DATATYPE, self.datatype as i16);
        put_i16(&mut b, offsets::BITPIX, self.datatype.bitpix());
        for (k, p) in self.pixdim.iter().enumerate() {
            put_f32(&mut b, offsets::PIXDIM + 4 * k, *p);
        }
        put_f32(&mut b, offsets::VOX_OFFSET, VOX_OFFSET as f32);
        put_f32(&mut b, offsets::SCL_SLOPE, self.scl_slope);
        put_f32(&mut b, offsets::SCL_INTER, self.scl_inter);
        b[offsets::XYZT_UNITS] = self.xyzt_units;
        b[offsets::DESCRIP..offsets::DESCRIP + 80].copy_from_slice(&self.descrip);
        let o = &self.orientation;
        put_i16(&mut b, offsets::QFORM_CODE, o.qform_code);
        put_i16(&mut b, offsets::SFORM_CODE, o.sform_code);
        for (k, q) in o.quatern.iter().enumerate() {
            put_f32(&mut b, offsets::QUATERN + 4 * k, *q);
        }
        for (k, s) in o.srow.iter().enumerate() {
            put_f32(&mut b, offsets::SROW + 4 * k, *s);
        }
        b[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);
        b
    }

    fn decode(bytes: &[u8]) -> Result<(Self, bool)> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::NotNifti(format!(
                "{} bytes is shorter than the {HEADER_SIZE} byte header",
                bytes.len()
            )));
        }
        let big_endian = match (
            i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
        ) {
            (348, _) => false,
            (_, 348) => true,
            (le, _) => return Err(Error::NotNifti(format!("sizeof_hdr is {le}, expected 348"))),
        };
        let r = Reader { bytes, big_endian };
        if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
            return Err(Error::NotNifti(format!(
                "magic {:?}, expected \"n+1\\0\"",
                &bytes[offsets::MAGIC..offsets::MAGIC + 4]
            )));
        }
        let mut dim = [0i16; 8];
        for (k, d) in dim.iter_mut().enumerate() {
            *d = r.i16(offsets::DIM + 2 * k);
        }
        if !(3..=4).contains(&dim[0]) || dim[1..=dim[0] as usize].iter().any(|&d| d < 1) {
            return Err(Error::CorruptFile(format!("unsupported dim field {dim:?}")));
        }
        let datatype = Datatype::from_code(r.i16(offsets::DATATYPE))?;
        let bitpix = r.i16(offsets::BITPIX);
        if bitpix != datatype.bitpix() {
            return Err(Error::CorruptFile(format!(
                "bitpix {bitpix} disagrees with datatype {datatype:?}"
            )));
        }
        let mut pixdim = [0f32; 8];
        for (k, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(offsets::PIXDIM + 4 * k);
        }
        let mut descrip = [0u8; 80];
        descrip.copy_from_slice(&bytes[offsets::DESCRIP..offsets::DESCRIP + 80]);
        let mut quatern = [0f32; 6];
        for (k, q) in quatern.iter_mut().enumerate() {
            *q = r.f32(offsets::QUATERN + 4 * k);
        }
        let mut srow = [0f32; 12];
        for (k, s) in srow.iter_mut().enumerate() {
            *s = r.f32(offsets::SROW + 4 * k);
        }
        let header = NiftiHeader {
            dim,
            datatype,
            pixdim,
            vox_offset: r.f32(offsets::VOX_OFFSET),
            scl_slope: r.f32(offsets::SCL_SLOPE),
            scl_inter: r.f32(offsets::SCL_INTER),
            xyzt_units: bytes[offsets::XYZT_UNITS],
            descrip,
            orientation: Orientation {
                qform_code: r.i16(offsets::QFORM_CODE),
                sform_code: r.i16(offsets::SFORM_CODE),
                quatern,
                srow,
            },
        };
        Ok((header, big_endian))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b: [u8; 2] = self.bytes[at..at + 2].try_into().unwrap();
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn put_i16(b: &mut [u8], at: usize, v: i16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], at: usize, v: i32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], at: usize, v: f32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

/// A decoded grid; which variant depends on datatype and dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Volume(Volume),
    Labels(LabelMap),
    Probs(ProbVolume),
}

impl Grid {
    pub fn dims(&self) -> Dims {
        match self {
            Grid::Volume(v) => v.dims(),
            Grid::Labels(l) => l.dims(),
            Grid::Probs(p) => p.dims(),
        }
    }
}

/// Borrowed grid to write. Masks are stored as `uint8` 0/1.
#[derive(Debug, Clone, Copy)]
pub enum GridRef<'a> {
    Volume(&'a Volume),
    Labels(&'a LabelMap),
    Probs(&'a ProbVolume),
    Mask(&'a Mask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiFile {
    pub header: NiftiHeader,
    pub grid: Grid,
}

impl NiftiFile {
    pub fn into_labels(self) -> Result<LabelMap> {
        match self.grid {
            Grid::Labels(l) => Ok(l),
            _ => Err(Error::InvalidInput("expected a uint8 3D label map".into())),
        }
    }

    pub fn into_volume(self) -> Result<Volume> {
        match self.grid {
            Grid::Volume(v) => Ok(v),
            _ => Err(Error::InvalidInput("expected a float32 3D volume".into())),
        }
    }

    pub fn into_probs(self) -> Result<ProbVolume> {
        match self.grid {
            Grid::Probs(p) => Ok(p),
            _ => Err(Error::InvalidInput(
                "expected a float32 4D probability field".into(),
            )),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<NiftiFile> {
    let (header, big_endian) = NiftiHeader::decode(bytes)?;
    let offset = header.vox_offset;
    if !(offset.fract() == 0.0 && offset >= HEADER_SIZE as f32) {
        return Err(Error::CorruptFile(format!("invalid vox_offset {offset}")));
    }
    let offset = offset as usize;
    let payload_len = header.payload_len()?;
    if bytes.len() != offset + payload_len {
        return Err(Error::CorruptFile(format!(
            "file holds {} payload bytes, header declares {payload_len}",
            bytes.len().saturating_sub(offset)
        )));
    }
    let payload = &bytes[offset..];
    let dims = header.dims()?;
    let grid = match (header.datatype, header.channels()) {
        (Datatype::Uint8, None) => {
            let data = payload.to_vec();
            let max = data.iter().copied().max().unwrap_or(0) as usize;
            Grid::Labels(LabelMap::new((max + 1).max(2), dims, data)?)
        }
        (Datatype::Float32, channels) => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| {
                    let b: [u8; 4] = c.try_into().unwrap();
                    if big_endian {
                        f32::from_be_bytes(b)
                    } else {
                        f32::from_le_bytes(b)
                    }
                })
                .collect();
            match channels {
                None => Grid::Volume(Volume::new(dims, header.spacing()?, data)?),
                Some(c) => Grid::Probs(ProbVolume::new(c, dims, data)?),
            }
        }
        (Datatype::Uint8, Some(_)) => {
            return Err(Error::CorruptFile(
                "4D uint8 files are not supported".into(),
            ))
        }
    };
    Ok(NiftiFile { header, grid })
}

pub fn read(path: impl AsRef<Path>) -> Result<NiftiFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn header_for(grid: GridRef<'_>, spacing: Spacing) -> Result<NiftiHeader> {
    match grid {
        GridRef::Volume(v) => NiftiHeader::for_grid(Datatype::Float32, v.dims(), None, spacing),
        GridRef::Labels(l) => NiftiHeader::for_grid(Datatype::Uint8, l.dims(), None, spacing),
        GridRef::Mask(m) => NiftiHeader::for_grid(Datatype::Uint8, m.dims(), None, spacing),
        GridRef::Probs(p) => {
            NiftiHeader::for_grid(Datatype::Float32, p.dims(), Some(p.num_classes()), spacing)
        }
    }
}

fn encode_with(grid: GridRef<'_>, header: &NiftiHeader) -> Vec<u8> {
    let mut out = header.encode().to_vec();
    match grid {
        GridRef::Labels(l) => out.extend_from_slice(l.data()),
        GridRef::Mask(m) => out.extend(m.data().iter().map(|&b| b as u8)),
        GridRef::Volume(v) => out.extend(v.data().iter().flat_map(|f| f.to_le_bytes())),
        GridRef::Probs(p) => out.extend(p.data().iter().flat_map(|f| f.to_le_bytes())),
    }
    out
}

/// Serialises a grid with a fresh header.
pub fn encode(grid: GridRef<'_>, spacing: Spacing) -> Result<Vec<u8>> {
    let header = header_for(grid, spacing)?;
    Ok(encode_with(grid, &header))
}

/// Serialises a grid reusing `template`'s orientation, units and description.
pub fn encode_like(grid: GridRef<'_>, spacing: Spacing, template: &NiftiHeader) -> Result<Vec<u8>> {
    let mut header = header_for(grid, spacing)?;
    header.orientation = template.orientation;
    header.xyzt_units = template.xyzt_units;
    header.descrip = template.descrip;
    header.scl_slope = template.scl_slope;
    header.scl_inter = template.scl_inter;
    header.pixdim[0] = template.pixdim[0];
    Ok(encode_with(grid, &header))
}

pub fn write(path: impl AsRef<Path>, grid: GridRef<'_>, spacing: Spacing) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(grid, spacing)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_like(
    path: impl AsRef<Path>,
    grid: GridRef<'_>,
    spacing: Spacing,
    template: &NiftiHeader,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_like(grid, spacing, template)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
