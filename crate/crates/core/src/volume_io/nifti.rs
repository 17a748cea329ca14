//! Minimal single-file NIfTI-1 reader and writer (`.nii`, `.nii.gz`).
//!
//! Reads any scalar numeric datatype in either byte order, applies
//! `scl_slope`/`scl_inter`, and converts to `f32`. Writes little-endian
//! `FLOAT32` images or `UINT8` label maps with a diagonal sform.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Modality, Space, Volume3D};
use crate::anatomical::RegionLabelMap;
use crate::error::{Error, Result};
use crate::nn::{voxel_count, Dims};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl DataType {
    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            256 => Self::I8,
            512 => Self::U16,
            768 => Self::U32,
            1024 => Self::I64,
            1280 => Self::U64,
            c => return Err(Error::Nifti(format!("unsupported datatype code {c}"))),
        })
    }

    fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
            Self::I8 => 256,
            Self::U16 => 512,
            Self::U32 => 768,
            Self::I64 => 1024,
            Self::U64 => 1280,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::I64 | Self::U64 | Self::F64 => 8,
        }
    }
}

/// Decoded image: extent, voxel size in mm, and voxel values.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub shape: Dims,
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.big {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.arr(at))
    }
    fn value(&self, dt: DataType, at: usize) -> f64 {
        match dt {
            DataType::U8 => self.bytes[at] as f64,
            DataType::I8 => self.bytes[at] as i8 as f64,
            DataType::I16 => i16::from_le_bytes(self.arr(at)) as f64,
            DataType::U16 => u16::from_le_bytes(self.arr(at)) as f64,
            DataType::I32 => i32::from_le_bytes(self.arr(at)) as f64,
            DataType::U32 => u32::from_le_bytes(self.arr(at)) as f64,
            DataType::I64 => i64::from_le_bytes(self.arr(at)) as f64,
            DataType::U64 => u64::from_le_bytes(self.arr(at)) as f64,
            DataType::F32 => f32::from_le_bytes(self.arr(at)) as f64,
            DataType::F64 => f64::from_le_bytes(self.arr(at)),
        }
    }
}

/// Parses an uncompressed or gzip-compressed NIfTI-1 byte stream.
pub fn decode(bytes: &[u8]) -> Result<RawImage> {
    let owned;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Nifti(format!("gzip: {e}")))?;
        owned = out;
        &owned[..]
    } else {
        bytes
    };
    if bytes.len() < HEADER_LEN {
        return Err(Error::Nifti("file shorter than a NIfTI-1 header".into()));
    }
    let big = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::Nifti("sizeof_hdr is not 348".into())),
    };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(Error::Nifti("missing NIfTI-1 magic".into()));
    }
    let r = Reader { bytes, big };
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("invalid dim[0] = {ndim}")));
    }
    let dim = |i: usize| -> i64 {
        if i as i16 <= ndim {
            r.i16(40 + 2 * i) as i64
        } else {
            1
        }
    };
    if (4..=7).any(|i| dim(i) > 1) {
        return Err(Error::Nifti("only scalar 3D volumes are supported".into()));
    }
    if (1..=3).any(|i| dim(i) < 1) {
        return Err(Error::Nifti("non-positive dimension".into()));
    }
    let shape: Dims = [dim(1) as usize, dim(2) as usize, dim(3) as usize];
    let dt = DataType::from_code(r.i16(70))?;
    let spacing: [f64; 3] = std::array::from_fn(|i| {
        let p = r.f32(76 + 4 * (i + 1)).abs() as f64;
        if p > 0.0 && p.is_finite() {
            p
        } else {
            1.0
        }
    });
    let offset = (r.f32(108) as usize).max(HEADER_LEN);
    let n = voxel_count(shape);
    if bytes.len() < offset + n * dt.size() {
        return Err(Error::Nifti(format!(
            "payload truncated: need {} bytes after offset {offset}",
            n * dt.size()
        )));
    }
    let (slope, inter) = (r.f32(112) as f64, r.f32(116) as f64);
    let scale = slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0);
    let data = (0..n)
        .map(|i| {
            let v = r.value(dt, offset + i * dt.size());
            (if scale { v * slope + inter } else { v }) as f32
        })
        .collect();
    Ok(RawImage { shape, spacing, data })
}

/// Serialises a volume as little-endian NIfTI-1 with the given storage type.
pub fn encode(img: &RawImage, dt: DataType) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    put(&mut h, 38, b"r");
    let dims = [3i16, img.shape[0] as i16, img.shape[1] as i16, img.shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &dt.code().to_le_bytes());
    put(&mut h, 72, &((dt.size() * 8) as i16).to_le_bytes());
    let pixdim = [1.0f32, img.spacing[0] as f32, img.spacing[1] as f32, img.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(DATA_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    // xyzt_units: millimetres
    h[123] = 2;
    put(&mut h, 254, &1i16.to_le_bytes());
    for axis in 0..3 {
        let mut row = [0.0f32; 4];
        row[axis] = img.spacing[axis] as f32;
        for (j, v) in row.iter().enumerate() {
            put(&mut h, 280 + 16 * axis + 4 * j, &v.to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");
    let mut out = h;
    out.reserve(img.data.len() * dt.size());
    for &v in &img.data {
        match dt {
            DataType::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            DataType::I8 => out.push(v.round().clamp(-128.0, 127.0) as i8 as u8),
            DataType::I16 => out.extend_from_slice(&(v.round() as i16).to_le_bytes()),
            DataType::U16 => out.extend_from_slice(&(v.round() as u16).to_le_bytes()),
            DataType::I32 => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
            DataType::U32 => out.extend_from_slice(&(v.round() as u32).to_le_bytes()),
            DataType::I64 => out.extend_from_slice(&(v.round() as i64).to_le_bytes()),
            DataType::U64 => out.extend_from_slice(&(v.round() as u64).to_le_bytes()),
            DataType::F32 => out.extend_from_slice(&v.to_le_bytes()),
            DataType::F64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
    out
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_raw(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Nifti(m) => Error::Nifti(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_raw(path: &Path, img: &RawImage, dt: DataType) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = encode(img, dt);
    let bytes = if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a scalar image volume in native space.
pub fn read_volume(path: &Path, modality: Modality) -> Result<Volume3D> {
    let raw = read_raw(path)?;
    Volume3D::new(raw.data, raw.shape, raw.spacing, modality, Space::Native)
}

pub fn write_volume(path: &Path, v: &Volume3D) -> Result<()> {
    let raw = RawImage {
        shape: v.shape(),
        spacing: v.spacing(),
        data: v.data().to_vec(),
    };
    let dt = if v.modality() == Modality::LabelMap {
        DataType::U8
    } else {
        DataType::F32
    };
    write_raw(path, &raw, dt)
}

pub fn read_label_map(path: &Path) -> Result<RegionLabelMap> {
    let raw = read_raw(path)?;
    let labels = raw
        .data
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=3.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Nifti(format!("{}: label code {v} outside 0..=3", path.display())))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    RegionLabelMap::new(labels, raw.shape, raw.spacing)
}

pub fn write_label_map(path: &Path, map: &RegionLabelMap) -> Result<()> {
    let raw = RawImage {
        shape: map.shape(),
        spacing: map.spacing(),
        data: map.labels().iter().map(|&c| c as f32).collect(),
    };
    write_raw(path, &raw, DataType::U8)
}
