//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Supports 3D volumes (or 4D with a single frame) stored as uint8, int16 or
//! float32 in either byte order. Voxel values are scaled by
//! `scl_slope·v + scl_inter` when the slope is non-zero.

use std::path::Path;

use crate::{Error, Result, Tensor};

pub const HEADER_SIZE: usize = 348;
const DEFAULT_VOX_OFFSET: usize = 352;

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("file is {0} bytes; a single-file NIfTI-1 volume needs at least 352")]
    TooShort(usize),
    #[error("sizeof_hdr is not 348 in either byte order (little-endian read: {0})")]
    BadHeaderSize(i32),
    #[error("bad magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("two-file NIfTI pairs (magic \"ni1\\0\") are not supported")]
    PairUnsupported,
    #[error("unsupported datatype code {0} (supported: 2 uint8, 4 int16, 16 float32)")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensions {0:?}: need a single 3D frame")]
    UnsupportedDims([i16; 8]),
    #[error("invalid vox_offset {0}")]
    BadOffset(f32),
    #[error("data section truncated: need {expected} bytes at offset {offset}, file has {available}")]
    Truncated {
        expected: usize,
        offset: usize,
        available: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }

    fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub endian: Endian,
    pub dim: [i16; 8],
    pub datatype: NiftiDatatype,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiHeader {
    /// `(D, H, W)` = `(dim[3], dim[2], dim[1])`.
    pub fn shape(&self) -> [usize; 3] {
        [self.dim[3] as usize, self.dim[2] as usize, self.dim[1] as usize]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().expect("in bounds")
    }
    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(at)),
            Endian::Big => i16::from_be_bytes(self.arr(at)),
        }
    }
    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(at)),
            Endian::Big => f32::from_be_bytes(self.arr(at)),
        }
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < DEFAULT_VOX_OFFSET {
        return Err(NiftiError::TooShort(bytes.len()));
    }
    let probe: [u8; 4] = bytes[0..4].try_into().expect("len checked");
    let endian = if i32::from_le_bytes(probe) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(probe) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::BadHeaderSize(i32::from_le_bytes(probe)));
    };
    let r = Reader { bytes, endian };

    let magic: [u8; 4] = r.arr(344);
    match &magic {
        b"n+1\0" => {}
        b"ni1\0" => return Err(NiftiError::PairUnsupported),
        _ => return Err(NiftiError::BadMagic(magic)),
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16(40 + 2 * i);
    }
    let ndim = dim[0];
    let single_frame = ndim == 3 || (ndim == 4 && dim[4] <= 1);
    if !single_frame || dim[1..4].iter().any(|&d| d < 1) {
        return Err(NiftiError::UnsupportedDims(dim));
    }
    let datatype = NiftiDatatype::from_code(r.i16(70))?;

    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 && vox_offset.fract() == 0.0) {
        return Err(NiftiError::BadOffset(vox_offset));
    }

    Ok(NiftiHeader {
        endian,
        dim,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
    })
}

/// Decodes a complete `.nii` byte image into a `[D,H,W]` float volume.
pub fn decode_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Tensor<f32>), NiftiError> {
    let header = parse_header(bytes)?;
    let shape = header.shape();
    let count: usize = shape.iter().product();
    let size = header.datatype.bytes();
    let needed = count * size;
    let available = bytes.len().saturating_sub(header.vox_offset);
    if available < needed {
        return Err(NiftiError::Truncated {
            expected: needed,
            offset: header.vox_offset,
            available,
        });
    }
    let body = &bytes[header.vox_offset..header.vox_offset + needed];
    let r = Reader {
        bytes: body,
        endian: header.endian,
    };
    let mut values: Vec<f32> = match header.datatype {
        NiftiDatatype::Uint8 => body.iter().map(|&b| b as f32).collect(),
        NiftiDatatype::Int16 => (0..count).map(|i| r.i16(2 * i) as f32).collect(),
        NiftiDatatype::Float32 => (0..count).map(|i| r.f32(4 * i)).collect(),
    };
    if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        let (a, b) = (header.scl_slope, header.scl_inter);
        values.iter_mut().for_each(|v| *v = a * *v + b);
    }
    // NIfTI's i index varies fastest, which is the last axis of (D,H,W).
    let volume = Tensor::new(&shape, values).expect("count matches shape");
    Ok((header, volume))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_nifti(&bytes)?.1)
}

/// Stored voxel values for [`encode_nifti`].
#[derive(Clone, Debug)]
pub enum StoredVoxels {
    Uint8(Vec<u8>),
    Int16(Vec<i16>),
    Float32(Vec<f32>),
}

impl StoredVoxels {
    fn datatype(&self) -> NiftiDatatype {
        match self {
            StoredVoxels::Uint8(_) => NiftiDatatype::Uint8,
            StoredVoxels::Int16(_) => NiftiDatatype::Int16,
            StoredVoxels::Float32(_) => NiftiDatatype::Float32,
        }
    }

    fn len(&self) -> usize {
        match self {
            StoredVoxels::Uint8(v) => v.len(),
            StoredVoxels::Int16(v) => v.len(),
            StoredVoxels::Float32(v) => v.len(),
        }
    }
}

/// Serializes a `[D,H,W]` volume as a single-file NIfTI-1 image with
/// unit voxel size and no extensions.
pub fn encode_nifti(shape: [usize; 3], voxels: &StoredVoxels, scl_slope: f32, scl_inter: f32, endian: Endian) -> Result<Vec<u8>> {
    let count: usize = shape.iter().product();
    if voxels.len() != count {
        return Err(Error::Shape(format!(
            "nifti: {} voxels supplied for shape {shape:?}",
            voxels.len()
        )));
    }
    if shape.iter().any(|&e| e == 0 || e > i16::MAX as usize) {
        return Err(Error::Shape(format!("nifti: extents {shape:?} out of range")));
    }
    let datatype = voxels.datatype();
    let mut out = vec![0u8; DEFAULT_VOX_OFFSET];
    let put16 = |buf: &mut [u8], at: usize, v: i16| {
        let b = match endian {
            Endian::Little => v.to_le_bytes(),
            Endian::Big => v.to_be_bytes(),
        };
        buf[at..at + 2].copy_from_slice(&b);
    };
    let put32 = |buf: &mut [u8], at: usize, b: [u8; 4]| buf[at..at + 4].copy_from_slice(&b);
    let i32b = |v: i32| match endian {
        Endian::Little => v.to_le_bytes(),
        Endian::Big => v.to_be_bytes(),
    };
    let f32b = |v: f32| match endian {
        Endian::Little => v.to_le_bytes(),
        Endian::Big => v.to_be_bytes(),
    };

    put32(&mut out, 0, i32b(HEADER_SIZE as i32));
    let dim = [3, shape[2] as i16, shape[1] as i16, shape[0] as i16, 1, 1, 1, 1];
    for (i, &d) in dim.iter().enumerate() {
        put16(&mut out, 40 + 2 * i, d);
    }
    put16(&mut out, 70, datatype.code());
    put16(&mut out, 72, (datatype.bytes() * 8) as i16);
    for i in 0..8 {
        put32(&mut out, 76 + 4 * i, f32b(1.0));
    }
    put32(&mut out, 108, f32b(DEFAULT_VOX_OFFSET as f32));
    put32(&mut out, 112, f32b(scl_slope));
    put32(&mut out, 116, f32b(scl_inter));
    out[344..348].copy_from_slice(b"n+1\0");

    match voxels {
        StoredVoxels::Uint8(v) => out.extend_from_slice(v),
        StoredVoxels::Int16(v) => v.iter().for_each(|&x| {
            out.extend_from_slice(&match endian {
                Endian::Little => x.to_le_bytes(),
                Endian::Big => x.to_be_bytes(),
            })
        }),
        StoredVoxels::Float32(v) => v.iter().for_each(|&x| out.extend_from_slice(&f32b(x))),
    }
    Ok(out)
}

/// Writes a float32 little-endian `.nii` with identity scaling.
pub fn write_nifti(path: impl AsRef<Path>, volume: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let shape: [usize; 3] = volume
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("nifti: expected a 3D volume, got {:?}", volume.shape())))?;
    let bytes = encode_nifti(shape, &StoredVoxels::Float32(volume.data().to_vec()), 1.0, 0.0, Endian::Little)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<f32>, Vec<u8>) {
        let values: Vec<f32> = (0..8).map(|i| i as f32 * 1.5 - 2.0).collect();
        let bytes = encode_nifti([2, 2, 2], &StoredVoxels::Float32(values.clone()), 1.0, 0.0, Endian::Little).unwrap();
        (values, bytes)
    }

    #[test]
    fn float_fixture_round_trips() {
        let (values, bytes) = fixture();
        assert_eq!(bytes.len(), 352 + 32);
        let (h, v) = decode_nifti(&bytes).unwrap();
        assert_eq!(h.endian, Endian::Little);
        assert_eq!(v.shape(), &[2, 2, 2]);
        assert_eq!(v.data(), &values[..]);
    }

    #[test]
    fn int16_scaling() {
        let bytes = encode_nifti([1, 1, 2], &StoredVoxels::Int16(vec![4, -2]), 0.5, 10.0, Endian::Little).unwrap();
        let (_, v) = decode_nifti(&bytes).unwrap();
        assert_eq!(v.data(), &[12.0, 9.0]);
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let bytes = encode_nifti([1, 1, 3], &StoredVoxels::Uint8(vec![0, 7, 255]), 0.0, 100.0, Endian::Little).unwrap();
        assert_eq!(decode_nifti(&bytes).unwrap().1.data(), &[0.0, 7.0, 255.0]);
    }

    #[test]
    fn axis_order_is_k_j_i() {
        // dim = (i=3, j=2, k=1): stored order varies i fastest.
        let vals: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let bytes = encode_nifti([1, 2, 3], &StoredVoxels::Float32(vals.clone()), 1.0, 0.0, Endian::Little).unwrap();
        let (h, v) = decode_nifti(&bytes).unwrap();
        assert_eq!(&h.dim[..4], &[3, 3, 2, 1]);
        assert_eq!(v.shape(), &[1, 2, 3]);
        assert_eq!(v.data(), &vals[..]);
    }

    #[test]
    fn distinct_errors() {
        let (_, good) = fixture();
        assert!(matches!(decode_nifti(&good[..300]), Err(NiftiError::TooShort(300))));

        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"abcd");
        assert!(matches!(decode_nifti(&bad), Err(NiftiError::BadMagic(_))));

        let mut pair = good.clone();
        pair[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode_nifti(&pair), Err(NiftiError::PairUnsupported)));

        let mut dt = good.clone();
        dt[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode_nifti(&dt), Err(NiftiError::UnsupportedDatatype(64))));

        assert!(matches!(decode_nifti(&good[..good.len() - 1]), Err(NiftiError::Truncated { .. })));

        let mut hdr = good.clone();
        hdr[0..4].copy_from_slice(&349i32.to_le_bytes());
        assert!(matches!(decode_nifti(&hdr), Err(NiftiError::BadHeaderSize(349))));

        let mut frames = good;
        frames[40..42].copy_from_slice(&4i16.to_le_bytes());
        frames[48..50].copy_from_slice(&3i16.to_le_bytes());
        assert!(matches!(decode_nifti(&frames), Err(NiftiError::UnsupportedDims(_))));
    }
}
