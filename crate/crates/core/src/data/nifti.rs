//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Only the fields needed for 3D label/intensity volumes are interpreted:
//! `dim`, `datatype`, `pixdim`, `vox_offset`, `scl_slope`/`scl_inter` and the
//! magic. Byte order is detected from `sizeof_hdr`. The x axis varies fastest
//! on disk, which maps to the width axis of a `[z, y, x]` volume.

use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.take(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.take(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.take(at))
    }

    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.take(at))
    }
}

/// Reads a 3D volume and its `(z, y, x)` spacing, applying intensity scaling.
pub fn read_nifti(path: &Path) -> Result<(Volume<f32>, [f64; 3])> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_nifti(&bytes).map_err(|message| Error::Parse { path: path.to_path_buf(), message })
}

pub fn parse_nifti(bytes: &[u8]) -> std::result::Result<(Volume<f32>, [f64; 3]), String> {
    if bytes.len() < HEADER_SIZE {
        return Err("file shorter than a NIfTI-1 header".into());
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let r = match (le, be) {
        (348, _) => Reader { bytes, big_endian: false },
        (_, 348) => Reader { bytes, big_endian: true },
        _ => return Err(format!("sizeof_hdr is {le}, expected 348")),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err("missing single-file NIfTI-1 magic \"n+1\"".into());
    }
    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(2..=7).contains(&ndim) {
        return Err(format!("dim[0] = {ndim} out of range"));
    }
    let extent = |i: usize| if i as i16 <= ndim { dim[i] } else { 1 };
    if (4..=7).any(|i| extent(i) != 1) {
        return Err("only 3D volumes are supported".into());
    }
    let (nx, ny, nz) = (extent(1), extent(2), extent(3));
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(format!("non-positive dimensions {nx}x{ny}x{nz}"));
    }
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    let datatype = r.i16(70);
    let pixdim: Vec<f32> = (0..8).map(|i| r.f32(76 + 4 * i)).collect();
    let vox_offset = r.f32(108);
    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(format!("invalid vox_offset {vox_offset}"));
    }
    let (slope, inter) = (r.f32(112), r.f32(116));
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };

    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype {other}")),
    };
    let n = nx * ny * nz;
    let start = vox_offset as usize;
    let block = bytes
        .get(start..start + n * width)
        .ok_or_else(|| format!("data block needs {} bytes after offset {start}", n * width))?;
    let r = Reader { bytes: block, big_endian: r.big_endian };
    let value = |i: usize| -> f64 {
        let at = i * width;
        match datatype {
            DT_UINT8 => block[at] as f64,
            DT_INT8 => block[at] as i8 as f64,
            DT_INT16 => r.i16(at) as f64,
            DT_UINT16 => u16::from_le_bytes(r.take(at)) as f64,
            DT_INT32 => r.i32(at) as f64,
            DT_UINT32 => u32::from_le_bytes(r.take(at)) as f64,
            DT_FLOAT32 => r.f32(at) as f64,
            _ => r.f64(at),
        }
    };
    let data = (0..n).map(|i| (value(i) * slope as f64 + inter as f64) as f32).collect();
    let spacing = [pixdim[3], pixdim[2], pixdim[1]].map(|p| if p > 0.0 { p as f64 } else { 1.0 });
    let volume = Volume::new([nz, ny, nx], data).map_err(|e| e.to_string())?;
    Ok((volume, spacing))
}

fn header(shape: [usize; 3], spacing: [f64; 3], datatype: i16, bitpix: i16) -> Result<Vec<u8>> {
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let [nz, ny, nx] = shape;
    let dims = [3, nx, ny, nz, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        let d = i16::try_from(*d).map_err(|_| Error::Parameter(format!("dimension {d} exceeds NIfTI-1 limits")))?;
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim = [1.0, spacing[2], spacing[1], spacing[0], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&(*p as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: millimetres
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

pub fn write_nifti_f32(path: &Path, volume: &Volume<f32>, spacing: [f64; 3]) -> Result<()> {
    let mut bytes = header(volume.shape, spacing, DT_FLOAT32, 32)?;
    bytes.extend(volume.data.iter().flat_map(|v| v.to_le_bytes()));
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_nifti_u8(path: &Path, volume: &Volume<u8>, spacing: [f64; 3]) -> Result<()> {
    let mut bytes = header(volume.shape, spacing, DT_UINT8, 8)?;
    bytes.extend_from_slice(&volume.data);
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled big-endian int16 file with scaling.
    fn big_endian_int16() -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, d) in [3i16, 2, 1, 2, 1, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&4i16.to_be_bytes());
        for (i, p) in [1.0f32, 0.5, 0.75, 6.0].iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_be_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[112..116].copy_from_slice(&2f32.to_be_bytes());
        h[116..120].copy_from_slice(&1f32.to_be_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for v in [1i16, -2, 3, 4] {
            h.extend_from_slice(&v.to_be_bytes());
        }
        h
    }

    #[test]
    fn reads_header_dims_spacing_and_scaling() {
        let (vol, spacing) = parse_nifti(&big_endian_int16()).unwrap();
        assert_eq!(vol.shape, [2, 1, 2]);
        assert_eq!(vol.data, vec![3.0, -3.0, 7.0, 9.0]);
        assert_eq!(spacing, [6.0, 0.75, 0.5]);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new([3, 2, 4], (0..24).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap();
        let p = dir.path().join("img.nii");
        write_nifti_f32(&p, &vol, [8.0, 1.5, 1.25]).unwrap();
        let (back, spacing) = read_nifti(&p).unwrap();
        assert_eq!(back, vol);
        assert_eq!(spacing, [8.0, 1.5, 1.25]);

        let mask = Volume::new([1, 2, 2], vec![0u8, 1, 2, 3]).unwrap();
        let p = dir.path().join("mask.nii");
        write_nifti_u8(&p, &mask, [1.0; 3]).unwrap();
        assert_eq!(read_nifti(&p).unwrap().0.data, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn malformed_headers() {
        let good = big_endian_int16();
        assert!(parse_nifti(&good[..100]).is_err());
        let mut bad_magic = good.clone();
        bad_magic[345] = b'i';
        assert!(parse_nifti(&bad_magic).is_err());
        let mut truncated = good.clone();
        truncated.truncate(355);
        assert!(parse_nifti(&truncated).is_err());
        let mut four_d = good.clone();
        four_d[40..42].copy_from_slice(&4i16.to_be_bytes());
        four_d[48..50].copy_from_slice(&3i16.to_be_bytes());
        assert!(parse_nifti(&four_d).unwrap_err().contains("3D"));
        let mut dtype = good;
        dtype[70..72].copy_from_slice(&32i16.to_be_bytes());
        assert!(parse_nifti(&dtype).is_err());
    }
}
