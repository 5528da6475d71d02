//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Reading promotes every supported datatype to `f32` and applies the
//! intensity scaling slope. The voxel-to-world affine is taken from the
//! sform when its code is set, otherwise from the qform, otherwise from
//! pixdim alone. Writing always produces datatype 16 (float32) with both
//! sform and qform populated.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array4;
use thiserror::Error;

use super::{column_norms, Affine, Volume, VolumeError, IDENTITY_AFFINE};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a NIfTI-1 file: bad magic number {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated NIfTI file: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("invalid dimensions {0:?}")]
    InvalidDims([i16; 8]),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.i32(off) as u32)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_nifti_bytes(&raw)
}

/// Parses an in-memory `.nii` or gzip-compressed `.nii.gz` image.
pub fn read_nifti_bytes(raw: &[u8]) -> Result<Volume, NiftiError> {
    let decompressed;
    let bytes: &[u8] = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|source| NiftiError::Io {
                path: "<gzip stream>".into(),
                source,
            })?;
        decompressed = out;
        &decompressed
    } else {
        raw
    };

    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            needed: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let sizeof_hdr = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let big_endian = if i32::from_le_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        false
    } else if i32::from_be_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(NiftiError::BadMagic(sizeof_hdr.to_vec()));
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(NiftiError::BadMagic(magic.to_vec()));
    }
    let r = Reader { bytes, big_endian };

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16(40 + 2 * i);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) || dim[1..=ndim as usize].iter().any(|d| *d < 1) {
        return Err(NiftiError::InvalidDims(dim));
    }
    let extent = |i: usize| -> usize {
        if i <= ndim as usize {
            dim[i] as usize
        } else {
            1
        }
    };
    let (nx, ny, nz) = (extent(1), extent(2), extent(3));
    let nc: usize = (4..=7).map(extent).product();

    let datatype = r.i16(70);
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(76 + 4 * i);
    }
    let vox_offset = (r.f32(108) as usize).max(HEADER_SIZE);
    let slope = r.f32(112);
    let inter = r.f32(116);
    let qform_code = r.i16(252);
    let sform_code = r.i16(254);

    let n = nx * ny * nz * nc;
    let needed = vox_offset + n * width;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated {
            needed,
            found: bytes.len(),
        });
    }

    let affine = if sform_code > 0 {
        let mut a = IDENTITY_AFFINE;
        for (row, base) in [280usize, 296, 312].iter().enumerate() {
            for col in 0..4 {
                a[row][col] = r.f32(base + 4 * col) as f64;
            }
        }
        a
    } else if qform_code > 0 {
        let quat = [r.f32(256), r.f32(260), r.f32(264)];
        let offset = [r.f32(268), r.f32(272), r.f32(276)];
        quatern_to_affine(quat, offset, &pixdim)
    } else {
        let mut a = IDENTITY_AFFINE;
        for i in 0..3 {
            a[i][i] = if pixdim[i + 1] > 0.0 { pixdim[i + 1] as f64 } else { 1.0 };
        }
        a
    };
    let spacing = column_norms(&affine);

    let data_bytes = &bytes[vox_offset..needed];
    let value = |i: usize| -> f32 {
        let off = i * width;
        let b = &data_bytes[off..off + width];
        let v: f64 = match datatype {
            2 => b[0] as f64,
            256 => b[0] as i8 as f64,
            4 => (if big_endian { i16::from_be_bytes([b[0], b[1]]) } else { i16::from_le_bytes([b[0], b[1]]) }) as f64,
            512 => (if big_endian { u16::from_be_bytes([b[0], b[1]]) } else { u16::from_le_bytes([b[0], b[1]]) }) as f64,
            8 => {
                let a: [u8; 4] = b.try_into().unwrap();
                (if big_endian { i32::from_be_bytes(a) } else { i32::from_le_bytes(a) }) as f64
            }
            768 => {
                let a: [u8; 4] = b.try_into().unwrap();
                (if big_endian { u32::from_be_bytes(a) } else { u32::from_le_bytes(a) }) as f64
            }
            16 => {
                let a: [u8; 4] = b.try_into().unwrap();
                let bits = if big_endian { u32::from_be_bytes(a) } else { u32::from_le_bytes(a) };
                return scale(f32::from_bits(bits), slope, inter);
            }
            64 => {
                let a: [u8; 8] = b.try_into().unwrap();
                let bits = if big_endian { u64::from_be_bytes(a) } else { u64::from_le_bytes(a) };
                f64::from_bits(bits)
            }
            _ => unreachable!(),
        };
        scale(v as f32, slope, inter)
    };

    let mut data = Array4::<f32>::zeros((nc, nx, ny, nz));
    for c in 0..nc {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data[[c, x, y, z]] = value(x + nx * (y + ny * (z + nz * c)));
                }
            }
        }
    }
    Ok(Volume::new(data, spacing, affine)?)
}

fn scale(v: f32, slope: f32, inter: f32) -> f32 {
    if slope == 0.0 || (slope == 1.0 && inter == 0.0) || !slope.is_finite() {
        v
    } else {
        v * slope + inter
    }
}

fn quatern_to_affine(q: [f32; 3], offset: [f32; 3], pixdim: &[f32; 8]) -> Affine {
    let (b, c, d) = (q[0] as f64, q[1] as f64, q[2] as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let sp = |i: usize| if pixdim[i] > 0.0 { pixdim[i] as f64 } else { 1.0 };
    let (xd, yd, zd) = (sp(1), sp(2), sp(3) * qfac);
    let rot = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let mut m = IDENTITY_AFFINE;
    for i in 0..3 {
        m[i][0] = rot[i][0] * xd;
        m[i][1] = rot[i][1] * yd;
        m[i][2] = rot[i][2] * zd;
        m[i][3] = offset[i] as f64;
    }
    m
}

/// Quaternion (b, c, d) and qfac of the rotation part of an affine.
fn affine_to_quatern(a: &Affine) -> ([f32; 3], f32) {
    let norms = column_norms(a);
    let mut r = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[i][j] / norms[j];
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let qfac = if det < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
        -1.0
    } else {
        1.0
    };
    let trace = r[0][0] + r[1][1] + r[2][2] + 1.0;
    let (mut qa, mut qb, mut qc, mut qd);
    if trace > 0.5 {
        qa = 0.5 * trace.sqrt();
        qb = 0.25 * (r[2][1] - r[1][2]) / qa;
        qc = 0.25 * (r[0][2] - r[2][0]) / qa;
        qd = 0.25 * (r[1][0] - r[0][1]) / qa;
    } else {
        let xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        let yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        let zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if xd > 1.0 {
            qb = 0.5 * xd.sqrt();
            qc = 0.25 * (r[0][1] + r[1][0]) / qb;
            qd = 0.25 * (r[0][2] + r[2][0]) / qb;
            qa = 0.25 * (r[2][1] - r[1][2]) / qb;
        } else if yd > 1.0 {
            qc = 0.5 * yd.sqrt();
            qb = 0.25 * (r[0][1] + r[1][0]) / qc;
            qd = 0.25 * (r[1][2] + r[2][1]) / qc;
            qa = 0.25 * (r[0][2] - r[2][0]) / qc;
        } else {
            qd = 0.5 * zd.sqrt();
            qb = 0.25 * (r[0][2] + r[2][0]) / qd;
            qc = 0.25 * (r[1][2] + r[2][1]) / qd;
            qa = 0.25 * (r[1][0] - r[0][1]) / qd;
        }
        if qa < 0.0 {
            qb = -qb;
            qc = -qc;
            qd = -qd;
            qa = -qa;
        }
    }
    let _ = qa;
    ([qb as f32, qc as f32, qd as f32], qfac)
}

/// Writes float32 NIfTI-1; gzip is used when the path ends in `.gz`.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let gzip = path.extension().map(|e| e == "gz").unwrap_or(false);
    let bytes = write_nifti_bytes(volume, gzip);
    let io_err = |source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(path, bytes).map_err(io_err)
}

pub fn write_nifti_bytes(volume: &Volume, gzip: bool) -> Vec<u8> {
    let [nx, ny, nz] = volume.shape3();
    let nc = volume.channels();
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [
        if nc > 1 { 4 } else { 3 },
        nx as i16,
        ny as i16,
        nz as i16,
        nc as i16,
        1,
        1,
        1,
    ];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, 16);
    put_i16(&mut h, 72, 32);
    let (quat, qfac) = affine_to_quatern(&volume.affine);
    let pixdim = [qfac, volume.spacing[0] as f32, volume.spacing[1] as f32, volume.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 10; // xyzt_units: mm + s
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for (i, q) in quat.iter().enumerate() {
        put_f32(&mut h, 256 + 4 * i, *q);
    }
    for i in 0..3 {
        put_f32(&mut h, 268 + 4 * i, volume.affine[i][3] as f32);
    }
    for (row, base) in [280usize, 296, 312].iter().enumerate() {
        for col in 0..4 {
            put_f32(&mut h, base + 4 * col, volume.affine[row][col] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    h.reserve(nx * ny * nz * nc * 4);
    for c in 0..nc {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    h.extend_from_slice(&volume.data[[c, x, y, z]].to_le_bytes());
                }
            }
        }
    }
    if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&h).expect("in-memory gzip");
        enc.finish().expect("in-memory gzip")
    } else {
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_fn(shape, |(c, x, y, z)| (c * 1000 + x * 100 + y * 10 + z) as f32 * 0.5)
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let mut affine = IDENTITY_AFFINE;
        affine[0][0] = -1.5;
        affine[1][1] = 2.0;
        affine[2][2] = 0.5;
        affine[0][3] = 12.25;
        affine[2][3] = -40.0;
        let v = Volume::new(ramp((1, 8, 8, 8)), [1.5, 2.0, 0.5], affine).unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&v, &p).unwrap();
            let back = read_nifti(&p).unwrap();
            assert_eq!(back.data, v.data);
            assert_eq!(back.spacing, v.spacing);
            assert_eq!(back.affine, v.affine);
        }
        let gz = fs::read(dir.path().join("a.nii.gz")).unwrap();
        assert_eq!(&gz[..2], &[0x1f, 0x8b]);
    }

    #[test]
    fn pixdim_becomes_spacing_without_sform() {
        let v = Volume::from_array(ramp((1, 2, 2, 2)), [1.0, 2.0, 3.0]).unwrap();
        let mut bytes = write_nifti_bytes(&v, false);
        bytes[252..254].copy_from_slice(&0i16.to_le_bytes());
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        let back = read_nifti_bytes(&bytes).unwrap();
        assert_eq!(back.spacing, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn qform_fallback_matches_sform() {
        // 90 degree rotation about z plus a flip, spacing (1, 2, 3)
        let affine = [
            [0.0, -2.0, 0.0, 10.0],
            [1.0, 0.0, 0.0, -5.0],
            [0.0, 0.0, -3.0, 7.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let v = Volume::new(ramp((1, 3, 4, 5)), [1.0, 2.0, 3.0], affine).unwrap();
        let mut bytes = write_nifti_bytes(&v, false);
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        let back = read_nifti_bytes(&bytes).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((back.affine[i][j] - affine[i][j]).abs() < 1e-5, "{i},{j}");
            }
        }
    }

    #[test]
    fn four_d_becomes_channels() {
        // independent writer: int16 datatype, two timepoints, x fastest
        let (nx, ny, nz, nt) = (2usize, 3usize, 2usize, 2usize);
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in [4i16, nx as i16, ny as i16, nz as i16, nt as i16, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&4i16.to_le_bytes());
        h[72..74].copy_from_slice(&16i16.to_le_bytes());
        for (i, p) in [1f32, 1.0, 1.0, 1.0, 1.0].iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for i in 0..(nx * ny * nz * nt) as i16 {
            h.extend_from_slice(&i.to_le_bytes());
        }
        let v = read_nifti_bytes(&h).unwrap();
        assert_eq!(v.data.shape(), &[2, 2, 3, 2]);
        assert_eq!(v.data[[1, 1, 2, 1]], (1 + 2 * 2 + 6 * 1 + 12 * 1) as f32);
        assert_eq!(v.data[[0, 1, 0, 0]], 1.0);
    }

    #[test]
    fn distinct_errors() {
        let v = Volume::from_array(ramp((1, 2, 2, 2)), [1.0; 3]).unwrap();
        let good = write_nifti_bytes(&v, false);

        let mut bad_magic = good.clone();
        bad_magic[344] = b'x';
        assert!(matches!(read_nifti_bytes(&bad_magic), Err(NiftiError::BadMagic(_))));

        let mut bad_type = good.clone();
        bad_type[70..72].copy_from_slice(&1i16.to_le_bytes());
        assert!(matches!(read_nifti_bytes(&bad_type), Err(NiftiError::UnsupportedDatatype(1))));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(read_nifti_bytes(truncated), Err(NiftiError::Truncated { .. })));
        assert!(matches!(read_nifti_bytes(&good[..100]), Err(NiftiError::Truncated { .. })));
    }
}
