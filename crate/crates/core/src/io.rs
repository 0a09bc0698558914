//! On-disk formats: the JSON + raw volume container, NIfTI-1 import/export,
//! and JSON document helpers.
//!
//! A container is a pair `<name>.json` / `<name>.raw`. The header lists
//! `shape` (x, y, z), `spacing_mm`, `origin_mm`, `dtype` (`f32`, `i16` or
//! `u8`) and `byte_order` (always `"little"`). The raw file is x-fastest,
//! z-slowest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I16,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: DType,
    pub byte_order: String,
}

/// Path of the raw payload belonging to a container header.
pub fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.to_owned(),
        source: e,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_owned(),
        source: e,
    })
}

/// Saves `v` as `<path>` (header) + sibling `.raw`, converting to `dtype`.
/// Integer dtypes round to nearest and saturate.
pub fn save_container(v: &Volume, path: &Path, dtype: DType) -> Result<()> {
    let header = ContainerHeader {
        shape: v.shape(),
        spacing_mm: v.spacing(),
        origin_mm: v.origin(),
        dtype,
        byte_order: "little".into(),
    };
    let mut raw = Vec::with_capacity(v.len() * dtype.size());
    match dtype {
        DType::F32 => v.data().iter().for_each(|x| raw.extend_from_slice(&x.to_le_bytes())),
        DType::I16 => v
            .data()
            .iter()
            .for_each(|x| raw.extend_from_slice(&(x.round() as i16).to_le_bytes())),
        DType::U8 => v.data().iter().for_each(|x| raw.push(x.round() as u8)),
    }
    write_atomic(&raw_path(path), &raw)?;
    write_json(path, &header)
}

pub fn load_container(path: &Path) -> Result<Volume> {
    let header: ContainerHeader = read_json(path)?;
    if header.byte_order != "little" {
        return Err(Error::format(path, format!("unsupported byte_order {:?}", header.byte_order)));
    }
    let raw_file = raw_path(path);
    let raw = fs::read(&raw_file).map_err(|e| Error::io(&raw_file, e))?;
    let n: usize = header.shape.iter().product();
    if raw.len() != n * header.dtype.size() {
        return Err(Error::format(
            &raw_file,
            format!("expected {} bytes for shape {:?}, found {}", n * header.dtype.size(), header.shape, raw.len()),
        ));
    }
    let data = decode_samples(&raw, header.dtype);
    Volume::new(data, header.shape, header.spacing_mm, header.origin_mm)
}

fn decode_samples(raw: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::I16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DType::U8 => raw.iter().map(|&b| b as f32).collect(),
    }
}

/// Loads a `.nii` single-file volume or a JSON container, by extension.
pub fn load_volume(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => load_nifti(path),
        Some("json") => load_container(path),
        _ => Err(Error::format(path, "expected a .json container header or a .nii file")),
    }
}

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_INT16: i16 = 4;
const NIFTI_FLOAT32: i16 = 16;

fn rd_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn rd_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Reads a little-endian NIfTI-1 single-file (`n+1`) volume.
///
/// Only int16/float32 data and axis-aligned affines with positive scaling
/// are accepted.
pub fn load_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    if rd_i32(&bytes, 0) != NIFTI_HEADER_LEN as i32 {
        return Err(Error::format(path, "not a little-endian NIfTI-1 header (sizeof_hdr != 348)"));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(path, "magic is not \"n+1\" (only single-file NIfTI-1 is supported)"));
    }
    let ndim = rd_i16(&bytes, 40);
    if !(1..=3).contains(&ndim) && !(ndim == 4 && rd_i16(&bytes, 48) == 1) {
        return Err(Error::format(path, format!("expected a 3D volume, found {ndim} dimensions")));
    }
    let mut shape = [1usize; 3];
    for (a, s) in shape.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let d = rd_i16(&bytes, 42 + 2 * a);
        if d < 1 {
            return Err(Error::format(path, format!("invalid dim[{}] = {d}", a + 1)));
        }
        *s = d as usize;
    }
    let datatype = rd_i16(&bytes, 70);
    let dtype = match datatype {
        NIFTI_INT16 => DType::I16,
        NIFTI_FLOAT32 => DType::F32,
        other => {
            return Err(Error::format(path, format!("unsupported datatype code {other} (only int16 and float32)")))
        }
    };
    let pixdim: [f64; 3] = std::array::from_fn(|a| rd_f32(&bytes, 80 + 4 * a) as f64);
    let vox_offset = rd_f32(&bytes, 108);
    let slope = rd_f32(&bytes, 112);
    let inter = rd_f32(&bytes, 116);
    let qform_code = rd_i16(&bytes, 252);
    let sform_code = rd_i16(&bytes, 254);

    let (spacing, origin) = if sform_code > 0 {
        let srow: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| rd_f32(&bytes, 280 + 16 * r + 4 * c) as f64));
        for (r, row) in srow.iter().enumerate() {
            for (c, &x) in row.iter().take(3).enumerate() {
                if r != c && x != 0.0 {
                    return Err(Error::format(path, "sform affine is not axis-aligned"));
                }
            }
            if !(row[r] > 0.0) {
                return Err(Error::format(path, "sform affine has a non-positive scaling (flipped axes are unsupported)"));
            }
        }
        ([srow[0][0], srow[1][1], srow[2][2]], [srow[0][3], srow[1][3], srow[2][3]])
    } else if qform_code > 0 {
        let quat: [f32; 3] = std::array::from_fn(|a| rd_f32(&bytes, 256 + 4 * a));
        let qfac = rd_f32(&bytes, 76);
        if quat.iter().any(|&q| q != 0.0) || qfac < 0.0 {
            return Err(Error::format(path, "qform rotation is not the identity"));
        }
        let offset: [f64; 3] = std::array::from_fn(|a| rd_f32(&bytes, 268 + 4 * a) as f64);
        (pixdim, offset)
    } else {
        (pixdim, [0.0; 3])
    };

    let n: usize = shape.iter().product();
    let start = vox_offset.max(NIFTI_HEADER_LEN as f32) as usize;
    let end = start + n * dtype.size();
    if bytes.len() < end {
        return Err(Error::format(path, "truncated voxel data"));
    }
    let mut data = decode_samples(&bytes[start..end], dtype);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Volume::new(data, shape, spacing, origin).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a minimal single-file NIfTI-1 volume with an axis-aligned sform.
pub fn save_nifti(v: &Volume, path: &Path, dtype: DType) -> Result<()> {
    let code = match dtype {
        DType::I16 => NIFTI_INT16,
        DType::F32 => NIFTI_FLOAT32,
        DType::U8 => return Err(Error::format(path, "NIfTI export supports int16 and float32 only")),
    };
    let mut h = vec![0u8; 352];
    let put_i16 = |h: &mut Vec<u8>, off: usize, x: i16| h[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, x: f32| h[off..off + 4].copy_from_slice(&x.to_le_bytes());
    h[0..4].copy_from_slice(&(NIFTI_HEADER_LEN as i32).to_le_bytes());
    let [nx, ny, nz] = v.shape();
    put_i16(&mut h, 40, 3);
    put_i16(&mut h, 42, nx as i16);
    put_i16(&mut h, 44, ny as i16);
    put_i16(&mut h, 46, nz as i16);
    for off in [48, 50, 52, 54] {
        put_i16(&mut h, off, 1);
    }
    put_i16(&mut h, 70, code);
    put_i16(&mut h, 72, (dtype.size() * 8) as i16);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, v.spacing()[a] as f32);
    }
    put_f32(&mut h, 108, 352.0);
    put_f32(&mut h, 112, 1.0);
    put_i16(&mut h, 254, 1);
    for r in 0..3 {
        put_f32(&mut h, 280 + 16 * r + 4 * r, v.spacing()[r] as f32);
        put_f32(&mut h, 280 + 16 * r + 12, v.origin()[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    match dtype {
        DType::F32 => v.data().iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
        _ => v
            .data()
            .iter()
            .for_each(|x| h.extend_from_slice(&(x.round() as i16).to_le_bytes())),
    }
    write_atomic(path, &h)
}
