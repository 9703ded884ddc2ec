//! Volume file formats: NIfTI-1 and raw little-endian float32 with a JSON
//! sidecar.
//!
//! NIfTI files are written as single-file `n+1` images with float64 payloads,
//! so `load_volume(save_volume(v))` is bit-exact. The raw format stores
//! float32 and is exact for values representable in single precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, BinaryMask, Dims, LabelVolume, ScalarVolume, Unit};

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const UNIT_TAG: &str = "chisep unit=";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") | Some("hdr") => Ok(VolumeFormat::Nifti),
            Some("f32") | Some("json") => Ok(VolumeFormat::Raw),
            _ => Err(Error::InvalidParameter(format!(
                "unrecognized volume extension: {} (expected .nii, .hdr, .f32 or .json)",
                path.display()
            ))),
        }
    }
}

/// Header fields the pipeline reads from a NIfTI-1 file.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dims: Dims,
    pub voxel_size_mm: [f64; 3],
    pub datatype: i16,
    pub bitpix: i16,
    pub vox_offset: usize,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    /// Rows of the sform matrix (world = srow · [i j k 1]).
    pub srow: [[f64; 4]; 3],
    pub little_endian: bool,
    pub single_file: bool,
}

impl NiftiHeader {
    pub fn unit(&self) -> Unit {
        self.descrip
            .find(UNIT_TAG)
            .and_then(|p| {
                self.descrip[p + UNIT_TAG.len()..]
                    .split_whitespace()
                    .next()
                    .and_then(|u| u.parse().ok())
            })
            .unwrap_or(Unit::Dimensionless)
    }

    fn is_integer(&self) -> bool {
        !matches!(self.datatype, DT_FLOAT32 | DT_FLOAT64)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    le: bool,
}

impl Cursor<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }

    fn str(&self, at: usize, len: usize) -> String {
        let raw = &self.bytes[at..at + len];
        let end = raw.iter().position(|&c| c == 0).unwrap_or(len);
        String::from_utf8_lossy(&raw[..end]).into_owned()
    }
}

pub fn parse_nifti_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(malformed("file shorter than 348-byte header"));
    }
    let le = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        true
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        false
    } else {
        return Err(malformed("sizeof_hdr is not 348"));
    };
    let c = Cursor { bytes, le };
    let magic = &bytes[344..348];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(malformed("bad magic (expected n+1 or ni1)")),
    };

    let ndim = c.i16(40) as i64;
    if !(1..=7).contains(&ndim) {
        return Err(malformed(&format!("dim[0] = {ndim} out of range")));
    }
    if ndim != 3 {
        return Err(Error::NotThreeD {
            path: path.to_path_buf(),
            ndim,
        });
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = c.i16(42 + 2 * a);
        if v <= 0 {
            return Err(malformed(&format!("dim[{}] = {v} is not positive", a + 1)));
        }
        *d = v as usize;
    }
    let mut voxel_size_mm = [0.0f64; 3];
    for (a, v) in voxel_size_mm.iter_mut().enumerate() {
        let p = c.f32(80 + 4 * a).abs() as f64;
        *v = if p > 0.0 && p.is_finite() { p } else { 1.0 };
    }
    let datatype = c.i16(70);
    let bitpix = c.i16(72);
    let expected_bits = match datatype {
        DT_UINT8 | DT_INT8 => 8,
        DT_INT16 | DT_UINT16 => 16,
        DT_INT32 | DT_FLOAT32 => 32,
        DT_FLOAT64 => 64,
        other => return Err(malformed(&format!("unsupported datatype {other}"))),
    };
    if bitpix != expected_bits {
        return Err(malformed(&format!(
            "bitpix {bitpix} inconsistent with datatype {datatype}"
        )));
    }
    let vox_offset = c.f32(108);
    if single_file && (vox_offset < NIFTI_HEADER_SIZE as f32 || vox_offset.fract() != 0.0) {
        return Err(malformed(&format!("invalid vox_offset {vox_offset}")));
    }
    let mut srow = [[0.0f64; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (col, v) in row.iter_mut().enumerate() {
            *v = c.f32(280 + 16 * r + 4 * col) as f64;
        }
    }
    Ok(NiftiHeader {
        dims,
        voxel_size_mm,
        datatype,
        bitpix,
        vox_offset: vox_offset.max(0.0) as usize,
        scl_slope: c.f32(112) as f64,
        scl_inter: c.f32(116) as f64,
        descrip: c.str(148, 80),
        qform_code: c.i16(252),
        sform_code: c.i16(254),
        srow,
        little_endian: le,
        single_file,
    })
}

fn decode_payload(header: &NiftiHeader, payload: &[u8], path: &Path) -> Result<Vec<f64>> {
    let n = voxel_count(header.dims);
    let width = header.bitpix as usize / 8;
    if payload.len() < n * width {
        return Err(Error::DimensionMismatch {
            expected: format!("{} bytes of voxel data for dims {:?}", n * width, header.dims),
            actual: format!("{} bytes in {}", payload.len(), path.display()),
        });
    }
    let le = header.little_endian;
    let raw: Vec<f64> = payload[..n * width]
        .chunks_exact(width)
        .map(|b| match header.datatype {
            DT_UINT8 => b[0] as f64,
            DT_INT8 => b[0] as i8 as f64,
            DT_INT16 => {
                let a = [b[0], b[1]];
                (if le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }) as f64
            }
            DT_UINT16 => {
                let a = [b[0], b[1]];
                (if le { u16::from_le_bytes(a) } else { u16::from_be_bytes(a) }) as f64
            }
            DT_INT32 => {
                let a = b.try_into().unwrap();
                (if le { i32::from_le_bytes(a) } else { i32::from_be_bytes(a) }) as f64
            }
            DT_FLOAT32 => {
                let a = b.try_into().unwrap();
                (if le { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }) as f64
            }
            _ => {
                let a = b.try_into().unwrap();
                if le {
                    f64::from_le_bytes(a)
                } else {
                    f64::from_be_bytes(a)
                }
            }
        })
        .collect();
    // slope 0 means "no scaling"
    let slope = header.scl_slope;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && header.scl_inter == 0.0) {
        let inter = if header.scl_inter.is_finite() { header.scl_inter } else { 0.0 };
        Ok(raw.into_iter().map(|v| v * slope + inter).collect())
    } else {
        Ok(raw)
    }
}

fn read_nifti(path: &Path) -> Result<(NiftiHeader, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_nifti_header(&bytes, path)?;
    let data = if header.single_file {
        decode_payload(&header, &bytes[header.vox_offset.min(bytes.len())..], path)?
    } else {
        let img = path.with_extension("img");
        let payload = fs::read(&img).map_err(|e| Error::io(&img, e))?;
        decode_payload(&header, &payload[header.vox_offset.min(payload.len())..], &img)?
    };
    Ok((header, data))
}

pub fn read_nifti_header(path: &Path) -> Result<NiftiHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti_header(&bytes, path)
}

fn encode_nifti(vol: &ScalarVolume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[38] = b'r';
    let dims = vol.dims();
    let vs = vol.voxel_size_mm();
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, DT_FLOAT64);
    put_i16(&mut h, 72, 64);
    put_f32(&mut h, 76, 1.0); // qfac
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, vs[a] as f32);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // NIFTI_UNITS_MM
    let descrip = format!("{UNIT_TAG}{}", vol.unit());
    h[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());
    put_i16(&mut h, 254, 1); // sform_code = scanner
    for a in 0..3 {
        put_f32(&mut h, 280 + 16 * a + 4 * a, vs[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(vol.len() * 8);
    for v in vol.data() {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    dims: Dims,
    voxel_size_mm: [f64; 3],
    unit: Unit,
}

fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("f32"), path.with_extension("json"))
}

fn read_raw(path: &Path) -> Result<ScalarVolume> {
    let (data_path, json_path) = raw_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n = voxel_count(sidecar.dims);
    if bytes.len() != 4 * n {
        return Err(Error::DimensionMismatch {
            expected: format!("{} bytes for dims {:?}", 4 * n, sidecar.dims),
            actual: format!("{} bytes in {}", bytes.len(), data_path.display()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    ScalarVolume::new(sidecar.dims, sidecar.voxel_size_mm, data, sidecar.unit)
}

fn write_raw(vol: &ScalarVolume, path: &Path) -> Result<()> {
    let (data_path, json_path) = raw_paths(path);
    let mut bytes = Vec::with_capacity(vol.len() * 4);
    for &v in vol.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let sidecar = RawSidecar {
        dims: vol.dims(),
        voxel_size_mm: vol.voxel_size_mm(),
        unit: vol.unit(),
    };
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Loads a 3D volume. The unit comes from the file (NIfTI `descrip` tag or the
/// raw sidecar); untagged NIfTI files are dimensionless.
pub fn load_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => {
            let (header, data) = read_nifti(path)?;
            ScalarVolume::new(header.dims, header.voxel_size_mm, data, header.unit())
        }
        VolumeFormat::Raw => read_raw(path),
    }
}

/// Loads a volume and relabels it with `unit`. Use when the file carries no
/// unit tag (e.g. third-party NIfTI).
pub fn load_volume_as(path: impl AsRef<Path>, unit: Unit) -> Result<ScalarVolume> {
    Ok(load_volume(path)?.relabel(unit))
}

/// Loads a phase image in radians, multiplied by `sign` (±1).
///
/// Integer-encoded phase (and float phase outside [-π, π]) is mapped
/// affinely from its stored [min, max] onto [-π, π] after the header's
/// scl_slope/scl_inter have been applied.
pub fn load_phase(path: impl AsRef<Path>, sign: f64) -> Result<ScalarVolume> {
    let path = path.as_ref();
    let (vol, integer) = match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => {
            let (header, data) = read_nifti(path)?;
            let integer = header.is_integer();
            (
                ScalarVolume::new(header.dims, header.voxel_size_mm, data, Unit::Radians)?,
                integer,
            )
        }
        VolumeFormat::Raw => (read_raw(path)?, false),
    };
    let pi = std::f64::consts::PI;
    let (lo, hi) = vol.min_max();
    let in_range = lo >= -pi * (1.0 + 1e-6) && hi <= pi * (1.0 + 1e-6);
    let vol = if (integer && !(in_range && hi - lo > 0.0 && hi - lo <= 2.0 * pi)) || !in_range {
        if hi > lo {
            vol.map(Unit::Radians, |v| (v - lo) / (hi - lo) * 2.0 * pi - pi)
        } else {
            vol.map(Unit::Radians, |_| 0.0)
        }
    } else {
        vol.relabel(Unit::Radians)
    };
    Ok(vol.map(Unit::Radians, |v| (sign * v).clamp(-pi, pi)))
}

pub fn save_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => {
            let bytes = encode_nifti(vol);
            let target = if path.extension().and_then(|e| e.to_str()) == Some("hdr") {
                path.with_extension("nii")
            } else {
                path.to_path_buf()
            };
            fs::write(&target, bytes).map_err(|e| Error::io(&target, e))
        }
        VolumeFormat::Raw => write_raw(vol, path),
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(BinaryMask::from_volume(&load_volume(path)?))
}

pub fn save_mask(mask: &BinaryMask, voxel_size_mm: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    save_volume(&mask.to_volume(voxel_size_mm), path)
}

/// Reads a `label,name` CSV.
pub fn read_label_names(path: impl AsRef<Path>) -> Result<BTreeMap<u32, String>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let mut names = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let label: u32 = record
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Serde(format!("{}: bad label in {record:?}", path.display())))?;
        let name = record.get(1).unwrap_or("").trim().to_string();
        names.insert(label, name);
    }
    Ok(names)
}

pub fn write_label_names(names: &BTreeMap<u32, String>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    w.write_record(["label", "name"])?;
    for (label, name) in names {
        w.write_record([label.to_string(), name.clone()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_labels(volume_path: impl AsRef<Path>, names_path: impl AsRef<Path>) -> Result<LabelVolume> {
    let vol = load_volume(volume_path.as_ref())?;
    let names = read_label_names(names_path)?;
    let mut data = Vec::with_capacity(vol.len());
    for &v in vol.data() {
        if !(v >= 0.0) || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::InvalidParameter(format!(
                "{}: label value {v} is not a non-negative integer",
                volume_path.as_ref().display()
            )));
        }
        data.push(v as u32);
    }
    LabelVolume::new(vol.dims(), vol.voxel_size_mm(), data, names)
}

pub fn save_labels(
    labels: &LabelVolume,
    volume_path: impl AsRef<Path>,
    names_path: impl AsRef<Path>,
) -> Result<()> {
    let vol = ScalarVolume::new(
        labels.dims(),
        labels.voxel_size_mm(),
        labels.data().iter().map(|&l| l as f64).collect(),
        Unit::Dimensionless,
    )?;
    save_volume(&vol, volume_path)?;
    write_label_names(labels.names(), names_path)
}
