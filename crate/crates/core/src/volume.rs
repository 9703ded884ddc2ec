//! Volumetric data types shared by every stage.
//!
//! All grids are stored x-fastest: `index = i + nx * (j + ny * k)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[inline(always)]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Inverse of [`linear_index`].
#[inline]
pub fn unravel(dims: Dims, idx: usize) -> [usize; 3] {
    let i = idx % dims[0];
    let j = (idx / dims[0]) % dims[1];
    let k = idx / (dims[0] * dims[1]);
    [i, j, k]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Hz,
    Ppb,
    PerSecond,
    Radians,
    Dimensionless,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Hz => "hz",
            Unit::Ppb => "ppb",
            Unit::PerSecond => "per_second",
            Unit::Radians => "radians",
            Unit::Dimensionless => "dimensionless",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hz" => Ok(Unit::Hz),
            "ppb" => Ok(Unit::Ppb),
            "per_second" | "1/s" | "s-1" => Ok(Unit::PerSecond),
            "radians" | "rad" => Ok(Unit::Radians),
            "dimensionless" | "" => Ok(Unit::Dimensionless),
            other => Err(Error::InvalidParameter(format!("unknown unit `{other}`"))),
        }
    }
}

fn check_geometry(dims: Dims, voxel_size_mm: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidParameter(format!(
            "dims must be positive, got {dims:?}"
        )));
    }
    if voxel_size_mm.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "voxel size must be positive, got {voxel_size_mm:?}"
        )));
    }
    Ok(())
}

/// A real-valued 3D grid with voxel spacing and a unit tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    voxel_size_mm: [f64; 3],
    data: Vec<f64>,
    unit: Unit,
}

impl ScalarVolume {
    pub fn new(dims: Dims, voxel_size_mm: [f64; 3], data: Vec<f64>, unit: Unit) -> Result<Self> {
        check_geometry(dims, voxel_size_mm)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::dims(voxel_count(dims), data.len()));
        }
        Ok(Self {
            dims,
            voxel_size_mm,
            data,
            unit,
        })
    }

    pub fn zeros(dims: Dims, voxel_size_mm: [f64; 3], unit: Unit) -> Self {
        Self::filled(dims, voxel_size_mm, 0.0, unit)
    }

    pub fn filled(dims: Dims, voxel_size_mm: [f64; 3], value: f64, unit: Unit) -> Self {
        Self::new(dims, voxel_size_mm, vec![value; voxel_count(dims)], unit)
            .expect("invalid volume geometry")
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: Dims,
        voxel_size_mm: [f64; 3],
        unit: Unit,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, voxel_size_mm, data, unit).expect("invalid volume geometry")
    }

    /// A volume on the same grid as `self` with new data and unit.
    pub fn with_data(&self, data: Vec<f64>, unit: Unit) -> Result<Self> {
        Self::new(self.dims, self.voxel_size_mm, data, unit)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn map(&self, unit: Unit, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            voxel_size_mm: self.voxel_size_mm,
            data: self.data.iter().map(|&v| f(v)).collect(),
            unit,
        }
    }

    pub fn relabel(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zeroes every voxel outside `mask`.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Self> {
        self.ensure_same_dims(mask.dims())?;
        let data = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        self.with_data(data, self.unit)
    }

    pub fn ensure_same_dims(&self, other: Dims) -> Result<()> {
        if self.dims != other {
            return Err(Error::dims(self.dims, other));
        }
        Ok(())
    }

    pub fn ensure_same_grid(&self, other: &ScalarVolume) -> Result<()> {
        self.ensure_same_dims(other.dims)?;
        if self.voxel_size_mm != other.voxel_size_mm {
            return Err(Error::dims(self.voxel_size_mm, other.voxel_size_mm));
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::dims(voxel_count(dims), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: Dims) -> Self {
        Self::new(dims, vec![true; voxel_count(dims)]).expect("invalid mask dims")
    }

    pub fn empty(dims: Dims) -> Self {
        Self::new(dims, vec![false; voxel_count(dims)]).expect("invalid mask dims")
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    /// Nonzero voxels of `vol` become true.
    pub fn from_volume(vol: &ScalarVolume) -> Self {
        Self {
            dims: vol.dims(),
            data: vol.data().iter().map(|&v| v != 0.0).collect(),
        }
    }

    pub fn to_volume(&self, voxel_size_mm: [f64; 3]) -> ScalarVolume {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        ScalarVolume::new(self.dims, voxel_size_mm, data, Unit::Dimensionless)
            .expect("invalid mask geometry")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[linear_index(self.dims, i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims != other.dims {
            return Err(Error::dims(self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Ok(BinaryMask {
            dims: self.dims,
            data,
        })
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }
}

/// Integer ROI labels (0 = background) with a name table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    voxel_size_mm: [f64; 3],
    data: Vec<u32>,
    names: BTreeMap<u32, String>,
}

impl LabelVolume {
    pub fn new(
        dims: Dims,
        voxel_size_mm: [f64; 3],
        data: Vec<u32>,
        names: BTreeMap<u32, String>,
    ) -> Result<Self> {
        check_geometry(dims, voxel_size_mm)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::dims(voxel_count(dims), data.len()));
        }
        if let Some(missing) = data.iter().find(|&&l| l != 0 && !names.contains_key(&l)) {
            return Err(Error::InvalidParameter(format!(
                "label {missing} has no entry in the name table"
            )));
        }
        Ok(Self {
            dims,
            voxel_size_mm,
            data,
            names,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn names(&self) -> &BTreeMap<u32, String> {
        &self.names
    }

    pub fn name(&self, label: u32) -> Option<&str> {
        self.names.get(&label).map(String::as_str)
    }

    pub fn voxel_count_of(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Multi-echo gradient-echo acquisition: per-echo magnitude and phase.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEchoGre {
    te_s: Vec<f64>,
    tr_s: f64,
    b0_tesla: f64,
    b0_dir: [f64; 3],
    magnitude: Vec<ScalarVolume>,
    phase: Vec<ScalarVolume>,
}

impl MultiEchoGre {
    pub fn new(
        te_s: Vec<f64>,
        tr_s: f64,
        b0_tesla: f64,
        b0_dir: [f64; 3],
        magnitude: Vec<ScalarVolume>,
        phase: Vec<ScalarVolume>,
    ) -> Result<Self> {
        if te_s.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 echoes, got {}",
                te_s.len()
            )));
        }
        if magnitude.len() != te_s.len() || phase.len() != te_s.len() {
            return Err(Error::InvalidParameter(format!(
                "echo count mismatch: {} TEs, {} magnitudes, {} phases",
                te_s.len(),
                magnitude.len(),
                phase.len()
            )));
        }
        if te_s[0] <= 0.0 || te_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "echo times must be positive and strictly increasing: {te_s:?}"
            )));
        }
        if !(tr_s > *te_s.last().unwrap()) {
            return Err(Error::InvalidParameter(format!(
                "TR {tr_s} s must exceed the last TE"
            )));
        }
        if !(b0_tesla > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "field strength must be positive, got {b0_tesla}"
            )));
        }
        let norm = b0_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidParameter("B0 direction is zero".into()));
        }
        let b0_dir = b0_dir.map(|v| v / norm);
        let reference = &magnitude[0];
        for vol in magnitude.iter().chain(&phase) {
            reference.ensure_same_grid(vol)?;
        }
        for (e, ph) in phase.iter().enumerate() {
            let tol = 1e-6;
            if let Some(bad) = ph
                .data()
                .iter()
                .find(|v| !(v.abs() <= std::f64::consts::PI + tol))
            {
                return Err(Error::InvalidParameter(format!(
                    "echo {e} phase value {bad} outside [-pi, pi]"
                )));
            }
        }
        Ok(Self {
            te_s,
            tr_s,
            b0_tesla,
            b0_dir,
            magnitude,
            phase,
        })
    }

    pub fn n_echoes(&self) -> usize {
        self.te_s.len()
    }

    pub fn te_s(&self) -> &[f64] {
        &self.te_s
    }

    pub fn tr_s(&self) -> f64 {
        self.tr_s
    }

    pub fn b0_tesla(&self) -> f64 {
        self.b0_tesla
    }

    pub fn b0_dir(&self) -> [f64; 3] {
        self.b0_dir
    }

    pub fn magnitude(&self) -> &[ScalarVolume] {
        &self.magnitude
    }

    pub fn phase(&self) -> &[ScalarVolume] {
        &self.phase
    }

    pub fn dims(&self) -> Dims {
        self.magnitude[0].dims()
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.magnitude[0].voxel_size_mm()
    }
}

/// Squared Euclidean distance (mm²) from each true voxel to the nearest
/// false voxel, where everything outside the grid counts as false.
/// False voxels get 0.
pub fn squared_distance_to_background(mask: &BinaryMask, voxel_size_mm: [f64; 3]) -> Vec<f64> {
    // Pad by one false voxel on every side so the grid border erodes.
    let dims = mask.dims();
    let pdims = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
    let mut dist = vec![0.0f64; voxel_count(pdims)];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if mask.get(i, j, k) {
                    dist[linear_index(pdims, i + 1, j + 1, k + 1)] = f64::INFINITY;
                }
            }
        }
    }

    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = pdims[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let spacing2 = voxel_size_mm[axis] * voxel_size_mm[axis];
        for v in 0..pdims[b] {
            for u in 0..pdims[a] {
                let at = |t: usize| {
                    let mut c = [0usize; 3];
                    c[axis] = t;
                    c[a] = u;
                    c[b] = v;
                    linear_index(pdims, c[0], c[1], c[2])
                };
                line.clear();
                line.extend((0..n).map(|t| dist[at(t)]));
                lower_envelope(&line, spacing2, &mut out);
                for (t, &d) in out.iter().enumerate() {
                    dist[at(t)] = d;
                }
            }
        }
    }

    let mut result = Vec::with_capacity(voxel_count(dims));
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                result.push(dist[linear_index(pdims, i + 1, j + 1, k + 1)]);
            }
        }
    }
    result
}

/// One pass of the Felzenszwalb-Huttenlocher squared distance transform.
fn lower_envelope(f: &[f64], spacing2: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => return,
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let qf = q as f64;
            let pf = p as f64;
            let s = ((f[q] + spacing2 * qf * qf) - (f[p] + spacing2 * pf * pf))
                / (2.0 * spacing2 * (qf - pf));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *slot = spacing2 * d * d + f[v[k]];
    }
}

/// Erodes `mask` by a ball of `radius_mm`: a voxel survives iff every voxel
/// within that Euclidean distance (anisotropy-aware) is true. Voxels beyond
/// the grid edge count as false.
pub fn erode_mask(mask: &BinaryMask, voxel_size_mm: [f64; 3], radius_mm: f64) -> Result<BinaryMask> {
    if !(radius_mm >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "erosion radius must be non-negative, got {radius_mm}"
        )));
    }
    if radius_mm == 0.0 {
        return Ok(mask.clone());
    }
    let dist2 = squared_distance_to_background(mask, voxel_size_mm);
    let limit = radius_mm * radius_mm * (1.0 + 1e-12);
    let data = dist2.iter().map(|&d| d > limit).collect();
    BinaryMask::new(mask.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_erode(mask: &BinaryMask, vs: [f64; 3], r: f64) -> BinaryMask {
        let dims = mask.dims();
        let reach = [0, 1, 2].map(|a| (r / vs[a]).floor() as i64);
        BinaryMask::from_fn(dims, |i, j, k| {
            if !mask.get(i, j, k) {
                return false;
            }
            for dk in -reach[2]..=reach[2] {
                for dj in -reach[1]..=reach[1] {
                    for di in -reach[0]..=reach[0] {
                        let d2 = (di as f64 * vs[0]).powi(2)
                            + (dj as f64 * vs[1]).powi(2)
                            + (dk as f64 * vs[2]).powi(2);
                        if d2 > r * r * (1.0 + 1e-12) {
                            continue;
                        }
                        let (x, y, z) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if x < 0
                            || y < 0
                            || z < 0
                            || x >= dims[0] as i64
                            || y >= dims[1] as i64
                            || z >= dims[2] as i64
                        {
                            return false;
                        }
                        if !mask.get(x as usize, y as usize, z as usize) {
                            return false;
                        }
                    }
                }
            }
            true
        })
    }

    #[test]
    fn erode_radius_zero_is_identity() {
        let m = BinaryMask::from_fn([5, 6, 7], |i, j, k| (i + j + k) % 3 != 0);
        assert_eq!(erode_mask(&m, [1.0; 3], 0.0).unwrap(), m);
    }

    #[test]
    fn erode_solid_cube_one_mm() {
        let m = BinaryMask::full([9, 9, 9]);
        let e = erode_mask(&m, [1.0; 3], 1.0).unwrap();
        assert_eq!(e, brute_force_erode(&m, [1.0; 3], 1.0));
        assert_eq!(e.count(), 7 * 7 * 7);
        assert!(e.get(1, 1, 1) && e.get(7, 7, 7) && !e.get(0, 4, 4));
    }

    #[test]
    fn erode_empty_mask_stays_empty() {
        let m = BinaryMask::empty([6, 6, 6]);
        assert_eq!(erode_mask(&m, [1.0; 3], 2.0).unwrap().count(), 0);
    }

    #[test]
    fn erode_matches_brute_force_anisotropic() {
        let dims = [14, 12, 10];
        let m = BinaryMask::from_fn(dims, |i, j, k| {
            let (x, y, z) = (i as f64 - 7.0, j as f64 - 6.0, k as f64 - 5.0);
            x * x / 30.0 + y * y / 20.0 + z * z / 16.0 < 1.0 || (i == 2 && j > 3)
        });
        for &r in &[0.5, 1.0, 1.5, 2.0, 2.3, 3.0] {
            let vs = [0.8, 1.0, 1.5];
            assert_eq!(erode_mask(&m, vs, r).unwrap(), brute_force_erode(&m, vs, r), "r={r}");
        }
    }

    #[test]
    fn negative_radius_rejected() {
        assert!(erode_mask(&BinaryMask::full([3, 3, 3]), [1.0; 3], -1.0).is_err());
    }

    #[test]
    fn volume_rejects_wrong_length() {
        assert!(ScalarVolume::new([2, 2, 2], [1.0; 3], vec![0.0; 7], Unit::Hz).is_err());
        assert!(ScalarVolume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8], Unit::Hz).is_err());
    }

    #[test]
    fn labels_need_names() {
        let mut names = BTreeMap::new();
        names.insert(1, "Caudate".to_string());
        assert!(LabelVolume::new([2, 1, 1], [1.0; 3], vec![0, 1], names.clone()).is_ok());
        assert!(LabelVolume::new([2, 1, 1], [1.0; 3], vec![2, 1], names).is_err());
    }

    #[test]
    fn gre_validation() {
        let v = |val| ScalarVolume::filled([2, 2, 2], [1.0; 3], val, Unit::Dimensionless);
        let ok = MultiEchoGre::new(
            vec![0.005, 0.01],
            0.033,
            3.0,
            [0.0, 0.0, 2.0],
            vec![v(1.0), v(1.0)],
            vec![v(0.0), v(0.0)],
        )
        .unwrap();
        assert_eq!(ok.b0_dir(), [0.0, 0.0, 1.0]);
        let bad_te = MultiEchoGre::new(
            vec![0.01, 0.005],
            0.033,
            3.0,
            [0.0, 0.0, 1.0],
            vec![v(1.0), v(1.0)],
            vec![v(0.0), v(0.0)],
        );
        assert!(bad_te.is_err());
        let bad_phase = MultiEchoGre::new(
            vec![0.005, 0.01],
            0.033,
            3.0,
            [0.0, 0.0, 1.0],
            vec![v(1.0), v(1.0)],
            vec![v(0.0), v(4.0)],
        );
        assert!(bad_phase.is_err());
        let bad_tr = MultiEchoGre::new(
            vec![0.005, 0.04],
            0.033,
            3.0,
            [0.0, 0.0, 1.0],
            vec![v(1.0), v(1.0)],
            vec![v(0.0), v(0.0)],
        );
        assert!(bad_tr.is_err());
    }

    #[test]
    fn unravel_inverts_linear_index() {
        let dims = [3, 4, 5];
        for idx in 0..voxel_count(dims) {
            let [i, j, k] = unravel(dims, idx);
            assert_eq!(linear_index(dims, i, j, k), idx);
        }
    }
}
