//! Phase processing: Laplacian unwrapping, SNR-weighted echo combination and
//! V-SHARP background field removal.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{laplacian_symbol, to_complex, Fft3};
use crate::volume::{
    linear_index, squared_distance_to_background, voxel_count, BinaryMask, Dims, MultiEchoGre,
    ScalarVolume, Unit,
};

/// Smallest axis length accepted by the FFT-based operators.
pub const MIN_FFT_DIM: usize = 8;

/// A field map in Hz together with the region where it is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMap {
    volume: ScalarVolume,
    mask: BinaryMask,
}

impl FieldMap {
    /// Zeroes the field outside `mask`.
    pub fn new(volume: ScalarVolume, mask: BinaryMask) -> Result<Self> {
        if volume.unit() != Unit::Hz {
            return Err(Error::InvalidParameter(format!(
                "field map must be in Hz, got {}",
                volume.unit()
            )));
        }
        let volume = volume.masked(&mask)?;
        if !volume.all_finite() {
            return Err(Error::InvalidParameter("field map has non-finite values".into()));
        }
        Ok(Self { volume, mask })
    }

    pub fn volume(&self) -> &ScalarVolume {
        &self.volume
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn into_parts(self) -> (ScalarVolume, BinaryMask) {
        (self.volume, self.mask)
    }
}

pub fn wrap_to_pi(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid maps +pi to -pi; keep the sign of the input at the boundary
    if y == -PI && x > 0.0 {
        PI
    } else {
        y
    }
}

fn check_fft_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d < MIN_FFT_DIM) {
        return Err(Error::InvalidParameter(format!(
            "degenerate dims {dims:?}: every axis needs at least {MIN_FFT_DIM} voxels"
        )));
    }
    Ok(())
}

/// Mirror-extends a grid to twice its size along every axis so the
/// extended signal is periodic and continuous.
fn mirror_extend(data: &[f64], dims: Dims) -> (Vec<f64>, Dims) {
    let ext = dims.map(|d| 2 * d);
    let mut out = Vec::with_capacity(voxel_count(ext));
    let fold = |t: usize, n: usize| if t < n { t } else { 2 * n - 1 - t };
    for k in 0..ext[2] {
        let kk = fold(k, dims[2]);
        for j in 0..ext[1] {
            let jj = fold(j, dims[1]);
            let row = linear_index(dims, 0, jj, kk);
            for i in 0..ext[0] {
                out.push(data[row + fold(i, dims[0])]);
            }
        }
    }
    (out, ext)
}

fn crop(data: &[f64], ext: Dims, dims: Dims) -> Vec<f64> {
    let mut out = Vec::with_capacity(voxel_count(dims));
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            let row = linear_index(ext, 0, j, k);
            out.extend_from_slice(&data[row..row + dims[0]]);
        }
    }
    out
}

/// Laplacian phase unwrapping.
///
/// Computes ∇⁻²(cos φ ∇² sin φ − sin φ ∇² cos φ) with both operators applied
/// in k-space using the continuous symbol −(2π)²|k|². The grid is mirrored
/// along each axis first so non-periodic phase (ramps, shim fields) is
/// handled. The result is defined up to an additive constant; its mean is 0.
pub fn laplacian_unwrap(phase: &ScalarVolume) -> Result<ScalarVolume> {
    let dims = phase.dims();
    check_fft_dims(dims)?;
    if !phase.all_finite() {
        return Err(Error::InvalidParameter("phase has non-finite values".into()));
    }
    let (ext_phase, ext) = mirror_extend(phase.data(), dims);
    let symbol = laplacian_symbol(ext, phase.voxel_size_mm());
    let mut fft = Fft3::new(ext);

    // ∇² e^{iφ} = ∇² cos φ + i ∇² sin φ, so one complex transform gives both.
    let signal: Vec<Complex64> = ext_phase
        .iter()
        .map(|&p| Complex64::from_polar(1.0, p))
        .collect();
    let mut lap = signal.clone();
    fft.forward(&mut lap);
    for (v, &s) in lap.iter_mut().zip(&symbol) {
        *v *= s;
    }
    fft.inverse(&mut lap);

    let mut rhs: Vec<Complex64> = signal
        .iter()
        .zip(&lap)
        .map(|(z, l)| Complex64::new((z.conj() * l).im, 0.0))
        .collect();
    drop(lap);
    drop(signal);

    fft.forward(&mut rhs);
    for (v, &s) in rhs.iter_mut().zip(&symbol) {
        *v = if s == 0.0 { Complex64::default() } else { *v / s };
    }
    fft.inverse(&mut rhs);
    let unwrapped: Vec<f64> = rhs.iter().map(|c| c.re).collect();
    phase.with_data(crop(&unwrapped, ext, dims), Unit::Radians)
}

/// SNR-weighted echo combination: f = Σ wᵢ φᵢ/(2π TEᵢ) / Σ wᵢ with
/// wᵢ = (Mᵢ TEᵢ)². The returned mask marks voxels with Σ wᵢ > 0.
pub fn combine_echoes(gre: &MultiEchoGre, unwrapped: &[ScalarVolume]) -> Result<FieldMap> {
    if unwrapped.len() != gre.n_echoes() {
        return Err(Error::InvalidParameter(format!(
            "echo count mismatch: {} unwrapped phases for {} echoes",
            unwrapped.len(),
            gre.n_echoes()
        )));
    }
    for u in unwrapped {
        gre.magnitude()[0].ensure_same_grid(u)?;
    }
    combine_phases(gre.te_s(), gre.magnitude(), unwrapped)
}

/// Same as [`combine_echoes`] for an arbitrary list of echoes (one echo is
/// allowed).
pub fn combine_phases(
    te_s: &[f64],
    magnitude: &[ScalarVolume],
    unwrapped: &[ScalarVolume],
) -> Result<FieldMap> {
    if te_s.is_empty() || magnitude.len() != te_s.len() || unwrapped.len() != te_s.len() {
        return Err(Error::InvalidParameter(format!(
            "echo count mismatch: {} TEs, {} magnitudes, {} phases",
            te_s.len(),
            magnitude.len(),
            unwrapped.len()
        )));
    }
    let reference = &unwrapped[0];
    for (m, u) in magnitude.iter().zip(unwrapped) {
        reference.ensure_same_grid(m)?;
        reference.ensure_same_grid(u)?;
    }
    let n = reference.len();
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    for ((&te, mag), ph) in te_s.iter().zip(magnitude).zip(unwrapped) {
        for v in 0..n {
            let w = (mag.data()[v] * te).powi(2);
            num[v] += w * ph.data()[v] / (2.0 * PI * te);
            den[v] += w;
        }
    }
    let field: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 })
        .collect();
    let mask = BinaryMask::new(reference.dims(), den.iter().map(|&w| w > 0.0).collect())?;
    FieldMap::new(reference.with_data(field, Unit::Hz)?, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsharpConfig {
    pub r_max_mm: f64,
    /// `None` means one voxel (the smallest voxel dimension).
    pub r_min_mm: Option<f64>,
    pub tsvd_threshold: f64,
}

impl Default for VsharpConfig {
    fn default() -> Self {
        Self {
            r_max_mm: 12.0,
            r_min_mm: None,
            tsvd_threshold: 0.05,
        }
    }
}

impl VsharpConfig {
    pub fn resolved_r_min(&self, voxel_size_mm: [f64; 3]) -> f64 {
        self.r_min_mm
            .unwrap_or_else(|| voxel_size_mm.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    /// Radii from r_max down to r_min in 1 mm steps (r_min always included).
    pub fn radii(&self, voxel_size_mm: [f64; 3]) -> Vec<f64> {
        let r_min = self.resolved_r_min(voxel_size_mm);
        let mut radii = Vec::new();
        let mut r = self.r_max_mm;
        while r > r_min + 1e-9 {
            radii.push(r);
            r -= 1.0;
        }
        radii.push(r_min);
        radii
    }

    /// Checks that do not depend on the grid.
    pub fn validate_params(&self) -> Result<()> {
        if let Some(r) = self.r_min_mm {
            if !(r > 0.0) || !(self.r_max_mm >= r) {
                return Err(Error::InvalidParameter(format!(
                    "need 0 < r_min <= r_max, got r_min {r} mm, r_max {} mm",
                    self.r_max_mm
                )));
            }
        }
        if !(self.r_max_mm > 0.0) {
            return Err(Error::InvalidParameter("r_max must be positive".into()));
        }
        if !(self.tsvd_threshold > 0.0 && self.tsvd_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "TSVD threshold must lie in (0, 1), got {}",
                self.tsvd_threshold
            )));
        }
        Ok(())
    }

    pub fn validate(&self, voxel_size_mm: [f64; 3]) -> Result<()> {
        let one_voxel = voxel_size_mm.iter().cloned().fold(f64::INFINITY, f64::min);
        let r_min = self.resolved_r_min(voxel_size_mm);
        if !(r_min >= one_voxel - 1e-9) {
            return Err(Error::InvalidParameter(format!(
                "r_min {r_min} mm is smaller than one voxel ({one_voxel} mm)"
            )));
        }
        if !(self.r_max_mm >= r_min) {
            return Err(Error::InvalidParameter(format!(
                "r_max {} mm is smaller than r_min {r_min} mm",
                self.r_max_mm
            )));
        }
        if !(self.tsvd_threshold > 0.0 && self.tsvd_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "TSVD threshold must lie in (0, 1), got {}",
                self.tsvd_threshold
            )));
        }
        Ok(())
    }
}

/// Normalized spherical-mean kernel of radius `r_mm`, centered at the origin
/// with wrap-around offsets, on a grid of `dims`.
pub fn spherical_kernel(dims: Dims, voxel_size_mm: [f64; 3], r_mm: f64) -> Vec<f64> {
    let mut kernel = vec![0.0; voxel_count(dims)];
    let reach = [0, 1, 2].map(|a| ((r_mm / voxel_size_mm[a]).floor() as usize).min((dims[a] - 1) / 2));
    let r2 = r_mm * r_mm * (1.0 + 1e-12);
    let mut count = 0usize;
    for dk in -(reach[2] as i64)..=reach[2] as i64 {
        for dj in -(reach[1] as i64)..=reach[1] as i64 {
            for di in -(reach[0] as i64)..=reach[0] as i64 {
                let d2 = (di as f64 * voxel_size_mm[0]).powi(2)
                    + (dj as f64 * voxel_size_mm[1]).powi(2)
                    + (dk as f64 * voxel_size_mm[2]).powi(2);
                if d2 <= r2 {
                    let i = di.rem_euclid(dims[0] as i64) as usize;
                    let j = dj.rem_euclid(dims[1] as i64) as usize;
                    let k = dk.rem_euclid(dims[2] as i64) as usize;
                    kernel[linear_index(dims, i, j, k)] = 1.0;
                    count += 1;
                }
            }
        }
    }
    let norm = 1.0 / count as f64;
    kernel.iter_mut().for_each(|v| *v *= norm);
    kernel
}

fn pad_to_even(data: &[f64], dims: Dims) -> (Vec<f64>, Dims) {
    let padded = dims.map(|d| d + d % 2);
    if padded == dims {
        return (data.to_vec(), dims);
    }
    let mut out = vec![0.0; voxel_count(padded)];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            let src = linear_index(dims, 0, j, k);
            let dst = linear_index(padded, 0, j, k);
            out[dst..dst + dims[0]].copy_from_slice(&data[src..src + dims[0]]);
        }
    }
    (out, padded)
}

/// V-SHARP background field removal.
///
/// For radii from r_max down to r_min, the high-pass field (δ − sᵣ) * f is
/// evaluated and each voxel keeps the value from the largest sphere that fits
/// in `mask`. The result is deconvolved by (δ − s_{r_max}) with truncation
/// below `tsvd_threshold` and restricted to the mask eroded by r_min, which is
/// also returned.
pub fn vsharp(field: &FieldMap, mask: &BinaryMask, cfg: &VsharpConfig) -> Result<(FieldMap, BinaryMask)> {
    let vol = field.volume();
    let dims = vol.dims();
    let vs = vol.voxel_size_mm();
    vol.ensure_same_dims(mask.dims())?;
    check_fft_dims(dims)?;
    cfg.validate(vs)?;

    let radii = cfg.radii(vs);
    let r_min = *radii.last().unwrap();
    let dist2 = squared_distance_to_background(mask, vs);
    let fits = |v: usize, r: f64| dist2[v] > r * r * (1.0 + 1e-12);

    let eroded = BinaryMask::new(dims, (0..dist2.len()).map(|v| fits(v, r_min)).collect())?;
    if eroded.count() == 0 {
        return Err(Error::EmptyMask(format!(
            "mask eroded by r_min = {r_min} mm is empty"
        )));
    }

    let masked_field = vol.masked(mask)?;
    let (padded_field, pdims) = pad_to_even(masked_field.data(), dims);
    let mut fft = Fft3::new(pdims);
    let mut field_k = to_complex(&padded_field);
    fft.forward(&mut field_k);

    let mut combined = vec![0.0; voxel_count(dims)];
    let mut assigned = vec![false; voxel_count(dims)];
    let mut largest_highpass: Vec<f64> = Vec::new();
    for (n, &r) in radii.iter().enumerate() {
        let mut kernel_k = to_complex(&spherical_kernel(pdims, vs, r));
        fft.forward(&mut kernel_k);
        let highpass: Vec<f64> = kernel_k.iter().map(|s| 1.0 - s.re).collect();
        let mut filtered: Vec<Complex64> = field_k
            .iter()
            .zip(&highpass)
            .map(|(f, &h)| f * h)
            .collect();
        fft.inverse(&mut filtered);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let v = linear_index(dims, i, j, k);
                    if !assigned[v] && fits(v, r) {
                        combined[v] = filtered[linear_index(pdims, i, j, k)].re;
                        assigned[v] = true;
                    }
                }
            }
        }
        if n == 0 {
            largest_highpass = highpass;
        }
    }

    let (padded_combined, _) = pad_to_even(&combined, dims);
    let mut buf = to_complex(&padded_combined);
    fft.forward(&mut buf);
    for (v, &h) in buf.iter_mut().zip(&largest_highpass) {
        *v = if h.abs() > cfg.tsvd_threshold {
            *v / h
        } else {
            Complex64::default()
        };
    }
    fft.inverse(&mut buf);
    let mut tissue = vec![0.0; voxel_count(dims)];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let v = linear_index(dims, i, j, k);
                if eroded.data()[v] {
                    tissue[v] = buf[linear_index(pdims, i, j, k)].re;
                }
            }
        }
    }
    let out = FieldMap::new(vol.with_data(tissue, Unit::Hz)?, eroded.clone())?;
    Ok((out, eroded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::MultiEchoGre;

    fn interior_max_dev(a: &ScalarVolume, b: &ScalarVolume, margin: usize) -> f64 {
        let d = a.dims();
        let mut diffs = Vec::new();
        for k in margin..d[2] - margin {
            for j in margin..d[1] - margin {
                for i in margin..d[0] - margin {
                    diffs.push(a.get(i, j, k) - b.get(i, j, k));
                }
            }
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        diffs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn wrap_range() {
        assert!((wrap_to_pi(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_to_pi(-3.0 * PI / 2.0) - PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_to_pi(PI), PI);
        assert!((wrap_to_pi(0.4 * 20.0) - (8.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn unwrap_constant_phase() {
        let p = ScalarVolume::filled([8, 8, 8], [1.0; 3], 1.3, Unit::Radians);
        let u = laplacian_unwrap(&p).unwrap();
        let (lo, hi) = u.min_max();
        assert!(hi - lo < 1e-10);
    }

    #[test]
    fn unwrap_wrapped_ramp() {
        let truth = ScalarVolume::from_fn([32, 16, 16], [1.0; 3], Unit::Radians, |i, _, _| 0.4 * i as f64);
        let wrapped = truth.map(Unit::Radians, wrap_to_pi);
        let u = laplacian_unwrap(&wrapped).unwrap();
        assert!(interior_max_dev(&u, &truth, 3) < 0.05);
    }

    #[test]
    fn unwrap_smooth_bump_self_consistent() {
        let truth = ScalarVolume::from_fn([24, 24, 24], [1.0; 3], Unit::Radians, |i, j, k| {
            let r2 = [i, j, k].iter().map(|&c| (c as f64 - 12.0).powi(2)).sum::<f64>();
            2.0 * (-r2 / 32.0).exp()
        });
        let u = laplacian_unwrap(&truth).unwrap();
        assert!(interior_max_dev(&u, &truth, 3) < 1e-3);
    }

    #[test]
    fn unwrap_rejects_small_dims() {
        let p = ScalarVolume::zeros([8, 8, 4], [1.0; 3], Unit::Radians);
        assert!(laplacian_unwrap(&p).is_err());
    }

    fn vol(dims: Dims, v: f64, unit: Unit) -> ScalarVolume {
        ScalarVolume::filled(dims, [1.0; 3], v, unit)
    }

    #[test]
    fn combine_single_echo_identity() {
        let te = 0.012;
        let ph = vol([2, 2, 2], 2.0 * PI * 10.0 * te, Unit::Radians);
        let m = vol([2, 2, 2], 3.0, Unit::Dimensionless);
        let f = combine_phases(&[te], &[m], &[ph]).unwrap();
        for &v in f.volume().data() {
            assert!((v - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_consistent_echoes_weight_independent() {
        let tes = [0.00525, 0.01108, 0.01691];
        let mags: Vec<_> = [5.0, 0.3, 2.0]
            .iter()
            .map(|&m| vol([2, 2, 2], m, Unit::Dimensionless))
            .collect();
        let phs: Vec<_> = tes
            .iter()
            .map(|&t| vol([2, 2, 2], 2.0 * PI * 7.0 * t, Unit::Radians))
            .collect();
        let f = combine_phases(&tes, &mags, &phs).unwrap();
        assert!(f.volume().data().iter().all(|v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn combine_two_echo_hand_evaluation() {
        // w = TE² for equal unit magnitudes
        // (5.25² · 10 + 11.08² · 12) / (5.25² + 11.08²)
        //   = (275.625 + 1473.1968) / (27.5625 + 122.7664) = 11.633304...
        let tes = [0.00525, 0.01108];
        let expected: f64 = (27.5625 * 10.0 + 122.7664 * 12.0) / (27.5625 + 122.7664);
        assert!((expected - 11.633_304).abs() < 1e-6);
        let mags: Vec<_> = (0..2).map(|_| vol([1, 1, 1], 1.0, Unit::Dimensionless)).collect();
        let phs = vec![
            vol([1, 1, 1], 2.0 * PI * 10.0 * tes[0], Unit::Radians),
            vol([1, 1, 1], 2.0 * PI * 12.0 * tes[1], Unit::Radians),
        ];
        let f = combine_phases(&tes, &mags, &phs).unwrap();
        assert!((f.volume().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn combine_zero_weight_gives_zero_and_masks_out() {
        let tes = [0.005, 0.01];
        let mags: Vec<_> = (0..2).map(|_| vol([1, 1, 1], 0.0, Unit::Dimensionless)).collect();
        let phs: Vec<_> = (0..2).map(|_| vol([1, 1, 1], 1.0, Unit::Radians)).collect();
        let f = combine_phases(&tes, &mags, &phs).unwrap();
        assert_eq!(f.volume().data()[0], 0.0);
        assert_eq!(f.mask().count(), 0);
    }

    #[test]
    fn combine_echo_count_mismatch() {
        let v = |x| vol([2, 2, 2], x, Unit::Dimensionless);
        let gre = MultiEchoGre::new(
            vec![0.005, 0.01],
            0.03,
            3.0,
            [0.0, 0.0, 1.0],
            vec![v(1.0), v(1.0)],
            vec![v(0.0), v(0.0)],
        )
        .unwrap();
        assert!(combine_echoes(&gre, &[v(0.0).relabel(Unit::Radians)]).is_err());
    }

    #[test]
    fn combine_invariant_to_magnitude_scale() {
        let tes = [0.005, 0.01, 0.02];
        let phs: Vec<_> = [0.3, 0.9, 1.4].iter().map(|&p| vol([1, 1, 1], p, Unit::Radians)).collect();
        let mags: Vec<_> = [3.0, 2.0, 1.0].iter().map(|&m| vol([1, 1, 1], m, Unit::Dimensionless)).collect();
        let scaled: Vec<_> = mags.iter().map(|m| m.map(Unit::Dimensionless, |x| 17.5 * x)).collect();
        let a = combine_phases(&tes, &mags, &phs).unwrap().volume().data()[0];
        let b = combine_phases(&tes, &scaled, &phs).unwrap().volume().data()[0];
        assert!((a - b).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn radii_schedule() {
        let cfg = VsharpConfig::default();
        let r = cfg.radii([1.0; 3]);
        assert_eq!(r.first(), Some(&12.0));
        assert_eq!(r.last(), Some(&1.0));
        assert_eq!(r.len(), 12);
        let cfg = VsharpConfig {
            r_max_mm: 4.5,
            r_min_mm: Some(2.0),
            tsvd_threshold: 0.05,
        };
        assert_eq!(cfg.radii([1.0; 3]), vec![4.5, 3.5, 2.5, 2.0]);
    }

    #[test]
    fn spherical_kernel_normalized() {
        let k = spherical_kernel([16, 16, 16], [1.0; 3], 1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.iter().filter(|&&v| v > 0.0).count(), 7);
    }

    #[test]
    fn vsharp_config_validation() {
        let f = FieldMap::new(vol([16, 16, 16], 0.0, Unit::Hz), BinaryMask::full([16, 16, 16])).unwrap();
        let m = BinaryMask::full([16, 16, 16]);
        let bad = VsharpConfig {
            tsvd_threshold: 1.5,
            ..Default::default()
        };
        assert!(vsharp(&f, &m, &bad).is_err());
        let bad = VsharpConfig {
            r_max_mm: 0.5,
            r_min_mm: None,
            tsvd_threshold: 0.05,
        };
        assert!(vsharp(&f, &m, &bad).is_err());
    }

    #[test]
    fn vsharp_tiny_mask_is_empty_error() {
        let dims = [16, 16, 16];
        let m = BinaryMask::from_fn(dims, |i, j, k| i == 8 && j == 8 && k == 8);
        let f = FieldMap::new(vol(dims, 1.0, Unit::Hz), m.clone()).unwrap();
        assert!(matches!(
            vsharp(&f, &m, &VsharpConfig::default()),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn vsharp_constant_field_removed() {
        let dims = [32, 32, 32];
        let m = BinaryMask::from_fn(dims, |i, j, k| {
            [i, j, k].iter().map(|&c| (c as f64 - 15.5).powi(2)).sum::<f64>() < 12.0f64.powi(2)
        });
        let c = 42.0;
        let f = FieldMap::new(vol(dims, c, Unit::Hz), m.clone()).unwrap();
        let cfg = VsharpConfig {
            r_max_mm: 5.0,
            ..Default::default()
        };
        let (t, eroded) = vsharp(&f, &m, &cfg).unwrap();
        assert!(eroded.count() > 0);
        let worst = t.volume().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-6 * c, "residual {worst}");
    }

    #[test]
    fn vsharp_is_linear() {
        let dims = [24, 24, 24];
        let m = BinaryMask::from_fn(dims, |i, j, k| {
            [i, j, k].iter().map(|&c| (c as f64 - 11.5).powi(2)).sum::<f64>() < 10.0f64.powi(2)
        });
        let f = ScalarVolume::from_fn(dims, [1.0; 3], Unit::Hz, |i, j, k| {
            (i as f64 * 0.3).sin() + (j as f64 * 0.2 + k as f64 * 0.1).cos()
        });
        let cfg = VsharpConfig {
            r_max_mm: 4.0,
            ..Default::default()
        };
        let a = 3.7;
        let (t1, _) = vsharp(&FieldMap::new(f.clone(), m.clone()).unwrap(), &m, &cfg).unwrap();
        let (t2, _) = vsharp(
            &FieldMap::new(f.map(Unit::Hz, |x| a * x), m.clone()).unwrap(),
            &m,
            &cfg,
        )
        .unwrap();
        for (x, y) in t1.volume().data().iter().zip(t2.volume().data()) {
            assert!((a * x - y).abs() < 1e-9);
        }
    }
}
