//! Dipole kernel and the two forward models that link susceptibility to the
//! measured field shift and to R2′.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{kspace_axes, Fft3};
use crate::volume::{voxel_count, Dims, ScalarVolume, Unit};

/// Proton gyromagnetic ratio over 2π, Hz/T.
pub const GAMMA_BAR_HZ_PER_T: f64 = 42.577e6;

/// Larmor frequency in Hz at `b0_tesla`.
pub fn larmor_hz(b0_tesla: f64) -> f64 {
    GAMMA_BAR_HZ_PER_T * b0_tesla
}

/// Hz of field shift per ppb of susceptibility, before the kernel.
pub fn hz_per_ppb(b0_tesla: f64) -> f64 {
    larmor_hz(b0_tesla) * 1e-9
}

/// k-space dipole response D(k) = 1/3 − (k·b̂)²/|k|², with D(0) = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DipoleKernel {
    dims: Dims,
    voxel_size_mm: [f64; 3],
    b0_dir: [f64; 3],
    spectrum: Vec<f64>,
}

pub fn make_dipole_kernel(dims: Dims, voxel_size_mm: [f64; 3], b0_dir: [f64; 3]) -> Result<DipoleKernel> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidParameter(format!(
            "dipole kernel needs at least 2 voxels per axis, got {dims:?}"
        )));
    }
    if voxel_size_mm.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "voxel size must be positive, got {voxel_size_mm:?}"
        )));
    }
    let norm = b0_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidParameter("B0 direction must be non-zero".into()));
    }
    let b = b0_dir.map(|v| v / norm);
    let [kx, ky, kz] = kspace_axes(dims, voxel_size_mm);
    let mut spectrum = Vec::with_capacity(voxel_count(dims));
    for z in &kz {
        for y in &ky {
            for x in &kx {
                let k2 = x * x + y * y + z * z;
                if k2 == 0.0 {
                    spectrum.push(0.0);
                } else {
                    let kb = x * b[0] + y * b[1] + z * b[2];
                    spectrum.push(1.0 / 3.0 - kb * kb / k2);
                }
            }
        }
    }
    Ok(DipoleKernel {
        dims,
        voxel_size_mm,
        b0_dir: b,
        spectrum,
    })
}

impl DipoleKernel {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn b0_dir(&self) -> [f64; 3] {
        self.b0_dir
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// Evaluates D at an arbitrary k-vector (cycles/mm).
    pub fn response(&self, k: [f64; 3]) -> f64 {
        let k2 = k.iter().map(|v| v * v).sum::<f64>();
        if k2 == 0.0 {
            return 0.0;
        }
        let kb = k.iter().zip(&self.b0_dir).map(|(a, b)| a * b).sum::<f64>();
        1.0 / 3.0 - kb * kb / k2
    }
}

/// The susceptibility (ppb) → field (Hz) operator with cached FFT plans.
///
/// D is real and even, so the operator is symmetric and serves as its own
/// adjoint.
pub struct FieldOperator<'k> {
    kernel: &'k DipoleKernel,
    scale: f64,
    fft: Fft3,
}

impl<'k> FieldOperator<'k> {
    pub fn new(kernel: &'k DipoleKernel, b0_tesla: f64) -> Result<Self> {
        if !(b0_tesla > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "field strength must be positive, got {b0_tesla}"
            )));
        }
        Ok(Self {
            kernel,
            scale: hz_per_ppb(b0_tesla),
            fft: Fft3::new(kernel.dims()),
        })
    }

    pub fn apply(&mut self, chi_ppb: &[f64]) -> Vec<f64> {
        let mut out = self.fft.convolve_real(chi_ppb, self.kernel.spectrum());
        out.iter_mut().for_each(|v| *v *= self.scale);
        out
    }

    pub fn adjoint(&mut self, field_hz: &[f64]) -> Vec<f64> {
        self.apply(field_hz)
    }

    pub fn hz_per_ppb(&self) -> f64 {
        self.scale
    }

    /// Thresholded inverse: divides by D where |D| > `threshold`, zero
    /// elsewhere. Returns ppb.
    pub fn truncated_inverse(&mut self, field_hz: &[f64], threshold: f64) -> Vec<f64> {
        let inv: Vec<f64> = self
            .kernel
            .spectrum()
            .iter()
            .map(|&d| if d.abs() > threshold { 1.0 / d } else { 0.0 })
            .collect();
        let mut out = self.fft.convolve_real(field_hz, &inv);
        out.iter_mut().for_each(|v| *v /= self.scale);
        out
    }
}

/// Δf = f₀·10⁻⁹·IFFT(D·FFT(χ)), χ in ppb, Δf in Hz.
pub fn forward_field(chi_total: &ScalarVolume, kernel: &DipoleKernel, b0_tesla: f64) -> Result<ScalarVolume> {
    chi_total.ensure_same_dims(kernel.dims())?;
    if !chi_total.all_finite() {
        return Err(Error::InvalidParameter("susceptibility has non-finite values".into()));
    }
    let mut op = FieldOperator::new(kernel, b0_tesla)?;
    chi_total.with_data(op.apply(chi_total.data()), Unit::Hz)
}

/// Relaxometric constants, Hz/ppm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxometricConstants {
    pub dr_para: f64,
    pub dr_dia: f64,
}

impl Default for RelaxometricConstants {
    fn default() -> Self {
        Self {
            dr_para: 100.0,
            dr_dia: 100.0,
        }
    }
}

impl RelaxometricConstants {
    /// s⁻¹ per ppb for the paramagnetic and diamagnetic pools.
    pub fn per_ppb(&self) -> (f64, f64) {
        (self.dr_para * 1e-3, self.dr_dia * 1e-3)
    }
}

/// R2′ = D_r,para·|χ_para| + D_r,dia·|χ_dia| with χ in ppb converted to ppm.
pub fn forward_r2prime(
    chi_para: &ScalarVolume,
    chi_dia: &ScalarVolume,
    constants: RelaxometricConstants,
) -> Result<ScalarVolume> {
    chi_para.ensure_same_dims(chi_dia.dims())?;
    if let Some(index) = chi_para.data().iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::SignConstraint {
            index,
            detail: format!("chi_para = {} < 0", chi_para.data()[index]),
        });
    }
    if let Some(index) = chi_dia.data().iter().position(|&v| !(v <= 0.0)) {
        return Err(Error::SignConstraint {
            index,
            detail: format!("chi_dia = {} > 0", chi_dia.data()[index]),
        });
    }
    let (ap, ad) = constants.per_ppb();
    let data = chi_para
        .data()
        .iter()
        .zip(chi_dia.data())
        .map(|(&p, &d)| ap * p + ad * (-d))
        .collect();
    chi_para.with_data(data, Unit::PerSecond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn analytic_limits() {
        let k = make_dipole_kernel([8, 8, 8], [1.0; 3], [0.0, 0.0, 1.0]).unwrap();
        assert!((k.response([0.0, 0.0, 0.3]) + 2.0 / 3.0).abs() < 1e-15);
        assert!((k.response([0.2, -0.1, 0.0]) - 1.0 / 3.0).abs() < 1e-15);
        let c = (1.0f64 / 3.0).sqrt();
        let s = (2.0f64 / 3.0).sqrt();
        assert!(k.response([s, 0.0, c]).abs() < 1e-12);
        assert_eq!(k.spectrum()[0], 0.0);
        assert!(k
            .spectrum()
            .iter()
            .all(|&d| (-2.0 / 3.0 - 1e-12..=1.0 / 3.0 + 1e-12).contains(&d)));
    }

    #[test]
    fn grid_values_match_formula() {
        let k = make_dipole_kernel([8, 6, 4], [1.0, 2.0, 0.5], [0.0, 0.6, 0.8]).unwrap();
        // k index (1, 0, 0) lies perpendicular to b̂ (which has no x component)
        assert!((k.spectrum()[1] - 1.0 / 3.0).abs() < 1e-15);
        // k index (0, 0, 1): kz = 1/(4·0.5) = 0.5 cycles/mm, cos² = 0.64
        let idx = crate::volume::linear_index([8, 6, 4], 0, 0, 1);
        assert!((k.spectrum()[idx] - (1.0 / 3.0 - 0.64)).abs() < 1e-12);
    }

    #[test]
    fn kernel_rejects_bad_geometry() {
        assert!(make_dipole_kernel([8, 8, 8], [1.0, 0.0, 1.0], [0.0, 0.0, 1.0]).is_err());
        assert!(make_dipole_kernel([8, 1, 8], [1.0; 3], [0.0, 0.0, 1.0]).is_err());
        assert!(make_dipole_kernel([8, 8, 8], [1.0; 3], [0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_chi_zero_field() {
        let k = make_dipole_kernel([8, 8, 8], [1.0; 3], [0.0, 0.0, 1.0]).unwrap();
        let chi = ScalarVolume::zeros([8, 8, 8], [1.0; 3], Unit::Ppb);
        let f = forward_field(&chi, &k, 3.0).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.unit(), Unit::Hz);
    }

    #[test]
    fn field_operator_is_linear_and_self_adjoint() {
        let dims = [16, 16, 16];
        let k = make_dipole_kernel(dims, [1.0, 1.0, 1.2], [0.1, 0.2, 0.97]).unwrap();
        let mut op = FieldOperator::new(&k, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = voxel_count(dims);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let ax = op.apply(&x);
        let aty = op.adjoint(&y);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()));

        let (a, b) = (2.5, -0.75);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = op.apply(&combo);
        let ay = op.apply(&y);
        let scale = ax.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for ((l, p), q) in lhs.iter().zip(&ax).zip(&ay) {
            assert!((l - (a * p + b * q)).abs() < 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn larmor_at_3t() {
        assert!((larmor_hz(3.0) - 127.731e6).abs() < 1.0);
    }

    fn vol(v: f64) -> ScalarVolume {
        ScalarVolume::filled([1, 1, 1], [1.0; 3], v, Unit::Ppb)
    }

    #[test]
    fn r2prime_arithmetic() {
        let c = RelaxometricConstants::default();
        let r = |p, d| forward_r2prime(&vol(p), &vol(d), c).unwrap().data()[0];
        assert!((r(100.0, 0.0) - 10.0).abs() < 1e-12);
        assert!((r(0.0, -50.0) - 5.0).abs() < 1e-12);
        assert_eq!(r(0.0, 0.0), 0.0);
    }

    #[test]
    fn r2prime_sign_violation() {
        let c = RelaxometricConstants::default();
        assert!(matches!(
            forward_r2prime(&vol(-1.0), &vol(0.0), c),
            Err(Error::SignConstraint { .. })
        ));
        assert!(matches!(
            forward_r2prime(&vol(1.0), &vol(2.0), c),
            Err(Error::SignConstraint { .. })
        ));
    }
}
