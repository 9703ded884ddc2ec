//! Digital phantoms: rasterized ground-truth susceptibility and the multi-echo
//! GRE data it would produce.
//!
//! Shape centers and sizes are in voxel coordinates (voxel `(i, j, k)` sits at
//! `[i, j, k]`). Background fields use millimetres relative to the grid center.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dipole::{forward_field, forward_r2prime, hz_per_ppb, make_dipole_kernel, RelaxometricConstants};
use crate::error::{Error, Result};
use crate::phase::wrap_to_pi;
use crate::volume::{BinaryMask, Dims, MultiEchoGre, ScalarVolume, Unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// `size[0]` is the radius; the other entries are ignored.
    Sphere,
    /// `size` holds the full edge lengths.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub geometry: Geometry,
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub chi_para: f64,
    #[serde(default)]
    pub chi_dia: f64,
}

impl Shape {
    pub fn sphere(center: [f64; 3], radius: f64, chi_para: f64, chi_dia: f64) -> Self {
        Self {
            geometry: Geometry::Sphere,
            center,
            size: [radius; 3],
            chi_para,
            chi_dia,
        }
    }

    pub fn cuboid(center: [f64; 3], edges: [f64; 3], chi_para: f64, chi_dia: f64) -> Self {
        Self {
            geometry: Geometry::Box,
            center,
            size: edges,
            chi_para,
            chi_dia,
        }
    }

    fn half_extent(&self) -> [f64; 3] {
        match self.geometry {
            Geometry::Sphere => [self.size[0]; 3],
            Geometry::Box => self.size.map(|s| s / 2.0),
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|a| p[a] - self.center[a]);
        match self.geometry {
            Geometry::Sphere => d.iter().map(|x| x * x).sum::<f64>() <= self.size[0] * self.size[0],
            Geometry::Box => (0..3).all(|a| d[a].abs() <= self.size[a] / 2.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Background {
    #[default]
    None,
    /// Point dipole along B0; `moment` is a susceptibility-volume product in
    /// ppb·mm³ (a sphere of radius R and susceptibility χ has χ·4πR³/3).
    ExternalDipole { position_mm: [f64; 3], moment: f64 },
    /// Up to second order in (x, y, z) mm, coefficients in Hz:
    /// `[1, x, y, z, x², y², z², xy, xz, yz]`. Missing trailing terms are zero.
    Polynomial { coeffs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Axis-aligned ellipsoid in voxel coordinates.
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    /// Union of the shapes grown by `margin` voxels.
    DilatedShapes { margin: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size_mm: [f64; 3],
    #[serde(default)]
    pub shapes: Vec<Shape>,
    pub s0: f64,
    /// s⁻¹
    pub r2_baseline: f64,
    #[serde(default)]
    pub background: Background,
    /// Fraction of s0.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the ellipsoid inscribed in the grid with a 2-voxel margin.
    #[serde(default)]
    pub mask: Option<MaskSpec>,
    #[serde(default = "default_b0_dir")]
    pub b0_dir: [f64; 3],
    #[serde(default = "default_tr")]
    pub tr_s: f64,
    #[serde(default)]
    pub relaxometry: RelaxometricConstants,
}

fn default_b0_dir() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_tr() -> f64 {
    0.033
}

/// Echo times of the 3 T protocol the bundled phantom mimics, s.
pub const DEFAULT_TE_S: [f64; 5] = [0.00525, 0.01108, 0.01691, 0.02274, 0.02857];

impl PhantomSpec {
    /// 64³ phantom with a paramagnetic sphere, a diamagnetic slab and a mixed
    /// region inside an ellipsoidal head mask.
    pub fn bundled() -> Self {
        Self {
            dims: [64, 64, 64],
            voxel_size_mm: [1.0; 3],
            shapes: vec![
                Shape::cuboid([32.0, 40.0, 32.0], [30.0, 6.0, 14.0], 0.0, -40.0),
                Shape::sphere([22.0, 28.0, 32.0], 6.0, 100.0, 0.0),
                Shape::sphere([42.0, 28.0, 32.0], 6.0, 100.0, -40.0),
            ],
            s0: 1000.0,
            r2_baseline: 10.0,
            background: Background::ExternalDipole {
                position_mm: [0.0, 0.0, 52.0],
                moment: 1.0e7,
            },
            noise_sigma: 0.0,
            seed: 7,
            mask: None,
            b0_dir: default_b0_dir(),
            tr_s: default_tr(),
            relaxometry: RelaxometricConstants::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.voxel_size_mm.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return bad(format!("voxel size must be positive, got {:?}", self.voxel_size_mm));
        }
        if !(self.s0 > 0.0) || !(self.r2_baseline >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("s0 must be positive, r2_baseline and noise_sigma non-negative".into());
        }
        if !(self.tr_s > 0.0) {
            return bad("tr_s must be positive".into());
        }
        if let Background::Polynomial { coeffs } = &self.background {
            if coeffs.len() > 10 {
                return bad(format!("polynomial background takes at most 10 coefficients, got {}", coeffs.len()));
            }
        }
        for (n, s) in self.shapes.iter().enumerate() {
            if !(s.chi_para >= 0.0) || !(s.chi_dia <= 0.0) {
                return Err(Error::SignConstraint {
                    index: n,
                    detail: format!("shape {n} has chi_para {} / chi_dia {}", s.chi_para, s.chi_dia),
                });
            }
            if s.size.iter().any(|&x| !(x > 0.0)) {
                return bad(format!("shape {n} has non-positive size"));
            }
            let h = s.half_extent();
            for a in 0..3 {
                let lo = s.center[a] - h[a];
                let hi = s.center[a] + h[a];
                if lo < -0.5 || hi > self.dims[a] as f64 - 0.5 {
                    return Err(Error::OutOfBounds(format!(
                        "shape {n} spans [{lo}, {hi}] on axis {a}, grid is 0..{}",
                        self.dims[a]
                    )));
                }
            }
        }
        Ok(())
    }

    fn default_mask(&self) -> MaskSpec {
        let c = self.dims.map(|d| (d as f64 - 1.0) / 2.0);
        MaskSpec::Ellipsoid {
            center: c,
            radii: c.map(|r| (r - 2.0).max(0.5)),
        }
    }
}

/// Ground-truth maps in ppb and the phantom mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub chi_para: ScalarVolume,
    pub chi_dia: ScalarVolume,
    pub mask: BinaryMask,
}

pub fn render_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let vs = spec.voxel_size_mm;
    let mut para = ScalarVolume::zeros(dims, vs, Unit::Ppb).into_data();
    let mut dia = para.clone();
    let mut v = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [i as f64, j as f64, k as f64];
                if let Some(s) = spec.shapes.iter().rev().find(|s| s.contains(p)) {
                    para[v] = s.chi_para;
                    dia[v] = s.chi_dia;
                }
                v += 1;
            }
        }
    }
    let mask = match spec.mask.clone().unwrap_or_else(|| spec.default_mask()) {
        MaskSpec::Ellipsoid { center, radii } => {
            if radii.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::InvalidParameter("mask radii must be positive".into()));
            }
            BinaryMask::from_fn(dims, |i, j, k| {
                let p = [i as f64, j as f64, k as f64];
                (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
            })
        }
        MaskSpec::DilatedShapes { margin } => {
            if !(margin >= 0.0) {
                return Err(Error::InvalidParameter("mask margin must be non-negative".into()));
            }
            let grown: Vec<Shape> = spec
                .shapes
                .iter()
                .map(|s| {
                    let mut g = s.clone();
                    match g.geometry {
                        Geometry::Sphere => g.size[0] += margin,
                        Geometry::Box => g.size = g.size.map(|e| e + 2.0 * margin),
                    }
                    g
                })
                .collect();
            BinaryMask::from_fn(dims, |i, j, k| {
                grown.iter().any(|s| s.contains([i as f64, j as f64, k as f64]))
            })
        }
    };
    Ok(Phantom {
        chi_para: ScalarVolume::new(dims, vs, para, Unit::Ppb)?,
        chi_dia: ScalarVolume::new(dims, vs, dia, Unit::Ppb)?,
        mask,
    })
}

/// Background field in Hz on the phantom grid.
pub fn background_field(spec: &PhantomSpec, b0_tesla: f64) -> ScalarVolume {
    let vs = spec.voxel_size_mm;
    let c = spec.dims.map(|d| (d as f64 - 1.0) / 2.0);
    let b = {
        let n = spec.b0_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        spec.b0_dir.map(|x| x / n)
    };
    ScalarVolume::from_fn(spec.dims, vs, Unit::Hz, |i, j, k| {
        let r = [
            (i as f64 - c[0]) * vs[0],
            (j as f64 - c[1]) * vs[1],
            (k as f64 - c[2]) * vs[2],
        ];
        match &spec.background {
            Background::None => 0.0,
            Background::ExternalDipole { position_mm, moment } => {
                let d = [0, 1, 2].map(|a| r[a] - position_mm[a]);
                let r2: f64 = d.iter().map(|x| x * x).sum();
                if r2 == 0.0 {
                    return 0.0;
                }
                let cos2 = (d[0] * b[0] + d[1] * b[1] + d[2] * b[2]).powi(2) / r2;
                hz_per_ppb(b0_tesla) * moment / (4.0 * std::f64::consts::PI * r2 * r2.sqrt())
                    * (3.0 * cos2 - 1.0)
            }
            Background::Polynomial { coeffs } => {
                let [x, y, z] = r;
                let terms = [1.0, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z];
                coeffs.iter().zip(terms).map(|(c, t)| c * t).sum()
            }
        }
    })
}

/// Noise-free tissue field and R2* implied by the phantom.
pub fn ground_truth_field(
    chi_para: &ScalarVolume,
    chi_dia: &ScalarVolume,
    spec: &PhantomSpec,
    b0_tesla: f64,
) -> Result<(ScalarVolume, ScalarVolume)> {
    chi_para.ensure_same_grid(chi_dia)?;
    let total = chi_para.with_data(
        chi_para.data().iter().zip(chi_dia.data()).map(|(p, d)| p + d).collect(),
        Unit::Ppb,
    )?;
    let kernel = make_dipole_kernel(chi_para.dims(), chi_para.voxel_size_mm(), spec.b0_dir)?;
    let tissue = forward_field(&total, &kernel, b0_tesla)?;
    let r2p = forward_r2prime(chi_para, chi_dia, spec.relaxometry)?;
    let r2star = r2p.map(Unit::PerSecond, |r| r + spec.r2_baseline);
    Ok((tissue, r2star))
}

/// Multi-echo magnitude and wrapped phase for the phantom. Magnitude is zero
/// outside `mask`; the phase carries the full field everywhere.
pub fn simulate_gre(
    chi_para: &ScalarVolume,
    chi_dia: &ScalarVolume,
    mask: &BinaryMask,
    spec: &PhantomSpec,
    te_s: &[f64],
    b0_tesla: f64,
) -> Result<MultiEchoGre> {
    spec.validate()?;
    chi_para.ensure_same_dims(spec.dims)?;
    chi_para.ensure_same_dims(mask.dims())?;
    if !(b0_tesla > 0.0) {
        return Err(Error::InvalidParameter(format!("B0 must be positive, got {b0_tesla}")));
    }
    let (tissue, r2star) = ground_truth_field(chi_para, chi_dia, spec, b0_tesla)?;
    let bg = background_field(spec, b0_tesla);
    let field: Vec<f64> = tissue.data().iter().zip(bg.data()).map(|(a, b)| a + b).collect();

    let sigma = spec.noise_sigma * spec.s0;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut magnitude = Vec::with_capacity(te_s.len());
    let mut phase = Vec::with_capacity(te_s.len());
    for &te in te_s {
        let mut mag = vec![0.0; field.len()];
        let mut ph = vec![0.0; field.len()];
        for v in 0..field.len() {
            let clean = two_pi * field[v] * te;
            if !mask.data()[v] {
                ph[v] = wrap_to_pi(clean);
                continue;
            }
            let m = spec.s0 * (-r2star.data()[v] * te).exp();
            if sigma > 0.0 {
                let nm = normal.sample(&mut rng);
                let np = normal.sample(&mut rng);
                mag[v] = (m + sigma * nm).max(0.0);
                let sd = if m > 0.0 { (sigma / m).min(std::f64::consts::PI) } else { std::f64::consts::PI };
                ph[v] = wrap_to_pi(clean + sd * np);
            } else {
                mag[v] = m;
                ph[v] = wrap_to_pi(clean);
            }
        }
        magnitude.push(chi_para.with_data(mag, Unit::Dimensionless)?);
        phase.push(chi_para.with_data(ph, Unit::Radians)?);
    }
    MultiEchoGre::new(te_s.to_vec(), spec.tr_s, b0_tesla, spec.b0_dir, magnitude, phase)
}
