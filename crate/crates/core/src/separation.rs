//! Model-based χ-separation: joint inversion of the field shift and R2′ for
//! non-negative paramagnetic and non-positive diamagnetic susceptibility.
//!
//! The solver minimizes
//!
//! ```text
//!   ‖m(A(χp + χd) − Δf)‖² / σf²
//! + λr ‖m(ap χp − ad χd − R2′)‖² / σr²
//! + λg (‖∇χp‖² + ‖∇χd‖²) / χref²
//! ```
//!
//! over χp ≥ 0, χd ≤ 0 (both zero outside the mask) by projected gradient
//! descent. σf and σr are the RMS of the masked data and χref = σf / (f₀·10⁻⁹)
//! is the susceptibility scale implied by the field normalization, so every
//! term is dimensionless.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dipole::{DipoleKernel, FieldOperator, RelaxometricConstants};
use crate::error::{Error, Result};
use crate::phase::FieldMap;
use crate::volume::{linear_index, BinaryMask, Dims, ScalarVolume, Unit};

/// |D| threshold of the thresholded-inverse warm start.
pub const WARM_START_THRESHOLD: f64 = 0.1;
const POWER_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Hz/ppm
    pub dr_para: f64,
    /// Hz/ppm
    pub dr_dia: f64,
    pub lambda_r2p: f64,
    pub lambda_grad: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub step_safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dr_para: 100.0,
            dr_dia: 100.0,
            lambda_r2p: 1.0,
            lambda_grad: 1e-3,
            max_iter: 500,
            tol: 1e-6,
            step_safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn constants(&self) -> RelaxometricConstants {
        RelaxometricConstants {
            dr_para: self.dr_para,
            dr_dia: self.dr_dia,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.dr_para > 0.0 && self.dr_dia > 0.0) {
            return bad("relaxometric constants must be positive");
        }
        if !(self.lambda_r2p >= 0.0 && self.lambda_grad >= 0.0) {
            return bad("regularization weights must be non-negative");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.step_safety > 0.0 && self.step_safety <= 1.0) {
            return bad("step_safety must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChiSeparationResult {
    pub chi_para: ScalarVolume,
    pub chi_dia: ScalarVolume,
    pub qsm: ScalarVolume,
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    /// Objective after the warm start and after every accepted iterate.
    pub objective_history: Vec<f64>,
    pub stats: SolverStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub sigma_field_hz: f64,
    pub sigma_r2prime: f64,
    pub chi_ref_ppb: f64,
    pub lipschitz: f64,
    pub final_step: f64,
    pub data_residual_field: f64,
    pub data_residual_r2prime: f64,
}

fn rms_in_mask(values: &[f64], mask: &[bool]) -> f64 {
    let (sum, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward differences per mm; zero across the last plane of each axis.
struct Gradient {
    dims: Dims,
    inv_h: [f64; 3],
}

impl Gradient {
    fn sum_sq(&self, x: &[f64]) -> f64 {
        let [nx, ny, nz] = self.dims;
        let mut total = 0.0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = linear_index(self.dims, i, j, k);
                    let c = x[v];
                    if i + 1 < nx {
                        let d = (x[v + 1] - c) * self.inv_h[0];
                        total += d * d;
                    }
                    if j + 1 < ny {
                        let d = (x[v + nx] - c) * self.inv_h[1];
                        total += d * d;
                    }
                    if k + 1 < nz {
                        let d = (x[v + nx * ny] - c) * self.inv_h[2];
                        total += d * d;
                    }
                }
            }
        }
        total
    }

    /// Adds `scale · ∇ᵀ∇ x` to `out`.
    fn add_normal(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let [nx, ny, nz] = self.dims;
        let w = self.inv_h.map(|h| scale * h * h);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = linear_index(self.dims, i, j, k);
                    let c = x[v];
                    let mut acc = 0.0;
                    if i + 1 < nx {
                        acc += w[0] * (c - x[v + 1]);
                    }
                    if i > 0 {
                        acc += w[0] * (c - x[v - 1]);
                    }
                    if j + 1 < ny {
                        acc += w[1] * (c - x[v + nx]);
                    }
                    if j > 0 {
                        acc += w[1] * (c - x[v - nx]);
                    }
                    if k + 1 < nz {
                        acc += w[2] * (c - x[v + nx * ny]);
                    }
                    if k > 0 {
                        acc += w[2] * (c - x[v - nx * ny]);
                    }
                    out[v] += acc;
                }
            }
        }
    }
}

struct Problem<'a> {
    op: FieldOperator<'a>,
    grad: Gradient,
    mask: &'a [bool],
    field: &'a [f64],
    r2p: &'a [f64],
    ap: f64,
    ad: f64,
    w_field: f64,
    w_r2p: f64,
    w_grad: f64,
}

struct Evaluation {
    objective: f64,
    field_term: f64,
    r2p_term: f64,
    /// m ⊙ (A(χp + χd) − Δf), reused by the gradient.
    field_residual: Vec<f64>,
}

impl Problem<'_> {
    fn evaluate(&mut self, p: &[f64], d: &[f64]) -> Evaluation {
        let total: Vec<f64> = p.iter().zip(d).map(|(a, b)| a + b).collect();
        let mut field_residual = self.op.apply(&total);
        for ((r, &f), &m) in field_residual.iter_mut().zip(self.field).zip(self.mask) {
            *r = if m { *r - f } else { 0.0 };
        }
        let field_term = dot(&field_residual, &field_residual);
        let mut r2p_term = 0.0;
        for v in 0..p.len() {
            if self.mask[v] {
                let r = self.ap * p[v] - self.ad * d[v] - self.r2p[v];
                r2p_term += r * r;
            }
        }
        let reg = if self.w_grad > 0.0 {
            self.grad.sum_sq(p) + self.grad.sum_sq(d)
        } else {
            0.0
        };
        Evaluation {
            objective: self.w_field * field_term + self.w_r2p * r2p_term + self.w_grad * reg,
            field_term,
            r2p_term,
            field_residual,
        }
    }

    fn gradient(&mut self, p: &[f64], d: &[f64], eval: &Evaluation) -> (Vec<f64>, Vec<f64>) {
        let back = self.op.adjoint(&eval.field_residual);
        let mut gp = vec![0.0; p.len()];
        let mut gd = vec![0.0; p.len()];
        for v in 0..p.len() {
            if !self.mask[v] {
                continue;
            }
            let common = 2.0 * self.w_field * back[v];
            let r = self.ap * p[v] - self.ad * d[v] - self.r2p[v];
            gp[v] = common + 2.0 * self.w_r2p * self.ap * r;
            gd[v] = common - 2.0 * self.w_r2p * self.ad * r;
        }
        if self.w_grad > 0.0 {
            self.grad.add_normal(p, 2.0 * self.w_grad, &mut gp);
            self.grad.add_normal(d, 2.0 * self.w_grad, &mut gd);
        }
        (gp, gd)
    }

    /// Hessian-vector product restricted to the mask.
    fn hessian(&mut self, vp: &[f64], vd: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let total: Vec<f64> = vp.iter().zip(vd).map(|(a, b)| a + b).collect();
        let mut fwd = self.op.apply(&total);
        for (f, &m) in fwd.iter_mut().zip(self.mask) {
            if !m {
                *f = 0.0;
            }
        }
        let back = self.op.adjoint(&fwd);
        let mut hp = vec![0.0; vp.len()];
        let mut hd = vec![0.0; vp.len()];
        if self.w_grad > 0.0 {
            self.grad.add_normal(vp, 2.0 * self.w_grad, &mut hp);
            self.grad.add_normal(vd, 2.0 * self.w_grad, &mut hd);
        }
        for v in 0..vp.len() {
            if !self.mask[v] {
                hp[v] = 0.0;
                hd[v] = 0.0;
                continue;
            }
            let common = 2.0 * self.w_field * back[v];
            let r = self.ap * vp[v] - self.ad * vd[v];
            hp[v] += common + 2.0 * self.w_r2p * self.ap * r;
            hd[v] += common - 2.0 * self.w_r2p * self.ad * r;
        }
        (hp, hd)
    }

    /// Largest Hessian eigenvalue by power iteration from a seeded start.
    fn lipschitz(&mut self) -> f64 {
        let n = self.mask.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut vp: Vec<f64> = (0..n)
            .map(|v| if self.mask[v] { rng.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let mut vd: Vec<f64> = (0..n)
            .map(|v| if self.mask[v] { rng.random_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let mut estimate = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let norm = (dot(&vp, &vp) + dot(&vd, &vd)).sqrt();
            if norm == 0.0 {
                break;
            }
            vp.iter_mut().chain(vd.iter_mut()).for_each(|x| *x /= norm);
            let (hp, hd) = self.hessian(&vp, &vd);
            estimate = (dot(&hp, &hp) + dot(&hd, &hd)).sqrt();
            vp = hp;
            vd = hd;
        }
        estimate
    }
}

/// Solves for χ_para ≥ 0 and χ_dia ≤ 0 (ppb) from a tissue field (Hz) and
/// an R2′ map (s⁻¹).
pub fn separate(
    field: &FieldMap,
    r2prime: &ScalarVolume,
    mask: &BinaryMask,
    kernel: &DipoleKernel,
    b0_tesla: f64,
    cfg: &SolverConfig,
) -> Result<ChiSeparationResult> {
    cfg.validate()?;
    let field_vol = field.volume();
    let dims = field_vol.dims();
    field_vol.ensure_same_grid(r2prime)?;
    field_vol.ensure_same_dims(mask.dims())?;
    field_vol.ensure_same_dims(kernel.dims())?;
    if field_vol.unit() != Unit::Hz {
        return Err(Error::InvalidParameter(format!(
            "field must be in Hz, got {}",
            field_vol.unit()
        )));
    }
    if !r2prime.all_finite() {
        return Err(Error::InvalidParameter("R2' has non-finite values".into()));
    }
    let mask_data = mask.data();
    if mask.count() == 0 {
        return Err(Error::EmptyMask("separation mask has no voxels".into()));
    }

    let mut op = FieldOperator::new(kernel, b0_tesla)?;
    let hz_per_ppb = op.hz_per_ppb();
    let sigma_field = match rms_in_mask(field_vol.data(), mask_data) {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let sigma_r2p = match rms_in_mask(r2prime.data(), mask_data) {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let chi_ref = sigma_field / hz_per_ppb;

    // Warm start from a thresholded-inverse QSM split by sign.
    let chi0 = op.truncated_inverse(field_vol.data(), WARM_START_THRESHOLD);
    let mut p: Vec<f64> = chi0
        .iter()
        .zip(mask_data)
        .map(|(&c, &m)| if m { c.max(0.0) } else { 0.0 })
        .collect();
    let mut d: Vec<f64> = chi0
        .iter()
        .zip(mask_data)
        .map(|(&c, &m)| if m { c.min(0.0) } else { 0.0 })
        .collect();
    drop(chi0);

    let (ap, ad) = cfg.constants().per_ppb();
    let mut problem = Problem {
        op,
        grad: Gradient {
            dims,
            inv_h: field_vol.voxel_size_mm().map(|h| 1.0 / h),
        },
        mask: mask_data,
        field: field_vol.data(),
        r2p: r2prime.data(),
        ap,
        ad,
        w_field: 1.0 / (sigma_field * sigma_field),
        w_r2p: cfg.lambda_r2p / (sigma_r2p * sigma_r2p),
        w_grad: cfg.lambda_grad / (chi_ref * chi_ref),
    };

    let lipschitz = problem.lipschitz();
    let mut step = if lipschitz > 0.0 {
        cfg.step_safety / lipschitz
    } else {
        1.0
    };
    let min_step = step * 1e-12;

    let mut eval = problem.evaluate(&p, &d);
    let mut history = vec![eval.objective];
    let mut converged = false;
    let mut iterations = 0;
    'outer: while iterations < cfg.max_iter {
        let (gp, gd) = problem.gradient(&p, &d, &eval);
        loop {
            let np: Vec<f64> = (0..p.len())
                .map(|v| if mask_data[v] { (p[v] - step * gp[v]).max(0.0) } else { 0.0 })
                .collect();
            let nd: Vec<f64> = (0..d.len())
                .map(|v| if mask_data[v] { (d[v] - step * gd[v]).min(0.0) } else { 0.0 })
                .collect();
            let trial = problem.evaluate(&np, &nd);
            if trial.objective <= eval.objective {
                iterations += 1;
                let rel = (eval.objective - trial.objective) / eval.objective.max(f64::MIN_POSITIVE);
                p = np;
                d = nd;
                eval = trial;
                history.push(eval.objective);
                if rel < cfg.tol {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            step *= 0.5;
            if step < min_step {
                // no descent possible at this point: it is stationary
                converged = true;
                break 'outer;
            }
        }
    }
    if !converged {
        warn!(
            "chi-separation did not reach tol {} within {} iterations (last objective {:.6e})",
            cfg.tol, cfg.max_iter, eval.objective
        );
    }

    let qsm: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + b).collect();
    let n_mask = mask.count() as f64;
    let stats = SolverStats {
        sigma_field_hz: sigma_field,
        sigma_r2prime: sigma_r2p,
        chi_ref_ppb: chi_ref,
        lipschitz,
        final_step: step,
        data_residual_field: (eval.field_term / n_mask).sqrt(),
        data_residual_r2prime: (eval.r2p_term / n_mask).sqrt(),
    };
    Ok(ChiSeparationResult {
        chi_para: field_vol.with_data(p, Unit::Ppb)?,
        chi_dia: field_vol.with_data(d, Unit::Ppb)?,
        qsm: field_vol.with_data(qsm, Unit::Ppb)?,
        iterations,
        final_objective: eval.objective,
        converged,
        objective_history: history,
        stats,
    })
}
