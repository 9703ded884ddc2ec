//! Mono-exponential R2* fitting and the R2′ surrogate.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, MultiEchoGre, ScalarVolume, Unit};

pub const R2STAR_MAX: f64 = 2000.0;
const MAX_ITER: usize = 50;
const PARAM_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct R2StarFit {
    pub r2star: ScalarVolume,
    pub s0: ScalarVolume,
    pub residual_rms: ScalarVolume,
    /// Input mask minus voxels with fewer than two positive echoes.
    pub valid: BinaryMask,
}

/// Per-voxel fit result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub s0: f64,
    pub r2star: f64,
    pub sse: f64,
    pub iterations: usize,
}

fn sse(te: &[f64], mag: &[f64], s0: f64, r2: f64) -> f64 {
    te.iter()
        .zip(mag)
        .map(|(&t, &m)| {
            let r = m - s0 * (-r2 * t).exp();
            r * r
        })
        .sum()
}

fn clamp_params(s0: f64, r2: f64) -> (f64, f64) {
    (s0.max(0.0), r2.clamp(0.0, R2STAR_MAX))
}

/// Least-squares line through (TE, ln M) with magnitudes floored at `floor`.
pub fn log_linear_init(te: &[f64], mag: &[f64]) -> (f64, f64) {
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let floor = if peak > 0.0 { peak * 1e-6 } else { 1e-12 };
    let n = te.len() as f64;
    let ys: Vec<f64> = mag.iter().map(|&m| m.max(floor).ln()).collect();
    let tm = te.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxy: f64 = te.iter().zip(&ys).map(|(t, y)| (t - tm) * (y - ym)).sum();
    let sxx: f64 = te.iter().map(|t| (t - tm) * (t - tm)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    clamp_params(intercept.exp(), -slope)
}

/// Fits M(TE) = S0·exp(−R2*·TE) to one voxel: log-linear start, then damped
/// Gauss-Newton refinement with parameters kept in S0 ≥ 0, 0 ≤ R2* ≤ 2000.
pub fn fit_decay(te: &[f64], mag: &[f64]) -> DecayFit {
    let (mut s0, mut r2) = log_linear_init(te, mag);
    let mut cost = sse(te, mag, s0, r2);
    let mut damping = 1e-3;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &m) in te.iter().zip(mag) {
            let e = (-r2 * t).exp();
            let res = m - s0 * e;
            // Jacobian of the residual
            let j1 = -e;
            let j2 = s0 * t * e;
            a11 += j1 * j1;
            a12 += j1 * j2;
            a22 += j2 * j2;
            g1 += j1 * res;
            g2 += j2 * res;
        }
        let mut improved = false;
        for _ in 0..30 {
            let b11 = a11 * (1.0 + damping);
            let b22 = a22 * (1.0 + damping);
            let det = b11 * b22 - a12 * a12;
            if !(det.abs() > 0.0) || !det.is_finite() {
                damping *= 10.0;
                continue;
            }
            let d1 = -(b22 * g1 - a12 * g2) / det;
            let d2 = -(b11 * g2 - a12 * g1) / det;
            let (ns0, nr2) = clamp_params(s0 + d1, r2 + d2);
            let ncost = sse(te, mag, ns0, nr2);
            if ncost <= cost {
                let change = ((ns0 - s0) / s0.abs().max(1e-12))
                    .abs()
                    .max(((nr2 - r2) / r2.abs().max(1.0)).abs());
                s0 = ns0;
                r2 = nr2;
                cost = ncost;
                damping = (damping * 0.1).max(1e-12);
                improved = change >= PARAM_TOL;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    DecayFit {
        s0,
        r2star: r2,
        sse: cost,
        iterations,
    }
}

/// Voxelwise R2* fit inside `mask`. Voxels with fewer than two positive
/// echoes get R2* = 0 and are dropped from the returned validity mask.
pub fn fit_r2star(gre: &MultiEchoGre, mask: &BinaryMask) -> Result<R2StarFit> {
    let dims = gre.dims();
    if mask.dims() != dims {
        return Err(Error::dims(dims, mask.dims()));
    }
    if gre.n_echoes() < 2 {
        return Err(Error::InvalidParameter("R2* fit needs at least 2 echoes".into()));
    }
    if let Some(neg) = gre
        .magnitude()
        .iter()
        .flat_map(|m| m.data())
        .find(|v| !(**v >= 0.0))
    {
        return Err(Error::InvalidParameter(format!(
            "magnitudes must be non-negative, found {neg}"
        )));
    }
    let te = gre.te_s();
    let n = mask.data().len();
    let mut r2star = vec![0.0; n];
    let mut s0 = vec![0.0; n];
    let mut rms = vec![0.0; n];
    let mut valid = mask.data().to_vec();
    let mut mags = vec![0.0; te.len()];
    for v in mask.indices() {
        for (e, m) in gre.magnitude().iter().enumerate() {
            mags[e] = m.data()[v];
        }
        if mags.iter().filter(|&&m| m > 0.0).count() < 2 {
            valid[v] = false;
            continue;
        }
        let fit = fit_decay(te, &mags);
        r2star[v] = fit.r2star;
        s0[v] = fit.s0;
        rms[v] = (fit.sse / te.len() as f64).sqrt();
    }
    let grid = &gre.magnitude()[0];
    Ok(R2StarFit {
        r2star: grid.with_data(r2star, Unit::PerSecond)?,
        s0: grid.with_data(s0, Unit::Dimensionless)?,
        residual_rms: grid.with_data(rms, Unit::Dimensionless)?,
        valid: BinaryMask::new(dims, valid)?,
    })
}

/// R2′ = max(R2* − baseline, 0).
pub fn r2prime_from_r2star(r2star: &ScalarVolume, r2_baseline: f64) -> Result<ScalarVolume> {
    if !(r2_baseline >= 0.0) || !r2_baseline.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "R2 baseline must be non-negative, got {r2_baseline}"
        )));
    }
    Ok(r2star.map(Unit::PerSecond, |r| (r - r2_baseline).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const PROTOCOL_TES: [f64; 5] = [0.00525, 0.01108, 0.01691, 0.02274, 0.02857];

    fn decay(s0: f64, r2: f64) -> Vec<f64> {
        PROTOCOL_TES.iter().map(|t| s0 * (-r2 * t).exp()).collect()
    }

    #[test]
    fn noiseless_recovery() {
        let fit = fit_decay(&PROTOCOL_TES, &decay(100.0, 20.0));
        assert!((fit.r2star - 20.0).abs() / 20.0 < 1e-6);
        assert!((fit.s0 - 100.0).abs() / 100.0 < 1e-6);
    }

    #[test]
    fn flat_signal() {
        let fit = fit_decay(&PROTOCOL_TES, &[42.0; 5]);
        assert!(fit.r2star.abs() < 1e-9);
        assert!((fit.s0 - 42.0).abs() < 1e-9);
    }

    #[test]
    fn growing_signal_clamps_to_zero() {
        let fit = fit_decay(&PROTOCOL_TES, &decay(10.0, -30.0));
        assert_eq!(fit.r2star, 0.0);
    }

    #[test]
    fn r2prime_cases() {
        let v = |x| ScalarVolume::filled([1, 1, 1], [1.0; 3], x, Unit::PerSecond);
        assert_eq!(r2prime_from_r2star(&v(30.0), 10.0).unwrap().data()[0], 20.0);
        assert_eq!(r2prime_from_r2star(&v(8.0), 10.0).unwrap().data()[0], 0.0);
        assert_eq!(r2prime_from_r2star(&v(8.0), 0.0).unwrap().data()[0], 8.0);
        assert!(r2prime_from_r2star(&v(8.0), -1.0).is_err());
    }

    #[test]
    fn voxels_without_two_positive_echoes_invalid() {
        let dims = [2, 1, 1];
        let mag = |a: f64, b: f64| ScalarVolume::new(dims, [1.0; 3], vec![a, b], Unit::Dimensionless).unwrap();
        let zero = || ScalarVolume::zeros(dims, [1.0; 3], Unit::Radians);
        let gre = MultiEchoGre::new(
            vec![0.005, 0.01, 0.02],
            0.03,
            3.0,
            [0.0, 0.0, 1.0],
            vec![mag(10.0, 10.0), mag(8.0, 0.0), mag(6.0, 0.0)],
            vec![zero(), zero(), zero()],
        )
        .unwrap();
        let fit = fit_r2star(&gre, &BinaryMask::full(dims)).unwrap();
        assert!(fit.valid.data()[0]);
        assert!(!fit.valid.data()[1]);
        assert_eq!(fit.r2star.data()[1], 0.0);
        assert!(fit.r2star.data()[0] > 0.0);
    }

    proptest! {
        #[test]
        fn scale_equivariant(s0 in 1.0f64..1000.0, r2 in 0.0f64..150.0, a in 0.01f64..100.0,
                             wiggle in proptest::collection::vec(-0.02f64..0.02, 5)) {
            let m: Vec<f64> = decay(s0, r2).iter().zip(&wiggle).map(|(v, w)| v * (1.0 + w)).collect();
            let scaled: Vec<f64> = m.iter().map(|v| v * a).collect();
            let f1 = fit_decay(&PROTOCOL_TES, &m);
            let f2 = fit_decay(&PROTOCOL_TES, &scaled);
            prop_assert!((f1.r2star - f2.r2star).abs() < 1e-5 * (1.0 + f1.r2star));
            prop_assert!((f2.s0 - a * f1.s0).abs() < 1e-5 * a * f1.s0);
        }

        #[test]
        fn refinement_never_worse_than_init(s0 in 1.0f64..1000.0, r2 in 0.0f64..300.0,
                                            noise in proptest::collection::vec(-0.2f64..0.2, 5)) {
            let m: Vec<f64> = decay(s0, r2).iter().zip(&noise).map(|(v, w)| (v + w * s0).max(0.0)).collect();
            prop_assume!(m.iter().filter(|&&x| x > 0.0).count() >= 2);
            let (i0, i1) = log_linear_init(&PROTOCOL_TES, &m);
            let fit = fit_decay(&PROTOCOL_TES, &m);
            prop_assert!(fit.sse <= sse(&PROTOCOL_TES, &m, i0, i1) * (1.0 + 1e-12));
            prop_assert!(fit.r2star >= 0.0 && fit.r2star <= R2STAR_MAX && fit.s0 >= 0.0);
        }
    }
}
