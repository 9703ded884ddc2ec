//! Intensity standardization, hybrid T1/QSM contrast and voxelwise cohort
//! aggregation into mean and relative-SD atlases.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, ScalarVolume, Unit};

/// Weight applied to QSM (per ppb) when forming the hybrid contrast.
pub const HYBRID_QSM_WEIGHT: f64 = 0.8;
/// |mean| below which the relative SD is reported as undefined.
pub const RSD_EPSILON: f64 = 1e-6;
pub const N_DECILES: usize = 11;

/// Quantile with linear interpolation between order statistics
/// (position `q·(n−1)` in the sorted sample).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

fn masked_sorted(image: &ScalarVolume, mask: Option<&BinaryMask>) -> Result<Vec<f64>> {
    let mut values: Vec<f64> = match mask {
        Some(m) => {
            image.ensure_same_dims(m.dims())?;
            m.indices().map(|v| image.data()[v]).collect()
        }
        None => image.data().to_vec(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("image has non-finite values".into()));
    }
    values.sort_by(f64::total_cmp);
    Ok(values)
}

/// The 0%, 10%, …, 100% quantiles of the (masked) image.
pub fn image_deciles(image: &ScalarVolume, mask: Option<&BinaryMask>) -> Result<[f64; N_DECILES]> {
    let sorted = masked_sorted(image, mask)?;
    if sorted.is_empty() {
        return Err(Error::EmptyMask("no voxels to compute deciles from".into()));
    }
    Ok(std::array::from_fn(|d| quantile_sorted(&sorted, d as f64 / 10.0)))
}

/// Cohort target: the arithmetic mean of each decile across subjects.
pub fn cohort_target_deciles(images: &[ScalarVolume], mask: Option<&BinaryMask>) -> Result<[f64; N_DECILES]> {
    if images.is_empty() {
        return Err(Error::InvalidParameter("no images to average deciles over".into()));
    }
    let mut acc = [0.0; N_DECILES];
    for img in images {
        let d = image_deciles(img, mask)?;
        for (a, v) in acc.iter_mut().zip(d) {
            *a += v;
        }
    }
    Ok(acc.map(|a| a / images.len() as f64))
}

/// Piecewise-linear intensity map taking the image's masked deciles onto
/// `targets`. Values outside the image range extend the end segments.
/// Voxels outside `mask` are transformed with the same map.
pub fn normalize_deciles(
    image: &ScalarVolume,
    mask: Option<&BinaryMask>,
    targets: &[f64],
) -> Result<ScalarVolume> {
    if targets.len() != N_DECILES {
        return Err(Error::InvalidParameter(format!(
            "expected {N_DECILES} target deciles, got {}",
            targets.len()
        )));
    }
    if targets.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("target deciles must be strictly ascending".into()));
    }
    let sorted = masked_sorted(image, mask)?;
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < N_DECILES {
        return Err(Error::DegenerateHistogram(format!(
            "image has {} distinct values, need at least {N_DECILES}",
            distinct.len()
        )));
    }
    let knots: Vec<f64> = (0..N_DECILES)
        .map(|d| quantile_sorted(&sorted, d as f64 / 10.0))
        .collect();
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::DegenerateHistogram(
            "image deciles are not strictly increasing".into(),
        ));
    }
    let map = |x: f64| {
        let seg = match knots.iter().position(|&k| x < k) {
            Some(0) => 0,
            Some(p) => p - 1,
            None => N_DECILES - 2,
        };
        let (x0, x1) = (knots[seg], knots[seg + 1]);
        let (y0, y1) = (targets[seg], targets[seg + 1]);
        y0 + (x - x0) * (y1 - y0) / (x1 - x0)
    };
    Ok(image.map(image.unit(), map))
}

/// Affine map of [min, max] onto [lo, hi].
pub fn scale_to_range(image: &ScalarVolume, lo: f64, hi: f64) -> Result<ScalarVolume> {
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!("empty target range [{lo}, {hi}]")));
    }
    let (min, max) = image.min_max();
    if !(max > min) {
        return Err(Error::DegenerateHistogram("constant image cannot be rescaled".into()));
    }
    let s = (hi - lo) / (max - min);
    Ok(image.map(Unit::Dimensionless, |v| {
        if v == min {
            lo
        } else if v == max {
            hi
        } else {
            lo + (v - min) * s
        }
    }))
}

/// t1 − 0.8·qsm, with t1 on [0, 255] and qsm in ppb.
pub fn hybrid_image(t1_norm: &ScalarVolume, qsm: &ScalarVolume) -> Result<ScalarVolume> {
    t1_norm.ensure_same_dims(qsm.dims())?;
    if qsm.unit() != Unit::Ppb {
        return Err(Error::InvalidParameter(format!("QSM must be in ppb, got {}", qsm.unit())));
    }
    let data = t1_norm
        .data()
        .iter()
        .zip(qsm.data())
        .map(|(t, q)| t - HYBRID_QSM_WEIGHT * q)
        .collect();
    t1_norm.with_data(data, Unit::Dimensionless)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasBundle {
    pub mean: ScalarVolume,
    /// Sample SD (N − 1 denominator).
    pub per_voxel_sd: ScalarVolume,
    /// Percent; 0 where undefined.
    pub rsd: ScalarVolume,
    /// Voxels inside the mask where |mean| < `RSD_EPSILON`.
    pub rsd_undefined: BinaryMask,
    pub n_subjects: usize,
}

/// Voxelwise mean, sample SD and rSD = SD/|mean|·100 inside `mask`; all
/// outputs are zero outside it.
pub fn aggregate(maps: &[ScalarVolume], mask: &BinaryMask) -> Result<AtlasBundle> {
    if maps.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "aggregation needs at least 2 maps, got {}",
            maps.len()
        )));
    }
    let first = &maps[0];
    first.ensure_same_dims(mask.dims())?;
    for m in &maps[1..] {
        first.ensure_same_grid(m)?;
    }
    let n = maps.len();
    let len = first.len();
    let mut mean = vec![0.0; len];
    let mut sd = vec![0.0; len];
    let mut rsd = vec![0.0; len];
    let mut undefined = vec![false; len];
    for v in mask.indices() {
        let mu = maps.iter().map(|m| m.data()[v]).sum::<f64>() / n as f64;
        let var = maps.iter().map(|m| (m.data()[v] - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s = var.sqrt();
        mean[v] = mu;
        sd[v] = s;
        if mu.abs() < RSD_EPSILON {
            undefined[v] = true;
        } else {
            rsd[v] = s / mu.abs() * 100.0;
        }
    }
    let unit = first.unit();
    Ok(AtlasBundle {
        mean: first.with_data(mean, unit)?,
        per_voxel_sd: first.with_data(sd, unit)?,
        rsd: first.with_data(rsd, Unit::Dimensionless)?,
        rsd_undefined: BinaryMask::new(first.dims(), undefined)?,
        n_subjects: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> ScalarVolume {
        ScalarVolume::new([values.len(), 1, 1], [1.0; 3], values.to_vec(), Unit::Ppb).unwrap()
    }

    fn voxel_maps(values: &[f64]) -> Vec<ScalarVolume> {
        values.iter().map(|&v| line(&[v])).collect()
    }

    #[test]
    fn aggregate_hand_values() {
        let mask = BinaryMask::full([1, 1, 1]);
        let b = aggregate(&voxel_maps(&[10.0, 10.0, 10.0]), &mask).unwrap();
        assert_eq!(b.mean.data()[0], 10.0);
        assert_eq!(b.rsd.data()[0], 0.0);

        let b = aggregate(&voxel_maps(&[8.0, 12.0]), &mask).unwrap();
        assert_eq!(b.mean.data()[0], 10.0);
        assert!((b.per_voxel_sd.data()[0] - 8f64.sqrt()).abs() < 1e-12);
        assert!((b.rsd.data()[0] - 28.284271247461902).abs() < 1e-9);

        let b = aggregate(&voxel_maps(&[-1.0, 1.0]), &mask).unwrap();
        assert!(b.rsd_undefined.data()[0]);
        assert_eq!(b.rsd.data()[0], 0.0);
        assert!(!aggregate(&voxel_maps(&[8.0, 12.0]), &mask).unwrap().rsd_undefined.data()[0]);
    }

    #[test]
    fn aggregate_rejects_single_map_and_mismatch() {
        let mask = BinaryMask::full([1, 1, 1]);
        assert!(aggregate(&voxel_maps(&[1.0]), &mask).is_err());
        let maps = vec![line(&[1.0]), line(&[1.0, 2.0])];
        assert!(aggregate(&maps, &mask).is_err());
    }

    #[test]
    fn hybrid_spot_values() {
        let t1 = line(&[128.0, 77.0, 0.0]);
        let q = line(&[100.0, 0.0, -50.0]);
        let h = hybrid_image(&t1, &q).unwrap();
        assert_eq!(h.data(), &[48.0, 77.0, 40.0]);
        assert!(hybrid_image(&t1, &line(&[1.0])).is_err());
    }

    #[test]
    fn scale_to_range_cases() {
        let img = line(&[0.0, 0.25, 1.0]);
        assert_eq!(scale_to_range(&img, 0.0, 255.0).unwrap().data(), &[0.0, 63.75, 255.0]);
        let img = line(&[0.0, 17.0, 255.0]);
        assert_eq!(scale_to_range(&img, 0.0, 255.0).unwrap().data(), img.data());
        assert!(matches!(
            scale_to_range(&line(&[3.0, 3.0]), 0.0, 255.0),
            Err(Error::DegenerateHistogram(_))
        ));
    }

    #[test]
    fn deciles_fixed_point_and_scaling() {
        let values: Vec<f64> = (0..101).map(|i| (i as f64 * 0.37).sin() * 50.0 + i as f64).collect();
        let img = line(&values);
        let targets = image_deciles(&img, None).unwrap();
        let same = normalize_deciles(&img, None, &targets).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let doubled = img.map(Unit::Ppb, |v| 2.0 * v);
        let back = normalize_deciles(&doubled, None, &targets).unwrap();
        let got = image_deciles(&back, None).unwrap();
        for (g, t) in got.iter().zip(targets) {
            assert!((g - t).abs() < 1e-9);
        }
    }

    #[test]
    fn deciles_rejections() {
        let flat = line(&[5.0; 20]);
        let targets: Vec<f64> = (0..11).map(|d| d as f64).collect();
        assert!(matches!(
            normalize_deciles(&flat, None, &targets),
            Err(Error::DegenerateHistogram(_))
        ));
        let img = line(&(0..20).map(|v| v as f64).collect::<Vec<_>>());
        let mut bad = targets.clone();
        bad.swap(3, 4);
        assert!(normalize_deciles(&img, None, &bad).is_err());
    }
}
