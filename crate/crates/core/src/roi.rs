//! ROI extraction, cohort ROI tables and the χ_para vs iron regression.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume};

/// Reporting order of the population ROI table.
pub const TABLE_S1_ROIS: [&str; 40] = [
    "Caudate",
    "Putamen",
    "Globus pallidus",
    "Nucleus accumbens",
    "Substantia nigra",
    "Red nucleus",
    "Ventral pallidum",
    "Subthalamic nucleus",
    "Medial thalamic nuclei",
    "Lateral thalamic nuclei",
    "Pulvinar",
    "Inferior cerebellar peduncle",
    "Middle cerebellar peduncle",
    "Superior cerebellar peduncle",
    "Pontine crossing tract",
    "Genu of corpus callosum",
    "Body of corpus callosum",
    "Splenium of corpus callosum",
    "Fornix",
    "Corticospinal tract",
    "Medial lemniscus",
    "Cerebral peduncle",
    "Anterior limb of internal capsule",
    "Posterior limb of internal capsule",
    "Retrolenticular part of internal capsule",
    "Anterior corona radiata",
    "Superior corona radiata",
    "Posterior corona radiata",
    "Posterior thalamic radiation",
    "Sagittal stratum",
    "External capsule",
    "Cingulum (cingulate gyrus)",
    "Cingulum (hippocampus)",
    "Fornix (cres) / Stria terminalis",
    "Superior longitudinal fasciculus",
    "Superior fronto-occipital fasciculus",
    "Inferior fronto-occipital fasciculus",
    "Uncinate fasciculus",
    "Tapetum",
    "Whole white matter",
];

/// Adult non-heme iron (mg/100 g fresh weight) from the classic post-mortem
/// age series, paired with the population-mean χ_para (ppb) of each nucleus.
pub const IRON_NUCLEI: [(&str, f64, f64); 5] = [
    ("Caudate", 9.28, 47.7),
    ("Putamen", 13.32, 77.1),
    ("Globus pallidus", 21.30, 131.9),
    ("Substantia nigra", 18.46, 115.7),
    ("Red nucleus", 19.48, 112.0),
];

/// Merges co-registered label volumes. A voxel labelled in more than one
/// input is dropped from all of them. A label id must carry the same name in
/// every input that defines it.
pub fn make_exclusive(labels: &[LabelVolume]) -> Result<LabelVolume> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidParameter("no label volumes given".into()))?;
    let dims = first.dims();
    let mut names: BTreeMap<u32, String> = BTreeMap::new();
    for lv in labels {
        if lv.dims() != dims {
            return Err(Error::dims(dims, lv.dims()));
        }
        for (&id, name) in lv.names() {
            match names.get(&id) {
                Some(existing) if existing != name => {
                    return Err(Error::InvalidParameter(format!(
                        "label {id} is `{existing}` in one input and `{name}` in another"
                    )))
                }
                _ => {
                    names.insert(id, name.clone());
                }
            }
        }
    }
    let n = first.data().len();
    let mut out = vec![0u32; n];
    for (v, slot) in out.iter_mut().enumerate() {
        let mut claims = labels.iter().map(|lv| lv.data()[v]).filter(|&l| l != 0);
        if let (Some(l), None) = (claims.next(), claims.next()) {
            *slot = l;
        }
    }
    LabelVolume::new(dims, first.voxel_size_mm(), out, names)
}

fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lower_max + upper) / 2.0
    }
}

/// Exact median of `map` over the voxels labelled `roi`.
pub fn roi_median(map: &ScalarVolume, labels: &LabelVolume, roi: u32) -> Result<f64> {
    map.ensure_same_dims(labels.dims())?;
    let mut values: Vec<f64> = labels
        .data()
        .iter()
        .zip(map.data())
        .filter(|(&l, _)| l == roi && roi != 0)
        .map(|(_, &v)| v)
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyRoi(roi));
    }
    Ok(median_in_place(&mut values))
}

/// Medians of every named ROI, keyed by label id.
pub fn roi_medians(map: &ScalarVolume, labels: &LabelVolume) -> Result<BTreeMap<u32, f64>> {
    map.ensure_same_dims(labels.dims())?;
    let mut groups: BTreeMap<u32, Vec<f64>> = labels.names().keys().map(|&k| (k, Vec::new())).collect();
    for (&l, &v) in labels.data().iter().zip(map.data()) {
        if l != 0 {
            if let Some(g) = groups.get_mut(&l) {
                g.push(v);
            }
        }
    }
    groups
        .into_iter()
        .map(|(id, mut values)| {
            if values.is_empty() {
                Err(Error::EmptyRoi(id))
            } else {
                Ok((id, median_in_place(&mut values)))
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Per-column mean and sample SD of a subjects × ROIs matrix.
pub fn population_stats(per_subject_medians: &[Vec<f64>]) -> Result<Vec<MeanSd>> {
    let n = per_subject_medians.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "population statistics need at least 2 subjects, got {n}"
        )));
    }
    let width = per_subject_medians[0].len();
    if let Some(row) = per_subject_medians.iter().position(|r| r.len() != width) {
        return Err(Error::InvalidParameter(format!(
            "ragged input: subject {row} has {} ROIs, expected {width}",
            per_subject_medians[row].len()
        )));
    }
    Ok((0..width)
        .map(|c| {
            let mean = per_subject_medians.iter().map(|r| r[c]).sum::<f64>() / n as f64;
            let var = per_subject_medians
                .iter()
                .map(|r| (r[c] - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            MeanSd { mean, sd: var.sqrt() }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    pub roi_name: String,
    pub n_subjects: usize,
    pub chi_para_mean: f64,
    pub chi_para_sd: f64,
    pub chi_dia_mean: f64,
    pub chi_dia_sd: f64,
    pub qsm_mean: f64,
    pub qsm_sd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoiTable {
    pub rows: Vec<RoiRow>,
}

/// Per-subject ROI medians of the three maps, one entry per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMedians {
    pub chi_para: BTreeMap<u32, f64>,
    pub chi_dia: BTreeMap<u32, f64>,
    pub qsm: BTreeMap<u32, f64>,
}

impl SubjectMedians {
    pub fn extract(
        chi_para: &ScalarVolume,
        chi_dia: &ScalarVolume,
        qsm: &ScalarVolume,
        labels: &LabelVolume,
    ) -> Result<Self> {
        Ok(Self {
            chi_para: roi_medians(chi_para, labels)?,
            chi_dia: roi_medians(chi_dia, labels)?,
            qsm: roi_medians(qsm, labels)?,
        })
    }
}

impl RoiTable {
    /// Rows follow the label name table. Every subject must cover the same
    /// ROI set.
    pub fn from_subjects(names: &BTreeMap<u32, String>, subjects: &[SubjectMedians]) -> Result<Self> {
        let ids: Vec<u32> = names.keys().cloned().collect();
        let column = |pick: fn(&SubjectMedians) -> &BTreeMap<u32, f64>| -> Result<Vec<MeanSd>> {
            let matrix = subjects
                .iter()
                .map(|s| {
                    ids.iter()
                        .map(|id| pick(s).get(id).copied().ok_or(Error::EmptyRoi(*id)))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            population_stats(&matrix)
        };
        let para = column(|s| &s.chi_para)?;
        let dia = column(|s| &s.chi_dia)?;
        let qsm = column(|s| &s.qsm)?;
        let mut rows: Vec<RoiRow> = ids
            .iter()
            .enumerate()
            .map(|(c, id)| RoiRow {
                roi_name: names[id].clone(),
                n_subjects: subjects.len(),
                chi_para_mean: para[c].mean,
                chi_para_sd: para[c].sd,
                chi_dia_mean: dia[c].mean,
                chi_dia_sd: dia[c].sd,
                qsm_mean: qsm[c].mean,
                qsm_sd: qsm[c].sd,
            })
            .collect();
        let rank = |name: &str| TABLE_S1_ROIS.iter().position(|r| *r == name).unwrap_or(usize::MAX);
        rows.sort_by_key(|r| rank(&r.roi_name));
        Ok(Self { rows })
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<RoiRow>, _>>()?;
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub se_slope: f64,
    pub se_intercept: f64,
    pub ci95_slope: [f64; 2],
    pub ci95_intercept: [f64; 2],
    pub p_slope: f64,
    pub p_intercept: f64,
}

fn two_sided_p(t: &StudentsT, estimate: f64, se: f64) -> f64 {
    if se == 0.0 {
        return if estimate == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * (1.0 - t.cdf((estimate / se).abs()))
}

/// Ordinary least squares y = slope·x + intercept with t-based 95% CIs and
/// two-sided p-values on n − 2 degrees of freedom.
pub fn fit_regression(x: &[f64], y: &[f64]) -> Result<RegressionResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "x has {} points, y has {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidParameter(format!(
            "regression needs at least 3 points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite regression input".into()));
    }
    let nf = n as f64;
    let xm = x.iter().sum::<f64>() / nf;
    let ym = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateRegressor);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (intercept + slope * a)).powi(2))
        .sum();
    let ss_tot: f64 = y.iter().map(|b| (b - ym).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let dof = nf - 2.0;
    let s2 = ss_res / dof;
    let se_slope = (s2 / sxx).sqrt();
    let se_intercept = (s2 * (1.0 / nf + xm * xm / sxx)).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let tc = t.inverse_cdf(0.975);
    Ok(RegressionResult {
        n,
        slope,
        intercept,
        r_squared,
        se_slope,
        se_intercept,
        ci95_slope: [slope - tc * se_slope, slope + tc * se_slope],
        ci95_intercept: [intercept - tc * se_intercept, intercept + tc * se_intercept],
        p_slope: two_sided_p(&t, slope, se_slope),
        p_intercept: two_sided_p(&t, intercept, se_intercept),
    })
}

/// Reads a two-column CSV (iron, chi_para) with a header row.
pub fn read_regression_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::InvalidParameter(format!(
                "{}: row {} has {} columns, expected 2",
                path.display(),
                line + 2,
                rec.len()
            )));
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| {
                Error::InvalidParameter(format!("{}: row {}: {e}", path.display(), line + 2))
            })
        };
        x.push(parse(&rec[0])?);
        y.push(parse(&rec[1])?);
    }
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Unit;

    fn labels(data: Vec<u32>, names: &[(u32, &str)]) -> LabelVolume {
        let n = data.len();
        LabelVolume::new(
            [n, 1, 1],
            [1.0; 3],
            data,
            names.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        )
        .unwrap()
    }

    fn line(values: Vec<f64>) -> ScalarVolume {
        let n = values.len();
        ScalarVolume::new([n, 1, 1], [1.0; 3], values, Unit::Ppb).unwrap()
    }

    #[test]
    fn median_rules() {
        let l = labels(vec![1, 1, 1, 2, 2, 0], &[(1, "a"), (2, "b"), (3, "c")]);
        let m = line(vec![1.0, 100.0, 2.0, 1.0, 3.0, 50.0]);
        assert_eq!(roi_median(&m, &l, 1).unwrap(), 2.0);
        assert_eq!(roi_median(&m, &l, 2).unwrap(), 2.0);
        assert!(matches!(roi_median(&m, &l, 3), Err(Error::EmptyRoi(3))));
        assert!(matches!(roi_medians(&m, &l), Err(Error::EmptyRoi(3))));
    }

    #[test]
    fn exclusive_cases() {
        let a = labels(vec![1, 1, 0, 0], &[(1, "a")]);
        let b = labels(vec![0, 2, 2, 0], &[(2, "b")]);
        let out = make_exclusive(&[a.clone(), b]).unwrap();
        assert_eq!(out.data(), &[1, 0, 2, 0]);
        let same = make_exclusive(&[a.clone(), a.clone()]).unwrap();
        assert!(same.data().iter().all(|&l| l == 0));
        let clash = labels(vec![0, 0, 1, 0], &[(1, "other")]);
        assert!(make_exclusive(&[a, clash]).is_err());
    }

    #[test]
    fn population_hand_values() {
        let s = population_stats(&[vec![131.0, 5.0], vec![133.0, 5.0]]).unwrap();
        assert_eq!(s[0].mean, 132.0);
        assert!((s[0].sd - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].sd, 0.0);
        assert!(population_stats(&[vec![1.0]]).is_err());
        assert!(population_stats(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = fit_regression(&x, &y).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12);
        assert!((r.intercept - 1.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        assert!(r.p_slope < 0.001);
    }

    #[test]
    fn regression_rejections() {
        assert!(matches!(
            fit_regression(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateRegressor)
        ));
        assert!(fit_regression(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(fit_regression(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn iron_fit_matches_reference_ols() {
        // reference values from an independent OLS implementation
        let x: Vec<f64> = IRON_NUCLEI.iter().map(|r| r.1).collect();
        let y: Vec<f64> = IRON_NUCLEI.iter().map(|r| r.2).collect();
        let r = fit_regression(&x, &y).unwrap();
        assert!((r.slope - 6.822408831762185).abs() < 1e-9);
        assert!((r.intercept + 14.789187758283461).abs() < 1e-9);
        assert!((r.r_squared - 0.9866604704872526).abs() < 1e-12);
        assert!((r.se_slope - 0.4579979194413648).abs() < 1e-9);
        assert!((r.se_intercept - 7.765659082160085).abs() < 1e-9);
        assert!((r.p_slope - 0.0006565179842346726).abs() < 1e-8);
        assert!((r.p_intercept - 0.1529618).abs() < 1e-6);
        assert!((r.ci95_slope[0] - 5.36485505).abs() < 1e-6);
        assert!((r.ci95_slope[1] - 8.27996262).abs() < 1e-6);
        assert!((r.ci95_intercept[0] + 39.50298081).abs() < 1e-6);
        assert!((r.ci95_intercept[1] - 9.9246053).abs() < 1e-6);
    }

    #[test]
    fn table_follows_reporting_order_and_csv_round_trips() {
        let names: BTreeMap<u32, String> =
            [(1, "Putamen"), (2, "Caudate")].iter().map(|(k, v)| (*k, v.to_string())).collect();
        let subj = |p: f64| SubjectMedians {
            chi_para: [(1, p), (2, p + 1.0)].into_iter().collect(),
            chi_dia: [(1, -p), (2, -p)].into_iter().collect(),
            qsm: [(1, 0.0), (2, 1.0)].into_iter().collect(),
        };
        let t = RoiTable::from_subjects(&names, &[subj(10.0), subj(12.0)]).unwrap();
        assert_eq!(t.rows[0].roi_name, "Caudate");
        assert_eq!(t.rows[1].chi_para_mean, 11.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.save_csv(&p).unwrap();
        assert_eq!(RoiTable::read_csv(&p).unwrap(), t);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with(
            "roi_name,n_subjects,chi_para_mean,chi_para_sd,chi_dia_mean,chi_dia_sd,qsm_mean,qsm_sd"
        ));
    }
}
