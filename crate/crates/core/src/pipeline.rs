//! On-disk pipeline stages. Every stage reads its inputs from files, writes
//! its outputs into an output directory and leaves a provenance record next
//! to them, so stages can run standalone and be replayed from the record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::atlas::{aggregate, cohort_target_deciles, hybrid_image, normalize_deciles, scale_to_range};
use crate::config::{sha256_hex, DecileSource, PipelineConfig};
use crate::dipole::make_dipole_kernel;
use crate::error::{Error, Result};
use crate::io::{load_labels, load_mask, load_phase, load_volume, load_volume_as, save_mask, save_volume};
use crate::phase::{combine_echoes, laplacian_unwrap, vsharp, FieldMap};
use crate::relaxometry::{fit_r2star, r2prime_from_r2star};
use crate::roi::{fit_regression, make_exclusive, read_regression_csv, RoiTable, SubjectMedians, IRON_NUCLEI};
use crate::separation::separate;
use crate::simulator::{background_field, ground_truth_field, render_phantom, simulate_gre, PhantomSpec};
use crate::volume::{BinaryMask, MultiEchoGre, ScalarVolume, Unit};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GRE_MANIFEST: &str = "gre.json";

/// Acquisition metadata and per-echo file names of a GRE dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreManifest {
    pub te_s: Vec<f64>,
    pub tr_s: f64,
    pub b0_tesla: f64,
    pub b0_dir: [f64; 3],
    /// Relative to the manifest's directory.
    pub magnitude: Vec<PathBuf>,
    pub phase: Vec<PathBuf>,
}

pub fn save_gre(gre: &MultiEchoGre, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = GreManifest {
        te_s: gre.te_s().to_vec(),
        tr_s: gre.tr_s(),
        b0_tesla: gre.b0_tesla(),
        b0_dir: gre.b0_dir(),
        magnitude: Vec::new(),
        phase: Vec::new(),
    };
    for e in 0..gre.n_echoes() {
        let m = PathBuf::from(format!("mag_e{}.nii", e + 1));
        let p = PathBuf::from(format!("phase_e{}.nii", e + 1));
        save_volume(&gre.magnitude()[e], dir.join(&m))?;
        save_volume(&gre.phase()[e], dir.join(&p))?;
        manifest.magnitude.push(m);
        manifest.phase.push(p);
    }
    let path = dir.join(GRE_MANIFEST);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a GRE dataset; `path` is the manifest or its directory.
pub fn load_gre(path: &Path, phase_sign: f64) -> Result<MultiEchoGre> {
    let path = if path.is_dir() { path.join(GRE_MANIFEST) } else { path.to_path_buf() };
    let manifest: GreManifest = read_json(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if manifest.magnitude.len() != manifest.phase.len() || manifest.magnitude.len() != manifest.te_s.len() {
        return Err(Error::InvalidParameter(format!(
            "{}: {} echo times, {} magnitude and {} phase files",
            path.display(),
            manifest.te_s.len(),
            manifest.magnitude.len(),
            manifest.phase.len()
        )));
    }
    let magnitude = manifest
        .magnitude
        .iter()
        .map(|p| load_volume_as(base.join(p), Unit::Dimensionless))
        .collect::<Result<Vec<_>>>()?;
    let phase = manifest
        .phase
        .iter()
        .map(|p| load_phase(base.join(p), phase_sign))
        .collect::<Result<Vec<_>>>()?;
    MultiEchoGre::new(manifest.te_s, manifest.tr_s, manifest.b0_tesla, manifest.b0_dir, magnitude, phase)
}

fn gre_files(path: &Path) -> Result<Vec<PathBuf>> {
    let path = if path.is_dir() { path.join(GRE_MANIFEST) } else { path.to_path_buf() };
    let manifest: GreManifest = read_json(&path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut files = vec![path];
    files.extend(manifest.magnitude.iter().chain(&manifest.phase).map(|p| base.join(p)));
    Ok(files)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Subject manifest: `id, age, sex, site` plus one column per map.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectManifest {
    pub subjects: Vec<SubjectEntry>,
    /// Map column names in file order.
    pub map_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEntry {
    pub id: String,
    pub age: f64,
    pub sex: String,
    pub site: String,
    /// Resolved against the manifest's directory.
    pub maps: BTreeMap<String, PathBuf>,
}

const DEMOGRAPHIC_COLUMNS: [&str; 4] = ["id", "age", "sex", "site"];

impl SubjectManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
                Error::InvalidParameter(format!("{}: missing column `{name}`", path.display()))
            })
        };
        let [id, age, sex, site] = [col("id")?, col("age")?, col("sex")?, col("site")?];
        let map_cols: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| !DEMOGRAPHIC_COLUMNS.contains(&h.trim()))
            .map(|(i, h)| (i, h.trim().to_string()))
            .collect();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut subjects = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let age_value = rec[age].trim().parse::<f64>().map_err(|e| {
                Error::InvalidParameter(format!("{}: row {}: age: {e}", path.display(), row + 2))
            })?;
            subjects.push(SubjectEntry {
                id: rec[id].trim().to_string(),
                age: age_value,
                sex: rec[sex].trim().to_string(),
                site: rec[site].trim().to_string(),
                maps: map_cols
                    .iter()
                    .map(|(i, name)| (name.clone(), base.join(rec[*i].trim())))
                    .collect(),
            });
        }
        Ok(Self {
            subjects,
            map_names: map_cols.into_iter().map(|(_, n)| n).collect(),
        })
    }

    fn paths_of(&self, map: &str) -> Result<Vec<PathBuf>> {
        if !self.map_names.iter().any(|m| m == map) {
            return Err(Error::InvalidParameter(format!("manifest has no `{map}` column")));
        }
        Ok(self.subjects.iter().map(|s| s.maps[map].clone()).collect())
    }
}

/// A fully specified stage invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum StageRequest {
    Simulate {
        /// `None` uses the bundled phantom.
        spec: Option<PathBuf>,
        /// Overrides the phantom's noise seed.
        #[serde(default)]
        seed: Option<u64>,
        out_dir: PathBuf,
    },
    UnwrapCombine {
        gre: PathBuf,
        mask: Option<PathBuf>,
        out_dir: PathBuf,
    },
    Vsharp {
        field: PathBuf,
        mask: PathBuf,
        out_dir: PathBuf,
    },
    R2star {
        gre: PathBuf,
        mask: PathBuf,
        out_dir: PathBuf,
    },
    Chisep {
        field: PathBuf,
        r2prime: PathBuf,
        /// Intersected to form the solver mask.
        masks: Vec<PathBuf>,
        /// B0 strength and direction are taken from this GRE manifest unless
        /// given explicitly.
        gre: Option<PathBuf>,
        b0_tesla: Option<f64>,
        b0_dir: Option<[f64; 3]>,
        out_dir: PathBuf,
    },
    Hybrid {
        t1: PathBuf,
        qsm: PathBuf,
        mask: Option<PathBuf>,
        out_dir: PathBuf,
    },
    Atlas {
        manifest: PathBuf,
        mask: PathBuf,
        out_dir: PathBuf,
    },
    Roi {
        manifest: PathBuf,
        /// (label volume, label-name CSV) pairs, made mutually exclusive.
        labels: Vec<(PathBuf, PathBuf)>,
        out_dir: PathBuf,
    },
    Regress {
        /// Two-column CSV (iron, chi_para); `None` uses the reference nuclei.
        input: Option<PathBuf>,
        out_dir: PathBuf,
    },
}

impl StageRequest {
    pub fn name(&self) -> &'static str {
        match self {
            StageRequest::Simulate { .. } => "simulate",
            StageRequest::UnwrapCombine { .. } => "unwrap-combine",
            StageRequest::Vsharp { .. } => "vsharp",
            StageRequest::R2star { .. } => "r2star",
            StageRequest::Chisep { .. } => "chisep",
            StageRequest::Hybrid { .. } => "hybrid",
            StageRequest::Atlas { .. } => "atlas",
            StageRequest::Roi { .. } => "roi",
            StageRequest::Regress { .. } => "regress",
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            StageRequest::Simulate { out_dir, .. }
            | StageRequest::UnwrapCombine { out_dir, .. }
            | StageRequest::Vsharp { out_dir, .. }
            | StageRequest::R2star { out_dir, .. }
            | StageRequest::Chisep { out_dir, .. }
            | StageRequest::Hybrid { out_dir, .. }
            | StageRequest::Atlas { out_dir, .. }
            | StageRequest::Roi { out_dir, .. }
            | StageRequest::Regress { out_dir, .. } => out_dir,
        }
    }

    /// Files named directly by the request.
    fn declared_inputs(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = Vec::new();
        match self {
            StageRequest::Simulate { spec, .. } => v.extend(spec.clone()),
            StageRequest::UnwrapCombine { gre, mask, .. } => {
                v.push(gre.clone());
                v.extend(mask.clone());
            }
            StageRequest::Vsharp { field, mask, .. } => v.extend([field.clone(), mask.clone()]),
            StageRequest::R2star { gre, mask, .. } => v.extend([gre.clone(), mask.clone()]),
            StageRequest::Chisep { field, r2prime, masks, gre, .. } => {
                v.extend([field.clone(), r2prime.clone()]);
                v.extend(masks.iter().cloned());
                v.extend(gre.clone());
            }
            StageRequest::Hybrid { t1, qsm, mask, .. } => {
                v.extend([t1.clone(), qsm.clone()]);
                v.extend(mask.clone());
            }
            StageRequest::Atlas { manifest, mask, .. } => v.extend([manifest.clone(), mask.clone()]),
            StageRequest::Roi { manifest, labels, .. } => {
                v.push(manifest.clone());
                for (a, b) in labels {
                    v.extend([a.clone(), b.clone()]);
                }
            }
            StageRequest::Regress { input, .. } => v.extend(input.clone()),
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub version: String,
    pub request: StageRequest,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
    /// Stage-specific results such as solver convergence.
    pub details: serde_json::Value,
    /// Modelling choices that are not fixed by the input data.
    pub assumptions: Vec<String>,
}

impl Provenance {
    pub fn file_name(stage: &str) -> String {
        format!("{stage}.provenance.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Re-executes the recorded stage with the recorded configuration.
    pub fn replay(&self) -> Result<Provenance> {
        run_stage(&self.request, &self.config)
    }
}

struct StageOutput {
    files: Vec<PathBuf>,
    /// Files read beyond the declared inputs (e.g. GRE echoes, manifest maps).
    extra_inputs: Vec<PathBuf>,
    details: serde_json::Value,
    assumptions: Vec<String>,
}

impl StageOutput {
    fn new(files: Vec<PathBuf>) -> Self {
        Self {
            files,
            extra_inputs: Vec::new(),
            details: serde_json::Value::Null,
            assumptions: Vec::new(),
        }
    }
}

/// Runs one stage and writes `<out_dir>/<stage>.provenance.json`.
pub fn run_stage(request: &StageRequest, cfg: &PipelineConfig) -> Result<Provenance> {
    let stage = request.name();
    cfg.validate().map_err(|e| e.in_stage(stage))?;
    for path in request.declared_inputs() {
        if !path.exists() {
            return Err(Error::MissingInput {
                stage: stage.to_string(),
                path,
            });
        }
    }
    let out_dir = request.out_dir();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e).in_stage(stage))?;
    info!("stage {stage}: start");
    let start = Instant::now();
    let output = execute(request, cfg).map_err(|e| e.in_stage(stage))?;
    let wall_time_s = start.elapsed().as_secs_f64();
    info!("stage {stage}: done in {wall_time_s:.2} s");

    let digest_all = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
        paths
            .iter()
            .map(|p| match p.is_dir() {
                // a GRE directory is identified by its manifest
                true => FileDigest::of(&p.join(GRE_MANIFEST)),
                false => FileDigest::of(p),
            })
            .collect()
    };
    let mut input_paths = request.declared_inputs();
    for p in output.extra_inputs {
        if !input_paths.contains(&p) {
            input_paths.push(p);
        }
    }
    let prov = Provenance {
        stage: stage.to_string(),
        version: VERSION.to_string(),
        request: request.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        inputs: digest_all(&input_paths).map_err(|e| e.in_stage(stage))?,
        outputs: digest_all(&output.files).map_err(|e| e.in_stage(stage))?,
        wall_time_s,
        details: output.details,
        assumptions: output.assumptions,
    };
    write_json(&out_dir.join(Provenance::file_name(stage)), &prov).map_err(|e| e.in_stage(stage))?;
    Ok(prov)
}

fn execute(request: &StageRequest, cfg: &PipelineConfig) -> Result<StageOutput> {
    match request {
        StageRequest::Simulate { spec, seed, out_dir } => simulate_stage(spec.as_deref(), *seed, cfg, out_dir),
        StageRequest::UnwrapCombine { gre, mask, out_dir } => {
            unwrap_combine_stage(gre, mask.as_deref(), cfg, out_dir)
        }
        StageRequest::Vsharp { field, mask, out_dir } => vsharp_stage(field, mask, cfg, out_dir),
        StageRequest::R2star { gre, mask, out_dir } => r2star_stage(gre, mask, cfg, out_dir),
        StageRequest::Chisep {
            field,
            r2prime,
            masks,
            gre,
            b0_tesla,
            b0_dir,
            out_dir,
        } => {
            let (b0, dir) = match (b0_tesla, gre) {
                (Some(b0), _) => (*b0, b0_dir.unwrap_or([0.0, 0.0, 1.0])),
                (None, Some(g)) => {
                    let g = if g.is_dir() { g.join(GRE_MANIFEST) } else { g.clone() };
                    let m: GreManifest = read_json(&g)?;
                    (m.b0_tesla, b0_dir.unwrap_or(m.b0_dir))
                }
                (None, None) => {
                    return Err(Error::InvalidParameter(
                        "chisep needs a GRE manifest or an explicit B0 strength".into(),
                    ))
                }
            };
            chisep_stage(field, r2prime, masks, b0, dir, cfg, out_dir)
        }
        StageRequest::Hybrid { t1, qsm, mask, out_dir } => hybrid_stage(t1, qsm, mask.as_deref(), cfg, out_dir),
        StageRequest::Atlas { manifest, mask, out_dir } => atlas_stage(manifest, mask, cfg, out_dir),
        StageRequest::Roi { manifest, labels, out_dir } => roi_stage(manifest, labels, out_dir),
        StageRequest::Regress { input, out_dir } => regress_stage(input.as_deref(), out_dir),
    }
}

fn save(vol: &ScalarVolume, dir: &Path, name: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    save_volume(vol, &p)?;
    files.push(p);
    Ok(())
}

fn save_m(mask: &BinaryMask, vs: [f64; 3], dir: &Path, name: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    save_mask(mask, vs, &p)?;
    files.push(p);
    Ok(())
}

fn simulate_stage(spec_path: Option<&Path>, seed: Option<u64>, cfg: &PipelineConfig, out: &Path) -> Result<StageOutput> {
    let mut spec = match spec_path {
        Some(p) => PhantomSpec::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => PhantomSpec::bundled(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let b0 = cfg.simulate.b0_tesla;
    let phantom = render_phantom(&spec)?;
    let gre = simulate_gre(
        &phantom.chi_para,
        &phantom.chi_dia,
        &phantom.mask,
        &spec,
        &cfg.simulate.te_s,
        b0,
    )?;
    let gre_dir = out.join("gre");
    let manifest = save_gre(&gre, &gre_dir)?;
    let mut files = gre_files(&manifest)?;
    let vs = spec.voxel_size_mm;
    let qsm = phantom.chi_para.with_data(
        phantom
            .chi_para
            .data()
            .iter()
            .zip(phantom.chi_dia.data())
            .map(|(p, d)| p + d)
            .collect(),
        Unit::Ppb,
    )?;
    let (tissue, r2star) = ground_truth_field(&phantom.chi_para, &phantom.chi_dia, &spec, b0)?;
    save_m(&phantom.mask, vs, out, "mask.nii", &mut files)?;
    save(&phantom.chi_para, out, "truth_chi_para.nii", &mut files)?;
    save(&phantom.chi_dia, out, "truth_chi_dia.nii", &mut files)?;
    save(&qsm, out, "truth_qsm.nii", &mut files)?;
    save(&tissue, out, "truth_tissue_field.nii", &mut files)?;
    save(&background_field(&spec, b0), out, "truth_background_field.nii", &mut files)?;
    save(&r2star, out, "truth_r2star.nii", &mut files)?;
    let spec_copy = out.join("phantom.json");
    write_json(&spec_copy, &spec)?;
    files.push(spec_copy);
    let mut o = StageOutput::new(files);
    o.details = serde_json::json!({
        "mask_voxels": phantom.mask.count(),
        "n_echoes": gre.n_echoes(),
        "seed": spec.seed,
    });
    o.assumptions = vec!["Gaussian magnitude noise; magnitude is zero outside the mask".into()];
    Ok(o)
}

fn unwrap_combine_stage(gre_path: &Path, mask: Option<&Path>, cfg: &PipelineConfig, out: &Path) -> Result<StageOutput> {
    let gre = load_gre(gre_path, cfg.phase.phase_sign)?;
    let unwrapped = gre
        .phase()
        .iter()
        .map(laplacian_unwrap)
        .collect::<Result<Vec<_>>>()?;
    let combined = combine_echoes(&gre, &unwrapped)?;
    let (field, mut valid) = combined.into_parts();
    if let Some(m) = mask {
        valid = valid.and(&load_mask(m)?)?;
    }
    let field = FieldMap::new(field, valid)?;
    let mut files = Vec::new();
    let vs = gre.voxel_size_mm();
    save(field.volume(), out, "field.nii", &mut files)?;
    save_m(field.mask(), vs, out, "field_mask.nii", &mut files)?;
    let mut o = StageOutput::new(files);
    o.extra_inputs = gre_files(gre_path)?;
    o.details = serde_json::json!({ "mask_voxels": field.mask().count() });
    o.assumptions = vec![
        format!("phase sign {}", cfg.phase.phase_sign),
        "echo weights (magnitude * TE)^2".into(),
    ];
    Ok(o)
}

fn vsharp_stage(field_path: &Path, mask_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<StageOutput> {
    let field = load_volume_as(field_path, Unit::Hz)?;
    let mask = load_mask(mask_path)?;
    let fm = FieldMap::new(field.clone(), mask.clone())?;
    let (tissue, eroded) = vsharp(&fm, &mask, &cfg.vsharp)?;
    let mut files = Vec::new();
    save(tissue.volume(), out, "tissue_field.nii", &mut files)?;
    save_m(&eroded, field.voxel_size_mm(), out, "vsharp_mask.nii", &mut files)?;
    let mut o = StageOutput::new(files);
    o.details = serde_json::json!({
        "radii_mm": cfg.vsharp.radii(field.voxel_size_mm()),
        "mask_voxels": eroded.count(),
    });
    Ok(o)
}

fn r2star_stage(gre_path: &Path, mask_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<StageOutput> {
    let gre = load_gre(gre_path, cfg.phase.phase_sign)?;
    let mask = load_mask(mask_path)?;
    let fit = fit_r2star(&gre, &mask)?;
    let r2p = r2prime_from_r2star(&fit.r2star, cfg.relaxometry.r2_baseline)?;
    let vs = gre.voxel_size_mm();
    let mut files = Vec::new();
    save(&fit.r2star, out, "r2star.nii", &mut files)?;
    save(&fit.s0, out, "s0.nii", &mut files)?;
    save(&fit.residual_rms, out, "r2star_residual.nii", &mut files)?;
    save(&r2p, out, "r2prime.nii", &mut files)?;
    save_m(&fit.valid, vs, out, "r2star_valid.nii", &mut files)?;
    let mut o = StageOutput::new(files);
    o.extra_inputs = gre_files(gre_path)?;
    o.details = serde_json::json!({
        "valid_voxels": fit.valid.count(),
        "masked_voxels": mask.count(),
    });
    o.assumptions = vec![format!(
        "constant R2 baseline {} 1/s subtracted to form R2'",
        cfg.relaxometry.r2_baseline
    )];
    Ok(o)
}

fn chisep_stage(
    field_path: &Path,
    r2p_path: &Path,
    masks: &[PathBuf],
    b0_tesla: f64,
    b0_dir: [f64; 3],
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<StageOutput> {
    let field = load_volume_as(field_path, Unit::Hz)?;
    let r2p = load_volume_as(r2p_path, Unit::PerSecond)?;
    let mut mask = BinaryMask::full(field.dims());
    for m in masks {
        mask = mask.and(&load_mask(m)?)?;
    }
    let kernel = make_dipole_kernel(field.dims(), field.voxel_size_mm(), b0_dir)?;
    let fm = FieldMap::new(field, mask.clone())?;
    let res = separate(&fm, &r2p, &mask, &kernel, b0_tesla, &cfg.chisep)?;
    let mut files = Vec::new();
    save(&res.chi_para, out, "chi_para.nii", &mut files)?;
    save(&res.chi_dia, out, "chi_dia.nii", &mut files)?;
    save(&res.qsm, out, "qsm.nii", &mut files)?;
    let mut o = StageOutput::new(files);
    o.details = serde_json::json!({
        "iterations": res.iterations,
        "converged": res.converged,
        "final_objective": res.final_objective,
        "initial_objective": res.objective_history.first(),
        "stats": res.stats,
        "b0_tesla": b0_tesla,
        "b0_dir": b0_dir,
        "mask_voxels": mask.count(),
    });
    o.assumptions = vec![
        format!(
            "relaxometric constants dr_para {} Hz/ppm, dr_dia {} Hz/ppm",
            cfg.chisep.dr_para, cfg.chisep.dr_dia
        ),
        format!("R2' built with constant R2 baseline {} 1/s", cfg.relaxometry.r2_baseline),
    ];
    Ok(o)
}

fn hybrid_stage(t1_path: &Path, qsm_path: &Path, mask: Option<&Path>, cfg: &PipelineConfig, out: &Path) -> Result<StageOutput> {
    let t1 = load_volume(t1_path)?;
    let qsm = load_volume_as(qsm_path, Unit::Ppb)?;
    let mask = mask.map(load_mask).transpose()?;
    let mut assumptions = Vec::new();
    let normalized = match &cfg.atlas.decile_targets {
        DecileSource::Fixed(t) => normalize_deciles(&t1, mask.as_ref(), t)?,
        DecileSource::Cohort => {
            assumptions.push("single subject: decile normalization skipped (cohort targets)".into());
            t1
        }
    };
    let scaled = scale_to_range(&normalized, 0.0, 255.0)?;
    let hybrid = hybrid_image(&scaled, &qsm)?;
    let mut files = Vec::new();
    save(&scaled, out, "t1_norm.nii", &mut files)?;
    save(&hybrid, out, "hybrid.nii", &mut files)?;
    let mut o = StageOutput::new(files);
    o.assumptions = assumptions;
    Ok(o)
}

fn atlas_stage(manifest_path: &Path, mask_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<StageOutput> {
    let manifest = SubjectManifest::load(manifest_path)?;
    let mask = load_mask(mask_path)?;
    let mut files = Vec::new();
    let mut extra = Vec::new();
    let mut details = serde_json::Map::new();

    let mut maps: Vec<(String, Vec<ScalarVolume>)> = Vec::new();
    for name in manifest.map_names.iter().filter(|n| n.as_str() != "t1") {
        let paths = manifest.paths_of(name)?;
        extra.extend(paths.iter().cloned());
        let vols = paths.iter().map(load_volume).collect::<Result<Vec<_>>>()?;
        maps.push((name.clone(), vols));
    }
    if manifest.map_names.iter().any(|n| n == "t1") {
        let paths = manifest.paths_of("t1")?;
        extra.extend(paths.iter().cloned());
        let t1s = paths.iter().map(load_volume).collect::<Result<Vec<_>>>()?;
        let targets = match &cfg.atlas.decile_targets {
            DecileSource::Fixed(t) => t.clone(),
            DecileSource::Cohort => cohort_target_deciles(&t1s, Some(&mask))?.to_vec(),
        };
        details.insert("decile_targets".into(), serde_json::json!(targets));
        let qsm = maps.iter().find(|(n, _)| n == "qsm").map(|(_, v)| v.clone());
        let mut hybrids = Vec::new();
        let hybrid_dir = out.join("hybrid");
        for (s, t1) in t1s.iter().enumerate() {
            let scaled = scale_to_range(&normalize_deciles(t1, Some(&mask), &targets)?, 0.0, 255.0)?;
            if let Some(q) = &qsm {
                let h = hybrid_image(&scaled, &q[s])?;
                fs::create_dir_all(&hybrid_dir).map_err(|e| Error::io(&hybrid_dir, e))?;
                save(&h, &hybrid_dir, &format!("{}.nii", manifest.subjects[s].id), &mut files)?;
                hybrids.push(h);
            }
        }
        if !hybrids.is_empty() {
            maps.push(("hybrid".into(), hybrids));
        }
    }
    for (name, vols) in &maps {
        let bundle = aggregate(vols, &mask)?;
        let vs = bundle.mean.voxel_size_mm();
        save(&bundle.mean, out, &format!("{name}_mean.nii"), &mut files)?;
        save(&bundle.per_voxel_sd, out, &format!("{name}_sd.nii"), &mut files)?;
        save(&bundle.rsd, out, &format!("{name}_rsd.nii"), &mut files)?;
        save_m(&bundle.rsd_undefined, vs, out, &format!("{name}_rsd_undefined.nii"), &mut files)?;
        details.insert(
            name.clone(),
            serde_json::json!({ "rsd_undefined_voxels": bundle.rsd_undefined.count() }),
        );
    }
    let n = manifest.subjects.len() as f64;
    let ages: Vec<f64> = manifest.subjects.iter().map(|s| s.age).collect();
    let age_mean = ages.iter().sum::<f64>() / n;
    let mut by_sex: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_site: BTreeMap<String, usize> = BTreeMap::new();
    for s in &manifest.subjects {
        *by_sex.entry(s.sex.clone()).or_default() += 1;
        *by_site.entry(s.site.clone()).or_default() += 1;
    }
    details.insert(
        "cohort".into(),
        serde_json::json!({
            "n_subjects": manifest.subjects.len(),
            "age_mean": age_mean,
            "age_min": ages.iter().cloned().fold(f64::INFINITY, f64::min),
            "age_max": ages.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            "sex": by_sex,
            "site": by_site,
        }),
    );
    let mut o = StageOutput::new(files);
    o.extra_inputs = extra;
    o.details = serde_json::Value::Object(details);
    o.assumptions = vec![
        "sample SD (N-1); rSD undefined where |mean| < 1e-6".into(),
        "all subjects averaged inside the supplied common mask".into(),
    ];
    Ok(o)
}

fn roi_stage(manifest_path: &Path, labels: &[(PathBuf, PathBuf)], out: &Path) -> Result<StageOutput> {
    let manifest = SubjectManifest::load(manifest_path)?;
    let label_sets = labels
        .iter()
        .map(|(v, n)| load_labels(v, n))
        .collect::<Result<Vec<_>>>()?;
    let exclusive = make_exclusive(&label_sets)?;
    let para = manifest.paths_of("chi_para")?;
    let dia = manifest.paths_of("chi_dia")?;
    let qsm = manifest.paths_of("qsm")?;
    let mut extra = Vec::new();
    let mut subjects = Vec::new();
    for s in 0..manifest.subjects.len() {
        extra.extend([para[s].clone(), dia[s].clone(), qsm[s].clone()]);
        subjects.push(SubjectMedians::extract(
            &load_volume(&para[s])?,
            &load_volume(&dia[s])?,
            &load_volume(&qsm[s])?,
            &exclusive,
        )?);
    }
    let table = RoiTable::from_subjects(exclusive.names(), &subjects)?;
    let csv_path = out.join("roi_table.csv");
    table.save_csv(&csv_path)?;
    let mut o = StageOutput::new(vec![csv_path]);
    o.extra_inputs = extra;
    o.details = serde_json::json!({ "rois": table.rows.len(), "subjects": subjects.len() });
    o.assumptions = vec![
        "voxels claimed by more than one label set are excluded from all of them".into(),
        "per-subject ROI medians; population mean and sample SD".into(),
    ];
    Ok(o)
}

fn regress_stage(input: Option<&Path>, out: &Path) -> Result<StageOutput> {
    let mut assumptions = Vec::new();
    let (x, y) = match input {
        Some(p) => read_regression_csv(p)?,
        None => {
            assumptions.push(
                "reference nuclei: caudate, putamen, globus pallidus, substantia nigra, red nucleus".into(),
            );
            (
                IRON_NUCLEI.iter().map(|r| r.1).collect(),
                IRON_NUCLEI.iter().map(|r| r.2).collect(),
            )
        }
    };
    let result = fit_regression(&x, &y)?;
    let path = out.join("regression.json");
    write_json(&path, &result)?;
    assumptions.push("ordinary least squares, unweighted".into());
    let mut o = StageOutput::new(vec![path]);
    o.details = serde_json::to_value(&result)?;
    o.assumptions = assumptions;
    Ok(o)
}

/// simulate → unwrap-combine → vsharp → r2star → chisep into `out_dir`.
pub fn run_all(spec: Option<&Path>, seed: Option<u64>, cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<Provenance>> {
    let o = |p: &str| out_dir.join(p);
    let requests = [
        StageRequest::Simulate {
            spec: spec.map(Path::to_path_buf),
            seed,
            out_dir: out_dir.to_path_buf(),
        },
        StageRequest::UnwrapCombine {
            gre: o("gre/gre.json"),
            mask: Some(o("mask.nii")),
            out_dir: out_dir.to_path_buf(),
        },
        StageRequest::Vsharp {
            field: o("field.nii"),
            mask: o("field_mask.nii"),
            out_dir: out_dir.to_path_buf(),
        },
        StageRequest::R2star {
            gre: o("gre/gre.json"),
            mask: o("mask.nii"),
            out_dir: out_dir.to_path_buf(),
        },
        StageRequest::Chisep {
            field: o("tissue_field.nii"),
            r2prime: o("r2prime.nii"),
            masks: vec![o("vsharp_mask.nii"), o("r2star_valid.nii")],
            gre: Some(o("gre/gre.json")),
            b0_tesla: None,
            b0_dir: None,
            out_dir: out_dir.to_path_buf(),
        },
    ];
    requests.iter().map(|r| run_stage(r, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gre_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = PhantomSpec::bundled();
        spec.dims = [12, 12, 12];
        spec.shapes.clear();
        spec.noise_sigma = 0.01;
        let ph = render_phantom(&spec).unwrap();
        let gre = simulate_gre(&ph.chi_para, &ph.chi_dia, &ph.mask, &spec, &[0.005, 0.01], 3.0).unwrap();
        let path = save_gre(&gre, dir.path()).unwrap();
        assert_eq!(load_gre(&path, 1.0).unwrap(), gre);
        assert_eq!(load_gre(dir.path(), 1.0).unwrap(), gre);
        let flipped = load_gre(&path, -1.0).unwrap();
        assert_eq!(flipped.phase()[1].data()[100], -gre.phase()[1].data()[100]);
    }

    #[test]
    fn missing_input_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let req = StageRequest::Vsharp {
            field: dir.path().join("nope.nii"),
            mask: dir.path().join("mask.nii"),
            out_dir: dir.path().to_path_buf(),
        };
        match run_stage(&req, &PipelineConfig::default()) {
            Err(Error::MissingInput { stage, path }) => {
                assert_eq!(stage, "vsharp");
                assert!(path.ends_with("nope.nii"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn regress_stage_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let req = StageRequest::Regress {
            input: None,
            out_dir: dir.path().to_path_buf(),
        };
        let prov = run_stage(&req, &PipelineConfig::default()).unwrap();
        let text = fs::read_to_string(dir.path().join("regression.json")).unwrap();
        let r: crate::roi::RegressionResult = serde_json::from_str(&text).unwrap();
        assert!((r.slope - 6.8224).abs() < 1e-3);
        let loaded = Provenance::load(&dir.path().join("regress.provenance.json")).unwrap();
        assert_eq!(loaded.request, req);
        let again = loaded.replay().unwrap();
        assert_eq!(again.outputs, prov.outputs);
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "id,chi_para,age,sex,site,qsm\ns1,a.nii,30,F,A,b.nii\ns2,c.nii,41.5,M,B,d.nii\n").unwrap();
        let m = SubjectManifest::load(&p).unwrap();
        assert_eq!(m.map_names, vec!["chi_para", "qsm"]);
        assert_eq!(m.subjects[1].age, 41.5);
        assert_eq!(m.subjects[0].maps["qsm"], dir.path().join("b.nii"));
        assert!(m.paths_of("chi_dia").is_err());
        fs::write(&p, "id,age,sex\ns1,30,F\n").unwrap();
        assert!(SubjectManifest::load(&p).is_err());
    }
}
