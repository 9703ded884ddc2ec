//! Python bindings for chisep-core.
//!
//! Volumes cross the boundary as flat x-fastest lists plus their dims, so the
//! module has no NumPy build dependency; `numpy.asarray(v.data).reshape(
//! v.dims[::-1])` gives a z-major array.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use chisep_core::atlas;
use chisep_core::config::PipelineConfig;
use chisep_core::dipole::{self, RelaxometricConstants};
use chisep_core::io;
use chisep_core::phase::{self, FieldMap, VsharpConfig};
use chisep_core::pipeline::{self, StageRequest};
use chisep_core::relaxometry;
use chisep_core::roi;
use chisep_core::separation::{self, SolverConfig};
use chisep_core::simulator::{self, PhantomSpec};
use chisep_core::volume::{BinaryMask, ScalarVolume, Unit};
use chisep_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingInput { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_unit(unit: &str) -> PyResult<Unit> {
    unit.parse::<Unit>()
        .map_err(|_| PyValueError::new_err(format!("unknown unit `{unit}`")))
}

#[pyclass(name = "Volume", module = "chisep", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: ScalarVolume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, voxel_size_mm, data, unit = "dimensionless"))]
    fn new(dims: [usize; 3], voxel_size_mm: [f64; 3], data: Vec<f64>, unit: &str) -> PyResult<Self> {
        let inner = ScalarVolume::new(dims, voxel_size_mm, data, parse_unit(unit)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (dims, voxel_size_mm, unit = "dimensionless"))]
    fn zeros(dims: [usize; 3], voxel_size_mm: [f64; 3], unit: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ScalarVolume::zeros(dims, voxel_size_mm, parse_unit(unit)?),
        })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn voxel_size_mm(&self) -> [f64; 3] {
        self.inner.voxel_size_mm()
    }

    #[getter]
    fn unit(&self) -> &'static str {
        self.inner.unit().as_str()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f64> {
        let [nx, ny, nz] = self.inner.dims();
        if i >= nx || j >= ny || k >= nz {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(i, j, k))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Volume(dims={:?}, voxel_size_mm={:?}, unit='{}')",
            self.inner.dims(),
            self.inner.voxel_size_mm(),
            self.inner.unit()
        )
    }
}

#[pyclass(name = "Mask", module = "chisep", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(dims: [usize; 3], data: Vec<bool>) -> PyResult<Self> {
        Ok(Self {
            inner: BinaryMask::new(dims, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn full(dims: [usize; 3]) -> Self {
        Self {
            inner: BinaryMask::full(dims),
        }
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn data(&self) -> Vec<bool> {
        self.inner.data().to_vec()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn erode(&self, voxel_size_mm: [f64; 3], radius_mm: f64) -> PyResult<Self> {
        Ok(Self {
            inner: chisep_core::volume::erode_mask(&self.inner, voxel_size_mm, radius_mm).map_err(py_err)?,
        })
    }
}

fn wrap(v: ScalarVolume) -> PyVolume {
    PyVolume { inner: v }
}

#[pyfunction]
fn load_volume(path: PathBuf) -> PyResult<PyVolume> {
    io::load_volume(path).map(wrap).map_err(py_err)
}

#[pyfunction]
fn save_volume(volume: &PyVolume, path: PathBuf) -> PyResult<()> {
    io::save_volume(&volume.inner, path).map_err(py_err)
}

#[pyfunction]
fn load_mask(path: PathBuf) -> PyResult<PyMask> {
    Ok(PyMask {
        inner: io::load_mask(path).map_err(py_err)?,
    })
}

#[pyfunction]
fn laplacian_unwrap(phase: &PyVolume) -> PyResult<PyVolume> {
    phase::laplacian_unwrap(&phase.inner).map(wrap).map_err(py_err)
}

/// Returns (tissue_field, eroded_mask).
#[pyfunction]
#[pyo3(signature = (field, mask, r_max_mm = 12.0, r_min_mm = None, tsvd_threshold = 0.05))]
fn vsharp(
    field: &PyVolume,
    mask: &PyMask,
    r_max_mm: f64,
    r_min_mm: Option<f64>,
    tsvd_threshold: f64,
) -> PyResult<(PyVolume, PyMask)> {
    let fm = FieldMap::new(field.inner.clone(), mask.inner.clone()).map_err(py_err)?;
    let cfg = VsharpConfig {
        r_max_mm,
        r_min_mm,
        tsvd_threshold,
    };
    let (tissue, eroded) = phase::vsharp(&fm, &mask.inner, &cfg).map_err(py_err)?;
    Ok((wrap(tissue.into_parts().0), PyMask { inner: eroded }))
}

/// Mono-exponential fit of one voxel; returns (s0, r2star).
#[pyfunction]
fn fit_decay(te_s: Vec<f64>, magnitude: Vec<f64>) -> PyResult<(f64, f64)> {
    if te_s.len() != magnitude.len() || te_s.len() < 2 {
        return Err(PyValueError::new_err("need matching te_s and magnitude of length >= 2"));
    }
    let fit = relaxometry::fit_decay(&te_s, &magnitude);
    Ok((fit.s0, fit.r2star))
}

#[pyfunction]
#[pyo3(signature = (chi_total, b0_tesla = 3.0, b0_dir = [0.0, 0.0, 1.0]))]
fn forward_field(chi_total: &PyVolume, b0_tesla: f64, b0_dir: [f64; 3]) -> PyResult<PyVolume> {
    let v = &chi_total.inner;
    let kernel = dipole::make_dipole_kernel(v.dims(), v.voxel_size_mm(), b0_dir).map_err(py_err)?;
    dipole::forward_field(v, &kernel, b0_tesla).map(wrap).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (chi_para, chi_dia, dr_para = 100.0, dr_dia = 100.0))]
fn forward_r2prime(chi_para: &PyVolume, chi_dia: &PyVolume, dr_para: f64, dr_dia: f64) -> PyResult<PyVolume> {
    dipole::forward_r2prime(&chi_para.inner, &chi_dia.inner, RelaxometricConstants { dr_para, dr_dia })
        .map(wrap)
        .map_err(py_err)
}

/// Returns a dict with chi_para, chi_dia, qsm volumes and convergence data.
#[pyfunction]
#[pyo3(signature = (field, r2prime, mask, b0_tesla = 3.0, b0_dir = [0.0, 0.0, 1.0], max_iter = 500, tol = 1e-6, lambda_grad = 1e-3, lambda_r2p = 1.0, dr_para = 100.0, dr_dia = 100.0))]
#[allow(clippy::too_many_arguments)]
fn separate<'py>(
    py: Python<'py>,
    field: &PyVolume,
    r2prime: &PyVolume,
    mask: &PyMask,
    b0_tesla: f64,
    b0_dir: [f64; 3],
    max_iter: usize,
    tol: f64,
    lambda_grad: f64,
    lambda_r2p: f64,
    dr_para: f64,
    dr_dia: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let f = &field.inner;
    let kernel = dipole::make_dipole_kernel(f.dims(), f.voxel_size_mm(), b0_dir).map_err(py_err)?;
    let fm = FieldMap::new(f.clone(), mask.inner.clone()).map_err(py_err)?;
    let cfg = SolverConfig {
        dr_para,
        dr_dia,
        lambda_r2p,
        lambda_grad,
        max_iter,
        tol,
        ..SolverConfig::default()
    };
    let res = py
        .detach(|| separation::separate(&fm, &r2prime.inner, &mask.inner, &kernel, b0_tesla, &cfg))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("chi_para", wrap(res.chi_para))?;
    d.set_item("chi_dia", wrap(res.chi_dia))?;
    d.set_item("qsm", wrap(res.qsm))?;
    d.set_item("iterations", res.iterations)?;
    d.set_item("converged", res.converged)?;
    d.set_item("final_objective", res.final_objective)?;
    Ok(d)
}

/// Renders a phantom from its JSON spec (the bundled phantom when omitted);
/// returns (chi_para, chi_dia, mask).
#[pyfunction]
#[pyo3(signature = (spec_json = None))]
fn render_phantom(spec_json: Option<&str>) -> PyResult<(PyVolume, PyVolume, PyMask)> {
    let spec = match spec_json {
        Some(s) => PhantomSpec::from_json(s).map_err(py_err)?,
        None => PhantomSpec::bundled(),
    };
    let p = simulator::render_phantom(&spec).map_err(py_err)?;
    Ok((wrap(p.chi_para), wrap(p.chi_dia), PyMask { inner: p.mask }))
}

#[pyfunction]
fn bundled_phantom_spec() -> PyResult<String> {
    serde_json::to_string_pretty(&PhantomSpec::bundled()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn hybrid_image(t1_norm: &PyVolume, qsm: &PyVolume) -> PyResult<PyVolume> {
    atlas::hybrid_image(&t1_norm.inner, &qsm.inner).map(wrap).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (image, targets, mask = None))]
fn normalize_deciles(image: &PyVolume, targets: Vec<f64>, mask: Option<&PyMask>) -> PyResult<PyVolume> {
    atlas::normalize_deciles(&image.inner, mask.map(|m| &m.inner), &targets)
        .map(wrap)
        .map_err(py_err)
}

/// Returns (mean, sd, rsd, rsd_undefined).
#[pyfunction]
fn aggregate(maps: Vec<PyVolume>, mask: &PyMask) -> PyResult<(PyVolume, PyVolume, PyVolume, PyMask)> {
    let vols: Vec<ScalarVolume> = maps.into_iter().map(|m| m.inner).collect();
    let b = atlas::aggregate(&vols, &mask.inner).map_err(py_err)?;
    Ok((
        wrap(b.mean),
        wrap(b.per_voxel_sd),
        wrap(b.rsd),
        PyMask { inner: b.rsd_undefined },
    ))
}

#[pyfunction]
fn fit_regression<'py>(py: Python<'py>, x: Vec<f64>, y: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = roi::fit_regression(&x, &y).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("n", r.n)?;
    d.set_item("slope", r.slope)?;
    d.set_item("intercept", r.intercept)?;
    d.set_item("r_squared", r.r_squared)?;
    d.set_item("ci95_slope", r.ci95_slope)?;
    d.set_item("ci95_intercept", r.ci95_intercept)?;
    d.set_item("p_slope", r.p_slope)?;
    d.set_item("p_intercept", r.p_intercept)?;
    Ok(d)
}

/// Reference (name, iron mg/100 g, chi_para ppb) triples for the nuclei fit.
#[pyfunction]
fn iron_reference() -> Vec<(&'static str, f64, f64)> {
    roi::IRON_NUCLEI.to_vec()
}

/// Runs one pipeline stage. `request_json` is a stage request such as
/// `{"stage": "regress", "input": null, "out_dir": "out"}`; returns the
/// provenance record as JSON.
#[pyfunction]
#[pyo3(signature = (request_json, config_toml = None))]
fn run_stage(py: Python<'_>, request_json: &str, config_toml: Option<&str>) -> PyResult<String> {
    let request: StageRequest =
        serde_json::from_str(request_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = match config_toml {
        Some(t) => PipelineConfig::from_toml_str(t).map_err(py_err)?,
        None => PipelineConfig::default(),
    };
    let prov = py.detach(|| pipeline::run_stage(&request, &cfg)).map_err(py_err)?;
    serde_json::to_string(&prov).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// simulate through chisep into `out_dir`; returns the list of output paths.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_path = None, seed = None, config_toml = None))]
fn run_all(
    py: Python<'_>,
    out_dir: PathBuf,
    spec_path: Option<PathBuf>,
    seed: Option<u64>,
    config_toml: Option<&str>,
) -> PyResult<Vec<PathBuf>> {
    let cfg = match config_toml {
        Some(t) => PipelineConfig::from_toml_str(t).map_err(py_err)?,
        None => PipelineConfig::default(),
    };
    let provs = py
        .detach(|| pipeline::run_all(spec_path.as_deref(), seed, &cfg, &out_dir))
        .map_err(py_err)?;
    Ok(provs
        .into_iter()
        .flat_map(|p| p.outputs.into_iter().map(|o| o.path))
        .collect())
}

#[pymodule]
fn chisep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", pipeline::VERSION)?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(load_volume, m)?)?;
    m.add_function(wrap_pyfunction!(save_volume, m)?)?;
    m.add_function(wrap_pyfunction!(load_mask, m)?)?;
    m.add_function(wrap_pyfunction!(laplacian_unwrap, m)?)?;
    m.add_function(wrap_pyfunction!(vsharp, m)?)?;
    m.add_function(wrap_pyfunction!(fit_decay, m)?)?;
    m.add_function(wrap_pyfunction!(forward_field, m)?)?;
    m.add_function(wrap_pyfunction!(forward_r2prime, m)?)?;
    m.add_function(wrap_pyfunction!(separate, m)?)?;
    m.add_function(wrap_pyfunction!(render_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_phantom_spec, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_image, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_deciles, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_regression, m)?)?;
    m.add_function(wrap_pyfunction!(iron_reference, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    Ok(())
}
