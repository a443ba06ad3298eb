//! Python bindings. The module is importable as `instpaint`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use instpaint::config::Config;
use instpaint::io::{self, GroundTruth, SceneData};
use instpaint::metrics::evaluate;
use instpaint::pipeline::{self, StageOutput};
use instpaint::projection::{project_point, Vec3};
use instpaint::refiner::{self, ClusterParams};
use instpaint::scene::{self, AugmentedPoint};
use instpaint::synth::generate_scene;
use instpaint::{fp_augment, Error};

fn py_err(e: Error) -> PyErr {
    match root(&e) {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn root(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => root(source),
        other => other,
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

type Row = (f64, f64, f64, f64, u32, f64, f64, f64, u32);
type StackedRow = (f64, f64, f64, f64, f64);

fn row(p: &AugmentedPoint) -> Row {
    (p.x, p.y, p.z, p.r, p.s, p.cx, p.cy, p.cz, p.instance_id)
}

fn from_row(r: &Row) -> AugmentedPoint {
    AugmentedPoint {
        x: r.0,
        y: r.1,
        z: r.2,
        r: r.3,
        s: r.4,
        cx: r.5,
        cy: r.6,
        cz: r.7,
        instance_id: r.8,
    }
}

/// Run configuration; `overrides` are `key=value` strings.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: Config::from_toml(toml, &overrides).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: Config::load(Some(&path), &overrides).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

/// A scene on disk or in memory, with ground truth when synthetic.
#[pyclass(name = "Scene")]
struct PyScene {
    data: SceneData,
    truth: Option<GroundTruth>,
}

#[pymethods]
impl PyScene {
    /// Generates a synthetic scene from the config's `rig` and `synth`
    /// sections.
    #[staticmethod]
    #[pyo3(signature = (config = None, seed = None))]
    fn synthesize(config: Option<PyConfig>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        let scene = generate_scene(&cfg.scene_spec(), seed.unwrap_or(cfg.seed)).map_err(py_err)?;
        Ok(Self {
            data: scene.scene_data(),
            truth: Some(scene.ground_truth()),
        })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        let data = io::read_scene(&dir).map_err(py_err)?;
        let truth = if dir.join("gt.json").exists() {
            Some(io::read_ground_truth(&dir).map_err(py_err)?)
        } else {
            None
        };
        Ok(Self { data, truth })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        io::write_scene(&dir, &self.data).map_err(py_err)?;
        if let Some(gt) = &self.truth {
            io::write_ground_truth(&dir, gt).map_err(py_err)?;
        }
        Ok(())
    }

    #[getter]
    fn camera_count(&self) -> usize {
        self.data.rig.camera_count()
    }

    #[getter]
    fn sweep_count(&self) -> usize {
        self.data.sweeps.len()
    }

    #[getter]
    fn has_ground_truth(&self) -> bool {
        self.truth.is_some()
    }

    /// Stacked keyframe cloud as `(x, y, z, r, sweep_offset)` tuples.
    fn points(&self) -> PyResult<Vec<StackedRow>> {
        let pts = scene::stack_sweeps(&self.data.sweeps, self.data.keyframe, &self.data.rig).map_err(py_err)?;
        Ok(pts.iter().map(|p| (p.x, p.y, p.z, p.r, p.sweep_offset)).collect())
    }

    /// Ground-truth boxes as dicts, empty without ground truth.
    fn boxes(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.truth.as_ref().map(|g| g.boxes.clone()).unwrap_or_default())
    }

    /// Paints and refines with the config's `painter` and `refiner`
    /// sections.
    #[pyo3(signature = (config = None))]
    fn run(&self, config: Option<PyConfig>) -> PyResult<PyStageResult> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        let out = pipeline::run_stages(&self.data, &cfg.painter, &cfg.refiner).map_err(py_err)?;
        Ok(PyStageResult { out })
    }

    /// Metrics dict for `result`; raises when the scene has no ground truth.
    fn evaluate(&self, py: Python<'_>, result: &PyStageResult) -> PyResult<Py<PyAny>> {
        let gt = self
            .truth
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("scene has no ground truth"))?;
        let r = &result.out.refine;
        let m = evaluate(&result.out.augmented, &r.priors, r.evicted, gt).map_err(py_err)?;
        to_py(py, &m)
    }
}

/// Output of paint and refine.
#[pyclass(name = "Result")]
struct PyStageResult {
    out: StageOutput,
}

#[pymethods]
impl PyStageResult {
    #[getter]
    fn evicted(&self) -> usize {
        self.out.refine.evicted
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.out.refine.labels.clone()
    }

    fn priors(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.out.refine.priors)
    }

    fn raw_priors(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.out.paint.priors)
    }

    /// Augmented points as `(x, y, z, r, s, cx, cy, cz, instance_id)`.
    fn augmented(&self) -> Vec<Row> {
        self.out.augmented.iter().map(row).collect()
    }

    fn write_augmented(&self, path: PathBuf) -> PyResult<()> {
        io::write_augmented(&self.out.augmented, &path).map_err(py_err)
    }
}

/// Runs the full pipeline on `config.io.scene_dir`; returns metrics or
/// `None` when the scene has no ground truth.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    let report = pipeline::run_pipeline(&config.inner).map_err(py_err)?;
    to_py(py, &report.metrics)
}

/// DBSCAN cluster per point, `None` for noise.
#[pyfunction]
fn dbscan(points: Vec<[f64; 3]>, eps: f64, min_pts: usize) -> PyResult<Vec<Option<usize>>> {
    let params = ClusterParams::new(eps, min_pts).map_err(py_err)?;
    let pts: Vec<Vec3> = points.into_iter().map(Vec3::from).collect();
    Ok(refiner::dbscan(&pts, &params).assignment)
}

/// Index of the member minimizing total distance to the others.
#[pyfunction]
fn medoid(points: Vec<[f64; 3]>) -> PyResult<usize> {
    let pts: Vec<Vec3> = points.into_iter().map(Vec3::from).collect();
    refiner::medoid(&pts).map_err(py_err)
}

/// BEV IoU of two `(center, size, yaw)` boxes.
#[pyfunction]
fn bev_iou(a: ([f64; 3], [f64; 3], f64), b: ([f64; 3], [f64; 3], f64)) -> f64 {
    let a = scene::Box3D::new(a.0, a.1, a.2, 1);
    let b = scene::Box3D::new(b.0, b.1, b.2, 1);
    fp_augment::bev_iou(&a, &b)
}

/// `(camera, u, v, depth)` for every camera of the scene's rig seeing
/// ego-frame point `p`.
#[pyfunction]
fn project(scene: &PyScene, p: [f64; 3]) -> Vec<(usize, f64, f64, f64)> {
    let p = Vec3::from(p);
    scene
        .data
        .rig
        .cameras
        .iter()
        .enumerate()
        .filter_map(|(j, c)| project_point(&p, c, instpaint::projection::DEFAULT_Z_MIN).map(|h| (j, h.u, h.v, h.depth)))
        .collect()
}

#[pyfunction]
fn read_augmented(path: PathBuf) -> PyResult<Vec<Row>> {
    Ok(io::read_augmented(&path).map_err(py_err)?.iter().map(row).collect())
}

#[pyfunction]
fn write_augmented(points: Vec<Row>, path: PathBuf) -> PyResult<()> {
    let pts: Vec<AugmentedPoint> = points.iter().map(from_row).collect();
    io::write_augmented(&pts, &path).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "instpaint")]
fn instpaint_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyStageResult>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    m.add_function(wrap_pyfunction!(medoid, m)?)?;
    m.add_function(wrap_pyfunction!(bev_iou, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(read_augmented, m)?)?;
    m.add_function(wrap_pyfunction!(write_augmented, m)?)?;
    Ok(())
}
