//! Python bindings: dataset generation and I/O, sampling utilities, the
//! gradient check, and a `Trainer` wrapping pre-training, probing and
//! inference.

use std::path::PathBuf;

use ::latent_dyn as core;
use core::cli::{parse_config, CliConfig};
use core::data::{self as data, CameraIntrinsics, DepthImage, Point, PointCloud, Trajectory};
use core::dynamics::{infer_latent_action, Direction};
use core::encoder::encode;
use core::error::Error;
use core::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainState};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::BadMagic { .. } | Error::Version { .. } | Error::Truncated(_) | Error::Malformed(_) => {
            PyIOError::new_err(e.to_string())
        }
        Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_json(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_json(py: Python<'_>, v: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Resolves flat config keys on top of `base`, optionally under a key prefix.
fn resolve(py: Python<'_>, base: CliConfig, overrides: Option<&Bound<'_, PyDict>>, prefix: &str) -> PyResult<CliConfig> {
    let mut pairs = Vec::new();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            pairs.push((format!("{prefix}{key}"), to_json(py, &v)?));
        }
    }
    parse_config(&base, None, &pairs).map_err(err)
}

fn cloud(points: Vec<Point>) -> PyResult<PointCloud> {
    PointCloud::new(points).map_err(err)
}

/// One recorded episode: point-cloud frames and the pushes between them.
#[pyclass(name = "Trajectory", module = "latent_dyn", from_py_object)]
#[derive(Clone)]
pub struct PyTrajectory {
    inner: Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (frames, actions, seed = 0))]
    fn new(frames: Vec<Vec<Point>>, actions: Vec<Vec<f32>>, seed: u64) -> PyResult<Self> {
        let frames = frames.into_iter().map(cloud).collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: Trajectory::new(frames, actions, seed).map_err(err)?,
        })
    }

    /// Frames as lists of `[x, y, z]`.
    fn frames(&self) -> Vec<Vec<Point>> {
        self.inner.frames.iter().map(|f| f.points().to_vec()).collect()
    }

    fn actions(&self) -> Vec<Vec<f32>> {
        self.inner.actions.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.inner.n_points()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Trajectory(frames={}, points={}, seed={})", self.inner.len(), self.inner.n_points(), self.inner.seed)
    }
}

fn unwrap_trajs(trajs: Vec<PyTrajectory>) -> Vec<Trajectory> {
    trajs.into_iter().map(|t| t.inner).collect()
}

/// Synthetic push trajectories; `scene` takes scene keys such as `n_points`.
#[pyfunction]
#[pyo3(signature = (count, seed = 0, scene = None))]
fn generate_dataset(py: Python<'_>, count: usize, seed: u64, scene: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<PyTrajectory>> {
    let cfg = resolve(py, CliConfig::default(), scene, "scene.")?;
    let trajs = py.detach(|| data::generate_dataset(&cfg.scene, count, seed)).map_err(err)?;
    Ok(trajs.into_iter().map(|inner| PyTrajectory { inner }).collect())
}

#[pyfunction]
fn write_dataset(trajs: Vec<PyTrajectory>, path: PathBuf) -> PyResult<()> {
    data::write_dataset(&unwrap_trajs(trajs), &path).map_err(err)
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PyTrajectory>> {
    Ok(data::read_dataset(&path).map_err(err)?.into_iter().map(|inner| PyTrajectory { inner }).collect())
}

/// Farthest point sampling; indices in selection order.
#[pyfunction]
#[pyo3(signature = (points, m, start = 0))]
fn fps_indices(points: Vec<Point>, m: usize, start: usize) -> PyResult<Vec<usize>> {
    data::fps_indices(&cloud(points)?, m, start).map_err(err)
}

/// Pinhole back-projection of a row-major depth map; non-positive depths are skipped.
#[pyfunction]
fn backproject(depth: Vec<Vec<f32>>, fx: f64, fy: f64, cx: f64, cy: f64) -> PyResult<Vec<Point>> {
    let (h, w) = (depth.len(), depth.first().map_or(0, Vec::len));
    if depth.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("depth rows differ in length"));
    }
    let img = DepthImage::new(h, w, depth.into_iter().flatten().collect()).map_err(err)?;
    let k = CameraIntrinsics::new(fx, fy, cx, cy).map_err(err)?;
    Ok(data::backproject_depth(&img, &k).map_err(err)?.points().to_vec())
}

/// Runs the finite-difference suite; returns `(name, max_rel_err, passed)` per check.
#[pyfunction]
#[pyo3(signature = (seed = 0, loss_points = 20))]
fn gradcheck(py: Python<'_>, seed: u64, loss_points: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let results = py.detach(|| core::gradsuite::run_suite(seed, loss_points)).map_err(err)?;
    Ok(results.into_iter().map(|r| {
        let ok = r.passed();
        (r.name, r.max_rel_err, ok)
    }).collect())
}

/// Training state with the online/target encoders, IDM, FDM and optimizer.
#[pyclass(module = "latent_dyn")]
pub struct Trainer {
    state: TrainState,
}

#[pymethods]
impl Trainer {
    /// `config` takes flat training keys such as `{"epochs": 5, "d_act": 8}`.
    #[new]
    #[pyo3(signature = (config = None, desk = false))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>, desk: bool) -> PyResult<Self> {
        let base = CliConfig {
            train: if desk { TrainConfig::desk() } else { TrainConfig::default() },
            ..Default::default()
        };
        let cfg = resolve(py, base, config, "")?;
        Ok(Self {
            state: TrainState::new(cfg.train).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            state: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &path).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        from_json(py, &self.state.config)
    }

    /// Trains up to the configured epoch count, writing checkpoints and
    /// `metrics.jsonl` into `out_dir`.
    #[pyo3(signature = (trajectories, out_dir, epochs = None))]
    fn train(&mut self, py: Python<'_>, trajectories: Vec<PyTrajectory>, out_dir: PathBuf, epochs: Option<usize>) -> PyResult<()> {
        let mut state = self.state.clone();
        if let Some(e) = epochs {
            state.config.epochs = e;
        }
        let trajs = unwrap_trajs(trajectories);
        self.state = py.detach(|| train(state, &trajs, &out_dir)).map_err(err)?;
        Ok(())
    }

    /// Linear-probe and collapse report as a dict.
    fn probe(&self, py: Python<'_>, trajectories: Vec<PyTrajectory>) -> PyResult<Py<PyAny>> {
        let trajs = unwrap_trajs(trajectories);
        let report = py
            .detach(|| core::eval::run_probe(&self.state.models, &self.state.config, &trajs))
            .map_err(err)?;
        from_json(py, &report)
    }

    /// Online-encoder token features, one row per token.
    fn encode(&self, points: Vec<Point>) -> PyResult<Vec<Vec<f32>>> {
        let m = &self.state.models;
        let f = encode(&m.online, &m.config.encoder, &cloud(points)?).map_err(err)?;
        Ok(f.tokens.data().chunks(m.config.encoder.dim).map(<[f32]>::to_vec).collect())
    }

    /// Latent action between two clouds.
    #[pyo3(signature = (before, after, backward = false))]
    fn latent_action(&self, before: Vec<Point>, after: Vec<Point>, backward: bool) -> PyResult<Vec<f32>> {
        let m = &self.state.models;
        let pa = encode(&m.online, &m.config.encoder, &cloud(before)?).map_err(err)?.pool();
        let pb = encode(&m.online, &m.config.encoder, &cloud(after)?).map_err(err)?.pool();
        let dir = if backward { Direction::Backward } else { Direction::Forward };
        Ok(infer_latent_action(&m.idm, m.config.idm_input, &pa, &pb, dir).map_err(err)?.vector)
    }

    fn __repr__(&self) -> String {
        let c = &self.state.config;
        format!("Trainer(step={}, epochs={}, objective={})", self.state.step, c.epochs, c.objective)
    }
}

#[pymodule]
#[pyo3(name = "latent_dyn")]
fn latent_dyn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrajectory>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fps_indices, m)?)?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
