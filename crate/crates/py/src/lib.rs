//! Python bindings. Point sets cross the boundary as lists of `(x, y, z)`
//! tuples; clouds are wrapped in the `PointCloud` class.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use normup::checkpoint::Checkpoint;
use normup::cloud::{self, Vec3};
use normup::geometry::{self, AugmentConfig};
use normup::gradcheck;
use normup::inference;
use normup::losses::{self, LossReport, LossWeights};
use normup::metrics::{self, EvalReport};
use normup::network::{GroupScaleList, NetConfig};
use normup::synth::{self, Shape};
use normup::trainer::{self, TrainConfig, TrainState};
use normup::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn or_py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for normup::Result<T> {
    fn or_py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn report_dict(r: &LossReport) -> HashMap<&'static str, f64> {
    LossReport::FIELDS.iter().copied().zip(r.values()).collect()
}

/// A point cloud with unit normals.
#[pyclass(name = "PointCloud", module = "normup", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPointCloud {
    inner: cloud::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(positions: Vec<Vec3>, normals: Vec<Vec3>) -> PyResult<Self> {
        Ok(Self { inner: cloud::PointCloud::new(positions, normals).or_py()? })
    }

    /// Reads XYZN text, or ASCII PLY when the name ends in `.ply`.
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        let inner =
            if path.to_ascii_lowercase().ends_with(".ply") { cloud::read_ply(path) } else { cloud::read_xyzn(path) };
        Ok(Self { inner: inner.or_py()? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: cloud::parse_xyzn(text).or_py()? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        cloud::write_xyzn(path, &self.inner).or_py()
    }

    fn to_xyzn(&self) -> String {
        cloud::format_xyzn(&self.inner, None)
    }

    #[getter]
    fn positions(&self) -> Vec<Vec3> {
        self.inner.positions().to_vec()
    }

    #[getter]
    fn normals(&self) -> Vec<Vec3> {
        self.inner.normals().to_vec()
    }

    fn select(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyValueError::new_err(format!("index {bad} out of range for {} points", self.inner.len())));
        }
        Ok(Self { inner: self.inner.select(&indices) })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points)", self.inner.len())
    }
}

/// The upsampling network and its configuration.
#[pyclass(name = "Network", module = "normup", frozen)]
pub struct PyNetwork {
    inner: normup::Network,
}

#[pymethods]
impl PyNetwork {
    /// Randomly initialized network. `scales` is `"radius:samples,..."`.
    #[staticmethod]
    #[pyo3(signature = (seed, up_ratio=4, patch_size=128, k=15, scales=None))]
    fn init(seed: u64, up_ratio: usize, patch_size: usize, k: usize, scales: Option<&str>) -> PyResult<Self> {
        let mut config = NetConfig { up_ratio, patch_size, k, ..NetConfig::default() };
        if let Some(s) = scales {
            config.scales = GroupScaleList::parse(s).map_err(PyValueError::new_err)?.0;
        }
        Ok(Self { inner: normup::Network::init(config, seed).or_py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path).or_py()?.network })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::from_network(self.inner.clone()).save(path).or_py()
    }

    #[getter]
    fn up_ratio(&self) -> usize {
        self.inner.config().up_ratio
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.config().patch_size
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_values()
    }

    /// Raw prediction for one patch in its own normalized frame.
    fn predict(&self, py: Python<'_>, patch: &PyPointCloud) -> PyResult<PyPointCloud> {
        let (out, _) = py.detach(|| self.inner.predict(&patch.inner)).or_py()?;
        Ok(PyPointCloud { inner: out })
    }

    /// Full pipeline: patches, prediction, merge and consolidation.
    fn upsample(&self, py: Python<'_>, cloud: &PyPointCloud) -> PyResult<PyPointCloud> {
        let out = py.detach(|| inference::upsample_cloud(&cloud.inner, &self.inner)).or_py()?;
        Ok(PyPointCloud { inner: out })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Network(up_ratio={}, patch_size={}, k={}, scales={})", c.up_ratio, c.patch_size, c.k, c.scales.len())
    }
}

/// Trains on patches of `input_size * up_ratio` points. `config` is the
/// key=value text accepted by the command line tool. Returns the network
/// and one loss dict per epoch.
#[pyfunction]
#[pyo3(signature = (patches, config="", seed=None))]
fn train(
    py: Python<'_>,
    patches: Vec<PyRef<'_, PyPointCloud>>,
    config: &str,
    seed: Option<u64>,
) -> PyResult<(PyNetwork, Vec<HashMap<&'static str, f64>>)> {
    let mut cfg = TrainConfig::parse(config).or_py()?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let data: Vec<cloud::PointCloud> = patches.iter().map(|p| p.inner.clone()).collect();
    let state: TrainState = py.detach(|| trainer::train(&data, &cfg)).or_py()?;
    let history = state.history.iter().map(report_dict).collect();
    Ok((PyNetwork { inner: state.network }, history))
}

#[pyfunction]
fn synth_cloud(shape: &str, n: usize, seed: u64) -> PyResult<PyPointCloud> {
    let shape: Shape = shape.parse().or_py()?;
    Ok(PyPointCloud { inner: synth::sample(shape, n, seed).or_py()? })
}

type Neighbors = (Vec<Vec<usize>>, Vec<Vec<f64>>);

/// Indices and squared distances of the `k` nearest points for each query.
#[pyfunction]
#[pyo3(signature = (points, queries, k, exclude_self=false))]
fn knn(points: Vec<Vec3>, queries: Vec<Vec3>, k: usize, exclude_self: bool) -> PyResult<Neighbors> {
    let nn = geometry::knn_search(&points, &queries, k, exclude_self).or_py()?;
    let rows = 0..nn.num_queries();
    Ok((rows.clone().map(|r| nn.indices(r).to_vec()).collect(), rows.map(|r| nn.sq_dists(r).to_vec()).collect()))
}

#[pyfunction]
fn ball_query(points: Vec<Vec3>, centers: Vec<Vec3>, radius: f64, max_samples: usize) -> PyResult<Vec<Vec<usize>>> {
    let g = geometry::ball_query(&points, &centers, radius, max_samples).or_py()?;
    Ok((0..g.len()).map(|c| g.group(c).to_vec()).collect())
}

#[pyfunction]
#[pyo3(signature = (points, m, seed=0))]
fn farthest_point_sample(points: Vec<Vec3>, m: usize, seed: usize) -> PyResult<Vec<usize>> {
    geometry::farthest_point_sample(&points, m, seed).or_py()
}

#[pyfunction]
fn nonuniform_downsample(cloud: &PyPointCloud, m: usize, seed: u64) -> PyResult<PyPointCloud> {
    Ok(PyPointCloud { inner: geometry::nonuniform_downsample(&cloud.inner, m, seed).or_py()? })
}

#[pyfunction]
#[pyo3(signature = (cloud, seed, rotate=true, scale_min=0.8, scale_max=1.2, shift=0.1, noise_sigma=0.005))]
fn augment(
    cloud: &PyPointCloud,
    seed: u64,
    rotate: bool,
    scale_min: f64,
    scale_max: f64,
    shift: f64,
    noise_sigma: f64,
) -> PyResult<PyPointCloud> {
    let cfg = AugmentConfig { rotate, scale_min, scale_max, shift, noise_sigma };
    Ok(PyPointCloud { inner: geometry::augment(&cloud.inner, seed, &cfg).or_py()? })
}

#[pyfunction]
fn chamfer(pred: Vec<Vec3>, gt: Vec<Vec3>) -> PyResult<f64> {
    Ok(losses::chamfer(&pred, &gt).or_py()?.value)
}

#[pyfunction]
fn emd(pred: Vec<Vec3>, gt: Vec<Vec3>) -> PyResult<f64> {
    losses::emd(&pred, &gt).or_py()
}

#[pyfunction]
#[pyo3(signature = (pred, k=losses::DEFAULT_K))]
fn point_knn_loss(pred: Vec<Vec3>, k: usize) -> PyResult<f64> {
    Ok(losses::point_knn_loss(&pred, k).or_py()?.value)
}

#[pyfunction]
fn normal_l2_loss(pred: &PyPointCloud, gt: &PyPointCloud) -> PyResult<f64> {
    let (p, g) = (&pred.inner, &gt.inner);
    Ok(losses::normal_l2_loss(p.positions(), p.normals(), g.positions(), g.normals()).or_py()?.value)
}

#[pyfunction]
#[pyo3(signature = (positions, normals, k=losses::DEFAULT_K))]
fn normal_orth_loss(positions: Vec<Vec3>, normals: Vec<Vec3>, k: usize) -> PyResult<f64> {
    Ok(losses::normal_orth_loss(&positions, &normals, k).or_py()?.value)
}

#[pyfunction]
#[pyo3(signature = (positions, normals, k=losses::DEFAULT_K))]
fn normal_knn_loss(positions: Vec<Vec3>, normals: Vec<Vec3>, k: usize) -> PyResult<f64> {
    Ok(losses::normal_knn_loss(&positions, &normals, k).or_py()?.value)
}

/// Every loss term and the weighted total, as a dict.
#[pyfunction]
#[pyo3(signature = (pred, gt, weights=None, k=losses::DEFAULT_K))]
fn total_loss(
    pred: &PyPointCloud,
    gt: &PyPointCloud,
    weights: Option<[f64; 5]>,
    k: usize,
) -> PyResult<HashMap<&'static str, f64>> {
    let w = match weights {
        Some([w1, w2, w3, w4, w5]) => LossWeights { w1, w2, w3, w4, w5 },
        None => LossWeights::default(),
    };
    let (report, _) = losses::total_loss(pred.inner.positions(), pred.inner.normals(), &gt.inner, &w, k).or_py()?;
    Ok(report_dict(&report))
}

#[pyfunction]
fn cd_metric(pred: Vec<Vec3>, gt: Vec<Vec3>) -> PyResult<f64> {
    metrics::cd_metric(&pred, &gt).or_py()
}

#[pyfunction]
fn hd_metric(pred: Vec<Vec3>, gt: Vec<Vec3>) -> PyResult<f64> {
    metrics::hd_metric(&pred, &gt).or_py()
}

/// Mean angle in degrees between predicted normals and the normals of the
/// nearest ground-truth points.
#[pyfunction]
fn normal_angle_error(pred: &PyPointCloud, gt: &PyPointCloud) -> PyResult<f64> {
    Ok(metrics::normal_angle_error(&pred.inner, &gt.inner).or_py()?.0)
}

#[pyfunction]
fn evaluate(pred: &PyPointCloud, gt: &PyPointCloud) -> PyResult<HashMap<&'static str, f64>> {
    let r = EvalReport::compute(&pred.inner, &gt.inner).or_py()?;
    Ok(HashMap::from([("cd", r.cd), ("hd", r.hd), ("normal_angle_deg", r.normal_angle_deg)]))
}

/// Runs the finite-difference suite; returns `(cases, failed, max_deviation)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck_suite(py: Python<'_>, seed: u64) -> PyResult<(usize, usize, f64)> {
    let cases = py.detach(|| gradcheck::run_suite(seed)).or_py()?;
    let failed = cases.iter().filter(|c| !c.passed()).count();
    let worst = cases.iter().map(|c| c.report.max_deviation).fold(0.0, f64::max);
    Ok((cases.len(), failed, worst))
}

#[pymodule]
#[pyo3(name = "normup")]
pub fn normup_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synth_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(ball_query, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(nonuniform_downsample, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(point_knn_loss, m)?)?;
    m.add_function(wrap_pyfunction!(normal_l2_loss, m)?)?;
    m.add_function(wrap_pyfunction!(normal_orth_loss, m)?)?;
    m.add_function(wrap_pyfunction!(normal_knn_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cd_metric, m)?)?;
    m.add_function(wrap_pyfunction!(hd_metric, m)?)?;
    m.add_function(wrap_pyfunction!(normal_angle_error, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_suite, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
