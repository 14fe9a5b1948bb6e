//! Python bindings for the radar odometry library.
//!
//! The module mirrors the Rust pipeline: simulate a world, project scans
//! to images, train the feature network, run sliding-window odometry,
//! and score the result. Twists cross the boundary as 6-element lists
//! ordered `[vx, vy, vz, wx, wy, wz]`; matrices as nested row-major lists.

use std::path::PathBuf;

use nalgebra::{Matrix4, Vector6};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use radar_odom::eval;
use radar_odom::features::{
    extract_features, load_model, save_model, Arch, FeatureModel, FrontendConfig,
};
use radar_odom::lie;
use radar_odom::scan;
use radar_odom::simworld;
use radar_odom::trainer;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn twist_from_list(v: [f64; 6]) -> lie::Twist {
    lie::Twist::from_vector(Vector6::from_row_slice(&v))
}

fn twist_to_list(t: &lie::Twist) -> [f64; 6] {
    let v = t.vector();
    [v[0], v[1], v[2], v[3], v[4], v[5]]
}

/// A rigid transform in 3-D space.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: lie::Pose,
}

#[pymethods]
impl PyPose {
    /// Builds a pose from a 4x4 row-major matrix.
    #[new]
    fn new(matrix: [[f64; 4]; 4]) -> PyResult<Self> {
        let m = Matrix4::from_fn(|r, c| matrix[r][c]);
        Ok(PyPose {
            inner: lie::Pose::from_matrix(m).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn identity() -> Self {
        PyPose {
            inner: lie::Pose::identity(),
        }
    }

    /// A planar pose: translation (x, y) and rotation `yaw` about z.
    #[staticmethod]
    fn planar(x: f64, y: f64, yaw: f64) -> Self {
        PyPose {
            inner: lie::Pose::planar(x, y, yaw),
        }
    }

    /// Exponential map of a twist `[vx, vy, vz, wx, wy, wz]`.
    #[staticmethod]
    fn exp(twist: [f64; 6]) -> Self {
        PyPose {
            inner: lie::exp_map(&twist_from_list(twist)),
        }
    }

    /// Logarithmic map back to a twist; fails near a half-turn.
    fn log(&self) -> PyResult<[f64; 6]> {
        let t = lie::log_map(&self.inner).map_err(value_err)?;
        Ok(twist_to_list(&t))
    }

    fn compose(&self, other: &PyPose) -> Self {
        PyPose {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        PyPose {
            inner: self.inner.inverse(),
        }
    }

    /// The 4x4 homogeneous matrix as nested row-major lists.
    fn matrix(&self) -> [[f64; 4]; 4] {
        let m = self.inner.matrix();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    fn translation(&self) -> [f64; 3] {
        let t = self.inner.translation();
        [t[0], t[1], t[2]]
    }

    fn yaw(&self) -> f64 {
        self.inner.yaw()
    }

    /// The 6x6 adjoint matrix as nested row-major lists.
    fn adjoint(&self) -> [[f64; 6]; 6] {
        let m = self.inner.adjoint();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    fn __mul__(&self, other: &PyPose) -> Self {
        self.compose(other)
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        format!(
            "Pose(x={:.6}, y={:.6}, z={:.6}, yaw={:.6})",
            t[0],
            t[1],
            t[2],
            self.inner.yaw()
        )
    }
}

/// One polar radar scan.
#[pyclass(name = "PolarScan", skip_from_py_object)]
#[derive(Clone)]
struct PyPolarScan {
    inner: scan::PolarScan,
}

#[pymethods]
impl PyPolarScan {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPolarScan {
            inner: scan::PolarScan::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_err)
    }

    #[getter]
    fn num_azimuths(&self) -> usize {
        self.inner.num_azimuths()
    }

    #[getter]
    fn num_bins(&self) -> usize {
        self.inner.num_bins()
    }

    #[getter]
    fn timestamp(&self) -> f64 {
        self.inner.timestamp
    }

    #[getter]
    fn range_resolution(&self) -> f64 {
        self.inner.range_resolution
    }

    #[getter]
    fn max_range(&self) -> f64 {
        self.inner.max_range()
    }

    fn azimuths(&self) -> Vec<f64> {
        self.inner.azimuths().to_vec()
    }

    /// Intensity row for one azimuth, ordered by range bin.
    fn intensities(&self, azimuth: usize) -> PyResult<Vec<f32>> {
        if azimuth >= self.inner.num_azimuths() {
            return Err(value_err(format!(
                "azimuth {azimuth} out of range (scan has {})",
                self.inner.num_azimuths()
            )));
        }
        Ok((0..self.inner.num_bins())
            .map(|b| self.inner.intensity(azimuth, b))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "PolarScan(azimuths={}, bins={}, t={:.3})",
            self.inner.num_azimuths(),
            self.inner.num_bins(),
            self.inner.timestamp
        )
    }
}

/// A scan projected onto a square Cartesian grid.
#[pyclass(name = "CartesianImage", skip_from_py_object)]
#[derive(Clone)]
struct PyCartesianImage {
    inner: scan::CartesianImage,
}

#[pymethods]
impl PyCartesianImage {
    #[getter]
    fn size(&self) -> usize {
        self.inner.size
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.inner.resolution
    }

    #[getter]
    fn timestamp(&self) -> f64 {
        self.inner.timestamp
    }

    fn pixel(&self, row: usize, col: usize) -> PyResult<f32> {
        self.check(row, col)?;
        Ok(self.inner.pixel(row, col))
    }

    /// Whether the pixel lies inside the sensed, unmasked region.
    fn valid(&self, row: usize, col: usize) -> PyResult<bool> {
        self.check(row, col)?;
        Ok(self.inner.mask_at(row, col))
    }

    fn write_pgm(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_pgm(&path).map_err(io_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "CartesianImage(size={}, resolution={:.4}, t={:.3})",
            self.inner.size, self.inner.resolution, self.inner.timestamp
        )
    }
}

impl PyCartesianImage {
    fn check(&self, row: usize, col: usize) -> PyResult<()> {
        if row >= self.inner.size || col >= self.inner.size {
            return Err(value_err(format!(
                "pixel ({row}, {col}) out of range for size {}",
                self.inner.size
            )));
        }
        Ok(())
    }
}

/// A static 2-D landmark field.
#[pyclass(name = "World", skip_from_py_object)]
#[derive(Clone)]
struct PyWorld {
    inner: simworld::World,
}

#[pymethods]
impl PyWorld {
    /// Samples `count` landmarks uniformly inside a square of half-side
    /// `extent` with log-normal reflectivities.
    #[staticmethod]
    fn generate(seed: u64, count: usize, extent: f64) -> Self {
        PyWorld {
            inner: simworld::World::generate(seed, count, extent),
        }
    }

    #[getter]
    fn extent(&self) -> f64 {
        self.inner.extent
    }

    /// Landmarks as `(x, y, reflectivity)` triples.
    fn landmarks(&self) -> Vec<(f64, f64, f64)> {
        self.inner
            .landmarks()
            .iter()
            .map(|(p, a)| (p[0], p[1], *a))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.landmarks().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "World(landmarks={}, extent={:.2})",
            self.inner.landmarks().len(),
            self.inner.extent
        )
    }
}

/// A simulated trajectory: body poses in the world frame plus body-frame
/// velocities at shared timestamps.
#[pyclass(name = "GroundTruth", skip_from_py_object)]
#[derive(Clone)]
struct PyGroundTruth {
    inner: simworld::GroundTruth,
}

#[pymethods]
impl PyGroundTruth {
    #[getter]
    fn timestamps(&self) -> Vec<f64> {
        self.inner.timestamps.clone()
    }

    #[getter]
    fn poses(&self) -> Vec<PyPose> {
        self.inner
            .poses
            .iter()
            .map(|p| PyPose { inner: p.clone() })
            .collect()
    }

    #[getter]
    fn velocities(&self) -> Vec<[f64; 6]> {
        self.inner.velocities.iter().map(twist_to_list).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.timestamps.len()
    }

    fn __repr__(&self) -> String {
        format!("GroundTruth(frames={})", self.inner.timestamps.len())
    }
}

/// The learned detector/descriptor/weight network.
#[pyclass(name = "FeatureModel")]
struct PyFeatureModel {
    inner: FeatureModel,
}

#[pymethods]
impl PyFeatureModel {
    /// Builds a randomly initialised model.
    #[new]
    #[pyo3(signature = (
        seed = 0,
        encoder_channels = vec![8, 16],
        decoder_channels = vec![16, 8],
        cell_size = 16,
        temperature = 100.0,
    ))]
    fn new(
        seed: u64,
        encoder_channels: Vec<usize>,
        decoder_channels: Vec<usize>,
        cell_size: usize,
        temperature: f64,
    ) -> PyResult<Self> {
        let arch = Arch {
            encoder_channels,
            decoder_channels,
            cell_size,
            temperature,
            ..Arch::default()
        };
        Ok(PyFeatureModel {
            inner: FeatureModel::new(arch, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFeatureModel {
            inner: load_model(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(io_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    #[getter]
    fn cell_size(&self) -> usize {
        self.inner.arch.cell_size
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.arch.temperature
    }

    /// Runs the frozen network on one image and returns the sparse
    /// features as a dict of parallel lists: `points` (metric x, y),
    /// `pixels` (column, row), `log_det_r`, and `descriptors`.
    #[pyo3(signature = (image, min_cell_occupancy = 0.05, z_weight = 1e4, score_gate = None))]
    fn extract<'py>(
        &mut self,
        py: Python<'py>,
        image: &PyCartesianImage,
        min_cell_occupancy: f64,
        z_weight: f64,
        score_gate: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let config = FrontendConfig {
            min_cell_occupancy,
            z_weight,
            score_gate,
        };
        let set = extract_features(&mut self.inner, &image.inner, &config).map_err(value_err)?;
        let points: Vec<(f64, f64)> = set.points.iter().map(|p| (p[0], p[1])).collect();
        let pixels: Vec<(f64, f64)> = set.pixel_coords.iter().map(|c| (c[0], c[1])).collect();
        let out = PyDict::new(py);
        out.set_item("points", points)?;
        out.set_item("pixels", pixels)?;
        out.set_item("log_det_r", set.log_det_r)?;
        out.set_item("descriptors", set.descriptors)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("FeatureModel(params={})", self.inner.n_params())
    }
}

/// Simulates a full sequence: world, trajectory, and rendered scans.
#[pyfunction]
#[pyo3(signature = (
    seed = 0,
    landmarks = 50,
    extent = 20.0,
    frames = 300,
    dt = 0.25,
    qc_diag = [0.1, 0.1, 0.1, 0.01, 0.01, 0.01],
    num_azimuths = 128,
    num_bins = 256,
    range_resolution = 0.25,
    blob_sigma_range = 1.5,
    blob_sigma_azimuth = 1.0,
    speckle_fraction = 0.05,
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    seed: u64,
    landmarks: usize,
    extent: f64,
    frames: usize,
    dt: f64,
    qc_diag: [f64; 6],
    num_azimuths: usize,
    num_bins: usize,
    range_resolution: f64,
    blob_sigma_range: f64,
    blob_sigma_azimuth: f64,
    speckle_fraction: f64,
) -> PyResult<(PyWorld, PyGroundTruth, Vec<PyPolarScan>)> {
    if frames < 2 {
        return Err(value_err("a sequence needs at least 2 frames"));
    }
    let world = simworld::World::generate(seed, landmarks, extent);
    let gt = simworld::generate_trajectory(seed, frames, dt, &Vector6::from_row_slice(&qc_diag));
    let params = simworld::SensorParams {
        num_azimuths,
        num_bins,
        range_resolution,
        blob_sigma_range,
        blob_sigma_azimuth,
        speckle_fraction,
    };
    let scans = simworld::render_sequence(&world, &gt, &params, seed)
        .into_iter()
        .map(|s| PyPolarScan { inner: s })
        .collect();
    Ok((
        PyWorld { inner: world },
        PyGroundTruth { inner: gt },
        scans,
    ))
}

/// Projects a polar scan to a Cartesian image with azimuth masking.
#[pyfunction]
#[pyo3(signature = (scan, beta = 3.0, size = 256, resolution = 0.2592))]
fn project(
    scan: &PyPolarScan,
    beta: f64,
    size: usize,
    resolution: f64,
) -> PyResult<PyCartesianImage> {
    Ok(PyCartesianImage {
        inner: scan::project_scan(&scan.inner, beta, size, resolution).map_err(value_err)?,
    })
}

/// Trains the model on a projected sequence and returns
/// `(steps, skipped, losses)`.
#[pyfunction]
#[pyo3(signature = (
    model,
    images,
    steps = 100,
    learning_rate = 1e-5,
    window_size = 4,
    alpha = 16.0,
    eta = 4.0,
    aug_max_angle = 0.26,
    seed = 0,
    scalar_weight = false,
    no_mah_gate = false,
    no_masking = false,
    no_augmentation = false,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    model: &Bound<'_, PyFeatureModel>,
    images: Vec<Py<PyCartesianImage>>,
    steps: usize,
    learning_rate: f64,
    window_size: usize,
    alpha: f64,
    eta: f64,
    aug_max_angle: f64,
    seed: u64,
    scalar_weight: bool,
    no_mah_gate: bool,
    no_masking: bool,
    no_augmentation: bool,
) -> PyResult<(usize, usize, Vec<f64>)> {
    let images: Vec<scan::CartesianImage> =
        images.iter().map(|i| i.borrow(py).inner.clone()).collect();
    let config = trainer::TrainConfig {
        window_size,
        learning_rate,
        max_steps: steps,
        alpha,
        eta,
        aug_max_angle,
        seed,
        ablations: trainer::Ablations {
            scalar_weight,
            no_mah_gate,
            no_masking,
            no_augmentation,
        },
        ..trainer::TrainConfig::default()
    };
    let mut model = model.borrow_mut();
    let outcome = trainer::train(&mut model.inner, &images, &config, None, None)
        .map_err(value_err)?;
    Ok((outcome.steps, outcome.skipped, outcome.losses))
}

/// Runs sliding-window odometry and returns
/// `(timestamps, poses, velocities, fallbacks)`; poses are body-in-world.
#[pyfunction]
#[pyo3(signature = (model, images, window_size = 4, scalar_weight = false, score_gate = 4.0))]
fn odometry(
    py: Python<'_>,
    model: &Bound<'_, PyFeatureModel>,
    images: Vec<Py<PyCartesianImage>>,
    window_size: usize,
    scalar_weight: bool,
    score_gate: Option<f64>,
) -> PyResult<(Vec<f64>, Vec<PyPose>, Vec<[f64; 6]>, Vec<bool>)> {
    let images: Vec<scan::CartesianImage> =
        images.iter().map(|i| i.borrow(py).inner.clone()).collect();
    let config = trainer::OdometryConfig {
        window_size,
        scalar_weight,
        frontend: FrontendConfig {
            score_gate,
            ..FrontendConfig::default()
        },
        ..trainer::OdometryConfig::default()
    };
    let mut model = model.borrow_mut();
    let result = trainer::run_odometry(&mut model.inner, &images, &config).map_err(value_err)?;
    let poses = result
        .trajectory
        .poses
        .iter()
        .map(|p| PyPose { inner: p.clone() })
        .collect();
    let velocities = result.velocities.iter().map(twist_to_list).collect();
    Ok((
        result.trajectory.timestamps,
        poses,
        velocities,
        result.fallbacks,
    ))
}

/// Average drift of an estimated trajectory against a reference over the
/// given path lengths, as a dict with a per-length breakdown.
#[pyfunction]
fn kitti_drift<'py>(
    py: Python<'py>,
    est_timestamps: Vec<f64>,
    est_poses: Vec<PyPose>,
    gt_timestamps: Vec<f64>,
    gt_poses: Vec<PyPose>,
    lengths: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    if lengths.is_empty() {
        return Err(value_err("lengths must be non-empty"));
    }
    let est = eval::Trajectory::new(
        est_timestamps,
        est_poses.into_iter().map(|p| p.inner).collect(),
    );
    let gt = eval::Trajectory::new(
        gt_timestamps,
        gt_poses.into_iter().map(|p| p.inner).collect(),
    );
    let report = eval::kitti_drift(&est, &gt, &lengths).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("translational_percent", report.translational_percent)?;
    out.set_item("rotational_deg_per_m", report.rotational_deg_per_m)?;
    let per_length = PyList::empty(py);
    for e in &report.per_length {
        let row = PyDict::new(py);
        row.set_item("length", e.length)?;
        row.set_item("translational_percent", e.translational_percent)?;
        row.set_item("rotational_deg_per_m", e.rotational_deg_per_m)?;
        row.set_item("count", e.count)?;
        per_length.append(row)?;
    }
    out.set_item("per_length", per_length)?;
    Ok(out)
}

/// The 6x6 left Jacobian of the exponential map at a twist.
#[pyfunction]
fn left_jacobian(twist: [f64; 6]) -> [[f64; 6]; 6] {
    let m = lie::left_jacobian(&twist_from_list(twist));
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Inverse of the 6x6 left Jacobian at a twist.
#[pyfunction]
fn left_jacobian_inv(twist: [f64; 6]) -> [[f64; 6]; 6] {
    let m = lie::left_jacobian_inv(&twist_from_list(twist));
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

#[pymodule]
fn radar_odom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyPolarScan>()?;
    m.add_class::<PyCartesianImage>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyGroundTruth>()?;
    m.add_class::<PyFeatureModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(odometry, m)?)?;
    m.add_function(wrap_pyfunction!(kitti_drift, m)?)?;
    m.add_function(wrap_pyfunction!(left_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(left_jacobian_inv, m)?)?;
    Ok(())
}
