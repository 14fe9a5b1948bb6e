//! Run configuration: one JSON file describing a full
//! simulate/project/train/odometry/evaluate pipeline.
//!
//! Every field has a default, so `{}` is a valid file; unknown keys are
//! rejected so typos fail loudly instead of silently falling back to a
//! default. The `HERO_SEED` environment variable, when set, overrides the
//! configured seed without touching the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::SolverOptions;
use crate::features::{Arch, FrontendConfig};
use crate::simworld::SensorParams;
use crate::trainer::{Ablations, OdometryConfig, TrainConfig};
use nalgebra::Vector6;

/// Name of the environment variable that overrides the configured seed.
pub const SEED_ENV_VAR: &str = "HERO_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value at {path}: {message}")]
    Validation { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Simulated sensor geometry and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSection {
    pub num_azimuths: usize,
    pub num_bins: usize,
    pub range_resolution: f64,
    pub blob_sigma_range: f64,
    pub blob_sigma_azimuth: f64,
    pub speckle_fraction: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        let p = SensorParams::default();
        SensorSection {
            num_azimuths: p.num_azimuths,
            num_bins: p.num_bins,
            range_resolution: p.range_resolution,
            blob_sigma_range: p.blob_sigma_range,
            blob_sigma_azimuth: p.blob_sigma_azimuth,
            speckle_fraction: p.speckle_fraction,
        }
    }
}

/// Simulated world and trajectory generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub landmarks: usize,
    pub extent: f64,
    pub frames: usize,
    pub dt: f64,
    /// Power spectral density diagonal used to sample the trajectory.
    pub qc_diag: [f64; 6],
    pub sensor: SensorSection,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            landmarks: 50,
            extent: 20.0,
            frames: 300,
            dt: 0.25,
            qc_diag: [0.1, 0.1, 0.1, 0.01, 0.01, 0.01],
            sensor: SensorSection::default(),
        }
    }
}

/// Polar-to-Cartesian projection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    /// Azimuth-mask threshold multiplier on the per-azimuth mean.
    pub beta: f64,
    /// Square image side, pixels.
    pub image_size: usize,
    /// Meters per pixel.
    pub resolution: f64,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection {
            beta: 3.0,
            image_size: 256,
            resolution: 0.2592,
        }
    }
}

/// Network architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub cell_size: usize,
    pub temperature: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Arch::default();
        ModelSection {
            encoder_channels: a.encoder_channels,
            decoder_channels: a.decoder_channels,
            cell_size: a.cell_size,
            temperature: a.temperature,
            bn_momentum: a.bn_momentum,
            bn_epsilon: a.bn_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub scalar_weight: bool,
    pub no_mah_gate: bool,
    pub no_masking: bool,
    pub no_augmentation: bool,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub window_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub alpha: f64,
    pub eta: f64,
    pub aug_max_angle: f64,
    pub min_cell_occupancy: f64,
    pub z_weight: f64,
    pub qc_diag: [f64; 6],
    pub checkpoint_every: usize,
    pub ablations: AblationSection,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            window_size: t.window_size,
            learning_rate: t.learning_rate,
            max_steps: t.max_steps,
            alpha: t.alpha,
            eta: t.eta,
            aug_max_angle: t.aug_max_angle,
            min_cell_occupancy: t.min_cell_occupancy,
            z_weight: t.z_weight,
            qc_diag: [1.0, 1.0, 1.0, 0.1, 0.1, 0.1],
            checkpoint_every: t.checkpoint_every,
            ablations: AblationSection::default(),
        }
    }
}

/// Inference-time odometry settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometrySection {
    pub window_size: usize,
    /// Interpret weight scores isotropically (must match training).
    pub scalar_weight: bool,
}

impl Default for OdometrySection {
    fn default() -> Self {
        OdometrySection {
            window_size: 4,
            scalar_weight: false,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulation: SimulationSection,
    pub projection: ProjectionSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub odometry: OdometrySection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let sim = &self.simulation;
        if sim.landmarks < 4 {
            return Err(invalid("simulation.landmarks", "need at least 4 landmarks"));
        }
        if !(sim.extent > 0.0) {
            return Err(invalid("simulation.extent", "must be positive"));
        }
        if sim.frames < 2 {
            return Err(invalid("simulation.frames", "need at least 2 frames"));
        }
        if !(sim.dt > 0.0) {
            return Err(invalid("simulation.dt", "must be positive"));
        }
        if sim.qc_diag.iter().any(|&q| !(q >= 0.0)) {
            return Err(invalid("simulation.qc_diag", "entries must be non-negative"));
        }
        let sensor = &sim.sensor;
        if sensor.num_azimuths == 0 {
            return Err(invalid("simulation.sensor.num_azimuths", "must be positive"));
        }
        if sensor.num_bins == 0 {
            return Err(invalid("simulation.sensor.num_bins", "must be positive"));
        }
        if !(sensor.range_resolution > 0.0) {
            return Err(invalid("simulation.sensor.range_resolution", "must be positive"));
        }
        if !(sensor.blob_sigma_range > 0.0) || !(sensor.blob_sigma_azimuth > 0.0) {
            return Err(invalid("simulation.sensor.blob_sigma_range", "blob spreads must be positive"));
        }
        if !(sensor.speckle_fraction >= 0.0) {
            return Err(invalid("simulation.sensor.speckle_fraction", "must be non-negative"));
        }

        let proj = &self.projection;
        if !(proj.beta >= 0.0) || !proj.beta.is_finite() {
            return Err(invalid("projection.beta", "must be finite and non-negative"));
        }
        if proj.image_size < 2 || proj.image_size % 2 != 0 {
            return Err(invalid("projection.image_size", "must be even and at least 2"));
        }
        if !(proj.resolution > 0.0) {
            return Err(invalid("projection.resolution", "must be positive"));
        }

        let model = &self.model;
        if model.encoder_channels.is_empty() {
            return Err(invalid("model.encoder_channels", "need at least one stage"));
        }
        if model.decoder_channels.len() != model.encoder_channels.len() {
            return Err(invalid(
                "model.decoder_channels",
                "must have as many stages as the encoder",
            ));
        }
        if model.encoder_channels.iter().chain(&model.decoder_channels).any(|&c| c == 0) {
            return Err(invalid("model.encoder_channels", "channel counts must be positive"));
        }
        if model.cell_size == 0 {
            return Err(invalid("model.cell_size", "must be positive"));
        }
        if proj.image_size % model.cell_size != 0 {
            return Err(invalid(
                "model.cell_size",
                format!("must divide projection.image_size ({})", proj.image_size),
            ));
        }
        let pool = 1usize << model.encoder_channels.len();
        if proj.image_size % pool != 0 {
            return Err(invalid(
                "model.encoder_channels",
                format!("{} pooling stages need image_size divisible by {pool}", model.encoder_channels.len()),
            ));
        }
        if !(model.temperature > 0.0) {
            return Err(invalid("model.temperature", "must be positive"));
        }
        if !(0.0..=1.0).contains(&model.bn_momentum) {
            return Err(invalid("model.bn_momentum", "must lie in [0, 1]"));
        }
        if !(model.bn_epsilon > 0.0) {
            return Err(invalid("model.bn_epsilon", "must be positive"));
        }

        let t = &self.training;
        if t.window_size < 2 {
            return Err(invalid("training.window_size", "must be at least 2"));
        }
        if !(t.learning_rate >= 0.0) || !t.learning_rate.is_finite() {
            return Err(invalid("training.learning_rate", "must be finite and non-negative"));
        }
        if t.max_steps == 0 {
            return Err(invalid("training.max_steps", "must be at least 1"));
        }
        if !(t.alpha > 0.0) {
            return Err(invalid("training.alpha", "must be positive"));
        }
        if !t.eta.is_finite() {
            return Err(invalid("training.eta", "must be finite"));
        }
        if !(t.aug_max_angle >= 0.0) {
            return Err(invalid("training.aug_max_angle", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&t.min_cell_occupancy) {
            return Err(invalid("training.min_cell_occupancy", "must lie in [0, 1]"));
        }
        if !(t.z_weight > 0.0) {
            return Err(invalid("training.z_weight", "must be positive"));
        }
        if t.qc_diag.iter().any(|&q| !(q >= 0.0)) {
            return Err(invalid("training.qc_diag", "entries must be non-negative"));
        }

        if self.odometry.window_size < 2 {
            return Err(invalid("odometry.window_size", "must be at least 2"));
        }
        Ok(())
    }

    pub fn sensor_params(&self) -> SensorParams {
        let s = &self.simulation.sensor;
        SensorParams {
            num_azimuths: s.num_azimuths,
            num_bins: s.num_bins,
            range_resolution: s.range_resolution,
            blob_sigma_range: s.blob_sigma_range,
            blob_sigma_azimuth: s.blob_sigma_azimuth,
            speckle_fraction: s.speckle_fraction,
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_channels: 1,
            encoder_channels: self.model.encoder_channels.clone(),
            decoder_channels: self.model.decoder_channels.clone(),
            cell_size: self.model.cell_size,
            temperature: self.model.temperature,
            bn_momentum: self.model.bn_momentum,
            bn_epsilon: self.model.bn_epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            window_size: t.window_size,
            learning_rate: t.learning_rate,
            max_steps: t.max_steps,
            alpha: t.alpha,
            eta: t.eta,
            aug_max_angle: t.aug_max_angle,
            seed: self.seed,
            min_cell_occupancy: t.min_cell_occupancy,
            z_weight: t.z_weight,
            qc_diag: Vector6::from_row_slice(&t.qc_diag),
            checkpoint_every: t.checkpoint_every,
            ablations: Ablations {
                scalar_weight: t.ablations.scalar_weight,
                no_mah_gate: t.ablations.no_mah_gate,
                no_masking: t.ablations.no_masking,
                no_augmentation: t.ablations.no_augmentation,
            },
        }
    }

    pub fn odometry_config(&self) -> OdometryConfig {
        OdometryConfig {
            window_size: self.odometry.window_size,
            frontend: FrontendConfig {
                min_cell_occupancy: self.training.min_cell_occupancy,
                z_weight: self.training.z_weight,
                score_gate: Some(self.training.eta),
            },
            solver: SolverOptions::default(),
            qc_diag: Vector6::from_row_slice(&self.training.qc_diag),
            scalar_weight: self.odometry.scalar_weight
                || self.training.ablations.scalar_weight,
        }
    }
}

/// Loads, seeds, and validates a run configuration. Unknown keys are
/// parse errors; the `HERO_SEED` environment variable overrides the
/// configured seed when set.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let mut config: RunConfig =
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
        config.seed = seed
            .trim()
            .parse::<u64>()
            .map_err(|_| invalid(SEED_ENV_VAR, format!("not a valid seed: {seed:?}")))?;
    }
    config.validate()?;
    Ok(config)
}

/// Writes a configuration as pretty-printed JSON.
pub fn save_config(config: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    let text = serde_json::to_string_pretty(config)
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as IoWrite;
    use std::sync::{Mutex, MutexGuard};

    /// Tests share the process environment, so every load serializes on
    /// this lock; the override test holds it across its env mutations.
    static ENV_LOCK: Mutex<()> = Mutex::new(());

    fn env_guard() -> MutexGuard<'static, ()> {
        ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn load_locked(path: &Path) -> Result<RunConfig, ConfigError> {
        let _guard = env_guard();
        load_config(path)
    }

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn empty_config_gets_all_defaults() {
        let f = write_config("{}");
        let config = load_locked(f.path()).unwrap();
        assert_eq!(config.training.window_size, 4);
        assert_eq!(config.projection.resolution, 0.2592);
        assert_eq!(config.training.alpha, 16.0);
        assert_eq!(config.training.eta, 4.0);
        assert_eq!(config.model.temperature, 100.0);
        assert_eq!(config.projection.beta, 3.0);
        assert_eq!(config.training.z_weight, 1e4);
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let f = write_config(r#"{"training": {"windw_size": 4}}"#);
        assert!(matches!(load_locked(f.path()), Err(ConfigError::Parse(_))));
        let f = write_config(r#"{"not_a_section": 1}"#);
        assert!(matches!(load_locked(f.path()), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let f = write_config("{");
        assert!(matches!(load_locked(f.path()), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn negative_learning_rate_is_a_validation_error() {
        let f = write_config(r#"{"training": {"learning_rate": -1e-4}}"#);
        match load_locked(f.path()) {
            Err(ConfigError::Validation { path, .. }) => {
                assert_eq!(path, "training.learning_rate");
            }
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn validation_errors_carry_field_paths() {
        let cases = [
            (r#"{"training": {"window_size": 1}}"#, "training.window_size"),
            (r#"{"training": {"alpha": 0.0}}"#, "training.alpha"),
            (r#"{"projection": {"image_size": 7}}"#, "projection.image_size"),
            (r#"{"projection": {"resolution": 0.0}}"#, "projection.resolution"),
            (r#"{"simulation": {"dt": 0.0}}"#, "simulation.dt"),
            (r#"{"simulation": {"landmarks": 2}}"#, "simulation.landmarks"),
            (r#"{"model": {"temperature": 0.0}}"#, "model.temperature"),
            (r#"{"model": {"cell_size": 48}}"#, "model.cell_size"),
            (r#"{"odometry": {"window_size": 0}}"#, "odometry.window_size"),
        ];
        for (text, expected) in cases {
            let f = write_config(text);
            match load_locked(f.path()) {
                Err(ConfigError::Validation { path, .. }) => assert_eq!(path, expected),
                other => panic!("{text}: expected a validation error, got {other:?}"),
            }
        }
    }

    #[test]
    fn saved_configs_round_trip() {
        let mut config = RunConfig::default();
        config.seed = 99;
        config.training.learning_rate = 2.5e-4;
        config.training.ablations.no_masking = true;
        config.projection.image_size = 128;
        config.projection.resolution = 0.5;
        config.model.encoder_channels = vec![4, 8];
        config.model.decoder_channels = vec![8, 4];
        config.odometry.scalar_weight = true;
        config.validate().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        save_config(&config, &path).unwrap();
        let reloaded = load_locked(&path).unwrap();
        assert_eq!(reloaded, config);
    }

    #[test]
    fn seed_env_var_overrides_the_file() {
        // Hold the lock across the env mutations so concurrent loads in
        // other tests never observe the override.
        let _guard = env_guard();
        let f = write_config(r#"{"seed": 7}"#);
        std::env::set_var(SEED_ENV_VAR, "1234");
        let loaded = load_config(f.path());
        let bad = {
            std::env::set_var(SEED_ENV_VAR, "not-a-number");
            let r = load_config(f.path());
            std::env::remove_var(SEED_ENV_VAR);
            r
        };
        assert_eq!(loaded.unwrap().seed, 1234);
        match bad {
            Err(ConfigError::Validation { path, .. }) => assert_eq!(path, SEED_ENV_VAR),
            other => panic!("expected a validation error, got {other:?}"),
        }
        // Without the override the file's seed applies.
        assert_eq!(load_config(f.path()).unwrap().seed, 7);
    }

    #[test]
    fn derived_configs_reflect_the_sections() {
        let mut config = RunConfig::default();
        config.seed = 5;
        config.training.ablations.scalar_weight = true;
        let t = config.train_config();
        assert_eq!(t.seed, 5);
        assert!(t.ablations.scalar_weight);
        t.validate().unwrap();
        let o = config.odometry_config();
        assert!(o.scalar_weight, "training ablation carries into odometry");
        assert_eq!(o.frontend.score_gate, Some(4.0));
        let arch = config.arch();
        assert_eq!(arch.input_channels, 1);
        assert_eq!(arch.descriptor_dim(), arch.encoder_channels.iter().sum::<usize>());
    }
}
