//! Synthetic planar radar world: landmark maps, smooth trajectories
//! consistent with the constant-velocity motion prior, polar scan
//! rendering, and oracle correspondences for estimator-only tests.
//!
//! Conventions: [`GroundTruth::poses`] hold body-in-world transforms, so
//! x/y/yaw read off directly, and [`GroundTruth::velocities`] are the
//! matching body-frame twists with `pose[k+1] ~= pose[k] * exp(dt * vel)`.
//! The estimator's pose state is the inverse (world-to-body) and its
//! velocity state the negation; conversions happen at that boundary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::lie::{exp_map, transform_point, Pose, Twist};
use crate::prior::propagate;
use crate::prior::Vector12;
use crate::scan::{PolarScan, ScanError};

/// Radar sensor model at desk scale: defaults mimic a scanning FMCW unit
/// at reduced size (128 azimuths, 256 bins of 0.25 m, ~64 m max range).
#[derive(Debug, Clone)]
pub struct SensorParams {
    pub num_azimuths: usize,
    pub num_bins: usize,
    pub range_resolution: f64,
    /// Blob spread along range, in bins.
    pub blob_sigma_range: f64,
    /// Blob spread across azimuths, in azimuth steps.
    pub blob_sigma_azimuth: f64,
    /// Additive uniform speckle on [0, fraction * peak reflectivity].
    pub speckle_fraction: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            num_azimuths: 128,
            num_bins: 256,
            range_resolution: 0.25,
            blob_sigma_range: 1.5,
            blob_sigma_azimuth: 1.0,
            speckle_fraction: 0.05,
        }
    }
}

/// A fixed map of point landmarks with per-landmark reflectivity.
#[derive(Debug, Clone)]
pub struct World {
    landmarks: Vec<(Vector2<f64>, f64)>,
    pub extent: f64,
    pub seed: u64,
}

impl World {
    /// Builds a world from explicit landmarks. Positions must lie within
    /// `extent` in both coordinates. Empty worlds are permitted for noise
    /// characterization; [`World::generate`] enforces the usual minimum.
    pub fn new(landmarks: Vec<(Vector2<f64>, f64)>, extent: f64, seed: u64) -> Self {
        for (p, refl) in &landmarks {
            assert!(
                p.x.abs() <= extent && p.y.abs() <= extent,
                "landmark {p:?} outside extent {extent}"
            );
            assert!(*refl > 0.0, "reflectivity must be positive");
        }
        World {
            landmarks,
            extent,
            seed,
        }
    }

    /// Scatters `count` landmarks uniformly over the square of half-width
    /// `extent` with reflectivities drawn from [0.5, 1.5].
    pub fn generate(seed: u64, count: usize, extent: f64) -> Self {
        assert!(count >= 4, "need at least 4 landmarks, got {count}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let landmarks = (0..count)
            .map(|_| {
                let p = Vector2::new(
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                );
                let refl = rng.random_range(0.5..1.5);
                (p, refl)
            })
            .collect();
        World {
            landmarks,
            extent,
            seed,
        }
    }

    pub fn landmarks(&self) -> &[(Vector2<f64>, f64)] {
        &self.landmarks
    }

    /// The same landmarks expressed in another frame (`transform` maps the
    /// current frame into the new one).
    pub fn transformed(&self, transform: &Pose) -> World {
        let landmarks = self
            .landmarks
            .iter()
            .map(|(p, refl)| {
                let hp = transform_point(transform, &nalgebra::Vector4::new(p.x, p.y, 0.0, 1.0));
                (Vector2::new(hp.x, hp.y), *refl)
            })
            .collect();
        World {
            landmarks,
            // A rigid transform can move points outside the old bound.
            extent: f64::INFINITY,
            seed: self.seed,
        }
    }
}

/// Ground-truth trajectory: body-in-world poses and body-frame velocity
/// twists, sampled at fixed timestamps.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub timestamps: Vec<f64>,
    pub poses: Vec<Pose>,
    pub velocities: Vec<Twist>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Samples a smooth trajectory from the white-noise-on-acceleration model:
/// each step integrates the constant-velocity kinematics with correlated
/// pose/velocity noise of covariance `Q_k(dt, qc_diag)`, then zeroes the
/// out-of-plane components (the planar projection of the 6-DOF sample).
///
/// The initial velocity is drawn from the seed: mostly-forward motion with
/// a mild yaw rate.
pub fn generate_trajectory(seed: u64, n_frames: usize, dt: f64, qc_diag: &Vector6<f64>) -> GroundTruth {
    assert!(n_frames >= 2, "need at least 2 frames");
    assert!(dt > 0.0, "dt must be positive");
    assert!(qc_diag.iter().all(|&q| q >= 0.0), "Qc must be non-negative");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body_vel0 = Twist::new(
        Vector3::new(
            rng.random_range(0.8..1.2),
            rng.random_range(-0.1..0.1),
            0.0,
        ),
        Vector3::new(0.0, 0.0, rng.random_range(-0.1..0.1)),
    );

    // Internal propagation runs in the estimator convention (world-to-body
    // pose, negated twist); outputs are flipped back at the end.
    let mut est_pose = Pose::identity();
    let mut est_vel = Twist::from_vector(-body_vel0.vector());

    let mut timestamps = Vec::with_capacity(n_frames);
    let mut poses = Vec::with_capacity(n_frames);
    let mut velocities = Vec::with_capacity(n_frames);
    timestamps.push(0.0);
    poses.push(est_pose.inverse());
    velocities.push(Twist::from_vector(-est_vel.vector()));

    // Per-axis Cholesky of the 2x2 pose/velocity covariance block:
    // [[dt^3/3 q, dt^2/2 q], [dt^2/2 q, dt q]].
    let a11: Vec<f64> = (0..6).map(|i| (qc_diag[i] * dt * dt * dt / 3.0).sqrt()).collect();
    let a21: Vec<f64> = (0..6).map(|i| (3.0 * qc_diag[i] * dt).sqrt() / 2.0).collect();
    let a22: Vec<f64> = (0..6).map(|i| (qc_diag[i] * dt).sqrt() / 2.0).collect();
    // In-plane axes of a twist [u; v]: ux, uy, and yaw rate.
    let planar_axes = [true, true, false, false, false, true];

    for k in 1..n_frames {
        let mut noise = Vector12::zeros();
        for i in 0..6 {
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            if planar_axes[i] {
                noise[i] = a11[i] * n1;
                noise[6 + i] = a21[i] * n1 + a22[i] * n2;
            }
        }
        let (p, v) = propagate(&est_pose, &est_vel, dt, &noise)
            .expect("dt validated above");
        est_pose = p;
        est_vel = v;
        timestamps.push(k as f64 * dt);
        poses.push(est_pose.inverse());
        velocities.push(Twist::from_vector(-est_vel.vector()));
    }

    GroundTruth {
        timestamps,
        poses,
        velocities,
    }
}

/// Renders the polar scan seen from `pose` (body in world): each landmark
/// deposits a Gaussian blob at its sensor-frame (azimuth, range), scaled by
/// its reflectivity, plus additive uniform speckle.
pub fn render_scan(
    world: &World,
    pose: &Pose,
    params: &SensorParams,
    timestamp: f64,
    rng: &mut impl Rng,
) -> PolarScan {
    let a = params.num_azimuths;
    let b = params.num_bins;
    let step = 2.0 * std::f64::consts::PI / a as f64;
    let mut intensities = vec![0.0f32; a * b];

    let to_sensor = pose.inverse();
    let window_az = (4.0 * params.blob_sigma_azimuth).ceil() as isize;
    let window_r = (4.0 * params.blob_sigma_range).ceil() as isize;
    let max_bin = (b - 1) as f64;

    for (p, refl) in world.landmarks() {
        let hp = transform_point(&to_sensor, &nalgebra::Vector4::new(p.x, p.y, 0.0, 1.0));
        let r = (hp.x * hp.x + hp.y * hp.y).sqrt();
        let bin = r / params.range_resolution;
        if bin > max_bin {
            continue;
        }
        let az = hp.y.atan2(hp.x).rem_euclid(2.0 * std::f64::consts::PI);
        let az_idx = az / step;
        let b_center = bin.round() as isize;
        let a_center = az_idx.round() as isize;
        for da in -window_az..=window_az {
            let ai = (a_center + da).rem_euclid(a as isize) as usize;
            // Distance from the true fractional azimuth, wrapped.
            let mut dazi = ai as f64 - az_idx;
            if dazi > a as f64 / 2.0 {
                dazi -= a as f64;
            }
            if dazi < -(a as f64) / 2.0 {
                dazi += a as f64;
            }
            for db in -window_r..=window_r {
                let bi = b_center + db;
                if bi < 0 || bi as usize >= b {
                    continue;
                }
                let dr = bi as f64 - bin;
                let v = refl
                    * (-0.5
                        * (dr * dr / (params.blob_sigma_range * params.blob_sigma_range)
                            + dazi * dazi
                                / (params.blob_sigma_azimuth * params.blob_sigma_azimuth)))
                        .exp();
                intensities[ai * b + bi as usize] += v as f32;
            }
        }
    }

    let peak = world
        .landmarks()
        .iter()
        .map(|(_, r)| *r)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let speckle = params.speckle_fraction * peak;
    if speckle > 0.0 {
        for v in intensities.iter_mut() {
            *v += (rng.random_range(0.0..speckle)) as f32;
        }
    }

    let azimuths = (0..a).map(|i| i as f64 * step).collect();
    PolarScan::new(
        azimuths,
        intensities,
        b,
        timestamp,
        params.range_resolution,
    )
    .expect("rendered scan satisfies construction invariants")
}

/// Renders one scan per ground-truth frame with per-frame deterministic
/// speckle derived from `seed`.
pub fn render_sequence(
    world: &World,
    gt: &GroundTruth,
    params: &SensorParams,
    seed: u64,
) -> Vec<PolarScan> {
    gt.poses
        .iter()
        .zip(&gt.timestamps)
        .enumerate()
        .map(|(k, (pose, &ts))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)));
            render_scan(world, pose, params, ts, &mut rng)
        })
        .collect()
}

/// A landmark observed from two frames: `reference` in frame `a`,
/// `measurement` in frame `b`, both planar 3D points.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub reference: Vector3<f64>,
    pub measurement: Vector3<f64>,
}

/// Expresses every landmark in both sensor frames, adding independent
/// Gaussian position noise of standard deviation `noise_std` in the plane.
pub fn oracle_correspondences(
    world: &World,
    pose_a: &Pose,
    pose_b: &Pose,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Vec<Correspondence> {
    let to_a = pose_a.inverse();
    let to_b = pose_b.inverse();
    world
        .landmarks()
        .iter()
        .map(|(p, _)| {
            let hp = nalgebra::Vector4::new(p.x, p.y, 0.0, 1.0);
            let pa = transform_point(&to_a, &hp);
            let pb = transform_point(&to_b, &hp);
            let mut reference = Vector3::new(pa.x, pa.y, 0.0);
            let mut measurement = Vector3::new(pb.x, pb.y, 0.0);
            if noise_std > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                reference.x += noise_std * n;
                let n: f64 = rng.sample(StandardNormal);
                reference.y += noise_std * n;
                let n: f64 = rng.sample(StandardNormal);
                measurement.x += noise_std * n;
                let n: f64 = rng.sample(StandardNormal);
                measurement.y += noise_std * n;
            }
            Correspondence {
                reference,
                measurement,
            }
        })
        .collect()
}

/// Writes `groundtruth.csv`: one `timestamp,x,y,yaw,vx,vy,vyaw` row per
/// frame, with velocities in the body frame.
pub fn write_groundtruth_csv(gt: &GroundTruth, path: &Path) -> Result<(), ScanError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "timestamp,x,y,yaw,vx,vy,vyaw")?;
    for k in 0..gt.len() {
        let p = &gt.poses[k];
        let v = &gt.velocities[k];
        writeln!(
            w,
            "{:.9},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            gt.timestamps[k],
            p.translation().x,
            p.translation().y,
            p.yaw(),
            v.linear().x,
            v.linear().y,
            v.angular().z,
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_groundtruth_csv(path: &Path) -> Result<GroundTruth, ScanError> {
    let r = BufReader::new(File::open(path)?);
    let mut timestamps = Vec::new();
    let mut poses = Vec::new();
    let mut velocities = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| {
                ScanError::InvalidScan(format!("groundtruth line {}: {e}", i + 1))
            })?;
        if fields.len() != 7 {
            return Err(ScanError::InvalidScan(format!(
                "groundtruth line {} has {} fields, expected 7",
                i + 1,
                fields.len()
            )));
        }
        timestamps.push(fields[0]);
        poses.push(Pose::planar(fields[1], fields[2], fields[3]));
        velocities.push(Twist::new(
            Vector3::new(fields[4], fields[5], 0.0),
            Vector3::new(0.0, 0.0, fields[6]),
        ));
    }
    Ok(GroundTruth {
        timestamps,
        poses,
        velocities,
    })
}

/// Body-in-world pose increment over one step of the body twist `v`.
pub fn step_pose(pose: &Pose, body_vel: &Twist, dt: f64) -> Pose {
    pose.compose(&exp_map(&body_vel.scaled(dt)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_qc_gives_constant_velocity() {
        let qc = Vector6::zeros();
        let gt = generate_trajectory(42, 50, 0.1, &qc);
        assert_eq!(gt.len(), 50);
        let v0 = gt.velocities[0];
        for k in 0..gt.len() {
            assert_relative_eq!(gt.velocities[k].vector(), v0.vector(), epsilon = 1e-10);
            if k + 1 < gt.len() {
                let pred = step_pose(&gt.poses[k], &v0, 0.1);
                assert_relative_eq!(pred.matrix(), gt.poses[k + 1].matrix(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn trajectories_are_planar() {
        let qc = Vector6::new(0.3, 0.3, 0.3, 0.05, 0.05, 0.05);
        let gt = generate_trajectory(7, 200, 0.1, &qc);
        for k in 0..gt.len() {
            let t = gt.poses[k].translation();
            assert!(t.z.abs() < 1e-12, "z drifted to {}", t.z);
            let r = gt.poses[k].rotation();
            // Rotation about z only: last row/col must be the z axis.
            assert_relative_eq!(r[(2, 2)], 1.0, epsilon = 1e-12);
            assert!(r[(0, 2)].abs() < 1e-12 && r[(1, 2)].abs() < 1e-12);
            let v = gt.velocities[k];
            assert!(v.linear().z.abs() < 1e-12);
            assert!(v.angular().x.abs() < 1e-12 && v.angular().y.abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_reproduces_trajectory() {
        let qc = Vector6::new(0.3, 0.3, 0.3, 0.05, 0.05, 0.05);
        let a = generate_trajectory(3, 30, 0.1, &qc);
        let b = generate_trajectory(3, 30, 0.1, &qc);
        let c = generate_trajectory(4, 30, 0.1, &qc);
        for k in 0..a.len() {
            assert_eq!(a.poses[k].matrix(), b.poses[k].matrix());
        }
        assert!(a.poses[10].matrix() != c.poses[10].matrix());
    }

    #[test]
    fn velocity_increment_variance_matches_discretization() {
        // Var(v_{k+1} - v_k) ~= dt * Qc per in-plane axis; parameters keep
        // the higher-order group-Jacobian corrections well under the 5%
        // tolerance.
        let dt = 0.01;
        let qc = Vector6::new(0.5, 0.5, 0.0, 0.0, 0.0, 0.05);
        let gt = generate_trajectory(12345, 10_001, dt, &qc);
        for (axis, q) in [(0usize, 0.5), (1usize, 0.5), (5usize, 0.05)] {
            let diffs: Vec<f64> = (0..gt.len() - 1)
                .map(|k| (gt.velocities[k + 1].vector() - gt.velocities[k].vector())[axis])
                .collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
            let expected = dt * q;
            assert!(
                (var - expected).abs() / expected < 0.05,
                "axis {axis}: var {var:.6e} vs expected {expected:.6e}"
            );
        }
    }

    #[test]
    fn empty_world_renders_speckle_only() {
        let world = World::new(vec![], 10.0, 0);
        let params = SensorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scan = render_scan(&world, &Pose::identity(), &params, 0.0, &mut rng);
        let mean = scan.intensities().iter().map(|&v| v as f64).sum::<f64>()
            / scan.intensities().len() as f64;
        // Uniform [0, 0.05] has mean 0.025.
        assert!((mean - 0.025).abs() < 0.002, "speckle mean {mean}");
    }

    #[test]
    fn landmark_ten_meters_ahead_peaks_at_expected_bin() {
        let world = World::new(vec![(Vector2::new(10.0, 0.0), 1.0)], 20.0, 0);
        let params = SensorParams {
            speckle_fraction: 0.0,
            ..SensorParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scan = render_scan(&world, &Pose::identity(), &params, 0.0, &mut rng);
        let mut best = (0usize, 0usize);
        let mut best_v = -1.0f32;
        for a in 0..scan.num_azimuths() {
            for bin in 0..scan.num_bins() {
                if scan.intensity(a, bin) > best_v {
                    best_v = scan.intensity(a, bin);
                    best = (a, bin);
                }
            }
        }
        assert_eq!(best.0, 0, "azimuth index");
        let expected_bin = 10.0 / params.range_resolution;
        assert!((best.1 as f64 - expected_bin).abs() <= 1.0, "bin {}", best.1);
    }

    #[test]
    fn out_of_range_landmark_is_absent() {
        let params = SensorParams {
            speckle_fraction: 0.0,
            ..SensorParams::default()
        };
        let far = World::new(vec![(Vector2::new(100.0, 0.0), 1.0)], 200.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scan = render_scan(&far, &Pose::identity(), &params, 0.0, &mut rng);
        assert!(scan.intensities().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rendering_is_equivariant_under_pose() {
        let world = World::generate(9, 12, 20.0);
        let params = SensorParams {
            speckle_fraction: 0.0,
            ..SensorParams::default()
        };
        let pose = Pose::planar(3.0, -2.0, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let direct = render_scan(&world, &pose, &params, 0.0, &mut rng);
        let moved = world.transformed(&pose.inverse());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let from_identity = render_scan(&moved, &Pose::identity(), &params, 0.0, &mut rng);
        assert_eq!(direct.intensities(), from_identity.intensities());
    }

    #[test]
    fn oracle_identity_pose_gives_equal_pairs() {
        let world = World::generate(5, 8, 15.0);
        let pose = Pose::planar(1.0, 2.0, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = oracle_correspondences(&world, &pose, &pose, 0.0, &mut rng);
        assert_eq!(pairs.len(), 8);
        for c in &pairs {
            assert_relative_eq!(c.reference, c.measurement, epsilon = 1e-12);
        }
    }

    #[test]
    fn oracle_pairs_related_by_relative_transform() {
        let world = World::generate(6, 10, 15.0);
        let pose_a = Pose::planar(1.0, 2.0, 0.3);
        let pose_b = Pose::planar(1.5, 1.8, 0.45);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = oracle_correspondences(&world, &pose_a, &pose_b, 0.0, &mut rng);
        // measurement = T_b^-1 T_a reference
        let rel = pose_b.inverse().compose(&pose_a);
        for c in &pairs {
            let mapped = transform_point(
                &rel,
                &nalgebra::Vector4::new(c.reference.x, c.reference.y, 0.0, 1.0),
            );
            assert_relative_eq!(
                c.measurement,
                Vector3::new(mapped.x, mapped.y, 0.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn groundtruth_csv_round_trips() {
        let qc = Vector6::new(0.3, 0.3, 0.0, 0.0, 0.0, 0.05);
        let gt = generate_trajectory(21, 25, 0.25, &qc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groundtruth.csv");
        write_groundtruth_csv(&gt, &path).unwrap();
        let back = read_groundtruth_csv(&path).unwrap();
        assert_eq!(back.len(), gt.len());
        for k in 0..gt.len() {
            assert_relative_eq!(back.timestamps[k], gt.timestamps[k], epsilon = 1e-9);
            assert_relative_eq!(
                back.poses[k].translation().x,
                gt.poses[k].translation().x,
                max_relative = 1e-8,
                epsilon = 1e-8
            );
            assert_relative_eq!(back.poses[k].yaw(), gt.poses[k].yaw(), epsilon = 1e-8);
            assert_relative_eq!(
                back.velocities[k].vector(),
                gt.velocities[k].vector(),
                max_relative = 1e-8,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn render_sequence_is_deterministic() {
        let world = World::generate(11, 8, 20.0);
        let qc = Vector6::new(0.2, 0.2, 0.0, 0.0, 0.0, 0.02);
        let gt = generate_trajectory(11, 5, 0.25, &qc);
        let params = SensorParams::default();
        let s1 = render_sequence(&world, &gt, &params, 99);
        let s2 = render_sequence(&world, &gt, &params, 99);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.intensities(), b.intensities());
        }
    }
}
