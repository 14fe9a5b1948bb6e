//! Trajectory representation, plain-text trajectory I/O, and drift metrics.
//!
//! Odometry quality is reported as average relative pose error over
//! fixed-length sub-sequences: for every start frame and every evaluation
//! length, the first frame at which the accumulated groundtruth path length
//! meets the target closes a sub-sequence, and the end-pose discrepancy is
//! charged per metre of actual path travelled. Translation error is a
//! percentage of path length, rotation error is degrees per metre; both are
//! averaged over all sub-sequences of all lengths, with a per-length
//! breakdown retained.
//!
//! The standard evaluation lengths are 100 m through 800 m; short simulator
//! sequences use lengths scaled down tenfold, reported separately and never
//! mixed with full-length numbers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::lie::Pose;

/// Standard evaluation lengths, metres.
pub const FULL_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Tenfold-scaled lengths for short simulator sequences, metres.
pub const SCALED_LENGTHS: [f64; 8] = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];

#[derive(Debug, Error)]
pub enum EvalError {
    /// The groundtruth path is shorter than the smallest evaluation length.
    #[error("groundtruth path is {path_length:.3} m, need at least {required:.3} m")]
    TooShort { path_length: f64, required: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("trajectory parse error: {0}")]
    Parse(String),

    #[error("invalid pose row: {0}")]
    Lie(#[from] crate::lie::LieError),
}

/// A timestamped sequence of body-in-world poses.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    /// Builds a trajectory, checking that timestamps strictly increase and
    /// match the pose count.
    pub fn new(timestamps: Vec<f64>, poses: Vec<Pose>) -> Self {
        assert_eq!(timestamps.len(), poses.len(), "timestamp/pose count mismatch");
        assert!(
            timestamps.windows(2).all(|w| w[0] < w[1]),
            "timestamps must strictly increase"
        );
        Trajectory { timestamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Writes one row per frame: the timestamp followed by the twelve entries
/// of the pose's top 3x4 block in row-major order, space-separated, `%.9e`.
pub fn save_trajectory(trajectory: &Trajectory, path: &Path) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (ts, pose) in trajectory.timestamps.iter().zip(trajectory.poses.iter()) {
        let m = pose.matrix();
        write!(w, "{ts:.9e}")?;
        for row in 0..3 {
            for col in 0..4 {
                write!(w, " {:.9e}", m[(row, col)])?;
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Re-orthonormalises a rotation block read from limited-precision text:
/// Gram-Schmidt on the columns, deterministic and exact for inputs that are
/// already orthonormal to working precision.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).normalize();
    let mut c1: Vector3<f64> = r.column(1).into();
    c1 -= c0 * c0.dot(&c1);
    let c1 = c1.normalize();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

/// Reads a trajectory written by [`save_trajectory`]. Rotation blocks are
/// re-orthonormalised to absorb text round-off before pose validation.
pub fn load_trajectory(path: &Path) -> Result<Trajectory, EvalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut timestamps = Vec::new();
    let mut poses = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| EvalError::Parse(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_, _>>()?;
        if fields.len() != 13 {
            return Err(EvalError::Parse(format!(
                "line {}: expected 13 fields, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut m = Matrix4::identity();
        for row in 0..3 {
            for col in 0..4 {
                m[(row, col)] = fields[1 + row * 4 + col];
            }
        }
        let r = orthonormalize(&m.fixed_view::<3, 3>(0, 0).into_owned());
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        timestamps.push(fields[0]);
        poses.push(Pose::from_matrix(m)?);
    }
    if !timestamps.windows(2).all(|w| w[0] < w[1]) {
        return Err(EvalError::Parse(
            "timestamps must strictly increase".into(),
        ));
    }
    Ok(Trajectory { timestamps, poses })
}

/// Drift over one evaluation length.
#[derive(Debug, Clone, Serialize)]
pub struct LengthError {
    pub length: f64,
    /// Mean translation error as a percentage of path length.
    pub translational_percent: f64,
    /// Mean rotation error in degrees per metre.
    pub rotational_deg_per_m: f64,
    /// Number of sub-sequences averaged.
    pub count: usize,
}

/// Averaged relative-pose drift of an estimated trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    /// Mean translation error over all sub-sequences of all lengths, percent.
    pub translational_percent: f64,
    /// Mean rotation error over all sub-sequences of all lengths, deg/m.
    pub rotational_deg_per_m: f64,
    pub per_length: Vec<LengthError>,
}

/// Rotation angle via the trace formula, with the cosine clamped to [-1, 1]
/// before the arccosine for numerical safety near the identity.
fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Nearest-timestamp association of estimate poses to groundtruth frames.
/// Both trajectories must cover the same interval: every groundtruth frame
/// must have an estimate within half the median groundtruth spacing.
fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<usize> {
    assert!(!est.is_empty() && !gt.is_empty(), "empty trajectory");
    let mut gaps: Vec<f64> = gt.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let half_gap = if gaps.is_empty() {
        f64::INFINITY
    } else {
        gaps[gaps.len() / 2] / 2.0
    };
    let mut out = Vec::with_capacity(gt.len());
    let mut j = 0usize;
    for &t in &gt.timestamps {
        while j + 1 < est.len()
            && (est.timestamps[j + 1] - t).abs() <= (est.timestamps[j] - t).abs()
        {
            j += 1;
        }
        assert!(
            (est.timestamps[j] - t).abs() <= half_gap,
            "trajectories are not time-aligned at t = {t}"
        );
        out.push(j);
    }
    out
}

/// Computes averaged relative-pose drift over every sub-sequence of every
/// evaluation length.
///
/// Sub-sequence starts advance one frame at a time. For each start, the
/// endpoint is the first frame whose accumulated groundtruth path length
/// meets the target; the relative-pose discrepancy at the endpoints is then
/// charged per metre of the actual accumulated length. Lengths with no
/// realisable sub-sequence contribute nothing; if even the shortest length
/// has none, the groundtruth path is too short to evaluate.
pub fn kitti_drift(
    est: &Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
) -> Result<DriftReport, EvalError> {
    assert!(!lengths.is_empty(), "need at least one evaluation length");
    let assoc = associate(est, gt);

    // Accumulated groundtruth path length per frame.
    let mut dist = Vec::with_capacity(gt.len());
    dist.push(0.0);
    for i in 1..gt.len() {
        let step = (gt.poses[i].translation() - gt.poses[i - 1].translation()).norm();
        dist.push(dist[i - 1] + step);
    }
    let total = *dist.last().unwrap();
    let min_len = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    if total < min_len {
        return Err(EvalError::TooShort {
            path_length: total,
            required: min_len,
        });
    }

    let mut per_length = Vec::with_capacity(lengths.len());
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut n_total = 0usize;
    for &target in lengths {
        let mut t_acc = 0.0;
        let mut r_acc = 0.0;
        let mut count = 0usize;
        let mut end = 0usize;
        for start in 0..gt.len() {
            if end < start {
                end = start;
            }
            // First frame whose accumulated path meets the target.
            while end < gt.len() && dist[end] - dist[start] < target {
                end += 1;
            }
            if end >= gt.len() {
                break;
            }
            let actual = dist[end] - dist[start];
            let gt_rel = gt.poses[start].inverse().compose(&gt.poses[end]);
            let est_rel = est.poses[assoc[start]]
                .inverse()
                .compose(&est.poses[assoc[end]]);
            let error = gt_rel.inverse().compose(&est_rel);
            t_acc += error.translation().norm() / actual * 100.0;
            r_acc += rotation_angle(&error.rotation()).to_degrees() / actual;
            count += 1;
        }
        if count > 0 {
            t_sum += t_acc;
            r_sum += r_acc;
            n_total += count;
            per_length.push(LengthError {
                length: target,
                translational_percent: t_acc / count as f64,
                rotational_deg_per_m: r_acc / count as f64,
                count,
            });
        } else {
            per_length.push(LengthError {
                length: target,
                translational_percent: f64::NAN,
                rotational_deg_per_m: f64::NAN,
                count: 0,
            });
        }
    }
    if n_total == 0 {
        return Err(EvalError::TooShort {
            path_length: total,
            required: min_len,
        });
    }
    Ok(DriftReport {
        translational_percent: t_sum / n_total as f64,
        rotational_deg_per_m: r_sum / n_total as f64,
        per_length,
    })
}

/// Writes the per-length breakdown as CSV for plotting.
pub fn write_drift_csv(report: &DriftReport, path: &Path) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "length,translational_percent,rotational_deg_per_m,count")?;
    for row in &report.per_length {
        writeln!(
            w,
            "{},{:.9e},{:.9e},{}",
            row.length, row.translational_percent, row.rotational_deg_per_m, row.count
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line trajectory along +x, one metre per frame.
    fn straight(n: usize, step: f64) -> Trajectory {
        let mut ts = Vec::new();
        let mut poses = Vec::new();
        for i in 0..n {
            ts.push(i as f64 * 0.25);
            poses.push(Pose::planar(i as f64 * step, 0.0, 0.0));
        }
        Trajectory::new(ts, poses)
    }

    /// A smooth wandering planar trajectory for property tests.
    fn wander(n: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts = Vec::new();
        let mut poses = Vec::new();
        let mut x = 0.0;
        let mut y = 0.0;
        let mut yaw: f64 = 0.0;
        for i in 0..n {
            ts.push(i as f64 * 0.25);
            poses.push(Pose::planar(x, y, yaw));
            yaw += rng.random_range(-0.05..0.05);
            let v = rng.random_range(0.8..1.2);
            x += v * yaw.cos();
            y += v * yaw.sin();
        }
        Trajectory::new(ts, poses)
    }

    #[test]
    fn perfect_estimate_has_zero_drift() {
        let gt = wander(200, 1);
        let report = kitti_drift(&gt, &gt, &SCALED_LENGTHS).unwrap();
        assert!(report.translational_percent.abs() < 1e-12);
        // The clamped trace formula has an arccosine noise floor of about
        // sqrt(machine epsilon) radians at the identity.
        assert!(report.rotational_deg_per_m.abs() < 1e-6);
        assert!(report.per_length.iter().all(|l| l.count > 0));
    }

    #[test]
    fn straight_line_scale_error_reports_exactly_one_percent() {
        let gt = straight(120, 1.0);
        let est = Trajectory::new(
            gt.timestamps.clone(),
            gt.poses
                .iter()
                .map(|p| {
                    let t = p.translation();
                    Pose::planar(t.x * 1.01, t.y * 1.01, 0.0)
                })
                .collect(),
        );
        let report = kitti_drift(&est, &gt, &SCALED_LENGTHS).unwrap();
        assert_relative_eq!(report.translational_percent, 1.0, epsilon = 1e-6);
        assert!(report.rotational_deg_per_m.abs() < 1e-9);
        for l in &report.per_length {
            assert_relative_eq!(l.translational_percent, 1.0, epsilon = 1e-6);
        }
    }

    /// Independent brute-force enumerator: recomputes every sub-sequence
    /// from scratch, re-deriving the cumulative length per pair.
    fn brute_force(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> (f64, f64) {
        let seg = |i: usize, j: usize| -> f64 {
            (i..j)
                .map(|k| (gt.poses[k + 1].translation() - gt.poses[k].translation()).norm())
                .sum()
        };
        let mut t_sum = 0.0;
        let mut r_sum = 0.0;
        let mut n = 0usize;
        for &target in lengths {
            for start in 0..gt.len() {
                let mut end = None;
                for cand in start..gt.len() {
                    if seg(start, cand) >= target {
                        end = Some(cand);
                        break;
                    }
                }
                let Some(end) = end else { continue };
                let actual = seg(start, end);
                let gt_rel = gt.poses[start].inverse().compose(&gt.poses[end]);
                let est_rel = est.poses[start].inverse().compose(&est.poses[end]);
                let error = gt_rel.inverse().compose(&est_rel);
                t_sum += error.translation().norm() / actual * 100.0;
                r_sum += rotation_angle(&error.rotation()).to_degrees() / actual;
                n += 1;
            }
        }
        (t_sum / n as f64, r_sum / n as f64)
    }

    #[test]
    fn drift_matches_brute_force_enumeration() {
        let gt = wander(150, 2);
        // A deliberately sloppy estimate: perturb every pose.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = Trajectory::new(
            gt.timestamps.clone(),
            gt.poses
                .iter()
                .map(|p| {
                    let t = p.translation();
                    Pose::planar(
                        t.x + rng.random_range(-0.2..0.2),
                        t.y + rng.random_range(-0.2..0.2),
                        p.yaw() + rng.random_range(-0.02..0.02),
                    )
                })
                .collect(),
        );
        let report = kitti_drift(&est, &gt, &SCALED_LENGTHS).unwrap();
        let (bt, br) = brute_force(&est, &gt, &SCALED_LENGTHS);
        assert_relative_eq!(report.translational_percent, bt, epsilon = 1e-10);
        assert_relative_eq!(report.rotational_deg_per_m, br, epsilon = 1e-10);
    }

    #[test]
    fn drift_is_invariant_to_a_common_rigid_transform() {
        let gt = wander(150, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est = Trajectory::new(
            gt.timestamps.clone(),
            gt.poses
                .iter()
                .map(|p| {
                    let t = p.translation();
                    Pose::planar(
                        t.x + rng.random_range(-0.1..0.1),
                        t.y + rng.random_range(-0.1..0.1),
                        p.yaw() + rng.random_range(-0.01..0.01),
                    )
                })
                .collect(),
        );
        let base = kitti_drift(&est, &gt, &SCALED_LENGTHS).unwrap();
        let t = Pose::planar(17.0, -42.0, 1.3);
        let shift = |tr: &Trajectory| {
            Trajectory::new(
                tr.timestamps.clone(),
                tr.poses.iter().map(|p| t.compose(p)).collect(),
            )
        };
        let moved = kitti_drift(&shift(&est), &shift(&gt), &SCALED_LENGTHS).unwrap();
        assert_relative_eq!(
            base.translational_percent,
            moved.translational_percent,
            epsilon = 1e-10
        );
        assert_relative_eq!(
            base.rotational_deg_per_m,
            moved.rotational_deg_per_m,
            epsilon = 1e-10
        );
    }

    #[test]
    fn short_groundtruth_is_rejected() {
        let gt = straight(5, 1.0); // 4 m of path
        match kitti_drift(&gt, &gt, &SCALED_LENGTHS) {
            Err(EvalError::TooShort { path_length, required }) => {
                assert_relative_eq!(path_length, 4.0, epsilon = 1e-12);
                assert_relative_eq!(required, 10.0, epsilon = 1e-12);
            }
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let t = wander(40, 6);
        let path = dir.path().join("trajectory.txt");
        save_trajectory(&t, &path).unwrap();
        let loaded = load_trajectory(&path).unwrap();
        assert_eq!(loaded.len(), t.len());
        for ((a, b), (ta, tb)) in t
            .poses
            .iter()
            .zip(loaded.poses.iter())
            .zip(t.timestamps.iter().zip(loaded.timestamps.iter()))
        {
            assert_relative_eq!(ta, tb, epsilon = 1e-12);
            assert!((a.matrix() - b.matrix()).abs().max() < 1e-8);
        }
        // A second round trip is stable.
        let path2 = dir.path().join("trajectory2.txt");
        save_trajectory(&loaded, &path2).unwrap();
        let loaded2 = load_trajectory(&path2).unwrap();
        for (a, b) in loaded.poses.iter().zip(loaded2.poses.iter()) {
            assert!((a.matrix() - b.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn malformed_trajectory_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "0.0 1.0 0.0 0.0\n").unwrap();
        assert!(matches!(load_trajectory(&path), Err(EvalError::Parse(_))));
        std::fs::write(&path, "not a number\n").unwrap();
        assert!(matches!(load_trajectory(&path), Err(EvalError::Parse(_))));
    }
}
