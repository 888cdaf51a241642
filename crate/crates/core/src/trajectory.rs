//! Timestamped pose sequences.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// World pose of a frame: `rot` rotates frame vectors into the world,
/// `pos` is the frame origin in world coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub t: f64,
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
}

impl Pose {
    pub fn identity(t: f64) -> Self {
        Pose {
            t,
            rot: Matrix3::identity(),
            pos: Vector3::zeros(),
        }
    }

    /// Pose of `other` expressed in this frame: `(Cᵀ·C_o, Cᵀ·(p_o - p))`.
    pub fn relative_to_self(&self, other: &Pose) -> (Matrix3<f64>, Vector3<f64>) {
        let rt = self.rot.transpose();
        (rt * other.rot, rt * (other.pos - self.pos))
    }
}

/// Poses with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        for (i, w) in poses.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::StreamIntegrity(format!(
                    "trajectory timestamps not increasing at index {}: {} then {}",
                    i + 1,
                    w[0].t,
                    w[1].t
                )));
            }
        }
        Ok(Trajectory { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Pose whose timestamp is closest to `t`, if within `tol` seconds.
    pub fn nearest(&self, t: f64, tol: f64) -> Option<&Pose> {
        let i = self.poses.partition_point(|p| p.t < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| self.poses.get(j))
            .filter(|p| (p.t - t).abs() <= tol)
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unordered_times() {
        let p = Pose::identity(1.0);
        assert!(Trajectory::new(vec![p, p]).is_err());
        assert!(Trajectory::new(vec![Pose::identity(0.0), p]).is_ok());
    }

    #[test]
    fn nearest_respects_tolerance() {
        let traj = Trajectory::new((0..5).map(|i| Pose::identity(i as f64 * 0.05)).collect()).unwrap();
        assert_eq!(traj.nearest(0.101, 0.01).unwrap().t, 0.1);
        assert_eq!(traj.nearest(0.124, 0.03).unwrap().t, 0.1);
        assert!(traj.nearest(0.125, 0.01).is_none());
        assert!(traj.nearest(-1.0, 0.01).is_none());
        assert_eq!(traj.nearest(0.3, 0.1).unwrap().t, 0.2);
    }
}
