//! Filter driver: propagate to each image time, update with the relative-pose
//! measurement, re-anchor. Also the two dead-reckoning baselines.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lie::{orthonormalize, so3_log};
use crate::measurements::{covariance_from_logits, RelativePoseMeasurement, UncertaintyConfig};
use crate::photometric::RelativePose;
use crate::propagation::{propagate, propagate_nominal, ImuSample};
use crate::state::{
    freeze_scale, idx, initial_covariance, Covariance, ErrorState, Extrinsics, InitialCovarianceConfig,
    NoiseParameters, RobocentricState,
};
use crate::text::f17;
use crate::trajectory::{Pose, Trajectory};
use crate::update::{
    composition_step, kalman_update, measurement_jacobian, predict_relative_pose, residual, ScaleMode,
};

/// Timestamps closer than this are treated as equal.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterConfig {
    pub noise: NoiseParameters,
    pub initial: InitialCovarianceConfig,
    pub uncertainty: UncertaintyConfig,
    pub extrinsics: Extrinsics,
    pub scale_mode: ScaleMode,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.uncertainty.validate()?;
        initial_covariance(&self.initial).map(|_| ())
    }

    pub fn initial_covariance(&self) -> Result<Covariance> {
        let mut p = initial_covariance(&self.initial)?;
        if self.scale_mode == ScaleMode::Frozen {
            freeze_scale(&mut p);
        }
        Ok(p)
    }
}

/// What the filter knows after processing one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: f64,
    /// Pre-update residual, rotation first.
    pub residual: Vector6<f64>,
    pub covariance_trace: f64,
    pub scale: f64,
    pub scale_variance: f64,
    /// Posterior world pose of the IMU.
    pub pose: Pose,
    /// Covariance of the world-pose error `[δφ, δr]` in the re-anchored
    /// frame (the `rot_world` and `world_origin` blocks).
    pub pose_covariance: Matrix6<f64>,
    /// Posterior metric camera motion over the measurement interval, as a
    /// point transform from the newer camera frame into the older one.
    pub relative: RelativePose,
    /// Posterior state after re-anchoring.
    pub state: RobocentricState,
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub start: Pose,
    pub frames: Vec<FrameRecord>,
}

impl FilterRun {
    /// Start pose followed by every posterior pose.
    pub fn trajectory(&self) -> Trajectory {
        let poses = std::iter::once(self.start)
            .chain(self.frames.iter().map(|f| f.pose))
            .collect();
        Trajectory::new(poses).expect("frame times increase")
    }
}

/// A robocentric EKF advancing through an IMU stream.
#[derive(Debug, Clone)]
pub struct Filter {
    pub state: RobocentricState,
    pub covariance: Covariance,
    pub t: f64,
    config: FilterConfig,
    cursor: usize,
    frame: usize,
}

impl Filter {
    pub fn new(state: RobocentricState, covariance: Covariance, t: f64, config: FilterConfig) -> Result<Self> {
        config.validate()?;
        state.check_invariants()?;
        let mut covariance = covariance;
        if config.scale_mode == ScaleMode::Frozen {
            freeze_scale(&mut covariance);
        }
        Ok(Filter {
            state,
            covariance,
            t,
            config,
            cursor: 0,
            frame: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    /// Integrates from the current time to `t_to`, holding each sample's
    /// readings until the next sample (partial steps at both ends).
    pub fn propagate_to(&mut self, imu: &[ImuSample], t_to: f64) -> Result<()> {
        while self.t < t_to - TIME_EPS {
            while self.cursor + 1 < imu.len() && imu[self.cursor + 1].t <= self.t + TIME_EPS {
                self.cursor += 1;
            }
            let sample = imu
                .get(self.cursor)
                .filter(|s| s.t <= self.t + TIME_EPS)
                .ok_or_else(|| Error::StreamIntegrity(format!("no IMU sample at or before t = {}", self.t)))?;
            let next = imu.get(self.cursor + 1).map_or(t_to, |s| s.t.min(t_to));
            let (state, p) = propagate(&self.state, &self.covariance, sample, &self.config.noise, next - self.t)?;
            self.state = state;
            self.covariance = p;
            self.t = next;
        }
        Ok(())
    }

    /// Propagates to the measurement's end time, updates, and re-anchors.
    pub fn process(&mut self, imu: &[ImuSample], meas: &RelativePoseMeasurement) -> Result<FrameRecord> {
        meas.validate()?;
        if (meas.t_prev - self.t).abs() > 1e-6 {
            return Err(Error::StreamIntegrity(format!(
                "measurement starts at {} but the filter is anchored at {}",
                meas.t_prev, self.t
            )));
        }
        self.propagate_to(imu, meas.t_next)?;
        let frame = self.frame;
        let ext = &self.config.extrinsics;

        let pred = predict_relative_pose(&self.state, ext);
        let res = residual(&meas.rot(), &meas.trans, &pred, self.state.scale);
        if res.diverged() {
            return Err(Error::Divergence {
                frame,
                msg: format!("rotation residual {:.3} rad", res.rotation.norm()),
            });
        }
        let h = measurement_jacobian(&self.state, ext, self.config.scale_mode);
        let r = covariance_from_logits(&meas.logits, &self.config.uncertainty);
        let upd = kalman_update(&self.covariance, &h, &r, &res.to_vector())?;
        let mut posterior = self.state.apply_perturbation(&upd.dx);
        posterior.rot_body = orthonormalize(&posterior.rot_body);
        let relative = predict_relative_pose(&posterior, ext);

        let (mut state, mut p) = composition_step(&posterior, &upd.p_post);
        state.rot_world = orthonormalize(&state.rot_world);
        if self.config.scale_mode == ScaleMode::Frozen {
            freeze_scale(&mut p);
        }
        state.check_invariants().map_err(|e| Error::Divergence {
            frame,
            msg: e.to_string(),
        })?;

        self.state = state;
        self.covariance = p;
        self.frame += 1;
        let (rot, pos) = self.state.anchor_pose();
        Ok(FrameRecord {
            t: self.t,
            residual: res.to_vector(),
            covariance_trace: p.trace(),
            scale: self.state.scale,
            scale_variance: p[(idx::SCALE, idx::SCALE)],
            pose: Pose { t: self.t, rot, pos },
            pose_covariance: pose_block(&p),
            relative: RelativePose {
                rot: relative.rot,
                trans: relative.trans,
            },
            state: self.state.clone(),
        })
    }
}

fn pose_block(p: &Covariance) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    let at = [idx::ROT_WORLD, idx::WORLD_ORIGIN];
    for (bi, i) in at.iter().enumerate() {
        for (bj, j) in at.iter().enumerate() {
            out.fixed_view_mut::<3, 3>(3 * bi, 3 * bj)
                .copy_from(&p.fixed_view::<3, 3>(*i, *j));
        }
    }
    out
}

/// Runs the filter over a measurement stream. The first measurement must
/// start at `t0`, and each next one where the previous ended.
pub fn run_filter(
    config: &FilterConfig,
    initial: &RobocentricState,
    p0: &Covariance,
    t0: f64,
    imu: &[ImuSample],
    meas: &[RelativePoseMeasurement],
) -> Result<FilterRun> {
    let mut filter = Filter::new(initial.clone(), *p0, t0, *config)?;
    let (rot, pos) = initial.body_pose();
    let mut run = FilterRun {
        start: Pose { t: t0, rot, pos },
        frames: Vec::with_capacity(meas.len()),
    };
    for m in meas {
        run.frames.push(filter.process(imu, m)?);
    }
    Ok(run)
}

/// Normalized squared error of the estimated world pose against the true
/// IMU pose, using the re-anchored pose covariance.
pub fn pose_nees(record: &FrameRecord, truth: &Pose) -> Result<f64> {
    // rot_world = C_wbᵀ, world_origin = -C_wbᵀ·p_w; errors follow the
    // retraction of those two blocks.
    let est_rw = record.pose.rot.transpose();
    let true_rw = truth.rot.transpose();
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0)
        .copy_from(&so3_log(&(est_rw.transpose() * true_rw)));
    let est_origin = -(est_rw * record.pose.pos);
    let true_origin = -(true_rw * truth.pos);
    e.fixed_rows_mut::<3>(3).copy_from(&(true_origin - est_origin));
    let chol = record
        .pose_covariance
        .cholesky()
        .ok_or_else(|| Error::NumericalHealth("pose covariance is not positive definite".into()))?;
    Ok(e.dot(&chol.solve(&e)))
}

/// Draws `δx ~ N(0, P)` for a possibly singular `P`.
pub fn sample_error_state(p: &Covariance, rng: &mut impl Rng) -> ErrorState {
    let eig = SymmetricEigen::new(*p);
    let z = ErrorState::from_fn(|i, _| {
        let n: f64 = StandardNormal.sample(rng);
        eig.eigenvalues[i].max(0.0).sqrt() * n
    });
    eig.eigenvectors * z
}

/// Integrates the IMU alone from `initial`, reporting the pose at each of
/// `times`.
pub fn imu_dead_reckoning(initial: &RobocentricState, t0: f64, imu: &[ImuSample], times: &[f64]) -> Result<Trajectory> {
    let mut state = initial.clone();
    let (mut t, mut cursor) = (t0, 0usize);
    let mut poses = Vec::with_capacity(times.len());
    for &target in times {
        while t < target - TIME_EPS {
            while cursor + 1 < imu.len() && imu[cursor + 1].t <= t + TIME_EPS {
                cursor += 1;
            }
            let sample = imu
                .get(cursor)
                .filter(|s| s.t <= t + TIME_EPS)
                .ok_or_else(|| Error::StreamIntegrity(format!("no IMU sample at or before t = {t}")))?;
            let next = imu.get(cursor + 1).map_or(target, |s| s.t.min(target));
            state = propagate_nominal(&state, sample, next - t)?;
            t = next;
        }
        let (rot, pos) = state.body_pose();
        poses.push(Pose { t: target, rot, pos });
    }
    Trajectory::new(poses)
}

/// Composes the measurements from a known starting IMU pose.
pub fn chain_measurements(start: &Pose, ext: &Extrinsics, meas: &[RelativePoseMeasurement]) -> Result<Trajectory> {
    let mut rot = start.rot * ext.rot;
    let mut pos = start.pos + start.rot * ext.trans;
    let ext_rot_t = ext.rot.transpose();
    let mut poses = vec![*start];
    for m in meas {
        pos += rot * m.trans;
        rot = orthonormalize(&(rot * m.rot()));
        let imu_rot = rot * ext_rot_t;
        poses.push(Pose {
            t: m.t_next,
            rot: imu_rot,
            pos: pos - imu_rot * ext.trans,
        });
    }
    Trajectory::new(poses)
}

/// Per-frame diagnostics as CSV; the `nees` column is empty without truth.
pub fn write_diagnostics(path: &Path, run: &FilterRun, nees: Option<&[f64]>) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "t,rot_residual,trans_residual,cov_trace,scale,scale_var,nees").map_err(|e| Error::io(ctx(), e))?;
    for (i, f) in run.frames.iter().enumerate() {
        let nees = nees.and_then(|n| n.get(i)).map(|v| f17(*v)).unwrap_or_default();
        let rot = f.residual.fixed_rows::<3>(0).norm();
        let trans = f.residual.fixed_rows::<3>(3).norm();
        let vals = [f.t, rot, trans, f.covariance_trace, f.scale, f.scale_variance].map(f17);
        writeln!(out, "{},{nees}", vals.join(",")).map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}
