//! A window of frames run through the filter twice (forward, and backward
//! over the time-reversed streams) and scored with the minimum
//! reconstruction loss. The result is a scalar function of a few measurement
//! parameters, differentiated here by central differences.

use std::io::Write;
use std::path::Path;

use nalgebra::{Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{Filter, FilterConfig};
use crate::measurements::{oracle_measurements, OracleNoise, RelativePoseMeasurement};
use crate::photometric::{min_reconstruction_loss, warp, CameraIntrinsics, DepthMap, Image, DEFAULT_ALPHA};
use crate::propagation::ImuSample;
use crate::sim::{camera_pose, render, sample_imu, world_gravity, ImuBiases, SceneSpec, TrajectorySpec};
use crate::state::{Covariance, ErrorState, NoiseParameters, RobocentricState};
use crate::text::f17;
use crate::trajectory::Pose;
use crate::update::ScaleMode;

pub const DEFAULT_FRAMES: usize = 10;

/// How θ acts on each measured relative pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// `r = r̃ / exp(θ)`; θ* = ln of the measurement scale.
    LogScale,
    /// `r = r̃ − θ`; θ* = the additive translation bias.
    TranslationBias,
    /// `w = w̃ + θ`.
    LogitOffsets,
}

impl Parameterization {
    pub fn dim(self) -> usize {
        match self {
            Parameterization::LogScale => 1,
            Parameterization::TranslationBias => 3,
            Parameterization::LogitOffsets => 6,
        }
    }

    /// A gradient-descent step that suits θ's units: the loss slope is
    /// about 0.3 per unit log-scale but about 2 per meter of bias.
    pub fn default_lr(self) -> f64 {
        match self {
            Parameterization::TranslationBias => 5e-4,
            _ => 0.05,
        }
    }

    pub fn apply(self, m: &RelativePoseMeasurement, theta: &[f64]) -> Result<RelativePoseMeasurement> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "{self:?} takes {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        let mut out = *m;
        match self {
            Parameterization::LogScale => out.trans /= theta[0].exp(),
            Parameterization::TranslationBias => out.trans -= Vector3::from_column_slice(theta),
            Parameterization::LogitOffsets => out.logits += Vector6::from_column_slice(theta),
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct WindowFrame {
    pub t: f64,
    pub image: Image,
    pub depth: DepthMap,
}

#[derive(Debug, Clone)]
pub struct WindowProblem {
    pub config: FilterConfig,
    /// State at the first frame.
    pub initial: RobocentricState,
    /// State at the last frame with the motion reversed: velocity and gyro
    /// bias negated.
    pub reverse_initial: RobocentricState,
    pub covariance: Covariance,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<WindowFrame>,
    /// Frame `k` to frame `k + 1`, before θ is applied.
    pub measurements: Vec<RelativePoseMeasurement>,
    pub intrinsics: CameraIntrinsics,
    pub parameterization: Parameterization,
    pub alpha: f64,
}

impl WindowProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n < 3 {
            return Err(Error::InvalidInput(format!(
                "a window needs at least 3 frames, got {n}"
            )));
        }
        if self.measurements.len() != n - 1 {
            return Err(Error::InvalidInput(format!(
                "{n} frames need {} measurements, got {}",
                n - 1,
                self.measurements.len()
            )));
        }
        for (k, m) in self.measurements.iter().enumerate() {
            if (m.t_prev - self.frames[k].t).abs() > 1e-6 || (m.t_next - self.frames[k + 1].t).abs() > 1e-6 {
                return Err(Error::StreamIntegrity(format!(
                    "measurement {k} does not span frames {k} and {}",
                    k + 1
                )));
            }
        }
        let (t0, t1) = (self.frames[0].t, self.frames[n - 1].t);
        let covered =
            self.imu.first().is_some_and(|s| s.t <= t0 + 1e-9) && self.imu.last().is_some_and(|s| s.t >= t1 - 1e-9);
        if !covered {
            return Err(Error::StreamIntegrity(format!(
                "IMU stream does not cover [{t0}, {t1}]"
            )));
        }
        self.intrinsics.validate()?;
        for (k, f) in self.frames.iter().enumerate() {
            let dims = [f.image.width(), f.image.height(), f.depth.width(), f.depth.height()];
            if dims
                != [
                    self.intrinsics.width,
                    self.intrinsics.height,
                    self.intrinsics.width,
                    self.intrinsics.height,
                ]
            {
                return Err(Error::InvalidInput(format!("frame {k} does not match the camera size")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub t: f64,
    /// Forward-pass posterior IMU pose.
    pub pose: Pose,
    /// Pre-update residual of the measurement ending at this frame.
    pub residual: Option<Vector6<f64>>,
    pub covariance_diagonal: Option<ErrorState>,
    /// Minimum reconstruction loss with this frame as the target.
    pub loss: Option<f64>,
}

/// One entry per frame of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub frames: Vec<TraceEntry>,
}

/// Time-reversed IMU stream on `τ = t_end − t`: rates flip sign, specific
/// force is unchanged.
fn reverse_imu(imu: &[ImuSample], t_end: f64) -> Vec<ImuSample> {
    imu.iter()
        .rev()
        .map(|s| ImuSample {
            t: t_end - s.t,
            gyro: -s.gyro,
            accel: s.accel,
        })
        .collect()
}

/// The same motion seen from the other end: `C̃ᵀ`, `−C̃ᵀ·r̃`, on reversed time.
fn reverse_measurement(m: &RelativePoseMeasurement, t_end: f64) -> RelativePoseMeasurement {
    let rot_t = m.rot().transpose();
    RelativePoseMeasurement {
        t_prev: t_end - m.t_next,
        t_next: t_end - m.t_prev,
        rot_vec: -m.rot_vec,
        trans: -(rot_t * m.trans),
        logits: m.logits,
    }
}

/// Sum of the `N − 2` minimum reconstruction losses, with the forward
/// posterior supplying `I_{t−1→t}` and the reverse posterior `I_{t+1→t}`.
pub fn window_loss(problem: &WindowProblem, theta: &[f64]) -> Result<(f64, PipelineTrace)> {
    problem.validate()?;
    let n = problem.frames.len();
    let meas: Vec<_> = problem
        .measurements
        .iter()
        .map(|m| problem.parameterization.apply(m, theta))
        .collect::<Result<_>>()?;

    let t0 = problem.frames[0].t;
    let mut fwd = Filter::new(problem.initial.clone(), problem.covariance, t0, problem.config)?;
    let (rot, pos) = problem.initial.body_pose();
    let mut trace = vec![TraceEntry {
        t: t0,
        pose: Pose { t: t0, rot, pos },
        residual: None,
        covariance_diagonal: Some(problem.covariance.diagonal()),
        loss: None,
    }];
    let mut forward = Vec::with_capacity(n - 1);
    for m in &meas {
        let rec = fwd.process(&problem.imu, m)?;
        trace.push(TraceEntry {
            t: rec.t,
            pose: rec.pose,
            residual: Some(rec.residual),
            covariance_diagonal: Some(fwd.covariance.diagonal()),
            loss: None,
        });
        forward.push(rec.relative);
    }

    let t_end = problem.frames[n - 1].t;
    let imu_rev = reverse_imu(&problem.imu, t_end);
    let mut rev = Filter::new(problem.reverse_initial.clone(), problem.covariance, 0.0, problem.config)?;
    let mut backward = Vec::with_capacity(n - 1);
    for m in meas.iter().rev() {
        let rec = rev
            .process(&imu_rev, &reverse_measurement(m, t_end))
            .map_err(|e| match e {
                // Report the frame in forward order.
                Error::Divergence { frame, msg } => Error::Divergence {
                    frame: n - 1 - frame,
                    msg: format!("reverse pass: {msg}"),
                },
                other => other,
            })?;
        backward.push(rec.relative);
    }
    backward.reverse();

    let k = &problem.intrinsics;
    let losses: Vec<f64> = (1..n - 1)
        .into_par_iter()
        .map(|t| {
            let target = &problem.frames[t];
            // forward[t−1] maps frame t into frame t−1; backward[t] maps
            // frame t into frame t+1.
            let prev = warp(&problem.frames[t - 1].image, &target.depth, &forward[t - 1], k)?;
            let next = warp(&problem.frames[t + 1].image, &target.depth, &backward[t], k)?;
            min_reconstruction_loss(&target.image, (&prev.0, &prev.1), (&next.0, &next.1), problem.alpha)
        })
        .collect::<Result<_>>()?;
    for (t, l) in (1..n - 1).zip(&losses) {
        trace[t].loss = Some(*l);
    }
    Ok((losses.iter().sum(), PipelineTrace { frames: trace }))
}

/// Central differences `(f(θ + h·e_j) − f(θ − h·e_j)) / 2h`, coordinates in
/// parallel.
pub fn fd_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    (0..theta.len())
        .into_par_iter()
        .map(|j| {
            let eval = |d: f64| -> Result<f64> {
                let mut x = theta.to_vec();
                x[j] += d;
                let v = f(&x)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite { coord: j, value: v })
                }
            };
            Ok((eval(h)? - eval(-h)?) / (2.0 * h))
        })
        .collect()
}

/// Gradients at `h` and `h/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub h: f64,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

impl Refinement {
    /// Component-wise `|g_h − g_{h/2}| / max(|g_h|, |g_{h/2}|)`; zero where
    /// both are below `floor`.
    pub fn relative_differences(&self, floor: f64) -> Vec<f64> {
        self.coarse
            .iter()
            .zip(&self.fine)
            .map(|(a, b)| {
                let m = a.abs().max(b.abs());
                if m <= floor {
                    0.0
                } else {
                    (a - b).abs() / m
                }
            })
            .collect()
    }

    /// `|g_h − g_{h/2}|` per component, a noise-floor estimate.
    pub fn noise(&self) -> Vec<f64> {
        self.coarse.iter().zip(&self.fine).map(|(a, b)| (a - b).abs()).collect()
    }

    pub fn consistent(&self, tol: f64, floor: f64) -> bool {
        self.relative_differences(floor).iter().all(|d| *d <= tol)
    }
}

pub fn h_refinement<F>(f: F, theta: &[f64], h: f64) -> Result<Refinement>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    Ok(Refinement {
        h,
        coarse: fd_gradient(&f, theta, h)?,
        fine: fd_gradient(&f, theta, h / 2.0)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStep {
    pub step: usize,
    pub loss: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Best θ seen.
    pub theta: Vec<f64>,
    pub loss: f64,
    /// Loss at every iterate, including the last.
    pub history: Vec<CalibrationStep>,
}

/// Plain gradient descent on the window loss with FD gradients of step `h`.
/// The loss is recorded, not required to decrease; the best iterate wins.
pub fn calibrate(problem: &WindowProblem, theta0: &[f64], steps: usize, lr: f64, h: f64) -> Result<Calibration> {
    if steps == 0 || !(lr > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need steps ≥ 1 and lr > 0, got {steps} and {lr}"
        )));
    }
    let f = |x: &[f64]| window_loss(problem, x).map(|(l, _)| l);
    let mut theta = theta0.to_vec();
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let loss = match f(&theta) {
            Ok(l) => l,
            Err(e) if step == 0 => return Err(e),
            Err(e) => {
                log::warn!("calibration stopped at step {step}: {e}");
                break;
            }
        };
        history.push(CalibrationStep {
            step,
            loss,
            theta: theta.clone(),
        });
        if step == steps {
            break;
        }
        let g = match fd_gradient(f, &theta, h) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("calibration stopped at step {step}: {e}");
                break;
            }
        };
        for (t, g) in theta.iter_mut().zip(g) {
            *t -= lr * g;
        }
    }
    let best = history
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .expect("step 0 is recorded");
    Ok(Calibration {
        theta: best.theta.clone(),
        loss: best.loss,
        history,
    })
}

/// One line per step: `step loss θ…`.
pub fn write_calibration_report(path: &Path, history: &[CalibrationStep]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = std::io::BufWriter::new(file);
    for s in history {
        let theta: Vec<String> = s.theta.iter().map(|v| f17(*v)).collect();
        writeln!(out, "{} {} {}", s.step, f17(s.loss), theta.join(" ")).map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Runs the filter with the scale live from `lambda0`, returning λ̂ after
/// every frame.
pub fn scale_convergence_run(
    config: &FilterConfig,
    initial: &RobocentricState,
    covariance: &Covariance,
    t0: f64,
    imu: &[ImuSample],
    measurements: &[RelativePoseMeasurement],
    lambda0: f64,
) -> Result<Vec<f64>> {
    let config = FilterConfig {
        scale_mode: ScaleMode::Live,
        ..*config
    };
    let initial = RobocentricState {
        scale: lambda0,
        ..initial.clone()
    };
    let mut filter = Filter::new(initial, *covariance, t0, config)?;
    measurements
        .iter()
        .map(|m| filter.process(imu, m).map(|r| r.scale))
        .collect()
}

/// Synthetic window over the rendered plane scene.
#[derive(Debug, Clone)]
pub struct WindowSpec {
    pub trajectory: TrajectorySpec,
    /// Time of the first frame.
    pub t_start: f64,
    pub frames: usize,
    pub camera_rate: f64,
    pub imu_rate: f64,
    pub scene: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub filter: FilterConfig,
    pub measurement_noise: OracleNoise,
    /// Measured translations are `scale · r + bias`.
    pub injected_scale: f64,
    pub injected_bias: Vector3<f64>,
    pub parameterization: Parameterization,
    pub seed: u64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            trajectory: TrajectorySpec::default(),
            t_start: 2.0,
            frames: DEFAULT_FRAMES,
            camera_rate: 10.0,
            // At 200 Hz the Euler position bias (about 0.5% of each frame's
            // translation) visibly shifts the loss minimum off the truth.
            imu_rate: 1000.0,
            scene: SceneSpec::default(),
            intrinsics: CameraIntrinsics::default(),
            filter: FilterConfig {
                scale_mode: ScaleMode::Frozen,
                ..Default::default()
            },
            measurement_noise: OracleNoise::ZERO,
            injected_scale: 1.0,
            injected_bias: Vector3::zeros(),
            parameterization: Parameterization::LogScale,
            seed: 0,
        }
    }
}

impl WindowSpec {
    /// θ that undoes the injected corruption.
    pub fn true_theta(&self) -> Vec<f64> {
        match self.parameterization {
            Parameterization::LogScale => vec![self.injected_scale.ln()],
            Parameterization::TranslationBias => self.injected_bias.iter().copied().collect(),
            Parameterization::LogitOffsets => vec![0.0; 6],
        }
    }
}

/// Renders the frames, samples a noise-free IMU and builds the oracle
/// measurements, then injects the scale and bias.
pub fn synthetic_window(spec: &WindowSpec) -> Result<WindowProblem> {
    if spec.frames < 3 {
        return Err(Error::InvalidInput(format!(
            "a window needs at least 3 frames, got {}",
            spec.frames
        )));
    }
    let times: Vec<f64> = (0..spec.frames)
        .map(|k| spec.t_start + k as f64 / spec.camera_rate)
        .collect();
    let t_end = *times.last().expect("frames ≥ 3");
    if t_end > spec.trajectory.duration {
        return Err(Error::Config(format!(
            "window ends at {t_end} s, after the trajectory ({} s)",
            spec.trajectory.duration
        )));
    }
    let imu = sample_imu(
        &spec.trajectory,
        spec.imu_rate,
        &ImuBiases::default(),
        &NoiseParameters::ZERO,
        spec.seed,
    )?;
    let poses = spec.trajectory.trajectory(&times)?.poses().to_vec();
    let ext = spec.filter.extrinsics;
    let frames = poses
        .par_iter()
        .map(|p| {
            let (image, depth) = render(&spec.scene, &camera_pose(p, &ext), &spec.intrinsics)?;
            Ok(WindowFrame { t: p.t, image, depth })
        })
        .collect::<Result<Vec<_>>>()?;
    let measurements = oracle_measurements(
        &poses,
        &ext,
        &spec.measurement_noise,
        &spec.filter.uncertainty,
        spec.seed,
    )
    .into_iter()
    .map(|mut m| {
        m.trans = m.trans * spec.injected_scale + spec.injected_bias;
        m
    })
    .collect();

    let g = world_gravity();
    let first = spec.trajectory.pose_at(times[0])?;
    let last = spec.trajectory.pose_at(t_end)?;
    Ok(WindowProblem {
        config: spec.filter,
        initial: RobocentricState::anchored(&first.rot, &first.pos, &first.vel, &g),
        reverse_initial: RobocentricState::anchored(&last.rot, &last.pos, &(-last.vel), &g),
        covariance: spec.filter.initial_covariance()?,
        imu: imu
            .samples
            .into_iter()
            .filter(|s| s.t >= times[0] - 1.0 / spec.imu_rate && s.t <= t_end + 1.0 / spec.imu_rate)
            .collect(),
        frames,
        measurements,
        intrinsics: spec.intrinsics,
        parameterization: spec.parameterization,
        alpha: DEFAULT_ALPHA,
    })
}
