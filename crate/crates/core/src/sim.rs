//! Analytic ground truth: sinusoidal trajectories with closed-form
//! derivatives, exact IMU synthesis, and a textured plane rendered through the
//! pinhole model.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lie::{so3_exp, so3_right_jacobian};
use crate::measurements::relative_camera_pose;
use crate::photometric::{CameraIntrinsics, DepthMap, Image, RelativePose};
use crate::propagation::ImuSample;
use crate::state::{Extrinsics, NoiseParameters, GRAVITY_MAGNITUDE};
use crate::text::KeyValues;
use crate::trajectory::{Pose, Trajectory};

/// World gravity acceleration.
pub fn world_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY_MAGNITUDE)
}

/// Body motion `r(t) = v₀·t + A ⊙ sin(2πf·t + φ)` and
/// `C(t) = exp(θ(t)^)` with `θ(t) = B ⊙ sin(2πg·t + ψ)`, per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub duration: f64,
    pub velocity: Vector3<f64>,
    pub trans_amp: Vector3<f64>,
    pub trans_freq: Vector3<f64>,
    pub trans_phase: Vector3<f64>,
    pub rot_amp: Vector3<f64>,
    pub rot_freq: Vector3<f64>,
    pub rot_phase: Vector3<f64>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            duration: 30.0,
            velocity: Vector3::new(1.0, 0.3, 0.0),
            trans_amp: Vector3::new(1.0, 0.8, 0.3),
            trans_freq: Vector3::new(0.3, 0.5, 0.7),
            trans_phase: Vector3::zeros(),
            rot_amp: Vector3::new(0.1, 0.1, 0.4),
            rot_freq: Vector3::new(0.5, 0.7, 0.3),
            rot_phase: Vector3::repeat(std::f64::consts::FRAC_PI_2),
        }
    }
}

/// Ground truth at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: f64,
    /// IMU-to-world rotation.
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
    /// World-frame velocity.
    pub vel: Vector3<f64>,
    /// World-frame acceleration.
    pub accel: Vector3<f64>,
    /// Body-frame angular rate, `Ċ = C·ω^`.
    pub omega: Vector3<f64>,
}

impl PoseSample {
    pub fn pose(&self) -> Pose {
        Pose {
            t: self.t,
            rot: self.rot,
            pos: self.pos,
        }
    }
}

/// Value and first two derivatives of `a·sin(w·t + p)`.
fn sinusoid(a: f64, f: f64, p: f64, t: f64) -> (f64, f64, f64) {
    let w = TAU * f;
    let (s, c) = (w * t + p).sin_cos();
    (a * s, a * w * c, -a * w * w * s)
}

fn sinusoid3(a: &Vector3<f64>, f: &Vector3<f64>, p: &Vector3<f64>, t: f64) -> [Vector3<f64>; 3] {
    let mut out = [Vector3::zeros(); 3];
    for k in 0..3 {
        let (v, d, dd) = sinusoid(a[k], f[k], p[k], t);
        out[0][k] = v;
        out[1][k] = d;
        out[2][k] = dd;
    }
    out
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if self.trans_freq.iter().chain(self.rot_freq.iter()).any(|f| !(*f >= 0.0)) {
            return Err(Error::Config("frequencies must be non-negative".into()));
        }
        Ok(())
    }

    /// Analytic pose and derivatives at `t`.
    pub fn pose_at(&self, t: f64) -> Result<PoseSample> {
        if !(0.0..=self.duration + 1e-9).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, {}]", self.duration)));
        }
        let [r, v, a] = sinusoid3(&self.trans_amp, &self.trans_freq, &self.trans_phase, t);
        let [theta, theta_dot, _] = sinusoid3(&self.rot_amp, &self.rot_freq, &self.rot_phase, t);
        Ok(PoseSample {
            t,
            rot: so3_exp(&theta),
            pos: self.velocity * t + r,
            vel: self.velocity + v,
            accel: a,
            omega: so3_right_jacobian(&theta) * theta_dot,
        })
    }

    /// Instants `k/rate` up to the duration.
    pub fn times(&self, rate: f64) -> Vec<f64> {
        let n = (self.duration * rate + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 / rate).collect()
    }

    pub fn trajectory(&self, times: &[f64]) -> Result<Trajectory> {
        let poses = times
            .iter()
            .map(|t| self.pose_at(*t).map(|p| p.pose()))
            .collect::<Result<_>>()?;
        Trajectory::new(poses)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let v3 = |v: &Vector3<f64>| format!("{}, {}, {}", v.x, v.y, v.z);
        kv.insert("duration", self.duration);
        kv.insert("velocity", v3(&self.velocity));
        kv.insert("trans_amp", v3(&self.trans_amp));
        kv.insert("trans_freq", v3(&self.trans_freq));
        kv.insert("trans_phase", v3(&self.trans_phase));
        kv.insert("rot_amp", v3(&self.rot_amp));
        kv.insert("rot_freq", v3(&self.rot_freq));
        kv.insert("rot_phase", v3(&self.rot_phase));
        kv
    }

    /// Reads the keys written by [`Self::to_key_values`]; missing keys keep
    /// their defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut spec = TrajectorySpec::default();
        spec.apply_key_values(kv)?;
        Ok(spec)
    }

    /// Overwrites the fields present in `kv` and revalidates.
    pub fn apply_key_values(&mut self, kv: &KeyValues) -> Result<()> {
        let v3 = |key: &str, into: &mut Vector3<f64>| -> Result<()> {
            if let Some(a) = kv.array::<3>(key)? {
                *into = Vector3::from(a);
            }
            Ok(())
        };
        if let Some(d) = kv.f64("duration")? {
            self.duration = d;
        }
        v3("velocity", &mut self.velocity)?;
        v3("trans_amp", &mut self.trans_amp)?;
        v3("trans_freq", &mut self.trans_freq)?;
        v3("trans_phase", &mut self.trans_phase)?;
        v3("rot_amp", &mut self.rot_amp)?;
        v3("rot_freq", &mut self.rot_freq)?;
        v3("rot_phase", &mut self.rot_phase)?;
        self.validate()
    }

    pub const KEYS: [&'static str; 8] = [
        "duration",
        "velocity",
        "trans_amp",
        "trans_freq",
        "trans_phase",
        "rot_amp",
        "rot_freq",
        "rot_phase",
    ];
}

/// Initial sensor biases.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBiases {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Synthesized IMU stream with the bias values in effect at each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedImu {
    pub samples: Vec<ImuSample>,
    pub biases: Vec<ImuBiases>,
}

/// Samples `ω_m = ω + b_ω + n_ω` and `a_m = Cᵀ(a - g) + b_a + n_a` at `rate`.
/// White noise has standard deviation `σ·√rate`; biases random-walk with
/// increments `σ_b/√rate`.
pub fn sample_imu(
    spec: &TrajectorySpec,
    rate: f64,
    biases: &ImuBiases,
    noise: &NoiseParameters,
    seed: u64,
) -> Result<SimulatedImu> {
    if !(rate > 0.0) {
        return Err(Error::Config(format!("IMU rate must be positive, got {rate}")));
    }
    spec.validate()?;
    let densities = [noise.gyro, noise.accel, noise.gyro_bias, noise.accel_bias];
    if densities.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::Config(format!(
            "noise densities must be non-negative: {noise:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |sigma: f64| -> Vector3<f64> {
        if sigma == 0.0 {
            return Vector3::zeros();
        }
        Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)) * sigma
    };
    let white = rate.sqrt();
    let walk = 1.0 / rate.sqrt();
    let g = world_gravity();
    let mut bias = *biases;
    let mut out = SimulatedImu {
        samples: Vec::new(),
        biases: Vec::new(),
    };
    for t in spec.times(rate) {
        let truth = spec.pose_at(t)?;
        let gyro = truth.omega + bias.gyro + gauss(noise.gyro * white);
        let accel = truth.rot.transpose() * (truth.accel - g) + bias.accel + gauss(noise.accel * white);
        out.samples.push(ImuSample { t, gyro, accel });
        out.biases.push(bias);
        bias.gyro += gauss(noise.gyro_bias * walk);
        bias.accel += gauss(noise.accel_bias * walk);
    }
    Ok(out)
}

/// Camera-frame pose of `t1` relative to `t0`, as a point transform from
/// the `t1` camera frame into the `t0` camera frame.
pub fn relative_pose_truth(spec: &TrajectorySpec, t0: f64, t1: f64, ext: &Extrinsics) -> Result<RelativePose> {
    let a = spec.pose_at(t0)?.pose();
    let b = spec.pose_at(t1)?.pose();
    let (rot, trans) = relative_camera_pose(&a, &b, ext);
    Ok(RelativePose { rot, trans })
}

/// World pose of the camera mounted on an IMU pose.
pub fn camera_pose(imu: &Pose, ext: &Extrinsics) -> Pose {
    Pose {
        t: imu.t,
        rot: imu.rot * ext.rot,
        pos: imu.pos + imu.rot * ext.trans,
    }
}

/// One sinusoid of the plane texture, in cycles per meter along the plane
/// axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureWave {
    pub freq: Vector2<f64>,
    pub amp: f64,
    pub phase: f64,
}

/// A textured plane `n·x = offset` in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub base: f64,
    pub waves: Vec<TextureWave>,
}

impl Default for SceneSpec {
    /// Ceiling three meters above the origin, smooth enough that bilinear
    /// resampling stays well below 1e-3 mean error at the default camera.
    fn default() -> Self {
        let wave = |fx: f64, fy: f64, amp: f64, phase: f64| TextureWave {
            freq: Vector2::new(fx, fy),
            amp,
            phase,
        };
        SceneSpec {
            normal: Vector3::z(),
            offset: 3.0,
            base: 0.5,
            waves: vec![
                wave(0.45, 0.1, 0.16, 0.0),
                wave(-0.15, 0.55, 0.14, 1.3),
                wave(0.6, 0.5, 0.08, 2.1),
                wave(0.2, -0.35, 0.1, 0.4),
            ],
        }
    }
}

impl SceneSpec {
    /// In-plane axes completing the normal to a right-handed basis.
    fn plane_axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal.normalize();
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (helper - n * n.dot(&helper)).normalize();
        (e1, n.cross(&e1))
    }

    /// Texture intensity at a world point on the plane.
    pub fn intensity(&self, x: &Vector3<f64>) -> f64 {
        let (e1, e2) = self.plane_axes();
        let uv = Vector2::new(e1.dot(x), e2.dot(x));
        let v: f64 = self
            .waves
            .iter()
            .map(|w| w.amp * (TAU * w.freq.dot(&uv) + w.phase).sin())
            .sum();
        (self.base + v).clamp(0.0, 1.0)
    }
}

/// Exact image and depth of the scene seen from camera pose `cam`.
pub fn render(scene: &SceneSpec, cam: &Pose, k: &CameraIntrinsics) -> Result<(Image, DepthMap)> {
    let n = scene.normal.normalize();
    let offset = scene.offset / scene.normal.norm();
    let mut depth = Vec::with_capacity(k.width * k.height);
    let mut data = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let ray_c = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let ray_w = cam.rot * ray_c;
            let s = (offset - n.dot(&cam.pos)) / n.dot(&ray_w);
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Render(format!(
                    "plane not in front of the camera at pixel ({x}, {y})"
                )));
            }
            depth.push(s);
            data.push(scene.intensity(&(cam.pos + ray_w * s)));
        }
    }
    Ok((
        Image::new(k.width, k.height, data)?,
        DepthMap::new(k.width, k.height, depth)?,
    ))
}
