//! The default synthetic run: trajectory, IMU stream, oracle measurements
//! and an initial estimate whose error is drawn from the filter's own prior.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::{read_euroc_cam_index, read_euroc_imu, read_groundtruth_states, EurocLayout};
use crate::filter::{chain_measurements, imu_dead_reckoning, pose_nees, run_filter, FilterConfig, FilterRun};
use crate::lie::{quat_to_rot, rot_to_quat};
use crate::measurements::{oracle_measurements, OracleNoise, RelativePoseMeasurement, UncertaintyConfig};
use crate::propagation::ImuSample;
use crate::sim::{sample_imu, world_gravity, ImuBiases, SimulatedImu, TrajectorySpec};
use crate::state::{Covariance, Extrinsics, InitialCovarianceConfig, NoiseParameters, RobocentricState};
use crate::text::KeyValues;
use crate::trajectory::{Pose, Trajectory};
use crate::update::ScaleMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    pub trajectory: TrajectorySpec,
    pub imu_rate: f64,
    pub camera_rate: f64,
    /// Noise injected into the IMU and assumed by the filter.
    pub imu_noise: NoiseParameters,
    /// Noise injected into the measurements; their logits match it.
    pub measurement_noise: OracleNoise,
    /// Factor applied to measured translations (1 = metric).
    pub measurement_scale: f64,
    pub filter: FilterConfig,
    /// Draw the initial gravity, velocity and scale estimates from the prior
    /// instead of starting at the truth.
    pub perturb_initial: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            trajectory: TrajectorySpec::default(),
            imu_rate: 200.0,
            camera_rate: 10.0,
            imu_noise: NoiseParameters::default(),
            measurement_noise: OracleNoise::default(),
            measurement_scale: 1.0,
            filter: FilterConfig {
                // A calibrated IMU: biases known to about 1 mrad/s and 0.1 m/s².
                initial: InitialCovarianceConfig {
                    sigma_gyro_bias: 1e-3,
                    sigma_accel_bias: 0.1,
                    ..Default::default()
                },
                ..Default::default()
            },
            perturb_initial: true,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.filter.validate()?;
        for (name, rate) in [("imu_rate", self.imu_rate), ("camera_rate", self.camera_rate)] {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {rate}")));
            }
        }
        if self.camera_rate > self.imu_rate {
            return Err(Error::Config("camera_rate must not exceed imu_rate".into()));
        }
        let m = self.measurement_noise;
        if !(m.rot >= 0.0 && m.trans >= 0.0 && m.rot.is_finite() && m.trans.is_finite()) {
            return Err(Error::Config(format!("measurement noise must be non-negative: {m:?}")));
        }
        if !(self.measurement_scale > 0.0 && self.measurement_scale.is_finite()) {
            return Err(Error::Config(format!(
                "measurement_scale must be positive, got {}",
                self.measurement_scale
            )));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 21] = [
        "imu_rate",
        "camera_rate",
        "sigma_gyro",
        "sigma_accel",
        "sigma_gyro_bias",
        "sigma_accel_bias",
        "meas_sigma_rot",
        "meas_sigma_trans",
        "measurement_scale",
        "p0_sigma_gravity",
        "p0_sigma_vel",
        "p0_sigma_accel_bias",
        "p0_sigma_gyro_bias",
        "p0_scale_variance",
        "base_variance",
        "beta",
        "scale_mode",
        "ext_rot",
        "ext_trans",
        "perturb_initial",
        "seed",
    ];

    /// Every key understood by [`Self::apply_key_values`].
    pub fn keys() -> impl Iterator<Item = &'static str> {
        Self::KEYS.into_iter().chain(TrajectorySpec::KEYS)
    }

    /// Overwrites the fields present in `kv`. Unknown keys are an error.
    pub fn apply_key_values(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(k) = kv.keys().find(|k| !Self::keys().any(|known| known == *k)) {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
        self.trajectory.apply_key_values(kv)?;
        let set = |key: &str, into: &mut f64| -> Result<()> {
            if let Some(v) = kv.f64(key)? {
                *into = v;
            }
            Ok(())
        };
        set("imu_rate", &mut self.imu_rate)?;
        set("camera_rate", &mut self.camera_rate)?;
        set("sigma_gyro", &mut self.imu_noise.gyro)?;
        set("sigma_accel", &mut self.imu_noise.accel)?;
        set("sigma_gyro_bias", &mut self.imu_noise.gyro_bias)?;
        set("sigma_accel_bias", &mut self.imu_noise.accel_bias)?;
        set("meas_sigma_rot", &mut self.measurement_noise.rot)?;
        set("meas_sigma_trans", &mut self.measurement_noise.trans)?;
        set("measurement_scale", &mut self.measurement_scale)?;
        let init = &mut self.filter.initial;
        set("p0_sigma_gravity", &mut init.sigma_gravity)?;
        set("p0_sigma_vel", &mut init.sigma_vel)?;
        set("p0_sigma_accel_bias", &mut init.sigma_accel_bias)?;
        set("p0_sigma_gyro_bias", &mut init.sigma_gyro_bias)?;
        set("p0_scale_variance", &mut init.scale_variance)?;
        set("base_variance", &mut self.filter.uncertainty.base_variance)?;
        set("beta", &mut self.filter.uncertainty.beta)?;
        if let Some(mode) = kv.get("scale_mode") {
            self.filter.scale_mode = match mode {
                "live" => ScaleMode::Live,
                "frozen" => ScaleMode::Frozen,
                other => {
                    return Err(Error::Config(format!(
                        "scale_mode must be live or frozen, got `{other}`"
                    )))
                }
            };
        }
        if let Some([w, x, y, z]) = kv.array::<4>("ext_rot")? {
            self.filter.extrinsics.rot = quat_to_rot(w, x, y, z);
        }
        if let Some(t) = kv.array::<3>("ext_trans")? {
            self.filter.extrinsics.trans = Vector3::from(t);
        }
        if let Some(b) = kv.bool("perturb_initial")? {
            self.perturb_initial = b;
        }
        if let Some(s) = kv.u64("seed")? {
            self.seed = s;
        }
        self.validate()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.trajectory.to_key_values();
        kv.insert("imu_rate", self.imu_rate);
        kv.insert("camera_rate", self.camera_rate);
        kv.insert("sigma_gyro", self.imu_noise.gyro);
        kv.insert("sigma_accel", self.imu_noise.accel);
        kv.insert("sigma_gyro_bias", self.imu_noise.gyro_bias);
        kv.insert("sigma_accel_bias", self.imu_noise.accel_bias);
        kv.insert("meas_sigma_rot", self.measurement_noise.rot);
        kv.insert("meas_sigma_trans", self.measurement_noise.trans);
        kv.insert("measurement_scale", self.measurement_scale);
        let init = &self.filter.initial;
        kv.insert("p0_sigma_gravity", init.sigma_gravity);
        kv.insert("p0_sigma_vel", init.sigma_vel);
        kv.insert("p0_sigma_accel_bias", init.sigma_accel_bias);
        kv.insert("p0_sigma_gyro_bias", init.sigma_gyro_bias);
        kv.insert("p0_scale_variance", init.scale_variance);
        kv.insert("base_variance", self.filter.uncertainty.base_variance);
        kv.insert("beta", self.filter.uncertainty.beta);
        kv.insert(
            "scale_mode",
            match self.filter.scale_mode {
                ScaleMode::Live => "live",
                ScaleMode::Frozen => "frozen",
            },
        );
        let q = rot_to_quat(&self.filter.extrinsics.rot);
        kv.insert("ext_rot", format!("{}, {}, {}, {}", q[0], q[1], q[2], q[3]));
        let t = self.filter.extrinsics.trans;
        kv.insert("ext_trans", format!("{}, {}, {}", t.x, t.y, t.z));
        kv.insert("perturb_initial", self.perturb_initial);
        kv.insert("seed", self.seed);
        kv
    }

    /// The filter configuration with the scenario's IMU noise.
    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            noise: self.imu_noise,
            ..self.filter
        }
    }

    pub fn generate(&self) -> Result<Scenario> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (imu_seed, meas_seed) = (rng.random::<u64>(), rng.random::<u64>());
        let init = &self.filter.initial;
        let mut gauss = |sigma: f64| -> Vector3<f64> {
            let n = Normal::new(0.0, sigma).expect("validated sigma");
            Vector3::from_fn(|_, _| n.sample(&mut rng))
        };
        let biases = ImuBiases {
            gyro: gauss(init.sigma_gyro_bias),
            accel: gauss(init.sigma_accel_bias),
        };
        let (d_gravity, d_vel) = (gauss(init.sigma_gravity), gauss(init.sigma_vel));
        let d_scale = gauss(init.scale_variance.sqrt()).x;

        let imu = sample_imu(&self.trajectory, self.imu_rate, &biases, &self.imu_noise, imu_seed)?;
        let truth = self
            .trajectory
            .trajectory(&self.trajectory.times(self.camera_rate))?
            .poses()
            .to_vec();
        let filter = self.filter_config();
        let measurements: Vec<_> = oracle_measurements(
            &truth,
            &filter.extrinsics,
            &self.measurement_noise,
            &filter.uncertainty,
            meas_seed,
        )
        .into_iter()
        .map(|m| m.scaled(self.measurement_scale))
        .collect();

        let start = self.trajectory.pose_at(0.0)?;
        let truth_state = RobocentricState {
            gyro_bias: biases.gyro,
            accel_bias: biases.accel,
            scale: self.measurement_scale,
            ..RobocentricState::anchored(&start.rot, &start.pos, &start.vel, &world_gravity())
        };
        let mut initial = RobocentricState {
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            scale: 1.0,
            ..truth_state.clone()
        };
        if self.perturb_initial {
            initial.gravity += d_gravity;
            initial.vel_body += d_vel;
            if filter.scale_mode == ScaleMode::Live {
                initial.scale += d_scale;
            }
        }
        Ok(Scenario {
            covariance: filter.initial_covariance()?,
            config: *self,
            imu,
            truth,
            measurements,
            truth_state,
            initial,
            time_offset: 0.0,
        })
    }
}

/// Generated streams plus the truth needed to score a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub imu: SimulatedImu,
    /// True IMU poses at the camera instants.
    pub truth: Vec<Pose>,
    pub measurements: Vec<RelativePoseMeasurement>,
    /// True initial state, including the sensor biases.
    pub truth_state: RobocentricState,
    /// The filter's initial estimate.
    pub initial: RobocentricState,
    pub covariance: Covariance,
    /// Source-clock time of `t = 0`.
    pub time_offset: f64,
}

impl Scenario {
    pub fn ground_truth(&self) -> Trajectory {
        Trajectory::new(self.truth.clone()).expect("camera times increase")
    }

    pub fn run(&self) -> Result<FilterRun> {
        self.run_with(&self.measurements)
    }

    /// Runs the filter on a replacement measurement stream.
    pub fn run_with(&self, measurements: &[RelativePoseMeasurement]) -> Result<FilterRun> {
        run_filter(
            &self.config.filter_config(),
            &self.initial,
            &self.covariance,
            0.0,
            &self.imu.samples,
            measurements,
        )
    }

    /// Pose NEES for every frame of `run`.
    pub fn nees(&self, run: &FilterRun) -> Result<Vec<f64>> {
        run.frames
            .iter()
            .zip(&self.truth[1..])
            .map(|(f, t)| pose_nees(f, t))
            .collect()
    }

    /// IMU-only integration from the filter's initial estimate.
    pub fn dead_reckoning(&self) -> Result<Trajectory> {
        let times: Vec<f64> = self.truth.iter().map(|p| p.t).collect();
        imu_dead_reckoning(&self.initial, 0.0, &self.imu.samples, &times)
    }

    /// Measurements composed from the true start pose.
    pub fn chained(&self) -> Result<Trajectory> {
        chain_measurements(&self.truth[0], &self.config.filter.extrinsics, &self.measurements)
    }

    pub fn uncertainty(&self) -> &UncertaintyConfig {
        &self.config.filter.uncertainty
    }

    pub fn extrinsics(&self) -> &Extrinsics {
        &self.config.filter.extrinsics
    }
}

/// Ground-truth samples closer than this to a camera stamp stand in for it.
const EUROC_FRAME_TOLERANCE: f64 = 0.01;

impl Scenario {
    /// Oracle measurements on a recorded EuRoC sequence: the real IMU
    /// stream, with relative poses drawn from ground truth plus
    /// `config.measurement_noise` at roughly `config.camera_rate`. The
    /// filter starts at the first usable frame with the ground-truth
    /// velocity and biases. Trajectory, rate and initial-perturbation
    /// settings of `config` are ignored.
    pub fn from_euroc(layout: &EurocLayout, config: &ScenarioConfig) -> Result<Scenario> {
        config.validate()?;
        let imu = read_euroc_imu(&layout.imu)?;
        let gt_states = read_groundtruth_states(&layout.groundtruth)?;
        let gt = Trajectory::new(gt_states.iter().map(|s| s.pose).collect())?;
        let stamps: Vec<f64> = if layout.cam.is_file() {
            read_euroc_cam_index(&layout.cam)?.into_iter().map(|(t, _)| t).collect()
        } else {
            gt.poses().iter().map(|p| p.t).collect()
        };
        let first_imu = imu
            .first()
            .ok_or_else(|| Error::StreamIntegrity(format!("{} has no samples", layout.imu.display())))?
            .t;
        let last_imu = imu.last().map_or(first_imu, |s| s.t);

        let mut truth: Vec<Pose> = Vec::new();
        for t in stamps.into_iter().filter(|t| *t >= first_imu && *t <= last_imu) {
            if truth.last().is_some_and(|p| t - p.t < 1.0 / config.camera_rate - 1e-3) {
                continue;
            }
            if let Some(p) = gt.nearest(t, EUROC_FRAME_TOLERANCE) {
                if truth.last().is_none_or(|q| p.t > q.t) {
                    truth.push(*p);
                }
            }
        }
        if truth.len() < 2 {
            return Err(Error::StreamIntegrity(
                "fewer than two camera frames overlap the ground truth and IMU streams".into(),
            ));
        }
        let start = gt_states
            .iter()
            .find(|s| s.pose.t == truth[0].t)
            .expect("frames come from the ground truth");
        let vel = start.vel.ok_or_else(|| {
            Error::parse(
                &layout.groundtruth,
                1,
                "ground truth lacks the velocity columns needed to start the filter",
            )
        })?;
        let truth_state = RobocentricState {
            gyro_bias: start.gyro_bias.unwrap_or_default(),
            accel_bias: start.accel_bias.unwrap_or_default(),
            ..RobocentricState::anchored(&start.pose.rot, &start.pose.pos, &vel, &world_gravity())
        };

        let filter = config.filter_config();
        let measurements = oracle_measurements(
            &truth,
            &filter.extrinsics,
            &config.measurement_noise,
            &filter.uncertainty,
            config.seed,
        );
        let t0 = truth[0].t;
        // The filter clock starts at zero.
        let shift = |t: f64| t - t0;
        let samples = imu.into_iter().map(|s| ImuSample { t: shift(s.t), ..s }).collect();
        let truth: Vec<Pose> = truth.into_iter().map(|p| Pose { t: shift(p.t), ..p }).collect();
        let measurements = measurements
            .into_iter()
            .map(|m| RelativePoseMeasurement {
                t_prev: shift(m.t_prev),
                t_next: shift(m.t_next),
                ..m
            })
            .collect();
        Ok(Scenario {
            covariance: filter.initial_covariance()?,
            config: *config,
            imu: SimulatedImu {
                samples,
                biases: Vec::new(),
            },
            truth,
            measurements,
            initial: truth_state.clone(),
            truth_state,
            time_offset: t0,
        })
    }
}
