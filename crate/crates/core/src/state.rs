//! Robocentric filter state, its 25-dimensional error state, and the
//! covariance conventions shared by propagation and update.
//!
//! The state is anchored to the robot frame `r` at the last camera instant.
//! `rot_world`, `world_origin` and `gravity` describe the world frame as seen
//! from `r`; `rot_body`, `pos_body` and `vel_body` describe the current IMU
//! frame `v` relative to `r`. Rotations are perturbed on the right
//! (`C = C̄·exp(δφ^)`), everything else additively.

use nalgebra::{Cholesky, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::lie::{is_rotation, so3_exp, so3_log};
use crate::text::f17;

pub const DIM: usize = 25;

/// Column/row offsets of each block in the error state. Every Jacobian in
/// the crate is laid out against these.
pub mod idx {
    pub const ROT_WORLD: usize = 0;
    pub const WORLD_ORIGIN: usize = 3;
    pub const GRAVITY: usize = 6;
    pub const ROT_BODY: usize = 9;
    pub const POS_BODY: usize = 12;
    pub const VEL: usize = 15;
    pub const GYRO_BIAS: usize = 18;
    pub const ACCEL_BIAS: usize = 21;
    pub const SCALE: usize = 24;
}

pub type ErrorState = SVector<f64, DIM>;
pub type Covariance = SMatrix<f64, DIM, DIM>;

/// Standard gravity magnitude used by the simulator and the default
/// initialization.
pub const GRAVITY_MAGNITUDE: f64 = 9.81;

#[derive(Debug, Clone, PartialEq)]
pub struct RobocentricState {
    /// Rotates world-frame vectors into the robocentric frame.
    pub rot_world: Matrix3<f64>,
    /// World origin expressed in the robocentric frame, meters.
    pub world_origin: Vector3<f64>,
    /// Gravity term of the accelerometer model, robocentric frame. A resting
    /// accelerometer reads `rot_bodyᵀ · gravity`, so this points up.
    pub gravity: Vector3<f64>,
    /// Rotates current IMU-frame vectors into the robocentric frame.
    pub rot_body: Matrix3<f64>,
    /// Current IMU position in the robocentric frame, meters.
    pub pos_body: Vector3<f64>,
    /// IMU velocity with respect to the world, IMU frame, m/s.
    pub vel_body: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    /// Multiplies predicted metric translations in the measurement model.
    pub scale: f64,
}

impl Default for RobocentricState {
    fn default() -> Self {
        RobocentricState {
            rot_world: Matrix3::identity(),
            world_origin: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, GRAVITY_MAGNITUDE),
            rot_body: Matrix3::identity(),
            pos_body: Vector3::zeros(),
            vel_body: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            scale: 1.0,
        }
    }
}

fn block3(dx: &ErrorState, at: usize) -> Vector3<f64> {
    dx.fixed_rows::<3>(at).into_owned()
}

impl RobocentricState {
    /// Anchors a state at a world pose: robot frame = IMU frame at this
    /// instant. `rot_wb` rotates IMU vectors into the world, `pos_w` is the IMU
    /// position and `vel_w` its velocity in the world frame; `gravity_w` is
    /// the world gravity acceleration (e.g. `(0, 0, -9.81)`).
    pub fn anchored(
        rot_wb: &Matrix3<f64>,
        pos_w: &Vector3<f64>,
        vel_w: &Vector3<f64>,
        gravity_w: &Vector3<f64>,
    ) -> Self {
        let rot_world = rot_wb.transpose();
        RobocentricState {
            rot_world,
            world_origin: -(rot_world * pos_w),
            gravity: -(rot_world * gravity_w),
            vel_body: rot_world * vel_w,
            ..Default::default()
        }
    }

    /// World pose of the robocentric anchor: (rotation body-to-world, position).
    pub fn anchor_pose(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let rot = self.rot_world.transpose();
        (rot, -(rot * self.world_origin))
    }

    /// World pose of the current IMU frame.
    pub fn body_pose(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let (rot_a, pos_a) = self.anchor_pose();
        (rot_a * self.rot_body, pos_a + rot_a * self.pos_body)
    }

    /// Retraction `x ⊞ δx`.
    pub fn apply_perturbation(&self, dx: &ErrorState) -> Self {
        use idx::*;
        RobocentricState {
            rot_world: self.rot_world * so3_exp(&block3(dx, ROT_WORLD)),
            world_origin: self.world_origin + block3(dx, WORLD_ORIGIN),
            gravity: self.gravity + block3(dx, GRAVITY),
            rot_body: self.rot_body * so3_exp(&block3(dx, ROT_BODY)),
            pos_body: self.pos_body + block3(dx, POS_BODY),
            vel_body: self.vel_body + block3(dx, VEL),
            gyro_bias: self.gyro_bias + block3(dx, GYRO_BIAS),
            accel_bias: self.accel_bias + block3(dx, ACCEL_BIAS),
            scale: self.scale + dx[SCALE],
        }
    }

    /// Inverse retraction: the `δx` with `reference ⊞ δx = self`.
    pub fn difference(&self, reference: &Self) -> ErrorState {
        use idx::*;
        let mut dx = ErrorState::zeros();
        let mut put = |at: usize, v: Vector3<f64>| dx.fixed_rows_mut::<3>(at).copy_from(&v);
        put(ROT_WORLD, so3_log(&(reference.rot_world.transpose() * self.rot_world)));
        put(WORLD_ORIGIN, self.world_origin - reference.world_origin);
        put(GRAVITY, self.gravity - reference.gravity);
        put(ROT_BODY, so3_log(&(reference.rot_body.transpose() * self.rot_body)));
        put(POS_BODY, self.pos_body - reference.pos_body);
        put(VEL, self.vel_body - reference.vel_body);
        put(GYRO_BIAS, self.gyro_bias - reference.gyro_bias);
        put(ACCEL_BIAS, self.accel_bias - reference.accel_bias);
        dx[SCALE] = self.scale - reference.scale;
        dx
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (name, r) in [("rot_world", &self.rot_world), ("rot_body", &self.rot_body)] {
            if !is_rotation(r, 1e-9) {
                return Err(Error::NumericalHealth(format!("{name} is not a rotation")));
            }
        }
        if !(self.scale > 0.0) {
            return Err(Error::NumericalHealth(format!("non-positive scale {}", self.scale)));
        }
        let vectors = [
            self.world_origin,
            self.gravity,
            self.pos_body,
            self.vel_body,
            self.gyro_bias,
            self.accel_bias,
        ];
        if vectors.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NumericalHealth("non-finite state entry".into()));
        }
        Ok(())
    }

    /// Number of values in a text record, timestamp included.
    pub const RECORD_LEN: usize = 38;

    /// One-line plain-text record: `t`, then `rot_world` (row-major),
    /// `world_origin`, `gravity`, `rot_body` (row-major), `pos_body`,
    /// `vel_body`, `gyro_bias`, `accel_bias`, `scale`.
    pub fn to_record(&self, t: f64) -> String {
        let mut v = Vec::with_capacity(Self::RECORD_LEN);
        v.push(t);
        let push_mat = |v: &mut Vec<f64>, m: &Matrix3<f64>| {
            for r in 0..3 {
                for c in 0..3 {
                    v.push(m[(r, c)]);
                }
            }
        };
        push_mat(&mut v, &self.rot_world);
        v.extend(self.world_origin.iter());
        v.extend(self.gravity.iter());
        push_mat(&mut v, &self.rot_body);
        for x in [self.pos_body, self.vel_body, self.gyro_bias, self.accel_bias] {
            v.extend(x.iter());
        }
        v.push(self.scale);
        v.iter().map(|x| f17(*x)).collect::<Vec<_>>().join(" ")
    }

    pub fn from_record(line: &str) -> Result<(f64, Self)> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidInput(format!("state record: {e}")))?;
        if vals.len() != Self::RECORD_LEN {
            return Err(Error::InvalidInput(format!(
                "state record has {} fields, expected {}",
                vals.len(),
                Self::RECORD_LEN
            )));
        }
        let mat = |at: usize| Matrix3::from_row_slice(&vals[at..at + 9]);
        let vec = |at: usize| Vector3::new(vals[at], vals[at + 1], vals[at + 2]);
        let state = RobocentricState {
            rot_world: mat(1),
            world_origin: vec(10),
            gravity: vec(13),
            rot_body: mat(16),
            pos_body: vec(25),
            vel_body: vec(28),
            gyro_bias: vec(31),
            accel_bias: vec(34),
            scale: vals[37],
        };
        Ok((vals[0], state))
    }
}

/// Continuous-time noise densities of the IMU model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParameters {
    /// rad/s/√Hz
    pub gyro: f64,
    /// m/s²/√Hz
    pub accel: f64,
    /// rad/s²/√Hz
    pub gyro_bias: f64,
    /// m/s³/√Hz
    pub accel_bias: f64,
}

impl Default for NoiseParameters {
    fn default() -> Self {
        NoiseParameters {
            gyro: 1e-3,
            accel: 0.1,
            gyro_bias: 1e-5,
            accel_bias: 0.01,
        }
    }
}

impl NoiseParameters {
    pub const ZERO: NoiseParameters = NoiseParameters {
        gyro: 0.0,
        accel: 0.0,
        gyro_bias: 0.0,
        accel_bias: 0.0,
    };

    /// Filter-side noise must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        let all = [self.gyro, self.accel, self.gyro_bias, self.accel_bias];
        if all.iter().all(|s| *s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("noise densities must be positive: {self:?}")))
        }
    }
}

/// Camera-to-robot extrinsic transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    /// Rotates camera-frame vectors into the robot frame.
    pub rot: Matrix3<f64>,
    /// Camera origin in the robot frame, meters.
    pub trans: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Extrinsics {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }
}

/// Initial standard deviations; pose blocks always start at zero because the
/// robocentric frame is defined by the initial pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialCovarianceConfig {
    pub sigma_gravity: f64,
    pub sigma_vel: f64,
    pub sigma_accel_bias: f64,
    pub sigma_gyro_bias: f64,
    /// Variance (not standard deviation) of the scale.
    pub scale_variance: f64,
}

impl Default for InitialCovarianceConfig {
    fn default() -> Self {
        InitialCovarianceConfig {
            sigma_gravity: 0.1,
            sigma_vel: 0.01,
            sigma_accel_bias: 1.0,
            sigma_gyro_bias: 0.1,
            scale_variance: 0.01,
        }
    }
}

pub fn initial_covariance(cfg: &InitialCovarianceConfig) -> Result<Covariance> {
    let entries = [
        cfg.sigma_gravity,
        cfg.sigma_vel,
        cfg.sigma_accel_bias,
        cfg.sigma_gyro_bias,
        cfg.scale_variance,
    ];
    if entries.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!(
            "initial covariance entries must be non-negative: {cfg:?}"
        )));
    }
    let mut p = Covariance::zeros();
    let mut set = |at: usize, var: f64| {
        for i in at..at + 3 {
            p[(i, i)] = var;
        }
    };
    set(idx::GRAVITY, cfg.sigma_gravity.powi(2));
    set(idx::VEL, cfg.sigma_vel.powi(2));
    set(idx::GYRO_BIAS, cfg.sigma_gyro_bias.powi(2));
    set(idx::ACCEL_BIAS, cfg.sigma_accel_bias.powi(2));
    p[(idx::SCALE, idx::SCALE)] = cfg.scale_variance;
    Ok(p)
}

/// `(P + Pᵀ)/2`.
pub fn symmetrize<const N: usize>(p: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (p + p.transpose()) * 0.5
}

/// Cheap positive-semidefiniteness check: finite, symmetric, and
/// `P + tol·I` admits a Cholesky factorization.
pub fn check_psd(p: &Covariance, what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalHealth(format!("{what}: non-finite covariance entry")));
    }
    let scale = p.diagonal().amax().max(1.0);
    let asym = (p - p.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(Error::NumericalHealth(format!(
            "{what}: covariance asymmetric by {asym:.3e}"
        )));
    }
    let shifted = symmetrize(p) + Covariance::identity() * (1e-9 * scale);
    if Cholesky::new(shifted).is_none() {
        return Err(Error::NumericalHealth(format!(
            "{what}: covariance is not positive semidefinite"
        )));
    }
    Ok(())
}

/// Zeroes the scale row and column, turning the scale into a constant.
pub fn freeze_scale(p: &mut Covariance) {
    p.row_mut(idx::SCALE).fill(0.0);
    p.column_mut(idx::SCALE).fill(0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_state;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_perturbation_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng);
        assert_eq!(s.apply_perturbation(&ErrorState::zeros()), s);
    }

    #[test]
    fn rotation_block_retracts_on_the_right() {
        let s = RobocentricState::default();
        let mut dx = ErrorState::zeros();
        dx[idx::ROT_WORLD] = 0.1;
        let out = s.apply_perturbation(&dx);
        assert_eq!(out.rot_world, so3_exp(&Vector3::new(0.1, 0.0, 0.0)));
        let mut rest = out.clone();
        rest.rot_world = s.rot_world;
        assert_eq!(rest, s);
    }

    #[test]
    fn perturbation_near_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let dx = ErrorState::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize() * 1e-3;
            let back = s.apply_perturbation(&dx).apply_perturbation(&-dx);
            assert!(back.difference(&s).amax() < 1e-5);
        }
    }

    #[test]
    fn difference_inverts_retraction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&mut rng);
        let dx = ErrorState::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let moved = s.apply_perturbation(&dx);
        assert_abs_diff_eq!(moved.difference(&s), dx, epsilon = 1e-12);
    }

    #[test]
    fn initial_covariance_layout() {
        let p = initial_covariance(&InitialCovarianceConfig::default()).unwrap();
        let d = p.diagonal();
        let mut expected = [0.0; DIM];
        expected[6..9].fill(0.01);
        expected[15..18].fill(1e-4);
        expected[18..21].fill(0.01);
        expected[21..24].fill(1.0);
        expected[24] = 0.01;
        for (i, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!(d[i], *e, epsilon = 1e-15);
        }
        assert_eq!(p, Covariance::from_diagonal(&d));
    }

    #[test]
    fn initial_covariance_edge_cases() {
        let zero = InitialCovarianceConfig {
            sigma_gravity: 0.0,
            sigma_vel: 0.0,
            sigma_accel_bias: 0.0,
            sigma_gyro_bias: 0.0,
            scale_variance: 0.0,
        };
        assert_eq!(initial_covariance(&zero).unwrap(), Covariance::zeros());
        let bad = InitialCovarianceConfig {
            scale_variance: -1.0,
            ..Default::default()
        };
        assert!(matches!(initial_covariance(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn record_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s = random_state(&mut rng);
        let line = s.to_record(12.5);
        let (t, back) = RobocentricState::from_record(&line).unwrap();
        assert_eq!(t, 12.5);
        assert_eq!(back, s);
        assert!(RobocentricState::from_record("1 2 3").is_err());
    }

    #[test]
    fn anchored_state_reproduces_pose() {
        let rot = so3_exp(&Vector3::new(0.1, 0.2, -0.3));
        let pos = Vector3::new(1.0, -2.0, 0.5);
        let s = RobocentricState::anchored(&rot, &pos, &Vector3::new(1.0, 0.0, 0.0), &Vector3::new(0.0, 0.0, -9.81));
        let (r, p) = s.body_pose();
        assert_abs_diff_eq!(r, rot, epsilon = 1e-15);
        assert_abs_diff_eq!(p, pos, epsilon = 1e-14);
        assert_abs_diff_eq!(s.gravity.norm(), 9.81, epsilon = 1e-12);
    }

    #[test]
    fn psd_check() {
        let p = initial_covariance(&InitialCovarianceConfig::default()).unwrap();
        assert!(check_psd(&p, "p").is_ok());
        let mut bad = p;
        bad[(0, 0)] = -1.0;
        assert!(check_psd(&bad, "p").is_err());
    }

    proptest! {
        #[test]
        fn gravity_norm_first_order(seed in 0u64..1000, scale in 1e-6..1e-1f64) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = random_state(&mut rng);
            let mut dx = ErrorState::zeros();
            let dg = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
            dx.fixed_rows_mut::<3>(idx::GRAVITY).copy_from(&dg);
            let g2 = s.apply_perturbation(&dx).gravity;
            prop_assert!((g2.norm() - s.gravity.norm()).abs() <= dg.norm() + 1e-15);
        }
    }
}
