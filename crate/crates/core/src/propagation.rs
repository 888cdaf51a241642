//! IMU process model: nominal Euler integration of the robot states and
//! first-order propagation of the error-state covariance.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::lie::{hat, so3_exp};
use crate::state::{check_psd, idx, symmetrize, Covariance, NoiseParameters, RobocentricState, DIM};

/// Number of noise channels: gyro, accel, gyro-bias walk, accel-bias walk.
pub const NOISE_DIM: usize = 12;

/// Largest integration step accepted before the stream is considered broken.
pub const MAX_STEP: f64 = 0.1;

pub type ProcessJacobian = SMatrix<f64, DIM, DIM>;
pub type NoiseJacobian = SMatrix<f64, DIM, NOISE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Seconds.
    pub t: f64,
    /// Angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Specific force, m/s².
    pub accel: Vector3<f64>,
}

/// Instantaneous values of the four noise processes, in the order
/// `[n_ω, n_a, n_bω, n_ba]`. The IMU reads `truth + bias + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuNoise {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

fn check_step(dt: f64) -> Result<()> {
    if !(dt > 0.0) || dt > MAX_STEP || !dt.is_finite() {
        return Err(Error::StreamIntegrity(format!(
            "integration step {dt} s outside (0, {MAX_STEP}]"
        )));
    }
    Ok(())
}

/// One explicit Euler step of the nominal model using the sample's readings
/// over `[t, t + dt]`.
pub fn propagate_nominal(state: &RobocentricState, imu: &ImuSample, dt: f64) -> Result<RobocentricState> {
    propagate_with_noise(state, imu, &ImuNoise::default(), dt)
}

/// Euler step with explicit noise realizations removed from the readings and
/// driving the bias random walks.
pub fn propagate_with_noise(
    state: &RobocentricState,
    imu: &ImuSample,
    noise: &ImuNoise,
    dt: f64,
) -> Result<RobocentricState> {
    check_step(dt)?;
    let omega = imu.gyro - state.gyro_bias - noise.gyro;
    let accel = imu.accel - state.accel_bias - noise.accel;

    let vel_r = state.rot_body * state.vel_body;
    let accel_r = state.rot_body * accel - state.gravity;

    let rot_body = state.rot_body * so3_exp(&(omega * dt));
    let vel_r_next = vel_r + accel_r * dt;

    Ok(RobocentricState {
        pos_body: state.pos_body + vel_r * dt + accel_r * (0.5 * dt * dt),
        vel_body: rot_body.transpose() * vel_r_next,
        rot_body,
        gyro_bias: state.gyro_bias + noise.gyro_bias * dt,
        accel_bias: state.accel_bias + noise.accel_bias * dt,
        ..state.clone()
    })
}

fn put(m: &mut ProcessJacobian, row: usize, col: usize, block: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(row, col).copy_from(block);
}

/// Continuous-time error dynamics `δẋ = F·δx + G·n` linearized at `state`
/// with the sample's readings.
pub fn error_dynamics(state: &RobocentricState, imu: &ImuSample) -> (ProcessJacobian, NoiseJacobian) {
    use idx::*;
    let omega = imu.gyro - state.gyro_bias;
    let rot = &state.rot_body;
    let vel = &state.vel_body;
    let eye = Matrix3::identity();

    let mut f = ProcessJacobian::zeros();
    put(&mut f, ROT_BODY, ROT_BODY, &-hat(&omega));
    put(&mut f, ROT_BODY, GYRO_BIAS, &-eye);

    put(&mut f, POS_BODY, ROT_BODY, &-(rot * hat(vel)));
    put(&mut f, POS_BODY, VEL, rot);

    put(&mut f, VEL, ROT_BODY, &-hat(&(rot.transpose() * state.gravity)));
    put(&mut f, VEL, GRAVITY, &-rot.transpose());
    put(&mut f, VEL, VEL, &-hat(&omega));
    put(&mut f, VEL, GYRO_BIAS, &-hat(vel));
    put(&mut f, VEL, ACCEL_BIAS, &-eye);

    let mut g = NoiseJacobian::zeros();
    g.fixed_view_mut::<3, 3>(ROT_BODY, 0).copy_from(&-eye);
    g.fixed_view_mut::<3, 3>(VEL, 0).copy_from(&-hat(vel));
    g.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&-eye);
    g.fixed_view_mut::<3, 3>(GYRO_BIAS, 6).copy_from(&eye);
    g.fixed_view_mut::<3, 3>(ACCEL_BIAS, 9).copy_from(&eye);
    (f, g)
}

/// First-order transition matrix `I + F·dt`.
pub fn transition_matrix(f: &ProcessJacobian, dt: f64) -> ProcessJacobian {
    ProcessJacobian::identity() + f * dt
}

/// `Q = diag(σ_ω²I, σ_a²I, σ_bω²I, σ_ba²I)`.
pub fn noise_diagonal(noise: &NoiseParameters) -> [f64; NOISE_DIM] {
    let mut q = [0.0; NOISE_DIM];
    q[0..3].fill(noise.gyro.powi(2));
    q[3..6].fill(noise.accel.powi(2));
    q[6..9].fill(noise.gyro_bias.powi(2));
    q[9..12].fill(noise.accel_bias.powi(2));
    q
}

/// `Φ·P·Φᵀ + G·Q·Gᵀ·dt`, re-symmetrized.
pub fn propagate_covariance(
    p: &Covariance,
    phi: &ProcessJacobian,
    g: &NoiseJacobian,
    noise: &NoiseParameters,
    dt: f64,
) -> Result<Covariance> {
    check_psd(p, "covariance before propagation")?;
    let q = noise_diagonal(noise);
    let mut gq = *g;
    for (c, qc) in q.iter().enumerate() {
        gq.column_mut(c).scale_mut(*qc * dt);
    }
    let out = phi * p * phi.transpose() + gq * g.transpose();
    Ok(symmetrize(&out))
}

/// Propagates state and covariance together through one IMU step.
pub fn propagate(
    state: &RobocentricState,
    p: &Covariance,
    imu: &ImuSample,
    noise: &NoiseParameters,
    dt: f64,
) -> Result<(RobocentricState, Covariance)> {
    let (f, g) = error_dynamics(state, imu);
    let next = propagate_nominal(state, imu, dt)?;
    let p_next = propagate_covariance(p, &transition_matrix(&f, dt), &g, noise, dt)?;
    Ok((next, p_next))
}
