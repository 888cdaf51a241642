//! Relative-pose measurement model, EKF update, and the robocentric
//! composition step that re-anchors the state at the newest camera frame.

use nalgebra::{Cholesky, Matrix3, SMatrix, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::lie::{hat, so3_log};
use crate::state::{idx, symmetrize, Covariance, ErrorState, Extrinsics, RobocentricState, DIM};

pub type MeasurementJacobian = SMatrix<f64, 6, DIM>;
pub type Gain = SMatrix<f64, DIM, 6>;
pub type MeasurementCovariance = SMatrix<f64, 6, 6>;
pub type CompositionJacobian = SMatrix<f64, DIM, DIM>;

/// Residual rotations above this norm (radians) signal divergence.
pub const DIVERGENCE_ANGLE: f64 = 1.0;

/// Whether the scale takes part in the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    #[default]
    Live,
    /// Scale column of `H` is zeroed and its covariance pinned at zero.
    Frozen,
}

/// Camera-frame relative pose predicted from the robot states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedRelativePose {
    /// Rotates vectors from the newer camera frame into the older one.
    pub rot: Matrix3<f64>,
    /// Newer camera origin expressed in the older camera frame, meters.
    pub trans: Vector3<f64>,
}

pub fn predict_relative_pose(state: &RobocentricState, ext: &Extrinsics) -> PredictedRelativePose {
    let ct = ext.rot.transpose();
    PredictedRelativePose {
        rot: ct * state.rot_body * ext.rot,
        trans: ct * (state.rot_body * ext.trans) + ct * (state.pos_body - ext.trans),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Residual {
    /// `[rotation, translation]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    /// True when the rotation residual exceeds [`DIVERGENCE_ANGLE`]; the
    /// small-residual linearization no longer holds.
    pub fn diverged(&self) -> bool {
        !(self.rotation.norm() <= DIVERGENCE_ANGLE) || self.translation.iter().any(|v| !v.is_finite())
    }
}

/// `ε_θ = log(C̃·Cᵀ)`, `ε_r = r̃ - λ·r`.
pub fn residual(
    meas_rot: &Matrix3<f64>,
    meas_trans: &Vector3<f64>,
    pred: &PredictedRelativePose,
    scale: f64,
) -> Residual {
    Residual {
        rotation: so3_log(&(meas_rot * pred.rot.transpose())),
        translation: meas_trans - pred.trans * scale,
    }
}

/// Jacobian of the predicted measurement with respect to the error state,
/// i.e. `ε(x ⊞ δx) ≈ ε(x) - H·δx` for a residual near zero.
pub fn measurement_jacobian(state: &RobocentricState, ext: &Extrinsics, mode: ScaleMode) -> MeasurementJacobian {
    let ct = ext.rot.transpose();
    let ct_rot = ct * state.rot_body;
    let scale = state.scale;
    let mut h = MeasurementJacobian::zeros();

    h.fixed_view_mut::<3, 3>(0, idx::ROT_BODY).copy_from(&ct_rot);
    h.fixed_view_mut::<3, 3>(3, idx::ROT_BODY)
        .copy_from(&(-(ct_rot * hat(&ext.trans)) * scale));
    h.fixed_view_mut::<3, 3>(3, idx::POS_BODY).copy_from(&(ct * scale));
    if mode == ScaleMode::Live {
        let pred = predict_relative_pose(state, ext);
        h.fixed_view_mut::<3, 1>(3, idx::SCALE).copy_from(&pred.trans);
    }
    h
}

#[derive(Debug, Clone)]
pub struct KalmanUpdate {
    pub dx: ErrorState,
    pub p_post: Covariance,
    pub gain: Gain,
}

/// `K = P·Hᵀ·S⁻¹` with `S = H·P·Hᵀ + R` solved by Cholesky,
/// `P⁺ = (I - K·H)·P` (re-symmetrized), `δx = K·ε`.
pub fn kalman_update(
    p: &Covariance,
    h: &MeasurementJacobian,
    r: &MeasurementCovariance,
    eps: &Vector6<f64>,
) -> Result<KalmanUpdate> {
    let ph_t = p * h.transpose();
    let s = symmetrize(&(h * ph_t + r));
    let chol = Cholesky::new(s)
        .ok_or_else(|| Error::NumericalHealth("innovation covariance is not positive definite".into()))?;
    let gain: Gain = chol.solve(&ph_t.transpose()).transpose();
    let p_post = symmetrize(&((Covariance::identity() - gain * h) * p));
    Ok(KalmanUpdate {
        dx: gain * eps,
        p_post,
        gain,
    })
}

/// Jacobian of the composition map in error-state coordinates.
pub fn composition_jacobian(state: &RobocentricState) -> CompositionJacobian {
    use idx::*;
    let rot_t = state.rot_body.transpose();
    let mut u = CompositionJacobian::identity();
    let mut put = |r: usize, c: usize, b: Matrix3<f64>| u.fixed_view_mut::<3, 3>(r, c).copy_from(&b);

    put(ROT_WORLD, ROT_BODY, -(state.rot_world.transpose() * state.rot_body));
    put(WORLD_ORIGIN, WORLD_ORIGIN, rot_t);
    put(WORLD_ORIGIN, POS_BODY, -rot_t);
    put(
        WORLD_ORIGIN,
        ROT_BODY,
        hat(&(rot_t * (state.world_origin - state.pos_body))),
    );
    put(GRAVITY, GRAVITY, rot_t);
    put(GRAVITY, ROT_BODY, hat(&(rot_t * state.gravity)));
    put(ROT_BODY, ROT_BODY, Matrix3::zeros());
    put(POS_BODY, POS_BODY, Matrix3::zeros());
    u
}

/// The composition map on the nominal state: moves the anchor to the
/// current IMU frame and resets the robot pose to identity.
pub fn compose_state(state: &RobocentricState) -> RobocentricState {
    let rot_t = state.rot_body.transpose();
    RobocentricState {
        rot_world: rot_t * state.rot_world,
        world_origin: rot_t * (state.world_origin - state.pos_body),
        gravity: rot_t * state.gravity,
        rot_body: Matrix3::identity(),
        pos_body: Vector3::zeros(),
        ..state.clone()
    }
}

/// Re-anchors state and covariance (`P ← U·P·Uᵀ`).
pub fn composition_step(state: &RobocentricState, p: &Covariance) -> (RobocentricState, Covariance) {
    let u = composition_jacobian(state);
    (compose_state(state), symmetrize(&(u * p * u.transpose())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_exp;
    use crate::testutil::{rand_vec3, random_state};
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};

    fn random_ext(rng: &mut impl Rng) -> Extrinsics {
        Extrinsics {
            rot: so3_exp(&rand_vec3(rng, 2.0)),
            trans: rand_vec3(rng, 0.3),
        }
    }

    fn homogeneous(rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Matrix4<f64> {
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(trans);
        t
    }

    #[test]
    fn prediction_at_identity_robot_pose() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        let s = RobocentricState::default();
        let pred = predict_relative_pose(&s, &random_ext(&mut rng));
        assert_abs_diff_eq!(pred.rot, Matrix3::identity(), epsilon = 1e-15);
        assert_abs_diff_eq!(pred.trans, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn prediction_with_identity_extrinsics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let s = random_state(&mut rng);
        let pred = predict_relative_pose(&s, &Extrinsics::default());
        assert_eq!(pred.rot, s.rot_body);
        assert_eq!(pred.trans, s.pos_body);
    }

    #[test]
    fn prediction_matches_homogeneous_composition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let ext = random_ext(&mut rng);
            let t_rc = homogeneous(&ext.rot, &ext.trans);
            let t_rv = homogeneous(&s.rot_body, &s.pos_body);
            let t = t_rc.try_inverse().unwrap() * t_rv * t_rc;
            let pred = predict_relative_pose(&s, &ext);
            assert_abs_diff_eq!(pred.rot, t.fixed_view::<3, 3>(0, 0).into_owned(), epsilon = 1e-12);
            assert_abs_diff_eq!(pred.trans, t.fixed_view::<3, 1>(0, 3).into_owned(), epsilon = 1e-12);
        }
    }

    #[test]
    fn residual_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let s = random_state(&mut rng);
        let pred = predict_relative_pose(&s, &random_ext(&mut rng));
        let zero = residual(&pred.rot, &pred.trans, &pred, 1.0);
        assert_abs_diff_eq!(zero.to_vector(), Vector6::zeros(), epsilon = 1e-12);

        let scaled = residual(&pred.rot, &(pred.trans * 2.0), &pred, 2.0);
        assert_abs_diff_eq!(scaled.translation, Vector3::zeros(), epsilon = 1e-15);

        let delta_rot = Vector3::new(6e-5, -5e-5, 5e-5);
        let delta_trans = Vector3::new(-4e-5, 7e-5, 3e-5);
        let meas_rot = so3_exp(&delta_rot) * pred.rot;
        let eps = residual(&meas_rot, &(pred.trans + delta_trans), &pred, 1.0);
        assert_abs_diff_eq!(eps.rotation, delta_rot, epsilon = 1e-7);
        assert_abs_diff_eq!(eps.translation, delta_trans, epsilon = 1e-7);
        assert!(!eps.diverged());

        let far = residual(
            &(so3_exp(&Vector3::new(1.2, 0.0, 0.0)) * pred.rot),
            &pred.trans,
            &pred,
            1.0,
        );
        assert!(far.diverged());
    }

    /// Central differences through predict + residual, measurement held at
    /// the unperturbed prediction.
    pub(crate) fn fd_measurement_jacobian(s: &RobocentricState, ext: &Extrinsics) -> MeasurementJacobian {
        let h = 1e-6;
        let pred0 = predict_relative_pose(s, ext);
        let (meas_rot, meas_trans) = (pred0.rot, pred0.trans * s.scale);
        let eps = |st: &RobocentricState| {
            residual(&meas_rot, &meas_trans, &predict_relative_pose(st, ext), st.scale).to_vector()
        };
        let mut out = MeasurementJacobian::zeros();
        for j in 0..DIM {
            let e = ErrorState::ith(j, h);
            let col = (eps(&s.apply_perturbation(&e)) - eps(&s.apply_perturbation(&-e))) / (-2.0 * h);
            out.set_column(j, &col);
        }
        out
    }

    #[test]
    fn measurement_jacobian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let ext = random_ext(&mut rng);
            let h = measurement_jacobian(&s, &ext, ScaleMode::Live);
            let fd = fd_measurement_jacobian(&s, &ext);
            assert!((h - fd).amax() < 1e-4, "{:e}", (h - fd).amax());
        }
    }

    #[test]
    fn measurement_jacobian_layout() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(25);
        let s = random_state(&mut rng);
        let ext = random_ext(&mut rng);
        let h = measurement_jacobian(&s, &ext, ScaleMode::Live);
        for c in 0..DIM {
            let used = (idx::ROT_BODY..idx::POS_BODY + 3).contains(&c) || c == idx::SCALE;
            if !used {
                assert!(h.column(c).iter().all(|v| *v == 0.0), "column {c}");
            }
        }
        let frozen = measurement_jacobian(&s, &ext, ScaleMode::Frozen);
        assert!(frozen.column(idx::SCALE).iter().all(|v| *v == 0.0));

        let ident = measurement_jacobian(&RobocentricState::default(), &Extrinsics::default(), ScaleMode::Live);
        assert_eq!(
            ident.fixed_view::<3, 3>(0, idx::ROT_BODY).into_owned(),
            Matrix3::identity()
        );
    }

    #[test]
    fn uninformative_measurement_leaves_state() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(26);
        let s = random_state(&mut rng);
        let h = measurement_jacobian(&s, &random_ext(&mut rng), ScaleMode::Live);
        let mut p = Covariance::identity() * 0.1;
        p[(idx::ROT_BODY, idx::POS_BODY)] = 0.01;
        p[(idx::POS_BODY, idx::ROT_BODY)] = 0.01;
        let r = MeasurementCovariance::identity() * 1e12;
        let eps = Vector6::from_fn(|i, _| 0.1 * i as f64);
        let up = kalman_update(&p, &h, &r, &eps).unwrap();
        assert!(up.dx.amax() < 1e-9);
        assert!((up.p_post - p).amax() / p.amax() < 1e-9);
    }

    #[test]
    fn hand_evaluated_kalman_algebra() {
        let mut h = MeasurementJacobian::zeros();
        h.fixed_view_mut::<6, 6>(0, 0).fill_with_identity();
        let p = Covariance::identity();
        let r = MeasurementCovariance::identity();
        let eps = Vector6::ith(0, 1.0);
        let up = kalman_update(&p, &h, &r, &eps).unwrap();
        assert_abs_diff_eq!(
            up.gain.fixed_view::<6, 6>(0, 0).into_owned(),
            MeasurementCovariance::identity() * 0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(up.dx, ErrorState::ith(0, 0.5), epsilon = 1e-15);
        for i in 0..DIM {
            assert_abs_diff_eq!(up.p_post[(i, i)], if i < 6 { 0.5 } else { 1.0 }, epsilon = 1e-15);
        }
    }

    #[test]
    fn kalman_update_rejects_indefinite_innovation() {
        let h = MeasurementJacobian::zeros();
        let r = -MeasurementCovariance::identity();
        let res = kalman_update(&Covariance::identity(), &h, &r, &Vector6::zeros());
        assert!(matches!(res, Err(Error::NumericalHealth(_))));
    }

    #[test]
    fn posterior_trace_never_grows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(27);
        for _ in 0..50 {
            let a = Covariance::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let p = a * a.transpose();
            let b = MeasurementCovariance::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let r = b * b.transpose() + MeasurementCovariance::identity() * 1e-3;
            let h = MeasurementJacobian::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let up = kalman_update(&p, &h, &r, &Vector6::zeros()).unwrap();
            assert!(up.p_post.trace() <= p.trace() + 1e-9);
        }
    }

    pub(crate) fn fd_composition_jacobian(s: &RobocentricState) -> CompositionJacobian {
        let h = 1e-6;
        let base = compose_state(s);
        let mut u = CompositionJacobian::zeros();
        for j in 0..DIM {
            let e = ErrorState::ith(j, h);
            let plus = compose_state(&s.apply_perturbation(&e)).difference(&base);
            let minus = compose_state(&s.apply_perturbation(&-e)).difference(&base);
            u.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        u
    }

    #[test]
    fn composition_jacobian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(28);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let err = (composition_jacobian(&s) - fd_composition_jacobian(&s)).amax();
            assert!(err < 1e-4, "{err:e}");
        }
    }

    #[test]
    fn composition_with_identity_robot_pose() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let mut s = random_state(&mut rng);
        s.rot_body = Matrix3::identity();
        s.pos_body = Vector3::zeros();
        // Covariance with empty robot-pose blocks, as right after a previous
        // composition.
        let a = Covariance::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let mut p = a * a.transpose();
        for i in idx::ROT_BODY..idx::POS_BODY + 3 {
            p.row_mut(i).fill(0.0);
            p.column_mut(i).fill(0.0);
        }
        let (s2, p2) = composition_step(&s, &p);
        assert_eq!(s2, s);
        assert_abs_diff_eq!(p2, p, epsilon = 1e-12);
    }

    #[test]
    fn composition_preserves_gravity_norm_and_resets_pose() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(30);
        let s = random_state(&mut rng);
        let (s2, _) = composition_step(&s, &Covariance::identity());
        assert_abs_diff_eq!(s2.gravity.norm(), s.gravity.norm(), epsilon = 1e-12);
        let pred = predict_relative_pose(&s2, &random_ext(&mut rng));
        assert_eq!(pred.trans, Vector3::zeros());
        assert_abs_diff_eq!(pred.rot, Matrix3::identity(), epsilon = 1e-15);
        // Anchor moves to the old body pose.
        let (r_old, p_old) = s.body_pose();
        let (r_new, p_new) = s2.anchor_pose();
        assert_abs_diff_eq!(r_old, r_new, epsilon = 1e-12);
        assert_abs_diff_eq!(p_old, p_new, epsilon = 1e-12);
    }
}
