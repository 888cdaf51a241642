//! SO(3) helpers: skew operators, exponential and logarithm maps, and the
//! left Jacobian.
//!
//! Rotations are plain `Matrix3<f64>` values. Tangent vectors are axis-angle
//! 3-vectors in radians. Perturbations follow the right-multiplicative
//! convention `C = C̄ · exp(δφ^)` everywhere in the crate.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Below this angle the closed forms are replaced by Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Angles above `π - NEAR_PI` take the symmetric-part branch in [`so3_log`].
const NEAR_PI: f64 = 1e-3;

/// `(θ - sin θ) / θ³` is computed by its series below this angle.
const SERIES_THIRD_ORDER: f64 = 1e-2;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds `1e-6`
/// in Frobenius norm.
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.norm() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "vee of a non skew-symmetric matrix (symmetric part norm {:.3e})",
            sym.norm()
        )));
    }
    Ok(vee_unchecked(m))
}

/// Reads the skew part of `m` without validating it.
pub(crate) fn vee_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// `(1 - cos θ) / θ²` in the half-angle form, which has no cancellation.
fn one_minus_cos_over_sq(theta: f64) -> f64 {
    let s = (0.5 * theta).sin() / theta;
    2.0 * s * s
}

fn theta_minus_sin_over_cube(theta: f64) -> f64 {
    if theta < SERIES_THIRD_ORDER {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + k2 * 0.5;
    }
    Matrix3::identity() + k * (theta.sin() / theta) + k2 * one_minus_cos_over_sq(theta)
}

/// Principal logarithm, `‖φ‖ ≤ π`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let skew = vee_unchecked(r);
    let sin_theta = skew.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        return skew * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - NEAR_PI {
        return skew * (theta / sin_theta);
    }

    // Near π the skew part vanishes; recover the axis from the symmetric part
    // (R + Rᵀ)/2 - cos θ·I = (1 - cos θ)·a·aᵀ.
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let diag = b.diagonal();
    let col = diag.imax();
    let mut axis: Vector3<f64> = b.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian `J_l(φ)` of SO(3):
/// `exp((φ + δ)^) ≈ exp((J_l(φ)·δ)^) · exp(φ^)`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k * 0.5 + k2 * (1.0 / 6.0);
    }
    Matrix3::identity() + k * one_minus_cos_over_sq(theta) + k2 * theta_minus_sin_over_cube(theta)
}

/// Right Jacobian, `J_r(φ) = J_l(-φ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&(-phi))
}

/// Largest deviation of `RᵀR` from identity and of `det R` from one.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite()) && rotation_defect(r) <= tol
}

/// Projects a nearly orthonormal matrix back onto SO(3) via SVD.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    u * s * v_t
}

/// Hamilton quaternion (w, x, y, z) to rotation matrix. The quaternion is
/// normalized first.
pub fn quat_to_rot(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
    q.to_rotation_matrix().into_inner()
}

/// Rotation matrix to a Hamilton quaternion `[w, x, y, z]` with `w ≥ 0`.
pub fn rot_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let mut out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out.iter_mut().for_each(|c| *c = -*c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let m = hat(&Vector3::new(1.0, 2.0, 3.0));
        let expected = Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0);
        assert_eq!(m, expected);
    }

    #[test]
    fn vee_examples() {
        assert_eq!(vee(&Matrix3::zeros()).unwrap(), Vector3::zeros());
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(vee(&hat(&v)).unwrap(), v);
        let sym = Matrix3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(vee(&sym), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn exp_quarter_turn_about_x() {
        assert_eq!(so3_exp(&Vector3::zeros()), Matrix3::identity());
        let r = so3_exp(&Vector3::new(PI / 2.0, 0.0, 0.0));
        // Rodrigues at θ = π/2: I + K + K², maps y onto z.
        let y = r * Vector3::y();
        assert_abs_diff_eq!(y, Vector3::z(), epsilon = 1e-15);
    }

    #[test]
    fn log_examples() {
        assert_eq!(so3_log(&Matrix3::identity()), Vector3::zeros());
        let phi = Vector3::new(0.1, -0.2, 0.3);
        assert_abs_diff_eq!(so3_log(&so3_exp(&phi)), phi, epsilon = 1e-10);

        let rz = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let phi = so3_log(&rz);
        assert!((phi.norm() - PI).abs() < 1e-6);
        assert_abs_diff_eq!(phi.normalize().z.abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(so3_exp(&phi), rz, epsilon = 1e-12);
    }

    #[test]
    fn log_near_pi_keeps_sign() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        for delta in [1e-2, 2e-3, 1e-3, 5e-4, 1e-6] {
            let phi = axis * (PI - delta);
            assert_abs_diff_eq!(so3_log(&so3_exp(&phi)), phi, epsilon = 1e-9);
        }
    }

    #[test]
    fn left_jacobian_at_zero_is_identity() {
        assert_eq!(so3_left_jacobian(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn left_jacobian_matches_central_differences() {
        // d/dε log(exp(φ + εδ) · exp(φ)ᵀ) at ε = 0 equals J_l(φ)·δ.
        let h = 1e-6;
        let phis = [
            Vector3::new(0.3, -0.7, 0.2),
            Vector3::new(1e-3, 2e-3, -1e-3),
            Vector3::new(2.0, 0.5, -1.0),
            Vector3::new(5e-8, 0.0, 1e-8),
        ];
        for phi in phis {
            let base_t = so3_exp(&phi).transpose();
            let jl = so3_left_jacobian(&phi);
            for j in 0..3 {
                let e = Vector3::ith(j, 1.0);
                let plus = so3_log(&(so3_exp(&(phi + e * h)) * base_t));
                let minus = so3_log(&(so3_exp(&(phi - e * h)) * base_t));
                let fd = (plus - minus) / (2.0 * h);
                assert_abs_diff_eq!(fd, jl.column(j).into_owned(), epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn jacobian_coefficients_are_smooth_across_branches() {
        // Evaluate on both sides of each branch threshold.
        for theta in [
            SMALL_ANGLE * 0.5,
            SMALL_ANGLE * 2.0,
            SERIES_THIRD_ORDER * 0.99,
            SERIES_THIRD_ORDER * 1.01,
        ] {
            let phi = Vector3::new(0.6, -0.48, 0.64) * theta;
            let jl = so3_left_jacobian(&phi);
            let k = hat(&phi);
            let t2 = theta * theta;
            let reference = Matrix3::identity()
                + k * (0.5 - t2 / 24.0 + t2 * t2 / 720.0)
                + k * k * (1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0);
            assert_abs_diff_eq!(jl, reference, epsilon = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn exp_is_a_rotation(phi in vec3()) {
            let phi = if phi.norm() >= PI { phi * (0.999 * PI / phi.norm()) } else { phi };
            prop_assert!(rotation_defect(&so3_exp(&phi)) < 1e-9);
        }

        #[test]
        fn hat_vee_round_trip(v in vec3(), w in vec3()) {
            prop_assert_eq!(vee(&hat(&v)).unwrap(), v);
            prop_assert!((hat(&v) * w - v.cross(&w)).norm() < 1e-12);
            prop_assert!((hat(&v).transpose() + hat(&v)).norm() == 0.0);
            prop_assert!((hat(&v) * v).norm() < 1e-12);
        }

        #[test]
        fn exp_log_round_trip(dir in vec3(), log_angle in -10.0..0.0f64, frac in 0.0..1.0f64) {
            prop_assume!(dir.norm() > 1e-3);
            // Angles from 1e-10 up to π - 1e-3 on a log/linear mix.
            let angle = if frac < 0.5 { 10f64.powf(log_angle) } else { 1e-10 + (PI - 1e-3 - 1e-10) * (2.0 * frac - 1.0) };
            let phi = dir.normalize() * angle;
            let r = so3_exp(&phi);
            prop_assert!((so3_log(&r) - phi).norm() < 1e-9);
            prop_assert!((so3_exp(&so3_log(&r)) - r).abs().max() < 1e-9);
        }

        #[test]
        fn left_jacobian_transpose_identity(phi in vec3()) {
            let a = so3_left_jacobian(&(-phi));
            let b = so3_left_jacobian(&phi).transpose();
            prop_assert!((a - b).abs().max() < 1e-12);
        }
    }

    #[test]
    fn many_random_exp_are_rotations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let dir = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let phi = dir.normalize() * rng.random_range(0.0..PI);
            assert!(rotation_defect(&so3_exp(&phi)) < 1e-9);
        }
    }

    #[test]
    fn quaternion_conversion() {
        assert_abs_diff_eq!(quat_to_rot(1.0, 0.0, 0.0, 0.0), Matrix3::identity());
        let r = so3_exp(&Vector3::new(0.2, -0.1, 0.4));
        let q = rot_to_quat(&r);
        assert_abs_diff_eq!(quat_to_rot(q[0], q[1], q[2], q[3]), r, epsilon = 1e-14);
    }
}
