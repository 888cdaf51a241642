//! Shared fixtures for unit tests.

use nalgebra::Vector3;
use rand::Rng;

use crate::lie::so3_exp;
use crate::state::RobocentricState;

pub(crate) fn rand_vec3(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-s..s),
        rng.random_range(-s..s),
        rng.random_range(-s..s),
    )
}

pub(crate) fn random_state(rng: &mut impl Rng) -> RobocentricState {
    let v = |rng: &mut _, s| rand_vec3(rng, s);
    RobocentricState {
        rot_world: so3_exp(&v(rng, 2.0)),
        world_origin: v(rng, 5.0),
        gravity: Vector3::new(0.0, 0.0, 9.81) + v(rng, 1.0),
        rot_body: so3_exp(&v(rng, 0.5)),
        pos_body: v(rng, 1.0),
        vel_body: v(rng, 2.0),
        gyro_bias: v(rng, 0.05),
        accel_bias: v(rng, 0.3),
        scale: rng.random_range(0.5..2.0),
    }
}
