//! Thrust-attitude tracking controller and the rotation/attitude-error algebra
//! shared by the controller network's loss.
//!
//! Conventions: yaw is fixed at zero. `desired_rotation(φ, θ)` is the product
//! `Rx(φ)·Ry(θ)` of the two elementary frame rotations; its columns are the
//! body axes expressed in the world frame, so the third column is the thrust
//! direction `(−sinθ, sinφ·cosθ, cosφ·cosθ)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gravitational acceleration, m/s².
pub const GRAVITY: f64 = 9.81;

/// Below this norm (m/s²) the desired thrust direction is undefined.
pub const MIN_THRUST: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("thrust singularity: ‖f_des‖ = {norm:.4} m/s², vertical component {vertical:.4} m/s²")]
    ThrustSingularity { norm: f64, vertical: f64 },
    #[error("non-finite controller input")]
    NonFinite,
}

/// Roll/pitch/thrust command for the inner attitude loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttitudeThrustCmd {
    /// rad
    pub roll: f64,
    /// rad
    pub pitch: f64,
    /// Mass-normalized collective thrust, m/s².
    pub thrust: f64,
}

impl AttitudeThrustCmd {
    pub fn new(roll: f64, pitch: f64, thrust: f64) -> Self {
        Self { roll, pitch, thrust }
    }

    /// Level attitude with thrust balancing gravity.
    pub fn hover() -> Self {
        Self::new(0.0, 0.0, GRAVITY)
    }

    pub fn is_finite(&self) -> bool {
        self.roll.is_finite() && self.pitch.is_finite() && self.thrust.is_finite()
    }
}

/// The 12-dimensional controller input, in network order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlErrors {
    /// Desired minus current position, m.
    pub e_p: Vector3<f64>,
    /// Desired minus current velocity, m/s.
    pub e_v: Vector3<f64>,
    /// Acceleration slot, m/s². Carries the acceleration feed-forward.
    pub e_a: Vector3<f64>,
    /// Current Euler attitude (roll, pitch, yaw), rad.
    pub att: Vector3<f64>,
}

impl ControlErrors {
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[i] = self.e_p[i];
            out[3 + i] = self.e_v[i];
            out[6 + i] = self.e_a[i];
            out[9 + i] = self.att[i];
        }
        out
    }

    pub fn from_array(x: &[f64; 12]) -> Self {
        Self {
            e_p: Vector3::new(x[0], x[1], x[2]),
            e_v: Vector3::new(x[3], x[4], x[5]),
            e_a: Vector3::new(x[6], x[7], x[8]),
            att: Vector3::new(x[9], x[10], x[11]),
        }
    }
}

/// Diagonal PD gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlGains {
    /// Position gain, 1/s².
    pub k_p: [f64; 3],
    /// Velocity gain, 1/s.
    pub k_v: [f64; 3],
}

impl Default for ControlGains {
    fn default() -> Self {
        Self { k_p: [6.0, 6.0, 8.0], k_v: [4.0, 4.0, 5.0] }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_p.iter().chain(self.k_v.iter()).all(|k| *k > 0.0 && k.is_finite()) {
            Ok(())
        } else {
            Err(format!("controller gains must be strictly positive: {self:?}"))
        }
    }
}

/// `Rx(φ)·Ry(θ)` with yaw held at zero.
pub fn desired_rotation(phi: f64, theta: f64) -> Matrix3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Matrix3::new(
        ct, 0.0, -st, //
        sp * st, cp, sp * ct, //
        cp * st, -sp, cp * ct,
    )
}

/// Partial derivatives of [`desired_rotation`] with respect to φ and θ.
pub fn desired_rotation_partials(phi: f64, theta: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let d_phi = Matrix3::new(
        0.0, 0.0, 0.0, //
        cp * st, -sp, cp * ct, //
        -sp * st, -cp, -sp * ct,
    );
    let d_theta = Matrix3::new(
        -st, 0.0, -ct, //
        sp * ct, 0.0, -sp * st, //
        cp * ct, 0.0, -cp * st,
    );
    (d_phi, d_theta)
}

/// Clamped cosine argument `(tr[R_l R_pᵀ] − 1)/2` of the geodesic angle.
pub(crate) fn geodesic_cosine(phi_l: f64, theta_l: f64, phi_p: f64, theta_p: f64) -> (f64, bool) {
    let rl = desired_rotation(phi_l, theta_l);
    let rp = desired_rotation(phi_p, theta_p);
    let c = (rl.component_mul(&rp).sum() - 1.0) / 2.0;
    if c >= 1.0 {
        (1.0, true)
    } else if c <= -1.0 {
        (-1.0, true)
    } else {
        (c, false)
    }
}

/// Geodesic angle between the attitudes `(φ_l, θ_l)` and `(φ_p, θ_p)`, in `[0, π]`.
pub fn euler_error(phi_l: f64, theta_l: f64, phi_p: f64, theta_p: f64) -> f64 {
    geodesic_cosine(phi_l, theta_l, phi_p, theta_p).0.acos()
}

/// Thrust direction of a roll/pitch pair (third column of the rotation).
pub fn thrust_axis(phi: f64, theta: f64) -> Vector3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Vector3::new(-st, sp * ct, cp * ct)
}

/// Roll and pitch in `(−π/2, π/2)` whose thrust axis is the unit vector `z`.
/// Requires `z.z > 0`.
pub fn attitude_from_axis(z: &Vector3<f64>) -> (f64, f64) {
    let pitch = (-z.x).clamp(-1.0, 1.0).asin();
    let roll = z.y.atan2(z.z);
    (roll, pitch)
}

/// PD position tracking with acceleration feed-forward.
///
/// `f_des = a_ff + K_p∘e_p + K_v∘e_v + g·e₃`, thrust is `‖f_des‖` and the
/// attitude aligns the body z-axis with `f_des`. The acceleration feed-forward
/// is `desired_acc`; `errors.e_a` and `errors.att` do not enter the law.
pub fn track(
    errors: &ControlErrors,
    desired_acc: &Vector3<f64>,
    gains: &ControlGains,
) -> Result<AttitudeThrustCmd, ControlError> {
    let f_des = desired_force(errors, desired_acc, gains)?;
    cmd_from_force(&f_des)
}

/// The mass-normalized force the tracking law asks for.
pub fn desired_force(
    errors: &ControlErrors,
    desired_acc: &Vector3<f64>,
    gains: &ControlGains,
) -> Result<Vector3<f64>, ControlError> {
    let kp = Vector3::from(gains.k_p);
    let kv = Vector3::from(gains.k_v);
    let f = desired_acc + kp.component_mul(&errors.e_p) + kv.component_mul(&errors.e_v)
        + Vector3::new(0.0, 0.0, GRAVITY);
    if f.iter().any(|x| !x.is_finite()) {
        return Err(ControlError::NonFinite);
    }
    Ok(f)
}

/// Converts a desired mass-normalized force into roll, pitch and thrust.
///
/// A force with non-positive vertical component has no attitude with
/// `|roll|, |pitch| < π/2` and is reported as a thrust singularity, as is a
/// force shorter than [`MIN_THRUST`].
pub fn cmd_from_force(f_des: &Vector3<f64>) -> Result<AttitudeThrustCmd, ControlError> {
    let norm = f_des.norm();
    if norm < MIN_THRUST || f_des.z <= 0.0 {
        return Err(ControlError::ThrustSingularity { norm, vertical: f_des.z });
    }
    let (roll, pitch) = attitude_from_axis(&(f_des / norm));
    Ok(AttitudeThrustCmd { roll, pitch, thrust: norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6, PI};

    fn zero_errors() -> ControlErrors {
        ControlErrors {
            e_p: Vector3::zeros(),
            e_v: Vector3::zeros(),
            e_a: Vector3::zeros(),
            att: Vector3::zeros(),
        }
    }

    /// Quaternion route: q = qx(φ)·qy(θ) in the frame-rotation convention, i.e.
    /// the active rotations about x by −φ and y by −θ.
    fn quat_oracle(phi_l: f64, theta_l: f64, phi_p: f64, theta_p: f64) -> f64 {
        let q = |phi: f64, theta: f64| {
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -phi)
                * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -theta)
        };
        q(phi_l, theta_l).angle_to(&q(phi_p, theta_p))
    }

    #[test]
    fn rotation_identity_and_orthonormality() {
        assert_eq!(desired_rotation(0.0, 0.0), Matrix3::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = desired_rotation(rng.gen_range(-PI..PI), rng.gen_range(-PI..PI));
            assert!((r * r.transpose() - Matrix3::identity()).amax() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_thirty_degree_roll() {
        let r = desired_rotation(FRAC_PI_6, 0.0);
        assert_relative_eq!(r[(1, 1)], 0.75f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r[(1, 2)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(r[(2, 1)], -0.5, epsilon = 1e-15);
        assert_relative_eq!(r[(2, 2)], 0.75f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_matches_elementary_product() {
        let (phi, theta): (f64, f64) = (0.37, -1.1);
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, sp, 0.0, -sp, cp);
        let ry = Matrix3::new(ct, 0.0, -st, 0.0, 1.0, 0.0, st, 0.0, ct);
        assert!((desired_rotation(phi, theta) - rx * ry).amax() < 1e-15);
        assert!((desired_rotation(phi, theta).column(2) - thrust_axis(phi, theta)).amax() < 1e-15);
    }

    #[test]
    fn rotation_partials_match_finite_differences() {
        let (phi, theta, h) = (0.4, -0.7, 1e-6);
        let (dp, dt) = desired_rotation_partials(phi, theta);
        let fd_p = (desired_rotation(phi + h, theta) - desired_rotation(phi - h, theta)) / (2.0 * h);
        let fd_t = (desired_rotation(phi, theta + h) - desired_rotation(phi, theta - h)) / (2.0 * h);
        assert!((dp - fd_p).amax() < 1e-9);
        assert!((dt - fd_t).amax() < 1e-9);
    }

    #[test]
    fn euler_error_examples() {
        assert_eq!(euler_error(0.3, -0.2, 0.3, -0.2), 0.0);
        assert_relative_eq!(euler_error(0.5236, 0.0, 0.0, 0.0), 0.5236, epsilon = 1e-12);
        assert_relative_eq!(
            euler_error(0.3, 0.4, -0.1, 0.2),
            quat_oracle(0.3, 0.4, -0.1, 0.2),
            epsilon = 1e-9
        );
    }

    #[test]
    fn euler_error_symmetric_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let mut ang = || rng.gen_range(-PI..PI);
            let (a, b, c) = ((ang(), ang()), (ang(), ang()), (ang(), ang()));
            let ab = euler_error(a.0, a.1, b.0, b.1);
            let ba = euler_error(b.0, b.1, a.0, a.1);
            assert!((ab - ba).abs() < 1e-9);
            let bc = euler_error(b.0, b.1, c.0, c.1);
            let ac = euler_error(a.0, a.1, c.0, c.1);
            assert!(ac <= ab + bc + 1e-9);
            assert!((0.0..=PI).contains(&ab));
        }
    }

    #[test]
    fn hover_is_exact() {
        let cmd = track(&zero_errors(), &Vector3::zeros(), &ControlGains::default()).unwrap();
        assert_eq!(cmd, AttitudeThrustCmd::new(0.0, 0.0, 9.81));
    }

    #[test]
    fn forward_acceleration_pitches_negative() {
        let cmd =
            track(&zero_errors(), &Vector3::new(9.81, 0.0, 0.0), &ControlGains::default()).unwrap();
        assert_relative_eq!(cmd.thrust, 9.81 * 2f64.sqrt(), max_relative = 1e-14);
        assert_eq!(cmd.roll, 0.0);
        assert_relative_eq!(-cmd.pitch.sin(), 1.0 / 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(cmd.pitch, -FRAC_PI_4, epsilon = 1e-14);
    }

    #[test]
    fn position_error_feeds_the_force() {
        let gains = ControlGains { k_p: [4.0; 3], k_v: [4.0, 4.0, 5.0] };
        let mut e = zero_errors();
        e.e_p = Vector3::new(0.1, 0.0, 0.0);
        let f = desired_force(&e, &Vector3::zeros(), &gains).unwrap();
        assert!((f - Vector3::new(0.4, 0.0, 9.81)).amax() < 1e-15);
        let cmd = track(&e, &Vector3::zeros(), &gains).unwrap();
        assert_relative_eq!(cmd.thrust, (0.16f64 + 9.81 * 9.81).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(cmd.pitch, -(0.4f64 / cmd.thrust).asin(), epsilon = 1e-14);
    }

    #[test]
    fn free_fall_region_is_a_singularity() {
        let r = track(&zero_errors(), &Vector3::new(0.0, 0.0, -9.81), &ControlGains::default());
        assert!(matches!(r, Err(ControlError::ThrustSingularity { .. })));
        let r = track(&zero_errors(), &Vector3::new(3.0, 0.0, -10.0), &ControlGains::default());
        assert!(matches!(r, Err(ControlError::ThrustSingularity { .. })));
    }

    #[test]
    fn thrust_along_body_z_reproduces_the_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gains = ControlGains::default();
        for _ in 0..1000 {
            let mut r = |s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
            let e = ControlErrors { e_p: r(0.5), e_v: r(1.0), e_a: Vector3::zeros(), att: r(0.5) };
            let acc = r(5.0);
            let Ok(cmd) = track(&e, &acc, &gains) else { continue };
            assert!(cmd.roll.abs() < FRAC_PI_2 && cmd.pitch.abs() < FRAC_PI_2 && cmd.thrust >= 0.0);
            let f = desired_force(&e, &acc, &gains).unwrap();
            let produced = cmd.thrust * desired_rotation(cmd.roll, cmd.pitch).column(2)
                - Vector3::new(0.0, 0.0, GRAVITY);
            assert!((produced - (f - Vector3::new(0.0, 0.0, GRAVITY))).amax() < 1e-9);
        }
    }

    #[test]
    fn track_is_lipschitz_away_from_the_singularity() {
        let gains = ControlGains::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-7;
        let mut worst: f64 = 0.0;
        for _ in 0..500 {
            let x: [f64; 12] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
            let mut y = x;
            let i = rng.gen_range(0..9);
            y[i] += h;
            let cx = ControlErrors::from_array(&x);
            let cy = ControlErrors::from_array(&y);
            let a = track(&cx, &cx.e_a, &gains).unwrap();
            let b = track(&cy, &cy.e_a, &gains).unwrap();
            let d = ((a.roll - b.roll).powi(2) + (a.pitch - b.pitch).powi(2) + (a.thrust - b.thrust).powi(2)).sqrt();
            worst = worst.max(d / h);
        }
        assert!(worst < 20.0, "local Lipschitz estimate {worst}");
    }
}
