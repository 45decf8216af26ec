//! Average-jerk-optimal point-to-point motion primitives.
//!
//! With position, velocity and acceleration fixed at both ends, the
//! Euler-Lagrange condition of `∫ ‖jerk‖² dt` is `d⁶p/dt⁶ = 0`, so every
//! axis of the optimal trajectory is the unique quintic that meets the six
//! boundary conditions. The generator solves that boundary system per axis.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Durations below this make the boundary system numerically meaningless.
pub const MIN_DURATION: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate duration: zero displacement gives a zero traveling time")]
    DegenerateDuration,
    #[error("boundary system is ill-conditioned for duration {0} s")]
    IllConditioned(f64),
    #[error("sample time {t} s outside [0, {duration}] s")]
    OutOfRange { t: f64, duration: f64 },
}

/// Translational kinematic state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Position, m.
    pub p: Vector3<f64>,
    /// Velocity, m/s.
    pub v: Vector3<f64>,
    /// Acceleration, m/s².
    pub a: Vector3<f64>,
}

impl State {
    pub fn new(p: Vector3<f64>, v: Vector3<f64>, a: Vector3<f64>) -> Self {
        Self { p, v, a }
    }

    /// At rest at `p`.
    pub fn rest(p: Vector3<f64>) -> Self {
        Self::new(p, Vector3::zeros(), Vector3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.a.iter()).all(|x| x.is_finite())
    }

    /// Componentwise `α·self + β·other`.
    pub fn combine(&self, alpha: f64, other: &State, beta: f64) -> State {
        State::new(
            self.p * alpha + other.p * beta,
            self.v * alpha + other.v * beta,
            self.a * alpha + other.a * beta,
        )
    }
}

/// Per-axis quintic `p(t) = c0 + c1 t + … + c5 t⁵` over `[0, duration]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    coeffs: [[f64; 6]; 3],
    duration: f64,
}

/// Traveling time `‖Δp‖ / v̄`.
pub fn travel_time(delta_p: &Vector3<f64>, v_bar: f64) -> Result<f64, TrajectoryError> {
    if !(v_bar > 0.0) || !v_bar.is_finite() {
        return Err(TrajectoryError::InvalidArgument(format!(
            "average speed must be positive, got {v_bar}"
        )));
    }
    let dist = delta_p.norm();
    if !dist.is_finite() {
        return Err(TrajectoryError::InvalidArgument("non-finite displacement".into()));
    }
    if dist == 0.0 {
        return Err(TrajectoryError::DegenerateDuration);
    }
    Ok(dist / v_bar)
}

/// Generates the jerk-optimal primitive from `start` to `end` in `duration` seconds.
///
/// The 6×6 boundary system is block lower-triangular: the three `t = 0` rows
/// fix `c0 = p₀`, `c1 = v₀`, `c2 = a₀/2` directly, which keeps the start state
/// bit-exact; the remaining 3×3 block for `c3..c5` is LU-solved per axis.
pub fn generate_primitive(
    start: &State,
    end: &State,
    duration: f64,
) -> Result<Trajectory, TrajectoryError> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(TrajectoryError::InvalidArgument(format!(
            "duration must be positive and finite, got {duration}"
        )));
    }
    if duration < MIN_DURATION {
        return Err(TrajectoryError::IllConditioned(duration));
    }
    if !start.is_finite() || !end.is_finite() {
        return Err(TrajectoryError::InvalidArgument("non-finite boundary state".into()));
    }

    let t = duration;
    let (t2, t3, t4, t5) = (t * t, t * t * t, t.powi(4), t.powi(5));
    // Rows: p(T), v(T), a(T) against the unknowns c3, c4, c5.
    let end_block = Matrix3::new(
        t3, t4, t5, //
        3.0 * t2, 4.0 * t3, 5.0 * t4, //
        6.0 * t, 12.0 * t2, 20.0 * t3,
    );
    let lu = end_block.lu();
    if !lu.is_invertible() {
        return Err(TrajectoryError::IllConditioned(duration));
    }

    let mut coeffs = [[0.0; 6]; 3];
    for axis in 0..3 {
        let (p0, v0, a0) = (start.p[axis], start.v[axis], start.a[axis]);
        let c0 = p0;
        let c1 = v0;
        let c2 = 0.5 * a0;
        let rhs = Vector3::new(
            end.p[axis] - (c0 + c1 * t + c2 * t2),
            end.v[axis] - (c1 + 2.0 * c2 * t),
            end.a[axis] - 2.0 * c2,
        );
        let tail = lu
            .solve(&rhs)
            .ok_or(TrajectoryError::IllConditioned(duration))?;
        if tail.iter().any(|c| !c.is_finite()) {
            return Err(TrajectoryError::IllConditioned(duration));
        }
        coeffs[axis] = [c0, c1, c2, tail[0], tail[1], tail[2]];
    }
    Ok(Trajectory { coeffs, duration })
}

impl Trajectory {
    /// Builds a trajectory from raw coefficients. Mostly useful in tests.
    pub fn from_coeffs(coeffs: [[f64; 6]; 3], duration: f64) -> Result<Self, TrajectoryError> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(TrajectoryError::InvalidArgument(format!(
                "duration must be positive, got {duration}"
            )));
        }
        Ok(Self { coeffs, duration })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn coeffs(&self) -> &[[f64; 6]; 3] {
        &self.coeffs
    }

    /// Analytic position, velocity and acceleration at `t ∈ [0, T]`.
    pub fn sample(&self, t: f64) -> Result<State, TrajectoryError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(TrajectoryError::OutOfRange { t, duration: self.duration });
        }
        Ok(self.eval(t))
    }

    /// Samples at `t` clamped into `[0, T]` (hold-first / hold-last).
    pub fn sample_clamped(&self, t: f64) -> State {
        self.eval(t.clamp(0.0, self.duration))
    }

    pub fn start(&self) -> State {
        self.eval(0.0)
    }

    pub fn end(&self) -> State {
        self.eval(self.duration)
    }

    /// Jerk at `t` (not range-checked).
    pub fn jerk(&self, t: f64) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| {
            let c = &self.coeffs[axis];
            6.0 * c[3] + t * (24.0 * c[4] + t * 60.0 * c[5])
        })
    }

    fn eval(&self, t: f64) -> State {
        let mut s = State::rest(Vector3::zeros());
        for axis in 0..3 {
            let c = &self.coeffs[axis];
            s.p[axis] = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
            s.v[axis] =
                c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
            s.a[axis] = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
        }
        s
    }

    /// `(1/T) ∫₀ᵀ ‖jerk(t)‖² dt`, integrated in closed form.
    ///
    /// Per axis jerk is `α + βt + γt²`, so the integrand is a quartic.
    pub fn mean_squared_jerk(&self) -> f64 {
        let t = self.duration;
        let mut total = 0.0;
        for c in &self.coeffs {
            let (al, be, ga) = (6.0 * c[3], 24.0 * c[4], 60.0 * c[5]);
            total += al * al * t
                + al * be * t * t
                + (be * be + 2.0 * al * ga) * t.powi(3) / 3.0
                + be * ga * t.powi(4) / 2.0
                + ga * ga * t.powi(5) / 5.0;
        }
        total / t
    }
}
