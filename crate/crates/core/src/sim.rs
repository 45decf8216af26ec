//! Deterministic point-mass quadrotor simulator with a first-order attitude
//! loop, gap/lab collision geometry and rollout recording.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{desired_rotation, thrust_axis, AttitudeThrustCmd, GRAVITY};
use crate::trajectory::State;

/// Largest accepted integration step, s.
pub const MAX_DT: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation fault: {0}")]
    Fault(String),
    #[error("invalid simulator argument: {0}")]
    InvalidArgument(String),
    #[error("command source fault at t = {t:.3} s: {reason}")]
    CommandSource { t: f64, reason: String },
}

/// Simulator parameters. Thrust is mass-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Control/integration step, s.
    pub dt: f64,
    /// Attitude-loop time constant, s.
    pub tau_att: f64,
    /// Thrust saturation, m/s².
    pub thrust_max: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { dt: 0.02, tau_att: 0.08, thrust_max: 2.5 * GRAVITY }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        check_dt(self.dt)?;
        if !(self.tau_att > 0.0) || !(self.thrust_max > 0.0) {
            return Err(SimError::InvalidArgument(format!("{self:?}")));
        }
        Ok(())
    }
}

fn check_dt(dt: f64) -> Result<(), SimError> {
    if dt > 0.0 && dt <= MAX_DT {
        Ok(())
    } else {
        Err(SimError::InvalidArgument(format!("dt must lie in (0, {MAX_DT}], got {dt}")))
    }
}

/// Full kinematic state. Yaw is identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    /// Euler attitude (roll, pitch, yaw), rad.
    pub att: Vector3<f64>,
    /// Attitude rate, rad/s.
    pub omega: Vector3<f64>,
    pub t: f64,
}

impl FullState {
    /// Level hover at `p`.
    pub fn hover(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            a: Vector3::zeros(),
            att: Vector3::zeros(),
            omega: Vector3::zeros(),
            t: 0.0,
        }
    }

    pub fn translational(&self) -> State {
        State::new(self.p, self.v, self.a)
    }

    pub fn is_finite(&self) -> bool {
        [self.p, self.v, self.a, self.att, self.omega]
            .iter()
            .all(|x| x.iter().all(|c| c.is_finite()))
            && self.t.is_finite()
    }
}

/// Advances `state` by `dt` under a held command.
///
/// The attitude relaxes exponentially toward the commanded roll/pitch, which
/// is solved in closed form; translation is RK4 with the attitude evaluated at
/// each stage time. `omega` is the exact derivative of the lag at the end of
/// the step and `a` the acceleration there.
pub fn step(
    state: &FullState,
    cmd: &AttitudeThrustCmd,
    dt: f64,
    params: &SimParams,
) -> Result<FullState, SimError> {
    check_dt(dt)?;
    if !cmd.is_finite() {
        return Err(SimError::Fault(format!("non-finite command {cmd:?}")));
    }
    if !state.is_finite() {
        return Err(SimError::Fault("non-finite state".into()));
    }
    let thrust = cmd.thrust.clamp(0.0, params.thrust_max);
    let target = Vector3::new(cmd.roll, cmd.pitch, 0.0);
    let att0 = Vector3::new(state.att.x, state.att.y, 0.0);
    let tau = params.tau_att;

    let attitude_at = |s: f64| target + (att0 - target) * (-s / tau).exp();
    let accel_at = |s: f64| {
        let att = attitude_at(s);
        thrust * thrust_axis(att.x, att.y) - Vector3::new(0.0, 0.0, GRAVITY)
    };

    let h = dt;
    let (v0, p0) = (state.v, state.p);
    let k1v = accel_at(0.0);
    let k1p = v0;
    let k2v = accel_at(0.5 * h);
    let k2p = v0 + 0.5 * h * k1v;
    let k3v = k2v;
    let k3p = v0 + 0.5 * h * k2v;
    let k4v = accel_at(h);
    let k4p = v0 + h * k3v;

    let v1 = v0 + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    let p1 = p0 + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
    let att1 = attitude_at(h);
    let omega = (target - att1) / tau;

    let next = FullState {
        p: p1,
        v: v1,
        a: k4v,
        att: att1,
        omega: Vector3::new(omega.x, omega.y, 0.0),
        t: state.t + dt,
    };
    if !next.is_finite() {
        return Err(SimError::Fault("state diverged".into()));
    }
    Ok(next)
}

/// Rectangular opening in the wall plane `x = center.x`.
///
/// `tilt` rolls the rectangle about the world X axis. The long side runs
/// along the second column of `desired_rotation(tilt, 0)`, the short side along
/// the third, which is also the body z-axis a traversing vehicle should hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapPose {
    pub center: Vector3<f64>,
    /// rad, in `[0, 75°]`.
    pub tilt: f64,
    /// Long side, m.
    pub width: f64,
    /// Short side, m.
    pub height: f64,
}

pub const MAX_GAP_TILT_DEG: f64 = 75.0;

impl GapPose {
    pub fn validate(&self) -> Result<(), SimError> {
        let max_tilt = MAX_GAP_TILT_DEG.to_radians();
        if !(0.0..=max_tilt + 1e-12).contains(&self.tilt) {
            return Err(SimError::InvalidArgument(format!(
                "gap tilt {:.2}° outside [0, {MAX_GAP_TILT_DEG}]°",
                self.tilt.to_degrees()
            )));
        }
        if !(self.width > self.height && self.height > 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "gap needs width > height > 0, got {} × {}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn wall_normal(&self) -> Vector3<f64> {
        Vector3::x()
    }

    pub fn long_axis(&self) -> Vector3<f64> {
        desired_rotation(self.tilt, 0.0).column(1).into_owned()
    }

    pub fn short_axis(&self) -> Vector3<f64> {
        desired_rotation(self.tilt, 0.0).column(2).into_owned()
    }

    /// (roll, pitch) that aligns the body z-axis with the short side.
    pub fn attitude(&self) -> (f64, f64) {
        (self.tilt, 0.0)
    }

    /// Signed distance from `p` to the wall plane.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).dot(&self.wall_normal())
    }

    /// In-plane coordinates (long, short) of `p` relative to the center.
    pub fn in_plane(&self, p: &Vector3<f64>) -> (f64, f64) {
        let r = p - self.center;
        (r.dot(&self.long_axis()), r.dot(&self.short_axis()))
    }
}

/// Axis-aligned lab volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabBounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl LabBounds {
    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] + margin && p[i] <= self.max[i] - margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub gap: GapPose,
    pub start_hover: Vector3<f64>,
    pub lab: LabBounds,
    /// Radius of the collision sphere, m.
    pub drone_radius: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            gap: GapPose {
                center: Vector3::new(3.0, 0.0, 2.5),
                tilt: 0.0,
                width: 0.8,
                height: 0.36,
            },
            start_hover: Vector3::new(0.0, 0.0, 2.5),
            lab: LabBounds { min: Vector3::new(-2.0, -4.0, 0.0), max: Vector3::new(9.0, 4.0, 4.0) },
            drone_radius: 0.15,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        self.gap.validate()?;
        if !(self.drone_radius > 0.0 && self.drone_radius < self.gap.height / 2.0) {
            return Err(SimError::InvalidArgument(format!(
                "drone radius {} must be positive and below half the gap height",
                self.drone_radius
            )));
        }
        if !self.lab.contains(&self.start_hover, 0.0) {
            return Err(SimError::InvalidArgument("start hover outside lab bounds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    GapCrossed,
    Collision,
    OutOfBounds,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        !matches!(self, EventKind::GapCrossed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::GapCrossed => "gap-crossed",
            EventKind::Collision => "collision",
            EventKind::OutOfBounds => "out-of-bounds",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Event time, s. Crossing times are interpolated between samples.
    pub t: f64,
    pub kind: EventKind,
    /// Index of the trace sample at which the event was detected.
    pub sample: usize,
}

/// Where and when the vehicle went through the wall plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub t: f64,
    pub point: Vector3<f64>,
    /// Interpolation fraction between the two samples.
    pub fraction: f64,
}

/// Instantaneous contact test against wall, ground and lab.
///
/// A state exactly on the wall plane inside the opening counts as a crossing.
pub fn check_collision(state: &FullState, scenario: &Scenario) -> Option<EventKind> {
    let r = scenario.drone_radius;
    if !scenario.lab.contains(&state.p, 0.0) {
        return Some(EventKind::OutOfBounds);
    }
    if state.p.z - r <= 0.0 {
        return Some(EventKind::Collision);
    }
    let gap = &scenario.gap;
    let d = gap.signed_distance(&state.p);
    if d.abs() < r {
        // The sphere cuts the wall in a disk; it must fit inside the opening.
        let disk = (r * r - d * d).sqrt();
        let (l, s) = gap.in_plane(&state.p);
        if l.abs() + disk > gap.width / 2.0 || s.abs() + disk > gap.height / 2.0 {
            return Some(EventKind::Collision);
        }
    }
    if d == 0.0 {
        let (l, s) = gap.in_plane(&state.p);
        if l.abs() <= gap.width / 2.0 && s.abs() <= gap.height / 2.0 {
            return Some(EventKind::GapCrossed);
        }
    }
    None
}

/// Detects a sign change of the wall distance between two samples with the
/// interpolated crossing point inside the opening.
pub fn detect_crossing(prev: &FullState, cur: &FullState, scenario: &Scenario) -> Option<Crossing> {
    let gap = &scenario.gap;
    let d0 = gap.signed_distance(&prev.p);
    let d1 = gap.signed_distance(&cur.p);
    if !(d0 < 0.0 && d1 >= 0.0) && !(d0 > 0.0 && d1 <= 0.0) {
        return None;
    }
    let fraction = d0 / (d0 - d1);
    let point = prev.p + (cur.p - prev.p) * fraction;
    let (l, s) = gap.in_plane(&point);
    if l.abs() <= gap.width / 2.0 && s.abs() <= gap.height / 2.0 {
        Some(Crossing { t: prev.t + (cur.t - prev.t) * fraction, point, fraction })
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub state: FullState,
    pub cmd: AttitudeThrustCmd,
}

/// Time-stamped rollout record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub dt: f64,
    pub samples: Vec<TraceSample>,
    pub events: Vec<Event>,
    /// Free-form run annotations (control mode, hand-off policy, ...).
    pub notes: BTreeMap<String, String>,
}

pub const TRACE_CSV_HEADER: &str = "t,px,py,pz,vx,vy,vz,ax,ay,az,roll,pitch,yaw,wx,wy,wz,cmd_roll,cmd_pitch,cmd_thrust,event";

impl Trace {
    pub fn has_event(&self, kind: EventKind) -> bool {
        self.events.iter().any(|e| e.kind == kind)
    }

    pub fn count_events(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn terminated_early(&self) -> bool {
        self.events.iter().any(|e| e.kind.is_terminal())
    }

    /// Writes the trace as CSV with [`TRACE_CSV_HEADER`].
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for (i, s) in self.samples.iter().enumerate() {
            let st = &s.state;
            write!(out, "{}", st.t)?;
            for x in st.p.iter().chain(st.v.iter()).chain(st.a.iter()).chain(st.att.iter()).chain(st.omega.iter()) {
                write!(out, ",{x}")?;
            }
            write!(out, ",{},{},{},", s.cmd.roll, s.cmd.pitch, s.cmd.thrust)?;
            let kinds: Vec<&str> =
                self.events.iter().filter(|e| e.sample == i).map(|e| e.kind.as_str()).collect();
            writeln!(out, "{}", kinds.join(";"))?;
        }
        Ok(())
    }
}

/// Anything that turns the current state into a command.
pub trait CommandSource {
    fn command(&mut self, state: &FullState, scenario: &Scenario) -> Result<AttitudeThrustCmd, String>;
}

impl<F> CommandSource for F
where
    F: FnMut(&FullState, &Scenario) -> Result<AttitudeThrustCmd, String>,
{
    fn command(&mut self, state: &FullState, scenario: &Scenario) -> Result<AttitudeThrustCmd, String> {
        self(state, scenario)
    }
}

/// A rollout that stopped on a fault, with everything recorded up to it.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RolloutFault {
    pub error: SimError,
    pub trace: Trace,
}

/// Runs `source` from a level hover at the scenario start for
/// `round(duration/dt)` control steps.
///
/// Each sample pairs a state with the command issued at it. The run stops
/// early on a collision or out-of-bounds event; the terminal state is
/// appended with the last command repeated.
pub fn rollout(
    source: &mut dyn CommandSource,
    scenario: &Scenario,
    duration: f64,
    params: &SimParams,
) -> Result<Trace, RolloutFault> {
    rollout_from(source, scenario, FullState::hover(scenario.start_hover), duration, params)
}

pub fn rollout_from(
    source: &mut dyn CommandSource,
    scenario: &Scenario,
    initial: FullState,
    duration: f64,
    params: &SimParams,
) -> Result<Trace, RolloutFault> {
    let dt = params.dt;
    let mut trace = Trace { dt, ..Trace::default() };
    let fault = |error: SimError, trace: Trace| RolloutFault { error, trace };
    if !(duration > 0.0) {
        return Err(fault(SimError::InvalidArgument(format!("duration {duration}")), trace));
    }
    if let Err(e) = params.validate() {
        return Err(fault(e, trace));
    }
    let n = (duration / dt).round().max(1.0) as usize;
    let mut state = initial;

    if let Some(kind) = check_collision(&state, scenario).filter(|k| k.is_terminal()) {
        trace.samples.push(TraceSample { state, cmd: AttitudeThrustCmd::new(0.0, 0.0, 0.0) });
        trace.events.push(Event { t: state.t, kind, sample: 0 });
        return Ok(trace);
    }

    for k in 0..n {
        let cmd = match source.command(&state, scenario) {
            Ok(c) => c,
            Err(reason) => {
                return Err(fault(SimError::CommandSource { t: state.t, reason }, trace));
            }
        };
        trace.samples.push(TraceSample { state, cmd });
        if k + 1 == n {
            break;
        }
        let next = match step(&state, &cmd, dt, params) {
            Ok(s) => s,
            Err(e) => return Err(fault(e, trace)),
        };
        let idx = trace.samples.len();
        if let Some(c) = detect_crossing(&state, &next, scenario) {
            trace.events.push(Event { t: c.t, kind: EventKind::GapCrossed, sample: idx });
        }
        state = next;
        if let Some(kind) = check_collision(&state, scenario).filter(|k| k.is_terminal()) {
            trace.events.push(Event { t: state.t, kind, sample: idx });
            trace.samples.push(TraceSample { state, cmd });
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> SimParams {
        SimParams::default()
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let mut s = FullState::hover(Vector3::new(0.0, 0.0, 1.0));
        for _ in 0..100 {
            let n = step(&s, &AttitudeThrustCmd::hover(), 0.02, &params()).unwrap();
            assert!((n.p - s.p).amax() < 1e-9);
            assert!(n.v.amax() < 1e-9);
            s = n;
        }
    }

    #[test]
    fn free_fall_single_step() {
        let s = FullState::hover(Vector3::new(0.0, 0.0, 2.0));
        let n = step(&s, &AttitudeThrustCmd::new(0.0, 0.0, 0.0), 0.02, &params()).unwrap();
        assert_relative_eq!(n.v.z, -9.81 * 0.02, epsilon = 1e-9);
        assert_relative_eq!(n.p.z, 2.0 - 0.5 * 9.81 * 0.0004, epsilon = 1e-12);
    }

    #[test]
    fn attitude_follows_first_order_lag() {
        let s = FullState::hover(Vector3::new(0.0, 0.0, 2.0));
        let n = step(&s, &AttitudeThrustCmd::new(0.4, 0.0, 9.81), 0.02, &params()).unwrap();
        assert_relative_eq!(n.att.x, 0.4 * (1.0 - (-0.25f64).exp()), epsilon = 1e-15);
        assert_relative_eq!(n.omega.x, (0.4 - n.att.x) / 0.08, epsilon = 1e-12);
        assert_eq!(n.att.z, 0.0);
    }

    #[test]
    fn thrust_saturates() {
        let s = FullState::hover(Vector3::new(0.0, 0.0, 2.0));
        let n = step(&s, &AttitudeThrustCmd::new(0.0, 0.0, 1e3), 0.02, &params()).unwrap();
        assert_relative_eq!(n.a.z, 1.5 * 9.81, epsilon = 1e-12);
        let n = step(&s, &AttitudeThrustCmd::new(0.0, 0.0, -5.0), 0.02, &params()).unwrap();
        assert_relative_eq!(n.a.z, -9.81, epsilon = 1e-12);
    }

    #[test]
    fn bad_inputs_fault() {
        let s = FullState::hover(Vector3::zeros());
        assert!(matches!(
            step(&s, &AttitudeThrustCmd::new(f64::NAN, 0.0, 9.81), 0.02, &params()),
            Err(SimError::Fault(_))
        ));
        assert!(step(&s, &AttitudeThrustCmd::hover(), 0.0, &params()).is_err());
        assert!(step(&s, &AttitudeThrustCmd::hover(), 0.06, &params()).is_err());
    }

    #[test]
    fn free_fall_conserves_energy() {
        let mut s = FullState::hover(Vector3::new(0.0, 0.0, 30.0));
        s.v = Vector3::new(1.0, -0.5, 3.0);
        let energy = |s: &FullState| 0.5 * s.v.norm_squared() + 9.81 * s.p.z;
        let e0 = energy(&s);
        for _ in 0..100 {
            s = step(&s, &AttitudeThrustCmd::new(0.0, 0.0, 0.0), 0.02, &params()).unwrap();
        }
        assert!(((energy(&s) - e0) / e0).abs() < 1e-6);
    }

    fn scheduled_cmd(t: f64) -> AttitudeThrustCmd {
        // Held on a 40 ms grid so that dt = 0.02 and 0.01 see the same signal.
        let k = (t / 0.04 + 1e-9).floor() * 0.04;
        AttitudeThrustCmd::new(0.5 * (2.0 * k).sin(), -0.4 * (1.3 * k).cos(), 9.81 + 4.0 * (3.0 * k).sin())
    }

    fn integrate(dt: f64, aggressive: bool) -> Vector3<f64> {
        let mut s = FullState::hover(Vector3::new(0.0, 0.0, 50.0));
        let n = (3.0 / dt).round() as usize;
        for _ in 0..n {
            let cmd = if aggressive { scheduled_cmd(s.t) } else { AttitudeThrustCmd::hover() };
            s = step(&s, &cmd, dt, &params()).unwrap();
        }
        s.p
    }

    #[test]
    fn halving_the_step_barely_moves_the_result() {
        assert!((integrate(0.02, false) - integrate(0.01, false)).amax() < 1e-8);
        let d = (integrate(0.02, true) - integrate(0.01, true)).amax();
        assert!(d < 1e-3, "aggressive drift {d}");
    }

    fn scenario() -> Scenario {
        Scenario::default()
    }

    #[test]
    fn gap_center_counts_as_crossed() {
        let sc = scenario();
        let s = FullState::hover(sc.gap.center);
        assert_eq!(check_collision(&s, &sc), Some(EventKind::GapCrossed));
    }

    #[test]
    fn offset_past_the_long_edge_collides() {
        let mut sc = scenario();
        sc.gap.tilt = 30f64.to_radians();
        let off = sc.gap.width / 2.0 + sc.drone_radius;
        let s = FullState::hover(sc.gap.center + sc.gap.long_axis() * off);
        assert_eq!(check_collision(&s, &sc), Some(EventKind::Collision));
        let inside = FullState::hover(sc.gap.center + sc.gap.long_axis() * 0.2);
        assert_eq!(check_collision(&inside, &sc), Some(EventKind::GapCrossed));
    }

    #[test]
    fn short_side_clearance_is_height_half_minus_radius() {
        let sc = scenario();
        let slack = sc.gap.height / 2.0 - sc.drone_radius;
        let ok = FullState::hover(sc.gap.center + sc.gap.short_axis() * (slack - 1e-6));
        assert_eq!(check_collision(&ok, &sc), Some(EventKind::GapCrossed));
        let bad = FullState::hover(sc.gap.center + sc.gap.short_axis() * (slack + 1e-6));
        assert_eq!(check_collision(&bad, &sc), Some(EventKind::Collision));
    }

    #[test]
    fn interior_hover_and_ground_and_bounds() {
        let sc = scenario();
        assert_eq!(check_collision(&FullState::hover(Vector3::new(0.0, 0.0, 1.0)), &sc), None);
        assert_eq!(
            check_collision(&FullState::hover(Vector3::new(0.0, 0.0, 0.1)), &sc),
            Some(EventKind::Collision)
        );
        assert_eq!(
            check_collision(&FullState::hover(Vector3::new(0.0, 5.0, 1.0)), &sc),
            Some(EventKind::OutOfBounds)
        );
    }

    #[test]
    fn crossing_is_interpolated() {
        let sc = scenario();
        let mut a = FullState::hover(sc.gap.center - Vector3::new(0.03, 0.0, 0.0));
        let mut b = FullState::hover(sc.gap.center + Vector3::new(0.01, 0.0, 0.0));
        a.t = 1.0;
        b.t = 1.02;
        let c = detect_crossing(&a, &b, &sc).unwrap();
        assert_relative_eq!(c.t, 1.015, epsilon = 1e-12);
        assert!((c.point - sc.gap.center).amax() < 1e-12);
    }

    #[test]
    fn constant_hover_rollout() {
        let sc = scenario();
        let mut src = |_: &FullState, _: &Scenario| Ok(AttitudeThrustCmd::hover());
        let tr = rollout(&mut src, &sc, 2.0, &params()).unwrap();
        assert_eq!(tr.samples.len(), 100);
        assert!(tr.events.is_empty());
        let first = tr.samples[0].state;
        for (k, s) in tr.samples.iter().enumerate() {
            assert_eq!(s.state.p, first.p);
            assert_eq!(s.state.v, first.v);
            assert_relative_eq!(s.state.t, k as f64 * 0.02, epsilon = 1e-12);
        }
    }

    #[test]
    fn thrust_cut_ends_on_the_ground() {
        let sc = scenario();
        let mut src = |_: &FullState, _: &Scenario| Ok(AttitudeThrustCmd::new(0.0, 0.0, 0.0));
        let tr = rollout(&mut src, &sc, 3.0, &params()).unwrap();
        let last = tr.events.last().unwrap();
        assert_eq!(last.kind, EventKind::Collision);
        // Sphere touches z = 0 after falling h = z₀ − r.
        let t_fall = (2.0 * (sc.start_hover.z - sc.drone_radius) / 9.81f64).sqrt();
        assert!((last.t - t_fall).abs() <= 0.02 + 1e-9, "{} vs {t_fall}", last.t);
    }

    #[test]
    fn source_fault_keeps_partial_trace() {
        let sc = scenario();
        let mut src = |s: &FullState, _: &Scenario| {
            if s.t > 0.51 { Err("boom".to_string()) } else { Ok(AttitudeThrustCmd::hover()) }
        };
        let err = rollout(&mut src, &sc, 2.0, &params()).unwrap_err();
        assert!(matches!(err.error, SimError::CommandSource { .. }));
        assert_eq!(err.trace.samples.len(), 26);
    }

    #[test]
    fn csv_has_the_documented_header() {
        let sc = scenario();
        let mut src = |_: &FullState, _: &Scenario| Ok(AttitudeThrustCmd::hover());
        let tr = rollout(&mut src, &sc, 0.1, &params()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_CSV_HEADER);
        assert_eq!(lines.count(), 5);
    }
}
