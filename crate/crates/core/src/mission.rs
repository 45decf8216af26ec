//! Three-stage gap mission: approach primitive, attitude-locked traverse and
//! recover search, plus the closed-loop runner for the three control modes.

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    attitude_from_axis, euler_error, thrust_axis, track, AttitudeThrustCmd, ControlErrors, ControlGains, GRAVITY,
};
use crate::imitation::{denormalize_planner_output, label_to_state, normalize_planner_input, planner_input};
use crate::nn::Mlp;
use crate::policy::{PolicyNet, OBS_DIM};
use crate::rl::eval_metrics;
use crate::sim::{
    detect_crossing, rollout_from, EventKind, FullState, GapPose, LabBounds, RolloutFault, Scenario, SimError,
    SimParams, Trace,
};
use crate::trajectory::{generate_primitive, travel_time, State, Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum MissionError {
    #[error("infeasible traverse: {0}")]
    InfeasibleTraverse(String),
    #[error("no recover candidate stays inside the lab")]
    RecoverInfeasible,
    #[error("invalid mission argument: {0}")]
    InvalidArgument(String),
    #[error("mode {0} needs a policy")]
    MissingPolicy(Mode),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("simulation fault: {}", .0.error)]
    Sim(Box<RolloutFault>),
}

impl From<SimError> for MissionError {
    fn from(e: SimError) -> Self {
        MissionError::InvalidArgument(e.to_string())
    }
}

/// Recover durations `start, start + step, …` up to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverGrid {
    pub start: f64,
    pub step: f64,
    pub end: f64,
}

impl Default for RecoverGrid {
    fn default() -> Self {
        Self { start: 0.5, step: 0.3, end: 3.0 }
    }
}

impl RecoverGrid {
    pub fn durations(&self) -> Vec<f64> {
        if !(self.start > 0.0 && self.step > 0.0) || self.end < self.start {
            return Vec::new();
        }
        let n = ((self.end - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.start + self.step * k as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionConfig {
    /// Speed through the gap, m/s.
    pub v_cross: f64,
    /// Half-width of the traverse window, s.
    pub tau_tr: f64,
    pub t_approach: f64,
    pub recover: RecoverGrid,
    /// Hover target distance behind the gap along X, m.
    pub hover_offset_x: f64,
    pub hover_height: f64,
    /// Sampling step of the recover feasibility check, s.
    pub check_dt: f64,
    /// Admissible mass-normalized thrust along a recover candidate, m/s².
    /// The vertical component must stay above the lower bound.
    pub recover_thrust_min: f64,
    pub recover_thrust_max: f64,
    /// Hover time appended after the longest recover candidate, s.
    pub t_settle: f64,
    /// Attitude time constant compensated in flight, s. TR adds an attitude
    /// lead; the policy sees the reference and a predicted state this far
    /// ahead. Zero flies the plain law.
    pub lag_comp: f64,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            v_cross: 2.0,
            tau_tr: 0.25,
            t_approach: 2.6,
            recover: RecoverGrid::default(),
            hover_offset_x: 2.5,
            hover_height: 1.0,
            check_dt: 0.02,
            recover_thrust_min: 3.0,
            recover_thrust_max: 18.0,
            t_settle: 0.5,
            lag_comp: 0.08,
        }
    }
}

impl MissionConfig {
    pub fn validate(&self) -> Result<(), MissionError> {
        let positive = [self.v_cross, self.tau_tr, self.t_approach, self.check_dt];
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite()))
            || self.t_settle < 0.0
            || self.lag_comp < 0.0
            || !(self.recover_thrust_min < GRAVITY && self.recover_thrust_max > GRAVITY)
        {
            return Err(MissionError::InvalidArgument(format!("{self:?}")));
        }
        if self.recover.durations().is_empty() {
            return Err(MissionError::InvalidArgument(format!("empty recover grid {:?}", self.recover)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Traverse

/// Constant-acceleration segment centred on the gap crossing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraverseSegment {
    /// State at the gap center.
    pub crossing: State,
    pub tau: f64,
    /// Locked (roll, pitch).
    pub attitude: (f64, f64),
    /// Locked mass-normalized thrust.
    pub thrust: f64,
}

impl TraverseSegment {
    /// State at `s ∈ [−τ, τ]` seconds from the crossing.
    pub fn state_at(&self, s: f64) -> State {
        let c = &self.crossing;
        State::new(c.p + c.v * s + c.a * (0.5 * s * s), c.v + c.a * s, c.a)
    }

    pub fn start(&self) -> State {
        self.state_at(-self.tau)
    }

    pub fn end(&self) -> State {
        self.state_at(self.tau)
    }

    pub fn duration(&self) -> f64 {
        2.0 * self.tau
    }
}

/// Locks the body z-axis to the gap's short side and the thrust to cancel
/// gravity along it; the remaining acceleration lies in the gap plane.
pub fn plan_traverse(gap: &GapPose, v_cross: f64, tau: f64) -> Result<TraverseSegment, MissionError> {
    if !(v_cross > 0.0 && v_cross.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
        return Err(MissionError::InfeasibleTraverse(format!("v_cross {v_cross}, tau {tau}")));
    }
    if !(gap.tilt.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(MissionError::InfeasibleTraverse(format!("tilt {:.1}°", gap.tilt.to_degrees())));
    }
    let z_gap = gap.short_axis();
    let thrust = GRAVITY * z_gap.z;
    let accel = z_gap * thrust - Vector3::new(0.0, 0.0, GRAVITY);
    // World X projected onto the plane orthogonal to z_gap.
    let dir = Vector3::x() - z_gap * z_gap.x;
    if dir.norm() < 1e-9 {
        return Err(MissionError::InfeasibleTraverse("crossing direction degenerate".into()));
    }
    let v = dir.normalize() * v_cross;
    Ok(TraverseSegment { crossing: State::new(gap.center, v, accel), tau, attitude: gap.attitude(), thrust })
}

// ---------------------------------------------------------------------------
// Approach

#[derive(Debug, Clone, Copy)]
pub enum ApproachMode<'a> {
    Traditional,
    Learned { planner: &'a Mlp, normalize: bool },
}

/// Planner network queried over fixed boundary conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedApproach {
    planner: Mlp,
    normalize: bool,
    start: State,
    end: State,
    duration: f64,
    v_bar: f64,
    /// Distance between the network's endpoint and the requested end, m.
    pub endpoint_error: f64,
}

impl LearnedApproach {
    fn query(&self, t: f64) -> Result<State, MissionError> {
        let t = t.clamp(0.0, self.duration);
        let x = planner_input(t, self.v_bar, &self.start, &self.end);
        let y = if self.normalize {
            let (xn, s) = normalize_planner_input(&x)?;
            denormalize_planner_output(&self.planner.forward(&xn).map_err(invalid)?, s)
        } else {
            self.planner.forward(&x).map_err(invalid)?.try_into().unwrap()
        };
        let rel = label_to_state(&y);
        Ok(State::new(self.start.p + rel.p, rel.v, rel.a))
    }
}

fn invalid(e: impl std::fmt::Display) -> MissionError {
    MissionError::InvalidArgument(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Approach {
    Primitive(Trajectory),
    Learned(Box<LearnedApproach>),
}

impl Approach {
    pub fn duration(&self) -> f64 {
        match self {
            Approach::Primitive(t) => t.duration(),
            Approach::Learned(l) => l.duration,
        }
    }

    /// State at `t`, clamped into the approach window.
    pub fn sample(&self, t: f64) -> State {
        match self {
            Approach::Primitive(tr) => tr.sample_clamped(t),
            Approach::Learned(l) => l.query(t).unwrap_or(l.end),
        }
    }

    pub fn endpoint_error(&self, target: &State) -> f64 {
        (self.sample(self.duration()).p - target.p).norm()
    }
}

/// Approach from `hover` to `traverse_start` in `t_app` seconds.
pub fn plan_approach(
    hover: &State,
    traverse_start: &State,
    t_app: f64,
    mode: ApproachMode<'_>,
) -> Result<Approach, MissionError> {
    match mode {
        ApproachMode::Traditional => Ok(Approach::Primitive(generate_primitive(hover, traverse_start, t_app)?)),
        ApproachMode::Learned { planner, normalize } => {
            let dist = (traverse_start.p - hover.p).norm();
            let v_bar = dist / t_app;
            travel_time(&(traverse_start.p - hover.p), v_bar)?;
            let mut l = LearnedApproach {
                planner: planner.clone(),
                normalize,
                start: *hover,
                end: *traverse_start,
                duration: t_app,
                v_bar,
                endpoint_error: 0.0,
            };
            l.endpoint_error = (l.query(t_app)?.p - traverse_start.p).norm();
            Ok(Approach::Learned(Box::new(l)))
        }
    }
}

// ---------------------------------------------------------------------------
// Recover

pub fn hover_target(gap: &GapPose, cfg: &MissionConfig) -> Vector3<f64> {
    Vector3::new(gap.center.x + cfg.hover_offset_x, gap.center.y, cfg.hover_height)
}

/// Shortest grid duration whose primitive to the hover target keeps the
/// vehicle inside the lab (shrunk by `radius`) and its thrust demand inside
/// the recover band at every `check_dt` sample.
pub fn plan_recover(
    exit: &State,
    gap: &GapPose,
    lab: &LabBounds,
    radius: f64,
    cfg: &MissionConfig,
) -> Result<Trajectory, MissionError> {
    if !exit.is_finite() {
        return Err(MissionError::InvalidArgument("non-finite exit state".into()));
    }
    let target = State::rest(hover_target(gap, cfg));
    let g = Vector3::new(0.0, 0.0, GRAVITY);
    // The exit itself may sit below the band after a steep traverse.
    let f_min = cfg.recover_thrust_min.min((exit.a + g).z);
    for duration in cfg.recover.durations() {
        let traj = generate_primitive(exit, &target, duration)?;
        let n = (duration / cfg.check_dt).ceil() as usize;
        let inside = (0..=n).all(|k| {
            let s = traj.sample_clamped((k as f64 * cfg.check_dt).min(duration));
            let f = s.a + g;
            lab.contains(&s.p, radius) && f.norm() <= cfg.recover_thrust_max && f.z >= f_min
        });
        if inside {
            return Ok(traj);
        }
    }
    Err(MissionError::RecoverInfeasible)
}

// ---------------------------------------------------------------------------
// Plan

#[derive(Debug, Clone, PartialEq)]
pub struct MissionPlan {
    pub approach: Approach,
    pub traverse: TraverseSegment,
    /// `None` when no recover candidate is feasible.
    pub recover: Option<Trajectory>,
    pub t_traverse: f64,
    pub t_recover: f64,
    pub hover_target: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Approach,
    Traverse,
    Recover,
}

impl MissionPlan {
    pub fn stage_at(&self, t: f64) -> Stage {
        if t < self.t_traverse {
            Stage::Approach
        } else if t < self.t_recover {
            Stage::Traverse
        } else {
            Stage::Recover
        }
    }

    pub fn crossing_time(&self) -> f64 {
        self.t_traverse + self.traverse.tau
    }

    /// Reference state at mission time `t`. After an infeasible recover the
    /// reference holds the traverse exit point.
    pub fn reference(&self, t: f64) -> State {
        match self.stage_at(t) {
            Stage::Approach => self.approach.sample(t),
            Stage::Traverse => self.traverse.state_at(t - self.t_traverse - self.traverse.tau),
            Stage::Recover => match &self.recover {
                Some(r) => r.sample_clamped(t - self.t_recover),
                None => State::rest(self.traverse.end().p),
            },
        }
    }

    /// Rollout length shared by all modes.
    pub fn horizon(&self, cfg: &MissionConfig) -> f64 {
        let longest = cfg.recover.durations().last().copied().unwrap_or(0.0);
        self.t_recover + longest + cfg.t_settle
    }
}

pub fn plan_mission(scenario: &Scenario, cfg: &MissionConfig, mode: ApproachMode<'_>) -> Result<MissionPlan, MissionError> {
    cfg.validate()?;
    scenario.validate()?;
    let traverse = plan_traverse(&scenario.gap, cfg.v_cross, cfg.tau_tr)?;
    let hover = State::rest(scenario.start_hover);
    let approach = plan_approach(&hover, &traverse.start(), cfg.t_approach, mode)?;
    let recover = match plan_recover(&traverse.end(), &scenario.gap, &scenario.lab, scenario.drone_radius, cfg) {
        Ok(r) => Some(r),
        Err(MissionError::RecoverInfeasible) => None,
        Err(e) => return Err(e),
    };
    let t_traverse = approach.duration();
    Ok(MissionPlan {
        approach,
        traverse,
        recover,
        t_traverse,
        t_recover: t_traverse + traverse.duration(),
        hover_target: hover_target(&scenario.gap, cfg),
    })
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "TR")]
    Tr,
    #[serde(rename = "E2E")]
    E2e,
    #[serde(rename = "RL")]
    Rl,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Tr, Mode::E2e, Mode::Rl];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Tr => "TR",
            Mode::E2e => "E2E",
            Mode::Rl => "RL",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TR" => Ok(Mode::Tr),
            "E2E" => Ok(Mode::E2e),
            "RL" => Ok(Mode::Rl),
            _ => Err(format!("unknown mode '{s}', expected TR, E2E or RL")),
        }
    }
}

/// Wall-clock cost of computing one command, ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut v = ms.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionMetrics {
    pub mode: Mode,
    pub crossed: bool,
    /// Distance from the crossing point to the gap center, m.
    pub miss_distance: Option<f64>,
    /// Geodesic angle between vehicle and gap attitude at the crossing, deg.
    pub crossing_attitude_error_deg: Option<f64>,
    /// Any wall/ground contact or lab exit.
    pub collided: bool,
    pub out_of_bounds: bool,
    /// Mean ‖ω‖ over the trace, rad/s.
    pub avg_omega: f64,
    /// Mean commanded thrust over the trace, m/s².
    pub avg_thrust: f64,
    pub recover_duration: Option<f64>,
    pub emergency_hover: bool,
    pub thrust_clamp_events: u64,
    /// Excluded from the determinism contract.
    pub ff_latency_ms: Option<LatencyStats>,
}

#[derive(Debug, Clone)]
pub struct MissionOutcome {
    pub plan: MissionPlan,
    pub trace: Trace,
    pub metrics: MissionMetrics,
}

/// Everything a mission run needs besides the scenario.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunSettings {
    pub mission: MissionConfig,
    pub gains: ControlGains,
    pub sim: SimParams,
}

/// Tracks `reference` at time `t`. With `lag > 0` the attitude command leads
/// by `lag` times the rate of the feed-forward attitude, and the thrust is the
/// demanded force projected on the current body axis.
fn tracking_cmd(
    reference: impl Fn(f64) -> State,
    t: f64,
    state: &FullState,
    gains: &ControlGains,
    lag: f64,
) -> Result<AttitudeThrustCmd, String> {
    let r = reference(t);
    let errors = ControlErrors { e_p: r.p - state.p, e_v: r.v - state.v, e_a: r.a, att: state.att };
    let mut cmd = track(&errors, &r.a, gains).map_err(|e| e.to_string())?;
    if lag > 0.0 {
        const H: f64 = 0.01;
        let g = Vector3::new(0.0, 0.0, GRAVITY);
        let (r0, p0) = attitude_from_axis(&(r.a + g).normalize());
        let (r1, p1) = attitude_from_axis(&(reference(t + H).a + g).normalize());
        cmd.roll += lag * (r1 - r0) / H;
        cmd.pitch += lag * (p1 - p0) / H;
        let f = r.a
            + Vector3::from(gains.k_p).component_mul(&errors.e_p)
            + Vector3::from(gains.k_v).component_mul(&errors.e_v)
            + g;
        cmd.thrust = f.dot(&thrust_axis(state.att.x, state.att.y)).max(0.0);
    }
    Ok(cmd)
}

/// `state` advanced `h` seconds at constant acceleration.
fn predict(state: &FullState, h: f64) -> FullState {
    FullState { p: state.p + state.v * h + state.a * (0.5 * h * h), v: state.v + state.a * h, ..*state }
}

/// Observation for the policy over a segment from `start` to `end` lasting
/// `duration`, at segment time `t`.
pub fn policy_observation(
    start: &State,
    end: &State,
    duration: f64,
    t: f64,
    state: &FullState,
) -> [f64; OBS_DIM] {
    let v_bar = (end.p - start.p).norm() / duration;
    let mut obs = [0.0; OBS_DIM];
    obs[..17].copy_from_slice(&planner_input(t.clamp(0.0, duration), v_bar, start, end));
    let rel = state.p - start.p;
    for i in 0..3 {
        obs[17 + i] = rel[i];
        obs[20 + i] = state.v[i];
        // Acceleration slot stays zero: the planner's acceleration is the feed-forward.
        obs[26 + i] = state.att[i];
    }
    obs
}

/// Flies one mission. TR tracks the whole plan with the analytic controller;
/// E2E and RL fly approach and traverse with the policy, then hand off to a
/// recover re-planned from the actual state and tracked analytically. The
/// policy observes the segment `lag_comp` ahead against the state predicted
/// for that instant.
pub fn run_mission(
    mode: Mode,
    scenario: &Scenario,
    policy: Option<&PolicyNet>,
    settings: &RunSettings,
) -> Result<MissionOutcome, MissionError> {
    settings.sim.validate()?;
    settings.gains.validate().map_err(MissionError::InvalidArgument)?;
    let cfg = &settings.mission;
    let plan = plan_mission(scenario, cfg, ApproachMode::Traditional)?;
    let policy = match mode {
        Mode::Tr => None,
        Mode::E2e | Mode::Rl => Some(policy.ok_or(MissionError::MissingPolicy(mode))?),
    };
    if let Some(p) = policy {
        p.reset_clamp_events();
    }
    let gains = settings.gains;
    let lag = cfg.lag_comp;
    let mut latencies = Vec::new();
    let mut handoff: Option<Option<Trajectory>> = None;
    let mut handoff_hold = Vector3::zeros();
    let mut scratch = policy.map(|p| p.scratch());
    let hover = State::rest(scenario.start_hover);
    let trav_start = plan.traverse.start();
    let trav_end = plan.traverse.end();
    let dt = settings.sim.dt;

    let mut source = |state: &FullState, sc: &Scenario| {
        let t = state.t;
        let started = Instant::now();
        let cmd = match (policy, plan.stage_at(t + 1e-9)) {
            (Some(p), Stage::Approach | Stage::Traverse) => {
                let ahead = t + lag;
                let predicted = predict(state, lag);
                let obs = if plan.stage_at(ahead + 1e-9) == Stage::Approach {
                    policy_observation(&hover, &trav_start, plan.t_traverse, ahead, &predicted)
                } else {
                    let local = ahead - plan.t_traverse;
                    policy_observation(&trav_start, &trav_end, plan.traverse.duration(), local, &predicted)
                };
                p.eval(&obs, scratch.as_mut().unwrap()).map_err(|e| e.to_string())
            }
            (Some(_), Stage::Recover) => {
                let rec = handoff.get_or_insert_with(|| {
                    handoff_hold = state.p;
                    let exit = State::new(state.p, state.v, Vector3::zeros());
                    plan_recover(&exit, &sc.gap, &sc.lab, sc.drone_radius, cfg).ok()
                });
                let local = t - plan.t_recover;
                match rec {
                    Some(tr) => tracking_cmd(|s| tr.sample_clamped(s), local, state, &gains, lag),
                    None => tracking_cmd(|_| State::rest(handoff_hold), local, state, &gains, lag),
                }
            }
            (None, _) => tracking_cmd(|s| plan.reference(s), t, state, &gains, lag),
        };
        latencies.push(started.elapsed().as_secs_f64() * 1e3);
        cmd
    };

    let horizon = plan.horizon(cfg);
    let result = rollout_from(&mut source, scenario, FullState::hover(scenario.start_hover), horizon, &settings.sim);
    let recover_used = match mode {
        Mode::Tr => plan.recover.clone(),
        _ => handoff.clone().flatten(),
    };
    let emergency = match mode {
        Mode::Tr => plan.recover.is_none(),
        _ => matches!(handoff, Some(None)),
    };
    let mut trace = match result {
        Ok(t) => t,
        Err(fault) => return Err(MissionError::Sim(Box::new(fault))),
    };
    trace.notes.insert("mode".into(), mode.as_str().into());
    trace.notes.insert("recover_controller".into(), "traditional".into());
    trace.notes.insert("approach_source".into(), if policy.is_some() { "policy" } else { "primitive" }.into());
    trace.notes.insert("dt".into(), dt.to_string());
    if policy.is_some() {
        trace.notes.insert("obs_lead".into(), lag.to_string());
    }

    let mut metrics = summarize(mode, &trace, scenario);
    metrics.recover_duration = recover_used.map(|r| r.duration());
    metrics.emergency_hover = emergency;
    metrics.thrust_clamp_events = policy.map_or(0, |p| p.clamp_events());
    metrics.ff_latency_ms = LatencyStats::from_samples(&latencies);
    Ok(MissionOutcome { plan, trace, metrics })
}

/// Crossing, contact and effort metrics of a finished trace.
pub fn summarize(mode: Mode, trace: &Trace, scenario: &Scenario) -> MissionMetrics {
    let gap = &scenario.gap;
    let mut miss = None;
    let mut att_err = None;
    if let Some(ev) = trace.events.iter().find(|e| e.kind == EventKind::GapCrossed) {
        if ev.sample >= 1 && ev.sample < trace.samples.len() {
            let prev = &trace.samples[ev.sample - 1].state;
            let cur = &trace.samples[ev.sample].state;
            if let Some(c) = detect_crossing(prev, cur, scenario) {
                miss = Some((c.point - gap.center).norm());
                let att = prev.att + (cur.att - prev.att) * c.fraction;
                let (roll, pitch) = gap.attitude();
                att_err = Some(euler_error(att.x, att.y, roll, pitch).to_degrees());
            }
        }
    }
    let (avg_omega, avg_thrust) = eval_metrics(trace).unwrap_or((0.0, 0.0));
    MissionMetrics {
        mode,
        crossed: miss.is_some(),
        miss_distance: miss,
        crossing_attitude_error_deg: att_err,
        collided: trace.has_event(EventKind::Collision) || trace.has_event(EventKind::OutOfBounds),
        out_of_bounds: trace.has_event(EventKind::OutOfBounds),
        avg_omega,
        avg_thrust,
        recover_duration: None,
        emergency_hover: false,
        thrust_clamp_events: 0,
        ff_latency_ms: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gap(tilt_deg: f64) -> GapPose {
        GapPose { tilt: tilt_deg.to_radians(), ..Scenario::default().gap }
    }

    #[test]
    fn untilted_traverse_is_level_and_unaccelerated() {
        let tr = plan_traverse(&gap(0.0), 2.0, 0.25).unwrap();
        assert_eq!(tr.attitude, (0.0, 0.0));
        assert_eq!(tr.thrust, GRAVITY);
        assert_eq!(tr.crossing.a, Vector3::zeros());
        assert_eq!(tr.crossing.v, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(tr.state_at(0.0).p, gap(0.0).center);
        assert_relative_eq!(tr.start().p.x, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn tilted_traverse_matches_vector_oracle() {
        let g = gap(60.0);
        let tr = plan_traverse(&g, 3.0, 0.25).unwrap();
        // Independent route: thrust along z_gap must cancel gravity's z_gap component.
        let t = 60f64.to_radians();
        let z = Vector3::new(0.0, t.sin(), t.cos());
        let mu = GRAVITY * z.dot(&Vector3::z());
        assert_relative_eq!(tr.thrust, mu, epsilon = 1e-12);
        assert_relative_eq!(tr.thrust, GRAVITY * 0.5, epsilon = 1e-12);
        let a = z * mu - Vector3::new(0.0, 0.0, GRAVITY);
        assert!((tr.crossing.a - a).amax() < 1e-12);
        assert!(tr.crossing.a.dot(&z).abs() < 1e-12);
        assert_eq!(tr.attitude, (t, 0.0));
        let (r, p) = tr.attitude;
        assert!((crate::control::thrust_axis(r, p) - z).amax() < 1e-12);
        assert_eq!(tr.state_at(0.0).p, g.center);
    }

    #[test]
    fn traverse_rejects_bad_inputs() {
        assert!(plan_traverse(&gap(0.0), 0.0, 0.25).is_err());
        assert!(plan_traverse(&gap(0.0), 1.0, -1.0).is_err());
        assert!(plan_traverse(&GapPose { tilt: std::f64::consts::FRAC_PI_2, ..gap(0.0) }, 1.0, 0.25).is_err());
    }

    #[test]
    fn approach_endpoints() {
        let h = State::rest(Vector3::new(0.0, 0.0, 1.0));
        let a = plan_approach(&h, &h, 2.6, ApproachMode::Traditional).unwrap();
        for k in 0..=26 {
            assert_eq!(a.sample(k as f64 * 0.1).p, h.p);
        }
        let tr = plan_traverse(&gap(30.0), 2.0, 0.25).unwrap();
        let a = plan_approach(&h, &tr.start(), 2.6, ApproachMode::Traditional).unwrap();
        let e = a.sample(2.6);
        assert!((e.p - tr.start().p).amax() < 1e-9);
        assert!((e.v - tr.start().v).amax() < 1e-9);
        assert!((e.a - tr.start().a).amax() < 1e-9);
    }

    #[test]
    fn learned_approach_reports_endpoint_error() {
        let net = Mlp::init(crate::nn::MlpSpec::planner(), 0).unwrap();
        let h = State::rest(Vector3::new(0.0, 0.0, 1.0));
        let tr = plan_traverse(&gap(0.0), 2.0, 0.25).unwrap();
        let a = plan_approach(&h, &tr.start(), 2.6, ApproachMode::Learned { planner: &net, normalize: true }).unwrap();
        let Approach::Learned(l) = &a else { panic!() };
        assert_relative_eq!(l.endpoint_error, a.endpoint_error(&tr.start()), epsilon = 1e-12);
        assert!(plan_approach(&h, &h, 2.6, ApproachMode::Learned { planner: &net, normalize: true }).is_err());
    }

    #[test]
    fn recover_grid_has_nine_candidates() {
        let d = RecoverGrid::default().durations();
        assert_eq!(d.len(), 9);
        assert_relative_eq!(d[0], 0.5);
        assert_relative_eq!(d[8], 2.9, epsilon = 1e-12);
    }

    #[test]
    fn slow_exit_in_a_huge_lab_takes_the_shortest_candidate() {
        let g = gap(0.0);
        let cfg = MissionConfig::default();
        let lab = LabBounds { min: Vector3::new(-100.0, -100.0, -100.0), max: Vector3::new(100.0, 100.0, 100.0) };
        let target = hover_target(&g, &cfg);
        let exit = State::new(target + Vector3::new(-0.1, 0.0, 0.0), Vector3::new(0.1, 0.0, 0.0), Vector3::zeros());
        let r = plan_recover(&exit, &g, &lab, 0.15, &cfg).unwrap();
        assert_eq!(r.duration(), 0.5);
    }

    #[test]
    fn recover_below_target_lab_is_infeasible() {
        let g = gap(0.0);
        let cfg = MissionConfig::default();
        let lab = LabBounds { min: Vector3::new(-2.0, -4.0, 0.0), max: Vector3::new(9.0, 4.0, 0.9) };
        let exit = State::rest(Vector3::new(3.5, 0.0, 0.5));
        assert!(matches!(plan_recover(&exit, &g, &lab, 0.15, &cfg), Err(MissionError::RecoverInfeasible)));
    }

    #[test]
    fn recover_returns_the_first_feasible_duration() {
        let sc = Scenario::default();
        let cfg = MissionConfig::default();
        let exit = plan_traverse(&sc.gap, 3.0, 0.25).unwrap().end();
        let r = plan_recover(&exit, &sc.gap, &sc.lab, sc.drone_radius, &cfg).unwrap();
        for d in cfg.recover.durations().into_iter().filter(|d| *d < r.duration() - 1e-12) {
            let t = generate_primitive(&exit, &State::rest(hover_target(&sc.gap, &cfg)), d).unwrap();
            let n = (d / 0.02).ceil() as usize;
            let ok = (0..=n).all(|k| {
                let s = t.sample_clamped((k as f64 * 0.02).min(d));
                let f = s.a + Vector3::new(0.0, 0.0, GRAVITY);
                sc.lab.contains(&s.p, sc.drone_radius) && f.norm() <= 18.0 && f.z >= 3.0
            });
            assert!(!ok, "shorter candidate {d} was feasible");
        }
    }

    #[test]
    fn stages_join_continuously() {
        let mut sc = Scenario::default();
        sc.gap.tilt = 45f64.to_radians();
        let plan = plan_mission(&sc, &MissionConfig::default(), ApproachMode::Traditional).unwrap();
        let eps = 1e-6;
        let a_end = plan.approach.sample(plan.t_traverse);
        let t_start = plan.traverse.start();
        assert!((a_end.p - t_start.p).amax() < eps && (a_end.v - t_start.v).amax() < eps && (a_end.a - t_start.a).amax() < eps);
        let r0 = plan.recover.as_ref().unwrap().start();
        let t_end = plan.traverse.end();
        assert!((r0.p - t_end.p).amax() < eps && (r0.v - t_end.v).amax() < eps && (r0.a - t_end.a).amax() < eps);
        assert_eq!(plan.reference(plan.crossing_time()).p, sc.gap.center);
    }

    #[test]
    fn tr_mission_crosses_the_untilted_gap() {
        let sc = Scenario::default();
        let mut settings = RunSettings::default();
        settings.mission.v_cross = 1.0;
        let out = run_mission(Mode::Tr, &sc, None, &settings).unwrap();
        let m = &out.metrics;
        assert!(m.crossed && !m.collided, "{m:?}");
        assert!(m.miss_distance.unwrap() < 0.05, "{m:?}");
        assert_eq!(out.trace.count_events(EventKind::GapCrossed), 1);
        assert_eq!(out.trace.notes["recover_controller"], "traditional");
    }

    #[test]
    fn e2e_without_policy_is_an_error() {
        let r = run_mission(Mode::E2e, &Scenario::default(), None, &RunSettings::default());
        assert!(matches!(r, Err(MissionError::MissingPolicy(Mode::E2e))));
    }

    #[test]
    fn random_policy_still_reports_metrics() {
        let p = Mlp::init(crate::nn::MlpSpec::planner(), 5).unwrap();
        let c = Mlp::init(crate::nn::MlpSpec::controller(), 6).unwrap();
        let pol = PolicyNet::assemble(p, c, true, 2.5 * GRAVITY).unwrap();
        let out = run_mission(Mode::E2e, &Scenario::default(), Some(&pol), &RunSettings::default()).unwrap();
        assert!(out.trace.terminated_early());
        assert!(out.metrics.collided);
        assert!(out.metrics.ff_latency_ms.is_some());
    }

    #[test]
    fn prediction_is_constant_acceleration_kinematics() {
        let mut s = FullState::hover(Vector3::new(1.0, 2.0, 3.0));
        s.v = Vector3::new(1.0, 0.0, -2.0);
        s.a = Vector3::new(0.0, 4.0, 2.0);
        let p = predict(&s, 0.5);
        assert_relative_eq!(p.p, Vector3::new(1.5, 2.5, 2.25), epsilon = 1e-15);
        assert_relative_eq!(p.v, Vector3::new(1.0, 2.0, -1.0), epsilon = 1e-15);
        assert_eq!((p.a, p.att, p.t), (s.a, s.att, s.t));
        assert_eq!(predict(&s, 0.0), s);
    }

    #[test]
    fn latency_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = LatencyStats::from_samples(&v).unwrap();
        assert_eq!((s.p50, s.p90, s.p99, s.max), (50.0, 90.0, 99.0, 100.0));
        assert!(LatencyStats::from_samples(&[]).is_none());
    }
}
