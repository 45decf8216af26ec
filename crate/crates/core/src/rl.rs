//! Flight reward, episodic evaluation and evolution-strategies fine-tuning of
//! the assembled policy.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imitation::Interval;
use crate::mission::{run_mission, MissionError, MissionMetrics, Mode, RunSettings};
use crate::policy::PolicyNet;
use crate::seeding::{derive_seed, indexed_rng};
use crate::sim::{EventKind, FullState, Scenario, Trace};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid fine-tuning argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite update in iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Mission(#[from] MissionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_omega: f64,
    pub w_alpha: f64,
    pub w_j: f64,
    /// Magnitude of the per-step collision penalty; applied with negative sign.
    pub collision_penalty: f64,
    /// Activation distance of the positive term, m.
    pub d_a: f64,
    pub w_r: f64,
    /// One-time bonus when the positive term first activates.
    pub bonus: f64,
    pub dt: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_omega: 2.0 * 57.3,
            w_alpha: 5.0 * 57.3,
            w_j: 10.0,
            collision_penalty: 1e9,
            d_a: 0.15,
            w_r: 1000.0,
            bonus: 5e5,
            dt: 0.02,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let w = [self.w_omega, self.w_alpha, self.w_j, self.collision_penalty, self.w_r, self.bonus];
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || !(self.d_a > 0.0) || !(self.dt > 0.0) {
            return Err(RlError::InvalidArgument(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One step's reward split into its penalty and incentive parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub negative: f64,
    pub positive: f64,
}

impl StepReward {
    pub fn total(&self) -> f64 {
        self.negative + self.positive
    }
}

/// Reward for the transition `prev → cur`.
///
/// `R_neg = −(w_ω‖ω‖ + w_α‖Δω/Δt‖ + w_j‖Δa/Δt‖)·Δt`, minus the collision
/// penalty when `collided`; `R_pos = w_r·max(0, d_a − ‖p_c − p‖)·Δt`, plus the
/// bonus the first time it is positive (tracked in `activated`).
pub fn reward_step(
    prev: &FullState,
    cur: &FullState,
    gap_center: &Vector3<f64>,
    cfg: &RewardConfig,
    collided: bool,
    activated: &mut bool,
) -> StepReward {
    let dt = cfg.dt;
    let alpha = (cur.omega - prev.omega) / dt;
    let jerk = (cur.a - prev.a) / dt;
    let mut negative = -(cfg.w_omega * cur.omega.norm() + cfg.w_alpha * alpha.norm() + cfg.w_j * jerk.norm()) * dt;
    if collided {
        negative -= cfg.collision_penalty;
    }
    let mut positive = cfg.w_r * (cfg.d_a - (gap_center - cur.p).norm()).max(0.0) * dt;
    if positive > 0.0 && !*activated {
        *activated = true;
        positive += cfg.bonus;
    }
    StepReward { negative, positive }
}

/// Time-averaged `‖ω‖` and commanded thrust over a trace.
pub fn eval_metrics(trace: &Trace) -> Option<(f64, f64)> {
    if trace.samples.is_empty() {
        return None;
    }
    let n = trace.samples.len() as f64;
    let omega = trace.samples.iter().map(|s| s.state.omega.norm()).sum::<f64>() / n;
    let thrust = trace.samples.iter().map(|s| s.cmd.thrust).sum::<f64>() / n;
    Some((omega, thrust))
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub trace: Trace,
    pub rewards: Vec<StepReward>,
    pub ret: f64,
    /// Whether the positive term (and its bonus) ever activated.
    pub activated: bool,
    /// The rollout stopped on a simulation fault.
    pub faulted: bool,
    pub metrics: Option<MissionMetrics>,
}

/// Scores a finished trace. A terminal collision or out-of-bounds event is
/// penalized on the step it occurs; `extra_penalty` adds one more penalty at
/// the end (used for faults).
pub fn score_trace(trace: &Trace, gap_center: &Vector3<f64>, cfg: &RewardConfig, extra_penalty: bool) -> (Vec<StepReward>, bool) {
    let mut activated = false;
    let mut rewards = Vec::with_capacity(trace.samples.len());
    for i in 1..trace.samples.len() {
        let collided = trace
            .events
            .iter()
            .any(|e| e.sample == i && matches!(e.kind, EventKind::Collision | EventKind::OutOfBounds));
        rewards.push(reward_step(
            &trace.samples[i - 1].state,
            &trace.samples[i].state,
            gap_center,
            cfg,
            collided,
            &mut activated,
        ));
    }
    if extra_penalty {
        rewards.push(StepReward { negative: -cfg.collision_penalty, positive: 0.0 });
    }
    (rewards, activated)
}

/// Runs one mission and scores it.
pub fn episode(
    mode: Mode,
    policy: Option<&PolicyNet>,
    scenario: &Scenario,
    settings: &RunSettings,
    cfg: &RewardConfig,
) -> Result<EpisodeResult, RlError> {
    cfg.validate()?;
    if (cfg.dt - settings.sim.dt).abs() > 1e-12 {
        return Err(RlError::InvalidArgument(format!(
            "reward dt {} differs from simulation dt {}",
            cfg.dt, settings.sim.dt
        )));
    }
    let (trace, metrics, faulted) = match run_mission(mode, scenario, policy, settings) {
        Ok(out) => (out.trace, Some(out.metrics), false),
        Err(MissionError::Sim(fault)) => (fault.trace, None, true),
        Err(e) => return Err(e.into()),
    };
    let (rewards, activated) = score_trace(&trace, &scenario.gap.center, cfg, faulted);
    let ret = rewards.iter().map(StepReward::total).sum();
    Ok(EpisodeResult { trace, rewards, ret, activated, faulted, metrics })
}

/// Per-episode scenario randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioRanges {
    pub tilt_deg: Interval,
    /// Per-axis jitter of the gap center (y, z), m.
    pub center_jitter: f64,
    /// Per-axis jitter of the start hover (x, y, z), m.
    pub start_jitter: f64,
}

impl Default for ScenarioRanges {
    fn default() -> Self {
        Self { tilt_deg: Interval::new(0.0, 60.0), center_jitter: 0.5, start_jitter: 0.5 }
    }
}

impl ScenarioRanges {
    pub fn sample(&self, base: &Scenario, rng: &mut impl Rng) -> Scenario {
        let mut sc = *base;
        let u = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        sc.gap.tilt = if self.tilt_deg.max > self.tilt_deg.min {
            rng.gen_range(self.tilt_deg.min..=self.tilt_deg.max)
        } else {
            self.tilt_deg.min
        }
        .to_radians();
        sc.gap.center.y += u(rng, self.center_jitter);
        sc.gap.center.z += u(rng, self.center_jitter);
        for i in 0..3 {
            sc.start_hover[i] += u(rng, self.start_jitter);
        }
        sc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    pub iters: usize,
    /// Antithetic pairs per iteration; each iteration evaluates `2·pairs` perturbations.
    pub pairs: usize,
    pub sigma: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self { iters: 30, pairs: 4, sigma: 0.01, lr: 0.002, seed: 0 }
    }
}

/// Return of the unperturbed parameters before the update of iteration `iter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsRecord {
    pub iter: usize,
    pub mean_return: f64,
    pub best_return: f64,
}

/// Centered ranks in `[−0.5, 0.5]`; ties broken by index.
fn centered_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; n];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = if n > 1 { rank as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
    }
    r
}

/// Maximizes `objective(θ, iter)` with antithetic Gaussian perturbations and
/// rank-normalized returns. Returns `iters + 1` records; record `k` scores the
/// parameters after `k` updates.
pub fn es_optimize<F>(theta: &mut [f64], objective: F, cfg: &EsConfig) -> Result<Vec<EsRecord>, RlError>
where
    F: Fn(&[f64], usize) -> f64 + Sync,
{
    if cfg.pairs == 0 || !(cfg.sigma >= 0.0) || !(cfg.lr >= 0.0) {
        return Err(RlError::InvalidArgument(format!("{cfg:?}")));
    }
    let dim = theta.len();
    let mut records = Vec::with_capacity(cfg.iters + 1);
    let mut best = f64::NEG_INFINITY;
    let noise_seed = derive_seed(cfg.seed, "es-noise");
    for iter in 0..=cfg.iters {
        let center = objective(theta, iter);
        best = best.max(center);
        records.push(EsRecord { iter, mean_return: center, best_return: best });
        if iter == cfg.iters || cfg.sigma == 0.0 {
            continue;
        }
        let mut rng = indexed_rng(noise_seed, iter as u64);
        let eps: Vec<Vec<f64>> =
            (0..cfg.pairs).map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let returns: Vec<f64> = (0..2 * cfg.pairs)
            .into_par_iter()
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                let e = &eps[k / 2];
                let probe: Vec<f64> = theta.iter().zip(e).map(|(t, n)| t + sign * cfg.sigma * n).collect();
                objective(&probe, iter)
            })
            .collect();
        let u = centered_ranks(&returns);
        let scale = cfg.lr / (2.0 * cfg.pairs as f64 * cfg.sigma);
        let mut step = vec![0.0; dim];
        for (i, e) in eps.iter().enumerate() {
            let w = u[2 * i] - u[2 * i + 1];
            for (s, n) in step.iter_mut().zip(e) {
                *s += w * n;
            }
        }
        if step.iter().any(|s| !s.is_finite()) {
            return Err(RlError::NonFinite(iter));
        }
        for (t, s) in theta.iter_mut().zip(&step) {
            *t += scale * s;
        }
    }
    Ok(records)
}

/// Number of trailing layers of each sub-network that fine-tuning adjusts.
pub const TUNED_LAYERS: usize = 2;

/// The tuned parameters of `policy` as one flat vector (planner first).
pub fn tuned_params(policy: &PolicyNet) -> Vec<f64> {
    let pr = policy.planner().last_layers_range(TUNED_LAYERS);
    let cr = policy.controller().last_layers_range(TUNED_LAYERS);
    let mut v = policy.planner().params()[pr].to_vec();
    v.extend_from_slice(&policy.controller().params()[cr]);
    v
}

pub fn set_tuned_params(policy: &mut PolicyNet, theta: &[f64]) {
    let pr = policy.planner().last_layers_range(TUNED_LAYERS);
    let cr = policy.controller().last_layers_range(TUNED_LAYERS);
    let split = pr.len();
    policy.planner_mut().params_mut()[pr].copy_from_slice(&theta[..split]);
    policy.controller_mut().params_mut()[cr].copy_from_slice(&theta[split..]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub es: EsConfig,
    /// Episodes averaged per evaluation.
    pub episodes: usize,
    /// Draw scenarios from `ranges` instead of flying the base scenario.
    pub randomize: bool,
    pub ranges: ScenarioRanges,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { es: EsConfig::default(), episodes: 1, randomize: true, ranges: ScenarioRanges::default() }
    }
}

/// Mean return of `policy` over the scenarios of iteration `iter`.
pub fn evaluate_policy(
    policy: &PolicyNet,
    base: &Scenario,
    iter: usize,
    ft: &FinetuneConfig,
    settings: &RunSettings,
    reward: &RewardConfig,
) -> f64 {
    let scenario_seed = derive_seed(ft.es.seed, "es-scenarios");
    let mut total = 0.0;
    for e in 0..ft.episodes {
        let sc = if ft.randomize {
            let mut rng = indexed_rng(scenario_seed, (iter * ft.episodes + e) as u64);
            ft.ranges.sample(base, &mut rng)
        } else {
            *base
        };
        total += match episode(Mode::Rl, Some(policy), &sc, settings, reward) {
            Ok(r) => r.ret,
            Err(_) => -reward.collision_penalty,
        };
    }
    total / ft.episodes as f64
}

/// Fine-tunes the last layers of both sub-networks to maximize episode return.
pub fn finetune(
    policy: &PolicyNet,
    base: &Scenario,
    ft: &FinetuneConfig,
    settings: &RunSettings,
    reward: &RewardConfig,
) -> Result<(PolicyNet, Vec<EsRecord>), RlError> {
    reward.validate()?;
    if ft.episodes == 0 {
        return Err(RlError::InvalidArgument("need at least one episode per evaluation".into()));
    }
    let mut theta = tuned_params(policy);
    let objective = |params: &[f64], iter: usize| {
        let mut p = policy.clone();
        set_tuned_params(&mut p, params);
        evaluate_policy(&p, base, iter, ft, settings, reward)
    };
    let curve = es_optimize(&mut theta, objective, &ft.es)?;
    let mut out = policy.clone();
    set_tuned_params(&mut out, &theta);
    out.reset_clamp_events();
    Ok((out, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{AttitudeThrustCmd, GRAVITY};
    use crate::nn::{Mlp, MlpSpec};
    use crate::sim::{Event, TraceSample};
    use approx::assert_relative_eq;

    fn at(p: Vector3<f64>, t: f64) -> FullState {
        FullState { t, ..FullState::hover(p) }
    }

    #[test]
    fn hover_far_from_the_gap_earns_nothing() {
        let cfg = RewardConfig::default();
        let c = Vector3::new(3.0, 0.0, 1.5);
        let mut act = false;
        let r = reward_step(&at(Vector3::new(0.0, 0.0, 1.0), 0.0), &at(Vector3::new(0.0, 0.0, 1.0), 0.02), &c, &cfg, false, &mut act);
        assert_eq!(r.total(), 0.0);
        assert!(!act);
    }

    #[test]
    fn positive_term_worked_example() {
        let cfg = RewardConfig::default();
        let c = Vector3::new(3.0, 0.0, 1.5);
        let p = c + Vector3::new(0.0, 0.1, 0.0);
        let mut act = true;
        let r = reward_step(&at(p, 0.0), &at(p, 0.02), &c, &cfg, false, &mut act);
        assert_relative_eq!(r.positive, 1.0, epsilon = 1e-12);
        assert_eq!(r.negative, 0.0);
        let mut fresh = false;
        let r = reward_step(&at(p, 0.0), &at(p, 0.02), &c, &cfg, false, &mut fresh);
        assert_relative_eq!(r.positive, 1.0 + 5e5, epsilon = 1e-9);
        assert!(fresh);
    }

    #[test]
    fn collision_step_is_dominated_by_the_penalty() {
        let cfg = RewardConfig::default();
        let c = Vector3::new(3.0, 0.0, 1.5);
        let mut prev = at(Vector3::new(1.0, 0.0, 1.0), 0.0);
        prev.omega = Vector3::new(1.0, -2.0, 0.0);
        let mut cur = at(Vector3::new(1.0, 0.0, 1.0), 0.02);
        cur.a = Vector3::new(5.0, 0.0, 0.0);
        let mut act = false;
        let r = reward_step(&prev, &cur, &c, &cfg, true, &mut act);
        assert!(r.total() <= -1e9);
        assert!(r.total() > -1e9 - 1e5);
    }

    #[test]
    fn positive_rate_increases_towards_the_center() {
        let cfg = RewardConfig::default();
        let c = Vector3::zeros();
        let mut last = -1.0;
        for k in (0..=20).rev() {
            let p = Vector3::new(0.0, 0.15 * k as f64 / 20.0, 0.0);
            let mut act = true;
            let r = reward_step(&at(p, 0.0), &at(p, 0.02), &c, &cfg, false, &mut act).positive;
            if k == 20 {
                assert_eq!(r, 0.0);
            } else {
                assert!(r > last);
            }
            last = r;
        }
    }

    fn synthetic_trace(path: &[Vector3<f64>], collide_at: Option<usize>) -> Trace {
        let samples = path
            .iter()
            .enumerate()
            .map(|(i, p)| TraceSample { state: at(*p, i as f64 * 0.02), cmd: AttitudeThrustCmd::hover() })
            .collect();
        let events = collide_at.map(|i| Event { t: i as f64 * 0.02, kind: EventKind::Collision, sample: i }).into_iter().collect();
        Trace { dt: 0.02, samples, events, ..Default::default() }
    }

    #[test]
    fn bonus_is_paid_once_and_returns_decompose() {
        let c = Vector3::new(3.0, 0.0, 1.5);
        let path: Vec<_> = (0..40).map(|i| Vector3::new(2.8 + 0.01 * i as f64, 0.0, 1.5)).collect();
        let (r, act) = score_trace(&synthetic_trace(&path, None), &c, &RewardConfig::default(), false);
        assert!(act);
        assert_eq!(r.iter().filter(|s| s.positive >= 5e5).count(), 1);
        let total: f64 = r.iter().map(StepReward::total).sum();
        let split: f64 = r.iter().map(|s| s.negative).sum::<f64>() + r.iter().map(|s| s.positive).sum::<f64>();
        assert_relative_eq!(total, split, max_relative = 1e-15);
    }

    #[test]
    fn collision_dominance_on_constructed_traces() {
        let c = Vector3::new(3.0, 0.0, 1.5);
        let cfg = RewardConfig::default();
        // The best collision-free run passes the center; the collided one also does.
        let through: Vec<_> = (0..40).map(|i| Vector3::new(2.6 + 0.02 * i as f64, 0.0, 1.5)).collect();
        let hover: Vec<_> = (0..40).map(|_| Vector3::new(0.0, 0.0, 1.0)).collect();
        let ret = |t: &Trace| score_trace(t, &c, &cfg, false).0.iter().map(StepReward::total).sum::<f64>();
        let crashed = ret(&synthetic_trace(&through, Some(39)));
        assert!(crashed < ret(&synthetic_trace(&hover, None)));
        assert!(crashed < ret(&synthetic_trace(&through, None)));
    }

    #[test]
    fn eval_metrics_examples() {
        let hover = synthetic_trace(&[Vector3::zeros(); 10], None);
        assert_eq!(eval_metrics(&hover), Some((0.0, GRAVITY)));
        let mut roll = hover.clone();
        roll.samples.iter_mut().for_each(|s| s.state.omega = Vector3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(eval_metrics(&roll).unwrap().0, 0.5, epsilon = 1e-15);
        assert!(eval_metrics(&Trace::default()).is_none());
    }

    #[test]
    fn tr_episode_on_a_benign_scenario_is_bonus_dominated() {
        let settings = RunSettings::default();
        let r = episode(Mode::Tr, None, &Scenario::default(), &settings, &RewardConfig::default()).unwrap();
        assert!(r.activated && !r.faulted);
        assert!(r.ret > 0.5 * 5e5, "return {}", r.ret);
        assert_relative_eq!(r.ret, r.rewards.iter().map(StepReward::total).sum::<f64>());
    }

    #[test]
    fn es_solves_a_quadratic() {
        let cfg = EsConfig { iters: 100, pairs: 8, sigma: 0.1, lr: 0.05, seed: 3 };
        let mut x = [0.0];
        let curve = es_optimize(&mut x, |p, _| -(p[0] - 2.0).powi(2), &cfg).unwrap();
        assert!((x[0] - 2.0).abs() < 0.15, "x = {}", x[0]);
        assert!(curve.windows(2).all(|w| w[1].best_return >= w[0].best_return));
    }

    #[test]
    fn es_degenerate_settings_keep_parameters() {
        let mut x = [1.0, 2.0];
        let cfg = EsConfig { iters: 5, pairs: 2, sigma: 0.0, lr: 0.1, seed: 0 };
        es_optimize(&mut x, |p, _| -p[0] * p[0], &cfg).unwrap();
        assert_eq!(x, [1.0, 2.0]);
        let cfg = EsConfig { sigma: 0.1, lr: 0.0, ..cfg };
        let curve = es_optimize(&mut x, |p, _| -p[0] * p[0], &cfg).unwrap();
        assert_eq!(x, [1.0, 2.0]);
        assert!(curve.iter().all(|r| r.mean_return == -1.0));
    }

    #[test]
    fn tuned_parameters_round_trip() {
        let p = Mlp::init(MlpSpec::planner(), 1).unwrap();
        let c = Mlp::init(MlpSpec::controller(), 2).unwrap();
        let mut pol = PolicyNet::assemble(p, c, true, 25.0).unwrap();
        let theta = tuned_params(&pol);
        assert_eq!(theta.len(), 100 * 100 + 100 + 100 * 9 + 9 + 40 * 40 + 40 + 40 * 3 + 3);
        let before = pol.planner().params()[0];
        let bumped: Vec<f64> = theta.iter().map(|t| t + 1.0).collect();
        set_tuned_params(&mut pol, &bumped);
        assert_eq!(tuned_params(&pol), bumped);
        assert_eq!(pol.planner().params()[0], before);
    }

    #[test]
    fn centered_ranks_are_symmetric() {
        assert_eq!(centered_ranks(&[3.0, -1.0, 10.0]), vec![0.0, -0.5, 0.5]);
    }
}
