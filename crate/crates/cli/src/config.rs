//! TOML run configuration. Every key has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use gapflight::control::ControlGains;
use gapflight::imitation::{OptimizerKind, PlannerRanges, TrainConfig};
use gapflight::mission::{MissionConfig, RecoverGrid, RunSettings};
use gapflight::nn::{ControllerLossWeights, PlannerLossWeights};
use gapflight::rl::{EsConfig, FinetuneConfig, RewardConfig, ScenarioRanges};
use gapflight::sim::{GapPose, LabBounds, Scenario, SimParams};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimParams,
    pub controller: ControlGains,
    pub mission: MissionSection,
    pub reward: RewardConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub finetune: FinetuneSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    /// SHA-256 of the resolved configuration's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn scenario(&self) -> Result<Scenario, String> {
        let m = &self.mission;
        let sc = Scenario {
            gap: GapPose {
                center: Vector3::from(m.gap.center),
                tilt: m.gap.tilt_deg.to_radians(),
                width: m.gap.width,
                height: m.gap.height,
            },
            start_hover: Vector3::from(m.start_hover),
            lab: LabBounds { min: Vector3::from(m.lab.min), max: Vector3::from(m.lab.max) },
            drone_radius: m.drone_radius,
        };
        sc.validate().map_err(|e| e.to_string())?;
        Ok(sc)
    }

    pub fn run_settings(&self) -> Result<RunSettings, String> {
        let m = &self.mission;
        let mission = MissionConfig {
            v_cross: m.v_cross,
            tau_tr: m.tau_tr,
            t_approach: m.t_approach,
            recover: parse_grid(&m.recover.grid)?,
            hover_offset_x: m.hover_offset_x,
            hover_height: m.hover_height,
            check_dt: m.check_dt,
            recover_thrust_min: m.recover_thrust_min,
            recover_thrust_max: m.recover_thrust_max,
            t_settle: m.t_settle,
            lag_comp: m.lag_comp,
        };
        mission.validate().map_err(|e| e.to_string())?;
        self.sim.validate().map_err(|e| e.to_string())?;
        self.controller.validate()?;
        Ok(RunSettings { mission, gains: self.controller, sim: self.sim })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            seed,
            optimizer: t.optimizer,
            standardize: t.standardize,
            lr_final: t.lr_final,
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            es: EsConfig { iters: f.iters, pairs: f.pairs, sigma: f.sigma, lr: f.lr, seed },
            episodes: f.episodes,
            randomize: f.randomize,
            ranges: f.ranges,
        }
    }
}

/// `start:step:end`, e.g. `0.5:0.3:3.0`.
pub fn parse_grid(s: &str) -> Result<RecoverGrid, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("recover grid {s:?}: {e}"))?;
    match parts[..] {
        [start, step, end] => Ok(RecoverGrid { start, step, end }),
        _ => Err(format!("recover grid {s:?} must read start:step:end")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSection {
    pub center: [f64; 3],
    pub tilt_deg: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabSection {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverSection {
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionSection {
    pub gap: GapSection,
    pub start_hover: [f64; 3],
    pub lab: LabSection,
    pub drone_radius: f64,
    pub v_cross: f64,
    pub tau_tr: f64,
    pub t_approach: f64,
    pub recover: RecoverSection,
    pub hover_offset_x: f64,
    pub hover_height: f64,
    pub check_dt: f64,
    pub recover_thrust_min: f64,
    pub recover_thrust_max: f64,
    pub t_settle: f64,
    pub lag_comp: f64,
}

impl Default for GapSection {
    fn default() -> Self {
        let g = Scenario::default().gap;
        Self { center: g.center.into(), tilt_deg: g.tilt.to_degrees(), width: g.width, height: g.height }
    }
}

impl Default for LabSection {
    fn default() -> Self {
        let l = Scenario::default().lab;
        Self { min: l.min.into(), max: l.max.into() }
    }
}

impl Default for RecoverSection {
    fn default() -> Self {
        let g = RecoverGrid::default();
        Self { grid: format!("{}:{}:{}", g.start, g.step, g.end) }
    }
}

impl Default for MissionSection {
    fn default() -> Self {
        let sc = Scenario::default();
        let m = MissionConfig::default();
        Self {
            gap: GapSection::default(),
            start_hover: sc.start_hover.into(),
            lab: LabSection::default(),
            drone_radius: sc.drone_radius,
            v_cross: m.v_cross,
            tau_tr: m.tau_tr,
            t_approach: m.t_approach,
            recover: RecoverSection::default(),
            hover_offset_x: m.hover_offset_x,
            hover_height: m.hover_height,
            check_dt: m.check_dt,
            recover_thrust_min: m.recover_thrust_min,
            recover_thrust_max: m.recover_thrust_max,
            t_settle: m.t_settle,
            lag_comp: m.lag_comp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub standardize: bool,
    pub lr_final: Option<f64>,
    /// Planner trajectories held out for the test loss.
    pub test_trajectories: usize,
    /// Fraction of controller samples held out for the test loss.
    pub controller_test_fraction: f64,
    pub planner_loss: PlannerLossWeights,
    pub controller_loss: ControllerLossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            standardize: t.standardize,
            lr_final: t.lr_final,
            test_trajectories: 100,
            controller_test_fraction: 0.05,
            planner_loss: PlannerLossWeights::default(),
            controller_loss: ControllerLossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub planner: PlannerRanges,
    pub points_per_traj: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { planner: PlannerRanges::default(), points_per_traj: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub iters: usize,
    pub pairs: usize,
    pub sigma: f64,
    pub lr: f64,
    pub episodes: usize,
    pub randomize: bool,
    pub ranges: ScenarioRanges,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            iters: f.es.iters,
            pairs: f.es.pairs,
            sigma: f.es.sigma,
            lr: f.es.lr,
            episodes: f.episodes,
            randomize: f.randomize,
            ranges: f.ranges,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory for outputs whose path is not given on the command line.
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out") }
    }
}
