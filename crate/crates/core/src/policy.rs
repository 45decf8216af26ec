//! The merged planner + controller network.
//!
//! Observation layout (29 values): the 17 planner inputs, then the current
//! position relative to the segment start, velocity and acceleration slot
//! (9), then the current Euler attitude (3). The controller sees
//! `planner_output − current` in its nine error slots followed by the attitude.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::AttitudeThrustCmd;
use crate::imitation::{
    denormalize_planner_output, normalize_planner_input, CONTROLLER_INPUT_DIM, CONTROLLER_OUTPUT_DIM,
    PLANNER_INPUT_DIM, PLANNER_OUTPUT_DIM,
};
use crate::nn::{CheckpointError, Mlp, MlpSpec, Scratch};

pub const OBS_DIM: usize = 29;
pub const WIRING_VERSION: u32 = 1;
pub const OBS_LAYOUT: &str = "planner17+pos3+vel3+acc3+att3";
/// The acceleration slot carries the desired-acceleration feed-forward; the
/// mission runner supplies zero current acceleration.
pub const ACCEL_SLOT: &str = "feedforward";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy assembly: {0}")]
    Assembly(String),
    #[error("policy evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("policy manifest: {0}")]
    Manifest(String),
    #[error("policy i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// On-disk description of an assembled policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyManifest {
    /// Paths relative to the manifest's directory unless absolute.
    pub planner_checkpoint: PathBuf,
    pub controller_checkpoint: PathBuf,
    pub normalize: bool,
    pub wiring_version: u32,
    pub obs_layout: String,
    pub accel_slot: String,
}

#[derive(Debug)]
pub struct PolicyNet {
    planner: Mlp,
    controller: Mlp,
    normalize: bool,
    thrust_max: f64,
    clamp_events: AtomicU64,
}

impl Clone for PolicyNet {
    fn clone(&self) -> Self {
        Self {
            planner: self.planner.clone(),
            controller: self.controller.clone(),
            normalize: self.normalize,
            thrust_max: self.thrust_max,
            clamp_events: AtomicU64::new(self.clamp_events()),
        }
    }
}

/// Per-caller evaluation buffers.
#[derive(Debug, Clone)]
pub struct PolicyScratch {
    planner: Scratch,
    controller: Scratch,
}

impl PolicyNet {
    /// Checks component shapes and wires them together. `thrust_max` bounds
    /// the commanded thrust.
    pub fn assemble(planner: Mlp, controller: Mlp, normalize: bool, thrust_max: f64) -> Result<Self, PolicyError> {
        if planner.input_dim() != PLANNER_INPUT_DIM || planner.output_dim() != PLANNER_OUTPUT_DIM {
            return Err(PolicyError::Assembly(format!("planner {} is not 17 → 9", planner.spec())));
        }
        if controller.input_dim() != CONTROLLER_INPUT_DIM || controller.output_dim() != CONTROLLER_OUTPUT_DIM {
            return Err(PolicyError::Assembly(format!("controller {} is not 12 → 3", controller.spec())));
        }
        if !(thrust_max > 0.0) {
            return Err(PolicyError::Assembly(format!("thrust limit {thrust_max} must be positive")));
        }
        Ok(Self { planner, controller, normalize, thrust_max, clamp_events: AtomicU64::new(0) })
    }

    pub fn planner(&self) -> &Mlp {
        &self.planner
    }

    pub fn controller(&self) -> &Mlp {
        &self.controller
    }

    pub fn planner_mut(&mut self) -> &mut Mlp {
        &mut self.planner
    }

    pub fn controller_mut(&mut self) -> &mut Mlp {
        &mut self.controller
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn thrust_max(&self) -> f64 {
        self.thrust_max
    }

    /// Number of evaluations whose thrust had to be clamped.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    pub fn reset_clamp_events(&self) {
        self.clamp_events.store(0, Ordering::Relaxed);
    }

    pub fn scratch(&self) -> PolicyScratch {
        PolicyScratch { planner: self.planner.scratch(), controller: self.controller.scratch() }
    }

    /// Planner half: the desired `(Δp, v, a)` relative to the segment start.
    pub fn plan(&self, planner_input: &[f64; PLANNER_INPUT_DIM], scratch: &mut PolicyScratch) -> Result<[f64; 9], PolicyError> {
        let eval = |e: crate::nn::NnError| PolicyError::Eval(e.to_string());
        if self.normalize {
            let (x, s) = normalize_planner_input(planner_input).map_err(|e| PolicyError::Eval(e.to_string()))?;
            let y = self.planner.forward_with(&x, &mut scratch.planner).map_err(eval)?;
            Ok(denormalize_planner_output(y, s))
        } else {
            let y = self.planner.forward_with(planner_input, &mut scratch.planner).map_err(eval)?;
            Ok(y.try_into().expect("planner output is 9-dimensional"))
        }
    }

    /// Roll, pitch and thrust for one observation. Thrust is clamped into
    /// `[0, thrust_max]`.
    pub fn eval(&self, obs: &[f64; OBS_DIM], scratch: &mut PolicyScratch) -> Result<AttitudeThrustCmd, PolicyError> {
        let planner_input: &[f64; PLANNER_INPUT_DIM] = obs[..PLANNER_INPUT_DIM].try_into().unwrap();
        let desired = self.plan(planner_input, scratch)?;
        let mut x = [0.0; CONTROLLER_INPUT_DIM];
        for i in 0..9 {
            x[i] = desired[i] - obs[PLANNER_INPUT_DIM + i];
        }
        x[9..].copy_from_slice(&obs[26..]);
        let y = self
            .controller
            .forward_with(&x, &mut scratch.controller)
            .map_err(|e| PolicyError::Eval(e.to_string()))?;
        let (roll, pitch, thrust) = (y[0], y[1], y[2]);
        if !(roll.is_finite() && pitch.is_finite() && thrust.is_finite()) {
            return Err(PolicyError::Eval("non-finite command".into()));
        }
        let clamped = thrust.clamp(0.0, self.thrust_max);
        if clamped != thrust {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
        }
        Ok(AttitudeThrustCmd::new(roll, pitch, clamped))
    }

    /// Writes both checkpoints next to `manifest_path` and the manifest itself.
    pub fn save(&self, manifest_path: &Path) -> Result<PolicyManifest, PolicyError> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("policy");
        let manifest = PolicyManifest {
            planner_checkpoint: PathBuf::from(format!("{stem}.planner.ckpt")),
            controller_checkpoint: PathBuf::from(format!("{stem}.controller.ckpt")),
            normalize: self.normalize,
            wiring_version: WIRING_VERSION,
            obs_layout: OBS_LAYOUT.into(),
            accel_slot: ACCEL_SLOT.into(),
        };
        self.planner.save(dir.join(&manifest.planner_checkpoint))?;
        self.controller.save(dir.join(&manifest.controller_checkpoint))?;
        write_manifest(manifest_path, &manifest)?;
        Ok(manifest)
    }

    /// Loads a manifest and the checkpoints it names.
    pub fn load(manifest_path: &Path, thrust_max: f64) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(manifest_path)?;
        let m: PolicyManifest = serde_json::from_str(&text).map_err(|e| PolicyError::Manifest(e.to_string()))?;
        if m.wiring_version != WIRING_VERSION || m.obs_layout != OBS_LAYOUT || m.accel_slot != ACCEL_SLOT {
            return Err(PolicyError::Manifest(format!(
                "unsupported wiring v{} ({}, accel slot {})",
                m.wiring_version, m.obs_layout, m.accel_slot
            )));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let planner = Mlp::load_expecting(dir.join(&m.planner_checkpoint), &MlpSpec::planner())?;
        let controller = Mlp::load_expecting(dir.join(&m.controller_checkpoint), &MlpSpec::controller())?;
        Self::assemble(planner, controller, m.normalize, thrust_max)
    }
}

pub fn write_manifest(path: &Path, manifest: &PolicyManifest) -> Result<(), PolicyError> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| PolicyError::Manifest(e.to_string()))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::GRAVITY;
    use crate::imitation::planner_input;
    use crate::trajectory::State;
    use nalgebra::Vector3;

    fn policy(normalize: bool) -> PolicyNet {
        let p = Mlp::init(MlpSpec::planner(), 1).unwrap();
        let c = Mlp::init(MlpSpec::controller(), 2).unwrap();
        PolicyNet::assemble(p, c, normalize, 2.5 * GRAVITY).unwrap()
    }

    fn obs() -> [f64; OBS_DIM] {
        let start = State::new(Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0), Vector3::zeros());
        let end = State::new(Vector3::new(3.0, 0.5, 0.5), Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0));
        let mut o = [0.0; OBS_DIM];
        o[..17].copy_from_slice(&planner_input(0.7, 1.2, &start, &end));
        for (i, v) in [0.2, 0.01, -0.05, 0.4, 0.1, 0.0, 0.0, 0.0, 0.0, 0.05, -0.02, 0.0].iter().enumerate() {
            o[17 + i] = *v;
        }
        o
    }

    #[test]
    fn wiring_matches_manual_composition() {
        for normalize in [false, true] {
            let pol = policy(normalize);
            let o = obs();
            let mut s = pol.scratch();
            let cmd = pol.eval(&o, &mut s).unwrap();

            let x17: [f64; 17] = o[..17].try_into().unwrap();
            let desired = if normalize {
                let (xn, sc) = normalize_planner_input(&x17).unwrap();
                denormalize_planner_output(&pol.planner().forward(&xn).unwrap(), sc)
            } else {
                pol.planner().forward(&x17).unwrap().try_into().unwrap()
            };
            let mut x12 = [0.0; 12];
            for i in 0..9 {
                x12[i] = desired[i] - o[17 + i];
            }
            x12[9..].copy_from_slice(&o[26..]);
            let y = pol.controller().forward(&x12).unwrap();
            assert_eq!(cmd.roll, y[0]);
            assert_eq!(cmd.pitch, y[1]);
            assert_eq!(cmd.thrust, y[2].clamp(0.0, pol.thrust_max()));
        }
    }

    #[test]
    fn shape_mismatch_is_an_assembly_error() {
        let p = Mlp::init(MlpSpec::planner(), 1).unwrap();
        let c = Mlp::init(MlpSpec { input_dim: 11, ..MlpSpec::controller() }, 2).unwrap();
        assert!(matches!(PolicyNet::assemble(p.clone(), c, true, 20.0), Err(PolicyError::Assembly(_))));
        let c = Mlp::init(MlpSpec::controller(), 2).unwrap();
        assert!(PolicyNet::assemble(c.clone(), c, true, 20.0).is_err());
    }

    #[test]
    fn degenerate_scale_faults() {
        let pol = policy(true);
        let mut o = obs();
        o[2..5].copy_from_slice(&[0.0; 3]);
        assert!(matches!(pol.eval(&o, &mut pol.scratch()), Err(PolicyError::Eval(_))));
    }

    #[test]
    fn thrust_clamp_is_counted() {
        let mut pol = policy(false);
        let n = pol.controller().params().len();
        // Force a large negative thrust output through the final bias.
        pol.controller_mut().params_mut()[n - 1] = -1e6;
        let cmd = pol.eval(&obs(), &mut pol.scratch()).unwrap();
        assert_eq!(cmd.thrust, 0.0);
        assert_eq!(pol.clamp_events(), 1);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let pol = policy(true);
        let m = pol.save(&path).unwrap();
        assert_eq!(m.accel_slot, "feedforward");
        let back = PolicyNet::load(&path, pol.thrust_max()).unwrap();
        let o = obs();
        assert_eq!(pol.eval(&o, &mut pol.scratch()).unwrap(), back.eval(&o, &mut back.scratch()).unwrap());
        std::fs::remove_file(dir.path().join(&m.controller_checkpoint)).unwrap();
        assert!(PolicyNet::load(&path, 20.0).is_err());
    }
}
