//! Expert datasets for the planner and controller networks, the time-scaling
//! normalization, data augmentation and the supervised training loops.

use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{track, ControlError, ControlErrors, ControlGains};
use crate::nn::{
    Adam, BatchWorkspace, ControllerLossWeights, LossKind, Mlp, NnError, PlannerLossWeights,
};
use crate::seeding::{derive_seed, indexed_rng};
use crate::trajectory::{generate_primitive, travel_time, State, TrajectoryError};

pub const PLANNER_INPUT_DIM: usize = 17;
pub const PLANNER_OUTPUT_DIM: usize = 9;
pub const CONTROLLER_INPUT_DIM: usize = 12;
pub const CONTROLLER_OUTPUT_DIM: usize = 3;

/// Largest admissible scale-augmentation factor.
pub const MAX_AUGMENT_SCALE: f64 = 5.0;

pub const PLANNER_CSV_HEADER: [&str; 26] = [
    "t", "vbar", "dpx", "dpy", "dpz", "vsx", "vsy", "vsz", "asx", "asy", "asz", "vex", "vey",
    "vez", "aex", "aey", "aez", "label_dpx", "label_dpy", "label_dpz", "label_vx", "label_vy",
    "label_vz", "label_ax", "label_ay", "label_az",
];

pub const CONTROLLER_CSV_HEADER: [&str; 15] = [
    "epx", "epy", "epz", "evx", "evy", "evz", "eax", "eay", "eaz", "roll", "pitch", "yaw",
    "label_roll", "label_pitch", "label_thrust",
];

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error("invalid range configuration: {0}")]
    Range(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize, curve: Vec<EpochLoss> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] ImitationError),
}

/// Closed interval used for uniform sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn symmetric(r: f64) -> Self {
        Self { min: -r, max: r }
    }

    fn validate(&self, name: &str) -> Result<(), ImitationError> {
        if self.min.is_finite() && self.max.is_finite() && self.min <= self.max {
            Ok(())
        } else {
            Err(ImitationError::Range(format!("{name}: [{}, {}]", self.min, self.max)))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }

    fn sample3(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::new(self.sample(rng), self.sample(rng), self.sample(rng))
    }
}

/// Sampling boxes for planner boundary conditions, applied per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerRanges {
    /// End position relative to the start, m.
    pub delta_p: Interval,
    /// Boundary velocities, m/s.
    pub velocity: Interval,
    /// Boundary accelerations, m/s².
    pub acceleration: Interval,
    /// Average speed, m/s.
    pub v_bar: Interval,
    /// A trajectory is dropped if any sampled velocity component exceeds this.
    pub max_abs_velocity: f64,
    /// A trajectory is dropped if any sampled acceleration component exceeds this.
    pub max_abs_acceleration: f64,
}

impl Default for PlannerRanges {
    fn default() -> Self {
        Self {
            delta_p: Interval::symmetric(30.0),
            velocity: Interval::symmetric(10.0),
            acceleration: Interval::symmetric(10.0),
            v_bar: Interval::new(1.0, 7.0),
            max_abs_velocity: 30.0,
            max_abs_acceleration: 60.0,
        }
    }
}

impl PlannerRanges {
    pub fn validate(&self) -> Result<(), ImitationError> {
        self.delta_p.validate("delta_p")?;
        self.velocity.validate("velocity")?;
        self.acceleration.validate("acceleration")?;
        self.v_bar.validate("v_bar")?;
        if !(self.v_bar.min > 0.0) {
            return Err(ImitationError::Range("v_bar must be strictly positive".into()));
        }
        if !(self.max_abs_velocity > 0.0 && self.max_abs_acceleration > 0.0) {
            return Err(ImitationError::Range("rejection bounds must be positive".into()));
        }
        Ok(())
    }
}

/// Sampling boxes for controller inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerRanges {
    pub e_p: Interval,
    /// Euler angles, degrees.
    pub euler_deg: Interval,
    pub e_v: Interval,
    pub e_a: Interval,
}

impl ControllerRanges {
    pub fn large() -> Self {
        Self {
            e_p: Interval::symmetric(10.0),
            euler_deg: Interval::symmetric(180.0),
            e_v: Interval::symmetric(5.0),
            e_a: Interval::symmetric(10.0),
        }
    }

    /// The working range seen in flight.
    pub fn short() -> Self {
        Self {
            e_p: Interval::symmetric(0.2),
            euler_deg: Interval::symmetric(30.0),
            e_v: Interval::symmetric(0.3),
            e_a: Interval::symmetric(10.0),
        }
    }

    pub fn validate(&self) -> Result<(), ImitationError> {
        self.e_p.validate("e_p")?;
        self.euler_deg.validate("euler_deg")?;
        self.e_v.validate("e_v")?;
        self.e_a.validate("e_a")
    }
}

// ---------------------------------------------------------------------------
// Planner samples

/// Planner input `(t, v̄, Δp, v_s, a_s, v_e, a_e)` and label `(Δp_l, v_l, a_l)`.
/// Positions are relative to the start point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerSample {
    pub input: [f64; PLANNER_INPUT_DIM],
    pub label: [f64; PLANNER_OUTPUT_DIM],
}

fn vec_at(x: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(x[i], x[i + 1], x[i + 2])
}

/// Packs a planner query for time `t` into the network input layout.
pub fn planner_input(t: f64, v_bar: f64, start: &State, end: &State) -> [f64; PLANNER_INPUT_DIM] {
    let dp = end.p - start.p;
    let mut x = [0.0; PLANNER_INPUT_DIM];
    x[0] = t;
    x[1] = v_bar;
    for i in 0..3 {
        x[2 + i] = dp[i];
        x[5 + i] = start.v[i];
        x[8 + i] = start.a[i];
        x[11 + i] = end.v[i];
        x[14 + i] = end.a[i];
    }
    x
}

/// Boundary states encoded in a planner input, with the start at the origin.
pub fn planner_boundaries(input: &[f64; PLANNER_INPUT_DIM]) -> (State, State) {
    let start = State::new(Vector3::zeros(), vec_at(input, 5), vec_at(input, 8));
    let end = State::new(vec_at(input, 2), vec_at(input, 11), vec_at(input, 14));
    (start, end)
}

/// Position, velocity and acceleration packed as a 9-vector.
pub fn state_to_label(s: &State) -> [f64; PLANNER_OUTPUT_DIM] {
    let mut y = [0.0; 9];
    for i in 0..3 {
        y[i] = s.p[i];
        y[3 + i] = s.v[i];
        y[6 + i] = s.a[i];
    }
    y
}

pub fn label_to_state(y: &[f64]) -> State {
    State::new(vec_at(y, 0), vec_at(y, 3), vec_at(y, 6))
}

/// Expert label for a planner input: the primitive sampled at `t`.
pub fn planner_label(input: &[f64; PLANNER_INPUT_DIM]) -> Result<[f64; PLANNER_OUTPUT_DIM], TrajectoryError> {
    let (start, end) = planner_boundaries(input);
    let duration = travel_time(&end.p, input[1])?;
    let traj = generate_primitive(&start, &end, duration)?;
    let t = input[0];
    // Tolerate rounding of T under augmentation.
    if !(t >= 0.0 && t <= duration * (1.0 + 1e-12)) {
        return Err(TrajectoryError::OutOfRange { t, duration });
    }
    Ok(state_to_label(&traj.sample_clamped(t)))
}

/// Provenance of a generated planner dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerDatasetMeta {
    pub seed: u64,
    pub n_traj: usize,
    pub points_per_traj: usize,
    /// Candidate trajectories drawn, kept or not.
    pub candidates: usize,
    pub ranges: PlannerRanges,
}

impl PlannerDatasetMeta {
    pub fn retention(&self) -> f64 {
        self.n_traj as f64 / self.candidates.max(1) as f64
    }
}

/// Samples grouped in contiguous blocks of `points_per_traj` per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerDataset {
    pub meta: PlannerDatasetMeta,
    pub samples: Vec<PlannerSample>,
}

impl PlannerDataset {
    /// Splits off the last `n_test` trajectories.
    pub fn split_trajectories(&self, n_test: usize) -> Result<(Vec<PlannerSample>, Vec<PlannerSample>), ImitationError> {
        let ppt = self.meta.points_per_traj;
        if n_test >= self.meta.n_traj {
            return Err(ImitationError::InvalidArgument(format!(
                "cannot hold out {n_test} of {} trajectories",
                self.meta.n_traj
            )));
        }
        let cut = (self.meta.n_traj - n_test) * ppt;
        Ok((self.samples[..cut].to_vec(), self.samples[cut..].to_vec()))
    }
}

/// One candidate trajectory, or `None` if it violates the rejection bound.
fn planner_candidate(
    seed: u64,
    index: u64,
    points: usize,
    ranges: &PlannerRanges,
) -> Option<Vec<PlannerSample>> {
    let mut rng = indexed_rng(seed, index);
    let dp = ranges.delta_p.sample3(&mut rng);
    let v_bar = ranges.v_bar.sample(&mut rng);
    let start = State::new(Vector3::zeros(), ranges.velocity.sample3(&mut rng), ranges.acceleration.sample3(&mut rng));
    let end = State::new(dp, ranges.velocity.sample3(&mut rng), ranges.acceleration.sample3(&mut rng));
    let duration = travel_time(&dp, v_bar).ok()?;
    let traj = generate_primitive(&start, &end, duration).ok()?;
    let mut out = Vec::with_capacity(points);
    for k in 0..points {
        let t = if points == 1 { 0.0 } else { k as f64 * duration / (points - 1) as f64 };
        let t = t.min(duration);
        let s = traj.sample(t).ok()?;
        let too_fast = s.v.iter().any(|v| v.abs() > ranges.max_abs_velocity);
        let too_hard = s.a.iter().any(|a| a.abs() > ranges.max_abs_acceleration);
        if too_fast || too_hard {
            return None;
        }
        out.push(PlannerSample { input: planner_input(t, v_bar, &start, &end), label: state_to_label(&s) });
    }
    Some(out)
}

/// Draws random boundary conditions until `n_traj` trajectories pass the
/// rejection bound, sampling each at `points_per_traj` uniform instants.
///
/// Candidate `i` depends only on `(seed, i)`, so the result is independent of
/// the thread count.
pub fn gen_planner_dataset(
    n_traj: usize,
    points_per_traj: usize,
    ranges: &PlannerRanges,
    seed: u64,
) -> Result<PlannerDataset, ImitationError> {
    if n_traj == 0 || points_per_traj == 0 {
        return Err(ImitationError::InvalidArgument("need at least one trajectory and one point".into()));
    }
    ranges.validate()?;
    let max_candidates = n_traj.saturating_mul(10);
    let mut kept: Vec<Vec<PlannerSample>> = Vec::with_capacity(n_traj);
    let mut next = 0usize;
    while kept.len() < n_traj && next < max_candidates {
        let missing = n_traj - kept.len();
        let chunk = (missing + missing / 4 + 16).min(max_candidates - next);
        let results: Vec<Option<Vec<PlannerSample>>> = (next..next + chunk)
            .into_par_iter()
            .map(|i| planner_candidate(seed, i as u64, points_per_traj, ranges))
            .collect();
        for r in results {
            next += 1;
            if let Some(traj) = r {
                kept.push(traj);
                if kept.len() == n_traj {
                    break;
                }
            }
        }
    }
    if kept.len() < n_traj {
        return Err(ImitationError::Range(format!(
            "rejection rate above 90 %: only {} of {next} candidates kept",
            kept.len()
        )));
    }
    Ok(PlannerDataset {
        meta: PlannerDatasetMeta { seed, n_traj, points_per_traj, candidates: next, ranges: *ranges },
        samples: kept.into_iter().flatten().collect(),
    })
}

// ---------------------------------------------------------------------------
// Normalization

/// Time-scaling normalization with `s = T = ‖Δp‖/v̄`:
/// `t′ = t/s, v̄′ = s²v̄, Δp′ = sΔp, v′ = s²v, a′ = s³a`.
pub fn normalize_planner_input(
    raw: &[f64; PLANNER_INPUT_DIM],
) -> Result<([f64; PLANNER_INPUT_DIM], f64), TrajectoryError> {
    let s = travel_time(&vec_at(raw, 2), raw[1])?;
    let (s2, s3) = (s * s, s * s * s);
    let mut x = [0.0; PLANNER_INPUT_DIM];
    x[0] = raw[0] / s;
    x[1] = s2 * raw[1];
    for i in 0..3 {
        x[2 + i] = s * raw[2 + i];
        x[5 + i] = s2 * raw[5 + i];
        x[8 + i] = s3 * raw[8 + i];
        x[11 + i] = s2 * raw[11 + i];
        x[14 + i] = s3 * raw[14 + i];
    }
    Ok((x, s))
}

/// `(sΔp, s²v, s³a)`: a raw label expressed in the normalized frame.
pub fn normalize_planner_label(label: &[f64; PLANNER_OUTPUT_DIM], s: f64) -> [f64; PLANNER_OUTPUT_DIM] {
    let f = [s, s * s, s * s * s];
    std::array::from_fn(|i| label[i] * f[i / 3])
}

/// `Δp = Δp′/s, v = v′/s², a = a′/s³`.
pub fn denormalize_planner_output(out: &[f64], s: f64) -> [f64; PLANNER_OUTPUT_DIM] {
    let f = [s, s * s, s * s * s];
    std::array::from_fn(|i| out[i] / f[i / 3])
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    /// Negates every spatial field.
    Flip,
    /// Multiplies every spatial field and `v̄` by `k ∈ (0, 5]`.
    Scale(f64),
}

pub fn augment(sample: &PlannerSample, mode: Augment) -> Result<PlannerSample, ImitationError> {
    let mut out = *sample;
    match mode {
        Augment::Flip => {
            out.input[2..].iter_mut().for_each(|x| *x = -*x);
            out.label.iter_mut().for_each(|y| *y = -*y);
        }
        Augment::Scale(k) => {
            if !(k > 0.0 && k <= MAX_AUGMENT_SCALE) {
                return Err(ImitationError::InvalidArgument(format!("scale factor {k} outside (0, 5]")));
            }
            out.input[1..].iter_mut().for_each(|x| *x *= k);
            out.label.iter_mut().for_each(|y| *y *= k);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Controller samples

/// Controller input `(e_p, e_v, e_a, att)` and label `(roll, pitch, thrust)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSample {
    pub input: [f64; CONTROLLER_INPUT_DIM],
    pub label: [f64; CONTROLLER_OUTPUT_DIM],
}

/// Expert label: the tracking law with the acceleration slot as feed-forward.
pub fn controller_label(
    input: &[f64; CONTROLLER_INPUT_DIM],
    gains: &ControlGains,
) -> Result<[f64; CONTROLLER_OUTPUT_DIM], ControlError> {
    let errors = ControlErrors::from_array(input);
    let cmd = track(&errors, &errors.e_a, gains)?;
    Ok([cmd.roll, cmd.pitch, cmd.thrust])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDatasetMeta {
    pub seed: u64,
    pub n: usize,
    /// Draws discarded at the thrust singularity.
    pub resampled: usize,
    pub ranges: ControllerRanges,
    pub gains: ControlGains,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerDataset {
    pub meta: ControllerDatasetMeta,
    pub samples: Vec<ControllerSample>,
}

fn controller_candidate(
    seed: u64,
    index: u64,
    ranges: &ControllerRanges,
    gains: &ControlGains,
) -> (ControllerSample, usize) {
    let mut rng = indexed_rng(seed, index);
    let mut rejected = 0;
    loop {
        let mut x = [0.0; CONTROLLER_INPUT_DIM];
        for i in 0..3 {
            x[i] = ranges.e_p.sample(&mut rng);
        }
        for i in 3..6 {
            x[i] = ranges.e_v.sample(&mut rng);
        }
        for i in 6..9 {
            x[i] = ranges.e_a.sample(&mut rng);
        }
        for i in 9..12 {
            x[i] = ranges.euler_deg.sample(&mut rng).to_radians();
        }
        match controller_label(&x, gains) {
            Ok(label) => return (ControllerSample { input: x, label }, rejected),
            Err(_) => rejected += 1,
        }
    }
}

/// Uniform controller inputs labelled by the tracking law; draws that hit the
/// thrust singularity are redrawn.
pub fn gen_controller_dataset(
    ranges: &ControllerRanges,
    n: usize,
    gains: &ControlGains,
    seed: u64,
) -> Result<ControllerDataset, ImitationError> {
    ranges.validate()?;
    gains.validate().map_err(ImitationError::InvalidArgument)?;
    // A box that never yields a positive vertical force would loop forever.
    let lift = 9.81 + ranges.e_a.max + gains.k_p[2] * ranges.e_p.max + gains.k_v[2] * ranges.e_v.max;
    if lift <= 0.1 {
        return Err(ImitationError::Range("ranges admit no non-singular label".into()));
    }
    let drawn: Vec<(ControllerSample, usize)> =
        (0..n as u64).into_par_iter().map(|i| controller_candidate(seed, i, ranges, gains)).collect();
    let resampled = drawn.iter().map(|(_, r)| r).sum();
    Ok(ControllerDataset {
        meta: ControllerDatasetMeta { seed, n, resampled, ranges: *ranges, gains: *gains },
        samples: drawn.into_iter().map(|(s, _)| s).collect(),
    })
}

// ---------------------------------------------------------------------------
// CSV

fn write_rows<W: Write, const N: usize>(
    out: W,
    header: &[&str; N],
    rows: impl Iterator<Item = [f64; N]>,
) -> Result<(), ImitationError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row.as_slice())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn read_rows<R: Read, const N: usize>(input: R, header: &[&str; N]) -> Result<Vec<[f64; N]>, ImitationError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let found: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if found != header.as_slice() {
        return Err(ImitationError::Format(format!("unexpected header {found:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<Vec<f64>>() {
        let v = rec?;
        let row: [f64; N] = v
            .try_into()
            .map_err(|v: Vec<f64>| ImitationError::Format(format!("row with {} fields", v.len())))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_planner_csv<W: Write>(samples: &[PlannerSample], out: W) -> Result<(), ImitationError> {
    write_rows(
        out,
        &PLANNER_CSV_HEADER,
        samples.iter().map(|s| {
            let mut row = [0.0; 26];
            row[..17].copy_from_slice(&s.input);
            row[17..].copy_from_slice(&s.label);
            row
        }),
    )
}

pub fn read_planner_csv<R: Read>(input: R) -> Result<Vec<PlannerSample>, ImitationError> {
    Ok(read_rows(input, &PLANNER_CSV_HEADER)?
        .into_iter()
        .map(|r| PlannerSample {
            input: r[..17].try_into().unwrap(),
            label: r[17..].try_into().unwrap(),
        })
        .collect())
}

pub fn write_controller_csv<W: Write>(samples: &[ControllerSample], out: W) -> Result<(), ImitationError> {
    write_rows(
        out,
        &CONTROLLER_CSV_HEADER,
        samples.iter().map(|s| {
            let mut row = [0.0; 15];
            row[..12].copy_from_slice(&s.input);
            row[12..].copy_from_slice(&s.label);
            row
        }),
    )
}

pub fn read_controller_csv<R: Read>(input: R) -> Result<Vec<ControllerSample>, ImitationError> {
    Ok(read_rows(input, &CONTROLLER_CSV_HEADER)?
        .into_iter()
        .map(|r| ControllerSample {
            input: r[..12].try_into().unwrap(),
            label: r[12..].try_into().unwrap(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Training

/// Planner training settings: normalization × augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Neither.
    A,
    /// Augmentation only.
    B,
    /// Normalization only.
    C,
    /// Both.
    D,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::A, Setting::B, Setting::C, Setting::D];

    pub fn normalized(self) -> bool {
        matches!(self, Setting::C | Setting::D)
    }

    pub fn augmented(self) -> bool {
        matches!(self, Setting::B | Setting::D)
    }
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Setting::A),
            "B" => Ok(Setting::B),
            "C" => Ok(Setting::C),
            "D" => Ok(Setting::D),
            _ => Err(format!("unknown setting '{s}', expected A, B, C or D")),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Rows per minibatch, augmented rows included.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Train in per-feature standardized coordinates. Inputs and targets are
    /// divided by power-of-two approximations of their training-set RMS, and
    /// the factors are folded into the first and last layers on return, so
    /// the returned network maps raw inputs. `init` is then read in the
    /// standardized coordinates.
    #[serde(default)]
    pub standardize: bool,
    /// Cosine-anneal the learning rate from `lr` in the first epoch to this
    /// value in the last. `None` keeps it constant.
    #[serde(default)]
    pub lr_final: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-5, batch_size: 6000, seed: 0, optimizer: OptimizerKind::Adam, standardize: false, lr_final: None }
    }
}

impl TrainConfig {
    /// Learning rate used throughout epoch `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            Some(end) if self.epochs > 1 => {
                let progress = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
                end + (self.lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
            _ => self.lr,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let final_ok = self.lr_final.map_or(true, |l| l >= 0.0 && l.is_finite());
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !final_ok || self.batch_size == 0 {
            return Err(TrainError::InvalidArgument(format!(
                "learning rates must be ≥ 0 and batch size ≥ 1, got {}, {:?} and {}",
                self.lr, self.lr_final, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Mean data loss (weight decay excluded) per epoch. The train loss covers
/// the raw rows of every batch, measured before each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Network-ready rows. `scales` is present when outputs must be denormalized.
#[derive(Default)]
struct Rows {
    inputs: Vec<f64>,
    labels: Vec<f64>,
    scales: Vec<f64>,
    n: usize,
}

impl Rows {
    fn clear(&mut self) {
        self.inputs.clear();
        self.labels.clear();
        self.scales.clear();
        self.n = 0;
    }

    fn push(&mut self, input: &[f64], label: &[f64], scale: Option<f64>) {
        self.inputs.extend_from_slice(input);
        self.labels.extend_from_slice(label);
        if let Some(s) = scale {
            self.scales.push(s);
        }
        self.n += 1;
    }

    /// Targets in network output coordinates: labels, times `s^k` per block
    /// when normalized.
    fn net_targets(&self, od: usize) -> Vec<f64> {
        let mut t = self.labels.clone();
        if !self.scales.is_empty() {
            for (i, s) in self.scales.iter().enumerate() {
                for j in 0..od {
                    t[i * od + j] *= s.powi(j as i32 / 3 + 1);
                }
            }
        }
        t
    }
}

/// Per-feature power-of-two scales of network inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &Rows, id: usize, od: usize) -> Self {
        Self { x: pow2_rms(&rows.inputs, id), y: pow2_rms(&rows.net_targets(od), od) }
    }

    fn apply(&self, rows: &mut Rows) {
        let id = self.x.len();
        for (k, v) in rows.inputs.iter_mut().enumerate() {
            *v /= self.x[k % id];
        }
    }

    /// Rewrites a standardized-coordinate network to act on raw inputs. Exact,
    /// since every factor is a power of two.
    fn fold(&self, net: &mut Mlp) {
        let last = net.num_layers() - 1;
        let id = self.x.len();
        let w0 = net.layer_range(0).start;
        let out0 = net.spec().layer_dims()[0].1;
        for r in 0..out0 {
            for c in 0..id {
                net.params_mut()[w0 + r * id + c] /= self.x[c];
            }
        }
        let (fan_in, od) = net.spec().layer_dims()[last];
        let range = net.layer_range(last);
        let p = &mut net.params_mut()[range];
        for r in 0..od {
            p[r * fan_in..(r + 1) * fan_in].iter_mut().for_each(|w| *w *= self.y[r]);
            p[od * fan_in + r] *= self.y[r];
        }
    }
}

fn pow2_rms(data: &[f64], dim: usize) -> Vec<f64> {
    let n = (data.len() / dim).max(1) as f64;
    (0..dim)
        .map(|j| {
            let rms = (data.iter().skip(j).step_by(dim).map(|v| v * v).sum::<f64>() / n).sqrt();
            if rms > 0.0 && rms.is_finite() {
                rms.log2().round().exp2()
            } else {
                1.0
            }
        })
        .collect()
}

fn push_planner_row(rows: &mut Rows, s: &PlannerSample, normalize: bool) -> Result<(), ImitationError> {
    if normalize {
        let (x, scale) = normalize_planner_input(&s.input)?;
        rows.push(&x, &s.label, Some(scale));
    } else {
        rows.push(&s.input, &s.label, None);
    }
    Ok(())
}

/// Per-row data loss on (possibly denormalized) outputs; fills `d_out` with
/// `∂loss/∂output · weight`.
///
/// With `y_scale` non-empty, `pred` is in standardized output coordinates.
fn rows_loss(
    loss: &LossKind,
    rows: &Rows,
    pred: &[f64],
    y_scale: &[f64],
    weight: f64,
    d_out: &mut [f64],
    per_row: &mut Vec<f64>,
) {
    let od = loss.output_dim();
    per_row.clear();
    let mut g = [0.0; PLANNER_OUTPUT_DIM];
    let mut y = [0.0; PLANNER_OUTPUT_DIM];
    for i in 0..rows.n {
        let r = i * od..(i + 1) * od;
        let label = &rows.labels[r.clone()];
        y[..od].copy_from_slice(&pred[r.clone()]);
        if !y_scale.is_empty() {
            y[..od].iter_mut().zip(y_scale).for_each(|(v, k)| *v *= k);
        }
        if rows.scales.is_empty() {
            per_row.push(loss.eval(&y[..od], label, &mut g[..od]));
            for (j, d) in d_out[r].iter_mut().enumerate() {
                *d = weight * g[j];
            }
        } else {
            let s = rows.scales[i];
            let raw = denormalize_planner_output(&y[..od], s);
            per_row.push(loss.eval(&raw, label, &mut g[..od]));
            let f = [s, s * s, s * s * s];
            for (j, d) in d_out[r].iter_mut().enumerate() {
                *d = weight * g[j] / f[j / 3];
            }
        }
        if !y_scale.is_empty() {
            d_out[i * od..(i + 1) * od].iter_mut().zip(y_scale).for_each(|(d, k)| *d *= k);
        }
    }
}

fn eval_rows(
    net: &Mlp,
    loss: &LossKind,
    rows: &Rows,
    y_scale: &[f64],
    ws: &mut BatchWorkspace,
) -> Result<f64, NnError> {
    const CHUNK: usize = 4096;
    let (id, od) = (net.input_dim(), net.output_dim());
    let mut total = 0.0;
    let mut sub = Rows::default();
    let mut d = Vec::new();
    let mut per_row = Vec::new();
    for start in (0..rows.n).step_by(CHUNK) {
        let end = (start + CHUNK).min(rows.n);
        sub.clear();
        sub.inputs.extend_from_slice(&rows.inputs[start * id..end * id]);
        sub.labels.extend_from_slice(&rows.labels[start * od..end * od]);
        if !rows.scales.is_empty() {
            sub.scales.extend_from_slice(&rows.scales[start..end]);
        }
        sub.n = end - start;
        let pred = net.forward_batch(&sub.inputs, sub.n, ws)?;
        d.resize(sub.n * od, 0.0);
        rows_loss(loss, &sub, pred, y_scale, 1.0, &mut d, &mut per_row);
        total += per_row.iter().sum::<f64>();
    }
    Ok(total / rows.n as f64)
}

/// Shared minibatch loop. `fill` appends the rows for one batch of raw
/// indices and returns how many leading rows are raw.
fn run_training<F>(
    mut net: Mlp,
    n_train: usize,
    raw_per_batch: usize,
    mut test: Rows,
    stats: Option<Rows>,
    loss: LossKind,
    cfg: &TrainConfig,
    mut fill: F,
) -> Result<(Mlp, Vec<EpochLoss>), TrainError>
where
    F: FnMut(&[usize], &mut ChaCha8Rng, &mut Rows) -> Result<usize, TrainError>,
{
    let mut rng = indexed_rng(derive_seed(cfg.seed, "minibatch"), 0);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut adam = Adam::new(net.params().len());
    let mut ws = BatchWorkspace::default();
    let mut rows = Rows::default();
    let mut grad = vec![0.0; net.params().len()];
    let mut d_out = Vec::new();
    let mut per_row = Vec::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let od = net.output_dim();
    let decay = loss.weight_decay();
    let std = stats.map(|r| Standardizer::fit(&r, net.input_dim(), od));
    let y_scale: &[f64] = std.as_ref().map_or(&[], |s| &s.y);
    if let Some(s) = &std {
        s.apply(&mut test);
    }
    let finish = |mut net: Mlp| {
        if let Some(s) = &std {
            s.fold(&mut net);
        }
        net
    };

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for chunk in order.chunks(raw_per_batch) {
            rows.clear();
            let n_raw = fill(chunk, &mut rng, &mut rows)?;
            if let Some(s) = &std {
                s.apply(&mut rows);
            }
            let pred = match net.forward_batch(&rows.inputs, rows.n, &mut ws) {
                Ok(p) => p.to_vec(),
                Err(NnError::NonFinite { .. }) => return Err(TrainError::Diverged { epoch, curve }),
                Err(e) => return Err(e.into()),
            };
            d_out.resize(rows.n * od, 0.0);
            rows_loss(&loss, &rows, &pred, y_scale, 1.0 / rows.n as f64, &mut d_out, &mut per_row);
            train_sum += per_row[..n_raw].iter().sum::<f64>();
            match net.backward_batch(&rows.inputs, rows.n, &mut ws, &d_out, &mut grad) {
                Ok(()) => {}
                Err(NnError::NonFinite { .. }) => return Err(TrainError::Diverged { epoch, curve }),
                Err(e) => return Err(e.into()),
            }
            net.add_decay_gradient(decay, &mut grad);
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(net.params_mut(), &grad, lr),
                OptimizerKind::Sgd => crate::nn::sgd_step(net.params_mut(), &grad, lr),
            }
        }
        let train_loss = train_sum / n_train as f64;
        let test_loss = match eval_rows(&net, &loss, &test, y_scale, &mut ws) {
            Ok(l) => l,
            Err(NnError::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        let diverged = !train_loss.is_finite() || !test_loss.is_finite() || net.params().iter().any(|p| !p.is_finite());
        curve.push(EpochLoss { epoch, train_loss, test_loss });
        if diverged {
            return Err(TrainError::Diverged { epoch, curve });
        }
    }
    Ok((finish(net), curve))
}

/// Trains the planner network under one of the four settings.
///
/// Augmented settings build each batch as one third raw rows followed by one
/// flipped and one randomly scaled copy of each raw row; an epoch is one pass
/// over the raw rows. Normalized settings feed scaled inputs and score the
/// denormalized outputs against the raw labels.
pub fn train_planner(
    init: Mlp,
    train: &[PlannerSample],
    test: &[PlannerSample],
    setting: Setting,
    weights: &PlannerLossWeights,
    cfg: &TrainConfig,
) -> Result<(Mlp, Vec<EpochLoss>), TrainError> {
    check_net(&init, PLANNER_INPUT_DIM, PLANNER_OUTPUT_DIM)?;
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let normalize = setting.normalized();
    let raw_per_batch =
        if setting.augmented() { (cfg.batch_size / 3).max(1) } else { cfg.batch_size };
    let mut test_rows = Rows::default();
    for s in test {
        push_planner_row(&mut test_rows, s, normalize)?;
    }
    let stats = if cfg.standardize {
        let mut r = Rows::default();
        for s in train {
            push_planner_row(&mut r, s, normalize)?;
        }
        Some(r)
    } else {
        None
    };
    let loss = LossKind::Planner(*weights);
    run_training(init, train.len(), raw_per_batch, test_rows, stats, loss, cfg, |idx, rng, rows| {
        for &i in idx {
            push_planner_row(rows, &train[i], normalize)?;
        }
        if setting.augmented() {
            for &i in idx {
                push_planner_row(rows, &augment(&train[i], Augment::Flip)?, normalize)?;
                let k = MAX_AUGMENT_SCALE * (1.0 - rng.gen::<f64>());
                push_planner_row(rows, &augment(&train[i], Augment::Scale(k))?, normalize)?;
            }
        }
        Ok(idx.len())
    })
}

/// Trains the controller network on raw samples.
pub fn train_controller(
    init: Mlp,
    train: &[ControllerSample],
    test: &[ControllerSample],
    weights: &ControllerLossWeights,
    cfg: &TrainConfig,
) -> Result<(Mlp, Vec<EpochLoss>), TrainError> {
    check_net(&init, CONTROLLER_INPUT_DIM, CONTROLLER_OUTPUT_DIM)?;
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let rows_of = |samples: &[ControllerSample]| {
        let mut r = Rows::default();
        samples.iter().for_each(|s| r.push(&s.input, &s.label, None));
        r
    };
    let stats = cfg.standardize.then(|| rows_of(train));
    let loss = LossKind::Controller(*weights);
    run_training(init, train.len(), cfg.batch_size, rows_of(test), stats, loss, cfg, |idx, _, rows| {
        for &i in idx {
            rows.push(&train[i].input, &train[i].label, None);
        }
        Ok(idx.len())
    })
}

fn check_net(net: &Mlp, input: usize, output: usize) -> Result<(), TrainError> {
    if net.input_dim() != input || net.output_dim() != output {
        return Err(TrainError::InvalidArgument(format!(
            "network {} does not map {input} → {output}",
            net.spec()
        )));
    }
    Ok(())
}

/// Mean data loss of `net` on planner samples, through the normalization
/// pipeline when `normalize` is set.
pub fn planner_test_loss(
    net: &Mlp,
    samples: &[PlannerSample],
    normalize: bool,
    weights: &PlannerLossWeights,
) -> Result<f64, TrainError> {
    let mut rows = Rows::default();
    for s in samples {
        push_planner_row(&mut rows, s, normalize)?;
    }
    Ok(eval_rows(net, &LossKind::Planner(*weights), &rows, &[], &mut BatchWorkspace::default())?)
}
