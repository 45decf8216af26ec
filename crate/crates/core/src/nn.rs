//! Fully-connected networks with analytic backpropagation, the two imitation
//! losses, first-order optimizers and the binary checkpoint format.
//!
//! Parameters live in one flat buffer laid out layer by layer as
//! `[W₀, b₀, W₁, b₁, …]`, each `W` row-major `out × in`. Gradients, optimizer
//! moments and checkpoints all use the same layout.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{desired_rotation, desired_rotation_partials, geodesic_cosine};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error("checkpoint shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: &mut [f64]) {
        match self {
            Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
        }
    }

    /// Multiplies `delta` by the derivative, given the activation's output.
    #[inline]
    fn backprop(self, delta: &mut [f64], out: &[f64]) {
        match self {
            Activation::Relu => delta.iter_mut().zip(out).for_each(|(d, y)| {
                if *y <= 0.0 {
                    *d = 0.0
                }
            }),
            Activation::Tanh => delta.iter_mut().zip(out).for_each(|(d, y)| *d *= 1.0 - y * y),
        }
    }
}

/// Layer widths and hidden activation; the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    /// 17 → 10 × 100 → 9.
    pub fn planner() -> Self {
        Self { input_dim: 17, hidden: vec![100; 10], output_dim: 9, activation: Activation::Relu }
    }

    /// 12 → 10 × 40 → 3.
    pub fn controller() -> Self {
        Self { input_dim: 12, hidden: vec![40; 10], output_dim: 3, activation: Activation::Relu }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidSpec(format!("all dimensions must be ≥ 1: {self}")));
        }
        Ok(())
    }

    /// `(in, out)` per affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn max_width(&self) -> usize {
        self.hidden.iter().copied().chain([self.input_dim, self.output_dim]).max().unwrap_or(1)
    }
}

impl std::fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden {
            write!(f, "-{h}")?;
        }
        write!(f, "-{} ({:?})", self.output_dim, self.activation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    in_dim: usize,
    out_dim: usize,
    w_off: usize,
    b_off: usize,
}

/// A multilayer perceptron with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
}

/// Reusable buffers for single-sample evaluation.
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Reusable buffers for batched forward/backward passes.
#[derive(Debug, Clone, Default)]
pub struct BatchWorkspace {
    n: usize,
    /// Post-activation output of every layer, `n × out` each.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

fn layout_for(spec: &MlpSpec) -> (Vec<LayerLayout>, usize) {
    let mut off = 0;
    let layout = spec
        .layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let l = LayerLayout { in_dim: i, out_dim: o, w_off: off, b_off: off + i * o };
            off += i * o + o;
            l
        })
        .collect();
    (layout, off)
}

#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    // SAFETY: callers pass buffers whose extents match (m, k, n) and strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
        );
    }
}

impl Mlp {
    /// He-uniform weights (`±√(6/fan_in)`), zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let (layout, total) = layout_for(&spec);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layout {
            let limit = (6.0 / l.in_dim as f64).sqrt();
            for w in &mut params[l.w_off..l.b_off] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(Self { spec, layout, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, NnError> {
        spec.validate()?;
        let (layout, total) = layout_for(&spec);
        if params.len() != total {
            return Err(NnError::Shape(format!(
                "{} parameters given, spec {spec} needs {total}",
                params.len()
            )));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Flat range holding weights and bias of layer `l`.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let lay = &self.layout[l];
        lay.w_off..lay.b_off + lay.out_dim
    }

    /// Flat range covering the last `k` layers.
    pub fn last_layers_range(&self, k: usize) -> Range<usize> {
        let n = self.layout.len();
        let first = n.saturating_sub(k);
        self.layout[first].w_off..self.params.len()
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let lay = &self.layout[l];
        (&self.params[lay.w_off..lay.b_off], &self.params[lay.b_off..lay.b_off + lay.out_dim])
    }

    /// `Σ W²` over all weight matrices (biases excluded).
    pub fn weight_sq_sum(&self) -> f64 {
        self.layout
            .iter()
            .map(|l| self.params[l.w_off..l.b_off].iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn scratch(&self) -> Scratch {
        let w = self.spec.max_width();
        Scratch { a: vec![0.0; w], b: vec![0.0; w] }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut s = self.scratch();
        Ok(self.forward_with(x, &mut s)?.to_vec())
    }

    /// Single-sample forward pass into reusable buffers.
    pub fn forward_with<'s>(&self, x: &[f64], s: &'s mut Scratch) -> Result<&'s [f64], NnError> {
        if x.len() != self.spec.input_dim {
            return Err(NnError::Shape(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let last = self.layout.len() - 1;
        s.a[..x.len()].copy_from_slice(x);
        for (li, l) in self.layout.iter().enumerate() {
            let w = &self.params[l.w_off..l.b_off];
            let b = &self.params[l.b_off..l.b_off + l.out_dim];
            let input = &s.a[..l.in_dim];
            for o in 0..l.out_dim {
                let row = &w[o * l.in_dim..(o + 1) * l.in_dim];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    acc += wi * xi;
                }
                s.b[o] = acc;
            }
            if li != last {
                self.spec.activation.apply(&mut s.b[..l.out_dim]);
            }
            std::mem::swap(&mut s.a, &mut s.b);
        }
        Ok(&s.a[..self.spec.output_dim])
    }

    /// Batched forward pass over `n` row-major samples. Returns `n × output_dim`.
    pub fn forward_batch<'w>(
        &self,
        x: &[f64],
        n: usize,
        ws: &'w mut BatchWorkspace,
    ) -> Result<&'w [f64], NnError> {
        if n == 0 || x.len() != n * self.spec.input_dim {
            return Err(NnError::Shape(format!(
                "batch of {n} needs {} inputs, got {}",
                n * self.spec.input_dim,
                x.len()
            )));
        }
        self.prepare(ws, n);
        let last = self.layout.len() - 1;
        for (li, l) in self.layout.iter().enumerate() {
            let (before, rest) = ws.acts.split_at_mut(li);
            let input: &[f64] = if li == 0 { x } else { &before[li - 1] };
            let out = &mut rest[0];
            for row in out.chunks_exact_mut(l.out_dim) {
                row.copy_from_slice(&self.params[l.b_off..l.b_off + l.out_dim]);
            }
            gemm(
                n,
                l.in_dim,
                l.out_dim,
                input,
                (l.in_dim as isize, 1),
                &self.params[l.w_off..l.b_off],
                (1, l.in_dim as isize),
                1.0,
                out,
                (l.out_dim as isize, 1),
            );
            if li != last {
                self.spec.activation.apply(out);
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: li });
            }
        }
        Ok(&ws.acts[last])
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the outputs of the
    /// most recent [`Mlp::forward_batch`] on `x`) into `grad`, overwriting it.
    pub fn backward_batch(
        &self,
        x: &[f64],
        n: usize,
        ws: &mut BatchWorkspace,
        d_out: &[f64],
        grad: &mut [f64],
    ) -> Result<(), NnError> {
        if ws.n != n || d_out.len() != n * self.spec.output_dim || grad.len() != self.params.len() {
            return Err(NnError::Shape("backward buffers do not match the forward pass".into()));
        }
        let nl = self.layout.len();
        ws.delta.clear();
        ws.delta.extend_from_slice(d_out);
        for li in (0..nl).rev() {
            let l = self.layout[li];
            let input: &[f64] = if li == 0 { x } else { &ws.acts[li - 1] };
            // dW = δᵀ X
            gemm(
                l.out_dim,
                n,
                l.in_dim,
                &ws.delta,
                (1, l.out_dim as isize),
                input,
                (l.in_dim as isize, 1),
                0.0,
                &mut grad[l.w_off..l.b_off],
                (l.in_dim as isize, 1),
            );
            let db = &mut grad[l.b_off..l.b_off + l.out_dim];
            db.iter_mut().for_each(|v| *v = 0.0);
            for row in ws.delta.chunks_exact(l.out_dim) {
                db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            if grad[l.w_off..l.b_off + l.out_dim].iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: li });
            }
            if li == 0 {
                break;
            }
            // δ_prev = (δ W) ⊙ act'(prev)
            ws.delta_prev.resize(n * l.in_dim, 0.0);
            gemm(
                n,
                l.out_dim,
                l.in_dim,
                &ws.delta,
                (l.out_dim as isize, 1),
                &self.params[l.w_off..l.b_off],
                (l.in_dim as isize, 1),
                0.0,
                &mut ws.delta_prev,
                (l.in_dim as isize, 1),
            );
            self.spec.activation.backprop(&mut ws.delta_prev, &ws.acts[li - 1]);
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
        Ok(())
    }

    fn prepare(&self, ws: &mut BatchWorkspace, n: usize) {
        ws.n = n;
        ws.acts.resize_with(self.layout.len(), Vec::new);
        for (buf, l) in ws.acts.iter_mut().zip(&self.layout) {
            buf.resize(n * l.out_dim, 0.0);
        }
    }

    /// Adds the gradient of `g·Σ W²` to `grad`.
    pub fn add_decay_gradient(&self, g: f64, grad: &mut [f64]) {
        if g == 0.0 {
            return;
        }
        for l in &self.layout {
            for (gr, w) in grad[l.w_off..l.b_off].iter_mut().zip(&self.params[l.w_off..l.b_off]) {
                *gr += 2.0 * g * w;
            }
        }
    }

    /// Mean loss over a labelled batch and its gradient w.r.t. every parameter,
    /// weight decay included.
    pub fn batch_gradient(
        &self,
        inputs: &[f64],
        labels: &[f64],
        n: usize,
        loss: &LossKind,
        ws: &mut BatchWorkspace,
    ) -> Result<(f64, Vec<f64>), NnError> {
        let od = self.spec.output_dim;
        if labels.len() != n * od || od != loss.output_dim() {
            return Err(NnError::Shape("labels do not match the network output".into()));
        }
        let pred = self.forward_batch(inputs, n, ws)?.to_vec();
        let mut d_out = vec![0.0; n * od];
        let mut total = 0.0;
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let r = i * od..(i + 1) * od;
            total += loss.eval(&pred[r.clone()], &labels[r.clone()], &mut d_out[r]);
        }
        d_out.iter_mut().for_each(|d| *d *= inv_n);
        let mut grad = vec![0.0; self.params.len()];
        self.backward_batch(inputs, n, ws, &d_out, &mut grad)?;
        let g = loss.weight_decay();
        self.add_decay_gradient(g, &mut grad);
        Ok((total * inv_n + g * self.weight_sq_sum(), grad))
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Weights of the planner imitation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerLossWeights {
    pub w_p: f64,
    pub w_v: f64,
    pub w_a: f64,
    pub weight_decay: f64,
}

impl Default for PlannerLossWeights {
    fn default() -> Self {
        Self { w_p: 4.0, w_v: 2.0, w_a: 1.0, weight_decay: 1e-4 }
    }
}

/// Weights of the controller imitation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerLossWeights {
    pub w_thr: f64,
    pub w_eul: f64,
    pub weight_decay: f64,
}

impl Default for ControllerLossWeights {
    fn default() -> Self {
        Self { w_thr: 1.0, w_eul: 57.3, weight_decay: 1e-4 }
    }
}

/// Per-sample planner loss without the decay term; writes `∂/∂pred` into `grad`.
///
/// Vectors are ordered `(Δp, v, a)`.
pub fn planner_sample_loss(pred: &[f64], label: &[f64], w: &PlannerLossWeights, grad: &mut [f64]) -> f64 {
    let weights = [w.w_p, w.w_v, w.w_a];
    let mut loss = 0.0;
    for i in 0..9 {
        let wi = weights[i / 3];
        let r = pred[i] - label[i];
        loss += wi * r * r;
        grad[i] = 2.0 * wi * r;
    }
    loss
}

/// Per-sample controller loss `w_thr·|μ_l − μ_p| + w_eul·e_{l,p}` without
/// decay. Vectors are `(roll, pitch, thrust)`.
///
/// The subgradient is zero where the thrust residual or the attitude error
/// vanishes.
pub fn controller_sample_loss(
    pred: &[f64],
    label: &[f64],
    w: &ControllerLossWeights,
    grad: &mut [f64],
) -> f64 {
    let (phi_p, theta_p, mu_p) = (pred[0], pred[1], pred[2]);
    let (phi_l, theta_l, mu_l) = (label[0], label[1], label[2]);
    let dmu = mu_l - mu_p;
    grad[2] = if dmu > 0.0 {
        -w.w_thr
    } else if dmu < 0.0 {
        w.w_thr
    } else {
        0.0
    };
    let (c, clamped) = geodesic_cosine(phi_l, theta_l, phi_p, theta_p);
    let e = c.acos();
    let denom = (1.0 - c * c).sqrt();
    if clamped || e == 0.0 || denom == 0.0 {
        grad[0] = 0.0;
        grad[1] = 0.0;
    } else {
        let rl = desired_rotation(phi_l, theta_l);
        let (dphi, dtheta) = desired_rotation_partials(phi_p, theta_p);
        let de_dc = -1.0 / denom;
        grad[0] = w.w_eul * de_dc * 0.5 * rl.component_mul(&dphi).sum();
        grad[1] = w.w_eul * de_dc * 0.5 * rl.component_mul(&dtheta).sum();
    }
    w.w_thr * dmu.abs() + w.w_eul * e
}

/// Planner loss including `g·Σ W²` of `params`, and its gradient w.r.t. `pred`.
pub fn planner_loss(pred: &[f64; 9], label: &[f64; 9], w: &PlannerLossWeights, params: &Mlp) -> (f64, [f64; 9]) {
    let mut g = [0.0; 9];
    let l = planner_sample_loss(pred, label, w, &mut g);
    (l + w.weight_decay * params.weight_sq_sum(), g)
}

/// Controller loss including `g·Σ W²` of `params`, and its gradient w.r.t. `pred`.
pub fn controller_loss(
    pred: &[f64; 3],
    label: &[f64; 3],
    w: &ControllerLossWeights,
    params: &Mlp,
) -> (f64, [f64; 3]) {
    let mut g = [0.0; 3];
    let l = controller_sample_loss(pred, label, w, &mut g);
    (l + w.weight_decay * params.weight_sq_sum(), g)
}

/// Which imitation loss a batch is trained against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Planner(PlannerLossWeights),
    Controller(ControllerLossWeights),
}

impl LossKind {
    pub fn output_dim(&self) -> usize {
        match self {
            LossKind::Planner(_) => 9,
            LossKind::Controller(_) => 3,
        }
    }

    pub fn weight_decay(&self) -> f64 {
        match self {
            LossKind::Planner(w) => w.weight_decay,
            LossKind::Controller(w) => w.weight_decay,
        }
    }

    /// Data term of one sample; writes the prediction gradient into `grad`.
    pub fn eval(&self, pred: &[f64], label: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            LossKind::Planner(w) => planner_sample_loss(pred, label, w, grad),
            LossKind::Controller(w) => controller_sample_loss(pred, label, w, grad),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizers

/// Plain gradient descent: `θ ← θ − lr·∇`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for a different network");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 4] = b"MLPC";
const VERSION: u32 = 1;

impl Mlp {
    /// Little-endian: magic `MLPC`, version, activation tag, dimension count,
    /// dimensions, then per layer the row-major weights followed by the biases.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.spec.activation.tag().to_le_bytes())?;
        let dims: Vec<usize> = std::iter::once(self.spec.input_dim)
            .chain(self.spec.hidden.iter().copied())
            .chain(std::iter::once(self.spec.output_dim))
            .collect();
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
            r.read_exact(buf).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
                _ => CheckpointError::Io(e),
            })
        }
        fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            Ok(u32::from_le_bytes(b))
        }

        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut input)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let activation = Activation::from_tag(read_u32(&mut input)?)
            .ok_or_else(|| CheckpointError::Malformed("unknown activation tag".into()))?;
        let n_dims = read_u32(&mut input)? as usize;
        if !(2..=1024).contains(&n_dims) {
            return Err(CheckpointError::Malformed(format!("{n_dims} layer dimensions")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = read_u32(&mut input)? as usize;
            if d == 0 || d > 1 << 20 {
                return Err(CheckpointError::Malformed(format!("layer width {d}")));
            }
            dims.push(d);
        }
        let spec = MlpSpec {
            input_dim: dims[0],
            hidden: dims[1..n_dims - 1].to_vec(),
            output_dim: dims[n_dims - 1],
            activation,
        };
        let count = spec.param_count();
        let mut bytes = vec![0u8; count * 8];
        read_exact(&mut input, &mut bytes)?;
        let params: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut extra = [0u8; 1];
        if input.read(&mut extra)? != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Mlp::from_params(spec, params).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let f = File::create(path)?;
        self.write_checkpoint(BufWriter::new(f))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }

    /// Loads and checks the network shape against `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &MlpSpec) -> Result<Self, CheckpointError> {
        let m = Self::load(path)?;
        if m.spec.input_dim != expected.input_dim
            || m.spec.hidden != expected.hidden
            || m.spec.output_dim != expected.output_dim
        {
            return Err(CheckpointError::ShapeMismatch {
                expected: expected.to_string(),
                found: m.spec.to_string(),
            });
        }
        Ok(m)
    }
}
