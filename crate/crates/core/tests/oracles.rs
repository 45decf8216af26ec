//! Independent oracles for the closed-form pieces.

use gapflight::control::{euler_error, track, ControlErrors, ControlGains};
use gapflight::nn::{
    Activation, BatchWorkspace, ControllerLossWeights, LossKind, Mlp, MlpSpec, PlannerLossWeights,
};
use gapflight::trajectory::{generate_primitive, State};
use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Jerk-optimal trajectory by dense collocation: piecewise-constant jerk on
/// `n` cells, minimum-norm solution of the three terminal constraints per axis.
/// Returns the position at every cell boundary and the mean squared jerk.
fn collocation(start: &State, end: &State, t_total: f64, n: usize) -> (Vec<Vector3<f64>>, f64) {
    let h = t_total / n as f64;
    let mut jerk = vec![Vector3::zeros(); n];
    for axis in 0..3 {
        let (p0, v0, a0) = (start.p[axis], start.v[axis], start.a[axis]);
        let mut a = DMatrix::zeros(3, n);
        for k in 0..n {
            let rest = t_total - (k + 1) as f64 * h;
            a[(0, k)] = h * h * h / 6.0 + h * h * rest / 2.0 + h * rest * rest / 2.0;
            a[(1, k)] = h * h / 2.0 + h * rest;
            a[(2, k)] = h;
        }
        let b = DVector::from_vec(vec![
            end.p[axis] - (p0 + v0 * t_total + 0.5 * a0 * t_total * t_total),
            end.v[axis] - (v0 + a0 * t_total),
            end.a[axis] - a0,
        ]);
        let gram = &a * a.transpose();
        let lambda = gram.lu().solve(&b).expect("collocation Gram matrix is singular");
        let j = a.transpose() * lambda;
        for k in 0..n {
            jerk[k][axis] = j[k];
        }
    }
    let (mut p, mut v, mut acc) = (start.p, start.v, start.a);
    let mut nodes = vec![p];
    for j in &jerk {
        p += v * h + acc * (h * h / 2.0) + j * (h * h * h / 6.0);
        v += acc * h + j * (h * h / 2.0);
        acc += j * h;
        nodes.push(p);
    }
    let msj = jerk.iter().map(|j| j.norm_squared()).sum::<f64>() * h / t_total;
    (nodes, msj)
}

fn random_state(rng: &mut ChaCha8Rng) -> State {
    let mut v = |r: f64| Vector3::from_fn(|_, _| rng.gen_range(-r..r));
    State::new(v(5.0), v(3.0), v(3.0))
}

#[test]
fn primitive_matches_dense_collocation() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..20 {
        let (s, e) = (random_state(&mut rng), random_state(&mut rng));
        let t_total = rng.gen_range(1.0..4.0);
        let n = 2000;
        let (nodes, msj) = collocation(&s, &e, t_total, n);
        let traj = generate_primitive(&s, &e, t_total).unwrap();
        let dev = nodes
            .iter()
            .enumerate()
            .map(|(k, p)| (traj.sample_clamped(k as f64 * t_total / n as f64).p - p).norm())
            .fold(0.0, f64::max);
        assert!(dev < 1e-4, "position deviation {dev}");
        let rel = (traj.mean_squared_jerk() - msj).abs() / msj;
        assert!(rel < 0.01, "mean squared jerk differs by {rel}");
    }
}

/// Rotation angle between `Rx(φ₁)Ry(θ₁)` and `Rx(φ₂)Ry(θ₂)` through quaternions.
fn quaternion_angle(phi1: f64, theta1: f64, phi2: f64, theta2: f64) -> f64 {
    let q = |phi: f64, theta: f64| {
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), phi)
            * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), theta)
    };
    let rel = q(phi1, theta1).inverse() * q(phi2, theta2);
    2.0 * rel.imag().norm().atan2(rel.w.abs())
}

#[test]
fn euler_error_matches_quaternion_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let pi = std::f64::consts::PI;
    for _ in 0..10_000 {
        let a: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-pi..pi));
        let want = quaternion_angle(a[0], a[1], a[2], a[3]);
        let got = euler_error(a[0], a[1], a[2], a[3]);
        assert!((got - want).abs() < 1e-9, "{a:?}: {got} vs {want}");
    }
    assert!((euler_error(0.3, 0.4, -0.1, 0.2) - quaternion_angle(0.3, 0.4, -0.1, 0.2)).abs() < 1e-9);
}

#[test]
fn hover_command_is_exact() {
    let cmd = track(&ControlErrors::from_array(&[0.0; 12]), &Vector3::zeros(), &ControlGains::default()).unwrap();
    assert_eq!((cmd.roll, cmd.pitch, cmd.thrust), (0.0, 0.0, 9.81));
}

fn assert_gradient_matches(net: &Mlp, inputs: &[f64], labels: &[f64], n: usize, loss: &LossKind) {
    let mut ws = BatchWorkspace::default();
    let (_, grad) = net.batch_gradient(inputs, labels, n, loss, &mut ws).unwrap();
    let h = 1e-6;
    for i in 0..net.params().len() {
        let mut probe = net.clone();
        probe.params_mut()[i] += h;
        let up = probe.batch_gradient(inputs, labels, n, loss, &mut ws).unwrap().0;
        probe.params_mut()[i] -= 2.0 * h;
        let down = probe.batch_gradient(inputs, labels, n, loss, &mut ws).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let tol = 1e-5 * (grad[i].abs() + fd.abs()) + 1e-9;
        assert!((grad[i] - fd).abs() <= tol, "param {i}: analytic {} vs fd {fd}", grad[i]);
    }
}

#[test]
fn planner_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for act in [Activation::Tanh, Activation::Relu] {
        let spec = MlpSpec { input_dim: 17, hidden: vec![6, 5], output_dim: 9, activation: act };
        let net = Mlp::init(spec, 7).unwrap();
        let n = 4;
        let inputs: Vec<f64> = (0..n * 17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<f64> = (0..n * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert_gradient_matches(&net, &inputs, &labels, n, &LossKind::Planner(PlannerLossWeights::default()));
    }
}

#[test]
fn controller_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let spec = MlpSpec { input_dim: 12, hidden: vec![5, 4], output_dim: 3, activation: Activation::Tanh };
    let net = Mlp::init(spec, 9).unwrap();
    let n = 4;
    let inputs: Vec<f64> = (0..n * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Labels far from the outputs keep the angle away from 0 and π and the
    // thrust residual away from its kink.
    let labels: Vec<f64> = (0..n).flat_map(|_| [1.2, -0.9, 14.0]).collect();
    assert_gradient_matches(&net, &inputs, &labels, n, &LossKind::Controller(ControllerLossWeights::default()));
}
