//! Backpropagation against finite differences and the recursive V-matrix
//! identity, across depths and activation kinds.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teachnet::net::grad_weights_batch;
use teachnet::oracle::finite_diff_grad;
use teachnet::vmats::{compute_vmats, identity_residuals};
use teachnet::{Activation, Network, Role};

fn gaussian(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Array1<f64> {
    // Box-Muller keeps the test independent of rand_distr
    Array1::from_shape_fn(d, |_| {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let v: f64 = rng.random();
        scale * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    })
}

fn activation(i: usize) -> Activation {
    if i.is_multiple_of(2) {
        Activation::Rectifier
    } else {
        Activation::leaky(0.1).unwrap()
    }
}

/// Inputs whose student pre-activations all sit at least `margin` from zero,
/// so central differences never straddle a gate flip.
fn clear_inputs(net: &Network, n: usize, margin: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = net.input_dim();
    let mut out = Array2::zeros((n, d));
    let mut r = 0;
    while r < n {
        let x = gaussian(rng, d, 1.5);
        let fwd = net.forward(x.view()).unwrap();
        if fwd.pre[..net.depth() - 1].iter().all(|p| p.iter().all(|v| v.abs() > margin)) {
            out.row_mut(r).assign(&x);
            r += 1;
        }
    }
    out
}

#[test]
fn backprop_matches_central_differences_away_from_gates() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..20 {
        let depth = 2 + i % 3;
        let d = rng.random_range(2..6);
        let c = rng.random_range(1..4);
        let mut s = vec![d];
        let mut t = vec![d];
        for _ in 1..depth {
            s.push(rng.random_range(2..7));
            t.push(rng.random_range(1..4));
        }
        s.push(c);
        t.push(c);
        let student = Network::random(Role::Student, activation(i), &s, 100 + i as u64).unwrap();
        let teacher = Network::random(Role::Teacher, activation(i), &t, 200 + i as u64).unwrap();
        let inputs = clear_inputs(&student, 8, 10.0 * h, &mut rng);
        let targets = teacher.forward_batch(&inputs).unwrap().into_output();

        let descent = grad_weights_batch(&student, &inputs, &targets).unwrap();
        let numeric = finite_diff_grad(&student, &teacher, &inputs, h);
        for (l, (a, f)) in descent.iter().zip(&numeric).enumerate() {
            let scale = f.mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v)).max(1e-8);
            let err = (a + f).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v)) / scale;
            assert!(err < 1e-4, "net {i} layer {}: relative error {err:.3e}", l + 1);
        }
    }
}

fn identity_max(s: &[usize], t: &[usize], act: Activation, seed: u64, samples: usize) -> f64 {
    let student = Network::random(Role::Student, act, s, seed).unwrap();
    let teacher = Network::random(Role::Teacher, act, t, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = gaussian(&mut rng, s[0], 1.0);
        let res = identity_residuals(&student, &teacher, x.view()).unwrap();
        assert_eq!(res.len(), s.len() - 1);
        worst = res.into_iter().fold(worst, f64::max);
    }
    worst
}

#[test]
fn identity_holds_for_depths_two_to_five() {
    let cases: [(&[usize], &[usize]); 4] = [
        (&[3, 6, 2], &[3, 2, 2]),
        (&[4, 7, 5, 3], &[4, 3, 2, 3]),
        (&[5, 6, 6, 6, 2], &[5, 4, 3, 2, 2]),
        (&[6, 8, 7, 6, 5, 3], &[6, 3, 3, 3, 3, 3]),
    ];
    for (i, (s, t)) in cases.iter().enumerate() {
        let r = identity_max(s, t, activation(i), 40 + i as u64, 50);
        assert!(r < 1e-8, "depth {}: residual {r:.3e}", s.len() - 1);
    }
}

#[test]
fn identity_holds_at_wide_five_layer_configuration() {
    let sizes = [100, 50, 75, 100, 125, 50];
    let r = identity_max(&sizes, &sizes, Activation::leaky(0.1).unwrap(), 7, 10);
    assert!(r < 1e-8, "residual {r:.3e}");
}

#[test]
fn two_layer_couplings_do_not_depend_on_input() {
    let student = Network::random(Role::Student, Activation::Rectifier, &[4, 6, 3], 1).unwrap();
    let teacher = Network::random(Role::Teacher, Activation::Rectifier, &[4, 2, 3], 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let first = compute_vmats(&student, &teacher, gaussian(&mut rng, 4, 1.0).view()).unwrap();
    for _ in 0..20 {
        let vm = compute_vmats(&student, &teacher, gaussian(&mut rng, 4, 5.0).view()).unwrap();
        assert_eq!(vm.a(1), first.a(1));
        assert_eq!(vm.b(1), first.b(1));
    }
}

#[test]
fn couplings_are_constant_within_a_gate_region() {
    let student = Network::random(Role::Student, Activation::Rectifier, &[3, 5, 4, 2], 21).unwrap();
    let teacher = Network::random(Role::Teacher, Activation::Rectifier, &[3, 2, 3, 2], 22).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let gates = |x: &Array1<f64>| {
        let sg = student.forward(x.view()).unwrap().gates;
        let tg = teacher.forward(x.view()).unwrap().gates;
        (sg, tg)
    };
    let mut checked = 0;
    for _ in 0..200 {
        let x = gaussian(&mut rng, 3, 1.0);
        let x2 = &x + &gaussian(&mut rng, 3, 1e-3);
        if gates(&x) != gates(&x2) {
            continue;
        }
        let a = compute_vmats(&student, &teacher, x.view()).unwrap();
        let b = compute_vmats(&student, &teacher, x2.view()).unwrap();
        for l in 1..=3 {
            assert_eq!(a.a(l), b.a(l), "A_{l}");
            assert_eq!(a.b(l), b.b(l), "B_{l}");
        }
        checked += 1;
    }
    assert!(checked > 100, "only {checked} pairs shared a region");
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let net = Network::random(Role::Student, Activation::leaky(0.3).unwrap(), &[5, 9, 4, 2], 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(&mut rng, 5, 2.0);
    let t = gaussian(&mut rng, 2, 1.0);
    let (f1, f2) = (net.forward(x.view()).unwrap(), net.forward(x.view()).unwrap());
    assert_eq!(f1, f2);
    assert_eq!(net.backward(&f1, t.view()).unwrap(), net.backward(&f2, t.view()).unwrap());
}
