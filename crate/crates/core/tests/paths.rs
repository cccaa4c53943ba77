//! Low-loss paths between exact teacher copies placed in different slots.

use ndarray::{s, Array2};
use teachnet::connectivity::{build_path_with_matching, eval_path, SegmentLabel};
use teachnet::data::{label_with, sample, Distribution};
use teachnet::teacher::{build_teacher, TeacherSpec};
use teachnet::{Activation, Network, Role};

fn teacher() -> Network {
    let calib = sample(Distribution::Gaussian, 2000, 3, 1.0, 1).unwrap();
    let spec = TeacherSpec { layer_sizes: vec![3, 2, 4], seed: 2, ..TeacherSpec::default() };
    build_teacher(&spec, &calib).unwrap()
}

/// Teacher nodes at `slots`, seeded random incoming weights elsewhere and
/// zero fan-out on every spare.
fn placed(t: &Network, n: usize, slots: &[usize], seed: u64) -> Network {
    let spare = Network::random(Role::Student, Activation::Rectifier, &[3, n, 4], seed).unwrap();
    let mut w1 = spare.weight(1).clone();
    let mut w2 = Array2::zeros((n + 1, 4));
    for (j, &k) in slots.iter().enumerate() {
        w1.column_mut(k).assign(&t.weight(1).column(j));
        w2.row_mut(k).assign(&t.weight(2).row(j));
    }
    w2.row_mut(n).assign(&t.weight(2).row(2));
    Network::new(Role::Student, Activation::Rectifier, vec![w1, w2]).unwrap()
}

#[test]
fn exact_endpoints_connect_without_loss() {
    let t = teacher();
    let eval = label_with(&t, &sample(Distribution::Gaussian, 500, 3, 1.0, 3).unwrap()).unwrap();
    for (sa, sb) in [([0, 1], [1, 0]), ([0, 1], [3, 2]), ([2, 0], [0, 4])] {
        let a = placed(&t, 5, &sa, 10);
        let b = placed(&t, 5, &sb, 11);
        let path = build_path_with_matching(&a, &b, &sa, &sb).unwrap();
        assert_eq!(path.waypoints.first(), Some(&a));
        assert_eq!(path.waypoints.last(), Some(&b));
        let e = eval_path(&path, &eval, 11).unwrap();
        assert!(e.path_max <= e.endpoint_loss + 1e-10, "{sa:?}->{sb:?}: {} vs {}", e.path_max, e.endpoint_loss);
        assert!(e.straight_max > 10.0 * e.endpoint_loss.max(1e-30), "straight line stays flat");
        // every segment keeps the network function
        for (seg, dev) in e.max_output_deviation.iter().enumerate() {
            assert!(*dev < 1e-10, "segment {seg} ({:?}) moved the output by {dev}", path.labels[seg]);
        }
    }
}

#[test]
fn swap_between_identical_incoming_weights_is_flat() {
    let t = teacher();
    let eval = label_with(&t, &sample(Distribution::Gaussian, 300, 3, 1.0, 4).unwrap()).unwrap();
    let a = placed(&t, 4, &[0, 1], 5);
    let b = placed(&t, 4, &[2, 1], 6);
    let path = build_path_with_matching(&a, &b, &[0, 1], &[2, 1]).unwrap();
    let swaps: Vec<usize> = path
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, SegmentLabel::SwapFanout { .. }))
        .map(|(i, _)| i)
        .collect();
    assert!(!swaps.is_empty());
    for seg in swaps {
        let (p, q) = (&path.waypoints[seg], &path.waypoints[seg + 1]);
        if let SegmentLabel::SwapFanout { src, dst } = path.labels[seg] {
            assert_eq!(p.weight(1).column(src), p.weight(1).column(dst));
            assert_eq!(q.weight(2).slice(s![src, ..]).iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        }
        for k in 0..=10 {
            let mid = path.point(seg, k as f64 / 10.0).unwrap();
            for i in 0..eval.len() {
                let d = &mid.output(eval.sample(i)).unwrap() - &p.output(eval.sample(i)).unwrap();
                assert!(d.iter().all(|v| v.abs() < 1e-10));
            }
        }
    }
}
