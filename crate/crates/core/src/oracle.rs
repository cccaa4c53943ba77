//! Brute-force reference implementations.
//!
//! Everything here is written with explicit scalar loops and calls nothing
//! from the forward/backward, counting or V-matrix code it is used to check.
//! Only raw weight storage is shared.

use ndarray::Array2;

use crate::net::{Activation, Network};

fn rectify(act: Activation, v: f64) -> f64 {
    let c = match act {
        Activation::Rectifier => 0.0,
        Activation::LeakyRectifier { c_leaky } => c_leaky,
    };
    if v >= 0.0 {
        v
    } else {
        c * v
    }
}

/// Scalar-loop forward pass.
pub fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let depth = net.weights().len();
    let mut current: Vec<f64> = x.to_vec();
    for (l, w) in net.weights().iter().enumerate() {
        let rows = w.shape()[0];
        let cols = w.shape()[1];
        let mut next = vec![0.0; cols];
        for (j, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..rows {
                let input = if i + 1 == rows { 1.0 } else { current[i] };
                acc += w[[i, j]] * input;
            }
            *out = if l + 1 == depth {
                acc
            } else {
                rectify(net.activation(), acc)
            };
        }
        current = next;
    }
    current
}

/// Mean of `½‖teacher − student‖²` using the scalar forward pass.
pub fn naive_loss(student: &Network, teacher: &Network, inputs: &Array2<f64>) -> f64 {
    let n = inputs.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let x: Vec<f64> = (0..inputs.shape()[1]).map(|u| inputs[[i, u]]).collect();
        let s = naive_forward(student, &x);
        let t = naive_forward(teacher, &x);
        for c in 0..s.len() {
            total += 0.5 * (t[c] - s[c]) * (t[c] - s[c]);
        }
    }
    total / n as f64
}

/// Central differences of the mean loss with respect to every weight entry.
/// Returns the gradient `∂J/∂W_l` (not its negative).
pub fn finite_diff_grad(net: &Network, teacher: &Network, inputs: &Array2<f64>, h: f64) -> Vec<Array2<f64>> {
    let mut probe = net.clone();
    let mut out = Vec::new();
    for l in 1..=net.depth() {
        let (rows, cols) = net.weight(l).dim();
        let mut g = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                let orig = net.weight(l)[[i, j]];
                probe.weight_mut(l)[[i, j]] = orig + h;
                let plus = naive_loss(&probe, teacher, inputs);
                probe.weight_mut(l)[[i, j]] = orig - h;
                let minus = naive_loss(&probe, teacher, inputs);
                probe.weight_mut(l)[[i, j]] = orig;
                g[[i, j]] = (plus - minus) / (2.0 * h);
            }
        }
        out.push(g);
    }
    out
}

/// A counting query over a dataset, evaluated exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub enum CountQuery {
    /// `|w^T [x; 1]| <= eps`.
    Band { w: Vec<f64>, eps: f64 },
    /// Band of `w` intersected with the active region `active^T [x; 1] > 0`.
    BandActive { w: Vec<f64>, eps: f64, active: Vec<f64> },
    /// `|w̃^T x| >= threshold` (no bias).
    Tail { w: Vec<f64>, threshold: f64 },
}

fn affine(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for u in 0..x.len() {
        acc += w[u] * x[u];
    }
    if w.len() > x.len() {
        acc += w[x.len()];
    }
    acc
}

pub fn naive_counts(inputs: &Array2<f64>, queries: &[CountQuery]) -> Vec<usize> {
    let n = inputs.shape()[0];
    let d = inputs.shape()[1];
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|u| inputs[[i, u]]).collect()).collect();
    queries
        .iter()
        .map(|q| {
            let mut count = 0;
            for x in &rows {
                let hit = match q {
                    CountQuery::Band { w, eps } => affine(w, x).abs() <= *eps,
                    CountQuery::BandActive { w, eps, active } => {
                        affine(w, x).abs() <= *eps && affine(active, x) > 0.0
                    }
                    CountQuery::Tail { w, threshold } => affine(&w[..d], x).abs() >= *threshold,
                };
                if hit {
                    count += 1;
                }
            }
            count
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Role;
    use ndarray::array;

    #[test]
    fn single_node_is_rectified_affine() {
        let w1 = array![[2.0], [-1.0], [0.5]];
        let net = Network::new(Role::Student, Activation::Rectifier, vec![w1, array![[1.0], [0.0]]]).unwrap();
        assert_eq!(naive_forward(&net, &[1.0, 3.0]), vec![0.0]);
        assert_eq!(naive_forward(&net, &[1.0, 1.0]), vec![1.5]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let w1 = array![[2.0, 1.0], [-1.0, 4.0], [0.0, 0.0]];
        let w2 = array![[1.0], [3.0], [0.0]];
        let net = Network::new(Role::Student, Activation::leaky(0.3).unwrap(), vec![w1, w2]).unwrap();
        assert_eq!(naive_forward(&net, &[0.0, 0.0]), vec![0.0]);
    }

    #[test]
    fn linear_net_fd_is_exact() {
        // a single linear layer makes the loss exactly quadratic
        let w = array![[0.5, -0.2], [0.3, 0.1], [0.0, 0.4]];
        let t = array![[1.0, 0.0], [0.0, 1.0], [0.2, -0.1]];
        let net = Network::new(Role::Student, Activation::Rectifier, vec![w]).unwrap();
        let teacher = Network::new(Role::Teacher, Activation::Rectifier, vec![t]).unwrap();
        let xs = array![[1.0, 2.0], [-0.5, 0.3], [2.0, -1.0]];
        let fd = finite_diff_grad(&net, &teacher, &xs, 1e-5);
        let ys = teacher.forward_batch(&xs).unwrap().into_output();
        let analytic = crate::net::grad_weights_batch(&net, &xs, &ys).unwrap();
        for (a, b) in analytic[0].iter().zip(fd[0].iter()) {
            let rel = (a + b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_residual_fd_vanishes() {
        let w1 = array![[0.5, -0.2], [0.3, 0.1], [0.1, 0.4]];
        let w2 = array![[1.0], [-0.5], [0.2]];
        let net = Network::new(Role::Student, Activation::Rectifier, vec![w1, w2]).unwrap();
        let teacher = net.clone().with_role(Role::Teacher);
        let xs = array![[1.0, 2.0], [-0.5, 0.3]];
        for g in finite_diff_grad(&net, &teacher, &xs, 1e-5) {
            assert!(g.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn count_edges() {
        let xs = array![[0.1, 0.2], [1.0, -3.0], [-2.0, 0.5]];
        let q = vec![
            CountQuery::Band { w: vec![1.0, 0.0, 0.0], eps: 0.0 },
            CountQuery::Band { w: vec![1.0, 0.0, 0.0], eps: f64::INFINITY },
            CountQuery::Band { w: vec![1.0, 0.0, 0.0], eps: 1.0 },
            CountQuery::BandActive { w: vec![1.0, 0.0, 0.0], eps: 1.0, active: vec![0.0, 1.0, 0.0] },
            CountQuery::Tail { w: vec![0.0, 1.0], threshold: 0.5 },
        ];
        assert_eq!(naive_counts(&xs, &q), vec![0, 3, 2, 1, 2]);
    }
}
