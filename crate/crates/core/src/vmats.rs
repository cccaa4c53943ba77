//! Top-down gated weight products `V_l`, `V*_l` and the couplings
//! `A_l = V_l^T V*_l`, `B_l = V_l^T V_l`.
//!
//! The recursion runs on augmented matrices: for hidden layers the bias
//! passes through `Ŵ_l = [W_l | e_bias]` with gate 1, so that
//! `f_L = V_l f_l` holds exactly and `V_l` is `C x (n_l + 1)`. At the top,
//! `V_L = I_C`.

use ndarray::{s, Array1, Array2, ArrayView1};

use crate::error::{check_dim, Error, Result};
use crate::net::{ForwardState, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct VMats {
    /// `V_1 .. V_L` of the student.
    pub v: Vec<Array2<f64>>,
    /// `V*_1 .. V*_L` of the teacher.
    pub v_star: Vec<Array2<f64>>,
    pub a: Vec<Array2<f64>>,
    pub b: Vec<Array2<f64>>,
}

impl VMats {
    pub fn depth(&self) -> usize {
        self.v.len()
    }

    pub fn v(&self, l: usize) -> &Array2<f64> {
        &self.v[l - 1]
    }

    pub fn v_star(&self, l: usize) -> &Array2<f64> {
        &self.v_star[l - 1]
    }

    pub fn a(&self, l: usize) -> &Array2<f64> {
        &self.a[l - 1]
    }

    pub fn b(&self, l: usize) -> &Array2<f64> {
        &self.b[l - 1]
    }

    /// `α_kj = v_k^T v*_j` at layer `l`.
    pub fn alpha(&self, l: usize, k: usize, j: usize) -> f64 {
        self.a[l - 1][[k, j]]
    }

    /// `β_kk' = v_k^T v_k'` at layer `l`.
    pub fn beta(&self, l: usize, k: usize, k2: usize) -> f64 {
        self.b[l - 1][[k, k2]]
    }
}

/// `V_1 .. V_L` of one network, using the gates recorded in `fwd`.
pub fn v_chain(net: &Network, fwd: &ForwardState) -> Result<Vec<Array2<f64>>> {
    let depth = net.depth();
    check_dim("v_chain depth", depth, fwd.depth())?;
    let c = net.output_dim();
    let mut chain = vec![Array2::zeros((0, 0)); depth];
    chain[depth - 1] = Array2::eye(c);
    for l in (1..depth).rev() {
        // V_l = V_{l+1} D_{l+1} Ŵ_{l+1}^T
        let upper = &chain[l];
        let w = net.weight(l + 1);
        let n_up = w.ncols();
        let mut scaled = upper.slice(s![.., ..n_up]).to_owned();
        if l + 1 < depth {
            let z = &fwd.gates[l];
            for (mut col, &g) in scaled.columns_mut().into_iter().zip(z.iter()) {
                col *= g;
            }
        }
        let mut next = scaled.dot(&w.t());
        if l + 1 < depth {
            let bias_col = upper.column(n_up);
            let last = next.ncols() - 1;
            let mut col = next.column_mut(last);
            col += &bias_col;
        }
        chain[l - 1] = next;
    }
    Ok(chain)
}

/// V/A/B matrices of a student/teacher pair at input `x`.
pub fn compute_vmats(student: &Network, teacher: &Network, x: ArrayView1<f64>) -> Result<VMats> {
    check_compatible(student, teacher)?;
    let sf = student.forward(x)?;
    let tf = teacher.forward(x)?;
    vmats_from_states(student, teacher, &sf, &tf)
}

pub fn vmats_from_states(
    student: &Network,
    teacher: &Network,
    sf: &ForwardState,
    tf: &ForwardState,
) -> Result<VMats> {
    let v = v_chain(student, sf)?;
    let v_star = v_chain(teacher, tf)?;
    let a = v.iter().zip(&v_star).map(|(v, vs)| v.t().dot(vs)).collect();
    let b = v.iter().map(|v| v.t().dot(v)).collect();
    Ok(VMats { v, v_star, a, b })
}

pub(crate) fn check_compatible(student: &Network, teacher: &Network) -> Result<()> {
    check_dim("teacher/student input", teacher.input_dim(), student.input_dim())?;
    check_dim("teacher/student output", teacher.output_dim(), student.output_dim())?;
    check_dim("teacher/student depth", teacher.depth(), student.depth())?;
    Ok(())
}

/// Right-hand side `D_l [A_l f*_l - B_l f_l]` over the `n_l` real nodes.
pub fn recursive_gradient(
    vm: &VMats,
    sf: &ForwardState,
    tf: &ForwardState,
    l: usize,
) -> Array1<f64> {
    let depth = vm.depth();
    if l == depth {
        return vm.a(l).dot(&tf.output) - vm.b(l).dot(&sf.output);
    }
    let rhs = vm.a(l).dot(tf.activation(l)) - vm.b(l).dot(sf.activation(l));
    let n = sf.gates[l - 1].len();
    &rhs.slice(s![..n]) * &sf.gates[l - 1]
}

/// `‖g_l − D_l[A_l f*_l − B_l f_l]‖_∞` at one input and layer.
pub fn gradient_identity_residual(
    student: &Network,
    teacher: &Network,
    x: ArrayView1<f64>,
    l: usize,
) -> Result<f64> {
    let depth = student.depth();
    if l == 0 || l > depth {
        return Err(Error::LayerIndex { layer: l, depth });
    }
    Ok(identity_residuals(student, teacher, x)?[l - 1])
}

/// Residuals of the recursive gradient identity at every layer `1..=L`.
pub fn identity_residuals(student: &Network, teacher: &Network, x: ArrayView1<f64>) -> Result<Vec<f64>> {
    check_compatible(student, teacher)?;
    let sf = student.forward(x)?;
    let tf = teacher.forward(x)?;
    let bwd = student.backward(&sf, tf.output.view())?;
    let vm = vmats_from_states(student, teacher, &sf, &tf)?;
    Ok((1..=student.depth())
        .map(|l| {
            let rhs = recursive_gradient(&vm, &sf, &tf, l);
            bwd.grad(l)
                .iter()
                .zip(rhs.iter())
                .map(|(g, r)| (g - r).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Role};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(sizes: &[usize], act: Activation, role: Role, rng: &mut ChaCha8Rng) -> Network {
        let weights = sizes
            .windows(2)
            .map(|w| Array2::from_shape_fn((w[0] + 1, w[1]), |_| rng.random_range(-1.0..1.0)))
            .collect();
        Network::new(role, act, weights).unwrap()
    }

    #[test]
    fn two_layer_v1_is_top_weight_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_net(&[4, 6, 3], Activation::Rectifier, Role::Student, &mut rng);
        let t = random_net(&[4, 2, 3], Activation::Rectifier, Role::Teacher, &mut rng);
        let x1 = array![1.0, -2.0, 0.5, 3.0];
        let x2 = array![-5.0, 0.1, 2.0, -1.0];
        let v1 = compute_vmats(&s, &t, x1.view()).unwrap();
        let v2 = compute_vmats(&s, &t, x2.view()).unwrap();
        let w2t = s.weight(2).t().to_owned();
        assert_eq!(v1.v(1).slice(s![.., ..6]), w2t.slice(s![.., ..6]));
        assert_eq!(v1.a(1), v2.a(1));
        assert_eq!(v1.b(1), v2.b(1));
        assert_eq!(v1.v(2), &Array2::<f64>::eye(3));
    }

    #[test]
    fn all_active_deep_net_is_linear_product() {
        // positive weights and inputs keep every gate at 1
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |r: usize, c: usize, rng: &mut ChaCha8Rng| Array2::from_shape_fn((r, c), |_| rng.random_range(0.1..1.0));
        let w1 = mk(4, 3, &mut rng);
        let w2 = mk(4, 2, &mut rng);
        let w3 = mk(3, 2, &mut rng);
        let net = Network::new(Role::Student, Activation::Rectifier, vec![w1.clone(), w2.clone(), w3.clone()]).unwrap();
        let teacher = net.clone().with_role(Role::Teacher);
        let x = array![0.5, 1.0, 2.0];
        let fwd = net.forward(x.view()).unwrap();
        assert!(fwd.gates.iter().all(|z| z.iter().all(|&v| v == 1.0)));
        let vm = compute_vmats(&net, &teacher, x.view()).unwrap();
        let expected = w3.t().slice(s![.., ..2]).dot(&w2.t());
        for (a, b) in vm.v(1).slice(s![.., ..3]).iter().zip(expected.slice(s![.., ..3]).iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let res = identity_residuals(&net, &teacher, x.view()).unwrap();
        assert!(res.iter().all(|&r| r < 1e-10), "{res:?}");
    }

    #[test]
    fn output_equals_v_times_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = random_net(&[3, 5, 4, 6, 2], Activation::leaky(0.1).unwrap(), Role::Student, &mut rng);
        let x = array![0.3, -1.2, 2.0];
        let fwd = net.forward(x.view()).unwrap();
        let chain = v_chain(&net, &fwd).unwrap();
        for l in 1..net.depth() {
            let out = chain[l - 1].dot(fwd.activation(l));
            for (a, b) in out.iter().zip(fwd.output.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_pairs_satisfy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let act = Activation::leaky(0.2).unwrap();
        let s = random_net(&[5, 7, 3], act, Role::Student, &mut rng);
        let t = random_net(&[5, 4, 3], act, Role::Teacher, &mut rng);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = Array1::from_shape_fn(5, |_| rng.random_range(-3.0..3.0));
            for r in identity_residuals(&s, &t, x.view()).unwrap() {
                worst = worst.max(r);
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn b_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = random_net(&[3, 6, 5, 2], Activation::Rectifier, Role::Student, &mut rng);
        let t = random_net(&[3, 2, 3, 2], Activation::Rectifier, Role::Teacher, &mut rng);
        let vm = compute_vmats(&s, &t, array![1.0, 0.2, -0.4].view()).unwrap();
        for b in &vm.b {
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    assert_eq!(b[[i, j]], b[[j, i]]);
                }
            }
            let probe = Array1::from_shape_fn(b.nrows(), |i| (i as f64 * 0.7).sin());
            assert!(probe.dot(&b.dot(&probe)) >= -1e-12);
        }
    }

    #[test]
    fn layer_index_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_net(&[2, 3, 1], Activation::Rectifier, Role::Student, &mut rng);
        let t = random_net(&[2, 2, 1], Activation::Rectifier, Role::Teacher, &mut rng);
        let x = array![0.1, 0.2];
        assert!(matches!(gradient_identity_residual(&s, &t, x.view(), 0), Err(Error::LayerIndex { .. })));
        assert!(matches!(gradient_identity_residual(&s, &t, x.view(), 3), Err(Error::LayerIndex { .. })));
        let bad = random_net(&[2, 2, 2], Activation::Rectifier, Role::Teacher, &mut rng);
        assert!(compute_vmats(&s, &bad, x.view()).is_err());
    }
}
