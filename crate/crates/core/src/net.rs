//! Layered rectified networks with bias-augmented weight matrices.
//!
//! Layer `l` (1-based, `1..=L`) owns `W_l` of shape `(n_{l-1} + 1) x n_l`;
//! the last row of `W_l` is the bias. Activations of the input and hidden
//! layers carry a trailing constant `1` so that `pre_l = W_l^T f_{l-1}`.
//! The top layer is linear.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Rectifier used at every hidden node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Rectifier,
    LeakyRectifier { c_leaky: f64 },
}

impl Activation {
    pub fn leaky(c_leaky: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&c_leaky) {
            return Err(Error::InvalidArgument(format!(
                "c_leaky must lie in [0, 1), got {c_leaky}"
            )));
        }
        if c_leaky == 0.0 {
            Ok(Activation::Rectifier)
        } else {
            Ok(Activation::LeakyRectifier { c_leaky })
        }
    }

    pub fn c_leaky(self) -> f64 {
        match self {
            Activation::Rectifier => 0.0,
            Activation::LeakyRectifier { c_leaky } => c_leaky,
        }
    }

    /// Gate value at a pre-activation. Zero resolves to the active side.
    #[inline]
    pub fn gate(self, pre: f64) -> f64 {
        if pre >= 0.0 {
            1.0
        } else {
            self.c_leaky()
        }
    }

    #[inline]
    pub fn activate(self, pre: f64) -> f64 {
        if pre >= 0.0 {
            pre
        } else {
            self.c_leaky() * pre
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    role: Role,
    activation: Activation,
    weights: Vec<Array2<f64>>,
}

/// Per-sample forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    /// `f_0 .. f_{L-1}`, each of length `n_l + 1` with a trailing `1`.
    pub activations: Vec<Array1<f64>>,
    /// `pre_1 .. pre_L`; `pre_L` is the network output.
    pub pre: Vec<Array1<f64>>,
    /// Gate diagonals `z_1 .. z_{L-1}` over the `n_l` real nodes. The
    /// trailing bias entry is always 1 and is not stored.
    pub gates: Vec<Array1<f64>>,
    pub output: Array1<f64>,
}

impl ForwardState {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    /// Augmented activation `f_l` for `0 <= l < L`.
    pub fn activation(&self, l: usize) -> &Array1<f64> {
        &self.activations[l]
    }
}

/// Per-sample backpropagated gradients `g_1 .. g_L` over real nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardState {
    pub grads: Vec<Array1<f64>>,
}

impl BackwardState {
    /// `g_l` for `1 <= l <= L`.
    pub fn grad(&self, l: usize) -> &Array1<f64> {
        &self.grads[l - 1]
    }
}

impl Network {
    pub fn new(role: Role, activation: Activation, weights: Vec<Array2<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if activation.c_leaky() >= 1.0 || activation.c_leaky() < 0.0 {
            return Err(Error::InvalidArgument("c_leaky must lie in [0, 1)".into()));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.nrows() < 2 || w.ncols() == 0 {
                return Err(Error::InvalidArgument(format!("layer {} has empty shape", i + 1)));
            }
            if let Some(prev) = i.checked_sub(1).map(|p| &weights[p]) {
                check_dim("layer input rows", prev.ncols() + 1, w.nrows())?;
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network weights"));
            }
        }
        Ok(Network {
            role,
            activation,
            weights,
        })
    }

    pub fn zeros(role: Role, activation: Activation, layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output sizes".into()));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| Array2::zeros((w[0] + 1, w[1])))
            .collect();
        Network::new(role, activation, weights)
    }

    /// Entries uniform in `±1/sqrt(n_{l-1} + 1)`, so activations stay O(1)
    /// for O(1) inputs at any depth. Used for identity and gradient checks.
    pub fn random(role: Role, activation: Activation, layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layer_sizes
            .windows(2)
            .map(|w| {
                let b = 1.0 / ((w[0] + 1) as f64).sqrt();
                Array2::from_shape_fn((w[0] + 1, w[1]), |_| rng.random_range(-b..b))
            })
            .collect();
        Network::new(role, activation, weights)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// `[n_0, n_1, .., n_L]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.weights[0].nrows() - 1];
        sizes.extend(self.weights.iter().map(|w| w.ncols()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.depth() - 1].ncols()
    }

    /// Width of layer `l` (`n_l`).
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim()
        } else {
            self.weights[l - 1].ncols()
        }
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    /// `W_l`, 1-based.
    pub fn weight(&self, l: usize) -> &Array2<f64> {
        &self.weights[l - 1]
    }

    /// Mutable `W_l`, 1-based. Shapes must be preserved by the caller.
    pub fn weight_mut(&mut self, l: usize) -> &mut Array2<f64> {
        &mut self.weights[l - 1]
    }

    pub fn into_weights(self) -> Vec<Array2<f64>> {
        self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn same_shape(&self, other: &Network) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.dim() == b.dim())
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ForwardState> {
        check_dim("forward input", self.input_dim(), x.len())?;
        let depth = self.depth();
        let mut activations = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut gates = Vec::with_capacity(depth.saturating_sub(1));
        let mut f = augment(x);
        for (l, w) in self.weights.iter().enumerate() {
            let p = column_products(w, &f);
            activations.push(f);
            if l + 1 == depth {
                pre.push(p);
                break;
            }
            let z = p.mapv(|v| self.activation.gate(v));
            let act = p.mapv(|v| self.activation.activate(v));
            f = augment(act.view());
            pre.push(p);
            gates.push(z);
        }
        let output = pre[depth - 1].clone();
        Ok(ForwardState {
            activations,
            pre,
            gates,
            output,
        })
    }

    /// Network output without keeping intermediate state.
    pub fn output(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// Backpropagated gradients `g_l` for the MSE objective.
    pub fn backward(&self, fwd: &ForwardState, teacher_out: ArrayView1<f64>) -> Result<BackwardState> {
        let depth = self.depth();
        check_dim("backward depth", depth, fwd.depth())?;
        check_dim("backward teacher output", self.output_dim(), teacher_out.len())?;
        for l in 1..=depth {
            check_dim("backward layer width", self.width(l), fwd.pre[l - 1].len())?;
        }
        let mut grads = vec![Array1::zeros(0); depth];
        grads[depth - 1] = &teacher_out - &fwd.output;
        for l in (2..=depth).rev() {
            let w = &self.weights[l - 1];
            let n_prev = w.nrows() - 1;
            let mut g = w.slice(s![..n_prev, ..]).dot(&grads[l - 1]);
            g *= &fwd.gates[l - 2];
            grads[l - 2] = g;
        }
        Ok(BackwardState { grads })
    }

    /// Mean MSE objective over a batch of inputs against target outputs.
    pub fn mean_loss(&self, inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
        check_dim("loss targets", inputs.nrows(), targets.nrows())?;
        if inputs.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let out = self.forward_batch(inputs)?.output().to_owned();
        check_dim("loss target width", out.ncols(), targets.ncols())?;
        let total: f64 = (&out - targets).mapv(|v| v * v).sum();
        Ok(0.5 * total / inputs.nrows() as f64)
    }

    /// Forward pass over a row-major batch of inputs.
    pub fn forward_batch(&self, inputs: &Array2<f64>) -> Result<BatchForward> {
        check_dim("batch input width", self.input_dim(), inputs.ncols())?;
        let depth = self.depth();
        let mut activations = Vec::with_capacity(depth);
        let mut gates = Vec::with_capacity(depth.saturating_sub(1));
        let mut pre_acts = Vec::with_capacity(depth);
        let mut f = augment_rows(inputs);
        let mut out = None;
        for (l, w) in self.weights.iter().enumerate() {
            let p = f.dot(w);
            activations.push(f);
            if l + 1 == depth {
                out = Some(p.clone());
                pre_acts.push(p);
                break;
            }
            let z = p.mapv(|v| self.activation.gate(v));
            let mut next = Array2::ones((p.nrows(), p.ncols() + 1));
            next.slice_mut(s![.., ..p.ncols()])
                .assign(&p.mapv(|v| self.activation.activate(v)));
            f = next;
            pre_acts.push(p);
            gates.push(z);
        }
        Ok(BatchForward {
            activations,
            pre: pre_acts,
            gates,
            output: out.expect("depth >= 1"),
        })
    }

    /// Mean of `f_{l-1} g_l^T` over the batch, i.e. the negative gradient of
    /// the mean MSE objective, together with the batch loss.
    pub fn batch_descent(&self, inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, Vec<Array2<f64>>)> {
        let fwd = self.forward_batch(inputs)?;
        let grads = self.backward_batch(&fwd, targets)?;
        let b = inputs.nrows() as f64;
        let loss = 0.5 * grads[self.depth() - 1].mapv(|v| v * v).sum() / b;
        let dirs = grads
            .iter()
            .zip(&fwd.activations)
            .map(|(g, f)| f.t().dot(g) / b)
            .collect();
        Ok((loss, dirs))
    }

    /// Batched backpropagated gradients, one row per sample.
    pub fn backward_batch(&self, fwd: &BatchForward, targets: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        check_dim("batch targets rows", fwd.output.nrows(), targets.nrows())?;
        check_dim("batch targets width", fwd.output.ncols(), targets.ncols())?;
        let depth = self.depth();
        let mut grads = vec![Array2::zeros((0, 0)); depth];
        grads[depth - 1] = targets - &fwd.output;
        for l in (2..=depth).rev() {
            let w = &self.weights[l - 1];
            let n_prev = w.nrows() - 1;
            let mut g = grads[l - 1].dot(&w.slice(s![..n_prev, ..]).t());
            g *= &fwd.gates[l - 2];
            grads[l - 2] = g;
        }
        Ok(grads)
    }

    /// Fan-out rows of the top layer (2-layer view): row `k` of `W_L` for
    /// hidden node `k` of layer `L-1`.
    pub fn top_fanout(&self, k: usize) -> ArrayView1<'_, f64> {
        self.weights[self.depth() - 1].row(k)
    }
}

/// Batched forward pass. Row `i` of every matrix belongs to sample `i`.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `F_0 .. F_{L-1}` with a trailing column of ones.
    pub activations: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
    pub gates: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl BatchForward {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }

    /// Post-activation values of hidden layer `l` (without the bias column).
    pub fn hidden(&self, l: usize) -> ndarray::ArrayView2<'_, f64> {
        let f = &self.activations[l];
        f.slice(s![.., ..f.ncols() - 1])
    }
}

/// `½‖teacher − student‖²` for one sample.
pub fn mse_loss(student_out: ArrayView1<f64>, teacher_out: ArrayView1<f64>) -> Result<f64> {
    check_dim("mse length", teacher_out.len(), student_out.len())?;
    Ok(0.5
        * student_out
            .iter()
            .zip(teacher_out.iter())
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>())
}

/// Per-layer `f_{l-1} g_l^T` for one sample (negative loss gradient).
pub fn grad_weights(fwd: &ForwardState, bwd: &BackwardState) -> Result<Vec<Array2<f64>>> {
    check_dim("grad_weights depth", fwd.depth(), bwd.grads.len())?;
    fwd.activations
        .iter()
        .zip(&bwd.grads)
        .zip(&fwd.pre)
        .map(|((f, g), p)| {
            check_dim("grad_weights width", p.len(), g.len())?;
            let f2 = f.view().insert_axis(Axis(1));
            let g2 = g.view().insert_axis(Axis(0));
            Ok(f2.dot(&g2))
        })
        .collect()
}

/// Mean of per-sample `grad_weights` over a batch, accumulated in sample order.
pub fn grad_weights_batch(net: &Network, inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    check_dim("batch targets", inputs.nrows(), targets.nrows())?;
    if inputs.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut acc: Vec<Array2<f64>> = net.weights().iter().map(|w| Array2::zeros(w.dim())).collect();
    for (x, y) in inputs.rows().into_iter().zip(targets.rows()) {
        let fwd = net.forward(x)?;
        let bwd = net.backward(&fwd, y)?;
        for (a, g) in acc.iter_mut().zip(grad_weights(&fwd, &bwd)?) {
            *a += &g;
        }
    }
    let n = inputs.nrows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `W^T f` with each entry summed in row order, so per-sample results do not
/// depend on the unrolling inside ndarray's dot kernels.
fn column_products(w: &Array2<f64>, f: &Array1<f64>) -> Array1<f64> {
    w.columns()
        .into_iter()
        .map(|col| col.iter().zip(f.iter()).fold(0.0, |acc, (a, b)| acc + a * b))
        .collect()
}

pub(crate) fn augment(x: ArrayView1<f64>) -> Array1<f64> {
    let mut f = Array1::ones(x.len() + 1);
    f.slice_mut(s![..x.len()]).assign(&x);
    f
}

pub(crate) fn augment_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut f = Array2::ones((x.nrows(), x.ncols() + 1));
    f.slice_mut(s![.., ..x.ncols()]).assign(x);
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn activate_examples() {
        assert_eq!(Activation::Rectifier.activate(-2.0), 0.0);
        assert_eq!(Activation::Rectifier.activate(3.0), 3.0);
        let leaky = Activation::leaky(0.1).unwrap();
        assert_eq!(leaky.activate(3.0), 3.0);
        assert!((leaky.activate(-2.0) + 0.2).abs() < 1e-15);
        assert_eq!(leaky.gate(0.0), 1.0);
        assert_eq!(leaky.gate(-1e-300), 0.1);
        assert_eq!(Activation::Rectifier.gate(0.0), 1.0);
    }

    #[test]
    fn leaky_constant_validated() {
        assert!(Activation::leaky(1.0).is_err());
        assert!(Activation::leaky(-0.1).is_err());
        assert_eq!(Activation::leaky(0.0).unwrap(), Activation::Rectifier);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(Role::Student, Activation::Rectifier, &[3, 4, 2]).unwrap();
        let st = net.forward(array![1.0, -2.0, 3.0].view()).unwrap();
        assert_eq!(st.output, array![0.0, 0.0]);
        assert_eq!(st.activations[1], array![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(st.activations[0][3], 1.0);
    }

    #[test]
    fn single_linear_layer_identity() {
        let mut w = Array2::zeros((4, 3));
        for i in 0..3 {
            w[[i, i]] = 1.0;
        }
        let net = Network::new(Role::Student, Activation::Rectifier, vec![w]).unwrap();
        let x = array![0.5, 1.5, 2.5];
        assert_eq!(net.output(x.view()).unwrap(), x);
        // the top layer is linear, so negative inputs pass through as well
        let neg = array![-1.0, 2.0, -3.0];
        assert_eq!(net.output(neg.view()).unwrap(), neg);
    }

    #[test]
    fn forward_rejects_bad_dimension() {
        let net = Network::zeros(Role::Student, Activation::Rectifier, &[3, 2]).unwrap();
        assert!(matches!(
            net.forward(array![1.0, 2.0].view()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        let a = array![1.0, 2.0];
        assert_eq!(mse_loss(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(mse_loss(array![0.0, 0.0].view(), array![1.0, 0.0].view()).unwrap(), 0.5);
        assert!(mse_loss(array![0.0].view(), array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn backward_zero_residual_and_linear_case() {
        let w = array![[1.0, -1.0], [0.5, 2.0], [0.1, 0.2]];
        let net = Network::new(Role::Student, Activation::Rectifier, vec![w]).unwrap();
        let x = array![0.3, -0.7];
        let fwd = net.forward(x.view()).unwrap();
        let same = net.backward(&fwd, fwd.output.view()).unwrap();
        assert!(same.grad(1).iter().all(|&g| g == 0.0));
        let target = array![1.0, 1.0];
        let bwd = net.backward(&fwd, target.view()).unwrap();
        assert_eq!(bwd.grad(1), &(&target - &fwd.output));
        let gw = grad_weights(&fwd, &bwd).unwrap();
        let f0 = array![0.3, -0.7, 1.0];
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(gw[0][[i, j]], f0[i] * bwd.grad(1)[j]);
            }
        }
    }

    #[test]
    fn batch_path_matches_per_sample() {
        let w1 = array![[0.3, -0.2, 0.9], [-0.5, 0.8, 0.1], [0.05, -0.1, 0.2]];
        let w2 = array![[1.0, 0.5], [-0.3, 0.2], [0.7, -1.1], [0.01, 0.02]];
        let net = Network::new(Role::Student, Activation::leaky(0.2).unwrap(), vec![w1, w2]).unwrap();
        let xs = array![[1.0, 2.0], [-1.0, 0.5], [0.3, -0.3]];
        let ys = array![[0.1, 0.2], [0.0, -1.0], [2.0, 0.0]];
        let (_, dirs) = net.batch_descent(&xs, &ys).unwrap();
        let mean = grad_weights_batch(&net, &xs, &ys).unwrap();
        for (a, b) in dirs.iter().zip(&mean) {
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let bf = net.forward_batch(&xs).unwrap();
        for (i, x) in xs.rows().into_iter().enumerate() {
            let out = net.output(x).unwrap();
            for j in 0..2 {
                assert!((bf.output()[[i, j]] - out[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_forward() {
        let w1 = array![[0.3, -0.2], [-0.5, 0.8], [0.05, -0.1]];
        let w2 = array![[1.0], [-0.3], [0.7]];
        let net = Network::new(Role::Teacher, Activation::Rectifier, vec![w1, w2]).unwrap();
        let x = array![0.123, 4.56];
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }
}
