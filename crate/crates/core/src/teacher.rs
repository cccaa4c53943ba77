//! Teacher construction: regular, mutually separated hidden nodes whose
//! boundaries cut through the calibration data, and a top layer whose
//! fan-out norms decay as `1 / j^p`.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{band_count, random_unit, Dataset};
use crate::error::{Error, Result};
use crate::net::{Activation, Network, Role};

pub const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    /// `[d, m_1, .., m_{L-1}, C]`.
    pub layer_sizes: Vec<usize>,
    /// Fan-out decay exponent `p`.
    pub polarity: f64,
    /// Fraction of calibration inputs that activate each hidden node.
    pub active_fraction: f64,
    /// Minimum separation `ε₀` between same-layer nodes.
    pub separation: f64,
    /// Norm of the strongest node's fan-out.
    pub fanout_scale: f64,
    pub c_leaky: f64,
    pub seed: u64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            layer_sizes: vec![20, 10, 10],
            polarity: 0.0,
            active_fraction: 0.5,
            separation: 0.05,
            fanout_scale: 1.0,
            c_leaky: 0.0,
            seed: 0,
        }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 || self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "teacher needs [d, hidden.., C] with positive sizes".into(),
            ));
        }
        if !(self.separation > 0.0) {
            return Err(Error::InvalidArgument("separation must be > 0".into()));
        }
        if !self.polarity.is_finite() || self.polarity < 0.0 {
            return Err(Error::InvalidArgument("polarity must be finite and >= 0".into()));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction < 1.0) {
            return Err(Error::InvalidArgument("active fraction must lie in (0, 1)".into()));
        }
        if !(self.fanout_scale > 0.0) {
            return Err(Error::InvalidArgument("fan-out scale must be > 0".into()));
        }
        Ok(())
    }
}

fn too_close(a: &[f64], b: &[f64], eps0: f64) -> bool {
    let n = a.len() - 1;
    let dot: f64 = a[..n].iter().zip(&b[..n]).map(|(x, y)| x * y).sum();
    let sin = (1.0 - dot * dot).max(0.0).sqrt();
    sin <= eps0 && (a[n] - b[n]).abs() <= eps0
}

/// Value below which `1 - fraction` of the sorted values fall.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Builds a teacher layer by layer. Hidden biases are calibrated on the
/// activations produced by the already-built lower layers.
pub fn build_teacher(spec: &TeacherSpec, calibration: &Dataset) -> Result<Network> {
    spec.validate()?;
    let d = spec.layer_sizes[0];
    if calibration.dim() != d {
        return Err(Error::Dimension {
            context: "teacher calibration",
            expected: d,
            got: calibration.dim(),
        });
    }
    if calibration.len() < 100 * d {
        return Err(Error::InvalidArgument(format!(
            "calibration needs >= {} samples, got {}",
            100 * d,
            calibration.len()
        )));
    }
    let activation = Activation::leaky(spec.c_leaky)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let depth = spec.layer_sizes.len() - 1;
    let mut weights: Vec<Array2<f64>> = Vec::with_capacity(depth);
    // hidden activations of the layer below, without the bias column
    let mut below = calibration.inputs.clone();
    for l in 1..depth {
        let fan_in = spec.layer_sizes[l - 1];
        let width = spec.layer_sizes[l];
        let mut w = Array2::zeros((fan_in + 1, width));
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(width);
        for j in 0..width {
            let mut attempts = 0;
            let col = loop {
                if attempts == MAX_RESAMPLES {
                    return Err(Error::TeacherCrowded {
                        layer: l,
                        attempts,
                    });
                }
                attempts += 1;
                let dir = random_unit(fan_in, &mut rng);
                let mut pre: Vec<f64> = below.dot(&dir).to_vec();
                pre.sort_by(f64::total_cmp);
                let bias = -quantile_sorted(&pre, 1.0 - spec.active_fraction);
                let mut col = dir.to_vec();
                col.push(bias);
                if accepted.iter().all(|a| !too_close(a, &col, spec.separation)) {
                    break col;
                }
            };
            w.column_mut(j).assign(&Array1::from(col.clone()));
            accepted.push(col);
        }
        let pre = crate::net::augment_rows(&below).dot(&w);
        below = pre.mapv(|v| activation.activate(v));
        weights.push(w);
    }
    let m_top = spec.layer_sizes[depth - 1];
    let c = spec.layer_sizes[depth];
    let mut top = Array2::zeros((m_top + 1, c));
    for j in 0..m_top {
        let norm = spec.fanout_scale / ((j + 1) as f64).powf(spec.polarity);
        let dir = random_unit(c, &mut rng);
        top.row_mut(j).assign(&(dir * norm));
    }
    weights.push(top);
    Network::new(Role::Teacher, activation, weights)
}

/// Per-node visibility of a first-layer teacher boundary in the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeVisibility {
    pub node: usize,
    pub count: usize,
    /// `count / (eps N)`, the empirical visibility constant.
    pub ratio: f64,
}

pub fn check_visibility(teacher: &Network, data: &Dataset, eps: f64) -> Result<Vec<NodeVisibility>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let n = data.len() as f64;
    teacher
        .weight(1)
        .columns()
        .into_iter()
        .enumerate()
        .map(|(node, col)| {
            let count = band_count(data, col, eps)?;
            Ok(NodeVisibility {
                node,
                count,
                ratio: count as f64 / (eps * n),
            })
        })
        .collect()
}

/// Fraction of samples that activate each first-layer node.
pub fn active_fractions(net: &Network, data: &Dataset) -> Result<Vec<f64>> {
    let fwd = net.forward_batch(&data.inputs)?;
    let pre = &fwd.pre[0];
    let n = data.len() as f64;
    Ok(pre
        .columns()
        .into_iter()
        .map(|c| c.iter().filter(|&&v| v > 0.0).count() as f64 / n)
        .collect())
}

/// Norm of each top-layer fan-out row, excluding the bias row.
pub fn top_fanout_norms(net: &Network) -> Vec<f64> {
    let w = net.weight(net.depth());
    let n = w.nrows() - 1;
    w.slice(s![..n, ..])
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect()
}
