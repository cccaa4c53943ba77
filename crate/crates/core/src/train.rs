//! Vanilla mini-batch SGD on the MSE objective, with per-epoch
//! specialization traces and gradient monitors.

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{best_matches, fanout_norms, observer_stats, rho_matrix, rho_mean, Centering};
use crate::csvio::{render_table, MetaLine};
use crate::data::{random_unit, Dataset};
use crate::error::{Error, Result};
use crate::net::{Activation, Network, Role};
use crate::vmats::{check_compatible, compute_vmats};

/// Loss beyond which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Rows processed together by the whole-dataset monitors.
const MONITOR_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Keep a copy of the student every this many epochs (0 disables).
    pub snapshot_every: usize,
    /// Stop once the per-sample sup of `‖g_1‖_∞` over the training set drops
    /// below this value.
    pub stop_when_g1_below: Option<f64>,
    /// Write a trace record every this many epochs; the final epoch is always
    /// recorded. Early stopping is only checked on recorded epochs.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            snapshot_every: 0,
            stop_when_g1_below: None,
            record_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if let Some(t) = self.stop_when_g1_below {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("stop_when_g1_below must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// `ρ_mean` at hidden layers `1..L-1`.
    pub rho_mean: Vec<f64>,
    pub g1_sup: f64,
    /// Best first-layer correlation per teacher node.
    pub teacher_best_rho: Vec<f64>,
    /// Top hidden layer fan-out norms of the student.
    pub fanout_norms: Vec<f64>,
}

/// One record per completed epoch, starting with the untrained state at
/// epoch 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// First epoch at which teacher node `j` exceeds `threshold`.
    pub fn first_epoch_above(&self, j: usize, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.teacher_best_rho.get(j).is_some_and(|&v| v > threshold))
            .map(|r| r.epoch)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "train_loss", "eval_loss", "g1_sup"].iter().map(|s| s.to_string()).collect();
        if let Some(r) = self.records.first() {
            h.extend((1..=r.rho_mean.len()).map(|l| format!("rho_mean_{l}")));
            h.extend((0..r.teacher_best_rho.len()).map(|j| format!("best_rho_{j}")));
            h.extend((0..r.fanout_norms.len()).map(|k| format!("fanout_{k}")));
        }
        h
    }

    pub fn to_csv(&self, meta: &MetaLine) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    r.eval_loss.to_string(),
                    r.g1_sup.to_string(),
                ];
                row.extend(r.rho_mean.iter().map(f64::to_string));
                row.extend(r.teacher_best_rho.iter().map(f64::to_string));
                row.extend(r.fanout_norms.iter().map(f64::to_string));
                row
            })
            .collect();
        let header = self.header();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        render_table(meta, &header, &rows)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: Network,
    pub trace: TrainTrace,
    /// `(epoch, student)` pairs taken every `snapshot_every` epochs.
    pub snapshots: Vec<(usize, Network)>,
    /// Training ended through `stop_when_g1_below`.
    pub stopped_early: bool,
}

/// Random student: hidden columns on the sphere of radius 0.5 with zero
/// bias, top layer Gaussian with std `1/sqrt(n_{L-1})`.
pub fn init_student(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Network> {
    use rand_distr::{Distribution as _, Normal};
    let mut net = Network::zeros(Role::Student, activation, layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = net.depth();
    for l in 1..=depth {
        let w = net.weight_mut(l);
        let fan_in = w.nrows() - 1;
        if l < depth {
            for mut col in w.columns_mut() {
                col.slice_mut(s![..fan_in]).assign(&(random_unit(fan_in, &mut rng) * 0.5));
            }
        } else {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            w.slice_mut(s![..fan_in, ..]).mapv_inplace(|_| normal.sample(&mut rng));
        }
    }
    Ok(net)
}

/// Takes one SGD step on a batch: `W_l += lr · mean(f_{l-1} g_l^T)`.
/// Returns the batch loss before the step.
pub fn sgd_step(student: &mut Network, inputs: &Array2<f64>, targets: &Array2<f64>, lr: f64) -> Result<f64> {
    let (loss, dirs) = student.batch_descent(inputs, targets)?;
    for (l, d) in dirs.iter().enumerate() {
        student.weight_mut(l + 1).scaled_add(lr, d);
    }
    Ok(loss)
}

/// Max over samples of `‖g_l(x)‖_∞`.
pub fn per_sample_gradient_sup(student: &Network, teacher: &Network, data: &Dataset, layer: usize) -> Result<f64> {
    check_compatible(student, teacher)?;
    let depth = student.depth();
    if layer == 0 || layer > depth {
        return Err(Error::LayerIndex { layer, depth });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sup: f64 = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + MONITOR_CHUNK).min(data.len());
        let x = data.inputs.slice(s![start..end, ..]).to_owned();
        let y = teacher.forward_batch(&x)?.into_output();
        let fwd = student.forward_batch(&x)?;
        let g = student.backward_batch(&fwd, &y)?;
        sup = g[layer - 1].iter().fold(sup, |m, v| m.max(v.abs()));
        start = end;
    }
    Ok(sup)
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged { epoch, loss });
    }
    Ok(())
}

fn record(
    epoch: usize,
    student: &Network,
    teacher: &Network,
    data: &Dataset,
    targets: &Array2<f64>,
    eval: &Dataset,
    eval_targets: &Array2<f64>,
) -> Result<EpochRecord> {
    let train_loss = student.mean_loss(&data.inputs, targets)?;
    check_finite(epoch, train_loss)?;
    let eval_loss = student.mean_loss(&eval.inputs, eval_targets)?;
    let depth = student.depth();
    let mut rho_means = Vec::with_capacity(depth - 1);
    let mut teacher_best_rho = Vec::new();
    for layer in 1..depth {
        let rho = rho_matrix(student, teacher, eval, layer, Centering::MeanCentered)?;
        rho_means.push(rho_mean(&rho)?);
        if layer == 1 {
            teacher_best_rho = best_matches(&rho).into_iter().map(|b| b.1).collect();
        }
    }
    let fan = if depth >= 2 {
        fanout_norms(student, depth - 1, None)?
    } else {
        Vec::new()
    };
    Ok(EpochRecord {
        epoch,
        train_loss,
        eval_loss,
        rho_mean: rho_means,
        g1_sup: per_sample_gradient_sup(student, teacher, data, 1)?,
        teacher_best_rho,
        fanout_norms: fan,
    })
}

/// Trains `student` on `data` labelled by `teacher`. Unlabelled datasets are
/// labelled on the fly; labels present in `data` are used as given.
pub fn train(student: &Network, teacher: &Network, data: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(student, teacher)?;
    if data.is_empty() || eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = match &data.labels {
        Some(l) => l.clone(),
        None => teacher.forward_batch(&data.inputs)?.into_output(),
    };
    let eval_targets = teacher.forward_batch(&eval.inputs)?.into_output();
    let mut net = student.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    let mut snapshots = Vec::new();
    let mut stopped_early = false;

    let first = record(0, &net, teacher, data, &targets, eval, &eval_targets)?;
    let below = |r: &EpochRecord| cfg.stop_when_g1_below.is_some_and(|t| r.g1_sup < t);
    let done = below(&first);
    trace.records.push(first);
    if cfg.snapshot_every > 0 {
        snapshots.push((0, net.clone()));
    }
    if done {
        stopped_early = true;
    } else {
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let x = data.inputs.select(Axis(0), batch);
                let y = targets.select(Axis(0), batch);
                let loss = sgd_step(&mut net, &x, &y, cfg.learning_rate)?;
                check_finite(epoch, loss)?;
            }
            if epoch % cfg.record_every == 0 || epoch == cfg.epochs {
                let r = record(epoch, &net, teacher, data, &targets, eval, &eval_targets)?;
                let stop = below(&r);
                trace.records.push(r);
                if stop {
                    stopped_early = true;
                }
            }
            if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
                snapshots.push((epoch, net.clone()));
            }
            if stopped_early {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        student: net,
        trace,
        snapshots,
        stopped_early,
    })
}

/// Which gradient bound to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationKind {
    /// Axis-aligned augmentation: bound carries a `1/sqrt(d)` factor.
    #[default]
    Agnostic,
    Aware,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionRecord {
    pub teacher: usize,
    pub student: usize,
    pub band_count: usize,
    pub observed_count: usize,
    pub observes: bool,
    pub alpha: f64,
    pub gradient_bound: f64,
    pub gradient_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub eps: f64,
    pub kappa: f64,
    pub kind: AugmentationKind,
    /// `K = m_1 + n_1`.
    pub k_total: usize,
    pub g1_sup: f64,
    /// Deep networks: `α` varies with the input, so the smallest magnitude
    /// over the data is used and the report only monitors.
    pub monitor_only: bool,
    pub records: Vec<ConditionRecord>,
}

impl ConditionReport {
    /// Every teacher node has an observer meeting the gradient bound.
    pub fn all_teachers_covered(&self, num_teachers: usize) -> bool {
        (0..num_teachers).all(|j| self.records.iter().any(|r| r.teacher == j && r.observes && r.gradient_ok))
    }

    pub fn to_csv(&self, meta: &MetaLine) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.teacher.to_string(),
                    r.student.to_string(),
                    r.band_count.to_string(),
                    r.observed_count.to_string(),
                    r.observes.to_string(),
                    r.alpha.to_string(),
                    r.gradient_bound.to_string(),
                    self.g1_sup.to_string(),
                    r.gradient_ok.to_string(),
                ]
            })
            .collect();
        render_table(
            meta,
            &["teacher", "student", "band_count", "observed_count", "observes", "alpha", "gradient_bound", "g1_sup", "gradient_ok"],
            &rows,
        )
    }
}

/// Samples used to take the minimum of `|α|` for deep networks.
const MONITOR_ALPHA_SAMPLES: usize = 256;

/// Checks the observation and small-gradient hypotheses of the two-layer
/// specialization result for every (teacher, student) pair.
pub fn theorem_condition_report(
    student: &Network,
    teacher: &Network,
    data: &Dataset,
    eps: f64,
    kappa: f64,
    kind: AugmentationKind,
) -> Result<ConditionReport> {
    check_compatible(student, teacher)?;
    if student.depth() < 2 {
        return Err(Error::InvalidArgument("condition report needs a hidden layer".into()));
    }
    let obs = observer_stats(student, teacher, data, eps, kappa)?;
    let g1_sup = per_sample_gradient_sup(student, teacher, data, 1)?;
    let m = teacher.width(1);
    let n = student.width(1);
    let k_total = m + n;
    let monitor_only = student.depth() > 2;
    let mut alpha = Array2::from_elem((n, m), f64::INFINITY);
    let count = if monitor_only { data.len().min(MONITOR_ALPHA_SAMPLES) } else { 1 };
    for i in 0..count {
        let vm = compute_vmats(student, teacher, data.sample(i))?;
        for k in 0..n {
            for j in 0..m {
                alpha[[k, j]] = alpha[[k, j]].min(vm.alpha(1, k, j).abs());
            }
        }
    }
    let mut scale = eps / (5.0 * (k_total as f64).powf(1.5));
    if kind == AugmentationKind::Agnostic {
        scale /= (data.dim() as f64).sqrt();
    }
    let mut records = Vec::with_capacity(m * n);
    for j in 0..m {
        for k in 0..n {
            let bound = alpha[[k, j]] * scale;
            records.push(ConditionRecord {
                teacher: j,
                student: k,
                band_count: obs.band_counts[j],
                observed_count: obs.observed_counts[[j, k]],
                observes: obs.observes(j, k),
                alpha: alpha[[k, j]],
                gradient_bound: bound,
                gradient_ok: g1_sup <= bound,
            });
        }
    }
    Ok(ConditionReport {
        eps,
        kappa,
        kind,
        k_total,
        g1_sup,
        monitor_only,
        records,
    })
}

/// Squared Frobenius norm of the full gradient, summed over layers.
pub fn gradient_norm_sq(student: &Network, inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    let (_, dirs) = student.batch_descent(inputs, targets)?;
    Ok(dirs.iter().map(|d| d.mapv(|v| v * v).sum()).sum())
}

/// Max over samples of the output ∞-norm, a scale for output deviations.
pub fn output_scale(net: &Network, inputs: &Array2<f64>) -> Result<f64> {
    let out = net.forward_batch(inputs)?.into_output();
    Ok(out.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}
