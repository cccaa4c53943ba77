//! Per-seed experiment pipelines. Each returns typed results so the
//! acceptance suite can assert on them directly; artifacts go to a [`Sink`].

use anyhow::{bail, Context, Result};
use ndarray::{s, Array2};
use serde::Serialize;
use teachnet::analysis::{
    alignment, alignment_report, prune_unspecialized, spearman, success_rate, summarize, AlignmentReport, PruneScore,
    StudentRecord,
};
use teachnet::connectivity::{build_path, build_path_with_matching, eval_path, PathEval, UNSPECIALIZED_RATIO};
use teachnet::csvio::render_table;
use teachnet::data::{augment_agnostic, augment_aware, label_with, sample, Dataset};
use teachnet::net::grad_weights_batch;
use teachnet::oracle::finite_diff_grad;
use teachnet::teacher::{active_fractions, build_teacher, top_fanout_norms, TeacherSpec};
use teachnet::train::{init_student, theorem_condition_report, train, AugmentationKind, TrainConfig, TrainOutcome};
use teachnet::vmats::identity_residuals;
use teachnet::{Activation, Network, Role};

use crate::config::{stream_seed, Experiment, ExperimentConfig, Stream};
use crate::output::{opt, Sink};

/// Weight-space tolerance for grouping co-linear students.
pub const COLINEAR_EPS: f64 = 1e-3;
/// Fan-out ratio below which an unaligned student counts as switched off.
pub const FANOUT_RATIO: f64 = 0.05;
/// Best-ρ below which a student counts as unaligned.
pub const UNALIGNED_RHO: f64 = 0.9;
/// Observation fraction for the condition monitors.
pub const CONDITION_KAPPA: f64 = 0.5;
/// Cap on agnostic augmentation size.
pub const AUGMENT_CAP: usize = 10_000_000;

pub fn make_teacher(cfg: &ExperimentConfig, seed: u64) -> Result<Network> {
    let d = cfg.teacher.layer_sizes[0];
    let spec = TeacherSpec {
        seed: stream_seed(seed, Stream::Teacher),
        ..cfg.teacher.clone()
    };
    let cal = sample(
        cfg.data.distribution,
        (100 * d).max(2000),
        d,
        cfg.data.sigma,
        stream_seed(seed, Stream::Calibration),
    )?;
    build_teacher(&spec, &cal).with_context(|| format!("building teacher for seed {seed}"))
}

fn draw(cfg: &ExperimentConfig, teacher: &Network, n: usize, seed: u64, stream: Stream) -> Result<Dataset> {
    let d = teacher.input_dim();
    let x = sample(cfg.data.distribution, n, d, cfg.data.sigma, stream_seed(seed, stream))?;
    Ok(label_with(teacher, &x)?)
}

fn make_student(cfg: &ExperimentConfig, teacher: &Network, factor: usize, seed: u64, stream: Stream) -> Result<Network> {
    Ok(init_student(&cfg.student_sizes(factor), teacher.activation(), stream_seed(seed, stream))?)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed: stream_seed(seed, Stream::Shuffle),
        ..cfg.train.clone()
    }
}

/// Same number of sample visits for every dataset size; only the final
/// epoch is recorded.
fn budget_config(cfg: &ExperimentConfig, seed: u64, len: usize) -> TrainConfig {
    let epochs = cfg.data.visit_budget.div_ceil(len).max(1);
    TrainConfig {
        epochs,
        record_every: epochs,
        stop_when_g1_below: None,
        ..train_config(cfg, seed)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn write_alignment_rows(sink: &Sink, name: &str, rows: &[Vec<String>]) -> Result<()> {
    sink.write(None, name, |m| Ok(render_table(m, &AlignmentReport::STUDENT_HEADER, rows)?))
}

fn write_common(sink: &Sink, seed: u64, teacher: &Network, out: &TrainOutcome, report: &AlignmentReport, eval: &Dataset) -> Result<()> {
    sink.write(Some(seed), "trace.csv", |m| Ok(out.trace.to_csv(m)?))?;
    sink.write(Some(seed), "alignment.csv", |m| Ok(report.to_csv(m, seed)?))?;
    sink.write(Some(seed), "summary.csv", |m| {
        let sum = summarize(&out.student, teacher, eval, 0.95)?;
        let mut rows: Vec<Vec<String>> = sum
            .rho_mean
            .iter()
            .enumerate()
            .map(|(l, v)| vec![format!("rho_mean_{}", l + 1), v.to_string()])
            .collect();
        rows.push(vec!["success_rate".into(), sum.success_rate.to_string()]);
        rows.push(vec!["threshold".into(), sum.threshold.to_string()]);
        rows.push(vec!["unspecialized".into(), sum.unspecialized.len().to_string()]);
        Ok(render_table(m, &["metric", "value"], &rows)?)
    })?;
    sink.write(Some(seed), "teacher.json", |_| Ok(teacher.to_json()?))?;
    sink.write(Some(seed), "student.json", |_| Ok(out.student.to_json()?))?;
    Ok(())
}

// ---------------------------------------------------------------- convergence

#[derive(Debug, Clone, Serialize)]
pub struct PruneOutcome {
    pub threshold: f64,
    pub removed: Vec<usize>,
    pub eval_before: f64,
    pub eval_after: f64,
    pub rel_change: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRun {
    pub seed: u64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub g1_sup: f64,
    pub eval_loss: f64,
    pub teacher_best_rho: Vec<f64>,
    pub students: Vec<StudentRecord>,
    pub max_fanout: f64,
    /// Unaligned students whose own fan-out is not small.
    pub literal_violators: Vec<usize>,
    /// Unaligned students that are neither dead nor cancelled by co-linear
    /// partners.
    pub conformant_violators: Vec<usize>,
    pub prune: PruneOutcome,
}

impl ConvergenceRun {
    pub fn teachers_recovered(&self, rho: f64) -> bool {
        self.teacher_best_rho.iter().all(|&r| r > rho)
    }
}

/// Unaligned students whose co-linear group carries fan-out. Students that
/// are active on none or all of the training data are skipped: their
/// gradient vanishes identically or they fold into the linear part.
pub fn conformant_violators(student: &Network, report: &AlignmentReport, train_data: &Dataset, max_fanout: f64) -> Result<Vec<usize>> {
    let af = active_fractions(student, train_data)?;
    let w1 = student.weight(1);
    let w2 = student.weight(2);
    let d = student.input_dim();
    let n = student.width(1);
    let norm = |k: usize| {
        let w = w1.slice(s![..d, k]);
        w.dot(&w).sqrt()
    };
    let mut out = Vec::new();
    #[allow(clippy::needless_range_loop)]
    for k in 0..n {
        if report.students[k].best_rho >= UNALIGNED_RHO || af[k] == 0.0 || af[k] == 1.0 {
            continue;
        }
        let mut sum = ndarray::Array1::<f64>::zeros(w2.ncols());
        for k2 in 0..n {
            if alignment(w1.column(k), w1.column(k2))?.is_aligned(COLINEAR_EPS) {
                sum.scaled_add(norm(k2), &w2.row(k2));
            }
        }
        if sum.dot(&sum).sqrt() / norm(k) >= FANOUT_RATIO * max_fanout {
            out.push(k);
        }
    }
    Ok(out)
}

pub fn run_convergence_seed(cfg: &ExperimentConfig, seed: u64, sink: &Sink) -> Result<ConvergenceRun> {
    let teacher = make_teacher(cfg, seed)?;
    let train_data = draw(cfg, &teacher, cfg.data.n_train, seed, Stream::Train)?;
    let eval = draw(cfg, &teacher, cfg.data.n_eval, seed, Stream::Eval)?;
    let student = make_student(cfg, &teacher, cfg.overrealization, seed, Stream::Student)?;
    let out = train(&student, &teacher, &train_data, &eval, &train_config(cfg, seed))?;
    let last = out.trace.last().expect("trace has epoch 0").clone();
    let report = alignment_report(&out.student, &teacher, &eval, 1, cfg.align_eps)?;
    let max_fanout = report.students.iter().map(|s| s.fanout_norm).fold(0.0, f64::max);
    let literal_violators = report
        .students
        .iter()
        .filter(|s| s.best_rho < UNALIGNED_RHO && s.fanout_norm >= FANOUT_RATIO * max_fanout)
        .map(|s| s.student)
        .collect();
    let conformant = conformant_violators(&out.student, &report, &train_data, max_fanout)?;

    let fan: Vec<f64> = report.students.iter().map(|s| s.fanout_norm).collect();
    let threshold = UNSPECIALIZED_RATIO * median(&fan);
    let (pruned, prep) = prune_unspecialized(&out.student, threshold, &eval, PruneScore::FanOut)?;
    let eval_before = eval.loss(&out.student)?;
    let eval_after = eval.loss(&pruned)?;
    let rel_change = if eval_before > 0.0 { (eval_after - eval_before).abs() / eval_before } else { 0.0 };

    write_common(sink, seed, &teacher, &out, &report, &eval)?;
    sink.write(Some(seed), "conditions.csv", |m| {
        let rep = theorem_condition_report(&out.student, &teacher, &train_data, cfg.align_eps, CONDITION_KAPPA, AugmentationKind::Agnostic)?;
        Ok(rep.to_csv(m)?)
    })?;
    Ok(ConvergenceRun {
        seed,
        epochs_run: last.epoch,
        stopped_early: out.stopped_early,
        g1_sup: last.g1_sup,
        eval_loss: last.eval_loss,
        teacher_best_rho: last.teacher_best_rho.clone(),
        students: report.students.clone(),
        max_fanout,
        literal_violators,
        conformant_violators: conformant,
        prune: PruneOutcome {
            threshold,
            removed: prep.removed,
            eval_before,
            eval_after,
            rel_change,
        },
    })
}

// ------------------------------------------------------------- fan-out vs rho

#[derive(Debug, Clone, Serialize)]
pub struct FanoutRun {
    pub seed: u64,
    /// Rank correlation of best-ρ with fan-out norm over student nodes.
    pub spearman: Option<f64>,
    pub rho_mean: f64,
    pub students: Vec<StudentRecord>,
}

pub fn run_fanout_seed(cfg: &ExperimentConfig, seed: u64, sink: &Sink) -> Result<FanoutRun> {
    let teacher = make_teacher(cfg, seed)?;
    let train_data = draw(cfg, &teacher, cfg.data.n_train, seed, Stream::Train)?;
    let eval = draw(cfg, &teacher, cfg.data.n_eval, seed, Stream::Eval)?;
    let student = make_student(cfg, &teacher, cfg.overrealization, seed, Stream::Student)?;
    let out = train(&student, &teacher, &train_data, &eval, &train_config(cfg, seed))?;
    let report = alignment_report(&out.student, &teacher, &eval, 1, cfg.align_eps)?;
    let rho: Vec<f64> = report.students.iter().map(|s| s.best_rho).collect();
    let fan: Vec<f64> = report.students.iter().map(|s| s.fanout_norm).collect();
    write_common(sink, seed, &teacher, &out, &report, &eval)?;
    Ok(FanoutRun {
        seed,
        spearman: spearman(&rho, &fan)?,
        rho_mean: out.trace.last().map_or(0.0, |r| r.rho_mean[0]),
        students: report.students,
    })
}

// ------------------------------------------------------------------ dynamics

#[derive(Debug, Clone, Serialize)]
pub struct DynamicsRun {
    pub seed: u64,
    pub strongest: usize,
    pub weakest: usize,
    /// First epoch at which each teacher's best correlation exceeds the
    /// threshold; `None` if it never does.
    pub crossings: Vec<Option<usize>>,
}

impl DynamicsRun {
    /// The strongest teacher crosses strictly before the weakest; a teacher
    /// that never crosses counts as crossing at infinity.
    pub fn strong_first(&self) -> bool {
        match (self.crossings[self.strongest], self.crossings[self.weakest]) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

pub fn run_dynamics_seed(cfg: &ExperimentConfig, seed: u64, sink: &Sink) -> Result<DynamicsRun> {
    let teacher = make_teacher(cfg, seed)?;
    let train_data = draw(cfg, &teacher, cfg.data.n_train, seed, Stream::Train)?;
    let eval = draw(cfg, &teacher, cfg.data.n_eval, seed, Stream::Eval)?;
    let student = make_student(cfg, &teacher, cfg.overrealization, seed, Stream::Student)?;
    let out = train(&student, &teacher, &train_data, &eval, &train_config(cfg, seed))?;
    let strength = top_fanout_norms(&teacher);
    let by = |better: fn(f64, f64) -> bool| {
        (0..strength.len()).fold(0, |b, j| if better(strength[j], strength[b]) { j } else { b })
    };
    let strongest = by(|a, b| a > b);
    let weakest = by(|a, b| a < b);
    let crossings = (0..strength.len()).map(|j| out.trace.first_epoch_above(j, cfg.rho_threshold)).collect();
    sink.write(Some(seed), "trace.csv", |m| Ok(out.trace.to_csv(m)?))?;
    sink.write(Some(seed), "teacher.json", |_| Ok(teacher.to_json()?))?;
    Ok(DynamicsRun {
        seed,
        strongest,
        weakest,
        crossings,
    })
}

// -------------------------------------------------------- augmentation sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Base,
    Agnostic,
    Aware,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::Agnostic => "agnostic",
            Arm::Aware => "aware",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub n_base: usize,
    pub arm: Arm,
    pub n_samples: usize,
    pub epochs: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub rho_mean: f64,
    pub success_rate: f64,
}

impl SweepRow {
    pub const HEADER: [&'static str; 9] =
        ["seed", "n_base", "arm", "n_samples", "epochs", "train_loss", "eval_loss", "rho_mean", "success_rate"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.n_base.to_string(),
            self.arm.name().to_string(),
            self.n_samples.to_string(),
            self.epochs.to_string(),
            self.train_loss.to_string(),
            self.eval_loss.to_string(),
            self.rho_mean.to_string(),
            self.success_rate.to_string(),
        ]
    }
}

/// Mean eval loss over the rows of one arm at one base size.
pub fn mean_eval(rows: &[SweepRow], n_base: usize, arm: Arm) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.n_base == n_base && r.arm == arm).map(|r| r.eval_loss).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn sweep_row(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &Network,
    student: &Network,
    data: &Dataset,
    eval: &Dataset,
    n_base: usize,
    arm: Arm,
) -> Result<SweepRow> {
    let tc = budget_config(cfg, seed, data.len());
    let out = train(student, teacher, data, eval, &tc)?;
    let r = out.trace.last().expect("final epoch recorded");
    let rho = teachnet::analysis::rho_matrix(&out.student, teacher, eval, 1, Default::default())?;
    Ok(SweepRow {
        seed,
        n_base,
        arm,
        n_samples: data.len(),
        epochs: tc.epochs,
        train_loss: r.train_loss,
        eval_loss: r.eval_loss,
        rho_mean: r.rho_mean[0],
        success_rate: success_rate(&rho, cfg.rho_threshold)?,
    })
}

/// Base, teacher-agnostic and teacher-aware training on nested base sets.
/// Both augmentations start from the identical base samples.
pub fn run_augmentation_seed(cfg: &ExperimentConfig, seed: u64, sink: &Sink) -> Result<Vec<SweepRow>> {
    let teacher = make_teacher(cfg, seed)?;
    let largest = cfg.data.sample_sizes.iter().copied().max().unwrap_or(0);
    let pool = draw(cfg, &teacher, largest, seed, Stream::Train)?;
    let eval = draw(cfg, &teacher, cfg.data.n_eval, seed, Stream::Eval)?;
    let student = make_student(cfg, &teacher, cfg.overrealization, seed, Stream::Student)?;
    let k = teacher.width(1) + student.width(1);
    let (eps, c) = (cfg.data.aug_eps, cfg.data.aug_c);
    let mut rows = Vec::new();
    for &n in &cfg.data.sample_sizes {
        let base = pool.take(n);
        let agnostic = label_with(&teacher, &augment_agnostic(&base, eps, c, k, AUGMENT_CAP)?)?;
        let aware = augment_aware(&base, &teacher, eps, c, k)?;
        for (arm, data) in [(Arm::Base, &base), (Arm::Agnostic, &agnostic), (Arm::Aware, &aware)] {
            rows.push(sweep_row(cfg, seed, &teacher, &student, data, &eval, n, arm)?);
        }
    }
    sink.write(Some(seed), "sweep.csv", |m| {
        Ok(render_table(m, &SweepRow::HEADER, &rows.iter().map(SweepRow::cells).collect::<Vec<_>>())?)
    })?;
    Ok(rows)
}

/// Base-only training across sample sizes.
pub fn run_sample_complexity_seed(cfg: &ExperimentConfig, seed: u64, sink: &Sink) -> Result<Vec<SweepRow>> {
    let teacher = make_teacher(cfg, seed)?;
    let largest = cfg.data.sample_sizes.iter().copied().max().unwrap_or(0);
    let pool = draw(cfg, &teacher, largest, seed, Stream::Train)?;
    let eval = draw(cfg, &teacher, cfg.data.n_eval, seed, Stream::Eval)?;
    let student = make_student(cfg, &teacher, cfg.overrealization, seed, Stream::Student)?;
    let rows = cfg
        .data
        .sample_sizes
        .iter()
        .map(|&n| sweep_row(cfg, seed, &teacher, &student, &pool.take(n), &eval, n, Arm::Base))
        .collect::<Result<Vec<_>>>()?;
    sink.write(Some(seed), "sweep.csv", |m| {
        Ok(render_table(m, &SweepRow::HEADER, &rows.iter().map(SweepRow::cells).collect::<Vec<_>>())?)
    })?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct SuccessRow {
    pub factor: usize,
    pub row: SweepRow,
}

/// Success rate against sample size for every over-realization factor.
pub fn run_success_rate_seed(cfg: &ExperimentConfig, seed: u64, sink: &Sink) -> Result<Vec<SuccessRow>> {
    let teacher = make_teacher(cfg, seed)?;
    let largest = cfg.data.sample_sizes.iter().copied().max().unwrap_or(0);
    let pool = draw(cfg, &teacher, largest, seed, Stream::Train)?;
    let eval = draw(cfg, &teacher, cfg.data.n_eval, seed, Stream::Eval)?;
    let mut rows = Vec::new();
    for &factor in &cfg.factors {
        let student = make_student(cfg, &teacher, factor, seed, Stream::Student)?;
        for &n in &cfg.data.sample_sizes {
            let row = sweep_row(cfg, seed, &teacher, &student, &pool.take(n), &eval, n, Arm::Base)?;
            rows.push(SuccessRow { factor, row });
        }
    }
    sink.write(Some(seed), "sweep.csv", |m| {
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut c = vec![r.factor.to_string()];
                c.extend(r.row.cells());
                c
            })
            .collect();
        let mut header = vec!["factor"];
        header.extend(SweepRow::HEADER);
        Ok(render_table(m, &header, &cells)?)
    })?;
    Ok(rows)
}

// ---------------------------------------------------------------- identities

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub triples: usize,
    /// `(depth, triples, max residual)` per depth.
    pub per_depth: Vec<(usize, usize, f64)>,
    pub max_residual: f64,
    /// Largest `|g_l|` entry seen, to show the residuals are not vacuous.
    pub max_gradient: f64,
}

/// Simple deterministic generator for architecture choices (the weights
/// themselves come from seeded [`Network::random`]).
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next() as usize) % (hi - lo + 1)
    }

    fn unit(&mut self) -> f64 {
        (self.next() as f64) / ((1u64 << 31) as f64) - 1.0
    }
}

fn gaussianish_input(rng: &mut Lcg, d: usize) -> Array2<f64> {
    // sum of uniforms: bounded, symmetric, enough spread to mix gate patterns
    Array2::from_shape_fn((1, d), |_| 1.5 * (rng.unit() + rng.unit() + rng.unit()))
}

/// Residual of the recursive gradient identity over random
/// (student, teacher, input) triples at depths 2..=5. The depth-5 triples
/// use the configured layer sizes.
pub fn verify_identities(cfg: &ExperimentConfig, triples: usize, seed: u64) -> Result<IdentityCheck> {
    let mut rng = Lcg(stream_seed(seed, Stream::Probe));
    let mut per_depth = Vec::new();
    let mut max_gradient: f64 = 0.0;
    let per = triples.div_ceil(4);
    let mut done = 0;
    for depth in 2..=5usize {
        let mut worst: f64 = 0.0;
        let mut count = 0;
        let configured = cfg.teacher.layer_sizes.len() == depth + 1;
        let pairs = if configured { 5 } else { per.div_ceil(5) };
        for p in 0..pairs {
            let (tsizes, ssizes) = if configured {
                (cfg.teacher.layer_sizes.clone(), cfg.student_sizes(cfg.overrealization.max(1)))
            } else {
                let d = rng.range(2, 8);
                let c = rng.range(1, 4);
                let mut t = vec![d];
                let mut st = vec![d];
                for _ in 1..depth {
                    let m = rng.range(1, 6);
                    t.push(m);
                    st.push(m + rng.range(0, 6));
                }
                t.push(c);
                st.push(c);
                (t, st)
            };
            let act = if p % 2 == 0 { Activation::Rectifier } else { Activation::leaky(0.1)? };
            let base = rng.next();
            let teacher = Network::random(Role::Teacher, act, &tsizes, base)?;
            let student = Network::random(Role::Student, act, &ssizes, base ^ 0xabcdef)?;
            let samples = per / pairs + usize::from(p < per % pairs);
            for _ in 0..samples {
                if done >= triples {
                    break;
                }
                let x = gaussianish_input(&mut rng, tsizes[0]);
                for r in identity_residuals(&student, &teacher, x.row(0))? {
                    worst = worst.max(r);
                }
                let sf = student.forward(x.row(0))?;
                let tf = teacher.forward(x.row(0))?;
                for g in student.backward(&sf, tf.output.view())?.grads {
                    max_gradient = g.iter().fold(max_gradient, |m, v| m.max(v.abs()));
                }
                count += 1;
                done += 1;
            }
        }
        per_depth.push((depth, count, worst));
    }
    let max_residual = per_depth.iter().map(|p| p.2).fold(0.0, f64::max);
    Ok(IdentityCheck {
        triples: done,
        per_depth,
        max_residual,
        max_gradient,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub nets: usize,
    pub max_rel_err: f64,
    /// Inputs redrawn because some pre-activation sat too close to a gate.
    pub redrawn_inputs: usize,
}

/// Analytic mean gradient against central differences on small random
/// nets. Inputs are redrawn until every student pre-activation is at least
/// `10 h` away from zero, so no `±h` probe crosses a gate.
pub fn gradient_check(nets: usize, h: f64, seed: u64) -> Result<GradientCheck> {
    if h.is_nan() || h <= 0.0 {
        bail!("finite-difference step must be > 0");
    }
    let margin = 10.0 * h;
    let mut rng = Lcg(stream_seed(seed, Stream::Probe) ^ 0x5eed);
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for i in 0..nets {
        let depth = rng.range(2, 4);
        let d = rng.range(2, 5);
        let c = rng.range(1, 3);
        let mut ts = vec![d];
        let mut ss = vec![d];
        for _ in 1..depth {
            ts.push(rng.range(1, 4));
            ss.push(rng.range(2, 6));
        }
        ts.push(c);
        ss.push(c);
        let act = if i % 2 == 0 { Activation::Rectifier } else { Activation::leaky(0.2)? };
        let base = rng.next();
        let teacher = Network::random(Role::Teacher, act, &ts, base)?;
        let student = Network::random(Role::Student, act, &ss, base ^ 0x1234)?;
        let n = 6;
        let mut inputs = Array2::zeros((n, d));
        for r in 0..n {
            loop {
                let x = gaussianish_input(&mut rng, d);
                let fwd = student.forward(x.row(0))?;
                let clear = fwd.pre[..depth - 1].iter().all(|p| p.iter().all(|v| v.abs() > margin));
                if clear {
                    inputs.row_mut(r).assign(&x.row(0));
                    break;
                }
                redrawn += 1;
            }
        }
        let targets = teacher.forward_batch(&inputs)?.into_output();
        let analytic = grad_weights_batch(&student, &inputs, &targets)?;
        let numeric = finite_diff_grad(&student, &teacher, &inputs, h);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (a, f) in analytic.iter().zip(&numeric) {
            // analytic is the descent direction, i.e. minus the gradient
            diff += (a + f).mapv(|v| v * v).sum();
            na += a.mapv(|v| v * v).sum();
            nn += f.mapv(|v| v * v).sum();
        }
        let scale = f64::max(na, nn).sqrt().max(1e-12);
        worst = worst.max(diff.sqrt() / scale);
    }
    Ok(GradientCheck {
        nets,
        max_rel_err: worst,
        redrawn_inputs: redrawn,
    })
}

// -------------------------------------------------------------- connectivity

#[derive(Debug, Clone, Serialize)]
pub struct PathSummary {
    pub segments: usize,
    pub endpoint_loss: f64,
    pub path_max: f64,
    pub straight_max: f64,
    pub max_output_deviation: f64,
}

impl From<&PathEval> for PathSummary {
    fn from(e: &PathEval) -> Self {
        PathSummary {
            segments: e.points.iter().map(|p| p.segment + 1).max().unwrap_or(0),
            endpoint_loss: e.endpoint_loss,
            path_max: e.path_max,
            straight_max: e.straight_max,
            max_output_deviation: e.max_output_deviation.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConnectivityRun {
    pub seed: u64,
    pub exact: PathSummary,
    /// Trained endpoints; the error text when no path could be built.
    pub trained: std::result::Result<PathSummary, String>,
}

/// Student holding teacher node `j` in `slots[j]`, spare slots with the
/// incoming weights of `spares` and zero fan-out.
pub fn exact_student(teacher: &Network, spares: &Network, slots: &[usize]) -> Result<Network> {
    let mut w1 = spares.weight(1).clone();
    let mut w2 = Array2::zeros(spares.weight(2).dim());
    for (j, &k) in slots.iter().enumerate() {
        w1.column_mut(k).assign(&teacher.weight(1).column(j));
        w2.row_mut(k).assign(&teacher.weight(2).row(j));
    }
    let (mt, ns) = (teacher.width(1), spares.width(1));
    w2.row_mut(ns).assign(&teacher.weight(2).row(mt));
    Ok(Network::new(Role::Student, teacher.activation(), vec![w1, w2])?)
}

pub const POINTS_PER_SEGMENT: usize = 11;

pub fn run_connectivity_seed(cfg: &ExperimentConfig, seed: u64, sink: &Sink) -> Result<ConnectivityRun> {
    if cfg.teacher.layer_sizes.len() != 3 {
        bail!("connectivity needs a 2-layer teacher");
    }
    let teacher = make_teacher(cfg, seed)?;
    let eval = draw(cfg, &teacher, cfg.data.n_eval, seed, Stream::Eval)?;
    let sizes = cfg.student_sizes(cfg.overrealization);
    let (m, n) = (teacher.width(1), sizes[1]);
    if n <= m {
        bail!("connectivity needs spare student slots");
    }

    // analytic endpoints: same teacher units in different slots
    let spare_a = Network::random(Role::Student, teacher.activation(), &sizes, stream_seed(seed, Stream::Student))?;
    let spare_b = Network::random(Role::Student, teacher.activation(), &sizes, stream_seed(seed, Stream::SecondStudent))?;
    let slot_a: Vec<usize> = (0..m).collect();
    let offset = (seed as usize) % n;
    let slot_b: Vec<usize> = (0..m).map(|j| (n - 1 - j + offset) % n).collect();
    let a = exact_student(&teacher, &spare_a, &slot_a)?;
    let b = exact_student(&teacher, &spare_b, &slot_b)?;
    let exact_path = build_path_with_matching(&a, &b, &slot_a, &slot_b)?;
    let exact_eval = eval_path(&exact_path, &eval, POINTS_PER_SEGMENT)?;
    sink.write(Some(seed), "exact_path.csv", |meta| Ok(exact_eval.to_csv(meta)?))?;

    // trained endpoints from two student seeds
    let train_data = draw(cfg, &teacher, cfg.data.n_train, seed, Stream::Train)?;
    let tc = train_config(cfg, seed);
    let endpoint = |stream| -> Result<std::result::Result<Network, String>> {
        match train(&make_student(cfg, &teacher, cfg.overrealization, seed, stream)?, &teacher, &train_data, &eval, &tc) {
            Ok(out) => Ok(Ok(out.student)),
            Err(e @ teachnet::error::Error::Diverged { .. }) => Ok(Err(e.to_string())),
            Err(e) => Err(e.into()),
        }
    };
    let trained = match (endpoint(Stream::Student)?, endpoint(Stream::SecondStudent)?) {
        (Ok(sa), Ok(sb)) => {
            let ra = alignment_report(&sa, &teacher, &eval, 1, cfg.align_eps)?;
            let rb = alignment_report(&sb, &teacher, &eval, 1, cfg.align_eps)?;
            match build_path(&sa, &sb, &ra, &rb) {
                Ok(path) => {
                    let e = eval_path(&path, &eval, POINTS_PER_SEGMENT)?;
                    sink.write(Some(seed), "path.csv", |meta| Ok(e.to_csv(meta)?))?;
                    sink.write(Some(seed), "path.json", |_| Ok(path.to_json()?))?;
                    Ok(PathSummary::from(&e))
                }
                Err(err) => Err(err.to_string()),
            }
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    Ok(ConnectivityRun {
        seed,
        exact: PathSummary::from(&exact_eval),
        trained,
    })
}

// ------------------------------------------------------------------ dispatch

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "experiment", content = "runs", rename_all = "kebab-case")]
pub enum Outcome {
    FigConvergence(Vec<ConvergenceRun>),
    FigFanoutVsRho(Vec<FanoutRun>),
    FigSampleComplexity(Vec<SweepRow>),
    FigSuccessRate(Vec<SuccessRow>),
    FigDynamics(Vec<DynamicsRun>),
    FigAwareVsAgnostic(Vec<SweepRow>),
    VerifyIdentities { identities: IdentityCheck, gradients: GradientCheck },
    Connectivity(Vec<ConnectivityRun>),
}

fn per_seed<T>(cfg: &ExperimentConfig, sink: &Sink, f: impl Fn(&ExperimentConfig, u64, &Sink) -> Result<T>) -> Result<Vec<T>> {
    cfg.seeds
        .iter()
        .map(|&s| f(cfg, s, sink).with_context(|| format!("{} seed {s}", cfg.experiment)))
        .collect()
}

/// Runs every seed of the experiment and writes the aggregates.
pub fn run(cfg: &ExperimentConfig, sink: &Sink) -> Result<Outcome> {
    cfg.validate()?;
    sink.flag_partial("run in progress or failed");
    let outcome = match cfg.experiment {
        Experiment::FigConvergence => Outcome::FigConvergence(per_seed(cfg, sink, run_convergence_seed)?),
        Experiment::FigFanoutVsRho => Outcome::FigFanoutVsRho(per_seed(cfg, sink, run_fanout_seed)?),
        Experiment::FigDynamics => Outcome::FigDynamics(per_seed(cfg, sink, run_dynamics_seed)?),
        Experiment::FigAwareVsAgnostic => {
            Outcome::FigAwareVsAgnostic(per_seed(cfg, sink, run_augmentation_seed)?.into_iter().flatten().collect())
        }
        Experiment::FigSampleComplexity => {
            Outcome::FigSampleComplexity(per_seed(cfg, sink, run_sample_complexity_seed)?.into_iter().flatten().collect())
        }
        Experiment::FigSuccessRate => {
            Outcome::FigSuccessRate(per_seed(cfg, sink, run_success_rate_seed)?.into_iter().flatten().collect())
        }
        Experiment::VerifyIdentities => Outcome::VerifyIdentities {
            identities: verify_identities(cfg, 1000, cfg.seeds[0])?,
            gradients: gradient_check(100, 1e-5, cfg.seeds[0])?,
        },
        Experiment::Connectivity => Outcome::Connectivity(per_seed(cfg, sink, run_connectivity_seed)?),
    };
    write_aggregate(&outcome, sink)?;
    sink.clear_partial();
    Ok(outcome)
}

fn write_aggregate(outcome: &Outcome, sink: &Sink) -> Result<()> {
    let (header, rows): (Vec<&str>, Vec<Vec<String>>) = match outcome {
        Outcome::FigConvergence(runs) => {
            let align: Vec<Vec<String>> = runs
                .iter()
                .flat_map(|r| {
                    r.students.iter().map(move |s| {
                        vec![
                            r.seed.to_string(),
                            "1".into(),
                            s.student.to_string(),
                            s.best_teacher.to_string(),
                            s.best_rho.to_string(),
                            s.fanout_norm.to_string(),
                        ]
                    })
                })
                .collect();
            write_alignment_rows(sink, "alignment.csv", &align)?;
            (
                vec![
                    "seed", "epochs", "stopped_early", "g1_sup", "eval_loss", "min_teacher_rho", "literal_violators",
                    "conformant_violators", "pruned", "prune_rel_change",
                ],
                runs.iter()
                    .map(|r| {
                        vec![
                            r.seed.to_string(),
                            r.epochs_run.to_string(),
                            r.stopped_early.to_string(),
                            r.g1_sup.to_string(),
                            r.eval_loss.to_string(),
                            r.teacher_best_rho.iter().copied().fold(f64::INFINITY, f64::min).to_string(),
                            r.literal_violators.len().to_string(),
                            r.conformant_violators.len().to_string(),
                            r.prune.removed.len().to_string(),
                            r.prune.rel_change.to_string(),
                        ]
                    })
                    .collect(),
            )
        }
        Outcome::FigFanoutVsRho(runs) => {
            let align: Vec<Vec<String>> = runs
                .iter()
                .flat_map(|r| {
                    r.students.iter().map(move |s| {
                        vec![
                            r.seed.to_string(),
                            "1".into(),
                            s.student.to_string(),
                            s.best_teacher.to_string(),
                            s.best_rho.to_string(),
                            s.fanout_norm.to_string(),
                        ]
                    })
                })
                .collect();
            write_alignment_rows(sink, "alignment.csv", &align)?;
            (
                vec!["seed", "spearman", "rho_mean"],
                runs.iter()
                    .map(|r| vec![r.seed.to_string(), opt(r.spearman), r.rho_mean.to_string()])
                    .collect(),
            )
        }
        Outcome::FigDynamics(runs) => (
            vec!["seed", "strongest", "weakest", "strong_epoch", "weak_epoch", "strong_first"],
            runs.iter()
                .map(|r| {
                    vec![
                        r.seed.to_string(),
                        r.strongest.to_string(),
                        r.weakest.to_string(),
                        opt(r.crossings[r.strongest]),
                        opt(r.crossings[r.weakest]),
                        r.strong_first().to_string(),
                    ]
                })
                .collect(),
        ),
        Outcome::FigAwareVsAgnostic(rows) | Outcome::FigSampleComplexity(rows) => {
            (SweepRow::HEADER.to_vec(), rows.iter().map(SweepRow::cells).collect())
        }
        Outcome::FigSuccessRate(rows) => {
            let mut h = vec!["factor"];
            h.extend(SweepRow::HEADER);
            (
                h,
                rows.iter()
                    .map(|r| {
                        let mut c = vec![r.factor.to_string()];
                        c.extend(r.row.cells());
                        c
                    })
                    .collect(),
            )
        }
        Outcome::VerifyIdentities { identities, gradients } => {
            let mut rows: Vec<Vec<String>> = identities
                .per_depth
                .iter()
                .map(|(d, n, r)| vec!["identity".into(), d.to_string(), n.to_string(), r.to_string()])
                .collect();
            rows.push(vec![
                "gradient".into(),
                "mixed".into(),
                gradients.nets.to_string(),
                gradients.max_rel_err.to_string(),
            ]);
            (vec!["check", "depth", "cases", "max_error"], rows)
        }
        Outcome::Connectivity(runs) => (
            vec![
                "seed", "exact_endpoint", "exact_path_max", "exact_straight_max", "trained_endpoint", "trained_path_max",
                "trained_straight_max", "trained_error",
            ],
            runs.iter()
                .map(|r| {
                    let (te, tp, ts, err) = match &r.trained {
                        Ok(p) => (p.endpoint_loss.to_string(), p.path_max.to_string(), p.straight_max.to_string(), String::new()),
                        Err(e) => ("none".into(), "none".into(), "none".into(), e.clone()),
                    };
                    vec![
                        r.seed.to_string(),
                        r.exact.endpoint_loss.to_string(),
                        r.exact.path_max.to_string(),
                        r.exact.straight_max.to_string(),
                        te,
                        tp,
                        ts,
                        err,
                    ]
                })
                .collect(),
        ),
    };
    sink.write(None, "aggregate.csv", |m| Ok(render_table(m, &header, &rows)?))
}

/// One human-readable line per experiment outcome.
pub fn summary_line(outcome: &Outcome) -> String {
    match outcome {
        Outcome::FigConvergence(runs) => {
            let rec = runs.iter().filter(|r| r.teachers_recovered(0.99)).count();
            let lit = runs.iter().filter(|r| r.literal_violators.is_empty()).count();
            let conf = runs.iter().filter(|r| r.conformant_violators.is_empty()).count();
            format!(
                "fig-convergence: teachers recovered {rec}/{n}, unaligned fan-outs small {lit}/{n} (co-linear/dead aware {conf}/{n})",
                n = runs.len()
            )
        }
        Outcome::FigFanoutVsRho(runs) => {
            let pos = runs.iter().filter(|r| r.spearman.is_some_and(|v| v > 0.0)).count();
            format!("fig-fanout-vs-rho: positive rank correlation in {pos}/{}", runs.len())
        }
        Outcome::FigDynamics(runs) => {
            let ok = runs.iter().filter(|r| r.strong_first()).count();
            format!("fig-dynamics: strongest teacher specializes first in {ok}/{}", runs.len())
        }
        Outcome::FigAwareVsAgnostic(rows) => {
            let mut sizes: Vec<usize> = rows.iter().map(|r| r.n_base).collect();
            sizes.sort_unstable();
            sizes.dedup();
            let parts: Vec<String> = sizes
                .iter()
                .map(|&n| {
                    format!(
                        "N={n}: base {:.4} agnostic {:.4} aware {:.4}",
                        mean_eval(rows, n, Arm::Base).unwrap_or(f64::NAN),
                        mean_eval(rows, n, Arm::Agnostic).unwrap_or(f64::NAN),
                        mean_eval(rows, n, Arm::Aware).unwrap_or(f64::NAN)
                    )
                })
                .collect();
            format!("fig-aware-vs-agnostic: mean eval loss {}", parts.join("; "))
        }
        Outcome::FigSampleComplexity(rows) => {
            let mut sizes: Vec<usize> = rows.iter().map(|r| r.n_base).collect();
            sizes.sort_unstable();
            sizes.dedup();
            let parts: Vec<String> = sizes
                .iter()
                .map(|&n| format!("N={n}: {:.4}", mean_eval(rows, n, Arm::Base).unwrap_or(f64::NAN)))
                .collect();
            format!("fig-sample-complexity: mean eval loss {}", parts.join("; "))
        }
        Outcome::FigSuccessRate(rows) => {
            let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.factor, r.row.n_base)).collect();
            keys.sort_unstable();
            keys.dedup();
            let parts: Vec<String> = keys
                .iter()
                .map(|&(f, n)| {
                    let v: Vec<f64> = rows.iter().filter(|r| r.factor == f && r.row.n_base == n).map(|r| r.row.success_rate).collect();
                    format!("{f}x N={n}: {:.2}", v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            format!("fig-success-rate: {}", parts.join("; "))
        }
        Outcome::VerifyIdentities { identities, gradients } => format!(
            "verify-identities: {} triples, max identity residual {:.3e} (max |g| {:.3e}); {} nets, max gradient relative error {:.3e}",
            identities.triples, identities.max_residual, identities.max_gradient, gradients.nets, gradients.max_rel_err
        ),
        Outcome::Connectivity(runs) => {
            let ok = runs.iter().filter(|r| r.trained.as_ref().is_ok_and(|p| p.path_max < p.straight_max)).count();
            let worst = runs.iter().map(|r| r.exact.path_max - r.exact.endpoint_loss).fold(0.0, f64::max);
            format!(
                "connectivity: exact path excess {worst:.3e}; trained path below straight line in {ok}/{}",
                runs.len()
            )
        }
    }
}
