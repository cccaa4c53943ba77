//! Specialization metrics: weight alignment, activation correlation,
//! observers, fan-out norms and pruning of unspecialized nodes.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::csvio::{render_table, MetaLine};
use crate::data::{projections, Dataset};
use crate::error::{check_dim, Error, Result};
use crate::net::Network;
use crate::vmats::v_chain;

pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.95;

/// Geometry between two nodes after scaling both to regular form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Alignment {
    pub sin_theta: f64,
    pub cos_theta: f64,
    pub bias_gap: f64,
}

impl Alignment {
    /// Same half-space, small angle and small bias gap.
    pub fn is_aligned(&self, eps: f64) -> bool {
        self.sin_theta <= eps && self.cos_theta > 0.0 && self.bias_gap <= eps
    }
}

fn split_regular(w: ArrayView1<f64>) -> Result<(Array1<f64>, f64)> {
    let n = w.len() - 1;
    let dir = w.slice(s![..n]);
    let norm = dir.dot(&dir).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroDirection);
    }
    Ok((&dir / norm, w[n] / norm))
}

/// Alignment between augmented weights `[w̃; b]`.
pub fn alignment(w_j: ArrayView1<f64>, w_k: ArrayView1<f64>) -> Result<Alignment> {
    check_dim("alignment", w_j.len(), w_k.len())?;
    if w_j.len() < 2 {
        return Err(Error::ZeroDirection);
    }
    let (uj, bj) = split_regular(w_j)?;
    let (uk, bk) = split_regular(w_k)?;
    let cos = uj.dot(&uk).clamp(-1.0, 1.0);
    let perp = &uj - &(&uk * cos);
    let sin = perp.dot(&perp).sqrt().min(1.0);
    Ok(Alignment {
        sin_theta: sin,
        cos_theta: cos,
        bias_gap: (bj - bk).abs(),
    })
}

/// Unit `ũ_k ⊥ w̃_j` with `w̃_k^T ũ_k = sin θ̃_jk`, for regular inputs.
pub fn hyperplane_projection(w_j: ArrayView1<f64>, w_k: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_dim("hyperplane_projection", w_j.len(), w_k.len())?;
    let (uj, _) = split_regular(w_j)?;
    let (uk, _) = split_regular(w_k)?;
    let perp = &uk - &(&uj * uj.dot(&uk));
    let sin = perp.dot(&perp).sqrt();
    if sin < 1e-12 {
        return Err(Error::CoLinear);
    }
    Ok(perp / sin)
}

/// How activation vectors are normalized before correlating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Centering {
    /// Pearson correlation.
    #[default]
    MeanCentered,
    /// Cosine similarity of raw activations.
    Raw,
}

fn normalized_columns(acts: ArrayView2<f64>, centering: Centering) -> Array2<f64> {
    let mut out = acts.to_owned();
    if centering == Centering::MeanCentered {
        if let Some(mean) = acts.mean_axis(Axis(0)) {
            out -= &mean;
        }
    }
    for (mut col, raw) in out.columns_mut().into_iter().zip(acts.columns()) {
        let norm = col.dot(&col).sqrt();
        let scale = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())) * (raw.len() as f64).sqrt();
        if norm == 0.0 || norm <= 1e-12 * scale {
            // dead node: constant activation
            col.fill(0.0);
        } else {
            col /= norm;
        }
    }
    out
}

/// `ρ_jk` between teacher node `j` and student node `k` at hidden layer
/// `layer`, computed over the evaluation inputs. Rows are teacher nodes.
pub fn rho_matrix(
    student: &Network,
    teacher: &Network,
    eval: &Dataset,
    layer: usize,
    centering: Centering,
) -> Result<Array2<f64>> {
    if eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let depth = student.depth();
    if layer == 0 || layer >= depth || teacher.depth() != depth {
        return Err(Error::LayerIndex { layer, depth: depth - 1 });
    }
    let sf = student.forward_batch(&eval.inputs)?;
    let tf = teacher.forward_batch(&eval.inputs)?;
    Ok(rho_from_activations(tf.hidden(layer), sf.hidden(layer), centering))
}

pub fn rho_from_activations(teacher_acts: ArrayView2<f64>, student_acts: ArrayView2<f64>, centering: Centering) -> Array2<f64> {
    let t = normalized_columns(teacher_acts, centering);
    let st = normalized_columns(student_acts, centering);
    t.t().dot(&st).mapv(|v| v.clamp(-1.0, 1.0))
}

/// Best student and its correlation for every teacher node (row).
pub fn best_matches(rho: &Array2<f64>) -> Vec<(usize, f64)> {
    rho.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
        })
        .collect()
}

/// Mean over teacher nodes of the best correlation with any student node.
pub fn rho_mean(rho: &Array2<f64>) -> Result<f64> {
    if rho.is_empty() {
        return Err(Error::InvalidArgument("empty correlation matrix".into()));
    }
    let best = best_matches(rho);
    Ok(best.iter().map(|b| b.1).sum::<f64>() / best.len() as f64)
}

/// Fraction of teacher nodes whose best correlation exceeds `threshold`.
pub fn success_rate(rho: &Array2<f64>, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if rho.is_empty() {
        return Err(Error::InvalidArgument("empty correlation matrix".into()));
    }
    let best = best_matches(rho);
    Ok(best.iter().filter(|b| b.1 > threshold).count() as f64 / best.len() as f64)
}

/// Observation counts between first-layer teacher bands and student active
/// regions.
/// Ranks with ties sharing their mean rank (1-based).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Dimension { context: "spearman", expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Ok(None);
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some(sab / (saa * sbb).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObserverStats {
    pub eps: f64,
    pub kappa: f64,
    /// `N_D[I_j(eps)]` per teacher node.
    pub band_counts: Vec<usize>,
    /// `N_D[I_j(eps) ∩ E_k]`, teacher rows by student columns.
    pub observed_counts: Array2<usize>,
}

impl ObserverStats {
    /// Student `k` observes teacher `j`. Empty bands are never observed.
    pub fn observes(&self, j: usize, k: usize) -> bool {
        let band = self.band_counts[j];
        band > 0 && self.observed_counts[[j, k]] as f64 >= self.kappa * band as f64
    }
}

pub fn observer_stats(student: &Network, teacher: &Network, data: &Dataset, eps: f64, kappa: f64) -> Result<ObserverStats> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let tw = teacher.weight(1);
    let sw = student.weight(1);
    let active: Vec<Vec<bool>> = sw
        .columns()
        .into_iter()
        .map(|c| Ok(projections(data, c)?.iter().map(|&p| p > 0.0).collect()))
        .collect::<Result<_>>()?;
    let m = tw.ncols();
    let n = sw.ncols();
    let mut band_counts = vec![0; m];
    let mut observed = Array2::zeros((m, n));
    for (j, col) in tw.columns().into_iter().enumerate() {
        let p = projections(data, col)?;
        for (i, _) in p.iter().enumerate().filter(|(_, v)| v.abs() <= eps) {
            band_counts[j] += 1;
            for k in 0..n {
                if active[k][i] {
                    observed[[j, k]] += 1;
                }
            }
        }
    }
    Ok(ObserverStats {
        eps,
        kappa,
        band_counts,
        observed_counts: observed,
    })
}

/// Norm of each node's column of `V_layer`. For the top hidden layer this is
/// the row norm of the top weight matrix and no reference input is needed.
pub fn fanout_norms(net: &Network, layer: usize, reference: Option<ArrayView1<f64>>) -> Result<Vec<f64>> {
    let depth = net.depth();
    if layer == 0 || layer >= depth {
        return Err(Error::LayerIndex { layer, depth: depth - 1 });
    }
    if layer == depth - 1 {
        let w = net.weight(depth);
        return Ok(w
            .slice(s![..w.nrows() - 1, ..])
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect());
    }
    let x = reference.ok_or_else(|| Error::InvalidArgument("deep fan-out norms need a reference input".into()))?;
    let fwd = net.forward(x)?;
    let chain = v_chain(net, &fwd)?;
    let v = &chain[layer - 1];
    Ok((0..net.width(layer))
        .map(|k| {
            let c = v.column(k);
            c.dot(&c).sqrt()
        })
        .collect())
}

/// How a hidden node is scored for pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum PruneScore {
    /// `‖v_k‖ · ‖w_k‖`.
    #[default]
    FanOutTimesIncoming,
    /// `‖v_k‖` alone.
    FanOut,
}

pub fn prune_scores(student: &Network, score: PruneScore) -> Result<Vec<f64>> {
    if student.depth() != 2 {
        return Err(Error::InvalidArgument("pruning needs a 2-layer student".into()));
    }
    let fan = fanout_norms(student, 1, None)?;
    Ok(match score {
        PruneScore::FanOut => fan,
        PruneScore::FanOutTimesIncoming => fan
            .iter()
            .zip(student.weight(1).columns())
            .map(|(f, w)| f * w.dot(&w).sqrt())
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub removed: Vec<usize>,
    pub kept: Vec<usize>,
    /// Max over evaluation samples of the output change in ∞-norm.
    pub output_delta: f64,
}

/// Removes hidden nodes whose score falls below `threshold`.
pub fn prune_unspecialized(
    student: &Network,
    threshold: f64,
    eval: &Dataset,
    score: PruneScore,
) -> Result<(Network, PruneReport)> {
    let scores = prune_scores(student, score)?;
    let (kept, removed): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&k| scores[k] >= threshold);
    if kept.is_empty() {
        return Err(Error::PruneAll);
    }
    let w1 = student.weight(1).select(Axis(1), &kept);
    let mut rows = kept.clone();
    rows.push(student.weight(2).nrows() - 1);
    let w2 = student.weight(2).select(Axis(0), &rows);
    let pruned = Network::new(student.role(), student.activation(), vec![w1, w2])?;
    let mut delta: f64 = 0.0;
    for x in eval.inputs.rows() {
        let a = student.output(x)?;
        let b = pruned.output(x)?;
        for (u, v) in a.iter().zip(b.iter()) {
            delta = delta.max((u - v).abs());
        }
    }
    Ok((
        pruned,
        PruneReport {
            removed,
            kept,
            output_delta: delta,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub teacher: usize,
    pub student: usize,
    /// Weight-space geometry; only defined at the first layer, where both
    /// nodes live in input space.
    pub sin_theta: Option<f64>,
    pub bias_gap: Option<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherMatch {
    pub teacher: usize,
    pub best_student: usize,
    pub best_rho: f64,
    /// Some student is `eps`-aligned with this teacher node.
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudentRecord {
    pub student: usize,
    pub best_teacher: usize,
    pub best_rho: f64,
    pub fanout_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub layer: usize,
    pub eps: f64,
    pub pairs: Vec<PairRecord>,
    pub teachers: Vec<TeacherMatch>,
    pub students: Vec<StudentRecord>,
    #[serde(skip)]
    pub rho: Array2<f64>,
}

pub fn alignment_report(student: &Network, teacher: &Network, eval: &Dataset, layer: usize, eps: f64) -> Result<AlignmentReport> {
    let rho = rho_matrix(student, teacher, eval, layer, Centering::MeanCentered)?;
    let (m, n) = rho.dim();
    let reference = eval.sample(0);
    let fan = fanout_norms(student, layer, Some(reference))?;
    let mut pairs = Vec::with_capacity(m * n);
    let mut aligned = vec![false; m];
    for j in 0..m {
        for k in 0..n {
            let geo = if layer == 1 {
                alignment(teacher.weight(1).column(j), student.weight(1).column(k)).ok()
            } else {
                None
            };
            if geo.is_some_and(|g| g.is_aligned(eps)) {
                aligned[j] = true;
            }
            pairs.push(PairRecord {
                teacher: j,
                student: k,
                sin_theta: geo.map(|g| g.sin_theta),
                bias_gap: geo.map(|g| g.bias_gap),
                rho: rho[[j, k]],
            });
        }
    }
    let teachers = best_matches(&rho)
        .into_iter()
        .enumerate()
        .map(|(j, (k, r))| TeacherMatch {
            teacher: j,
            best_student: k,
            best_rho: r,
            aligned: aligned[j],
        })
        .collect();
    let students = (0..n)
        .map(|k| {
            let col = rho.column(k);
            let (bj, br) = col
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            StudentRecord {
                student: k,
                best_teacher: bj,
                best_rho: br,
                fanout_norm: fan[k],
            }
        })
        .collect();
    Ok(AlignmentReport {
        layer,
        eps,
        pairs,
        teachers,
        students,
        rho,
    })
}

impl AlignmentReport {
    pub const STUDENT_HEADER: [&'static str; 6] = ["seed", "layer", "student", "best_teacher", "best_rho", "fanout_norm"];

    pub fn student_rows(&self, seed: u64) -> Vec<Vec<String>> {
        self.students
            .iter()
            .map(|s| {
                vec![
                    seed.to_string(),
                    self.layer.to_string(),
                    s.student.to_string(),
                    s.best_teacher.to_string(),
                    s.best_rho.to_string(),
                    s.fanout_norm.to_string(),
                ]
            })
            .collect()
    }

    /// One row per student node.
    pub fn to_csv(&self, meta: &MetaLine, seed: u64) -> Result<String> {
        render_table(meta, &Self::STUDENT_HEADER, &self.student_rows(seed))
    }

    /// One row per (teacher, student) pair.
    pub fn pairs_csv(&self, meta: &MetaLine) -> Result<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let rows: Vec<Vec<String>> = self
            .pairs
            .iter()
            .map(|p| {
                vec![
                    p.teacher.to_string(),
                    p.student.to_string(),
                    opt(p.sin_theta),
                    opt(p.bias_gap),
                    p.rho.to_string(),
                ]
            })
            .collect();
        render_table(meta, &["teacher", "student", "sin_theta", "bias_gap", "rho"], &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecializationSummary {
    /// `ρ_mean` at hidden layers `1..L-1`.
    pub rho_mean: Vec<f64>,
    pub threshold: f64,
    /// First-layer success rate at `threshold`.
    pub success_rate: f64,
    /// First-layer students whose best correlation is at most `threshold`,
    /// with their fan-out norms.
    pub unspecialized: Vec<(usize, f64)>,
}

pub fn summarize(student: &Network, teacher: &Network, eval: &Dataset, threshold: f64) -> Result<SpecializationSummary> {
    let depth = student.depth();
    let mut rho_means = Vec::with_capacity(depth - 1);
    let mut first = None;
    for layer in 1..depth {
        let rho = rho_matrix(student, teacher, eval, layer, Centering::MeanCentered)?;
        rho_means.push(rho_mean(&rho)?);
        if layer == 1 {
            first = Some(rho);
        }
    }
    let rho = first.ok_or_else(|| Error::InvalidArgument("network has no hidden layer".into()))?;
    let fan = fanout_norms(student, 1, Some(eval.sample(0)))?;
    let unspecialized = rho
        .columns()
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) <= threshold)
        .map(|(k, _)| (k, fan[k]))
        .collect();
    Ok(SpecializationSummary {
        rho_mean: rho_means,
        threshold,
        success_rate: success_rate(&rho, threshold)?,
        unspecialized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]).unwrap(), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), None);
        // ties: ranks [1.5, 1.5, 3] vs [1, 2, 3]
        let r = spearman(&[0.0, 0.0, 5.0], &[1.0, 2.0, 3.0]).unwrap().unwrap();
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0, 2.0]).is_err());
    }
    use crate::data::sample_gaussian;
    use crate::net::{Activation, Role};
    use crate::oracle::{naive_counts, CountQuery};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_layer(w1: Array2<f64>, w2: Array2<f64>, role: Role) -> Network {
        Network::new(role, Activation::Rectifier, vec![w1, w2]).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let w = array![0.6, 0.8, 0.3];
        let a = alignment(w.view(), w.view()).unwrap();
        assert_eq!((a.sin_theta, a.bias_gap), (0.0, 0.0));
        let o = alignment(array![1.0, 0.0, 0.0].view(), array![0.0, 2.0, 0.0].view()).unwrap();
        assert!((o.sin_theta - 1.0).abs() < 1e-15);
        let scaled = &w * 3.0;
        let a = alignment(w.view(), scaled.view()).unwrap();
        assert!(a.sin_theta < 1e-12 && a.bias_gap < 1e-12);
        assert!(a.is_aligned(1e-6));
        let flipped = &w * -1.0;
        assert!(!alignment(w.view(), flipped.view()).unwrap().is_aligned(0.5));
        assert!(matches!(alignment(array![0.0, 0.0, 1.0].view(), w.view()), Err(Error::ZeroDirection)));
    }

    proptest! {
        #[test]
        fn alignment_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            prop_assume!(a[..3].iter().map(|v| v * v).sum::<f64>() > 1e-3);
            prop_assume!(b[..3].iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let x = alignment(ArrayView1::from(&a), ArrayView1::from(&b)).unwrap();
            let y = alignment(ArrayView1::from(&b), ArrayView1::from(&a)).unwrap();
            prop_assert!((x.sin_theta - y.sin_theta).abs() < 1e-12);
            prop_assert!((x.cos_theta - y.cos_theta).abs() < 1e-12);
            prop_assert!((x.bias_gap - y.bias_gap).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x.sin_theta));
        }

        #[test]
        fn projection_orthonormal(a in proptest::collection::vec(-5.0f64..5.0, 5), b in proptest::collection::vec(-5.0f64..5.0, 5)) {
            let na = a[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(na > 1e-2 && nb > 1e-2);
            let wj: Array1<f64> = Array1::from(a.clone()) / na;
            let wk: Array1<f64> = Array1::from(b.clone()) / nb;
            let geo = alignment(wj.view(), wk.view()).unwrap();
            prop_assume!(geo.sin_theta > 1e-6);
            let u = hyperplane_projection(wj.view(), wk.view()).unwrap();
            let dj = wj.slice(s![..4]);
            let dk = wk.slice(s![..4]);
            prop_assert!(u.dot(&dj).abs() < 1e-12);
            prop_assert!((u.dot(&u).sqrt() - 1.0).abs() < 1e-12);
            prop_assert!((dk.dot(&u) - geo.sin_theta).abs() < 1e-12);
        }

        #[test]
        fn rho_invariant_to_balanced_rescale(scale in 0.05f64..20.0, k in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let w1 = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
            let w2 = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
            let s = two_layer(w1.clone(), w2.clone(), Role::Student);
            let t = two_layer(w1.slice(s![.., ..2]).to_owned(), w2.slice(s![1..4, ..]).to_owned(), Role::Teacher);
            let eval = sample_gaussian(300, 2, 3.0, 1).unwrap();
            let before = rho_matrix(&s, &t, &eval, 1, Centering::MeanCentered).unwrap();
            let mut s2 = s.clone();
            s2.weight_mut(1).column_mut(k).mapv_inplace(|v| v * scale);
            s2.weight_mut(2).row_mut(k).mapv_inplace(|v| v / scale);
            let after = rho_matrix(&s2, &t, &eval, 1, Centering::MeanCentered).unwrap();
            for (a, b) in before.iter().zip(after.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projection_orthogonal_and_colinear_cases() {
        let wj = array![1.0, 0.0, 0.5];
        let wk = array![0.0, 1.0, -0.5];
        assert_eq!(hyperplane_projection(wj.view(), wk.view()).unwrap(), array![0.0, 1.0]);
        assert!(matches!(hyperplane_projection(wj.view(), wj.view()), Err(Error::CoLinear)));
    }

    fn teacher_and_copy() -> (Network, Network, Dataset) {
        let w1 = array![[0.6, -0.8, 0.0], [0.8, 0.6, 1.0], [0.5, -1.0, 0.2]];
        let w2 = array![[1.0, 0.5], [-0.7, 0.2], [0.3, 0.3], [0.0, 0.0]];
        let t = two_layer(w1.clone(), w2.clone(), Role::Teacher);
        // student: teacher copy plus a dead node and a zero fan-out node
        let mut sw1 = Array2::zeros((3, 5));
        sw1.slice_mut(s![.., ..3]).assign(&w1);
        sw1.column_mut(3).assign(&array![0.0, 0.0, -1.0]);
        sw1.column_mut(4).assign(&array![0.3, 0.3, 0.1]);
        let mut sw2 = Array2::zeros((6, 2));
        sw2.slice_mut(s![..3, ..]).assign(&w2.slice(s![..3, ..]));
        sw2.row_mut(3).assign(&array![0.4, 0.4]);
        sw2.row_mut(5).assign(&w2.row(3));
        let s = two_layer(sw1, sw2, Role::Student);
        let eval = crate::data::label_with(&t, &sample_gaussian(500, 2, 2.0, 3).unwrap()).unwrap();
        (t, s, eval)
    }

    #[test]
    fn exact_copy_gives_perfect_specialization() {
        let (t, s, eval) = teacher_and_copy();
        let rho = rho_matrix(&s, &t, &eval, 1, Centering::MeanCentered).unwrap();
        for j in 0..3 {
            assert!((rho[[j, j]] - 1.0).abs() < 1e-12);
            assert_eq!(rho[[j, 3]], 0.0); // dead node
        }
        assert!((rho_mean(&rho).unwrap() - 1.0).abs() < 1e-12);
        for thr in [0.5, 0.95, 0.999] {
            assert_eq!(success_rate(&rho, thr).unwrap(), 1.0);
        }
        let raw = rho_matrix(&s, &t, &eval, 1, Centering::Raw).unwrap();
        assert!((raw[[1, 1]] - 1.0).abs() < 1e-12);
        let sum = summarize(&s, &t, &eval, 0.95).unwrap();
        assert_eq!(sum.success_rate, 1.0);
        assert!(sum.unspecialized.iter().any(|&(k, _)| k == 3));
    }

    #[test]
    fn rho_matches_naive_pearson() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = two_layer(
            Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0)),
            Role::Student,
        );
        let t = two_layer(
            Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)),
            Role::Teacher,
        );
        let eval = sample_gaussian(200, 3, 1.0, 2).unwrap();
        let rho = rho_matrix(&s, &t, &eval, 1, Centering::MeanCentered).unwrap();
        let act = |net: &Network, node: usize| -> Vec<f64> {
            eval.inputs
                .rows()
                .into_iter()
                .map(|x| {
                    let w = net.weight(1).column(node);
                    let p = x[0] * w[0] + x[1] * w[1] + x[2] * w[2] + w[3];
                    p.max(0.0)
                })
                .collect()
        };
        for j in 0..3 {
            for k in 0..5 {
                let a = act(&t, j);
                let b = act(&s, k);
                let n = a.len() as f64;
                let ma = a.iter().sum::<f64>() / n;
                let mb = b.iter().sum::<f64>() / n;
                let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
                let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
                let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
                let expect = if va == 0.0 || vb == 0.0 { 0.0 } else { cov / (va * vb).sqrt() };
                assert!((rho[[j, k]] - expect).abs() < 1e-10, "{j},{k}");
            }
        }
    }

    #[test]
    fn rho_mean_and_success_hand_cases() {
        let r = array![[0.2, 0.9, -0.1, 0.3, 0.0], [0.97, 0.1, 0.2, 0.0, 0.5], [0.4, 0.4, 0.96, 0.94, 0.1]];
        assert!((rho_mean(&r).unwrap() - (0.9 + 0.97 + 0.96) / 3.0).abs() < 1e-15);
        assert!((success_rate(&r, 0.95).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rho_mean(&Array2::zeros((2, 3))).unwrap(), 0.0);
        assert_eq!(success_rate(&Array2::zeros((2, 3)), 0.5).unwrap(), 0.0);
        assert_eq!(rho_mean(&Array2::eye(4)).unwrap(), 1.0);
        assert!(success_rate(&r, 1.0).is_err());
        assert!(rho_mean(&Array2::zeros((0, 0))).is_err());
    }

    #[test]
    fn observer_counts_match_oracle() {
        let (t, s, eval) = teacher_and_copy();
        let stats = observer_stats(&s, &t, &eval, 0.3, 0.5).unwrap();
        for j in 0..3 {
            let tw = t.weight(1).column(j).to_vec();
            let band = naive_counts(&eval.inputs, &[CountQuery::Band { w: tw.clone(), eps: 0.3 }])[0];
            assert_eq!(stats.band_counts[j], band);
            for k in 0..5 {
                let q = CountQuery::BandActive { w: tw.clone(), eps: 0.3, active: s.weight(1).column(k).to_vec() };
                assert_eq!(stats.observed_counts[[j, k]], naive_counts(&eval.inputs, &[q])[0]);
            }
        }
        // node 3 is never active, node with bias 1e3 is always active
        assert!((0..3).all(|j| !stats.observes(j, 3)));
        let mut always = s.clone();
        always.weight_mut(1).column_mut(4).assign(&array![0.0, 0.0, 1e3]);
        let st = observer_stats(&always, &t, &eval, 0.3, 1.0).unwrap();
        for j in 0..3 {
            assert_eq!(st.observes(j, 4), st.band_counts[j] > 0);
        }
        // empty band is never observed
        let mut far = t.clone();
        far.weight_mut(1)[[2, 0]] = 1e6;
        let st = observer_stats(&always, &far, &eval, 0.3, 0.0).unwrap();
        assert!(!st.observes(0, 4));
    }

    #[test]
    fn observer_monotone() {
        let (t, s, eval) = teacher_and_copy();
        let a = observer_stats(&s, &t, &eval, 0.1, 0.5).unwrap();
        let b = observer_stats(&s, &t, &eval, 0.4, 0.5).unwrap();
        for j in 0..3 {
            assert!(a.band_counts[j] <= b.band_counts[j]);
            for k in 0..5 {
                assert!(a.observed_counts[[j, k]] <= b.observed_counts[[j, k]]);
            }
        }
        let lo = observer_stats(&s, &t, &eval, 0.4, 0.2).unwrap();
        let hi = observer_stats(&s, &t, &eval, 0.4, 0.9).unwrap();
        for j in 0..3 {
            for k in 0..5 {
                assert!(hi.observes(j, k) <= lo.observes(j, k));
            }
        }
    }

    #[test]
    fn prune_zero_fanout_is_bit_exact() {
        let (_, s, eval) = teacher_and_copy();
        let (pruned, rep) = prune_unspecialized(&s, 1e-12, &eval, PruneScore::FanOut).unwrap();
        assert_eq!(rep.removed, vec![4]);
        assert_eq!(rep.output_delta, 0.0);
        assert_eq!(pruned.width(1), 4);
        for x in eval.inputs.rows() {
            let a = s.output(x).unwrap();
            let b = pruned.output(x).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        let (same, rep) = prune_unspecialized(&s, 0.0, &eval, PruneScore::FanOutTimesIncoming).unwrap();
        assert!(rep.removed.is_empty());
        assert_eq!(same, s);
        assert!(matches!(prune_unspecialized(&s, 1e9, &eval, PruneScore::FanOut), Err(Error::PruneAll)));
    }

    #[test]
    fn fanout_norm_cases() {
        let (_, s, eval) = teacher_and_copy();
        let norms = fanout_norms(&s, 1, None).unwrap();
        for (k, n) in norms.iter().enumerate() {
            let r = s.weight(2).row(k);
            assert_eq!(*n, r.dot(&r).sqrt());
        }
        let zero = two_layer(Array2::ones((3, 4)), Array2::zeros((5, 2)), Role::Student);
        assert!(fanout_norms(&zero, 1, None).unwrap().iter().all(|&v| v == 0.0));
        // deep case: compare with the V columns
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let deep = Network::new(
            Role::Student,
            Activation::Rectifier,
            vec![
                Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)),
            ],
        )
        .unwrap();
        let x = eval.sample(1);
        let vm = crate::vmats::compute_vmats(&deep, &deep, x).unwrap();
        let got = fanout_norms(&deep, 1, Some(x)).unwrap();
        for k in 0..4 {
            let c = vm.v(1).column(k);
            assert!((got[k] - c.dot(&c).sqrt()).abs() < 1e-15);
        }
        assert!(fanout_norms(&deep, 1, None).is_err());
    }

    #[test]
    fn alignment_report_on_copy() {
        let (t, s, eval) = teacher_and_copy();
        let rep = alignment_report(&s, &t, &eval, 1, 1e-6).unwrap();
        assert!(rep.teachers.iter().all(|m| m.aligned && m.best_rho > 0.999999));
        assert_eq!(rep.students.len(), 5);
        assert_eq!(rep.pairs.len(), 15);
        let csv = rep.to_csv(&MetaLine::new("alignment"), 7).unwrap();
        assert_eq!(csv.lines().count(), 2 + 5);
    }
}
