//! Piece-wise linear low-loss paths between two 2-layer solutions.
//!
//! Every teacher node sits in some specialized slot of each solution. A
//! slot move from `s` to `t` is done in three segments that leave the
//! network function unchanged when the spare fan-outs are exactly zero:
//! copy `w_s` into the spare slot `t`, transfer fan-out from `s` to `t`,
//! then move the vacated `w_s` to its final value. Trained solutions have
//! small but nonzero spare fan-outs, so those are folded away first and
//! restored at the end with segments that touch only the top layer.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::analysis::{alignment, AlignmentReport};
use crate::csvio::{render_table, MetaLine};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::snapshot::Snapshot;

/// Slots with fan-out below this fraction of the median are unspecialized.
pub const UNSPECIALIZED_RATIO: f64 = 1e-2;

/// Alignment tolerance for folding a duplicate slot into its matched slot.
pub const FOLD_EPS: f64 = 0.05;

/// Minimum best correlation for a teacher node to count as matched.
pub const DEFAULT_MATCH_RHO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentLabel {
    /// Incoming weight of `node` moves to the weight it is about to share.
    BlendHidden { node: usize },
    /// Fan-out of `src` is transferred onto `dst`.
    SwapFanout { src: usize, dst: usize },
    /// Incoming weight of the vacated `node` moves to its final value.
    RetireHidden { node: usize },
    /// Top layer only: unmatched fan-outs are folded away.
    FoldFanout,
    /// Top layer only: the second solution's unmatched fan-outs return.
    UnfoldFanout,
    /// Straight segment between identical solutions.
    Settle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotMatch {
    pub teacher: usize,
    pub slot_a: usize,
    pub slot_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub waypoints: Vec<Network>,
    pub labels: Vec<SegmentLabel>,
    pub matching: Vec<SlotMatch>,
}

#[derive(Serialize, Deserialize)]
struct PathJson {
    labels: Vec<SegmentLabel>,
    matching: Vec<SlotMatch>,
    waypoints: Vec<Snapshot>,
}

impl PathSpec {
    pub fn num_segments(&self) -> usize {
        self.labels.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let j = PathJson {
            labels: self.labels.clone(),
            matching: self.matching.clone(),
            waypoints: self.waypoints.iter().map(Snapshot::from).collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(text: &str) -> Result<PathSpec> {
        let j: PathJson = serde_json::from_str(text)?;
        let waypoints = j.waypoints.into_iter().map(Network::try_from).collect::<Result<Vec<_>>>()?;
        if waypoints.len() != j.labels.len() + 1 {
            return Err(Error::Parse("path needs one more waypoint than segments".into()));
        }
        Ok(PathSpec {
            waypoints,
            labels: j.labels,
            matching: j.matching,
        })
    }

    /// Network at parameter `t ∈ [0, 1]` of segment `seg`.
    pub fn point(&self, seg: usize, t: f64) -> Result<Network> {
        interpolate(&self.waypoints[seg], &self.waypoints[seg + 1], t)
    }
}

/// `(1 - t)·a + t·b` entrywise; exact at both ends.
pub fn interpolate(a: &Network, b: &Network, t: f64) -> Result<Network> {
    if !a.same_shape(b) {
        return Err(Error::Path("interpolation between different shapes".into()));
    }
    let weights = a
        .weights()
        .iter()
        .zip(b.weights())
        .map(|(wa, wb)| {
            let mut w = wa * (1.0 - t);
            w.scaled_add(t, wb);
            w
        })
        .collect();
    Network::new(a.role(), a.activation(), weights)
}

/// Greedy best-correlation assignment of teacher nodes to distinct student
/// slots, highest correlation first.
pub fn match_slots(report: &AlignmentReport, min_rho: f64) -> Result<Vec<usize>> {
    let (m, n) = report.rho.dim();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * n);
    for j in 0..m {
        for k in 0..n {
            pairs.push((report.rho[[j, k]], j, k));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut slot = vec![None; m];
    let mut used = vec![false; n];
    for (r, j, k) in pairs {
        if r < min_rho {
            break;
        }
        if slot[j].is_none() && !used[k] {
            slot[j] = Some(k);
            used[k] = true;
        }
    }
    slot.into_iter()
        .enumerate()
        .map(|(j, s)| s.ok_or_else(|| Error::Path(format!("teacher node {j} has no student with rho >= {min_rho}"))))
        .collect()
}

fn fanout(net: &Network, k: usize) -> f64 {
    let r = net.weight(2).row(k);
    r.dot(&r).sqrt()
}

/// Copy of `net` in which every slot outside `matched` has zero fan-out.
///
/// A cleared slot whose incoming weight is aligned with a matched slot hands
/// its fan-out over, scaled by the weight-norm ratio, so co-linear duplicates
/// keep their joint contribution. Only the top layer changes.
fn fold_unmatched(net: &Network, matched: &[usize]) -> Result<Network> {
    let mut out = net.clone();
    let w1 = net.weight(1);
    for k in 0..net.width(1) {
        if matched.contains(&k) || fanout(net, k) == 0.0 {
            continue;
        }
        let wk = w1.column(k);
        let mut host = None;
        for &m in matched {
            if alignment(wk, w1.column(m))?.is_aligned(FOLD_EPS) {
                host = Some(m);
                break;
            }
        }
        if let Some(m) = host {
            let ratio = wk.dot(&wk).sqrt() / w1.column(m).dot(&w1.column(m)).sqrt();
            let moved = &out.weight(2).row(m) + &(&net.weight(2).row(k) * ratio);
            out.weight_mut(2).row_mut(m).assign(&moved);
        }
        out.weight_mut(2).row_mut(k).fill(0.0);
    }
    Ok(out)
}

/// Builds the path from explicit teacher-to-slot matchings.
///
/// The path first folds the fan-out of every unmatched slot of `sol_a` into
/// its matched slots (top layer only), then hands each teacher unit over to
/// its slot in `sol_b` with three segments, and finally unfolds `sol_b`'s
/// unmatched fan-outs (top layer only). On every segment either the top
/// layer alone changes, so the loss is convex in `t`, or an incoming weight
/// with zero fan-out changes, so the output is constant.
pub fn build_path_with_matching(sol_a: &Network, sol_b: &Network, slot_a: &[usize], slot_b: &[usize]) -> Result<PathSpec> {
    if sol_a.depth() != 2 || !sol_a.same_shape(sol_b) {
        return Err(Error::Path("both solutions must be 2-layer networks of the same shape".into()));
    }
    if slot_a.len() != slot_b.len() {
        return Err(Error::Path("matchings cover different teacher sets".into()));
    }
    let n = sol_a.width(1);
    let matching: Vec<SlotMatch> = slot_a
        .iter()
        .zip(slot_b)
        .enumerate()
        .map(|(teacher, (&a, &b))| SlotMatch { teacher, slot_a: a, slot_b: b })
        .collect();
    if matching.iter().any(|m| m.slot_a >= n || m.slot_b >= n) {
        return Err(Error::Path("slot index out of range".into()));
    }
    let distinct = |s: &[usize]| s.iter().enumerate().all(|(i, x)| !s[..i].contains(x));
    if !distinct(slot_a) || !distinct(slot_b) {
        return Err(Error::Path("two teacher nodes share a slot".into()));
    }
    let mut waypoints = vec![sol_a.clone()];
    let mut labels = Vec::new();
    if sol_a == sol_b {
        waypoints.push(sol_b.clone());
        labels.push(SegmentLabel::Settle);
        return Ok(PathSpec { waypoints, labels, matching });
    }

    let mut state = fold_unmatched(sol_a, slot_a)?;
    if state != *sol_a {
        waypoints.push(state.clone());
        labels.push(SegmentLabel::FoldFanout);
    }
    let target = fold_unmatched(sol_b, slot_b)?;

    // where each teacher's unit currently lives
    let mut loc: Vec<usize> = slot_a.to_vec();
    let slot_done = |state: &Network, s: usize| {
        state.weight(1).column(s) == target.weight(1).column(s) && state.weight(2).row(s) == target.weight(2).row(s)
    };
    let mut pending: Vec<usize> = (0..loc.len()).filter(|&j| !(loc[j] == slot_b[j] && slot_done(&state, loc[j]))).collect();
    while !pending.is_empty() {
        let free = |s: usize, loc: &[usize], state: &Network| !loc.contains(&s) && fanout(state, s) == 0.0;
        // a unit whose destination is free is handed over to its final form
        let ready = pending.iter().position(|&j| free(slot_b[j], &loc, &state));
        let (j, dst, handover) = match ready {
            Some(p) => {
                let j = pending.remove(p);
                (j, slot_b[j], true)
            }
            None => {
                // park one unit unchanged in a spare slot to open its destination
                let wanted = |s: usize| pending.iter().any(|&i| slot_b[i] == s);
                let spare = (0..n)
                    .filter(|&s| free(s, &loc, &state))
                    .min_by_key(|&s| wanted(s))
                    .ok_or_else(|| Error::Path("insufficient unspecialized slots to free a destination".into()))?;
                (pending.remove(0), spare, false)
            }
        };
        let src = loc[j];
        // (i) the spare slot takes the incoming weight it is about to carry
        let w_new = if handover { target.weight(1).column(dst).to_owned() } else { state.weight(1).column(src).to_owned() };
        state.weight_mut(1).column_mut(dst).assign(&w_new);
        waypoints.push(state.clone());
        labels.push(SegmentLabel::BlendHidden { node: dst });
        // (ii) fan-out moves across
        let v_new = if handover { target.weight(2).row(dst).to_owned() } else { state.weight(2).row(src).to_owned() };
        state.weight_mut(2).row_mut(dst).assign(&v_new);
        state.weight_mut(2).row_mut(src).fill(0.0);
        waypoints.push(state.clone());
        labels.push(SegmentLabel::SwapFanout { src, dst });
        // (iii) the vacated slot heads to its final incoming weight
        state.weight_mut(1).column_mut(src).assign(&target.weight(1).column(src));
        waypoints.push(state.clone());
        labels.push(SegmentLabel::RetireHidden { node: src });
        loc[j] = dst;
        if !handover {
            pending.push(j);
        }
    }
    // spare slots never visited still carry sol_a's incoming weights
    for s in 0..n {
        if !loc.contains(&s) && state.weight(1).column(s) != target.weight(1).column(s) {
            state.weight_mut(1).column_mut(s).assign(&target.weight(1).column(s));
            waypoints.push(state.clone());
            labels.push(SegmentLabel::RetireHidden { node: s });
        }
    }
    if state != *sol_b {
        waypoints.push(sol_b.clone());
        labels.push(SegmentLabel::UnfoldFanout);
    } else if let Some(last) = waypoints.last_mut() {
        *last = sol_b.clone();
    }
    Ok(PathSpec { waypoints, labels, matching })
}

/// Builds the path using best-correlation matchings from both reports.
pub fn build_path(sol_a: &Network, sol_b: &Network, report_a: &AlignmentReport, report_b: &AlignmentReport) -> Result<PathSpec> {
    build_path_with_options(sol_a, sol_b, report_a, report_b, DEFAULT_MATCH_RHO)
}

pub fn build_path_with_options(
    sol_a: &Network,
    sol_b: &Network,
    report_a: &AlignmentReport,
    report_b: &AlignmentReport,
    min_rho: f64,
) -> Result<PathSpec> {
    if report_a.rho.nrows() != report_b.rho.nrows() {
        return Err(Error::Path("reports cover different teachers".into()));
    }
    let a = match_slots(report_a, min_rho)?;
    let b = match_slots(report_b, min_rho)?;
    build_path_with_matching(sol_a, sol_b, &a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathPoint {
    pub segment: usize,
    pub t: f64,
    pub loss: f64,
    /// Loss on the direct interpolation at the same global parameter.
    pub straight_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathEval {
    pub points: Vec<PathPoint>,
    pub endpoint_loss: f64,
    pub path_max: f64,
    pub straight_max: f64,
    /// Max over segments and data of the output ∞-norm change relative to the
    /// segment start.
    pub max_output_deviation: Vec<f64>,
}

impl PathEval {
    pub fn to_csv(&self, meta: &MetaLine) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| vec![p.segment.to_string(), p.t.to_string(), p.loss.to_string(), p.straight_loss.to_string()])
            .collect();
        render_table(meta, &["segment", "t", "loss", "straight_loss"], &rows)
    }
}

/// Loss at `points_per_segment` uniform parameters on every segment and on
/// the straight line between the endpoints. `data` must carry labels.
pub fn eval_path(path: &PathSpec, data: &Dataset, points_per_segment: usize) -> Result<PathEval> {
    if points_per_segment < 2 {
        return Err(Error::InvalidArgument("points_per_segment must be >= 2".into()));
    }
    let labels = data.labels()?;
    let first = &path.waypoints[0];
    let last = path.waypoints.last().expect("path has waypoints");
    let segs = path.num_segments();
    let mut points = Vec::with_capacity(segs * points_per_segment);
    let mut deviations = Vec::with_capacity(segs);
    for seg in 0..segs {
        let start_out = path.waypoints[seg].forward_batch(&data.inputs)?.into_output();
        let mut dev: f64 = 0.0;
        for i in 0..points_per_segment {
            let t = i as f64 / (points_per_segment - 1) as f64;
            let net = path.point(seg, t)?;
            let out = net.forward_batch(&data.inputs)?.into_output();
            dev = (&out - &start_out).iter().fold(dev, |m, v| m.max(v.abs()));
            let loss = mse(&out, labels);
            let global = (seg as f64 + t) / segs as f64;
            let straight = interpolate(first, last, global)?;
            let straight_loss = mse(&straight.forward_batch(&data.inputs)?.into_output(), labels);
            points.push(PathPoint { segment: seg, t, loss, straight_loss });
        }
        deviations.push(dev);
    }
    let endpoint_loss = mse(&first.forward_batch(&data.inputs)?.into_output(), labels)
        .max(mse(&last.forward_batch(&data.inputs)?.into_output(), labels));
    let path_max = points.iter().map(|p| p.loss).fold(f64::NEG_INFINITY, f64::max);
    let straight_max = points.iter().map(|p| p.straight_loss).fold(f64::NEG_INFINITY, f64::max);
    Ok(PathEval {
        points,
        endpoint_loss,
        path_max,
        straight_max,
        max_output_deviation: deviations,
    })
}

fn mse(out: &Array2<f64>, labels: &Array2<f64>) -> f64 {
    0.5 * (out - labels).mapv(|v| v * v).sum_axis(Axis(1)).mean().unwrap_or(0.0)
}
