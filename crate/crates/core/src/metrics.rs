//! Evaluation suite: PR-AUC and Soft-IoU on observed, occluded and
//! flow-grounded occupancy, plus flow end-point error, per waypoint.
//!
//! Reductions run in f64 in a fixed order so reports are reproducible.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::grid::{bilinear_warp, FeatureGrid, Real};
use crate::losses::WaypointTarget;
use crate::model::Prediction;

pub const DEFAULT_THRESHOLDS: usize = 100;

fn f(v: impl Real) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{what}: {a} vs {b} elements"));
    }
    Ok(())
}

/// Number of thresholds `i / (n - 1)`, `i < n`, that `p` reaches.
fn reached(p: f64, n: usize) -> usize {
    let last = (n - 1) as f64;
    let mut k = ((p * last).floor().max(-1.0) as i64 + 1).clamp(0, n as i64) as usize;
    while k > 0 && p < (k - 1) as f64 / last {
        k -= 1;
    }
    while k < n && p >= k as f64 / last {
        k += 1;
    }
    k
}

/// Precision-recall AUC over `thresholds` evenly spaced thresholds in
/// `[0, 1]`. A cell is positive at threshold `t` when `pred >= t`.
/// Thresholds with no positive predictions are skipped, precision is made
/// non-increasing in recall (each point takes the best precision at equal or
/// higher recall), a recall-0 anchor repeats the last precision, and the
/// curve is integrated with the trapezoid rule. Zero when `gt` is empty.
pub fn auc_pr_with<T: Real>(pred: &FeatureGrid<T>, gt: &FeatureGrid<T>, thresholds: usize) -> Result<f64> {
    check_len(pred.numel(), gt.numel(), "auc_pr")?;
    let n = thresholds.max(2);
    // positives[k] / negatives[k]: cells reaching exactly k thresholds
    let mut positives = vec![0u64; n + 1];
    let mut negatives = vec![0u64; n + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let k = reached(f(p), n);
        if g > T::zero() {
            positives[k] += 1;
        } else {
            negatives[k] += 1;
        }
    }
    let total_pos: u64 = positives.iter().sum();
    if total_pos == 0 {
        return Ok(0.0);
    }
    // threshold i counts cells reaching more than i thresholds
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut curve = Vec::with_capacity(n + 1);
    for i in (0..n).rev() {
        tp += positives[i + 1];
        fp += negatives[i + 1];
        if tp + fp > 0 {
            curve.push((tp as f64 / total_pos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    // curve runs from the highest threshold (lowest recall) down
    curve.reverse();
    Ok(integrate_pr(&mut curve))
}

/// Trapezoid area under `(recall, precision)` points ordered by
/// non-increasing recall, after monotonizing precision.
fn integrate_pr(curve: &mut [(f64, f64)]) -> f64 {
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < curve.len() {
        let mut j = i;
        let mut tie = best;
        while j < curve.len() && curve[j].0 == curve[i].0 {
            tie = tie.max(curve[j].1);
            j += 1;
        }
        for point in &mut curve[i..j] {
            point.1 = tie;
        }
        best = tie;
        i = j;
    }
    let Some(&(_, last)) = curve.last() else {
        return 0.0;
    };
    let mut area = 0.0;
    for w in curve.windows(2) {
        area += (w[0].0 - w[1].0) * (w[0].1 + w[1].1) / 2.0;
    }
    let (r, _) = curve[curve.len() - 1];
    area + r * last
}

pub fn auc_pr<T: Real>(pred: &FeatureGrid<T>, gt: &FeatureGrid<T>) -> Result<f64> {
    auc_pr_with(pred, gt, DEFAULT_THRESHOLDS)
}

/// `sum(p g) / (sum p + sum g - sum(p g))`, zero when both are empty.
pub fn soft_iou<T: Real>(pred: &FeatureGrid<T>, gt: &FeatureGrid<T>) -> Result<f64> {
    check_len(pred.numel(), gt.numel(), "soft_iou")?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (f(p), f(g));
        inter += p * g;
        sp += p;
        sg += g;
    }
    let union = sp + sg - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Mean end-point error over cells where `mask > 0`; zero for an empty mask.
pub fn flow_epe<T: Real>(pred: &FeatureGrid<T>, gt: &FeatureGrid<T>, mask: &FeatureGrid<T>) -> Result<f64> {
    check_len(pred.numel(), gt.numel(), "flow_epe")?;
    let [n, c, h, w] = gt.shape();
    if c != 2 || mask.shape() != [n, 1, h, w] {
        return Err(shape_err!(
            "flow_epe: flow {:?} with mask {:?}",
            gt.shape(),
            mask.shape()
        ));
    }
    let plane = h * w;
    let (mut sum, mut count) = (0.0, 0usize);
    for b in 0..n {
        let m = mask.plane(b, 0);
        let (px, py) = (pred.plane(b, 0), pred.plane(b, 1));
        let (gx, gy) = (gt.plane(b, 0), gt.plane(b, 1));
        for i in 0..plane {
            if m[i] > T::zero() {
                sum += (f(px[i]) - f(gx[i])).hypot(f(py[i]) - f(gy[i]));
                count += 1;
            }
        }
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}

/// Predicted occupancy times the previous ground truth warped by the
/// predicted flow (clamped to `[0, 1]`).
pub fn flow_grounded_occupancy<T: Real>(
    pred_occ: &FeatureGrid<T>,
    pred_flow: &FeatureGrid<T>,
    gt_prev: &FeatureGrid<T>,
) -> Result<FeatureGrid<T>> {
    let warped = bilinear_warp(gt_prev, pred_flow)?;
    pred_occ.zip_map(&warped, |p, w| p * w.max(T::zero()).min(T::one()))
}

/// `(auc, soft_iou)` of the flow-grounded occupancy against `gt_occ`.
pub fn flow_grounded<T: Real>(
    pred_occ: &FeatureGrid<T>,
    pred_flow: &FeatureGrid<T>,
    gt_prev: &FeatureGrid<T>,
    gt_occ: &FeatureGrid<T>,
) -> Result<(f64, f64)> {
    let grounded = flow_grounded_occupancy(pred_occ, pred_flow, gt_prev)?;
    Ok((auc_pr(&grounded, gt_occ)?, soft_iou(&grounded, gt_occ)?))
}

/// Metrics of one waypoint, in report column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WaypointMetrics {
    pub observed_auc: f64,
    pub observed_soft_iou: f64,
    pub occluded_auc: f64,
    pub occluded_soft_iou: f64,
    pub flow_epe: f64,
    pub flow_grounded_auc: f64,
    pub flow_grounded_soft_iou: f64,
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "observed_auc",
    "observed_soft_iou",
    "occluded_auc",
    "occluded_soft_iou",
    "flow_epe",
    "flow_grounded_auc",
    "flow_grounded_soft_iou",
];

impl WaypointMetrics {
    pub fn values(&self) -> [f64; 7] {
        [
            self.observed_auc,
            self.observed_soft_iou,
            self.occluded_auc,
            self.occluded_soft_iou,
            self.flow_epe,
            self.flow_grounded_auc,
            self.flow_grounded_soft_iou,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        WaypointMetrics {
            observed_auc: v[0],
            observed_soft_iou: v[1],
            occluded_auc: v[2],
            occluded_soft_iou: v[3],
            flow_epe: v[4],
            flow_grounded_auc: v[5],
            flow_grounded_soft_iou: v[6],
        }
    }

    /// Arithmetic mean, summed in order.
    pub fn mean(items: &[WaypointMetrics]) -> Self {
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WaypointReport {
    pub per_waypoint: Vec<WaypointMetrics>,
    pub mean: WaypointMetrics,
}

impl WaypointReport {
    pub fn new(per_waypoint: Vec<WaypointMetrics>) -> Self {
        let mean = WaypointMetrics::mean(&per_waypoint);
        WaypointReport { per_waypoint, mean }
    }

    /// Per-waypoint means over samples. Reports must agree on waypoint count.
    pub fn aggregate(reports: &[WaypointReport]) -> Result<Self> {
        let Some(first) = reports.first() else {
            return Ok(WaypointReport::default());
        };
        let k = first.per_waypoint.len();
        if let Some(r) = reports.iter().find(|r| r.per_waypoint.len() != k) {
            return Err(shape_err!(
                "reports disagree on waypoint count: {k} vs {}",
                r.per_waypoint.len()
            ));
        }
        let per_waypoint = (0..k)
            .map(|i| {
                let column: Vec<_> = reports.iter().map(|r| r.per_waypoint[i]).collect();
                WaypointMetrics::mean(&column)
            })
            .collect();
        Ok(Self::new(per_waypoint))
    }
}

fn clamp_sum<T: Real>(occ: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
    let a = occ.select_channels(0, 1)?;
    let b = occ.select_channels(1, 1)?;
    a.zip_map(&b, |x, y| (x + y).min(T::one()))
}

/// Metrics of one sample. `preds` carry occupancy probabilities (observed,
/// occluded) and flow for each waypoint. Flow EPE is masked by total ground
/// truth occupancy; flow grounding uses total occupancy on both sides.
pub fn evaluate<T: Real>(preds: &[Prediction<FeatureGrid<T>>], targets: &[WaypointTarget<T>]) -> Result<WaypointReport> {
    if preds.len() != targets.len() {
        return Err(shape_err!(
            "{} predicted waypoints vs {} targets",
            preds.len(),
            targets.len()
        ));
    }
    let per_waypoint = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            t.occupancy.expect_shape(p.occupancy.shape(), "occupancy prediction")?;
            t.flow.expect_shape(p.flow.shape(), "flow prediction")?;
            let pred_obs = p.occupancy.select_channels(0, 1)?;
            let pred_occ = p.occupancy.select_channels(1, 1)?;
            let gt_obs = t.occupancy.select_channels(0, 1)?;
            let gt_occ = t.occupancy.select_channels(1, 1)?;
            let gt_all = t.total();
            let pred_all = clamp_sum(&p.occupancy)?;
            let (fg_auc, fg_iou) = flow_grounded(&pred_all, &p.flow, &t.previous, &gt_all)?;
            Ok(WaypointMetrics {
                observed_auc: auc_pr(&pred_obs, &gt_obs)?,
                observed_soft_iou: soft_iou(&pred_obs, &gt_obs)?,
                occluded_auc: auc_pr(&pred_occ, &gt_occ)?,
                occluded_soft_iou: soft_iou(&pred_occ, &gt_occ)?,
                flow_epe: flow_epe(&p.flow, &t.flow, &gt_all)?,
                flow_grounded_auc: fg_auc,
                flow_grounded_soft_iou: fg_iou,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WaypointReport::new(per_waypoint))
}

/// Ground truth dressed up as a prediction.
pub fn oracle_predictions<T: Real>(targets: &[WaypointTarget<T>]) -> Vec<Prediction<FeatureGrid<T>>> {
    targets
        .iter()
        .map(|t| Prediction {
            occupancy: t.occupancy.clone(),
            flow: t.flow.clone(),
        })
        .collect()
}

fn row(out: &mut String, sample: &str, waypoint: &str, m: &WaypointMetrics) {
    write!(out, "{sample},{waypoint}").unwrap();
    for v in m.values() {
        write!(out, ",{v}").unwrap();
    }
    out.push('\n');
}

/// CSV with one row per (sample, waypoint), then per-waypoint aggregates
/// (`sample = all`) and the overall mean (`all,mean`).
pub fn report_csv(samples: &[(String, WaypointReport)]) -> Result<String> {
    let mut out = format!("sample,waypoint,{}\n", METRIC_COLUMNS.join(","));
    for (name, r) in samples {
        for (k, m) in r.per_waypoint.iter().enumerate() {
            row(&mut out, name, &(k + 1).to_string(), m);
        }
    }
    let reports: Vec<_> = samples.iter().map(|(_, r)| r.clone()).collect();
    let agg = WaypointReport::aggregate(&reports)?;
    for (k, m) in agg.per_waypoint.iter().enumerate() {
        row(&mut out, "all", &(k + 1).to_string(), m);
    }
    row(&mut out, "all", "mean", &agg.mean);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[f64]) -> FeatureGrid<f64> {
        FeatureGrid::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn reached_counts_thresholds() {
        assert_eq!(reached(0.0, 100), 1);
        assert_eq!(reached(1.0, 100), 100);
        assert_eq!(reached(-0.1, 100), 0);
        assert_eq!(reached(0.5, 100), 50);
        for i in 0..100 {
            let t = i as f64 / 99.0;
            assert_eq!(reached(t, 100), i + 1, "threshold {i}");
        }
    }

    #[test]
    fn perfect_prediction_auc_is_one() {
        let g = grid(&[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(auc_pr(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn constant_scorer_auc_is_prevalence() {
        let p = grid(&[0.5; 4]);
        let g = grid(&[1.0, 1.0, 0.0, 0.0]);
        assert!((auc_pr(&p, &g).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_auc_is_zero() {
        assert_eq!(auc_pr(&grid(&[0.3, 0.9]), &grid(&[0.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn soft_iou_cases() {
        let g = grid(&[1.0, 1.0, 1.0]);
        assert!((soft_iou(&grid(&[0.5; 3]), &g).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(soft_iou(&grid(&[1.0, 0.0]), &grid(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(soft_iou(&grid(&[0.0, 0.0]), &grid(&[0.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn epe_three_four_five() {
        let pred = FeatureGrid::from_vec([1, 2, 1, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        let gt = FeatureGrid::zeros([1, 2, 1, 2]);
        let mask = FeatureGrid::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(flow_epe(&pred, &gt, &mask).unwrap(), 5.0);
        assert_eq!(flow_epe(&pred, &gt, &FeatureGrid::zeros([1, 1, 1, 2])).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_rejects_ragged_reports() {
        let a = WaypointReport::new(vec![WaypointMetrics::default(); 2]);
        let b = WaypointReport::new(vec![WaypointMetrics::default(); 3]);
        assert!(WaypointReport::aggregate(&[a, b]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = WaypointReport::new(vec![WaypointMetrics::from_values([1.0; 7]); 2]);
        let csv = report_csv(&[("0".into(), r)]).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 2 + 1);
        assert!(lines[0].starts_with("sample,waypoint,observed_auc,observed_soft_iou,occluded_auc"));
        assert_eq!(lines[5], "all,mean,1,1,1,1,1,1,1");
    }
}
