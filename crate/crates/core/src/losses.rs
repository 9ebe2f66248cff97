//! Training objectives: flow-weighted occupancy BCE, observed-occupancy
//! weighted flow error, and the trace loss that warps the previous ground
//! truth occupancy by the predicted flow.
//!
//! Every loss works on one sample as a list of per-waypoint tensors with a
//! batch dimension of 1. The tape variants build differentiable graphs; the
//! plain variants evaluate the same graphs on constants.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{concat_channels, FeatureGrid, Real};
use crate::model::Prediction;
use crate::scenario::SampleRecord;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowPenalty {
    #[default]
    L1,
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub occupancy: f64,
    pub flow: f64,
    pub trace: f64,
    /// Flow magnitude (cells) that adds one unit of occupancy weight.
    pub flow_weight_scale: f64,
    pub flow_penalty: FlowPenalty,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            occupancy: 1000.0,
            flow: 25.0,
            trace: 10.0,
            flow_weight_scale: 10.0,
            flow_penalty: FlowPenalty::L1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.occupancy, self.flow, self.trace, self.flow_weight_scale];
        if all.iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be positive: {all:?}")))
        }
    }

    pub fn combine(&self, occupancy: f64, flow: f64, trace: f64) -> LossBreakdown {
        LossBreakdown {
            occupancy,
            flow,
            trace,
            total: self.occupancy * occupancy + self.flow * flow + self.trace * trace,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub occupancy: f64,
    pub flow: f64,
    pub trace: f64,
    pub total: f64,
}

/// Supervision for one waypoint `k`, every grid `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaypointTarget<T> {
    /// Observed and occluded occupancy at `k`.
    pub occupancy: FeatureGrid<T>,
    /// Backward flow at `k`.
    pub flow: FeatureGrid<T>,
    /// Total occupancy at `k - 1` (the present frame for `k = 1`).
    pub previous: FeatureGrid<T>,
}

impl<T: Real> WaypointTarget<T> {
    pub fn observed(&self) -> FeatureGrid<T> {
        self.occupancy.select_channels(0, 1).expect("two occupancy channels")
    }

    pub fn total(&self) -> FeatureGrid<T> {
        let obs = self.occupancy.select_channels(0, 1).expect("two occupancy channels");
        let occ = self.occupancy.select_channels(1, 1).expect("two occupancy channels");
        obs.zip_map(&occ, |a, b| (a + b).min(T::one())).expect("same shape")
    }

    pub fn cast<U: Real>(&self) -> WaypointTarget<U> {
        WaypointTarget {
            occupancy: self.occupancy.cast(),
            flow: self.flow.cast(),
            previous: self.previous.cast(),
        }
    }

    pub fn rot180(&self) -> Self {
        WaypointTarget {
            occupancy: self.occupancy.rot180(),
            flow: self.flow.rot180().map(|v| -v),
            previous: self.previous.rot180(),
        }
    }
}

/// Per-waypoint targets of a sample.
pub fn waypoint_targets(sample: &SampleRecord) -> Vec<WaypointTarget<f32>> {
    let mut previous = sample.present.occupancy_total();
    sample
        .targets
        .iter()
        .map(|f| {
            let occupancy = concat_channels(&[&f.occupancy_observed, &f.occupancy_occluded])
                .expect("occupancy planes share a shape");
            let t = WaypointTarget {
                occupancy,
                flow: f.flow.clone(),
                previous: previous.clone(),
            };
            previous = f.occupancy_total();
            t
        })
        .collect()
}

fn check_counts(preds: usize, targets: usize) -> Result<()> {
    if preds != targets {
        return Err(shape_err!("{preds} predicted waypoints vs {targets} targets"));
    }
    Ok(())
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(FeatureGrid::scalar(T::zero()))
}

fn sum_all<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let mut acc = match parts.first() {
        Some(&v) => v,
        None => return Ok(zero(tape)),
    };
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// Mean over waypoints, channels and cells of `BCE(logits, O) * (W + 1)` with
/// `W = O * (|F| / flow_weight_scale + 1)`.
pub fn occupancy_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    targets: &[WaypointTarget<T>],
    flow_weight_scale: f64,
) -> Result<Var> {
    check_counts(logits.len(), targets.len())?;
    let mut parts = Vec::with_capacity(logits.len());
    let mut count = 0usize;
    let scale = T::lit(flow_weight_scale);
    for (&l, t) in logits.iter().zip(targets) {
        t.occupancy
            .expect_shape(tape.shape(l), "occupancy logits")?;
        let [n, c, h, w] = t.occupancy.shape();
        let fx = t.flow.select_channels(0, 1)?;
        let fy = t.flow.select_channels(1, 1)?;
        let magnitude = fx.zip_map(&fy, |a, b| a.hypot(b))?;
        let weight = FeatureGrid::from_fn([n, c, h, w], |[b, ch, y, x]| {
            let o = t.occupancy.at(b, ch, y, x);
            o * (magnitude.at(b, 0, y, x) / scale + T::one()) + T::one()
        });
        let target = tape.constant(t.occupancy.clone());
        let bce = tape.bce_with_logits(l, target)?;
        let weight = tape.constant(weight);
        let weighted = tape.mul(bce, weight)?;
        parts.push(tape.sum(weighted));
        count += n * c * h * w;
    }
    if count == 0 {
        return Ok(zero(tape));
    }
    let total = sum_all(tape, &parts)?;
    Ok(tape.scale(total, T::lit(1.0 / count as f64)))
}

/// `(1 / sum O_obs) * sum O_obs * (|dx| + |dy|)` over all waypoints; zero when
/// nothing is observed.
pub fn flow_loss<T: Real>(
    tape: &mut Tape<T>,
    flows: &[Var],
    targets: &[WaypointTarget<T>],
    penalty: FlowPenalty,
) -> Result<Var> {
    check_counts(flows.len(), targets.len())?;
    let mut parts = Vec::with_capacity(flows.len());
    let mut alpha = T::zero();
    for (&f, t) in flows.iter().zip(targets) {
        t.flow.expect_shape(tape.shape(f), "flow prediction")?;
        let obs = t.observed();
        alpha = alpha + obs.sum();
        let mask = concat_channels(&[&obs, &obs])?;
        let gt = tape.constant(t.flow.clone());
        let diff = tape.sub(f, gt)?;
        let err = match penalty {
            FlowPenalty::L1 => tape.abs(diff),
            FlowPenalty::Squared => tape.square(diff),
        };
        let mask = tape.constant(mask);
        let masked = tape.mul(err, mask)?;
        parts.push(tape.sum(masked));
    }
    if alpha <= T::zero() {
        return Ok(zero(tape));
    }
    let total = sum_all(tape, &parts)?;
    Ok(tape.scale(total, alpha.recip()))
}

/// Mean over waypoints of `(1 / sum O^k) * sum (O^k * warp(O^{k-1}, F^k) - O^k)^2`;
/// waypoints with empty `O^k` contribute zero.
pub fn trace_loss<T: Real>(tape: &mut Tape<T>, flows: &[Var], targets: &[WaypointTarget<T>]) -> Result<Var> {
    check_counts(flows.len(), targets.len())?;
    if flows.is_empty() {
        return Ok(zero(tape));
    }
    let mut parts = Vec::with_capacity(flows.len());
    for (&f, t) in flows.iter().zip(targets) {
        let current = t.total();
        let alpha = current.sum();
        if alpha <= T::zero() {
            continue;
        }
        let prev = tape.constant(t.previous.clone());
        let warped = tape.warp(prev, f)?;
        let cur = tape.constant(current);
        let gated = tape.mul(warped, cur)?;
        let resid = tape.sub(gated, cur)?;
        let sq = tape.square(resid);
        let s = tape.sum(sq);
        parts.push(tape.scale(s, alpha.recip()));
    }
    let total = sum_all(tape, &parts)?;
    Ok(tape.scale(total, T::lit(1.0 / flows.len() as f64)))
}

/// Weighted total and its components, all from one set of predictions.
pub fn sample_loss<T: Real>(
    tape: &mut Tape<T>,
    preds: &[Prediction<Var>],
    targets: &[WaypointTarget<T>],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let logits: Vec<Var> = preds.iter().map(|p| p.occupancy).collect();
    let flows: Vec<Var> = preds.iter().map(|p| p.flow).collect();
    let occ = occupancy_loss(tape, &logits, targets, weights.flow_weight_scale)?;
    let flow = flow_loss(tape, &flows, targets, weights.flow_penalty)?;
    let trace = trace_loss(tape, &flows, targets)?;
    let value = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    let breakdown = weights.combine(value(tape, occ), value(tape, flow), value(tape, trace));
    let occ = tape.scale(occ, T::lit(weights.occupancy));
    let flow = tape.scale(flow, T::lit(weights.flow));
    let trace = tape.scale(trace, T::lit(weights.trace));
    let total = sum_all(tape, &[occ, flow, trace])?;
    Ok((total, breakdown))
}

/// [`sample_loss`] on plain tensors.
pub fn evaluate_loss<T: Real>(
    preds: &[Prediction<FeatureGrid<T>>],
    targets: &[WaypointTarget<T>],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars: Vec<Prediction<Var>> = preds
        .iter()
        .map(|p| Prediction {
            occupancy: tape.constant(p.occupancy.clone()),
            flow: tape.constant(p.flow.clone()),
        })
        .collect();
    Ok(sample_loss(&mut tape, &vars, targets, weights)?.1)
}
