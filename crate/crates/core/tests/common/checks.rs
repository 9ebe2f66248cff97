//! Checks shared by the focused integration tests and the acceptance run.
//! Each returns the worst deviation it saw.

use ccflow::grid::bilinear_warp;
use ccflow::losses::{evaluate_loss, waypoint_targets, FlowPenalty, LossWeights, WaypointTarget};
use ccflow::metrics::{auc_pr, evaluate, oracle_predictions, soft_iou};
use ccflow::model::{
    accumulate_step, forecast_step, init_params, CellParams, ModelConfig, ModelParams, Prediction, RecurrentState,
};
use ccflow::scenario::{sample_scenario, RasterMode, SampleRecord, WorldConfig};
use ccflow::{FeatureGrid, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn randomized(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> ModelParams<G> {
    init_params(cfg, rng.gen())
        .unwrap()
        .cast::<f64>()
        .map(|_, g| random_grid(rng, g.shape(), 0.6))
}

fn cell_case(rng: &mut ChaCha8Rng, forecast: bool) -> f64 {
    let c = [4, 8, 16][rng.gen_range(0..3)];
    let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let mut cfg = ModelConfig::new(c, 4 * h, 4 * w, 2);
    cfg.gate_depth = rng.gen_range(1..=3);
    let params = randomized(rng, &cfg);
    let s = [rng.gen_range(1..=2), c, h, w];
    let (x, h0, c0) = (random_grid(rng, s, 1.0), random_grid(rng, s, 0.9), random_grid(rng, s, 1.5));

    let mut tape = Tape::<f64>::new();
    let p = params.to_tape(&mut tape, false);
    let state = RecurrentState {
        hidden: tape.constant(h0.clone()),
        cell: tape.constant(c0.clone()),
    };
    let (got, want) = if forecast {
        let next = forecast_step(&mut tape, &p, &cfg, state).unwrap();
        let cp: &CellParams<G> = params.forecast.as_ref().unwrap();
        (next, forecast_ref(&cfg, cp, &h0, &c0))
    } else {
        let xv = tape.constant(x.clone());
        let next = accumulate_step(&mut tape, &p, &cfg, xv, state).unwrap();
        (next, accumulate_ref(&cfg, &params.accumulation, &x, &h0, &c0))
    };
    let dh = tape.value(got.hidden).max_abs_diff(&want.0);
    let dc = tape.value(got.cell).max_abs_diff(&want.1);
    dh.max(dc)
}

/// Both recurrent cells against scalar-loop transcriptions on grids up to
/// 4x4: (accumulation, forecast).
pub fn cell_fidelity(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..cases {
        worst.0 = worst.0.max(cell_case(&mut rng, false));
        worst.1 = worst.1.max(cell_case(&mut rng, true));
    }
    worst
}

pub fn random_waypoints(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Vec<RefWaypoint> {
    (0..k)
        .map(|_| RefWaypoint {
            logits: random_grid(rng, [1, 2, h, w], 4.0),
            occupancy: binary_grid(rng, [1, 2, h, w], 0.35),
            pred_flow: random_grid(rng, [1, 2, h, w], 2.0),
            gt_flow: random_grid(rng, [1, 2, h, w], 3.0),
            previous: binary_grid(rng, [1, 1, h, w], 0.4),
        })
        .collect()
}

pub fn as_targets(w: &[RefWaypoint]) -> Vec<WaypointTarget<f64>> {
    w.iter()
        .map(|wp| WaypointTarget {
            occupancy: wp.occupancy.clone(),
            flow: wp.gt_flow.clone(),
            previous: wp.previous.clone(),
        })
        .collect()
}

pub fn as_logit_preds(w: &[RefWaypoint]) -> Vec<Prediction<G>> {
    w.iter()
        .map(|wp| Prediction {
            occupancy: wp.logits.clone(),
            flow: wp.pred_flow.clone(),
        })
        .collect()
}

/// All three loss terms and the weighted total against scalar
/// transcriptions on inputs of at most 16 cells.
pub fn loss_fidelity(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = LossWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = rng.gen_range(1..=4);
        let wps = random_waypoints(&mut rng, k, h, w);
        let got = evaluate_loss(&as_logit_preds(&wps), &as_targets(&wps), &weights).unwrap();
        let occ = occupancy_loss_ref(&wps, 10.0);
        let flow = flow_loss_ref(&wps);
        let trace = trace_loss_ref(&wps);
        let total = 1000.0 * occ + 25.0 * flow + 10.0 * trace;
        for (a, b) in [
            (got.occupancy, occ),
            (got.flow, flow),
            (got.trace, trace),
            (got.total, total),
        ] {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    worst
}

/// `auc_pr` and `soft_iou` against enumeration on every binary 3x3 ground
/// truth, each paired with `per_gt` random prediction grids.
pub fn metric_oracles(per_gt: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut auc_err, mut iou_err) = (0.0f64, 0.0f64);
    for bits in 0u32..512 {
        let gt: Vec<f64> = (0..9).map(|i| ((bits >> i) & 1) as f64).collect();
        let g = FeatureGrid::from_vec([1, 1, 3, 3], gt.clone()).unwrap();
        for j in 0..per_gt {
            let pred: Vec<f64> = (0..9)
                .map(|_| match j % 3 {
                    // coarse values land exactly on thresholds
                    0 => rng.gen_range(0..=99) as f64 / 99.0,
                    1 => rng.gen_range(0..=4) as f64 / 4.0,
                    _ => rng.gen::<f64>(),
                })
                .collect();
            let p = FeatureGrid::from_vec([1, 1, 3, 3], pred.clone()).unwrap();
            auc_err = auc_err.max((auc_pr(&p, &g).unwrap() - auc_brute(&pred, &gt, 100)).abs());
            iou_err = iou_err.max((soft_iou(&p, &g).unwrap() - soft_iou_brute(&pred, &gt)).abs());
        }
    }
    (auc_err, iou_err)
}

fn rot_pred(p: &Prediction<G>) -> Prediction<G> {
    Prediction {
        occupancy: p.occupancy.rot180(),
        flow: p.flow.rot180().map(|v| -v),
    }
}

/// Every loss term and metric before and after a 180 degree rotation with
/// flow negation, over random batches.
pub fn rotation_invariance(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for b in 0..batches {
        let (h, w) = (rng.gen_range(3..=9), rng.gen_range(3..=9));
        let k = rng.gen_range(1..=3);
        let wps = random_waypoints(&mut rng, k, h, w);
        let targets = as_targets(&wps);
        let logits = as_logit_preds(&wps);
        let rot_targets: Vec<_> = targets.iter().map(|t| t.rot180()).collect();
        let rot_logits: Vec<_> = logits.iter().map(rot_pred).collect();
        let mut weights = LossWeights::default();
        if b % 2 == 1 {
            weights.flow_penalty = FlowPenalty::Squared;
        }
        let a = evaluate_loss(&logits, &targets, &weights).unwrap();
        let r = evaluate_loss(&rot_logits, &rot_targets, &weights).unwrap();
        for (x, y) in [
            (a.occupancy, r.occupancy),
            (a.flow, r.flow),
            (a.trace, r.trace),
            (a.total, r.total),
        ] {
            worst = worst.max((x - y).abs() / x.abs().max(1.0));
        }
        let probs: Vec<Prediction<G>> = logits
            .iter()
            .map(|p| Prediction {
                occupancy: map(&p.occupancy, sigmoid),
                flow: p.flow.clone(),
            })
            .collect();
        let rot_probs: Vec<_> = probs.iter().map(rot_pred).collect();
        let ma = evaluate(&probs, &targets).unwrap();
        let mr = evaluate(&rot_probs, &rot_targets).unwrap();
        for (x, y) in ma.mean.values().iter().zip(mr.mean.values()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub struct Linchpin {
    pub warp_error: f64,
    pub trace_loss: f64,
    pub flow_grounded: (f64, f64),
    pub moving_waypoints: usize,
}

/// Ground-truth warp consistency on integer-displacement scenarios.
pub fn warp_linchpin(scenarios: u64) -> Linchpin {
    let cfg = WorldConfig {
        integer_displacement: true,
        keep_inside: true,
        ..WorldConfig::default()
    };
    let mut out = Linchpin {
        warp_error: 0.0,
        trace_loss: 0.0,
        flow_grounded: (1.0, 1.0),
        moving_waypoints: 0,
    };
    for seed in 0..scenarios {
        let rec = SampleRecord::from_scenario(&sample_scenario(&cfg, seed).unwrap(), RasterMode::Womd);
        let targets: Vec<WaypointTarget<f64>> = waypoint_targets(&rec).iter().map(|t| t.cast()).collect();
        for t in &targets {
            let cur = t.total();
            let warped = bilinear_warp(&t.previous, &t.flow).unwrap();
            let masked = cur.zip_map(&warped, |o, w| o * w).unwrap();
            out.warp_error = out.warp_error.max(masked.max_abs_diff(&cur));
            out.moving_waypoints += (t.flow.max_abs() > 0.0) as usize;
        }
        let oracle = oracle_predictions(&targets);
        let logits: Vec<Prediction<G>> = oracle
            .iter()
            .map(|p| Prediction {
                occupancy: p.occupancy.clone(),
                flow: p.flow.clone(),
            })
            .collect();
        let loss = evaluate_loss(&logits, &targets, &LossWeights::default()).unwrap();
        out.trace_loss = out.trace_loss.max(loss.trace.abs());
        let report = evaluate(&oracle, &targets).unwrap();
        for m in &report.per_waypoint {
            out.flow_grounded.0 = out.flow_grounded.0.min(m.flow_grounded_auc);
            out.flow_grounded.1 = out.flow_grounded.1.min(m.flow_grounded_soft_iou);
        }
    }
    out
}
