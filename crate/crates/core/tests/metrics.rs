mod common;

use ccflow::metrics::{
    auc_pr, evaluate, flow_epe, flow_grounded, oracle_predictions, report_csv, soft_iou, WaypointMetrics,
    WaypointReport, METRIC_COLUMNS,
};
use ccflow::FeatureGrid;
use common::checks::{metric_oracles, rotation_invariance, warp_linchpin};
use common::{auc_brute, G};
use proptest::prelude::*;

fn grid(h: usize, w: usize, v: &[f64]) -> G {
    FeatureGrid::from_vec([1, 1, h, w], v.to_vec()).unwrap()
}

#[test]
fn auc_and_iou_match_enumeration_on_every_3x3_truth() {
    let (auc, iou) = metric_oracles(3, 9);
    assert!(auc <= 1e-9, "auc {auc:e}");
    assert!(iou <= 1e-9, "iou {iou:e}");
}

#[test]
fn auc_reference_points() {
    let gt = grid(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(auc_pr(&gt, &gt).unwrap(), 1.0);
    let flat = grid(2, 2, &[0.5; 4]);
    assert!((auc_pr(&flat, &gt).unwrap() - 0.25).abs() < 1e-12);
    let empty = grid(2, 2, &[0.0; 4]);
    assert_eq!(auc_pr(&flat, &empty).unwrap(), 0.0);
    // predicting nothing above the lowest threshold still counts every cell
    assert!((auc_pr(&empty, &gt).unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn soft_iou_reference_points() {
    let p = grid(1, 3, &[0.5, 1.0, 0.0]);
    let g = grid(1, 3, &[1.0, 1.0, 0.0]);
    // inter 1.5, union 1 + 1 + 0
    assert!((soft_iou(&p, &g).unwrap() - 0.75).abs() < 1e-12);
    let z = grid(1, 3, &[0.0; 3]);
    assert_eq!(soft_iou(&z, &z).unwrap(), 0.0);
}

#[test]
fn epe_is_masked_mean_distance() {
    let pred = FeatureGrid::from_vec([1, 2, 1, 2], vec![3.0, 9.0, 4.0, 9.0]).unwrap();
    let gt = FeatureGrid::zeros([1, 2, 1, 2]);
    let mask = grid(1, 2, &[1.0, 0.0]);
    assert!((flow_epe(&pred, &gt, &mask).unwrap() - 5.0).abs() < 1e-12);
    assert_eq!(flow_epe(&pred, &gt, &grid(1, 2, &[0.0, 0.0])).unwrap(), 0.0);
}

#[test]
fn flow_grounding_shifts_previous_occupancy() {
    // previous occupancy at x = 0, flow points one cell back in x
    let prev = grid(1, 3, &[1.0, 0.0, 0.0]);
    let gt = grid(1, 3, &[0.0, 1.0, 0.0]);
    let pred = grid(1, 3, &[0.9, 0.9, 0.9]);
    let flow = FeatureGrid::from_vec([1, 2, 1, 3], vec![-1.0, -1.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
    let (auc, iou) = flow_grounded(&pred, &flow, &prev, &gt).unwrap();
    assert_eq!(auc, 1.0);
    assert!((iou - 0.9).abs() < 1e-12);
}

#[test]
fn ground_truth_flow_grounds_perfectly() {
    let l = warp_linchpin(20);
    assert!(l.warp_error <= 1e-6);
    assert!(l.trace_loss <= 1e-12);
    assert_eq!(l.flow_grounded.0, 1.0);
    assert!(l.flow_grounded.1 >= 1.0 - 1e-6);
    assert!(l.moving_waypoints > 0);
}

#[test]
fn rotation_leaves_metrics_unchanged() {
    let err = rotation_invariance(20, 3);
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn oracle_scores_perfect_observed_occupancy() {
    let occ = FeatureGrid::from_vec([1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let t = vec![ccflow::losses::WaypointTarget {
        occupancy: occ,
        flow: FeatureGrid::zeros([1, 2, 2, 2]),
        previous: grid(2, 2, &[1.0, 1.0, 0.0, 1.0]),
    }];
    let r = evaluate(&oracle_predictions(&t), &t).unwrap();
    let m = r.mean;
    assert_eq!((m.observed_auc, m.observed_soft_iou), (1.0, 1.0));
    assert_eq!((m.occluded_auc, m.occluded_soft_iou), (1.0, 1.0));
    assert_eq!(m.flow_epe, 0.0);
    assert_eq!((m.flow_grounded_auc, m.flow_grounded_soft_iou), (1.0, 1.0));
}

#[test]
fn report_csv_layout() {
    let a = WaypointReport::new(vec![WaypointMetrics::from_values([1.0; 7]), WaypointMetrics::from_values([0.0; 7])]);
    let b = WaypointReport::new(vec![WaypointMetrics::from_values([0.5; 7]), WaypointMetrics::from_values([0.5; 7])]);
    let csv = report_csv(&[("s0".into(), a.clone()), ("s1".into(), b)]).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], format!("sample,waypoint,{}", METRIC_COLUMNS.join(",")));
    assert_eq!(lines.len(), 1 + 4 + 2 + 1);
    assert!(lines[1].starts_with("s0,1,1,"));
    assert!(lines[5].starts_with("all,1,0.75,"));
    assert!(lines[7].starts_with("all,mean,0.5,"));
    let ragged = WaypointReport::new(vec![WaypointMetrics::from_values([0.0; 7])]);
    assert!(WaypointReport::aggregate(&[a, ragged]).is_err());
}

fn cells() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.0f64..=1.0, n),
            proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_matches_brute_force_and_is_bounded((p, g) in cells()) {
        let n = p.len();
        let got = auc_pr(&grid(1, n, &p), &grid(1, n, &g)).unwrap();
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert!((got - auc_brute(&p, &g, 100)).abs() <= 1e-9);
        let iou = soft_iou(&grid(1, n, &p), &grid(1, n, &g)).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
    }

    #[test]
    fn auc_ignores_cell_order((p, g) in cells(), shift in 0usize..40) {
        let n = p.len();
        let k = shift % n;
        let mut p2 = p.clone();
        let mut g2 = g.clone();
        p2.rotate_left(k);
        g2.rotate_left(k);
        let a = auc_pr(&grid(1, n, &p), &grid(1, n, &g)).unwrap();
        let b = auc_pr(&grid(1, n, &p2), &grid(1, n, &g2)).unwrap();
        prop_assert_eq!(a, b);
    }
}
