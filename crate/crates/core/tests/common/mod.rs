//! Independent scalar transcriptions used as oracles by the integration
//! tests, plus a finite-difference gradient checker.
#![allow(dead_code)]

use ccflow::model::{CellParams, GateNet, ModelConfig};
use ccflow::{FeatureGrid, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type G = FeatureGrid<f64>;

pub fn random_grid(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> G {
    FeatureGrid::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn binary_grid(rng: &mut ChaCha8Rng, shape: [usize; 4], p: f64) -> G {
    FeatureGrid::from_fn(shape, |_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
}

fn get(x: &G, n: usize, c: usize, y: isize, xx: isize) -> f64 {
    let [_, _, h, w] = x.shape();
    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
        0.0
    } else {
        x.at(n, c, y as usize, xx as usize)
    }
}

/// Zero-padded cross-correlation, `pad = (k - 1) / 2`, `out = ceil(in / s)`.
pub fn conv_ref(x: &G, w: &G, b: Option<&G>, stride: usize) -> G {
    let [n, ci, h, wd] = x.shape();
    let [co, ci2, k, _] = w.shape();
    assert_eq!(ci, ci2);
    let pad = ((k - 1) / 2) as isize;
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    FeatureGrid::from_fn([n, co, oh, ow], |[b_, o, y, x_]| {
        let mut s = b.map_or(0.0, |b| b.at(0, o, 0, 0));
        for c in 0..ci {
            for i in 0..k {
                for j in 0..k {
                    let yy = (y * stride + i) as isize - pad;
                    let xx = (x_ * stride + j) as isize - pad;
                    s += w.at(o, c, i, j) * get(x, b_, c, yy, xx);
                }
            }
        }
        s
    })
}

/// Scatter-form transposed convolution, `pad = (k + 1 - s) / 2`, `out = in * s`.
pub fn tconv_ref(x: &G, w: &G, b: Option<&G>, stride: usize) -> G {
    let [n, ci, h, wd] = x.shape();
    let [ci2, co, k, _] = w.shape();
    assert_eq!(ci, ci2);
    let pad = ((k + 1 - stride) / 2) as isize;
    let (oh, ow) = (h * stride, wd * stride);
    let mut out = FeatureGrid::from_fn([n, co, oh, ow], |[_, o, _, _]| b.map_or(0.0, |b| b.at(0, o, 0, 0)));
    for b_ in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for x_ in 0..wd {
                    for o in 0..co {
                        for i in 0..k {
                            for j in 0..k {
                                let oy = (y * stride + i) as isize - pad;
                                let ox = (x_ * stride + j) as isize - pad;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let v = out.at(b_, o, oy as usize, ox as usize)
                                        + x.at(b_, c, y, x_) * w.at(c, o, i, j);
                                    out.set(b_, o, oy as usize, ox as usize, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn group_norm_ref(x: &G, groups: usize, gamma: &G, beta: &G) -> G {
    let [n, c, h, w] = x.shape();
    let per = c / groups;
    let mut out = x.clone();
    for b in 0..n {
        for g in 0..groups {
            let mut vals = Vec::new();
            for ch in g * per..(g + 1) * per {
                for y in 0..h {
                    for xx in 0..w {
                        vals.push(x.at(b, ch, y, xx));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            let inv = 1.0 / (v + 1e-5).sqrt();
            for ch in g * per..(g + 1) * per {
                for y in 0..h {
                    for xx in 0..w {
                        let z = (x.at(b, ch, y, xx) - m) * inv;
                        out.set(b, ch, y, xx, z * gamma.at(0, ch, 0, 0) + beta.at(0, ch, 0, 0));
                    }
                }
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn map(x: &G, f: impl Fn(f64) -> f64) -> G {
    FeatureGrid::from_fn(x.shape(), |[n, c, y, xx]| f(x.at(n, c, y, xx)))
}

pub fn zip(a: &G, b: &G, f: impl Fn(f64, f64) -> f64) -> G {
    assert_eq!(a.shape(), b.shape());
    FeatureGrid::from_fn(a.shape(), |[n, c, y, x]| f(a.at(n, c, y, x), b.at(n, c, y, x)))
}

pub fn concat_ref(a: &G, b: &G) -> G {
    let [n, ca, h, w] = a.shape();
    let cb = b.shape()[1];
    FeatureGrid::from_fn([n, ca + cb, h, w], |[b_, c, y, x]| {
        if c < ca {
            a.at(b_, c, y, x)
        } else {
            b.at(b_, c - ca, y, x)
        }
    })
}

/// `out(y, x) = src(y + fy, x + fx)` by bilinear interpolation, zero outside.
pub fn warp_ref(src: &G, flow: &G) -> G {
    FeatureGrid::from_fn(src.shape(), |[b, c, y, x]| {
        let px = x as f64 + flow.at(b, 0, y, x);
        let py = y as f64 + flow.at(b, 1, y, x);
        let (x0, y0) = (px.floor(), py.floor());
        let (ax, ay) = (px - x0, py - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        get(src, b, c, y0, x0) * (1.0 - ax) * (1.0 - ay)
            + get(src, b, c, y0, x0 + 1) * ax * (1.0 - ay)
            + get(src, b, c, y0 + 1, x0) * (1.0 - ax) * ay
            + get(src, b, c, y0 + 1, x0 + 1) * ax * ay
    })
}

pub fn gate_ref(cfg: &ModelConfig, net: &GateNet<G>, x: &G) -> G {
    let mut h = x.clone();
    for (i, layer) in net.convs.iter().enumerate() {
        h = conv_ref(&h, &layer.weight, layer.bias.as_ref(), 1);
        if let Some(norm) = net.norms.get(i) {
            h = map(&h, |v| if v >= 0.0 { v } else { cfg.leaky_slope * v });
            h = group_norm_ref(&h, cfg.groups(h.shape()[1]).unwrap(), &norm.gamma, &norm.beta);
        }
    }
    h
}

/// Gated update shared by both cells, given the gate input.
pub fn cell_ref(cfg: &ModelConfig, p: &CellParams<G>, gate_in: &G, cell: &G) -> (G, G) {
    let i = map(&gate_ref(cfg, &p.input, gate_in), sigmoid);
    let f = map(&gate_ref(cfg, &p.forget, gate_in), sigmoid);
    let g = map(&gate_ref(cfg, &p.cell, gate_in), f64::tanh);
    let o = map(&gate_ref(cfg, &p.output, gate_in), sigmoid);
    let c_new = FeatureGrid::from_fn(cell.shape(), |[n, ch, y, x]| {
        f.at(n, ch, y, x) * cell.at(n, ch, y, x) + i.at(n, ch, y, x) * g.at(n, ch, y, x)
    });
    let groups = cfg.groups(cfg.latent_channels).unwrap();
    let normed = group_norm_ref(&c_new, groups, &p.cell_norm.gamma, &p.cell_norm.beta);
    let h_new = zip(&o, &normed, |a, b| a * b.tanh());
    (h_new, c_new)
}

/// Accumulation step: gates see `[x, h]`.
pub fn accumulate_ref(cfg: &ModelConfig, p: &CellParams<G>, x: &G, h: &G, c: &G) -> (G, G) {
    cell_ref(cfg, p, &concat_ref(x, h), c)
}

/// Forecasting step: gates see `h` only.
pub fn forecast_ref(cfg: &ModelConfig, p: &CellParams<G>, h: &G, c: &G) -> (G, G) {
    cell_ref(cfg, p, h, c)
}

fn bce(l: f64, t: f64) -> f64 {
    -(t * sigmoid(l).ln() + (1.0 - t) * (1.0 - sigmoid(l)).ln())
}

/// Per-waypoint plain arrays for the loss oracles.
pub struct RefWaypoint {
    pub logits: G,
    pub occupancy: G,
    pub pred_flow: G,
    pub gt_flow: G,
    pub previous: G,
}

pub fn occupancy_loss_ref(w: &[RefWaypoint], alpha: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for wp in w {
        let [_, c, h, wd] = wp.occupancy.shape();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..wd {
                    let o = wp.occupancy.at(0, ch, y, x);
                    let fx = wp.gt_flow.at(0, 0, y, x);
                    let fy = wp.gt_flow.at(0, 1, y, x);
                    let weight = o * ((fx * fx + fy * fy).sqrt() / alpha + 1.0);
                    sum += bce(wp.logits.at(0, ch, y, x), o) * (weight + 1.0);
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        0.0
    } else {
        sum / count
    }
}

pub fn flow_loss_ref(w: &[RefWaypoint]) -> f64 {
    let (mut sum, mut alpha) = (0.0, 0.0);
    for wp in w {
        let [_, _, h, wd] = wp.occupancy.shape();
        for y in 0..h {
            for x in 0..wd {
                let o = wp.occupancy.at(0, 0, y, x);
                alpha += o;
                sum += o
                    * ((wp.pred_flow.at(0, 0, y, x) - wp.gt_flow.at(0, 0, y, x)).abs()
                        + (wp.pred_flow.at(0, 1, y, x) - wp.gt_flow.at(0, 1, y, x)).abs());
            }
        }
    }
    if alpha == 0.0 {
        0.0
    } else {
        sum / alpha
    }
}

pub fn total_occupancy(occ: &G) -> G {
    let [n, _, h, w] = occ.shape();
    FeatureGrid::from_fn([n, 1, h, w], |[b, _, y, x]| (occ.at(b, 0, y, x) + occ.at(b, 1, y, x)).min(1.0))
}

pub fn trace_loss_ref(w: &[RefWaypoint]) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for wp in w {
        let cur = total_occupancy(&wp.occupancy);
        let alpha = cur.sum();
        if alpha == 0.0 {
            continue;
        }
        let warped = warp_ref(&wp.previous, &wp.pred_flow);
        let [_, _, h, wd] = cur.shape();
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..wd {
                let o = cur.at(0, 0, y, x);
                let r = o * warped.at(0, 0, y, x) - o;
                s += r * r;
            }
        }
        total += s / alpha;
    }
    total / w.len() as f64
}

/// PR-AUC by direct enumeration of the thresholds `i / (n - 1)`.
pub fn auc_brute(pred: &[f64], gt: &[f64], n: usize) -> f64 {
    let positives = gt.iter().filter(|&&g| g > 0.0).count();
    if positives == 0 {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let (mut tp, mut fp) = (0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            if *p >= t {
                if *g > 0.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp > 0 {
            pts.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    // best precision at equal or higher recall
    let interp: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(r, _)| {
            let best = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            (r, best)
        })
        .collect();
    let mut sorted = interp;
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut area = 0.0;
    for w in sorted.windows(2) {
        area += (w[0].0 - w[1].0) * (w[0].1 + w[1].1) / 2.0;
    }
    let last = sorted[sorted.len() - 1];
    area + last.0 * last.1
}

pub fn soft_iou_brute(pred: &[f64], gt: &[f64]) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let union: f64 = pred.iter().zip(gt).map(|(p, g)| p + g - p * g).sum();
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of `sum(out * R)` for random `R`, checked on up to
/// `max_entries` entries of each input. Returns the worst input's error.
pub fn gradient_check(
    rng: &mut ChaCha8Rng,
    inputs: &[G],
    max_entries: usize,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[G], proj: Option<&G>, want_grads: bool| -> (f64, Option<Vec<G>>, G) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out);
        let r = match proj {
            Some(r) => r.clone(),
            None => FeatureGrid::full(shape, 0.0),
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).data()[0];
        let grads = want_grads.then(|| {
            tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| FeatureGrid::zeros(tape.shape(v))))
                .collect()
        });
        (value, grads, tape.value(out).clone())
    };
    let (_, _, out) = eval(inputs, None, false);
    let proj = random_grid(rng, out.shape(), 1.0);
    let (_, grads, _) = eval(inputs, Some(&proj), true);
    let grads = grads.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            (0..max_entries).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut diff, mut an, mut nu) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &picks {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] += h;
            let plus = eval(&vals, Some(&proj), false).0;
            vals[k].data_mut()[i] -= 2.0 * h;
            let minus = eval(&vals, Some(&proj), false).0;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[k].data()[i];
            diff += (numeric - analytic).powi(2);
            an += analytic * analytic;
            nu += numeric * numeric;
        }
        let scale = an.sqrt().max(nu.sqrt());
        let err = if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale };
        worst = worst.max(err);
    }
    worst
}
pub mod suites;
pub mod checks;

/// Tiny single-agent world for fast end-to-end runs: 16x16 cells, three
/// history frames, two waypoints.
pub fn micro_world() -> ccflow::scenario::WorldConfig {
    use ccflow::scenario::{GridGeometry, Timeline, WorldConfig};
    WorldConfig {
        grid: GridGeometry {
            height: 16,
            width: 16,
            meters_per_cell: 1.0,
        },
        timeline: Timeline {
            history: 3,
            future: 2,
            dt_history: 0.1,
            dt_forecast: 1.0,
        },
        agent_count: [1, 1],
        lane_count: [1, 1],
        stationary_fraction: 0.0,
        turn_fraction: 0.0,
        ego_stationary_fraction: 1.0,
        ..WorldConfig::default()
    }
}

pub fn micro_dataset(dir: &std::path::Path, train: u64, val: u64) -> ccflow::scenario::Dataset {
    use ccflow::scenario::{build_dataset, Dataset, DatasetConfig, RasterMode, Split};
    let cfg = DatasetConfig {
        world: micro_world(),
        raster_mode: RasterMode::Womd,
    };
    let seeds: Vec<(u64, Split)> = (0..train)
        .map(|s| (s, Split::Train))
        .chain((0..val).map(|s| (10_000 + s, Split::Val)))
        .collect();
    build_dataset(&cfg, &seeds, dir).unwrap();
    Dataset::open(dir).unwrap()
}
