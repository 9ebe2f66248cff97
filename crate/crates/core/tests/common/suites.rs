//! Randomized gradient-check cases for every differentiable op, both
//! recurrent cells and the three losses.

use ccflow::grid::Activation;
use ccflow::losses::{flow_loss, occupancy_loss, trace_loss, FlowPenalty, WaypointTarget};
use ccflow::model::{accumulate_step, forecast_step, init_params, ModelConfig, ModelParams, RecurrentState};
use ccflow::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{binary_grid, gradient_check, random_grid, G};

pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn shape(rng: &mut ChaCha8Rng, c: [usize; 2], hw: [usize; 2]) -> [usize; 4] {
    [
        rng.gen_range(1..=2),
        rng.gen_range(c[0]..=c[1]),
        rng.gen_range(hw[0]..=hw[1]),
        rng.gen_range(hw[0]..=hw[1]),
    ]
}

fn run(
    name: &'static str,
    cases: usize,
    rng: &mut ChaCha8Rng,
    mut case: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> SuiteResult {
    let worst = (0..cases).map(|_| case(rng)).fold(0.0, f64::max);
    SuiteResult { name, cases, worst }
}

/// Parameters for a cell check: the named cell's tensors (randomized so
/// no gate sits at its init) and a tape builder that feeds the rest as
/// constants.
fn cell_setup(rng: &mut ChaCha8Rng, latent: usize, hw: [usize; 2], prefix: &str) -> (ModelConfig, ModelParams<G>, Vec<G>) {
    let cfg = ModelConfig::new(latent, 4 * hw[0], 4 * hw[1], 2);
    let params = init_params(&cfg, rng.gen()).unwrap().cast::<f64>();
    let params = params.map(|name, g| {
        if name.starts_with(prefix) {
            random_grid(rng, g.shape(), 0.5)
        } else {
            g.clone()
        }
    });
    let mut mine = Vec::new();
    params.for_each(|name, g| {
        if name.starts_with(prefix) {
            mine.push(g.clone());
        }
    });
    (cfg, params, mine)
}

fn bind(tape: &mut Tape<f64>, params: &ModelParams<G>, prefix: &str, vars: &[Var]) -> ModelParams<Var> {
    let mut it = vars.iter();
    params.map(|name, g| {
        if name.starts_with(prefix) {
            *it.next().expect("one var per cell tensor")
        } else {
            tape.constant(g.clone())
        }
    })
}

fn targets(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Vec<WaypointTarget<f64>> {
    (0..k)
        .map(|_| WaypointTarget {
            occupancy: binary_grid(rng, [1, 2, h, w], 0.3),
            flow: random_grid(rng, [1, 2, h, w], 3.0),
            previous: binary_grid(rng, [1, 1, h, w], 0.4),
        })
        .collect()
}

/// Every suite with `cases` random shapes each.
pub fn gradient_suites(cases: usize, seed: u64) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let all = usize::MAX;
    let mut out = Vec::new();

    out.push(run("conv2d", cases, r, |r| {
        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let xs = shape(r, [1, 3], [2, 6]);
        let co = r.gen_range(1..=3);
        let mut inputs = vec![random_grid(r, xs, 1.0), random_grid(r, [co, xs[1], k, k], 1.0)];
        let bias = r.gen_bool(0.5);
        if bias {
            inputs.push(random_grid(r, [1, co, 1, 1], 1.0));
        }
        gradient_check(r, &inputs, all, |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride).unwrap())
    }));

    out.push(run("conv_transpose2d", cases, r, |r| {
        let k = r.gen_range(1..=4);
        let stride = r.gen_range(1..=2);
        let xs = shape(r, [1, 3], [2, 4]);
        let co = r.gen_range(1..=3);
        let mut inputs = vec![random_grid(r, xs, 1.0), random_grid(r, [xs[1], co, k, k], 1.0)];
        if r.gen_bool(0.5) {
            inputs.push(random_grid(r, [1, co, 1, 1], 1.0));
        }
        gradient_check(r, &inputs, all, |t, v| {
            t.conv_transpose2d(v[0], v[1], v.get(2).copied(), stride).unwrap()
        })
    }));

    out.push(run("group_norm", cases, r, |r| {
        let (c, groups) = [(1, 1), (2, 1), (2, 2), (4, 2), (6, 3), (8, 1)][r.gen_range(0..6)];
        let mut xs = shape(r, [1, 1], [2, 5]);
        xs[1] = c;
        let inputs = vec![
            random_grid(r, xs, 2.0),
            random_grid(r, [1, c, 1, 1], 1.5),
            random_grid(r, [1, c, 1, 1], 1.0),
        ];
        gradient_check(r, &inputs, all, |t, v| t.group_norm(v[0], groups, v[1], v[2]).unwrap())
    }));

    for (name, kind) in [
        ("leaky_relu", Activation::LeakyRelu { slope: 0.01 }),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        out.push(run(name, cases, r, |r| {
            let xs = shape(r, [1, 3], [1, 5]);
            let inputs = vec![random_grid(r, xs, 3.0)];
            gradient_check(r, &inputs, all, |t, v| t.activate(v[0], kind))
        }));
    }

    out.push(run("warp", cases, r, |r| {
        let xs = shape(r, [1, 3], [2, 6]);
        let inputs = vec![random_grid(r, xs, 1.0), random_grid(r, [xs[0], 2, xs[2], xs[3]], 2.5)];
        gradient_check(r, &inputs, all, |t, v| t.warp(v[0], v[1]).unwrap())
    }));

    out.push(run("concat", cases, r, |r| {
        let base = shape(r, [1, 3], [1, 4]);
        let parts = r.gen_range(1..=3);
        let inputs: Vec<G> = (0..parts)
            .map(|_| {
                let c = r.gen_range(1..=3);
                random_grid(r, [base[0], c, base[2], base[3]], 1.0)
            })
            .collect();
        gradient_check(r, &inputs, all, |t, v| t.concat(v).unwrap())
    }));

    out.push(run("slice", cases, r, |r| {
        let xs = shape(r, [2, 5], [1, 4]);
        let start = r.gen_range(0..xs[1]);
        let len = r.gen_range(1..=xs[1] - start);
        let inputs = vec![random_grid(r, xs, 1.0)];
        gradient_check(r, &inputs, all, |t, v| t.slice(v[0], start, len).unwrap())
    }));

    type Binary = fn(&mut Tape<f64>, Var, Var) -> Var;
    let binaries: [(&'static str, Binary); 4] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("bce_with_logits", |t, a, b| t.bce_with_logits(a, b).unwrap()),
    ];
    for (name, op) in binaries {
        out.push(run(name, cases, r, |r| {
            let xs = shape(r, [1, 3], [1, 5]);
            let inputs = vec![random_grid(r, xs, 3.0), random_grid(r, xs, 1.0)];
            gradient_check(r, &inputs, all, |t, v| op(t, v[0], v[1]))
        }));
    }

    type Unary = fn(&mut Tape<f64>, Var) -> Var;
    let unaries: [(&'static str, Unary); 4] = [
        ("scale", |t, a| t.scale(a, -1.7)),
        ("abs", |t, a| t.abs(a)),
        ("square", |t, a| t.square(a)),
        ("sum", |t, a| t.sum(a)),
    ];
    for (name, op) in unaries {
        out.push(run(name, cases, r, |r| {
            let xs = shape(r, [1, 3], [1, 5]);
            let inputs = vec![random_grid(r, xs, 2.0)];
            gradient_check(r, &inputs, all, |t, v| op(t, v[0]))
        }));
    }

    out.push(run("accumulation_cell", cases, r, |r| {
        let c = [4, 8, 16][r.gen_range(0..3)];
        let hw = [r.gen_range(2..=3), r.gen_range(2..=3)];
        let (cfg, params, mine) = cell_setup(r, c, hw, "accumulation.");
        let n = r.gen_range(1..=2);
        let s = [n, c, hw[0], hw[1]];
        let mut inputs = vec![random_grid(r, s, 1.0), random_grid(r, s, 0.9), random_grid(r, s, 1.0)];
        inputs.extend(mine);
        gradient_check(r, &inputs, 8, |t, v| {
            let p = bind(t, &params, "accumulation.", &v[3..]);
            let state = RecurrentState { hidden: v[1], cell: v[2] };
            let next = accumulate_step(t, &p, &cfg, v[0], state).unwrap();
            t.concat(&[next.hidden, next.cell]).unwrap()
        })
    }));

    out.push(run("forecast_cell", cases, r, |r| {
        let c = [4, 8, 16][r.gen_range(0..3)];
        let hw = [r.gen_range(2..=3), r.gen_range(2..=3)];
        let (cfg, params, mine) = cell_setup(r, c, hw, "forecast.");
        let n = r.gen_range(1..=2);
        let s = [n, c, hw[0], hw[1]];
        let mut inputs = vec![random_grid(r, s, 0.9), random_grid(r, s, 1.0)];
        inputs.extend(mine);
        gradient_check(r, &inputs, 8, |t, v| {
            let p = bind(t, &params, "forecast.", &v[2..]);
            let state = RecurrentState { hidden: v[0], cell: v[1] };
            let next = forecast_step(t, &p, &cfg, state).unwrap();
            t.concat(&[next.hidden, next.cell]).unwrap()
        })
    }));

    out.push(run("occupancy_loss", cases, r, |r| {
        let (k, h, w) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        let tg = targets(r, k, h, w);
        let inputs: Vec<G> = (0..k).map(|_| random_grid(r, [1, 2, h, w], 3.0)).collect();
        gradient_check(r, &inputs, all, |t, v| occupancy_loss(t, v, &tg, 10.0).unwrap())
    }));

    out.push(run("flow_loss", cases, r, |r| {
        let (k, h, w) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        let tg = targets(r, k, h, w);
        let penalty = if r.gen_bool(0.5) { FlowPenalty::L1 } else { FlowPenalty::Squared };
        let inputs: Vec<G> = (0..k).map(|_| random_grid(r, [1, 2, h, w], 3.0)).collect();
        gradient_check(r, &inputs, all, |t, v| flow_loss(t, v, &tg, penalty).unwrap())
    }));

    out.push(run("trace_loss", cases, r, |r| {
        let (k, h, w) = (r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(2..=5));
        let tg = targets(r, k, h, w);
        let inputs: Vec<G> = (0..k).map(|_| random_grid(r, [1, 2, h, w], 1.5)).collect();
        gradient_check(r, &inputs, all, |t, v| trace_loss(t, v, &tg).unwrap())
    }));

    out
}
