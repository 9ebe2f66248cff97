use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, Behavior, FrameMode, GridGeometry, Lane, Pose, Scenario, Timeline};
use crate::error::{Error, Result};

pub(crate) const LANE_PALETTE: [[f32; 3]; 3] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.8, 0.0],
    [0.2, 0.6, 1.0],
];

const EGO_SIZE: [f64; 2] = [4.6, 1.9];
const SPACING: f64 = 0.3;
const LANE_FOLLOW: f64 = 0.7;
const LANE_SPACING: f64 = 3.5;

/// Parameters of the synthetic world. Ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub grid: GridGeometry,
    pub timeline: Timeline,
    pub frame_mode: FrameMode,
    pub agent_count: [usize; 2],
    pub lane_count: [usize; 2],
    /// Meters per second for moving agents.
    pub speed: [f64; 2],
    pub stationary_fraction: f64,
    /// Share of moving agents that turn at constant yaw rate.
    pub turn_fraction: f64,
    /// Magnitude range of turning yaw rates in radians per second.
    pub yaw_rate: [f64; 2],
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub ego_speed: [f64; 2],
    pub ego_stationary_fraction: f64,
    /// Probability that an agent is missing from a given history frame.
    pub history_dropout: f64,
    /// Moving agents advance a whole number of cells per forecast interval.
    pub integer_displacement: bool,
    /// Agents stay fully inside the grid over the whole timeline.
    pub keep_inside: bool,
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grid: GridGeometry {
                height: 64,
                width: 64,
                meters_per_cell: 0.5,
            },
            timeline: Timeline {
                history: 5,
                future: 4,
                dt_history: 0.1,
                dt_forecast: 1.0,
            },
            frame_mode: FrameMode::Static,
            agent_count: [2, 6],
            lane_count: [1, 3],
            speed: [0.5, 2.0],
            stationary_fraction: 0.5,
            turn_fraction: 0.2,
            yaw_rate: [0.05, 0.2],
            length: [3.6, 5.0],
            width: [1.6, 2.1],
            ego_speed: [0.5, 2.0],
            ego_stationary_fraction: 0.5,
            history_dropout: 0.0,
            integer_displacement: false,
            keep_inside: false,
            max_retries: 1000,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

fn check_fraction(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
    }
    Ok(())
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.height == 0 || g.width == 0 || !(g.meters_per_cell > 0.0) {
            return Err(Error::Config(format!("invalid grid geometry {g:?}")));
        }
        let tl = &self.timeline;
        if tl.history == 0 || !(tl.dt_history > 0.0) || !(tl.dt_forecast > 0.0) {
            return Err(Error::Config(format!("invalid timeline {tl:?}")));
        }
        if self.agent_count[0] > self.agent_count[1] || self.lane_count[0] > self.lane_count[1] {
            return Err(Error::Config("count ranges must be ordered".into()));
        }
        check_range("speed", self.speed, 0.0)?;
        check_range("ego_speed", self.ego_speed, 0.0)?;
        check_range("yaw_rate", self.yaw_rate, 1e-6)?;
        check_range("length", self.length, 1e-3)?;
        check_range("width", self.width, 1e-3)?;
        check_fraction("stationary_fraction", self.stationary_fraction)?;
        check_fraction("turn_fraction", self.turn_fraction)?;
        check_fraction("ego_stationary_fraction", self.ego_stationary_fraction)?;
        check_fraction("history_dropout", self.history_dropout)?;
        if self.integer_displacement && self.stationary_fraction < 1.0 && self.integer_steps().is_empty() {
            return Err(Error::Config(
                "speed range admits no whole-cell displacement per forecast interval".into(),
            ));
        }
        Ok(())
    }

    /// Whole-cell displacements per forecast interval allowed by the speed range.
    fn integer_steps(&self) -> Vec<[i32; 2]> {
        let scale = self.timeline.dt_forecast / self.grid.meters_per_cell;
        let (lo, hi) = (self.speed[0] * scale, self.speed[1] * scale);
        let m = hi.ceil() as i32;
        let mut out = Vec::new();
        for dy in -m..=m {
            for dx in -m..=m {
                let r = ((dx * dx + dy * dy) as f64).sqrt();
                if r > 0.0 && r >= lo - 1e-9 && r <= hi + 1e-9 {
                    out.push([dx, dy]);
                }
            }
        }
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Separating-axis test on two oriented rectangles inflated by `SPACING`.
fn overlaps(a: &Agent, pa: &Pose, b: &Agent, pb: &Pose) -> bool {
    let inflate = |ag: &Agent| Agent {
        length: ag.length + SPACING,
        width: ag.width + SPACING,
        ..ag.clone()
    };
    let (a, b) = (inflate(a), inflate(b));
    let ca = a.corners(pa);
    let cb = b.corners(pb);
    for heading in [pa.heading, pb.heading] {
        for axis in [
            [heading.cos(), heading.sin()],
            [-heading.sin(), heading.cos()],
        ] {
            let proj = |cs: &[[f64; 2]; 4]| {
                cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                    let d = c[0] * axis[0] + c[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&ca);
            let (b0, b1) = proj(&cb);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

fn sample_lanes(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<Lane> {
    let [hx, hy] = cfg.grid.half_extent();
    let reach = 2.0 * hx.max(hy);
    let n = rng.gen_range(cfg.lane_count[0]..=cfg.lane_count[1]);
    (0..n)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let cx = rng.gen_range(-0.6..=0.6) * hx;
            let cy = rng.gen_range(-0.6..=0.6) * hy;
            let (s, c) = angle.sin_cos();
            Lane {
                points: vec![
                    [cx - reach * c, cy - reach * s],
                    [cx + reach * c, cy + reach * s],
                ],
                color: *LANE_PALETTE.choose(rng).unwrap(),
            }
        })
        .collect()
}

fn inside(cfg: &WorldConfig, p: [f64; 2]) -> bool {
    let [hx, hy] = cfg.grid.half_extent();
    p[0].abs() <= hx && p[1].abs() <= hy
}

fn propose_agent(cfg: &WorldConfig, lanes: &[Lane], rng: &mut ChaCha8Rng) -> Agent {
    let tl = &cfg.timeline;
    let [hx, hy] = cfg.grid.half_extent();
    let length = uniform(rng, cfg.length);
    let width = uniform(rng, cfg.width);
    let mut behavior = if rng.gen::<f64>() < cfg.stationary_fraction {
        Behavior::Stationary
    } else if rng.gen::<f64>() < cfg.turn_fraction {
        Behavior::ConstantTurn
    } else {
        Behavior::ConstantVelocity
    };

    let lane = if rng.gen::<f64>() < LANE_FOLLOW {
        lanes.choose(rng)
    } else {
        None
    };
    let mut pose = match lane {
        Some(lane) => {
            let (a, b) = (lane.points[0], lane.points[1]);
            let s = rng.gen_range(0.0..=1.0);
            let dir = (b[1] - a[1]).atan2(b[0] - a[0]);
            let offset = LANE_SPACING * rng.gen_range(-1..=1) as f64;
            let mut heading = dir;
            if rng.gen_bool(0.5) {
                heading += std::f64::consts::PI;
            }
            Pose {
                x: a[0] + s * (b[0] - a[0]) - offset * dir.sin(),
                y: a[1] + s * (b[1] - a[1]) + offset * dir.cos(),
                heading,
            }
        }
        None => Pose {
            x: rng.gen_range(-hx..=hx),
            y: rng.gen_range(-hy..=hy),
            heading: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        },
    };

    let mut speed = 0.0;
    let mut yaw_rate = 0.0;
    if behavior != Behavior::Stationary {
        if cfg.integer_displacement {
            behavior = Behavior::ConstantVelocity;
            let [dx, dy] = *cfg.integer_steps().choose(rng).unwrap();
            pose.heading = (dy as f64).atan2(dx as f64);
            speed = ((dx * dx + dy * dy) as f64).sqrt() * cfg.grid.meters_per_cell / tl.dt_forecast;
        } else {
            speed = uniform(rng, cfg.speed);
        }
        if behavior == Behavior::ConstantTurn {
            yaw_rate = uniform(rng, cfg.yaw_rate);
            if rng.gen_bool(0.5) {
                yaw_rate = -yaw_rate;
            }
        }
    }
    let mut agent = Agent::with_kinematics(length, width, behavior, speed, yaw_rate, pose, tl);
    for t in (tl.first() + 1)..=0 {
        agent.valid[tl.index(t)] = rng.gen::<f64>() >= cfg.history_dropout;
    }
    agent
}

/// Draw a scenario deterministically from `seed`.
pub fn sample_scenario(cfg: &WorldConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tl = cfg.timeline;

    let ego_speed = if rng.gen::<f64>() < cfg.ego_stationary_fraction {
        0.0
    } else {
        uniform(&mut rng, cfg.ego_speed)
    };
    let ego_behavior = if ego_speed == 0.0 {
        Behavior::Stationary
    } else {
        Behavior::ConstantVelocity
    };
    let ego = Agent::with_kinematics(
        EGO_SIZE[0],
        EGO_SIZE[1],
        ego_behavior,
        ego_speed,
        0.0,
        Pose::ORIGIN,
        &tl,
    );

    let lanes = sample_lanes(cfg, &mut rng);
    let zero = tl.index(0);
    let mut agents = vec![ego];
    let n = rng.gen_range(cfg.agent_count[0]..=cfg.agent_count[1]);
    for k in 0..n {
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let cand = propose_agent(cfg, &lanes, &mut rng);
            let p0 = cand.poses[zero];
            if !inside(cfg, [p0.x, p0.y]) {
                continue;
            }
            if cfg.keep_inside
                && !cand
                    .poses
                    .iter()
                    .all(|p| cand.corners(p).iter().all(|&c| inside(cfg, c)))
            {
                continue;
            }
            if agents
                .iter()
                .any(|other| overlaps(&cand, &p0, other, &other.poses[zero]))
            {
                continue;
            }
            placed = Some(cand);
            break;
        }
        match placed {
            Some(a) => agents.push(a),
            None => {
                return Err(Error::Generation(format!(
                    "seed {seed}: could not place agent {} of {n} after {} attempts",
                    k + 1,
                    cfg.max_retries
                )))
            }
        }
    }

    Ok(Scenario {
        agents,
        ego: 0,
        lanes,
        grid: cfg.grid,
        timeline: tl,
        frame_mode: cfg.frame_mode,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = WorldConfig::default();
        assert_eq!(sample_scenario(&cfg, 11).unwrap(), sample_scenario(&cfg, 11).unwrap());
        assert_ne!(sample_scenario(&cfg, 11).unwrap(), sample_scenario(&cfg, 12).unwrap());
    }

    #[test]
    fn no_overlap_at_zero() {
        let cfg = WorldConfig {
            agent_count: [6, 10],
            ..WorldConfig::default()
        };
        for seed in 0..50 {
            let s = sample_scenario(&cfg, seed).unwrap();
            let z = s.timeline.index(0);
            for i in 0..s.agents.len() {
                for j in (i + 1)..s.agents.len() {
                    let (a, b) = (&s.agents[i], &s.agents[j]);
                    assert!(!overlaps(a, &a.poses[z], b, &b.poses[z]));
                }
            }
        }
    }

    #[test]
    fn infeasible_placement_errors() {
        let cfg = WorldConfig {
            agent_count: [400, 400],
            max_retries: 5,
            ..WorldConfig::default()
        };
        assert!(matches!(sample_scenario(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn integer_steps_respect_speed() {
        let cfg = WorldConfig {
            speed: [1.0, 1.5],
            ..WorldConfig::default()
        };
        let steps = cfg.integer_steps();
        assert!(steps.contains(&[2, 0]) && steps.contains(&[-2, -2]));
        assert!(!steps.contains(&[1, 0]) && !steps.contains(&[3, 1]));
    }

    #[test]
    fn invalid_fraction_rejected() {
        let cfg = WorldConfig {
            stationary_fraction: 1.5,
            ..WorldConfig::default()
        };
        assert!(matches!(sample_scenario(&cfg, 0), Err(Error::Config(_))));
    }
}
