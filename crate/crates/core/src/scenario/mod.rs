//! Synthetic bird's-eye-view driving world, its rasterizer and the OFR
//! raster file format.
//!
//! World coordinates are meters with the ego vehicle at the origin facing
//! +x at `t = 0`. Raster column index grows with local x and row index with
//! local y; cell `(row, col)` has its center at `(col + 0.5, row + 0.5)` in
//! raster coordinates.

mod dataset;
mod ofr;
mod raster;
mod world;

pub use dataset::{
    build_dataset, dataset_stats, read_manifest, Dataset, DatasetConfig, DistributionReport,
    ManifestEntry, Split, DATASET_FILE, FLOW_BIN_EDGES, MANIFEST_FILE,
};
pub use ofr::{read_ofr, write_ofr, OfrFile, OfrFrameTag, OfrHeader, OFR_MAGIC};
pub use raster::{
    occlusion_split, rasterize, rasterize_truth, RasterFrame, SampleRecord, INPUT_CHANNELS,
    INPUT_FLOW_CHANNELS,
};
pub use world::{sample_scenario, WorldConfig};

use serde::{Deserialize, Serialize};

/// Coordinate frame the rasters are rendered in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    Static,
    EgoCentric,
}

/// Which auxiliary channels a frame carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterMode {
    /// RGB semantic map, observed/occluded split.
    Womd,
    /// Lane raster plus egomotion flow; everything is observed.
    Av2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Stationary,
    ConstantVelocity,
    ConstantTurn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const ORIGIN: Pose = Pose {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
    };

    /// Kinematic pose after `tau` seconds starting from `self`.
    pub fn advance(&self, behavior: Behavior, speed: f64, yaw_rate: f64, tau: f64) -> Pose {
        match behavior {
            Behavior::Stationary => *self,
            Behavior::ConstantVelocity => Pose {
                x: self.x + speed * tau * self.heading.cos(),
                y: self.y + speed * tau * self.heading.sin(),
                heading: self.heading,
            },
            Behavior::ConstantTurn => {
                let h1 = self.heading + yaw_rate * tau;
                let r = speed / yaw_rate;
                Pose {
                    x: self.x + r * (h1.sin() - self.heading.sin()),
                    y: self.y - r * (h1.cos() - self.heading.cos()),
                    heading: h1,
                }
            }
        }
    }

    /// Body-frame point to world coordinates.
    pub fn to_world(&self, local: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            self.x + c * local[0] - s * local[1],
            self.y + s * local[0] + c * local[1],
        ]
    }

    /// World point to body-frame coordinates.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Spatial extent of every raster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub meters_per_cell: f64,
}

impl GridGeometry {
    /// Half extents in meters along (x, y).
    pub fn half_extent(&self) -> [f64; 2] {
        [
            self.width as f64 * self.meters_per_cell / 2.0,
            self.height as f64 * self.meters_per_cell / 2.0,
        ]
    }
}

/// History/forecast step layout. Timestep `t` runs from `-history` to
/// `future`; history steps are `dt_history` apart, forecast waypoints
/// `dt_forecast` apart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub history: usize,
    pub future: usize,
    pub dt_history: f64,
    pub dt_forecast: f64,
}

impl Timeline {
    pub fn len(&self) -> usize {
        self.history + self.future + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> i32 {
        -(self.history as i32)
    }

    pub fn last(&self) -> i32 {
        self.future as i32
    }

    pub fn contains(&self, t: i32) -> bool {
        t >= self.first() && t <= self.last()
    }

    /// Position of timestep `t` in per-step vectors.
    pub fn index(&self, t: i32) -> usize {
        debug_assert!(self.contains(t), "timestep {t} outside timeline");
        (t - self.first()) as usize
    }

    /// Seconds since `t = 0`.
    pub fn time(&self, t: i32) -> f64 {
        if t <= 0 {
            t as f64 * self.dt_history
        } else {
            t as f64 * self.dt_forecast
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub length: f64,
    pub width: f64,
    pub behavior: Behavior,
    /// Meters per second along the heading.
    pub speed: f64,
    /// Radians per second; only used by [`Behavior::ConstantTurn`].
    pub yaw_rate: f64,
    /// One pose per timestep of the scenario timeline.
    pub poses: Vec<Pose>,
    /// Whether the agent is perceived at each timestep.
    pub valid: Vec<bool>,
}

impl Agent {
    /// Agent following `behavior` through `timeline` with pose `at_zero` at `t = 0`.
    pub fn with_kinematics(
        length: f64,
        width: f64,
        behavior: Behavior,
        speed: f64,
        yaw_rate: f64,
        at_zero: Pose,
        timeline: &Timeline,
    ) -> Agent {
        let poses = (timeline.first()..=timeline.last())
            .map(|t| at_zero.advance(behavior, speed, yaw_rate, timeline.time(t)))
            .collect();
        Agent {
            length,
            width,
            behavior,
            speed,
            yaw_rate,
            poses,
            valid: vec![true; timeline.len()],
        }
    }

    pub fn contains(&self, pose: &Pose, p: [f64; 2]) -> bool {
        let l = pose.to_local(p);
        l[0].abs() <= self.length / 2.0 && l[1].abs() <= self.width / 2.0
    }

    pub fn corners(&self, pose: &Pose) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|c| pose.to_world(c))
    }
}

/// A lane centerline drawn in a fixed semantic color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub points: Vec<[f64; 2]>,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// All vehicles including the ego, which is never rendered.
    pub agents: Vec<Agent>,
    pub ego: usize,
    pub lanes: Vec<Lane>,
    pub grid: GridGeometry,
    pub timeline: Timeline,
    pub frame_mode: FrameMode,
    pub seed: u64,
}

impl Scenario {
    pub fn ego_pose(&self, t: i32) -> Pose {
        self.agents[self.ego].poses[self.timeline.index(t)]
    }
}
