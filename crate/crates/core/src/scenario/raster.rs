use super::{FrameMode, GridGeometry, Pose, RasterMode, Scenario, Timeline};
use crate::error::{shape_err, Result};
use crate::grid::FeatureGrid;

/// Channels the model sees per input frame: total occupancy, flow (2), then
/// the RGB map (WOMD) or lane + egomotion (AV2).
pub const INPUT_CHANNELS: usize = 6;
/// Positions of the flow channels inside a model input frame.
pub const INPUT_FLOW_CHANNELS: [usize; 2] = [1, 2];

const WOMD_CHANNELS: [&str; 7] = [
    "occupancy_observed",
    "occupancy_occluded",
    "flow_x",
    "flow_y",
    "map_r",
    "map_g",
    "map_b",
];
const AV2_CHANNELS: [&str; 7] = [
    "occupancy_observed",
    "occupancy_occluded",
    "flow_x",
    "flow_y",
    "lane",
    "egomotion_x",
    "egomotion_y",
];

/// One rendered timestep. Every grid has batch dimension 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterFrame {
    pub t: i32,
    pub occupancy_observed: FeatureGrid<f32>,
    pub occupancy_occluded: FeatureGrid<f32>,
    /// Backward flow in cells, channel 0 = x, 1 = y.
    pub flow: FeatureGrid<f32>,
    pub semantic_map: Option<FeatureGrid<f32>>,
    pub lane_occupancy: Option<FeatureGrid<f32>>,
    pub egomotion: Option<FeatureGrid<f32>>,
}

impl RasterFrame {
    pub fn channel_names(mode: RasterMode) -> &'static [&'static str] {
        match mode {
            RasterMode::Womd => &WOMD_CHANNELS,
            RasterMode::Av2 => &AV2_CHANNELS,
        }
    }

    pub fn mode(&self) -> RasterMode {
        if self.semantic_map.is_some() {
            RasterMode::Womd
        } else {
            RasterMode::Av2
        }
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn occupancy_total(&self) -> FeatureGrid<f32> {
        let mut o = self.occupancy_observed.clone();
        o.add_assign(&self.occupancy_occluded);
        o
    }

    /// All stored planes stacked in [`RasterFrame::channel_names`] order.
    pub fn planes(&self) -> FeatureGrid<f32> {
        let mut parts = vec![&self.occupancy_observed, &self.occupancy_occluded, &self.flow];
        match self.mode() {
            RasterMode::Womd => parts.push(self.semantic_map.as_ref().unwrap()),
            RasterMode::Av2 => {
                parts.push(self.lane_occupancy.as_ref().unwrap());
                parts.push(self.egomotion.as_ref().unwrap());
            }
        }
        crate::grid::concat_channels(&parts).expect("frame planes share a shape")
    }

    pub fn from_planes(t: i32, mode: RasterMode, planes: &FeatureGrid<f32>) -> Result<Self> {
        if planes.batch() != 1 || planes.channels() != Self::channel_names(mode).len() {
            return Err(shape_err!(
                "frame planes {:?} do not match {mode:?} layout",
                planes.shape()
            ));
        }
        let ch = |s, n| planes.select_channels(s, n).unwrap();
        let (semantic_map, lane_occupancy, egomotion) = match mode {
            RasterMode::Womd => (Some(ch(4, 3)), None, None),
            RasterMode::Av2 => (None, Some(ch(4, 1)), Some(ch(5, 2))),
        };
        Ok(RasterFrame {
            t,
            occupancy_observed: ch(0, 1),
            occupancy_occluded: ch(1, 1),
            flow: ch(2, 2),
            semantic_map,
            lane_occupancy,
            egomotion,
        })
    }

    /// The `[1, INPUT_CHANNELS, H, W]` tensor fed to the encoder.
    pub fn model_input(&self) -> FeatureGrid<f32> {
        let occ = self.occupancy_total();
        let mut parts = vec![&occ, &self.flow];
        match self.mode() {
            RasterMode::Womd => parts.push(self.semantic_map.as_ref().unwrap()),
            RasterMode::Av2 => {
                parts.push(self.lane_occupancy.as_ref().unwrap());
                parts.push(self.egomotion.as_ref().unwrap());
            }
        }
        crate::grid::concat_channels(&parts).expect("frame planes share a shape")
    }

    /// Spatial 180 degree rotation; displacement channels are negated.
    pub fn rot180(&self) -> Self {
        let neg = |g: &FeatureGrid<f32>| g.rot180().map(|v| -v);
        RasterFrame {
            t: self.t,
            occupancy_observed: self.occupancy_observed.rot180(),
            occupancy_occluded: self.occupancy_occluded.rot180(),
            flow: neg(&self.flow),
            semantic_map: self.semantic_map.as_ref().map(|g| g.rot180()),
            lane_occupancy: self.lane_occupancy.as_ref().map(|g| g.rot180()),
            egomotion: self.egomotion.as_ref().map(neg),
        }
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        let c = |g: &FeatureGrid<f32>| g.center_crop(h, w);
        Ok(RasterFrame {
            t: self.t,
            occupancy_observed: c(&self.occupancy_observed)?,
            occupancy_occluded: c(&self.occupancy_occluded)?,
            flow: c(&self.flow)?,
            semantic_map: self.semantic_map.as_ref().map(c).transpose()?,
            lane_occupancy: self.lane_occupancy.as_ref().map(c).transpose()?,
            egomotion: self.egomotion.as_ref().map(c).transpose()?,
        })
    }
}

/// Inputs `t = -T_h+1 ..= 0`, targets `t = 1 ..= T_f`, plus the unperturbed
/// present frame that anchors the first waypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub raster_mode: RasterMode,
    pub frame_mode: FrameMode,
    pub grid: GridGeometry,
    pub timeline: Timeline,
    pub inputs: Vec<RasterFrame>,
    pub targets: Vec<RasterFrame>,
    /// Ground truth at `t = 0` with every agent present.
    pub present: RasterFrame,
}

impl SampleRecord {
    pub fn from_scenario(s: &Scenario, mode: RasterMode) -> Self {
        let tl = s.timeline;
        SampleRecord {
            seed: s.seed,
            raster_mode: mode,
            frame_mode: s.frame_mode,
            grid: s.grid,
            timeline: tl,
            inputs: ((tl.first() + 1)..=0).map(|t| rasterize(s, t, mode)).collect(),
            targets: (1..=tl.last()).map(|t| rasterize(s, t, mode)).collect(),
            present: rasterize_truth(s, 0, mode),
        }
    }

    pub fn current_occupancy(&self) -> FeatureGrid<f32> {
        self.present.occupancy_total()
    }

    pub fn rot180(&self) -> Self {
        SampleRecord {
            inputs: self.inputs.iter().map(RasterFrame::rot180).collect(),
            targets: self.targets.iter().map(RasterFrame::rot180).collect(),
            present: self.present.rot180(),
            ..self.clone()
        }
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        let crop = |fs: &[RasterFrame]| -> Result<Vec<_>> {
            fs.iter().map(|f| f.center_crop(h, w)).collect()
        };
        Ok(SampleRecord {
            inputs: crop(&self.inputs)?,
            targets: crop(&self.targets)?,
            present: self.present.center_crop(h, w)?,
            grid: GridGeometry {
                height: h,
                width: w,
                ..self.grid
            },
            ..self.clone()
        })
    }
}

/// Pose and resolution of a raster window.
#[derive(Clone, Copy, Debug)]
struct View {
    pose: Pose,
    mpc: f64,
    h: f64,
    w: f64,
}

impl View {
    fn new(pose: Pose, g: &GridGeometry) -> Self {
        View {
            pose,
            mpc: g.meters_per_cell,
            h: g.height as f64,
            w: g.width as f64,
        }
    }

    fn to_raster(&self, p: [f64; 2]) -> [f64; 2] {
        let l = self.pose.to_local(p);
        [l[0] / self.mpc + self.w / 2.0, l[1] / self.mpc + self.h / 2.0]
    }

    fn to_world(&self, c: [f64; 2]) -> [f64; 2] {
        self.pose.to_world([
            (c[0] - self.w / 2.0) * self.mpc,
            (c[1] - self.h / 2.0) * self.mpc,
        ])
    }
}

fn view_pose(s: &Scenario, t: i32) -> Pose {
    match s.frame_mode {
        FrameMode::Static => s.ego_pose(0),
        FrameMode::EgoCentric => s.ego_pose(t.min(0)),
    }
}

/// Raster window at `t` and the window its backward flow points into.
fn views(s: &Scenario, t: i32) -> (View, View) {
    let cur = View::new(view_pose(s, t), &s.grid);
    let prev = if t >= 1 || t == s.timeline.first() {
        cur
    } else {
        View::new(view_pose(s, t - 1), &s.grid)
    };
    (cur, prev)
}

fn rendered(s: &Scenario, t: i32, respect_validity: bool) -> Vec<usize> {
    let i = s.timeline.index(t);
    (0..s.agents.len())
        .filter(|&a| a != s.ego && (!respect_validity || s.agents[a].valid[i]))
        .collect()
}

/// Owning agent of every cell (lowest index wins), row-major.
fn owners(s: &Scenario, t: i32, view: &View, agents: &[usize]) -> Vec<Option<usize>> {
    let (h, w) = (s.grid.height, s.grid.width);
    let i = s.timeline.index(t);
    let mut own = vec![None; h * w];
    for &a in agents {
        let ag = &s.agents[a];
        let pose = ag.poses[i];
        let cs = ag.corners(&pose).map(|c| view.to_raster(c));
        let lo = |k: usize| cs.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| cs.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (lo(0) - 0.5).floor().max(0.0) as usize;
        let y0 = (lo(1) - 0.5).floor().max(0.0) as usize;
        let x1 = ((hi(0) - 0.5).ceil().max(-1.0) + 1.0).min(w as f64) as usize;
        let y1 = ((hi(1) - 0.5).ceil().max(-1.0) + 1.0).min(h as f64) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let cell = &mut own[y * w + x];
                if cell.is_none() {
                    let p = view.to_world([x as f64 + 0.5, y as f64 + 0.5]);
                    if ag.contains(&pose, p) {
                        *cell = Some(a);
                    }
                }
            }
        }
    }
    own
}

/// Liang-Barsky clip of segment `p -> q` against the agent's rectangle.
fn segment_hits(s: &Scenario, a: usize, pose: &Pose, p: [f64; 2], q: [f64; 2]) -> bool {
    let ag = &s.agents[a];
    let lp = pose.to_local(p);
    let lq = pose.to_local(q);
    let d = [lq[0] - lp[0], lq[1] - lp[1]];
    let half = [ag.length / 2.0, ag.width / 2.0];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        for (num, den) in [(lp[k] + half[k], -d[k]), (half[k] - lp[k], d[k])] {
            if den == 0.0 {
                if num < 0.0 {
                    return false;
                }
            } else {
                let r = num / den;
                if den < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
    }
    t0 <= t1
}

fn split(
    s: &Scenario,
    t: i32,
    view: &View,
    agents: &[usize],
    own: &[Option<usize>],
) -> (FeatureGrid<f32>, FeatureGrid<f32>) {
    let (h, w) = (s.grid.height, s.grid.width);
    let i = s.timeline.index(t);
    let ego = s.ego_pose(t);
    let eye = [ego.x, ego.y];
    let mut obs = FeatureGrid::zeros([1, 1, h, w]);
    let mut occ = FeatureGrid::zeros([1, 1, h, w]);
    for (k, o) in own.iter().enumerate() {
        if o.is_none() {
            continue;
        }
        let p = view.to_world([(k % w) as f64 + 0.5, (k / w) as f64 + 0.5]);
        let hidden = agents.iter().any(|&b| {
            let pose = s.agents[b].poses[i];
            !s.agents[b].contains(&pose, p) && segment_hits(s, b, &pose, eye, p)
        });
        if hidden {
            occ.data_mut()[k] = 1.0;
        } else {
            obs.data_mut()[k] = 1.0;
        }
    }
    (obs, occ)
}

fn draw_lanes(s: &Scenario, view: &View, mut mark: impl FnMut(usize, [f32; 3])) {
    let (h, w) = (s.grid.height, s.grid.width);
    for lane in &s.lanes {
        for seg in lane.points.windows(2) {
            let a = view.to_raster(seg[0]);
            let b = view.to_raster(seg[1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let n = (len * 4.0).ceil() as usize + 1;
            for j in 0..=n {
                let f = j as f64 / n as f64;
                let x = (a[0] + f * (b[0] - a[0])).floor();
                let y = (a[1] + f * (b[1] - a[1])).floor();
                if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                    mark(y as usize * w + x as usize, lane.color);
                }
            }
        }
    }
}

/// Flow on a 2^-20 cell lattice, so trigonometric round-off in whole-cell
/// displacements vanishes.
fn quantize(v: f64) -> f32 {
    const STEPS: f64 = (1u32 << 20) as f64;
    ((v * STEPS).round() / STEPS) as f32
}

fn render(s: &Scenario, t: i32, mode: RasterMode, respect_validity: bool) -> RasterFrame {
    let (h, w) = (s.grid.height, s.grid.width);
    let (cur, prev) = views(s, t);
    let agents = rendered(s, t, respect_validity);
    let own = owners(s, t, &cur, &agents);
    let i = s.timeline.index(t);

    let mut flow = FeatureGrid::zeros([1, 2, h, w]);
    if t > s.timeline.first() {
        for (k, o) in own.iter().enumerate() {
            if let Some(a) = *o {
                let c = [(k % w) as f64 + 0.5, (k / w) as f64 + 0.5];
                let ag = &s.agents[a];
                if ag.poses[i] == ag.poses[i - 1] && cur.pose == prev.pose {
                    continue;
                }
                let local = ag.poses[i].to_local(cur.to_world(c));
                let before = prev.to_raster(ag.poses[i - 1].to_world(local));
                flow.data_mut()[k] = quantize(before[0] - c[0]);
                flow.data_mut()[h * w + k] = quantize(before[1] - c[1]);
            }
        }
    }

    let (observed, occluded) = match mode {
        RasterMode::Womd => split(s, t, &cur, &agents, &own),
        RasterMode::Av2 => {
            let total = own.iter().map(|o| o.map_or(0.0, |_| 1.0)).collect();
            (
                FeatureGrid::from_vec([1, 1, h, w], total).unwrap(),
                FeatureGrid::zeros([1, 1, h, w]),
            )
        }
    };

    let mut frame = RasterFrame {
        t,
        occupancy_observed: observed,
        occupancy_occluded: occluded,
        flow,
        semantic_map: None,
        lane_occupancy: None,
        egomotion: None,
    };
    match mode {
        RasterMode::Womd => {
            let mut map = FeatureGrid::zeros([1, 3, h, w]);
            draw_lanes(s, &cur, |k, rgb| {
                for (c, v) in rgb.iter().enumerate() {
                    map.data_mut()[c * h * w + k] = *v;
                }
            });
            frame.semantic_map = Some(map);
        }
        RasterMode::Av2 => {
            let mut lane = FeatureGrid::zeros([1, 1, h, w]);
            draw_lanes(s, &cur, |k, _| lane.data_mut()[k] = 1.0);
            let mut ego = FeatureGrid::zeros([1, 2, h, w]);
            let still = cur.pose == prev.pose;
            for k in (0..h * w).filter(|_| !still) {
                let c = [(k % w) as f64 + 0.5, (k / w) as f64 + 0.5];
                let before = prev.to_raster(cur.to_world(c));
                ego.data_mut()[k] = (before[0] - c[0]) as f32;
                ego.data_mut()[h * w + k] = (before[1] - c[1]) as f32;
            }
            frame.lane_occupancy = Some(lane);
            frame.egomotion = Some(ego);
        }
    }
    frame
}

/// Render timestep `t` as perceived: agents flagged invalid at `t` are absent.
pub fn rasterize(s: &Scenario, t: i32, mode: RasterMode) -> RasterFrame {
    render(s, t, mode, true)
}

/// Render timestep `t` with every agent present regardless of validity.
pub fn rasterize_truth(s: &Scenario, t: i32, mode: RasterMode) -> RasterFrame {
    render(s, t, mode, false)
}

/// Observed and occluded occupancy masks at `t` seen from the ego center.
pub fn occlusion_split(s: &Scenario, t: i32) -> (FeatureGrid<f32>, FeatureGrid<f32>) {
    let (cur, _) = views(s, t);
    let agents = rendered(s, t, true);
    let own = owners(s, t, &cur, &agents);
    split(s, t, &cur, &agents, &own)
}
