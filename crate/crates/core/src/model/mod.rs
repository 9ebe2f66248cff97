//! The coupled convolutional LSTM forecaster.
//!
//! Each input frame is encoded to a latent grid at quarter resolution; the
//! accumulation cell folds the encoded history into a recurrent state; the
//! forecasting cell is then unrolled without input, one step per waypoint,
//! and every hidden state is decoded into occupancy logits and backward flow.

mod checkpoint;
mod params;

pub use checkpoint::{Checkpoint, OptimizerMoments, CHECKPOINT_MAGIC};
pub use params::{
    init_params, CellParams, ConvLayer, DecoderParams, EncoderParams, GateNet, ModelParams,
    NormLayer, ParamCensus,
};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{Activation, FeatureGrid, Real, DEFAULT_LEAKY_SLOPE};
use crate::scenario::{SampleRecord, INPUT_CHANNELS, INPUT_FLOW_CHANNELS};
use crate::tape::{Tape, Var};

pub const ENCODER_STRIDES: [usize; 4] = [2, 1, 2, 1];
pub const DECODER_STRIDES: [usize; 3] = [2, 2, 1];
pub const DOWNSAMPLE: usize = 4;

/// Variants that remove one ingredient of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Encode and accumulate only the most recent input frame.
    pub no_accumulation: bool,
    /// Skip the forecasting cell; one decode emits every waypoint along channels.
    pub direct_multiframe: bool,
    /// Zero the flow channels of every input frame.
    pub no_input_flow: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "none" => {}
            "no_accumulation" => a.no_accumulation = true,
            "direct_multiframe" => a.direct_multiframe = true,
            "no_input_flow" => a.no_input_flow = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(a)
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_accumulation {
            parts.push("no_accumulation");
        }
        if self.direct_multiframe {
            parts.push("direct_multiframe");
        }
        if self.no_input_flow {
            parts.push("no_input_flow");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub latent_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels_per_group: usize,
    pub gate_depth: usize,
    pub encoder_kernels: [usize; 4],
    pub accumulation_kernel: usize,
    pub forecast_kernel: usize,
    pub decoder_kernel: usize,
    pub leaky_slope: f64,
    /// Waypoints emitted by one decode in the direct multi-frame variant.
    pub waypoints: usize,
    pub input_flow_channels: [usize; 2],
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(latent_channels: usize, height: usize, width: usize, waypoints: usize) -> Self {
        ModelConfig {
            input_channels: INPUT_CHANNELS,
            latent_channels,
            height,
            width,
            channels_per_group: 8,
            gate_depth: 3,
            encoder_kernels: [5, 3, 3, 3],
            accumulation_kernel: 3,
            forecast_kernel: 5,
            decoder_kernel: 3,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            waypoints,
            input_flow_channels: INPUT_FLOW_CHANNELS,
            ablation: Ablation::default(),
        }
    }

    pub fn encoder_widths(&self) -> [usize; 4] {
        let c = self.latent_channels;
        [(c / 4).max(1), (c / 2).max(1), c, c]
    }

    pub fn decoder_widths(&self) -> [usize; 3] {
        let c = self.latent_channels;
        [(c / 2).max(1), (c / 4).max(1), (c / 8).max(1)]
    }

    /// Group count for a layer of `width` channels: one group per
    /// `channels_per_group` channels, a single group for narrower layers.
    pub fn groups(&self, width: usize) -> Result<usize> {
        let cpg = self.channels_per_group;
        if width < cpg {
            Ok(1)
        } else if width.is_multiple_of(cpg) {
            Ok(width / cpg)
        } else {
            Err(Error::Config(format!(
                "{width} channels not divisible by channels_per_group {cpg}"
            )))
        }
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        [
            batch,
            self.latent_channels,
            self.height / DOWNSAMPLE,
            self.width / DOWNSAMPLE,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_channels == 0 || self.channels_per_group == 0 {
            return bad("latent_channels and channels_per_group must be positive".into());
        }
        if !self.height.is_multiple_of(DOWNSAMPLE) || !self.width.is_multiple_of(DOWNSAMPLE) || self.height == 0 || self.width == 0 {
            return bad(format!(
                "grid {}x{} must be a positive multiple of {DOWNSAMPLE}",
                self.height, self.width
            ));
        }
        if self.gate_depth == 0 || self.input_channels == 0 {
            return bad("gate_depth and input_channels must be positive".into());
        }
        let kernels = self
            .encoder_kernels
            .iter()
            .chain([&self.accumulation_kernel, &self.forecast_kernel, &self.decoder_kernel]);
        if kernels.clone().any(|&k| k % 2 == 0) {
            return bad("kernel sizes must be odd".into());
        }
        if self.input_flow_channels.iter().any(|&c| c >= self.input_channels) {
            return bad("input_flow_channels out of range".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope {} invalid", self.leaky_slope));
        }
        for w in self.encoder_widths().into_iter().chain(self.decoder_widths()) {
            self.groups(w)?;
        }
        Ok(())
    }

    fn leaky(&self) -> Activation {
        Activation::LeakyRelu {
            slope: self.leaky_slope,
        }
    }
}

/// Exact parameter census implied by `cfg`, broken down by module.
pub fn count_params(cfg: &ModelConfig) -> ParamCensus {
    ModelParams::shapes(cfg).census()
}

/// Hidden and cell state of a recurrent cell, `[N, C, H/4, W/4]` each.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecurrentState<P> {
    pub hidden: P,
    pub cell: P,
}

/// Decoder output for one waypoint: occupancy logits (observed, occluded)
/// and backward flow (x, y), each `[N, 2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<P> {
    pub occupancy: P,
    pub flow: P,
}

fn conv<T: Real>(tape: &mut Tape<T>, layer: &ConvLayer<Var>, x: Var, stride: usize) -> Result<Var> {
    tape.conv2d(x, layer.weight, layer.bias, stride)
}

fn act_norm<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, norm: &NormLayer<Var>, x: Var) -> Result<Var> {
    let a = tape.activate(x, cfg.leaky());
    let groups = cfg.groups(tape.shape(a)[1])?;
    tape.group_norm(a, groups, norm.gamma, norm.beta)
}

/// Four-layer strided encoder: `[N, input_channels, H, W] -> [N, C, H/4, W/4]`.
pub fn encode<T: Real>(tape: &mut Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, frame: Var) -> Result<Var> {
    let [_, c, h, w] = tape.shape(frame);
    if c != cfg.input_channels || h != cfg.height || w != cfg.width {
        return Err(shape_err!(
            "encode: frame {:?} does not match config ({} x {} x {})",
            tape.shape(frame),
            cfg.input_channels,
            cfg.height,
            cfg.width
        ));
    }
    let mut x = frame;
    for (i, (layer, norm)) in p.encoder.convs.iter().zip(&p.encoder.norms).enumerate() {
        x = conv(tape, layer, x, ENCODER_STRIDES[i])?;
        x = act_norm(tape, cfg, norm, x)?;
    }
    Ok(x)
}

fn gate<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, net: &GateNet<Var>, mut x: Var) -> Result<Var> {
    for (i, layer) in net.convs.iter().enumerate() {
        x = conv(tape, layer, x, 1)?;
        if let Some(norm) = net.norms.get(i) {
            x = act_norm(tape, cfg, norm, x)?;
        }
    }
    Ok(x)
}

fn cell_update<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    cp: &CellParams<Var>,
    gate_input: Var,
    state: RecurrentState<Var>,
) -> Result<RecurrentState<Var>> {
    let i = gate(tape, cfg, &cp.input, gate_input)?;
    let i = tape.sigmoid(i);
    let f = gate(tape, cfg, &cp.forget, gate_input)?;
    let f = tape.sigmoid(f);
    let g = gate(tape, cfg, &cp.cell, gate_input)?;
    let g = tape.tanh(g);
    let o = gate(tape, cfg, &cp.output, gate_input)?;
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.cell)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let groups = cfg.groups(cfg.latent_channels)?;
    let normed = tape.group_norm(cell, groups, cp.cell_norm.gamma, cp.cell_norm.beta)?;
    let squashed = tape.tanh(normed);
    let hidden = tape.mul(o, squashed)?;
    Ok(RecurrentState { hidden, cell })
}

fn check_state<T: Real>(tape: &Tape<T>, cfg: &ModelConfig, state: &RecurrentState<Var>) -> Result<usize> {
    let n = tape.shape(state.hidden)[0];
    let want = cfg.latent_shape(n);
    if tape.shape(state.hidden) != want || tape.shape(state.cell) != want {
        return Err(shape_err!(
            "recurrent state {:?}/{:?} does not match latent shape {want:?}",
            tape.shape(state.hidden),
            tape.shape(state.cell)
        ));
    }
    Ok(n)
}

/// One accumulation step: gates see `[X_t, H_{t-1}]`.
pub fn accumulate_step<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    x: Var,
    state: RecurrentState<Var>,
) -> Result<RecurrentState<Var>> {
    let n = check_state(tape, cfg, &state)?;
    if tape.shape(x) != cfg.latent_shape(n) {
        return Err(shape_err!(
            "accumulate_step: latent {:?} vs state {:?}",
            tape.shape(x),
            tape.shape(state.hidden)
        ));
    }
    let joined = tape.concat(&[x, state.hidden])?;
    cell_update(tape, cfg, &p.accumulation, joined, state)
}

/// One forecasting step: gates see only `H_{t-1}`.
pub fn forecast_step<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    state: RecurrentState<Var>,
) -> Result<RecurrentState<Var>> {
    check_state(tape, cfg, &state)?;
    let cp = p
        .forecast
        .as_ref()
        .ok_or_else(|| Error::Config("model has no forecasting cell".into()))?;
    cell_update(tape, cfg, cp, state.hidden, state)
}

fn decode_branch<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, d: &DecoderParams<Var>, mut x: Var) -> Result<Var> {
    for (i, (layer, norm)) in d.tconvs.iter().zip(&d.norms).enumerate() {
        x = tape.conv_transpose2d(x, layer.weight, layer.bias, DECODER_STRIDES[i])?;
        x = act_norm(tape, cfg, norm, x)?;
    }
    conv(tape, &d.head, x, 1)
}

/// Both decoder branches on one hidden state: (occupancy logits, flow).
pub fn decode<T: Real>(tape: &mut Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, hidden: Var) -> Result<(Var, Var)> {
    let n = tape.shape(hidden)[0];
    if tape.shape(hidden) != cfg.latent_shape(n) {
        return Err(shape_err!(
            "decode: hidden {:?} does not match latent shape {:?}",
            tape.shape(hidden),
            cfg.latent_shape(n)
        ));
    }
    let occ = decode_branch(tape, cfg, &p.occupancy_decoder, hidden)?;
    let flow = decode_branch(tape, cfg, &p.flow_decoder, hidden)?;
    Ok((occ, flow))
}

/// Zero state for a batch of `n`.
pub fn zero_state<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, n: usize) -> RecurrentState<Var> {
    let hidden = tape.constant(FeatureGrid::zeros(cfg.latent_shape(n)));
    let cell = tape.constant(FeatureGrid::zeros(cfg.latent_shape(n)));
    RecurrentState { hidden, cell }
}

/// Accumulate `frames` (oldest first) from a zero state and predict
/// `waypoints` future steps.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    frames: &[Var],
    waypoints: usize,
) -> Result<Vec<Prediction<Var>>> {
    let last = *frames
        .last()
        .ok_or_else(|| shape_err!("forward needs at least one input frame"))?;
    let n = tape.shape(last)[0];
    let used = if cfg.ablation.no_accumulation {
        &frames[frames.len() - 1..]
    } else {
        frames
    };
    let mask = cfg.ablation.no_input_flow.then(|| {
        let shape = tape.shape(last);
        let flow = cfg.input_flow_channels;
        tape.constant(FeatureGrid::from_fn(shape, |[_, c, _, _]| {
            if flow.contains(&c) {
                T::zero()
            } else {
                T::one()
            }
        }))
    });

    let mut state = zero_state(tape, cfg, n);
    for &frame in used {
        let frame = match mask {
            Some(m) => tape.mul(frame, m)?,
            None => frame,
        };
        let x = encode(tape, p, cfg, frame)?;
        state = accumulate_step(tape, p, cfg, x, state)?;
    }

    if cfg.ablation.direct_multiframe {
        if waypoints == 0 {
            return Ok(Vec::new());
        }
        if waypoints != cfg.waypoints {
            return Err(Error::Config(format!(
                "direct multi-frame model emits {} waypoints, {waypoints} requested",
                cfg.waypoints
            )));
        }
        let (occ, flow) = decode(tape, p, cfg, state.hidden)?;
        return (0..waypoints)
            .map(|k| {
                Ok(Prediction {
                    occupancy: tape.slice(occ, 2 * k, 2)?,
                    flow: tape.slice(flow, 2 * k, 2)?,
                })
            })
            .collect();
    }

    let mut out = Vec::with_capacity(waypoints);
    for _ in 0..waypoints {
        state = forecast_step(tape, p, cfg, state)?;
        let (occupancy, flow) = decode(tape, p, cfg, state.hidden)?;
        out.push(Prediction { occupancy, flow });
    }
    Ok(out)
}

/// Elementwise sigmoid turning occupancy logits into probabilities.
pub fn occupancy_probabilities<T: Real>(logits: &FeatureGrid<T>) -> FeatureGrid<T> {
    crate::grid::activate(logits, Activation::Sigmoid)
}

/// Model input tensors of the last `len` input frames (all when `None`).
pub fn sample_frames(sample: &SampleRecord, len: Option<usize>) -> Result<Vec<FeatureGrid<f32>>> {
    let n = sample.inputs.len();
    let len = len.unwrap_or(n);
    if len == 0 || len > n {
        return Err(Error::Config(format!(
            "requested {len} input frames, sample has {n}"
        )));
    }
    Ok(sample.inputs[n - len..].iter().map(|f| f.model_input()).collect())
}

/// Configuration plus float32 parameters, for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<FeatureGrid<f32>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Raw decoder outputs for each waypoint.
    pub fn predict(&self, frames: &[FeatureGrid<f32>], waypoints: usize) -> Result<Vec<Prediction<FeatureGrid<f32>>>> {
        let mut tape = Tape::new();
        let p = self.params.to_tape(&mut tape, false);
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let preds = forward(&mut tape, &p, &self.config, &vars, waypoints)?;
        Ok(preds
            .into_iter()
            .map(|pr| Prediction {
                occupancy: tape.value(pr.occupancy).clone(),
                flow: tape.value(pr.flow).clone(),
            })
            .collect())
    }

    /// Predictions for a sample from its last `input_len` frames.
    pub fn predict_sample(&self, sample: &SampleRecord, input_len: Option<usize>) -> Result<Vec<Prediction<FeatureGrid<f32>>>> {
        let frames = sample_frames(sample, input_len)?;
        self.predict(&frames, sample.targets.len())
    }
}
