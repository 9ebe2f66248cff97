use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ModelConfig;
use crate::error::Result;
use crate::grid::{FeatureGrid, Real};
use crate::tape::{Tape, Var};

/// Weight (and optional bias) of one convolution. Conv weights are
/// `[out, in, k, k]`, transposed-conv weights `[in, out, k, k]`, biases
/// `[1, out, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<P> {
    pub weight: P,
    pub bias: Option<P>,
}

/// Group-norm affine parameters, each `[1, channels, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer<P> {
    pub gamma: P,
    pub beta: P,
}

/// Conv stack producing one gate's pre-activation: every layer but the last
/// is followed by leaky ReLU and group norm.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNet<P> {
    pub convs: Vec<ConvLayer<P>>,
    pub norms: Vec<NormLayer<P>>,
}

/// Gate nets in `(i, f, g, o)` order plus the group norm applied to the cell
/// state before the output `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<P> {
    pub input: GateNet<P>,
    pub forget: GateNet<P>,
    pub cell: GateNet<P>,
    pub output: GateNet<P>,
    pub cell_norm: NormLayer<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub convs: Vec<ConvLayer<P>>,
    pub norms: Vec<NormLayer<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<P> {
    pub tconvs: Vec<ConvLayer<P>>,
    pub norms: Vec<NormLayer<P>>,
    pub head: ConvLayer<P>,
}

/// Every learnable tensor of the network. `P` is the storage: shapes,
/// [`FeatureGrid`]s, or tape [`Var`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub encoder: EncoderParams<P>,
    pub accumulation: CellParams<P>,
    /// Absent in the direct multi-frame variant.
    pub forecast: Option<CellParams<P>>,
    pub occupancy_decoder: DecoderParams<P>,
    pub flow_decoder: DecoderParams<P>,
}

type Visit<'a, 'f, P, Q> = dyn FnMut(&str, &'a P) -> Q + 'f;

impl<P> ConvLayer<P> {
    fn map<'a, Q>(&'a self, name: &str, f: &mut Visit<'a, '_, P, Q>) -> ConvLayer<Q> {
        ConvLayer {
            weight: f(&format!("{name}.weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&format!("{name}.bias"), b)),
        }
    }
}

impl<P> NormLayer<P> {
    fn map<'a, Q>(&'a self, name: &str, f: &mut Visit<'a, '_, P, Q>) -> NormLayer<Q> {
        NormLayer {
            gamma: f(&format!("{name}.gamma"), &self.gamma),
            beta: f(&format!("{name}.beta"), &self.beta),
        }
    }
}

fn map_stack<'a, P, Q>(
    convs: &'a [ConvLayer<P>],
    norms: &'a [NormLayer<P>],
    name: &str,
    conv: &str,
    f: &mut Visit<'a, '_, P, Q>,
) -> (Vec<ConvLayer<Q>>, Vec<NormLayer<Q>>) {
    let mut c = Vec::new();
    let mut n = Vec::new();
    for (i, layer) in convs.iter().enumerate() {
        c.push(layer.map(&format!("{name}.{i}.{conv}"), f));
        if let Some(norm) = norms.get(i) {
            n.push(norm.map(&format!("{name}.{i}.norm"), f));
        }
    }
    (c, n)
}

impl<P> GateNet<P> {
    fn map<'a, Q>(&'a self, name: &str, f: &mut Visit<'a, '_, P, Q>) -> GateNet<Q> {
        let (convs, norms) = map_stack(&self.convs, &self.norms, name, "conv", f);
        GateNet { convs, norms }
    }
}

impl<P> CellParams<P> {
    fn map<'a, Q>(&'a self, name: &str, f: &mut Visit<'a, '_, P, Q>) -> CellParams<Q> {
        CellParams {
            input: self.input.map(&format!("{name}.input"), f),
            forget: self.forget.map(&format!("{name}.forget"), f),
            cell: self.cell.map(&format!("{name}.cell"), f),
            output: self.output.map(&format!("{name}.output"), f),
            cell_norm: self.cell_norm.map(&format!("{name}.cell_norm"), f),
        }
    }

    pub fn gates(&self) -> [&GateNet<P>; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }
}

impl<P> DecoderParams<P> {
    fn map<'a, Q>(&'a self, name: &str, f: &mut Visit<'a, '_, P, Q>) -> DecoderParams<Q> {
        let (tconvs, norms) = map_stack(&self.tconvs, &self.norms, name, "tconv", f);
        DecoderParams {
            tconvs,
            norms,
            head: self.head.map(&format!("{name}.head"), f),
        }
    }
}

impl<P> ModelParams<P> {
    /// Visit every tensor in canonical order with its dotted name.
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> ModelParams<Q> {
        let f: &mut Visit<'a, '_, P, Q> = &mut f;
        let (convs, norms) = map_stack(&self.encoder.convs, &self.encoder.norms, "encoder", "conv", f);
        ModelParams {
            encoder: EncoderParams { convs, norms },
            accumulation: self.accumulation.map("accumulation", f),
            forecast: self.forecast.as_ref().map(|c| c.map("forecast", f)),
            occupancy_decoder: self.occupancy_decoder.map("decoder.occupancy", f),
            flow_decoder: self.flow_decoder.map("decoder.flow", f),
        }
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a P)) {
        self.map(|n, p| f(n, p));
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Pair up two parameter sets with the same layout.
    pub fn zip<'a, R, Q>(
        &'a self,
        other: &ModelParams<R>,
        mut f: impl FnMut(&str, &'a P, &R) -> Q,
    ) -> ModelParams<Q> {
        let mut rest = Vec::new();
        other.for_each(|_, r| rest.push(r));
        let mut rest = rest.into_iter();
        self.map(|n, p| f(n, p, rest.next().expect("parameter layouts differ")))
    }
}

impl<P> ConvLayer<P> {
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

impl<P> NormLayer<P> {
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

fn visit_stack<'a, P>(
    convs: &'a mut [ConvLayer<P>],
    norms: &'a mut [NormLayer<P>],
    f: &mut dyn FnMut(&'a mut P),
) {
    let mut norms = norms.iter_mut();
    for layer in convs.iter_mut() {
        layer.visit_mut(f);
        if let Some(norm) = norms.next() {
            norm.visit_mut(f);
        }
    }
}

impl<P> CellParams<P> {
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        for GateNet { convs, norms } in [&mut self.input, &mut self.forget, &mut self.cell, &mut self.output] {
            visit_stack(convs, norms, f);
        }
        self.cell_norm.visit_mut(f);
    }
}

impl<P> DecoderParams<P> {
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut P)) {
        visit_stack(&mut self.tconvs, &mut self.norms, f);
        self.head.visit_mut(f);
    }
}

impl<P> ModelParams<P> {
    /// Mutable visit in the same canonical order as [`ModelParams::map`].
    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&'a mut P)) {
        let f: &mut dyn FnMut(&'a mut P) = &mut f;
        visit_stack(&mut self.encoder.convs, &mut self.encoder.norms, f);
        self.accumulation.visit_mut(f);
        if let Some(c) = &mut self.forecast {
            c.visit_mut(f);
        }
        self.occupancy_decoder.visit_mut(f);
        self.flow_decoder.visit_mut(f);
    }
}

impl<T: Real> ModelParams<FeatureGrid<T>> {
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, p| n += p.numel());
        n
    }

    pub fn cast<U: Real>(&self) -> ModelParams<FeatureGrid<U>> {
        self.map(|_, p| p.cast())
    }

    /// Register every tensor on `tape`, trainable or constant.
    pub fn to_tape(&self, tape: &mut Tape<T>, trainable: bool) -> ModelParams<Var> {
        self.map(|_, p| {
            if trainable {
                tape.leaf(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, p| ok &= p.all_finite());
        ok
    }
}

/// Per-module parameter counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCensus {
    pub total: usize,
    pub modules: Vec<(String, usize)>,
}

fn conv_shape(out: usize, inp: usize, k: usize, bias: bool) -> ConvLayer<[usize; 4]> {
    ConvLayer {
        weight: [out, inp, k, k],
        bias: bias.then_some([1, out, 1, 1]),
    }
}

fn norm_shape(c: usize) -> NormLayer<[usize; 4]> {
    NormLayer {
        gamma: [1, c, 1, 1],
        beta: [1, c, 1, 1],
    }
}

fn gate_shape(cfg: &ModelConfig, input: usize, k: usize) -> GateNet<[usize; 4]> {
    let c = cfg.latent_channels;
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    for layer in 0..cfg.gate_depth {
        convs.push(conv_shape(c, if layer == 0 { input } else { c }, k, true));
        if layer + 1 < cfg.gate_depth {
            norms.push(norm_shape(c));
        }
    }
    GateNet { convs, norms }
}

fn cell_shape(cfg: &ModelConfig, input: usize, k: usize) -> CellParams<[usize; 4]> {
    CellParams {
        input: gate_shape(cfg, input, k),
        forget: gate_shape(cfg, input, k),
        cell: gate_shape(cfg, input, k),
        output: gate_shape(cfg, input, k),
        cell_norm: norm_shape(cfg.latent_channels),
    }
}

fn decoder_shape(cfg: &ModelConfig, out: usize) -> DecoderParams<[usize; 4]> {
    let widths = cfg.decoder_widths();
    let mut prev = cfg.latent_channels;
    let mut tconvs = Vec::new();
    let mut norms = Vec::new();
    for &w in &widths {
        tconvs.push(ConvLayer {
            weight: [prev, w, cfg.decoder_kernel, cfg.decoder_kernel],
            bias: None,
        });
        norms.push(norm_shape(w));
        prev = w;
    }
    DecoderParams {
        tconvs,
        norms,
        head: conv_shape(out, prev, cfg.decoder_kernel, true),
    }
}

impl ModelParams<[usize; 4]> {
    /// Tensor shapes implied by `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let widths = cfg.encoder_widths();
        let mut prev = cfg.input_channels;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            convs.push(conv_shape(w, prev, cfg.encoder_kernels[i], false));
            norms.push(norm_shape(w));
            prev = w;
        }
        let c = cfg.latent_channels;
        let per_step = if cfg.ablation.direct_multiframe {
            cfg.waypoints
        } else {
            1
        };
        ModelParams {
            encoder: EncoderParams { convs, norms },
            accumulation: cell_shape(cfg, 2 * c, cfg.accumulation_kernel),
            forecast: (!cfg.ablation.direct_multiframe)
                .then(|| cell_shape(cfg, c, cfg.forecast_kernel)),
            occupancy_decoder: decoder_shape(cfg, 2 * per_step),
            flow_decoder: decoder_shape(cfg, 2 * per_step),
        }
    }

    pub fn census(&self) -> ParamCensus {
        const MODULES: [&str; 5] = [
            "encoder",
            "accumulation",
            "forecast",
            "decoder.occupancy",
            "decoder.flow",
        ];
        let mut counts = [0usize; 5];
        self.for_each(|name, shape| {
            if let Some(i) = MODULES.iter().position(|m| name.starts_with(&format!("{m}."))) {
                counts[i] += shape.iter().product::<usize>();
            }
        });
        ParamCensus {
            total: counts.iter().sum(),
            modules: MODULES
                .iter()
                .zip(counts)
                .map(|(m, n)| (m.to_string(), n))
                .collect(),
        }
    }
}

/// Fresh parameters: conv weights uniform in `±sqrt(1 / fan_in)` with
/// `fan_in = in_channels * k * k`, biases zero except the forget gates' final
/// bias (1.0), group-norm scale 1 and shift 0.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<FeatureGrid<f32>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forget_final = format!("forget.{}.conv.bias", cfg.gate_depth - 1);
    Ok(ModelParams::shapes(cfg).map(|name, &shape| {
        if name.ends_with(".gamma") {
            FeatureGrid::full(shape, 1.0)
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            let v = if name.ends_with(&forget_final) { 1.0 } else { 0.0 };
            FeatureGrid::full(shape, v)
        } else {
            let fan_in = if name.contains(".tconv.") {
                shape[0] * shape[2] * shape[3]
            } else {
                shape[1] * shape[2] * shape[3]
            };
            let bound = (1.0 / fan_in as f64).sqrt() as f32;
            FeatureGrid::from_fn(shape, |_| rng.gen_range(-bound..=bound))
        }
    }))
}
