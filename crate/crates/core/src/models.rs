//! Toy complex encoder-decoder mask estimators.
//!
//! Both architectures share the same skeleton:
//!
//! * frequency preparation: the Nyquist row of the `(B, 1, F, T)` input is
//!   dropped and the remaining `F - 1` rows are zero-padded at the top up to
//!   a multiple of the total frequency stride;
//! * encoder layer: causal time padding of `k_t - 1` frames, complex conv
//!   (frequency padding `k_f / 2`), complex batch norm, complex leaky ReLU;
//! * optional bottleneck (`crn`): complex LSTM over time frames on the
//!   flattened `(C, F_L)` feature, projected back by a complex dense layer;
//! * decoder layer `j` mirrors encoder `L - 1 - j`; from `j = 1` its input is
//!   the previous decoder output concatenated (channels) with the skip
//!   feature of the mirrored encoder layer. A complex deconv restores the
//!   frequency size; its `T + k_t - 1` output frames are cut to the first
//!   `T`, keeping the time axis causal;
//! * the last decoder layer adds a complex bias and applies `tanh` (or
//!   nothing when the mask is unbounded);
//! * frequency restoration: the padded rows are removed and the Nyquist row
//!   of the mask repeats the row below it.
//!
//! Attention blocks sit on every skip path (before concatenation) and after
//! the activation of every decoder layer except the last.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::app::config::parse_kv;
use crate::autograd::{Bound, BnVars, CVar, Graph, ParamId, ParamStore};
use crate::ccbam::{ccbam_param_count, CcbamIds, DEFAULT_REDUCTION};
use crate::ctensor::{BnBatchStats, BnRunning, ComplexTensor, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::signal::StftConfig;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Unet,
    Crn,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Crn => "crn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Arch::Unet),
            "crn" => Ok(Arch::Crn),
            _ => Err(Error::Config(format!("unknown arch {s:?} (expected unet or crn)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSites {
    None,
    SkipOnly,
    DecoderOnly,
    SkipAndDecoder,
}

impl AttentionSites {
    pub fn on_skips(self) -> bool {
        matches!(self, AttentionSites::SkipOnly | AttentionSites::SkipAndDecoder)
    }

    pub fn on_decoder(self) -> bool {
        matches!(self, AttentionSites::DecoderOnly | AttentionSites::SkipAndDecoder)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionSites::None => "none",
            AttentionSites::SkipOnly => "skip_only",
            AttentionSites::DecoderOnly => "decoder_only",
            AttentionSites::SkipAndDecoder => "skip_and_decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionSites::None),
            "skip_only" => Ok(AttentionSites::SkipOnly),
            "decoder_only" => Ok(AttentionSites::DecoderOnly),
            "skip_and_decoder" => Ok(AttentionSites::SkipAndDecoder),
            _ => Err(Error::Config(format!(
                "unknown attention {s:?} (expected none, skip_only, decoder_only or skip_and_decoder)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskBound {
    Tanh,
    None,
}

impl MaskBound {
    pub fn name(self) -> &'static str {
        match self {
            MaskBound::Tanh => "tanh",
            MaskBound::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(MaskBound::Tanh),
            "none" => Ok(MaskBound::None),
            _ => Err(Error::Config(format!("unknown mask bound {s:?} (expected tanh or none)"))),
        }
    }
}

/// One encoder layer: output channels, kernel `(k_f, k_t)`, stride `(s_f, s_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl LayerSpec {
    pub fn new(channels: usize) -> Self {
        LayerSpec {
            channels,
            kernel: (5, 2),
            stride: (2, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub encoder: Vec<LayerSpec>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub attention: AttentionSites,
    pub reduction: usize,
    pub mask_bound: MaskBound,
    pub stft: StftConfig,
}

fn pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("expected AxB, got {s:?}")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad integer in {s:?}")));
    Ok((p(a)?, p(b)?))
}

fn usize_value(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

impl ModelConfig {
    /// Four-layer U-Net with channels 8, 16, 32, 32.
    pub fn unet_toy() -> Self {
        ModelConfig {
            arch: Arch::Unet,
            encoder: [8, 16, 32, 32].into_iter().map(LayerSpec::new).collect(),
            lstm_hidden: 0,
            lstm_layers: 0,
            attention: AttentionSites::SkipAndDecoder,
            reduction: DEFAULT_REDUCTION,
            mask_bound: MaskBound::Tanh,
            stft: StftConfig::UNET,
        }
    }

    /// Three-layer CRN with 8 channels per layer and one complex LSTM layer of 32 units.
    pub fn crn_toy() -> Self {
        ModelConfig {
            arch: Arch::Crn,
            encoder: [8, 8, 8].into_iter().map(LayerSpec::new).collect(),
            lstm_hidden: 32,
            lstm_layers: 1,
            attention: AttentionSites::SkipAndDecoder,
            reduction: DEFAULT_REDUCTION,
            mask_bound: MaskBound::Tanh,
            stft: StftConfig::CRN,
        }
    }

    pub fn preset(arch: Arch) -> Self {
        match arch {
            Arch::Unet => Self::unet_toy(),
            Arch::Crn => Self::crn_toy(),
        }
    }

    pub fn layers(&self) -> usize {
        self.encoder.len()
    }

    /// Product of encoder frequency strides.
    pub fn freq_multiple(&self) -> usize {
        self.encoder.iter().map(|l| l.stride.0).product()
    }

    /// Frequency rows seen by the first encoder layer.
    pub fn padded_bins(&self) -> usize {
        let f = self.stft.bins() - 1;
        let m = self.freq_multiple();
        f.div_ceil(m) * m
    }

    /// Frequency rows at the input of every encoder layer, plus the bottleneck.
    pub fn freq_pyramid(&self) -> Vec<usize> {
        let mut f = vec![self.padded_bins()];
        for l in &self.encoder {
            let last = *f.last().expect("non-empty");
            f.push((last + 2 * (l.kernel.0 / 2) - l.kernel.0) / l.stride.0 + 1);
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.encoder.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (i, l) in self.encoder.iter().enumerate() {
            if l.channels == 0 || l.kernel.0 == 0 || l.kernel.1 == 0 || l.stride.0 == 0 {
                return Err(Error::Config(format!("encoder layer {i}: zero channels, kernel or stride")));
            }
            if l.stride.1 != 1 {
                return Err(Error::Config(format!("encoder layer {i}: time stride must be 1")));
            }
            if l.kernel.0 % 2 == 0 || l.kernel.0 < l.stride.0 {
                return Err(Error::Config(format!(
                    "encoder layer {i}: frequency kernel {} must be odd and at least the stride {}",
                    l.kernel.0, l.stride.0
                )));
            }
        }
        // the mirrored deconv must be able to restore every encoder input size
        let pyr = self.freq_pyramid();
        for (i, l) in self.encoder.iter().enumerate() {
            let (fin, fout) = (pyr[i], pyr[i + 1]);
            let base = (fout - 1) * l.stride.0 + l.kernel.0 - 2 * (l.kernel.0 / 2);
            if fout == 0 || fin < base || fin >= base + l.stride.0 {
                return Err(Error::Config(format!(
                    "decoder cannot mirror encoder layer {i}: frequency {fin} -> {fout} -> {base}"
                )));
            }
        }
        if self.attention != AttentionSites::None {
            for (i, l) in self.encoder.iter().enumerate() {
                if self.reduction == 0 || l.channels % self.reduction != 0 {
                    return Err(Error::Config(format!(
                        "reduction ratio {} must divide the {} channels of layer {i}",
                        self.reduction, l.channels
                    )));
                }
            }
        }
        if self.arch == Arch::Crn && (self.lstm_hidden == 0 || self.lstm_layers == 0) {
            return Err(Error::Config("crn needs lstm_hidden and lstm_layers > 0".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "arch" => self.arch = Arch::parse(value)?,
            "encoder" => {
                let mut layers = Vec::new();
                for item in value.split(',') {
                    let parts: Vec<&str> = item.trim().split(':').collect();
                    let channels = usize_value(key, parts[0].trim())?;
                    let mut l = LayerSpec::new(channels);
                    if parts.len() == 3 {
                        l.kernel = pair(parts[1])?;
                        l.stride = pair(parts[2])?;
                    } else if parts.len() != 1 {
                        return Err(Error::Config(format!("encoder item {item:?}: expected C or C:KFxKT:SFxST")));
                    }
                    layers.push(l);
                }
                self.encoder = layers;
            }
            "lstm_hidden" => self.lstm_hidden = usize_value(key, value)?,
            "lstm_layers" => self.lstm_layers = usize_value(key, value)?,
            "attention" => self.attention = AttentionSites::parse(value)?,
            "reduction" => self.reduction = usize_value(key, value)?,
            "mask_bound" => self.mask_bound = MaskBound::parse(value)?,
            "win_len" => self.stft.win_len = usize_value(key, value)?,
            "hop" => self.stft.hop = usize_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let enc: Vec<String> = self
            .encoder
            .iter()
            .map(|l| format!("{}:{}x{}:{}x{}", l.channels, l.kernel.0, l.kernel.1, l.stride.0, l.stride.1))
            .collect();
        let _ = writeln!(s, "arch = {}", self.arch.name());
        let _ = writeln!(s, "encoder = {}", enc.join(", "));
        let _ = writeln!(s, "lstm_hidden = {}", self.lstm_hidden);
        let _ = writeln!(s, "lstm_layers = {}", self.lstm_layers);
        let _ = writeln!(s, "attention = {}", self.attention.name());
        let _ = writeln!(s, "reduction = {}", self.reduction);
        let _ = writeln!(s, "mask_bound = {}", self.mask_bound.name());
        let _ = writeln!(s, "win_len = {}", self.stft.win_len);
        let _ = writeln!(s, "hop = {}", self.stft.hop);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::unet_toy();
        for (key, value) in parse_kv(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown model key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Batch statistics are used and returned in training mode; eval mode uses
/// the running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma_rr: ParamId,
    gamma_ii: ParamId,
    gamma_ri: ParamId,
    beta: ParamId,
    slot: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    kernel: (usize, usize),
    stride: (usize, usize),
    bn: Option<BnIds>,
    bias: Option<ParamId>,
}

impl ConvLayer {
    fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, (self.kernel.0 / 2, 0))
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmIds {
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    layers: Vec<LstmIds>,
    projection: ParamId,
    hidden: usize,
}

/// Parameter counts of a built model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSummary {
    pub total: usize,
    pub attention: usize,
    pub attention_blocks: usize,
}

impl ParamSummary {
    pub fn base(&self) -> usize {
        self.total - self.attention
    }

    /// Attention parameters as a percentage of the model without them.
    pub fn overhead_percent(&self) -> f64 {
        100.0 * self.attention as f64 / self.base() as f64
    }
}

/// A built model: the layer graph plus its parameters and running statistics.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Running statistics of every batch-norm layer, in layer order.
    pub running: Vec<BnRunning<T>>,
    bn_names: Vec<String>,
    encoders: Vec<ConvLayer>,
    decoders: Vec<ConvLayer>,
    skip_attention: Vec<Option<CcbamIds>>,
    decoder_attention: Vec<Option<CcbamIds>>,
    bottleneck: Option<Bottleneck>,
}

/// Switches used by sensitivity tests.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Skip paths (by encoder layer index) replaced by zeros.
    pub dropped_skips: Vec<usize>,
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub mask: CVar,
    /// Batch statistics of every batch-norm layer (training mode only).
    pub batch_stats: Vec<BnBatchStats<T>>,
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model {
            params: ParamStore::new(),
            running: Vec::new(),
            bn_names: Vec::new(),
            encoders: Vec::new(),
            decoders: Vec::new(),
            skip_attention: Vec::new(),
            decoder_attention: Vec::new(),
            bottleneck: None,
            config: config.clone(),
        };
        let layers = config.layers();
        let in_channels = |l: usize| if l == 0 { 1 } else { config.encoder[l - 1].channels };

        for (l, spec) in config.encoder.iter().enumerate() {
            let (ci, co) = (in_channels(l), spec.channels);
            let layer = model.conv_layer(&format!("enc{l}"), Shape::new(co, ci, spec.kernel.0, spec.kernel.1), spec, (ci, co), true, &mut rng)?;
            model.encoders.push(layer);
        }
        let pyr = config.freq_pyramid();
        if config.arch == Arch::Crn {
            let feat = config.encoder[layers - 1].channels * pyr[layers];
            let h = config.lstm_hidden;
            let mut lstm = Vec::new();
            for k in 0..config.lstm_layers {
                let n = if k == 0 { feat } else { h };
                let p = format!("lstm{k}");
                lstm.push(LstmIds {
                    w_input: model.params.add_complex(&format!("{p}.w_input"), ComplexTensor::glorot(Shape::matrix(4 * h, n), n, 4 * h, &mut rng))?,
                    w_hidden: model.params.add_complex(&format!("{p}.w_hidden"), ComplexTensor::glorot(Shape::matrix(4 * h, h), h, 4 * h, &mut rng))?,
                    bias: model.params.add_complex(&format!("{p}.bias"), ComplexTensor::zeros(Shape::new(1, 4 * h, 1, 1)))?,
                });
            }
            let projection = model
                .params
                .add_complex("lstm_proj.weight", ComplexTensor::glorot(Shape::matrix(feat, h), h, feat, &mut rng))?;
            model.bottleneck = Some(Bottleneck {
                layers: lstm,
                projection,
                hidden: h,
            });
        }
        for j in 0..layers {
            let l = layers - 1 - j;
            let spec = &config.encoder[l];
            let ci = if j == 0 { spec.channels } else { 2 * spec.channels };
            let co = in_channels(l);
            let last = j == layers - 1;
            let layer = model.conv_layer(&format!("dec{j}"), Shape::new(ci, co, spec.kernel.0, spec.kernel.1), spec, (ci, co), !last, &mut rng)?;
            model.decoders.push(layer);
        }
        for l in 0..layers - 1 {
            let c = config.encoder[l].channels;
            let att = if config.attention.on_skips() {
                Some(CcbamIds::register(&mut model.params, &format!("skip{l}.att"), c, config.reduction, &mut rng)?)
            } else {
                None
            };
            model.skip_attention.push(att);
        }
        for j in 0..layers - 1 {
            let c = in_channels(layers - 1 - j);
            let att = if config.attention.on_decoder() {
                Some(CcbamIds::register(&mut model.params, &format!("dec{j}.att"), c, config.reduction, &mut rng)?)
            } else {
                None
            };
            model.decoder_attention.push(att);
        }
        Ok(model)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_layer<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        wshape: Shape,
        spec: &LayerSpec,
        (ci, co): (usize, usize),
        with_bn: bool,
        rng: &mut R,
    ) -> Result<ConvLayer> {
        let area = spec.kernel.0 * spec.kernel.1;
        let weight = self
            .params
            .add_complex(&format!("{name}.weight"), ComplexTensor::glorot(wshape, ci * area, co * area, rng))?;
        let (bn, bias) = if with_bn {
            let g = T::lit(std::f64::consts::FRAC_1_SQRT_2);
            let chan = Shape::new(1, co, 1, 1);
            let ids = BnIds {
                gamma_rr: self.params.add_real(&format!("{name}.bn.gamma_rr"), Tensor::full(chan, g))?,
                gamma_ii: self.params.add_real(&format!("{name}.bn.gamma_ii"), Tensor::full(chan, g))?,
                gamma_ri: self.params.add_real(&format!("{name}.bn.gamma_ri"), Tensor::zeros(chan))?,
                beta: self.params.add_complex(&format!("{name}.bn.beta"), ComplexTensor::zeros(chan))?,
                slot: self.running.len(),
            };
            self.running.push(BnRunning::new(co));
            self.bn_names.push(format!("{name}.bn"));
            (Some(ids), None)
        } else {
            let bias = self
                .params
                .add_complex(&format!("{name}.bias"), ComplexTensor::zeros(Shape::new(1, co, 1, 1)))?;
            (None, Some(bias))
        };
        Ok(ConvLayer {
            weight,
            kernel: spec.kernel,
            stride: spec.stride,
            bn,
            bias,
        })
    }

    /// Names of the batch-norm layers, parallel to `running`.
    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn summary(&self) -> ParamSummary {
        let blocks: Vec<usize> = self
            .skip_attention
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_some())
            .map(|(l, _)| self.config.encoder[l].channels)
            .chain(
                self.decoder_attention
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.is_some())
                    .map(|(j, _)| self.config.encoder[self.config.layers() - 2 - j].channels),
            )
            .collect();
        ParamSummary {
            total: self.params.num_scalars(),
            attention: blocks.iter().map(|&c| ccbam_param_count(c, self.config.reduction)).sum(),
            attention_blocks: blocks.len(),
        }
    }

    /// Number of skip connections.
    pub fn num_skips(&self) -> usize {
        self.skip_attention.len()
    }

    /// Updates running statistics from the batch statistics of a training pass.
    pub fn update_running(&mut self, stats: &[BnBatchStats<T>]) {
        let m = T::lit(BN_MOMENTUM);
        for (run, s) in self.running.iter_mut().zip(stats) {
            run.update(m, s);
        }
    }

    fn bn(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: CVar,
        ids: BnIds,
        mode: Mode,
        stats: &mut Vec<BnBatchStats<T>>,
    ) -> Result<CVar> {
        let vars = BnVars {
            gamma_rr: bound.real(ids.gamma_rr),
            gamma_ii: bound.real(ids.gamma_ii),
            gamma_ri: bound.real(ids.gamma_ri),
            beta: bound.complex(ids.beta),
        };
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some(&self.running[ids.slot]),
        };
        let (y, s) = g.cbatchnorm(x, vars, running, T::lit(BN_EPS))?;
        stats.extend(s);
        Ok(y)
    }

    /// Records the forward pass; `x` is a `(B, 1, F, T)` spectrogram.
    pub fn forward_var(&self, g: &mut Graph<T>, bound: &Bound, x: CVar, mode: Mode) -> Result<ForwardOutput<T>> {
        self.forward_var_with(g, bound, x, mode, &ForwardOptions::default())
    }

    pub fn forward_var_with(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: CVar,
        mode: Mode,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let [b, c, f, t] = g.cshape(x).dims();
        let bins = cfg.stft.bins();
        if c != 1 || f != bins {
            return Err(Error::dim(
                "model",
                format!(
                    "expected a (B, 1, {bins}, T) spectrogram, got {}; {} rows are padded to a multiple of {}",
                    g.cshape(x),
                    bins - 1,
                    cfg.freq_multiple()
                ),
            ));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let mut stats = Vec::new();

        let fp = cfg.padded_bins();
        let mut h = g.cnarrow(x, 2, 0, bins - 1)?;
        if fp > bins - 1 {
            h = g.cpad(h, 2, 0, fp - (bins - 1));
        }

        let mut skips = Vec::with_capacity(self.encoders.len());
        for layer in &self.encoders {
            let padded = g.cpad(h, 3, layer.kernel.1 - 1, 0);
            let w = bound.complex(layer.weight);
            let y = g.cconv2d(padded, w, layer.spec())?;
            let y = self.bn(g, bound, y, layer.bn.expect("encoder has batch norm"), mode, &mut stats)?;
            h = g.cleaky_relu(y, slope);
            skips.push(h);
        }

        if let Some(bn) = &self.bottleneck {
            h = self.recurrent(g, bound, bn, h, b, t)?;
        }

        let layers = self.decoders.len();
        let pyr = cfg.freq_pyramid();
        for (j, layer) in self.decoders.iter().enumerate() {
            let l = layers - 1 - j;
            if j > 0 {
                let mut s = skips[l];
                if opts.dropped_skips.contains(&l) {
                    let zeros = ComplexTensor::zeros(g.cshape(s));
                    s = g.cconstant(&zeros);
                } else if let Some(att) = &self.skip_attention[l] {
                    s = att.forward(g, bound, s)?;
                }
                h = g.cconcat(&[h, s], 1)?;
            }
            let w = bound.complex(layer.weight);
            let out_hw = (pyr[l], t + layer.kernel.1 - 1);
            let y = g.cdeconv2d(h, w, layer.spec(), Some(out_hw))?;
            let y = g.cnarrow(y, 3, 0, t)?;
            h = match (layer.bn, layer.bias) {
                (Some(ids), _) => {
                    let y = self.bn(g, bound, y, ids, mode, &mut stats)?;
                    let y = g.cleaky_relu(y, slope);
                    match &self.decoder_attention[j] {
                        Some(att) => att.forward(g, bound, y)?,
                        None => y,
                    }
                }
                (None, Some(bias)) => {
                    let bias = bound.complex(bias);
                    let y = g.cadd(y, bias)?;
                    match cfg.mask_bound {
                        MaskBound::Tanh => g.ctanh(y),
                        MaskBound::None => y,
                    }
                }
                (None, None) => unreachable!("every layer has batch norm or a bias"),
            };
        }

        let m = g.cnarrow(h, 2, 0, bins - 1)?;
        let nyq = g.cnarrow(m, 2, bins - 2, 1)?;
        let mask = g.cconcat(&[m, nyq], 2)?;
        Ok(ForwardOutput { mask, batch_stats: stats })
    }

    fn recurrent(&self, g: &mut Graph<T>, bound: &Bound, bn: &Bottleneck, z: CVar, b: usize, t: usize) -> Result<CVar> {
        let [_, c, f, _] = g.cshape(z).dims();
        let feat = c * f;
        let zero = ComplexTensor::zeros(Shape::new(b, bn.hidden, 1, 1));
        let mut state: Vec<(CVar, CVar)> = bn.layers.iter().map(|_| (g.cconstant(&zero), g.cconstant(&zero))).collect();
        let proj = bound.complex(bn.projection);
        let mut frames = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.cnarrow(z, 3, step, 1)?;
            let mut inp = g.creshape(xt, Shape::new(b, feat, 1, 1))?;
            for (ids, st) in bn.layers.iter().zip(state.iter_mut()) {
                let (h, cell) = g.clstm_cell(
                    inp,
                    st.0,
                    st.1,
                    bound.complex(ids.w_input),
                    bound.complex(ids.w_hidden),
                    bound.complex(ids.bias),
                )?;
                *st = (h, cell);
                inp = h;
            }
            let y = g.cdense(inp, proj)?;
            frames.push(g.creshape(y, Shape::new(b, c, f, 1))?);
        }
        g.cconcat(&frames, 3)
    }

    /// Mask for a batch of spectrograms without recording gradients.
    /// Training mode also updates the running statistics.
    pub fn forward(&mut self, x: &ComplexTensor<T>, mode: Mode) -> Result<ComplexTensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_constants(&mut g);
        let xv = g.cconstant(x);
        let out = self.forward_var(&mut g, &bound, xv, mode)?;
        if mode == Mode::Train {
            self.update_running(&out.batch_stats);
        }
        Ok(g.cvalue(out.mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_config(arch: Arch) -> ModelConfig {
        let mut cfg = ModelConfig::preset(arch);
        cfg.stft = StftConfig::new(64, 16).unwrap();
        cfg.encoder = [4, 4].into_iter().map(LayerSpec::new).collect();
        cfg.reduction = 2;
        cfg.lstm_hidden = 6;
        cfg
    }

    fn input(cfg: &ModelConfig, b: usize, t: usize, seed: u64) -> ComplexTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexTensor::uniform(Shape::new(b, 1, cfg.stft.bins(), t), 1.0, &mut rng)
    }

    #[test]
    fn toy_unet_counts() {
        let m = Model::<f32>::build(ModelConfig::unet_toy(), 0).unwrap();
        let s = m.summary();
        assert!(s.total < 100_000, "{}", s.total);
        assert_eq!(s.attention_blocks, 2 * m.num_skips());
        assert!(s.overhead_percent() < 10.0);
        let names: Vec<&str> = m.params.iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"skip0.att.fc1") && names.contains(&"dec2.att.spatial"));
    }

    #[test]
    fn toy_crn_counts() {
        let m = Model::<f32>::build(ModelConfig::crn_toy(), 0).unwrap();
        assert!(m.summary().total < 100_000);
    }

    #[test]
    fn shapes_and_bounds() {
        for arch in [Arch::Unet, Arch::Crn] {
            let cfg = small_config(arch);
            let mut m = Model::<f64>::build(cfg.clone(), 3).unwrap();
            let x = input(&cfg, 2, 7, 1).scale(5.0);
            let y = m.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.re().data().iter().chain(y.im().data()).all(|v| v.abs() < 1.0));
            let last = cfg.stft.bins() - 1;
            assert_eq!(y.at(1, 0, last, 3), y.at(1, 0, last - 1, 3));
        }
    }

    #[test]
    fn same_seed_same_parameters_and_output() {
        let cfg = small_config(Arch::Unet);
        let mut a = Model::<f64>::build(cfg.clone(), 11).unwrap();
        let mut b = Model::<f64>::build(cfg.clone(), 11).unwrap();
        assert_eq!(a.params, b.params);
        let x = input(&cfg, 2, 5, 2);
        assert_eq!(a.forward(&x, Mode::Train).unwrap(), b.forward(&x, Mode::Train).unwrap());
        assert_eq!(a.running, b.running);
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let cfg = ModelConfig::crn_toy();
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("arch = unet\nbogus = 1\n").is_err());
        let mut bad = ModelConfig::unet_toy();
        bad.reduction = 3;
        assert!(Model::<f32>::build(bad, 0).is_err());
    }

    #[test]
    fn wrong_frequency_geometry_is_reported() {
        let cfg = small_config(Arch::Unet);
        let mut m = Model::<f64>::build(cfg, 0).unwrap();
        let x = ComplexTensor::zeros(Shape::new(2, 1, 20, 4));
        let err = m.forward(&x, Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("multiple of 4"), "{err}");
    }
}
