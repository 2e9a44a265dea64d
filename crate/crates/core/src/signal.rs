//! STFT and ISTFT as frozen convolution layers, complex ratio masks and
//! SNR-controlled mixing.
//!
//! Spectrograms are complex tensors shaped `(batch, 1, bins, frames)` with
//! `bins = win_len / 2 + 1`. Frame `t` is centred on sample `t * hop` after
//! reflect padding of `win_len / 2` samples on both ends.

use std::f64::consts::PI;

use crate::autograd::{CVar, Graph};
use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{Real, Shape, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;

/// Regulariser of the ratio-mask denominator.
pub const CRM_EPS: f64 = 1e-8;

/// Mono PCM audio at 16 kHz, amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveSignal {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("sample {i} is not finite")));
        }
        Ok(WaveSignal {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        power(&self.samples)
    }
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Hann-windowed STFT geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
}

impl StftConfig {
    /// 64 ms window, 16 ms hop at 16 kHz.
    pub const UNET: StftConfig = StftConfig { win_len: 1024, hop: 256 };
    /// 20 ms window, 10 ms hop at 16 kHz.
    pub const CRN: StftConfig = StftConfig { win_len: 320, hop: 160 };

    pub fn new(win_len: usize, hop: usize) -> Result<Self> {
        let cfg = StftConfig { win_len, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len < 2 || self.win_len % 2 != 0 {
            return Err(Error::Config(format!("window length {} must be even and >= 2", self.win_len)));
        }
        if self.hop == 0 || self.hop >= self.win_len || self.win_len % self.hop != 0 {
            return Err(Error::Config(format!(
                "hop {} must divide window length {} and be smaller than it",
                self.hop, self.win_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reflect padding without repeating the edge sample.
fn reflect_pad(x: &[f64], pad: usize) -> Result<Vec<f64>> {
    if x.len() <= pad {
        return Err(Error::Input(format!(
            "signal of {} samples is too short for reflect padding of {pad}",
            x.len()
        )));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    Ok(out)
}

/// STFT/ISTFT pair with cached frozen kernels.
#[derive(Debug, Clone)]
pub struct Stft<T> {
    config: StftConfig,
    analysis_re: Tensor<T>,
    analysis_im: Tensor<T>,
    synthesis_re: Tensor<T>,
    synthesis_im: Tensor<T>,
    window: Vec<f64>,
}

impl<T: Real> Stft<T> {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let n = config.win_len;
        let f = config.bins();
        let w = hann(n);
        let shape = Shape::new(f, 1, 1, n);
        let mut ar = Vec::with_capacity(f * n);
        let mut ai = Vec::with_capacity(f * n);
        let mut sr = Vec::with_capacity(f * n);
        let mut si = Vec::with_capacity(f * n);
        for k in 0..f {
            // DC and Nyquist appear once in the one-sided spectrum, the others twice.
            let weight = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            for (i, &wi) in w.iter().enumerate() {
                // reduce k*i mod n so the phase stays exact for long windows
                let theta = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                let (s, c) = theta.sin_cos();
                ar.push(T::lit(wi * c));
                ai.push(T::lit(-wi * s));
                sr.push(T::lit(weight * wi * c / n as f64));
                si.push(T::lit(-weight * wi * s / n as f64));
            }
        }
        Ok(Stft {
            config,
            analysis_re: Tensor::from_vec(shape, ar)?,
            analysis_im: Tensor::from_vec(shape, ai)?,
            synthesis_re: Tensor::from_vec(shape, sr)?,
            synthesis_im: Tensor::from_vec(shape, si)?,
            window: w,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::new((1, self.config.hop), (0, 0))
    }

    /// Spectrogram of a batch of equal-length signals.
    pub fn forward(&self, batch: &[&[f64]]) -> Result<ComplexTensor<T>> {
        let n = self.config.win_len;
        let len = batch.first().map_or(0, |x| x.len());
        if batch.is_empty() || batch.iter().any(|x| x.len() != len) {
            return Err(Error::Input("stft batch must hold signals of one length".into()));
        }
        if len < n {
            return Err(Error::Input(format!("signal of {len} samples is shorter than one window ({n})")));
        }
        let mut padded = Vec::with_capacity(batch.len() * (len + n));
        for x in batch {
            padded.extend(reflect_pad(x, n / 2)?.into_iter().map(T::lit));
        }
        let input = Tensor::from_vec(Shape::new(batch.len(), 1, 1, len + n), padded)?;
        let re = kernels::conv2d(&input, &self.analysis_re, self.spec())?;
        let im = kernels::conv2d(&input, &self.analysis_im, self.spec())?;
        let [b, f, _, t] = re.dims();
        let shape = Shape::new(b, 1, f, t);
        ComplexTensor::new(re.reshape(shape)?, im.reshape(shape)?)
    }

    pub fn stft(&self, x: &WaveSignal) -> Result<ComplexTensor<T>> {
        self.forward(&[&x.samples])
    }

    /// Inverse of the squared-window overlap-add envelope for `frames` frames.
    fn inv_envelope(&self, frames: usize) -> Result<Tensor<T>> {
        let n = self.config.win_len;
        let hop = self.config.hop;
        let total = (frames - 1) * hop + n;
        let mut env = vec![0.0; total];
        for t in 0..frames {
            for (i, w) in self.window.iter().enumerate() {
                env[t * hop + i] += w * w;
            }
        }
        let lo = n / 2;
        let hi = total - n / 2;
        if let Some(i) = env[lo..hi].iter().position(|&e| e < 1e-10) {
            return Err(Error::Config(format!(
                "window envelope vanishes at sample {i}; hop {hop} does not overlap-add with window {n}"
            )));
        }
        let inv = env.iter().map(|&e| if e < 1e-10 { T::zero() } else { T::lit(1.0 / e) }).collect();
        Tensor::from_vec(Shape::new(1, 1, 1, total), inv)
    }

    fn check_geometry(&self, shape: Shape) -> Result<()> {
        let [_, c, f, t] = shape.dims();
        if c != 1 || f != self.config.bins() || t == 0 {
            return Err(Error::dim(
                "istft",
                format!("expected (B, 1, {}, T) spectrogram, got {shape}", self.config.bins()),
            ));
        }
        Ok(())
    }

    /// Overlap-add synthesis, trimmed or zero-padded to `length` samples.
    /// Returns a `(batch, 1, 1, length)` tensor.
    pub fn inverse(&self, spec: &ComplexTensor<T>, length: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let s = g.cconstant(spec);
        let y = self.inverse_var(&mut g, s, length)?;
        Ok(g.value(y).clone())
    }

    pub fn istft(&self, spec: &ComplexTensor<T>, length: usize) -> Result<WaveSignal> {
        let y = self.inverse(spec, length)?;
        if y.dims()[0] != 1 {
            return Err(Error::dim("istft", "expected a single spectrogram"));
        }
        WaveSignal::new(y.to_f64())
    }

    /// Recorded ISTFT so gradients flow from the waveform back to the spectrum.
    pub fn inverse_var(&self, g: &mut Graph<T>, spec: CVar, length: usize) -> Result<crate::autograd::Var> {
        let shape = g.cshape(spec);
        self.check_geometry(shape)?;
        let [b, _, f, t] = shape.dims();
        let n = self.config.win_len;
        let flat = Shape::new(b, f, 1, t);
        let sr = g.reshape(spec.re, flat)?;
        let si = g.reshape(spec.im, flat)?;
        let kr = g.constant(self.synthesis_re.clone());
        let ki = g.constant(self.synthesis_im.clone());
        let yr = g.conv_transpose2d(sr, kr, self.spec(), None)?;
        let yi = g.conv_transpose2d(si, ki, self.spec(), None)?;
        let y = g.add(yr, yi)?;
        let env = g.constant(self.inv_envelope(t)?);
        let y = g.mul(y, env)?;
        let avail = g.shape(y).dims()[3] - n / 2;
        let keep = avail.min(length);
        let y = g.narrow(y, 3, n / 2, keep)?;
        Ok(if keep < length { g.pad(y, 3, 0, length - keep) } else { y })
    }
}

/// Ground-truth complex ratio mask `Y / X`, regularised by `eps`.
pub fn crm_ground_truth<T: Real>(x: &ComplexTensor<T>, y: &ComplexTensor<T>, eps: T) -> Result<ComplexTensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::dim("crm", format!("{} vs {}", x.shape(), y.shape())));
    }
    let (xr, xi, yr, yi) = (x.re().data(), x.im().data(), y.re().data(), y.im().data());
    let mut mr = Vec::with_capacity(xr.len());
    let mut mi = Vec::with_capacity(xr.len());
    for k in 0..xr.len() {
        let den = xr[k] * xr[k] + xi[k] * xi[k] + eps;
        mr.push((xr[k] * yr[k] + xi[k] * yi[k]) / den);
        mi.push((xr[k] * yi[k] - xi[k] * yr[k]) / den);
    }
    ComplexTensor::new(Tensor::from_vec(x.shape(), mr)?, Tensor::from_vec(x.shape(), mi)?)
}

/// Applies a complex mask to a spectrum by complex multiplication per bin.
pub fn apply_mask<T: Real>(x: &ComplexTensor<T>, m: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    if x.shape() != m.shape() {
        return Err(Error::dim("apply_mask", format!("{} vs {}", x.shape(), m.shape())));
    }
    let re = x.re().zip_map(m.re(), |a, b| a * b)?.zip_map(&x.im().zip_map(m.im(), |a, b| a * b)?, |p, q| p - q)?;
    let im = x.re().zip_map(m.im(), |a, b| a * b)?.zip_map(&x.im().zip_map(m.re(), |a, b| a * b)?, |p, q| p + q)?;
    ComplexTensor::new(re, im)
}

/// Recorded mask application.
pub fn apply_mask_var<T: Real>(g: &mut Graph<T>, x: CVar, m: CVar) -> Result<CVar> {
    if g.cshape(x) != g.cshape(m) {
        return Err(Error::dim("apply_mask", format!("{} vs {}", g.cshape(x), g.cshape(m))));
    }
    g.cmul(x, m)
}

/// Clean speech, scaled noise and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: WaveSignal,
    pub clean: WaveSignal,
    pub noise: WaveSignal,
}

/// Peak level the mixture is normalised to when it would otherwise clip.
pub const PEAK_LIMIT: f64 = 0.99;

/// Mixes `clean` with `noise` (looped or cut to length) at `snr_db`.
pub fn mix_at_snr(clean: &WaveSignal, noise: &WaveSignal, snr_db: f64) -> Result<Mixture> {
    let py = clean.power();
    if clean.is_empty() || py <= 0.0 {
        return Err(Error::Input("clean signal is silent".into()));
    }
    if noise.is_empty() || noise.power() <= 0.0 {
        return Err(Error::Input("noise signal is silent".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Input(format!("snr {snr_db} dB is not finite")));
    }
    let z: Vec<f64> = noise.samples.iter().copied().cycle().take(clean.len()).collect();
    let pz = power(&z);
    if pz <= 0.0 {
        return Err(Error::Input("noise segment is silent".into()));
    }
    let alpha = (py / (pz * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut y = clean.samples.clone();
    let mut z: Vec<f64> = z.into_iter().map(|v| v * alpha).collect();
    let mut x: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a + b).collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        let k = PEAK_LIMIT / peak;
        for v in x.iter_mut().chain(y.iter_mut()).chain(z.iter_mut()) {
            *v *= k;
        }
    }
    Ok(Mixture {
        noisy: WaveSignal::new(x)?,
        clean: WaveSignal::new(y)?,
        noise: WaveSignal::new(z)?,
    })
}
