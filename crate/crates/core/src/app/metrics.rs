//! Frequency-weighted segmental SNR.
//!
//! Frames of 400 samples (25 ms) with a 160-sample hop are Hann-windowed and
//! transformed; each bin's SNR `|X|² / |X − X̂|²` is clamped to
//! `[FWSEG_MIN, FWSEG_MAX]` and averaged with weights `|X|^0.2`. Frames whose
//! clean energy is negligible are skipped.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::signal::hann;

pub const FWSEG_FRAME: usize = 400;
pub const FWSEG_HOP: usize = 160;
pub const FWSEG_GAMMA: f64 = 0.2;
pub const FWSEG_MIN: f64 = -10.0;
pub const FWSEG_MAX: f64 = 35.0;
const SILENT_FRAME: f64 = 1e-10;

struct Dft {
    window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bins: usize,
}

impl Dft {
    fn new() -> Self {
        let n = FWSEG_FRAME;
        let bins = n / 2 + 1;
        let mut cos = Vec::with_capacity(bins * n);
        let mut sin = Vec::with_capacity(bins * n);
        for k in 0..bins {
            for t in 0..n {
                let a = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Dft { window: hann(n), cos, sin, bins }
    }

    fn apply(&self, frame: &[f64], out: &mut [(f64, f64)]) {
        let n = FWSEG_FRAME;
        let x: Vec<f64> = frame.iter().zip(&self.window).map(|(a, w)| a * w).collect();
        for (k, o) in out.iter_mut().enumerate() {
            let (c, s) = (&self.cos[k * n..(k + 1) * n], &self.sin[k * n..(k + 1) * n]);
            let re = x.iter().zip(c).map(|(a, b)| a * b).sum();
            let im = -x.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
            *o = (re, im);
        }
    }
}

/// Mean frequency-weighted segmental SNR of `estimate` against `clean`, in dB.
pub fn fwsegsnr(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    if clean.len() != estimate.len() {
        return Err(Error::dim(
            "fwsegsnr",
            format!("clean has {} samples, estimate {}", clean.len(), estimate.len()),
        ));
    }
    if clean.len() < FWSEG_FRAME {
        return Err(Error::Input(format!(
            "fwsegsnr needs at least {FWSEG_FRAME} samples, got {}",
            clean.len()
        )));
    }
    let dft = Dft::new();
    let mut xs = vec![(0.0, 0.0); dft.bins];
    let mut es = vec![(0.0, 0.0); dft.bins];
    let (mut total, mut frames) = (0.0, 0usize);
    let mut start = 0;
    while start + FWSEG_FRAME <= clean.len() {
        let c = &clean[start..start + FWSEG_FRAME];
        let e = &estimate[start..start + FWSEG_FRAME];
        start += FWSEG_HOP;
        if c.iter().map(|v| v * v).sum::<f64>() <= SILENT_FRAME {
            continue;
        }
        dft.apply(c, &mut xs);
        dft.apply(e, &mut es);
        let (mut num, mut den) = (0.0, 0.0);
        for (&(xr, xi), &(er, ei)) in xs.iter().zip(&es) {
            let p = xr * xr + xi * xi;
            let d = (xr - er).powi(2) + (xi - ei).powi(2);
            let w = p.powf(FWSEG_GAMMA / 2.0);
            let snr = if d == 0.0 {
                FWSEG_MAX
            } else {
                (10.0 * (p / d).log10()).clamp(FWSEG_MIN, FWSEG_MAX)
            };
            num += w * snr;
            den += w;
        }
        if den > 0.0 {
            total += (num / den).clamp(FWSEG_MIN, FWSEG_MAX);
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::Input("fwsegsnr: every clean frame is silent".into()));
    }
    Ok(total / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::corpus::speech_like;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn speech(seed: u64) -> Vec<f64> {
        speech_like(8000, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn perfect_estimate_hits_the_ceiling() {
        let x = speech(1);
        assert!((fwsegsnr(&x, &x).unwrap() - FWSEG_MAX).abs() < 1e-9);
    }

    #[test]
    fn sign_flip_is_low() {
        let x = speech(2);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let v = fwsegsnr(&x, &neg).unwrap();
        assert!(v < 0.0 && v >= FWSEG_MIN, "{v}");
    }

    #[test]
    fn monotone_in_noise_power() {
        let x = speech(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::NEG_INFINITY;
        for a in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let y: Vec<f64> = x.iter().zip(&n).map(|(s, e)| s + a * e).collect();
            let v = fwsegsnr(&x, &y).unwrap();
            assert!(v >= prev && (FWSEG_MIN..=FWSEG_MAX).contains(&v), "{a}: {v} < {prev}");
            prev = v;
        }
        assert!(prev < FWSEG_MAX);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fwsegsnr(&[0.0; 800], &[0.0; 800]).is_err());
        assert!(fwsegsnr(&[0.1; 100], &[0.1; 100]).is_err());
        assert!(fwsegsnr(&[0.1; 800], &[0.1; 801]).is_err());
    }
}
