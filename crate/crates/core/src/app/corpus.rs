//! Synthetic speech-like and noise sources for self-contained demos and tests.

use std::f64::consts::PI;

use rand::Rng;

use crate::signal::SAMPLE_RATE;

/// Voiced syllables: a gliding harmonic source shaped by three formants and a
/// smooth envelope, separated by short pauses.
pub fn speech_like<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let mut pos = rng.gen_range(0..800);
    let base_f0 = rng.gen_range(100.0..220.0);
    while pos < len {
        let dur = rng.gen_range(1600..4800).min(len - pos);
        let f0_start = base_f0 * rng.gen_range(0.85..1.2);
        let f0_end = base_f0 * rng.gen_range(0.85..1.2);
        let formants = [
            (rng.gen_range(300.0..900.0), 90.0),
            (rng.gen_range(900.0..2300.0), 120.0),
            (rng.gen_range(2300.0..3400.0), 180.0),
        ];
        let gain = rng.gen_range(0.4..1.0);
        let mut phase = 0.0;
        for i in 0..dur {
            let u = i as f64 / dur as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase += 2.0 * PI * f0 / fs;
            let env = (PI * u).sin().powi(2);
            let mut v = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < 0.45 * fs && h <= 40 {
                let fh = h as f64 * f0;
                let amp: f64 = formants
                    .iter()
                    .map(|&(fc, bw)| (-((fh - fc) / bw).powi(2) / 2.0).exp())
                    .sum::<f64>()
                    + 0.02;
                v += amp * (h as f64 * phase).sin() / (h as f64).sqrt();
                h += 1;
            }
            out[pos + i] += 0.12 * gain * env * v;
        }
        pos += dur + rng.gen_range(400..2400);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Hum];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Hum => "hum",
        }
    }
}

pub fn noise<R: Rng + ?Sized>(kind: NoiseKind, len: usize, rng: &mut R) -> Vec<f64> {
    let mut white = || rng.gen_range(-1.0..1.0);
    match kind {
        NoiseKind::White => (0..len).map(|_| 0.3 * white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = white();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    0.1 * (b0 + b1 + b2 + w * 0.1848)
                })
                .collect()
        }
        NoiseKind::Hum => {
            let fs = SAMPLE_RATE as f64;
            let base = if white() > 0.0 { 50.0 } else { 60.0 };
            (0..len)
                .map(|i| {
                    let t = i as f64 / fs;
                    let tone: f64 = (1..=6).map(|h| (2.0 * PI * base * h as f64 * t).sin() / h as f64).sum();
                    0.2 * tone + 0.03 * white()
                })
                .collect()
        }
    }
}
