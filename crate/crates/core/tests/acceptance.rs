//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccbam::app::checkpoint;
use ccbam::app::corpus::{noise, speech_like, NoiseKind};
use ccbam::app::gradcheck::{gradcheck, GradcheckConfig};
use ccbam::app::pipeline::Pipeline;
use ccbam::app::synth::{load_split, synthesize, write_demo_corpus, DemoCorpus, Manifest, Split, SNR_RANGE};
use ccbam::app::train::{overfit, train, TrainConfig};
use ccbam::ccbam::{channel_attention, spatial_attention, ChannelAttentionParams, SpatialAttentionParams};
use ccbam::ctensor::{
    complex_conv2d, complex_deconv2d, complex_dense, complex_lstm_cell, ComplexKernel, ComplexLstmWeights, ComplexTensor,
};
use ccbam::kernels::ConvSpec;
use ccbam::loss::{si_snr, LossWeights};
use ccbam::models::{AttentionSites, Model, ModelConfig};
use ccbam::signal::{apply_mask, crm_ground_truth, mix_at_snr, Stft, StftConfig, WaveSignal, CRM_EPS};
use ccbam::tensor::{Real, Shape};

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    println!("criterion {n} [{}] {title}: {detail}", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------------------
// Scalar complex oracle.

#[derive(Debug, Clone, Copy, PartialEq)]
struct C {
    re: f64,
    im: f64,
}

impl C {
    const ZERO: C = C { re: 0.0, im: 0.0 };
    fn add(self, o: C) -> C {
        C { re: self.re + o.re, im: self.im + o.im }
    }
    fn mul(self, o: C) -> C {
        C {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }
}

/// `(B, C, H, W)` grid of complex scalars.
#[derive(Debug, Clone)]
struct Grid {
    dims: [usize; 4],
    v: Vec<C>,
}

impl Grid {
    fn zeros(dims: [usize; 4]) -> Self {
        Grid {
            dims,
            v: vec![C::ZERO; dims.iter().product()],
        }
    }
    fn idx(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        let [_, n1, n2, n3] = self.dims;
        ((a * n1 + b) * n2 + c) * n3 + d
    }
    fn at(&self, a: usize, b: usize, c: usize, d: usize) -> C {
        self.v[self.idx(a, b, c, d)]
    }
    fn add_at(&mut self, a: usize, b: usize, c: usize, d: usize, x: C) {
        let i = self.idx(a, b, c, d);
        self.v[i] = self.v[i].add(x);
    }
    fn of<T: Real>(t: &ComplexTensor<T>) -> Self {
        let v = t
            .re()
            .data()
            .iter()
            .zip(t.im().data())
            .map(|(r, i)| C { re: r.as_f64(), im: i.as_f64() })
            .collect();
        Grid { dims: t.dims(), v }
    }
}

fn rel_err<T: Real>(got: &ComplexTensor<T>, want: &Grid) -> f64 {
    assert_eq!(got.dims(), want.dims, "shape");
    let g = Grid::of(got);
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in g.v.iter().zip(&want.v) {
        num += (a.re - b.re).powi(2) + (a.im - b.im).powi(2);
        den += b.re * b.re + b.im * b.im;
    }
    (num / den.max(1e-300)).sqrt()
}

fn oracle_conv(x: &Grid, w: &Grid, stride: (usize, usize), pad: (usize, usize)) -> Grid {
    let [nb, ci, h, wd] = x.dims;
    let [co, _, kh, kw] = w.dims;
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = Grid::zeros([nb, co, ho, wo]);
    for b in 0..nb {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = C::ZERO;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (xx * stride.1 + kx) as isize - pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc.add(x.at(b, c, iy as usize, ix as usize).mul(w.at(o, c, ky, kx)));
                            }
                        }
                    }
                    out.add_at(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

fn oracle_deconv(x: &Grid, w: &Grid, stride: (usize, usize), pad: (usize, usize), out_hw: (usize, usize)) -> Grid {
    let [nb, ci, h, wd] = x.dims;
    let [_, co, kh, kw] = w.dims;
    let mut out = Grid::zeros([nb, co, out_hw.0, out_hw.1]);
    for b in 0..nb {
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (iy * stride.0 + ky) as isize - pad.0 as isize;
                                let xx = (ix * stride.1 + kx) as isize - pad.1 as isize;
                                if y < 0 || xx < 0 || y >= out_hw.0 as isize || xx >= out_hw.1 as isize {
                                    continue;
                                }
                                out.add_at(b, o, y as usize, xx as usize, x.at(b, c, iy, ix).mul(w.at(c, o, ky, kx)));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `x` flattened per batch item times the `(rows, N)` matrix `w`.
fn oracle_dense(x: &Grid, w: &Grid) -> Grid {
    let nb = x.dims[0];
    let n = x.v.len() / nb;
    let rows = w.dims[0];
    let mut out = Grid::zeros([nb, rows, 1, 1]);
    for b in 0..nb {
        for r in 0..rows {
            let mut acc = C::ZERO;
            for k in 0..n {
                acc = acc.add(w.v[r * n + k].mul(x.v[b * n + k]));
            }
            out.v[b * rows + r] = acc;
        }
    }
    out
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn split(c: C, f: impl Fn(f64) -> f64) -> C {
    C { re: f(c.re), im: f(c.im) }
}

/// Gate pre-activations `W_x x + W_h h + b` in complex arithmetic; each of
/// the real and imaginary parts then drives its own LSTM cell.
fn oracle_lstm(x: &Grid, h: &Grid, c: &Grid, wx: &Grid, wh: &Grid, bias: &Grid) -> (Grid, Grid) {
    let px = oracle_dense(x, wx);
    let ph = oracle_dense(h, wh);
    let [nb, hid, _, _] = h.dims;
    let mut ho = Grid::zeros(h.dims);
    let mut co = Grid::zeros(c.dims);
    for b in 0..nb {
        for k in 0..hid {
            let z = |g: usize| px.at(b, g * hid + k, 0, 0).add(ph.at(b, g * hid + k, 0, 0)).add(bias.at(0, g * hid + k, 0, 0));
            let part = |c: C, re: bool| if re { c.re } else { c.im };
            let mut hv = [0.0; 2];
            let mut cv = [0.0; 2];
            for (p, re) in [(0, true), (1, false)] {
                let i = sig(part(z(0), re));
                let f = sig(part(z(1), re));
                let g = part(z(2), re).tanh();
                let o = sig(part(z(3), re));
                cv[p] = f * part(c.at(b, k, 0, 0), re) + i * g;
                hv[p] = o * cv[p].tanh();
            }
            ho.v[b * hid + k] = C { re: hv[0], im: hv[1] };
            co.v[b * hid + k] = C { re: cv[0], im: cv[1] };
        }
    }
    (ho, co)
}

fn oracle_channel_gate(u: &Grid, fc1: &Grid, fc2: &Grid) -> Grid {
    let [nb, ch, h, w] = u.dims;
    let mut avg = Grid::zeros([nb, ch, 1, 1]);
    let mut max = Grid::zeros([nb, ch, 1, 1]);
    for b in 0..nb {
        for c in 0..ch {
            let (mut s, mut m) = (C::ZERO, C { re: f64::NEG_INFINITY, im: f64::NEG_INFINITY });
            for y in 0..h {
                for x in 0..w {
                    let v = u.at(b, c, y, x);
                    s = s.add(v);
                    m = C { re: m.re.max(v.re), im: m.im.max(v.im) };
                }
            }
            let n = (h * w) as f64;
            avg.v[b * ch + c] = C { re: s.re / n, im: s.im / n };
            max.v[b * ch + c] = m;
        }
    }
    let branch = |p: &Grid| {
        let mut hid = oracle_dense(p, fc1);
        hid.v.iter_mut().for_each(|v| *v = split(*v, |a| a.max(0.0)));
        let mut o = oracle_dense(&hid, fc2);
        o.v.iter_mut().for_each(|v| *v = split(*v, sig));
        o
    };
    let (a, m) = (branch(&avg), branch(&max));
    Grid {
        dims: [nb, ch, 1, 1],
        v: a.v.iter().zip(&m.v).map(|(x, y)| x.add(*y)).collect(),
    }
}

fn oracle_spatial_gate(u: &Grid, kernel: &Grid, pad: usize) -> Grid {
    let [nb, ch, h, w] = u.dims;
    let mut pooled = Grid::zeros([nb, 2, h, w]);
    for b in 0..nb {
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut m) = (C::ZERO, C { re: f64::NEG_INFINITY, im: f64::NEG_INFINITY });
                for c in 0..ch {
                    let v = u.at(b, c, y, x);
                    s = s.add(v);
                    m = C { re: m.re.max(v.re), im: m.im.max(v.im) };
                }
                let i0 = pooled.idx(b, 0, y, x);
                pooled.v[i0] = C { re: s.re / ch as f64, im: s.im / ch as f64 };
                let i1 = pooled.idx(b, 1, y, x);
                pooled.v[i1] = m;
            }
        }
    }
    let mut g = oracle_conv(&pooled, kernel, (1, 1), (pad, pad));
    g.v.iter_mut().for_each(|v| *v = split(*v, sig));
    g
}

fn rand_c<T: Real>(dims: [usize; 4], rng: &mut ChaCha8Rng) -> ComplexTensor<T> {
    ComplexTensor::uniform(Shape(dims), 1.0, rng)
}

/// Worst relative error of every operator over `instances` random problems.
fn oracle_suite<T: Real>(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![("conv2d", 0.0f64), ("deconv2d", 0.0), ("dense", 0.0), ("lstm_cell", 0.0), ("channel_attention", 0.0), ("spatial_attention", 0.0)];
    for _ in 0..instances {
        let nb = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=3);
        let kh = rng.gen_range(1..=3);
        let kw = rng.gen_range(1..=3);
        let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let pad = (rng.gen_range(0..kh), rng.gen_range(0..kw));
        let h = rng.gen_range(kh..=6);
        let w = rng.gen_range(kw..=6);

        let x = rand_c::<T>([nb, ci, h, w], &mut rng);
        let wt = rand_c::<T>([co, ci, kh, kw], &mut rng);
        let k = ComplexKernel::new(wt.clone(), ConvSpec::new(stride, pad)).unwrap();
        let got = complex_conv2d(&x, &k).unwrap();
        let e = rel_err(&got, &oracle_conv(&Grid::of(&x), &Grid::of(&wt), stride, pad));
        worst[0].1 = worst[0].1.max(e);

        let wd = rand_c::<T>([ci, co, kh, kw], &mut rng);
        let kd = ComplexKernel::new(wd.clone(), ConvSpec::new(stride, pad)).unwrap();
        let bh = (h - 1) * stride.0 + kh;
        let bw = (w - 1) * stride.1 + kw;
        if bh > 2 * pad.0 && bw > 2 * pad.1 {
            let extra = (rng.gen_range(0..stride.0), rng.gen_range(0..stride.1));
            let out_hw = (bh - 2 * pad.0 + extra.0, bw - 2 * pad.1 + extra.1);
            let got = complex_deconv2d(&x, &kd, Some(out_hw)).unwrap();
            let e = rel_err(&got, &oracle_deconv(&Grid::of(&x), &Grid::of(&wd), stride, pad, out_hw));
            worst[1].1 = worst[1].1.max(e);
        }

        let n = ci * h * w;
        let rows = rng.gen_range(1..=5);
        let wm = rand_c::<T>([rows, n, 1, 1], &mut rng);
        let got = complex_dense(&x, &wm).unwrap();
        worst[2].1 = worst[2].1.max(rel_err(&got, &oracle_dense(&Grid::of(&x), &Grid::of(&wm))));

        let hid = rng.gen_range(1..=4);
        let lw = ComplexLstmWeights {
            w_input: rand_c::<T>([4 * hid, n, 1, 1], &mut rng),
            w_hidden: rand_c::<T>([4 * hid, hid, 1, 1], &mut rng),
            bias: rand_c::<T>([1, 4 * hid, 1, 1], &mut rng),
        };
        let hp = rand_c::<T>([nb, hid, 1, 1], &mut rng);
        let cp = rand_c::<T>([nb, hid, 1, 1], &mut rng);
        let (hg, cg) = complex_lstm_cell(&x, &hp, &cp, &lw).unwrap();
        let (ho, cor) = oracle_lstm(
            &Grid::of(&x),
            &Grid::of(&hp),
            &Grid::of(&cp),
            &Grid::of(&lw.w_input),
            &Grid::of(&lw.w_hidden),
            &Grid::of(&lw.bias),
        );
        worst[3].1 = worst[3].1.max(rel_err(&hg, &ho)).max(rel_err(&cg, &cor));

        let ch = 4 * rng.gen_range(1..=2);
        let u = rand_c::<T>([nb, ch, rng.gen_range(1..=6), rng.gen_range(1..=6)], &mut rng);
        let cpar = ChannelAttentionParams::<T>::glorot(ch, 4, &mut rng).unwrap();
        let got = channel_attention(&u, &cpar).unwrap().gate;
        let want = oracle_channel_gate(&Grid::of(&u), &Grid::of(&cpar.fc1), &Grid::of(&cpar.fc2));
        worst[4].1 = worst[4].1.max(rel_err(&got, &want));

        let spar = SpatialAttentionParams::<T>::glorot(&mut rng);
        let got = spatial_attention(&u, &spar).unwrap().gate;
        let want = oracle_spatial_gate(&Grid::of(&u), &Grid::of(&spar.kernel), spar.padding);
        worst[5].1 = worst[5].1.max(rel_err(&got, &want));
    }
    worst
}

#[test]
fn c1_complex_arithmetic_oracles() {
    let t0 = Instant::now();
    let w32 = oracle_suite::<f32>(120, 11);
    let w64 = oracle_suite::<f64>(120, 12);
    let secs = t0.elapsed().as_secs_f64();
    let pass = w32.iter().all(|(_, e)| *e <= 1e-5) && w64.iter().all(|(_, e)| *e <= 1e-12) && secs < 60.0;
    let detail: Vec<String> = w32
        .iter()
        .zip(&w64)
        .map(|((n, a), (_, b))| format!("{n} f32 {a:.1e} f64 {b:.1e}"))
        .collect();
    report(1, "complex-arithmetic oracle suite (120 instances per op)", pass, &format!("{}; {secs:.1}s", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------------------

#[test]
fn c2_gradient_check() {
    let t0 = Instant::now();
    let with = gradcheck(&GradcheckConfig::tiny(AttentionSites::SkipAndDecoder)).unwrap();
    let without = gradcheck(&GradcheckConfig::tiny(AttentionSites::None)).unwrap();
    let toy = gradcheck(&GradcheckConfig::toy(4)).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = |r: &ccbam::app::gradcheck::GradcheckReport| r.worst().map_or(0.0, |g| g.rel_error);
    let pass = with.passed() && without.passed() && toy.passed() && secs < 300.0;
    for r in [&with, &without, &toy] {
        for g in r.groups.iter().filter(|g| g.rel_error > r.tolerance) {
            println!("  over tolerance: {} rel {:.2e}", g.name, g.rel_error);
        }
    }
    let detail = format!(
        "tiny+CCBAM {} groups worst {:.1e}; tiny {} groups worst {:.1e}; toy-unet+CCBAM {} groups worst {:.1e}; {secs:.0}s",
        with.groups.len(),
        worst(&with),
        without.groups.len(),
        worst(&without),
        toy.groups.len(),
        worst(&toy)
    );
    report(2, "pipeline gradient vs central differences (rel <= 1e-5)", pass, &detail);
    assert!(pass);
}

// ---------------------------------------------------------------------------

fn random_signal(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn c3_stft_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = Vec::new();
    for cfg in [StftConfig::UNET, StftConfig::CRN] {
        let stft = Stft::<f64>::new(cfg).unwrap();
        let mut w = 0.0f64;
        for len in [16000, 12345, 4096] {
            let x = random_signal(len, &mut rng);
            let spec = stft.forward(&[&x]).unwrap();
            let y = stft.inverse(&spec, len).unwrap();
            let num: f64 = x.iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = x.iter().map(|a| a * a).sum();
            w = w.max((num / den).sqrt());
        }
        worst.push((cfg, w));
    }
    let pass = worst.iter().all(|(_, e)| *e <= 1e-6);
    let detail: Vec<String> = worst.iter().map(|(c, e)| format!("{}/{}: {e:.2e}", c.win_len, c.hop)).collect();
    report(3, "STFT/ISTFT round trip (rel L2 <= 1e-6)", pass, &detail.join(", "));
    assert!(pass);
}

#[test]
fn c4_crm_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_db = f64::INFINITY;
    for i in 0..20 {
        let cfg = if i % 2 == 0 { StftConfig::UNET } else { StftConfig::CRN };
        let stft = Stft::<f64>::new(cfg).unwrap();
        let len = rng.gen_range(8000..16000);
        let clean = WaveSignal::new(speech_like(len, &mut rng)).unwrap();
        let kind = NoiseKind::ALL[i % 3];
        let n = WaveSignal::new(noise(kind, len, &mut rng)).unwrap();
        let mix = mix_at_snr(&clean, &n, rng.gen_range(-5.0..20.0)).unwrap();
        let x = stft.stft(&mix.noisy).unwrap();
        let y = stft.stft(&mix.clean).unwrap();
        let m = crm_ground_truth(&x, &y, CRM_EPS).unwrap();
        let est = stft.istft(&apply_mask(&x, &m).unwrap(), len).unwrap();
        min_db = min_db.min(si_snr(&mix.clean.samples, &est.samples).unwrap());
    }
    let pass = min_db >= 40.0;
    report(4, "oracle CRM reconstruction through ISTFT (>= 40 dB)", pass, &format!("min SI-SNR over 20 mixtures {min_db:.1} dB"));
    assert!(pass);
}

#[test]
fn c5_si_snr_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let y = random_signal(1000, &mut rng);
        let yh: Vec<f64> = y.iter().map(|v| v + 0.3 * rng.gen_range(-1.0..1.0)).collect();
        let base = si_snr(&y, &yh).unwrap();
        for a in [0.1, 1.0, 10.0] {
            let s: Vec<f64> = yh.iter().map(|v| a * v).collect();
            worst = worst.max((si_snr(&y, &s).unwrap() - base).abs());
        }
    }
    let hand = si_snr(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    let pass = worst <= 1e-6 && hand == 0.0;
    report(5, "SI-SNR scale invariance", pass, &format!("max deviation {worst:.1e} dB; y=[1,0], y^=[1,1] -> {hand} dB"));
    assert!(pass);
}

#[test]
fn c6_gate_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut ch_lo, mut ch_hi, mut sp_lo, mut sp_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let c = 4 * rng.gen_range(1..=3);
        let dims = [rng.gen_range(1..=2), c, rng.gen_range(1..=8), rng.gen_range(1..=8)];
        let scale = rng.gen_range(0.1..3.0);
        let u = ComplexTensor::<f64>::uniform(Shape(dims), scale, &mut rng);
        let cp = ChannelAttentionParams::glorot(c, 4, &mut rng).unwrap();
        let sp = SpatialAttentionParams::glorot(&mut rng);
        let g = channel_attention(&u, &cp).unwrap().gate;
        for &v in g.re().data().iter().chain(g.im().data()) {
            ch_lo = ch_lo.min(v);
            ch_hi = ch_hi.max(v);
        }
        let s = spatial_attention(&u, &sp).unwrap().gate;
        for &v in s.re().data().iter().chain(s.im().data()) {
            sp_lo = sp_lo.min(v);
            sp_hi = sp_hi.max(v);
        }
    }
    let u = ComplexTensor::<f64>::uniform(Shape([2, 8, 5, 6]), 1.0, &mut rng);
    let zc = channel_attention(&u, &ChannelAttentionParams::zeros(8, 4).unwrap()).unwrap().gate;
    let zs = spatial_attention(&u, &SpatialAttentionParams::zeros()).unwrap().gate;
    let id_c = zc.re().data().iter().chain(zc.im().data()).all(|&v| v == 1.0);
    let id_s = zs.re().data().iter().chain(zs.im().data()).all(|&v| v == 0.5);
    let pass = ch_lo > 0.0 && ch_hi < 2.0 && sp_lo > 0.0 && sp_hi < 1.0 && id_c && id_s;
    report(
        6,
        "attention gate bounds over 1000 inputs",
        pass,
        &format!("channel gate in [{ch_lo:.4}, {ch_hi:.4}], spatial in [{sp_lo:.4}, {sp_hi:.4}]; zero weights -> 1+1j: {id_c}, 0.5+0.5j: {id_s}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

#[test]
fn c7_overfit_smoke() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clean = WaveSignal::new(speech_like(16000, &mut rng)).unwrap();
    let n = WaveSignal::new(noise(NoiseKind::White, 16000, &mut rng)).unwrap();
    let mix = mix_at_snr(&clean, &n, 0.0).unwrap();
    let cfg = ModelConfig::crn_toy();
    let mut pipe = Pipeline::<f32>::build(cfg, 7, LossWeights::new(0.5, 0.5).unwrap()).unwrap();
    let params = pipe.model.params.num_scalars();
    let r = overfit(&mut pipe, &mix.noisy.samples, &mix.clean.samples, 500, 1e-3).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = r.improvement() >= 10.0 && params < 100_000 && secs < 600.0;
    report(
        7,
        "overfit one 1-s 0 dB mixture in 500 Adam steps (>= +10 dB)",
        pass,
        &format!(
            "crn-toy {params} params; noisy {:.2} dB -> {:.2} dB ({:+.2} dB); {secs:.0}s",
            r.noisy_si_snr,
            r.final_si_snr,
            r.improvement()
        ),
    );
    assert!(pass);
}

fn tiny_corpus(dir: &Path) -> std::path::PathBuf {
    let sizes = DemoCorpus {
        train: 8,
        valid: 4,
        test: 0,
        seconds: 1.0,
    };
    let manifest = write_demo_corpus(&dir.join("sources"), sizes, 2024).unwrap();
    let data = dir.join("data");
    synthesize(&Manifest::load(&manifest, 2024, SNR_RANGE).unwrap(), &data).unwrap();
    data
}

#[test]
fn c8_ablation_direction() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_corpus(dir.path());
    let valid = load_split(&data, Split::Valid).unwrap();
    let noisy_db = valid.iter().map(|u| si_snr(&u.clean, &u.noisy).unwrap()).sum::<f64>() / valid.len() as f64;
    println!("  noisy validation input {noisy_db:.3} dB");
    let variants = [
        ("baseline", "lambda_sisnr = 1\nlambda_mask = 0\nattention = none\n"),
        ("mixed-loss", "lambda_sisnr = 0.5\nlambda_mask = 0.5\nattention = none\n"),
        ("mixed-loss+CCBAM", "lambda_sisnr = 0.5\nlambda_mask = 0.5\nattention = skip_and_decoder\n"),
    ];
    let mut agree = 0;
    for seed in [1u64, 2, 3] {
        let mut finals = Vec::new();
        for (name, extra) in variants {
            let text = format!("arch = crn\nepochs = 40\nbatch = 1\n{extra}");
            let cfg = TrainConfig::from_text(&text, &[("seed".into(), seed.to_string())]).unwrap();
            let out = dir.path().join(format!("{name}-{seed}"));
            let r = train::<f32>(&cfg, &data, &out).unwrap();
            finals.push(r.valid.last().unwrap().si_snr);
        }
        let ordered = finals[0] <= finals[1] && finals[1] <= finals[2];
        agree += ordered as usize;
        println!(
            "  seed {seed}: baseline {:.3} dB, mixed-loss {:.3} dB, mixed-loss+CCBAM {:.3} dB -> {}",
            finals[0],
            finals[1],
            finals[2],
            if ordered { "ordered" } else { "not ordered" }
        );
    }
    let pass = agree >= 2;
    report(
        8,
        "ablation ordering baseline <= mixed-loss <= mixed-loss+CCBAM",
        pass,
        &format!("{agree}/3 seeds ordered; {:.0}s", t0.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

#[test]
fn c9_attention_overhead_reported_by_info() {
    let mut lines = Vec::new();
    let mut pass = true;
    for arch in ["unet", "crn"] {
        let out = Command::new(env!("CARGO_BIN_EXE_ccbam"))
            .args(["info", "--arch", arch, "--attention", "skip_and_decoder"])
            .output()
            .unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let pct: f64 = text
            .lines()
            .find_map(|l| l.strip_prefix("CCBAM overhead:"))
            .and_then(|v| v.trim().trim_end_matches('%').parse().ok())
            .expect("overhead line");
        let cfg = ModelConfig {
            attention: AttentionSites::SkipAndDecoder,
            ..if arch == "unet" { ModelConfig::unet_toy() } else { ModelConfig::crn_toy() }
        };
        let s = Model::<f32>::build(cfg, 0).unwrap().summary();
        pass &= pct < 10.0 && s.overhead_percent() < 10.0 && s.total < 100_000;
        lines.push(format!("{arch}-toy {} params, CCBAM {} ({pct:.2}%)", s.total, s.attention));
    }
    report(9, "CCBAM parameter overhead < 10% on the toy configs", pass, &lines.join("; "));
    assert!(pass);
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ccbam"))
        .args(args)
        .env("CCBAM_NUM_THREADS", "0")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).display().to_string();
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "arch = crn\nepochs = 2\nbatch = 2\ncrop = 8000\nattention = skip_and_decoder\n").unwrap();
    for run in ["a", "b"] {
        run_cli(&["synth", "--demo", "4", "--out", &d(&format!("data-{run}")), "--seed", "5"]);
        run_cli(&[
            "train",
            "--data",
            &d(&format!("data-{run}")),
            "--out",
            &d(&format!("run-{run}")),
            "--config",
            &cfg.display().to_string(),
            "--seed",
            "5",
        ]);
    }
    let data_same = tree_bytes(&dir.path().join("data-a")) == tree_bytes(&dir.path().join("data-b"));
    let runs_same = tree_bytes(&dir.path().join("run-a")) == tree_bytes(&dir.path().join("run-b"));
    let ckpt = fs::read(dir.path().join("run-a/last.ckpt")).unwrap();
    let (model, state) = checkpoint::decode::<f32>(&ckpt).unwrap();
    let resaved = checkpoint::encode(&model, state);
    let round_trip = resaved == ckpt;
    let path = dir.path().join("resaved.ckpt");
    checkpoint::save(&path, &model, state).unwrap();
    let round_trip_file = fs::read(&path).unwrap() == ckpt;
    let metrics = fs::read_to_string(dir.path().join("run-a/metrics.csv")).unwrap();
    let pass = data_same && runs_same && round_trip && round_trip_file && metrics.lines().count() > 2;
    report(
        10,
        "bitwise reproducibility and checkpoint round trip",
        pass,
        &format!(
            "datasets identical: {data_same}; metric logs + checkpoints identical: {runs_same}; save/load/save identical: {}",
            round_trip && round_trip_file
        ),
    );
    assert!(pass);
}
