//! Training configuration and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{lr_schedule, AdamConfig};
use crate::error::{Error, Result};
use crate::loss::{si_snr, LossWeights, MaskReduction};
use crate::models::{Arch, Model, ModelConfig};
use crate::signal::SAMPLE_RATE;
use crate::tensor::{DType, Real};

use super::checkpoint::{self, TrainState};
use super::config::parse_kv;
use super::evaluate::par_map;
use super::metrics::fwsegsnr;
use super::pipeline::{Batch, Pipeline};
use super::synth::{load_split, Split, Utterance};

pub const METRICS_HEADER: &str = "step,split,loss,si_snr_db,fwsegsnr_db,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Training crop length in samples; shorter utterances are zero-padded.
    pub crop: usize,
    pub weights: LossWeights,
    pub reduction: MaskReduction,
    pub precision: DType,
    /// Repeats the first training utterance instead of iterating the split.
    pub overfit: bool,
    pub overfit_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::unet_toy(),
            seed: 0,
            lr: 1e-3,
            epochs: 50,
            batch: 4,
            crop: SAMPLE_RATE as usize,
            weights: LossWeights::default(),
            reduction: MaskReduction::Mean,
            precision: DType::F32,
            overfit: false,
            overfit_steps: 500,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Builds a configuration from `key = value` pairs. `arch` selects the
    /// model preset before any other key is applied.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "arch") {
            cfg.model = ModelConfig::preset(Arch::parse(v)?);
        }
        let (mut ls, mut lm) = (cfg.weights.sisnr, cfg.weights.mask);
        for (k, v) in pairs {
            match k.as_str() {
                "arch" => {}
                "seed" => cfg.seed = parse(k, v)?,
                "lr" => cfg.lr = parse(k, v)?,
                "epochs" => cfg.epochs = parse(k, v)?,
                "batch" => cfg.batch = parse(k, v)?,
                "crop" => cfg.crop = parse(k, v)?,
                "lambda_sisnr" => ls = parse(k, v)?,
                "lambda_mask" => lm = parse(k, v)?,
                "mask_reduction" => {
                    cfg.reduction = match v.as_str() {
                        "mean" => MaskReduction::Mean,
                        "sum" => MaskReduction::Sum,
                        _ => return Err(Error::Config(format!("mask_reduction must be mean or sum, got {v:?}"))),
                    }
                }
                "precision" => {
                    cfg.precision = match v.as_str() {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        _ => return Err(Error::Config(format!("precision must be f32 or f64, got {v:?}"))),
                    }
                }
                "overfit" => cfg.overfit = parse(k, v)?,
                "overfit_steps" => cfg.overfit_steps = parse(k, v)?,
                _ => {
                    if !cfg.model.set(k, v)? {
                        return Err(Error::Config(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        cfg.weights = LossWeights::new(ls, lm)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file and then applies `overrides` (which win over the file).
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_kv(text)?;
        for (k, v) in overrides {
            match pairs.iter_mut().find(|(e, _)| e == k) {
                Some(slot) => slot.1 = v.clone(),
                None => pairs.push((k.clone(), v.clone())),
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 || self.crop == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch, crop and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Cuts `x` to `len` samples starting at `offset`, zero-padding past its end.
pub fn crop(x: &[f64], offset: usize, len: usize) -> Vec<f64> {
    (offset..offset + len).map(|i| x.get(i).copied().unwrap_or(0.0)).collect()
}

/// Mean validation results of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidStats {
    pub loss: f64,
    pub si_snr: f64,
    pub fwseg: f64,
}

/// Loss, SI-SNR and FwSegSNR averaged over utterances, each enhanced whole.
pub fn validate<T: Real>(pipe: &Pipeline<T>, utts: &[Utterance]) -> Result<ValidStats> {
    if utts.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let per = par_map(utts, |u| -> Result<(f64, f64, f64)> {
        let batch = Batch {
            noisy: vec![u.noisy.clone()],
            clean: vec![u.clean.clone()],
            id: u.id.clone(),
        };
        let (stats, est) = pipe.evaluate(&batch)?;
        Ok((stats.loss, stats.si_snr, fwsegsnr(&u.clean, &est[0])?))
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    Ok(ValidStats {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        si_snr: per.iter().map(|p| p.1).sum::<f64>() / n,
        fwseg: per.iter().map(|p| p.2).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub valid: Vec<ValidStats>,
    pub best_valid_loss: f64,
    pub final_lr: f64,
    pub metrics: PathBuf,
}

struct MetricsLog {
    path: PathBuf,
    text: String,
}

impl MetricsLog {
    fn new(path: PathBuf) -> Self {
        MetricsLog {
            path,
            text: format!("{METRICS_HEADER}\n"),
        }
    }

    fn row(&mut self, step: u64, split: &str, loss: f64, si: f64, fwseg: Option<f64>, lr: f64) -> Result<()> {
        let fw = fwseg.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(self.text, "{step},{split},{loss},{si},{fw},{lr}");
        fs::write(&self.path, &self.text)?;
        Ok(())
    }
}

fn dump_failure(out_dir: &Path, err: &Error, batch: &Batch) -> Result<()> {
    if let Error::NonFiniteLoss { step, batch: id } = err {
        let mut s = format!("non-finite loss at step {step}\nbatch {id}\n");
        for (i, x) in batch.noisy.iter().enumerate() {
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let _ = writeln!(s, "item {i}: {} samples, peak {peak}", x.len());
        }
        fs::write(out_dir.join("nonfinite_batch.txt"), s)?;
    }
    Ok(())
}

/// Trains on `{data_dir}/train`, validating on `{data_dir}/valid` after every
/// epoch; writes `metrics.csv`, `best.ckpt` and `last.ckpt` into `out_dir`.
pub fn train<T: Real>(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let train_set = load_split(data_dir, Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::Input(format!("{}: training split is empty", data_dir.display())));
    }
    if cfg.overfit {
        return overfit_run::<T>(cfg, &train_set[0], out_dir);
    }
    let valid_set = load_split(data_dir, Split::Valid)?;
    let model = Model::<T>::build(cfg.model.clone(), cfg.seed)?;
    let mut pipe = Pipeline::new(model, cfg.weights, cfg.reduction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut log = MetricsLog::new(out_dir.join("metrics.csv"));
    let mut state = TrainState {
        epoch: 0,
        lr: cfg.lr,
        best_valid: f64::INFINITY,
    };
    let mut history = Vec::new();
    let mut valid = Vec::new();
    let adam = AdamConfig::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Batch {
                noisy: Vec::new(),
                clean: Vec::new(),
                id: format!("epoch {epoch}: utterances"),
            };
            for &i in chunk {
                let u = &train_set[i];
                let span = u.noisy.len().saturating_sub(cfg.crop);
                let offset = rng.gen_range(0..=span);
                batch.noisy.push(crop(&u.noisy, offset, cfg.crop));
                batch.clean.push(crop(&u.clean, offset, cfg.crop));
                let _ = write!(batch.id, " {}@{offset}", u.id);
            }
            let stats = match pipe.train_step(&batch, state.lr, adam) {
                Ok(s) => s,
                Err(e) => {
                    dump_failure(out_dir, &e, &batch)?;
                    return Err(e);
                }
            };
            log.row(pipe.model.params.step, "train", stats.loss, stats.si_snr, None, state.lr)?;
        }
        let v = validate(&pipe, &valid_set)?;
        log.row(pipe.model.params.step, "valid", v.loss, v.si_snr, Some(v.fwseg), state.lr)?;
        valid.push(v);
        history.push(v.loss);
        state.epoch = epoch as u64 + 1;
        state.lr = lr_schedule(state.lr, &history);
        if v.loss < state.best_valid {
            state.best_valid = v.loss;
            checkpoint::save(&out_dir.join("best.ckpt"), &pipe.model, state)?;
        }
        checkpoint::save(&out_dir.join("last.ckpt"), &pipe.model, state)?;
    }
    Ok(TrainReport {
        steps: pipe.model.params.step,
        valid,
        best_valid_loss: state.best_valid,
        final_lr: state.lr,
        metrics: log.path,
    })
}

/// SI-SNR of the noisy input and of the final estimate on the overfit utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverfitReport {
    pub steps: usize,
    pub noisy_si_snr: f64,
    pub final_si_snr: f64,
}

impl OverfitReport {
    pub fn improvement(&self) -> f64 {
        self.final_si_snr - self.noisy_si_snr
    }
}

/// Repeats one optimiser step on a single batch-of-one at a fixed learning rate.
pub fn overfit<T: Real>(pipe: &mut Pipeline<T>, noisy: &[f64], clean: &[f64], steps: usize, lr: f64) -> Result<OverfitReport> {
    let batch = Batch {
        noisy: vec![noisy.to_vec()],
        clean: vec![clean.to_vec()],
        id: "overfit".into(),
    };
    for _ in 0..steps {
        pipe.train_step(&batch, lr, AdamConfig::default())?;
    }
    let (_, est) = pipe.evaluate(&batch)?;
    Ok(OverfitReport {
        steps,
        noisy_si_snr: si_snr(clean, noisy)?,
        final_si_snr: si_snr(clean, &est[0])?,
    })
}

fn overfit_run<T: Real>(cfg: &TrainConfig, utt: &Utterance, out_dir: &Path) -> Result<TrainReport> {
    let model = Model::<T>::build(cfg.model.clone(), cfg.seed)?;
    let mut pipe = Pipeline::new(model, cfg.weights, cfg.reduction)?;
    let noisy = crop(&utt.noisy, 0, cfg.crop);
    let clean = crop(&utt.clean, 0, cfg.crop);
    let batch = Batch {
        noisy: vec![noisy.clone()],
        clean: vec![clean.clone()],
        id: format!("overfit {}", utt.id),
    };
    let mut log = MetricsLog::new(out_dir.join("metrics.csv"));
    for _ in 0..cfg.overfit_steps {
        let stats = match pipe.train_step(&batch, cfg.lr, AdamConfig::default()) {
            Ok(s) => s,
            Err(e) => {
                dump_failure(out_dir, &e, &batch)?;
                return Err(e);
            }
        };
        log.row(pipe.model.params.step, "train", stats.loss, stats.si_snr, None, cfg.lr)?;
    }
    let (stats, est) = pipe.evaluate(&batch)?;
    let fw = fwsegsnr(&clean, &est[0])?;
    log.row(pipe.model.params.step, "valid", stats.loss, stats.si_snr, Some(fw), cfg.lr)?;
    let state = TrainState {
        epoch: 1,
        lr: cfg.lr,
        best_valid: stats.loss,
    };
    checkpoint::save(&out_dir.join("last.ckpt"), &pipe.model, state)?;
    checkpoint::save(&out_dir.join("best.ckpt"), &pipe.model, state)?;
    Ok(TrainReport {
        steps: pipe.model.params.step,
        valid: vec![ValidStats {
            loss: stats.loss,
            si_snr: stats.si_snr,
            fwseg: fw,
        }],
        best_valid_loss: stats.loss,
        final_lr: cfg.lr,
        metrics: log.path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::AttentionSites;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn config_keys_and_overrides() {
        let text = "arch = crn\nepochs = 3 # short\nattention = none\nlambda_mask = 0.25\n";
        let cfg = TrainConfig::from_text(text, &kv(&[("attention", "skip_only"), ("seed", "9")])).unwrap();
        assert_eq!(cfg.model.arch, Arch::Crn);
        assert_eq!(cfg.model.lstm_hidden, ModelConfig::crn_toy().lstm_hidden);
        assert_eq!(cfg.model.attention, AttentionSites::SkipOnly);
        assert_eq!((cfg.epochs, cfg.seed, cfg.weights.mask), (3, 9, 0.25));
        assert!(TrainConfig::from_text("epoch = 3\n", &[]).is_err());
        assert!(TrainConfig::from_text("precision = f16\n", &[]).is_err());
        assert!(TrainConfig::from_text("lambda_sisnr = 0\nlambda_mask = 0\n", &[]).is_err());
    }

    #[test]
    fn crop_pads_short_signals() {
        assert_eq!(crop(&[1.0, 2.0, 3.0], 1, 4), vec![2.0, 3.0, 0.0, 0.0]);
    }
}
