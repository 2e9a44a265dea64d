//! Finite-difference check of the full pipeline gradient.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{LossWeights, MaskReduction};
use crate::models::{AttentionSites, LayerSpec, Mode, Model, ModelConfig};
use crate::signal::{StftConfig, SAMPLE_RATE};

use super::pipeline::{Batch, Pipeline};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub samples: usize,
    pub batch: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Checks a seeded sample of this many scalars per parameter instead of all.
    pub max_per_group: Option<usize>,
}

impl GradcheckConfig {
    /// A two-layer U-Net over a 64/16 STFT, small enough to check every scalar.
    pub fn tiny(attention: AttentionSites) -> Self {
        let mut model = ModelConfig::unet_toy();
        model.encoder = vec![LayerSpec::new(4), LayerSpec::new(4)];
        model.stft = StftConfig { win_len: 64, hop: 16 };
        model.attention = attention;
        GradcheckConfig {
            model,
            weights: LossWeights::default(),
            samples: 256,
            batch: 2,
            seed: 7,
            step: 1e-6,
            tolerance: 1e-5,
            max_per_group: None,
        }
    }

    /// The toy U-Net with attention everywhere, sampling each parameter.
    pub fn toy(per_group: usize) -> Self {
        let mut model = ModelConfig::unet_toy();
        model.attention = AttentionSites::SkipAndDecoder;
        GradcheckConfig {
            model,
            samples: 1024,
            max_per_group: Some(per_group),
            ..Self::tiny(AttentionSites::SkipAndDecoder)
        }
    }
}

/// Agreement of one named parameter's gradient with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub scalars: usize,
    /// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` over the whole parameter.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Largest elementwise `|g − ĝ| / max(|g|, |ĝ|)` over scalars with a gradient of at least [`TINY_GRAD`].
    pub max_elem_rel: f64,
    pub grad_norm: f64,
}

/// Gradients below this magnitude are compared absolutely.
pub const TINY_GRAD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>8} {:>12} {:>12} {:>12} {:>12}  status", "parameter", "scalars", "rel err", "max abs err", "elem rel", "grad norm")?;
        for g in &self.groups {
            let ok = if g.rel_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<28} {:>8} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e}  {ok}",
                g.name, g.scalars, g.rel_error, g.max_abs_error, g.max_elem_rel, g.grad_norm
            )?;
        }
        Ok(())
    }
}

fn batch(cfg: &GradcheckConfig) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    for _ in 0..cfg.batch {
        let f0 = rng.gen_range(200.0..600.0) / SAMPLE_RATE as f64;
        let c: Vec<f64> = (0..cfg.samples)
            .map(|t| (1..=3).map(|h| 0.3 / h as f64 * (2.0 * PI * f0 * (h * t) as f64).sin()).sum())
            .collect();
        noisy.push(c.iter().map(|v| v + 0.1 * rng.gen_range(-1.0..1.0)).collect());
        clean.push(c);
    }
    Batch {
        noisy,
        clean,
        id: "gradcheck".into(),
    }
}

/// Compares training-mode gradients of the mixed loss against central
/// differences for every scalar of every parameter.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let model = Model::<f64>::build(cfg.model.clone(), cfg.seed)?;
    let mut pipe = Pipeline::new(model, cfg.weights, MaskReduction::Mean)?;
    let batch = batch(cfg);
    let (rec, grads) = pipe.gradients(&batch)?;
    pipe.model.params.zero_grad();
    pipe.model.params.accumulate(&rec.bound, &grads);
    drop(rec);
    let loss_at = |p: &Pipeline<f64>| -> Result<f64> { Ok(p.record(&batch, Mode::Train, false)?.stats().loss) };

    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9c);
    let names: Vec<String> = pipe.model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut groups = Vec::new();
    for name in names {
        let id = pipe.model.params.id_of(&name).expect("registered name");
        let planes = pipe.model.params.get(id).planes.len();
        let (mut diff2, mut a2, mut n2, mut max_abs, mut scalars) = (0.0, 0.0, 0.0, 0.0f64, 0);
        let mut max_elem_rel = 0.0f64;
        let sizes: Vec<usize> = (0..planes).map(|k| pipe.model.params.get(id).planes[k].value.len()).collect();
        let mut coords: Vec<(usize, usize)> = sizes.iter().enumerate().flat_map(|(k, &n)| (0..n).map(move |i| (k, i))).collect();
        if let Some(cap) = cfg.max_per_group.filter(|&c| c < coords.len()) {
            coords = rand::seq::index::sample(&mut pick, coords.len(), cap)
                .into_iter()
                .map(|j| coords[j])
                .collect();
        }
        for (k, i) in coords {
            let analytic = pipe.model.params.get(id).planes[k].grad.data()[i];
            let orig = pipe.model.params.get(id).planes[k].value.data()[i];
            pipe.model.params.get_mut(id).planes[k].value.data_mut()[i] = orig + cfg.step;
            let up = loss_at(&pipe)?;
            pipe.model.params.get_mut(id).planes[k].value.data_mut()[i] = orig - cfg.step;
            let down = loss_at(&pipe)?;
            pipe.model.params.get_mut(id).planes[k].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            max_abs = max_abs.max((analytic - numeric).abs());
            let mag = analytic.abs().max(numeric.abs());
            if mag >= TINY_GRAD {
                max_elem_rel = max_elem_rel.max((analytic - numeric).abs() / mag);
            }
            scalars += 1;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel_error = if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 };
        groups.push(GroupReport {
            name,
            scalars,
            rel_error,
            max_abs_error: max_abs,
            max_elem_rel,
            grad_norm: a2.sqrt(),
        });
    }
    Ok(GradcheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}
