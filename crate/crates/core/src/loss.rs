//! SI-SNR, complex-mask MSE and the weighted mixed objective.

use std::f64::consts::LN_10;

use crate::autograd::{CVar, Graph, Var};
use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Floor on both SI-SNR energies.
pub const SISNR_FLOOR: f64 = 1e-8;

/// Margin keeping clamped mask targets inside the open tanh range.
pub const TARGET_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sisnr: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sisnr: 0.5, mask: 0.5 }
    }
}

impl LossWeights {
    pub fn new(sisnr: f64, mask: f64) -> Result<Self> {
        if !(sisnr >= 0.0 && mask >= 0.0) || sisnr + mask == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero, got ({sisnr}, {mask})"
            )));
        }
        Ok(LossWeights { sisnr, mask })
    }
}

/// Normalisation of the mask loss over time-frequency bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskReduction {
    #[default]
    Mean,
    Sum,
}

/// Scale-invariant SNR of `estimate` against `reference`, in dB.
pub fn si_snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::dim(
            "si_snr",
            format!("reference has {} samples, estimate {}", reference.len(), estimate.len()),
        ));
    }
    let yy: f64 = reference.iter().map(|v| v * v).sum();
    if yy <= 0.0 {
        return Err(Error::Input("si_snr reference is silent".into()));
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let alpha = dot / yy;
    let (mut nt, mut ne) = (0.0, 0.0);
    for (&y, &yh) in reference.iter().zip(estimate) {
        let t = alpha * y;
        nt += t * t;
        ne += (yh - t) * (yh - t);
    }
    Ok(10.0 * (nt.max(SISNR_FLOOR) / ne.max(SISNR_FLOOR)).log10())
}

/// Clamps a ground-truth mask into the range a tanh head can reach.
pub fn clamp_target<T: Real>(m: &ComplexTensor<T>) -> ComplexTensor<T> {
    let hi = T::lit(1.0 - TARGET_MARGIN);
    m.map_planes(|v| v.max(-hi).min(hi))
}

/// Squared error summed over both planes per bin, averaged over bins (or summed).
pub fn mask_loss<T: Real>(target: &ComplexTensor<T>, estimate: &ComplexTensor<T>, reduction: MaskReduction) -> Result<f64> {
    if target.shape() != estimate.shape() {
        return Err(Error::dim("mask_loss", format!("{} vs {}", target.shape(), estimate.shape())));
    }
    let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>();
    let total = sq(target.re().data(), estimate.re().data()) + sq(target.im().data(), estimate.im().data());
    let [b, _, _, _] = target.dims();
    Ok(match reduction {
        MaskReduction::Mean => total / target.re().len() as f64,
        MaskReduction::Sum => total / b as f64,
    })
}

/// `λ_sisnr · (−SI-SNR) + λ_mask · mask loss` for one utterance.
pub fn mixed_loss<T: Real>(
    reference: &[f64],
    estimate: &[f64],
    target: &ComplexTensor<T>,
    mask: &ComplexTensor<T>,
    weights: LossWeights,
    reduction: MaskReduction,
) -> Result<f64> {
    Ok(-weights.sisnr * si_snr(reference, estimate)? + weights.mask * mask_loss(target, mask, reduction)?)
}

/// Recorded per-utterance SI-SNR of `(B, 1, 1, L)` signals; returns `(B, 1, 1, 1)` dB values.
pub fn si_snr_var<T: Real>(g: &mut Graph<T>, reference: Var, estimate: Var) -> Result<Var> {
    let axes = [false, true, true, true];
    let yy = g.square(reference);
    let yy = g.sum_axes(yy, axes);
    if let Some(b) = g.value(yy).data().iter().position(|&v| v <= T::zero()) {
        return Err(Error::Input(format!("si_snr reference {b} is silent")));
    }
    let p = g.mul(estimate, reference)?;
    let dot = g.sum_axes(p, axes);
    let alpha = g.div(dot, yy)?;
    let target = g.mul(alpha, reference)?;
    let e = g.sub(estimate, target)?;
    let nt = g.square(target);
    let nt = g.sum_axes(nt, axes);
    let ne = g.square(e);
    let ne = g.sum_axes(ne, axes);
    let floor = T::lit(SISNR_FLOOR);
    let nt = g.clamp_min(nt, floor);
    let ne = g.clamp_min(ne, floor);
    let lt = g.ln(nt);
    let le = g.ln(ne);
    let d = g.sub(lt, le)?;
    Ok(g.scale(d, T::lit(10.0 / LN_10)))
}

/// Recorded mask loss averaged over the batch.
pub fn mask_loss_var<T: Real>(g: &mut Graph<T>, target: CVar, estimate: CVar, reduction: MaskReduction) -> Result<Var> {
    let shape = g.cshape(target);
    if shape != g.cshape(estimate) {
        return Err(Error::dim("mask_loss", format!("{} vs {}", shape, g.cshape(estimate))));
    }
    let d = g.csub(estimate, target)?;
    let r = g.square(d.re);
    let i = g.square(d.im);
    let s = g.add(r, i)?;
    let total = g.sum_all(s);
    let denom = match reduction {
        MaskReduction::Mean => shape.numel(),
        MaskReduction::Sum => shape.dims()[0],
    };
    Ok(g.scale(total, T::lit(1.0 / denom as f64)))
}

/// Recorded mixed objective averaged over the batch, with its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub si_snr: Var,
    pub mask: Var,
}

pub fn mixed_loss_var<T: Real>(
    g: &mut Graph<T>,
    reference: Var,
    estimate: Var,
    target: CVar,
    mask: CVar,
    weights: LossWeights,
    reduction: MaskReduction,
) -> Result<LossVars> {
    let per_utt = si_snr_var(g, reference, estimate)?;
    let si = g.mean_all(per_utt);
    let ml = mask_loss_var(g, target, mask, reduction)?;
    let a = g.scale(si, T::lit(-weights.sisnr));
    let b = g.scale(ml, T::lit(weights.mask));
    let total = g.add(a, b)?;
    Ok(LossVars { total, si_snr: si, mask: ml })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        assert_eq!(si_snr(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(si_snr(&[1.0, -0.5, 0.2], &[2.0, -1.0, 0.4]).unwrap() >= 80.0);
        assert!(si_snr(&[1.0, 0.0], &[0.0, 1.0]).unwrap() <= -80.0);
        assert!(si_snr(&[1.0], &[1.0, 2.0]).is_err());
        assert!(si_snr(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mask_loss_cases() {
        let z = ComplexTensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let e = ComplexTensor::full(Shape::new(1, 1, 1, 1), 0.3, 0.4);
        assert!((mask_loss(&z, &e, MaskReduction::Mean).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(mask_loss(&e, &e, MaskReduction::Mean).unwrap(), 0.0);
        let big = ComplexTensor::full(Shape::new(2, 1, 3, 4), 0.3, 0.4);
        let zb = ComplexTensor::zeros(Shape::new(2, 1, 3, 4));
        assert!((mask_loss(&zb, &big, MaskReduction::Sum).unwrap() - 3.0).abs() < 1e-12);
        assert!(LossWeights::new(0.0, 0.0).is_err());
    }

    #[test]
    fn clamped_target_is_inside_tanh_range() {
        let m = ComplexTensor::<f64>::full(Shape::new(1, 1, 2, 2), 3.0, -7.0);
        let c = clamp_target(&m);
        assert!(c.re().data().iter().chain(c.im().data()).all(|v| v.abs() < 1.0));
    }

    #[test]
    fn graph_losses_match_direct_ones() {
        let y = [0.3, -0.2, 0.5, 0.1, -0.4, 0.0];
        let yh = [0.25, -0.1, 0.45, 0.2, -0.3, 0.05];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let m = ComplexTensor::<f64>::uniform(Shape::new(1, 1, 3, 2), 2.0, &mut rng);
        let mh = ComplexTensor::<f64>::uniform(Shape::new(1, 1, 3, 2), 1.0, &mut rng);
        let w = LossWeights::default();
        let direct = mixed_loss(&y, &yh, &m, &mh, w, MaskReduction::Mean).unwrap();
        let mut g = Graph::new();
        let yv = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 6), y.to_vec()).unwrap());
        let yhv = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 6), yh.to_vec()).unwrap());
        let mv = g.cconstant(&m);
        let mhv = g.cconstant(&mh);
        let l = mixed_loss_var(&mut g, yv, yhv, mv, mhv, w, MaskReduction::Mean).unwrap();
        assert!((g.value(l.total).data()[0] - direct).abs() < 1e-12);
    }

    use rand::SeedableRng;

    proptest! {
        #[test]
        fn si_snr_is_scale_invariant(
            y in proptest::collection::vec(-1.0f64..1.0, 32),
            n in proptest::collection::vec(-0.5f64..0.5, 32),
        ) {
            prop_assume!(y.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let yh: Vec<f64> = y.iter().zip(&n).map(|(a, b)| a + b).collect();
            let base = si_snr(&y, &yh).unwrap();
            prop_assume!(base.abs() < 60.0);
            for a in [0.1, 1.0, 10.0] {
                let s: Vec<f64> = yh.iter().map(|v| v * a).collect();
                prop_assert!((si_snr(&y, &s).unwrap() - base).abs() <= 1e-6);
            }
        }

        #[test]
        fn mask_loss_is_symmetric_and_non_negative(
            a in proptest::collection::vec(-2.0f64..2.0, 8),
            b in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let shape = Shape::new(1, 1, 2, 2);
            let m = ComplexTensor::new(Tensor::from_vec(shape, a[..4].to_vec()).unwrap(), Tensor::from_vec(shape, a[4..].to_vec()).unwrap()).unwrap();
            let mh = ComplexTensor::new(Tensor::from_vec(shape, b[..4].to_vec()).unwrap(), Tensor::from_vec(shape, b[4..].to_vec()).unwrap()).unwrap();
            let l1 = mask_loss(&m, &mh, MaskReduction::Mean).unwrap();
            let l2 = mask_loss(&mh, &m, MaskReduction::Mean).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert_eq!(l1, l2);
        }
    }
}
