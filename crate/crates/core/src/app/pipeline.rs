//! The end-to-end chain: STFT, mask estimation, masking, ISTFT and the loss.

use crate::autograd::{adam_step, AdamConfig, Bound, Gradients, Graph, Var};
use crate::ctensor::{BnBatchStats, ComplexTensor};
use crate::error::{Error, Result};
use crate::loss::{clamp_target, mixed_loss_var, LossVars, LossWeights, MaskReduction};
use crate::models::{MaskBound, Mode, Model, ModelConfig};
use crate::signal::{apply_mask_var, crm_ground_truth, Stft, CRM_EPS};
use crate::tensor::{Real, Shape, Tensor};

/// Equal-length noisy/clean waveforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub noisy: Vec<Vec<f64>>,
    pub clean: Vec<Vec<f64>>,
    /// Identifier used in diagnostics.
    pub id: String,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }

    fn samples(&self) -> Result<usize> {
        let n = self.noisy.first().map_or(0, Vec::len);
        if self.noisy.is_empty()
            || self.noisy.len() != self.clean.len()
            || self.noisy.iter().chain(&self.clean).any(|x| x.len() != n)
        {
            return Err(Error::Input(format!("batch {}: noisy and clean signals must share one length", self.id)));
        }
        Ok(n)
    }
}

/// Batch-mean values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub si_snr: f64,
    pub mask_loss: f64,
}

/// A recorded pass through the whole chain.
pub struct Recorded<T> {
    pub graph: Graph<T>,
    pub bound: Bound,
    pub loss: LossVars,
    pub estimate: Var,
    pub batch_stats: Vec<BnBatchStats<T>>,
}

impl<T: Real> Recorded<T> {
    pub fn stats(&self) -> StepStats {
        let v = |x: Var| self.graph.value(x).data()[0].as_f64();
        StepStats {
            loss: v(self.loss.total),
            si_snr: v(self.loss.si_snr),
            mask_loss: v(self.loss.mask),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline<T> {
    pub model: Model<T>,
    pub stft: Stft<T>,
    pub weights: LossWeights,
    pub reduction: MaskReduction,
}

fn signals<T: Real>(xs: &[Vec<f64>]) -> Result<Tensor<T>> {
    let n = xs[0].len();
    let data = xs.iter().flat_map(|x| x.iter().map(|&v| T::lit(v))).collect();
    Tensor::from_vec(Shape::new(xs.len(), 1, 1, n), data)
}

impl<T: Real> Pipeline<T> {
    pub fn new(model: Model<T>, weights: LossWeights, reduction: MaskReduction) -> Result<Self> {
        let stft = Stft::new(model.config.stft)?;
        Ok(Pipeline {
            model,
            stft,
            weights,
            reduction,
        })
    }

    pub fn build(config: ModelConfig, seed: u64, weights: LossWeights) -> Result<Self> {
        Self::new(Model::build(config, seed)?, weights, MaskReduction::Mean)
    }

    /// Training target: the ratio mask, clamped when the head is tanh-bounded.
    pub fn target(&self, noisy: &ComplexTensor<T>, clean: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let m = crm_ground_truth(noisy, clean, T::lit(CRM_EPS))?;
        Ok(match self.model.config.mask_bound {
            MaskBound::Tanh => clamp_target(&m),
            MaskBound::None => m,
        })
    }

    /// Records loss and estimate; parameters are graph leaves when `grads` is set.
    pub fn record(&self, batch: &Batch, mode: Mode, grads: bool) -> Result<Recorded<T>> {
        let n = batch.samples()?;
        let noisy: Vec<&[f64]> = batch.noisy.iter().map(Vec::as_slice).collect();
        let clean: Vec<&[f64]> = batch.clean.iter().map(Vec::as_slice).collect();
        let x = self.stft.forward(&noisy)?;
        let y = self.stft.forward(&clean)?;
        let target = self.target(&x, &y)?;
        let mut g = Graph::new();
        let bound = if grads {
            self.model.params.bind(&mut g)
        } else {
            self.model.params.bind_constants(&mut g)
        };
        let xv = g.cconstant(&x);
        let out = self.model.forward_var(&mut g, &bound, xv, mode)?;
        let spec = apply_mask_var(&mut g, xv, out.mask)?;
        let estimate = self.stft.inverse_var(&mut g, spec, n)?;
        let reference = g.constant(signals(&batch.clean)?);
        let tv = g.cconstant(&target);
        let loss = mixed_loss_var(&mut g, reference, estimate, tv, out.mask, self.weights, self.reduction)?;
        Ok(Recorded {
            graph: g,
            bound,
            loss,
            estimate,
            batch_stats: out.batch_stats,
        })
    }

    /// Gradients of the batch loss with respect to every parameter, in training mode.
    pub fn gradients(&self, batch: &Batch) -> Result<(Recorded<T>, Gradients<T>)> {
        let rec = self.record(batch, Mode::Train, true)?;
        let grads = rec.graph.backward(rec.loss.total)?;
        Ok((rec, grads))
    }

    /// One optimiser step; fails on a non-finite loss before touching parameters.
    pub fn train_step(&mut self, batch: &Batch, lr: f64, adam: AdamConfig) -> Result<StepStats> {
        let (rec, grads) = self.gradients(batch)?;
        let stats = rec.stats();
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.model.params.step + 1,
                batch: batch.id.clone(),
            });
        }
        self.model.params.zero_grad();
        self.model.params.accumulate(&rec.bound, &grads);
        adam_step(&mut self.model.params, lr, adam);
        self.model.update_running(&rec.batch_stats);
        Ok(stats)
    }

    /// Loss and enhanced waveforms in eval mode.
    pub fn evaluate(&self, batch: &Batch) -> Result<(StepStats, Vec<Vec<f64>>)> {
        let rec = self.record(batch, Mode::Eval, false)?;
        let est = rec.graph.value(rec.estimate);
        let n = est.dims()[3];
        let outs = est.data().chunks(n).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect();
        Ok((rec.stats(), outs))
    }

    /// Enhances one waveform in eval mode; the output has the input length.
    pub fn enhance(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        let x = self.stft.forward(&[noisy])?;
        let mut g = Graph::new();
        let bound = self.model.params.bind_constants(&mut g);
        let xv = g.cconstant(&x);
        let out = self.model.forward_var(&mut g, &bound, xv, Mode::Eval)?;
        let spec = apply_mask_var(&mut g, xv, out.mask)?;
        let y = self.stft.inverse_var(&mut g, spec, noisy.len())?;
        Ok(g.value(y).to_f64())
    }
}
