//! Complex convolutional block attention: a channel gate from globally
//! pooled statistics and a spatial gate from channel-pooled maps, applied in
//! sequence.
//!
//! ```text
//! G_c = σ(W2 δ(W1 avg(U))) + σ(W2 δ(W1 max(U)))      (B, C, 1, 1), parts in (0, 2)
//! G_s = σ(F ⋆ [avg_c(U'); max_c(U')])                 (B, 1, H, W), parts in (0, 1)
//! ```
//!
//! Pooling, activations and gating act on the real and imaginary planes
//! separately; the FC layers and the 7x7 convolution are complex.

use rand::Rng;

use crate::autograd::{Bound, CVar, Graph, ParamId, ParamStore};
use crate::ctensor::{
    complex_conv2d, complex_dense, complex_relu, complex_sigmoid, pool_avg, pool_max, ComplexKernel, ComplexTensor,
    PoolAxes,
};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tensor::{Real, Shape, Tensor};

pub const DEFAULT_REDUCTION: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "reduction ratio {reduction} must be positive and divide the channel count {channels}"
        )));
    }
    Ok(())
}

/// Shared FC pair of the channel gate: `fc1` is `(C/r, C)`, `fc2` is `(C, C/r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams<T> {
    pub fc1: ComplexTensor<T>,
    pub fc2: ComplexTensor<T>,
    pub reduction: usize,
}

impl<T: Real> ChannelAttentionParams<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let hidden = channels / reduction;
        Ok(ChannelAttentionParams {
            fc1: ComplexTensor::zeros(Shape::matrix(hidden, channels)),
            fc2: ComplexTensor::zeros(Shape::matrix(channels, hidden)),
            reduction,
        })
    }

    pub fn glorot<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let hidden = channels / reduction;
        Ok(ChannelAttentionParams {
            fc1: ComplexTensor::glorot(Shape::matrix(hidden, channels), channels, hidden, rng),
            fc2: ComplexTensor::glorot(Shape::matrix(channels, hidden), hidden, channels, rng),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.dims()[1]
    }
}

/// Complex `(1, 2, k, k)` convolution of the spatial gate with "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams<T> {
    pub kernel: ComplexTensor<T>,
    pub padding: usize,
}

impl<T: Real> SpatialAttentionParams<T> {
    pub fn zeros() -> Self {
        let k = SPATIAL_KERNEL;
        SpatialAttentionParams {
            kernel: ComplexTensor::zeros(Shape::new(1, 2, k, k)),
            padding: k / 2,
        }
    }

    pub fn glorot<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let k = SPATIAL_KERNEL;
        SpatialAttentionParams {
            kernel: ComplexTensor::glorot(Shape::new(1, 2, k, k), 2 * k * k, k * k, rng),
            padding: k / 2,
        }
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::new((1, 1), (self.padding, self.padding))
    }
}

/// A channel gate `(B, C, 1, 1)` or a spatial gate `(B, 1, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGate<T> {
    pub gate: ComplexTensor<T>,
}

pub fn channel_attention<T: Real>(u: &ComplexTensor<T>, params: &ChannelAttentionParams<T>) -> Result<AttentionGate<T>> {
    let c = u.dims()[1];
    if c != params.channels() {
        return Err(Error::dim(
            "channel_attention",
            format!("input has {c} channels, gate expects {}", params.channels()),
        ));
    }
    check_reduction(c, params.reduction)?;
    let branch = |pooled: ComplexTensor<T>| -> Result<ComplexTensor<T>> {
        let h = complex_relu(&complex_dense(&pooled, &params.fc1)?);
        Ok(complex_sigmoid(&complex_dense(&h, &params.fc2)?))
    };
    let avg = branch(pool_avg(u, PoolAxes::Spatial))?;
    let max = branch(pool_max(u, PoolAxes::Spatial))?;
    let [b, c, _, _] = avg.dims();
    Ok(AttentionGate {
        gate: avg.add(&max)?.reshape(Shape::new(b, c, 1, 1))?,
    })
}

pub fn spatial_attention<T: Real>(u: &ComplexTensor<T>, params: &SpatialAttentionParams<T>) -> Result<AttentionGate<T>> {
    let avg = pool_avg(u, PoolAxes::Channel);
    let max = pool_max(u, PoolAxes::Channel);
    let [b, _, h, w] = avg.dims();
    let stack = |p: &Tensor<T>, q: &Tensor<T>| -> Result<Tensor<T>> {
        let n = h * w;
        let mut data = Vec::with_capacity(2 * b * n);
        for bi in 0..b {
            data.extend_from_slice(&p.data()[bi * n..(bi + 1) * n]);
            data.extend_from_slice(&q.data()[bi * n..(bi + 1) * n]);
        }
        Tensor::from_vec(Shape::new(b, 2, h, w), data)
    };
    let pooled = ComplexTensor::new(stack(avg.re(), max.re())?, stack(avg.im(), max.im())?)?;
    let kernel = ComplexKernel::new(params.kernel.clone(), params.spec())?;
    Ok(AttentionGate {
        gate: complex_sigmoid(&complex_conv2d(&pooled, &kernel)?),
    })
}

/// Plane-by-plane gating with broadcasting of the gate over `u`.
pub fn apply_gate<T: Real>(u: &ComplexTensor<T>, gate: &AttentionGate<T>) -> Result<ComplexTensor<T>> {
    let g = &gate.gate;
    let (us, gs) = (u.dims(), g.dims());
    if (0..4).any(|a| gs[a] != us[a] && gs[a] != 1) {
        return Err(Error::dim("apply_gate", format!("gate {} does not broadcast to {}", g.shape(), u.shape())));
    }
    let mut out = ComplexTensor::zeros(u.shape());
    let idx = |i: usize, n: usize| if n == 1 { 0 } else { i };
    for b in 0..us[0] {
        for c in 0..us[1] {
            for y in 0..us[2] {
                for x in 0..us[3] {
                    let (ur, ui) = u.at(b, c, y, x);
                    let (gr, gi) = g.at(idx(b, gs[0]), idx(c, gs[1]), idx(y, gs[2]), idx(x, gs[3]));
                    out.set(b, c, y, x, (ur * gr, ui * gi));
                }
            }
        }
    }
    Ok(out)
}

/// Channel gating followed by spatial gating.
pub fn ccbam<T: Real>(
    u: &ComplexTensor<T>,
    cp: &ChannelAttentionParams<T>,
    sp: &SpatialAttentionParams<T>,
) -> Result<ComplexTensor<T>> {
    let u1 = apply_gate(u, &channel_attention(u, cp)?)?;
    apply_gate(&u1, &spatial_attention(&u1, sp)?)
}

/// Real scalars in one block: two complex FC matrices and one complex 2-channel kernel.
pub fn ccbam_param_count(channels: usize, reduction: usize) -> usize {
    2 * (2 * channels * channels / reduction) + 2 * (2 * SPATIAL_KERNEL * SPATIAL_KERNEL)
}

pub fn channel_attention_var<T: Real>(g: &mut Graph<T>, u: CVar, fc1: CVar, fc2: CVar) -> Result<CVar> {
    let c = g.cshape(u).dims()[1];
    let [hidden, cols, _, _] = g.cshape(fc1).dims();
    if cols != c || c % hidden != 0 {
        return Err(Error::dim(
            "channel_attention",
            format!("input has {c} channels, fc1 is {}", g.cshape(fc1)),
        ));
    }
    let branch = |g: &mut Graph<T>, pooled: CVar| -> Result<CVar> {
        let h = g.cdense(pooled, fc1)?;
        let h = g.crelu(h);
        let o = g.cdense(h, fc2)?;
        Ok(g.csigmoid(o))
    };
    let avg = g.cpool_avg(u, PoolAxes::Spatial);
    let avg = branch(g, avg)?;
    let max = g.cpool_max(u, PoolAxes::Spatial);
    let max = branch(g, max)?;
    g.cadd(avg, max)
}

pub fn spatial_attention_var<T: Real>(g: &mut Graph<T>, u: CVar, kernel: CVar, padding: usize) -> Result<CVar> {
    let avg = g.cpool_avg(u, PoolAxes::Channel);
    let max = g.cpool_max(u, PoolAxes::Channel);
    let pooled = g.cconcat(&[avg, max], 1)?;
    let s = g.cconv2d(pooled, kernel, ConvSpec::new((1, 1), (padding, padding)))?;
    Ok(g.csigmoid(s))
}

pub fn apply_gate_var<T: Real>(g: &mut Graph<T>, u: CVar, gate: CVar) -> Result<CVar> {
    g.cmul_planes(u, gate)
}

/// Parameters of one attention block registered in a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CcbamIds {
    pub fc1: ParamId,
    pub fc2: ParamId,
    pub kernel: ParamId,
    pub padding: usize,
}

impl CcbamIds {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cp = ChannelAttentionParams::glorot(channels, reduction, rng)?;
        let sp = SpatialAttentionParams::glorot(rng);
        Ok(CcbamIds {
            fc1: store.add_complex(&format!("{prefix}.fc1"), cp.fc1)?,
            fc2: store.add_complex(&format!("{prefix}.fc2"), cp.fc2)?,
            kernel: store.add_complex(&format!("{prefix}.spatial"), sp.kernel)?,
            padding: sp.padding,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, u: CVar) -> Result<CVar> {
        ccbam_var(g, u, bound.complex(self.fc1), bound.complex(self.fc2), bound.complex(self.kernel), self.padding)
    }
}

pub fn ccbam_var<T: Real>(g: &mut Graph<T>, u: CVar, fc1: CVar, fc2: CVar, kernel: CVar, padding: usize) -> Result<CVar> {
    let gc = channel_attention_var(g, u, fc1, fc2)?;
    let u1 = apply_gate_var(g, u, gc)?;
    let gs = spatial_attention_var(g, u1, kernel, padding)?;
    apply_gate_var(g, u1, gs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_constant_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = ComplexTensor::<f64>::uniform(Shape::new(2, 4, 3, 5), 3.0, &mut rng);
        let cg = channel_attention(&u, &ChannelAttentionParams::zeros(4, 2).unwrap()).unwrap();
        assert_eq!(cg.gate.dims(), [2, 4, 1, 1]);
        assert!(cg.gate.re().data().iter().chain(cg.gate.im().data()).all(|&v| v == 1.0));
        let sg = spatial_attention(&u, &SpatialAttentionParams::zeros()).unwrap();
        assert_eq!(sg.gate.dims(), [2, 1, 3, 5]);
        assert!(sg.gate.re().data().iter().chain(sg.gate.im().data()).all(|&v| v == 0.5));
        let out = ccbam(&u, &ChannelAttentionParams::zeros(4, 2).unwrap(), &SpatialAttentionParams::zeros()).unwrap();
        assert_eq!(out, u.scale(0.5));
    }

    #[test]
    fn gate_products() {
        let s = Shape::new(1, 1, 1, 1);
        let u = ComplexTensor::<f64>::full(s, 2.0, 4.0);
        let g = |r, i| AttentionGate { gate: ComplexTensor::full(s, r, i) };
        assert_eq!(apply_gate(&u, &g(0.5, 0.25)).unwrap().at(0, 0, 0, 0), (1.0, 1.0));
        assert_eq!(apply_gate(&u, &g(1.0, 1.0)).unwrap(), u);
        assert_eq!(apply_gate(&u, &g(0.0, 0.0)).unwrap().at(0, 0, 0, 0), (0.0, 0.0));
        let bad = AttentionGate { gate: ComplexTensor::<f64>::zeros(Shape::new(1, 3, 1, 1)) };
        assert!(apply_gate(&ComplexTensor::zeros(Shape::new(1, 2, 2, 2)), &bad).is_err());
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(matches!(ChannelAttentionParams::<f64>::zeros(6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn graph_route_matches_direct_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = ComplexTensor::<f64>::uniform(Shape::new(2, 8, 6, 5), 1.0, &mut rng);
        let cp = ChannelAttentionParams::glorot(8, 4, &mut rng).unwrap();
        let sp = SpatialAttentionParams::glorot(&mut rng);
        let direct = ccbam(&u, &cp, &sp).unwrap();
        let mut g = Graph::new();
        let uv = g.cconstant(&u);
        let f1 = g.cconstant(&cp.fc1);
        let f2 = g.cconstant(&cp.fc2);
        let k = g.cconstant(&sp.kernel);
        let out = ccbam_var(&mut g, uv, f1, f2, k, sp.padding).unwrap();
        let out = g.cvalue(out);
        for (a, b) in out.re().data().iter().chain(out.im().data()).zip(direct.re().data().iter().chain(direct.im().data())) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn parameter_count_formula() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        CcbamIds::register(&mut store, "att", 16, 4, &mut rng).unwrap();
        assert_eq!(store.num_scalars(), ccbam_param_count(16, 4));
    }
}
