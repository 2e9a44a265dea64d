//! Complex tensors and the complex-valued layer primitives.
//!
//! A complex feature map is a pair of equally shaped real planes. Every
//! linear layer (convolution, transposed convolution, dense) is evaluated
//! from four real products:
//!
//! ```text
//! out_r = in_r * w_r - in_i * w_i
//! out_i = in_r * w_i + in_i * w_r
//! ```
//!
//! Nonlinearities act on the two planes independently.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::tensor::{Real, Shape, Tensor};

/// Negative slope of the complex leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T> {
    re: Tensor<T>,
    im: Tensor<T>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::dim(
                "complex tensor",
                format!("real plane {} vs imag plane {}", re.shape(), im.shape()),
            ));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn zeros(shape: Shape) -> Self {
        ComplexTensor {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn full(shape: Shape, re: T, im: T) -> Self {
        ComplexTensor {
            re: Tensor::full(shape, re),
            im: Tensor::full(shape, im),
        }
    }

    /// Real-valued tensor lifted to the complex plane.
    pub fn from_real(re: Tensor<T>) -> Self {
        let im = Tensor::zeros(re.shape());
        ComplexTensor { re, im }
    }

    /// Complex Glorot initialisation: each plane uniform with variance
    /// `1 / (fan_in + fan_out)`, so the complex weight has variance
    /// `2 / (fan_in + fan_out)`.
    pub fn glorot<R: Rng + ?Sized>(shape: Shape, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (3.0 / (fan_in + fan_out) as f64).sqrt();
        let re = Tensor::uniform(shape, bound, rng);
        let im = Tensor::uniform(shape, bound, rng);
        ComplexTensor { re, im }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, bound: f64, rng: &mut R) -> Self {
        let re = Tensor::uniform(shape, bound, rng);
        let im = Tensor::uniform(shape, bound, rng);
        ComplexTensor { re, im }
    }

    pub fn re(&self) -> &Tensor<T> {
        &self.re
    }

    pub fn im(&self) -> &Tensor<T> {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut Tensor<T> {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut Tensor<T> {
        &mut self.im
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.re, self.im)
    }

    pub fn shape(&self) -> Shape {
        self.re.shape()
    }

    pub fn dims(&self) -> [usize; 4] {
        self.re.dims()
    }

    pub fn at(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> (T, T) {
        (self.re.at(i0, i1, i2, i3), self.im.at(i0, i1, i2, i3))
    }

    pub fn set(&mut self, i0: usize, i1: usize, i2: usize, i3: usize, v: (T, T)) {
        self.re.set(i0, i1, i2, i3, v.0);
        self.im.set(i0, i1, i2, i3, v.1);
    }

    pub fn all_finite(&self) -> bool {
        self.re.all_finite() && self.im.all_finite()
    }

    /// Applies `f` to both planes independently.
    pub fn map_planes(&self, f: impl Fn(T) -> T) -> Self {
        ComplexTensor {
            re: self.re.map(&f),
            im: self.im.map(&f),
        }
    }

    /// Multiplication by the imaginary unit: `(re, im) -> (-im, re)`.
    pub fn mul_j(&self) -> Self {
        ComplexTensor {
            re: self.im.map(|v| -v),
            im: self.re.clone(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map_planes(|v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(ComplexTensor {
            re: self.re.zip_map(&other.re, |a, b| a + b)?,
            im: self.im.zip_map(&other.im, |a, b| a + b)?,
        })
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Ok(ComplexTensor {
            re: self.re.reshape(shape)?,
            im: self.im.reshape(shape)?,
        })
    }

    pub fn cast<U: Real>(&self) -> ComplexTensor<U> {
        ComplexTensor {
            re: self.re.cast(),
            im: self.im.cast(),
        }
    }
}

/// Complex convolution kernel with its stride and padding.
///
/// Conv kernels are `(C_out, C_in, kh, kw)`; transposed-conv kernels are
/// `(C_in, C_out, kh, kw)` so that a conv and a deconv sharing one kernel are
/// adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexKernel<T> {
    pub weight: ComplexTensor<T>,
    pub spec: ConvSpec,
}

impl<T: Real> ComplexKernel<T> {
    pub fn new(weight: ComplexTensor<T>, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ComplexKernel { weight, spec })
    }
}

fn combine<T: Real>(
    rr: Tensor<T>,
    ii: Tensor<T>,
    ri: Tensor<T>,
    ir: Tensor<T>,
) -> Result<ComplexTensor<T>> {
    let re = rr.zip_map(&ii, |a, b| a - b)?;
    let im = ri.zip_map(&ir, |a, b| a + b)?;
    ComplexTensor::new(re, im)
}

/// Complex 2-D cross-correlation.
pub fn complex_conv2d<T: Real>(input: &ComplexTensor<T>, kernel: &ComplexKernel<T>) -> Result<ComplexTensor<T>> {
    let (w, s) = (&kernel.weight, kernel.spec);
    combine(
        kernels::conv2d(&input.re, &w.re, s)?,
        kernels::conv2d(&input.im, &w.im, s)?,
        kernels::conv2d(&input.re, &w.im, s)?,
        kernels::conv2d(&input.im, &w.re, s)?,
    )
}

/// Complex transposed convolution, optionally with an explicit output size.
pub fn complex_deconv2d<T: Real>(
    input: &ComplexTensor<T>,
    kernel: &ComplexKernel<T>,
    out_hw: Option<(usize, usize)>,
) -> Result<ComplexTensor<T>> {
    let (w, s) = (&kernel.weight, kernel.spec);
    combine(
        kernels::conv_transpose2d(&input.re, &w.re, s, out_hw)?,
        kernels::conv_transpose2d(&input.im, &w.im, s, out_hw)?,
        kernels::conv_transpose2d(&input.re, &w.im, s, out_hw)?,
        kernels::conv_transpose2d(&input.im, &w.re, s, out_hw)?,
    )
}

/// Complex fully connected layer; `weights` is `(rows, N, 1, 1)`.
pub fn complex_dense<T: Real>(input: &ComplexTensor<T>, weights: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    combine(
        kernels::dense(&input.re, &weights.re)?,
        kernels::dense(&input.im, &weights.im)?,
        kernels::dense(&input.re, &weights.im)?,
        kernels::dense(&input.im, &weights.re)?,
    )
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn complex_relu<T: Real>(input: &ComplexTensor<T>) -> ComplexTensor<T> {
    input.map_planes(|v| v.max(T::zero()))
}

pub fn complex_leaky_relu<T: Real>(input: &ComplexTensor<T>, slope: T) -> ComplexTensor<T> {
    input.map_planes(|v| if v > T::zero() { v } else { v * slope })
}

pub fn complex_sigmoid<T: Real>(input: &ComplexTensor<T>) -> ComplexTensor<T> {
    input.map_planes(sigmoid)
}

pub fn complex_tanh<T: Real>(input: &ComplexTensor<T>) -> ComplexTensor<T> {
    input.map_planes(|v| v.tanh())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxes {
    /// Global pooling over height and width: `(B,C,H,W) -> (B,C,1,1)`.
    Spatial,
    /// Pooling across channels: `(B,C,H,W) -> (B,1,H,W)`.
    Channel,
}

impl PoolAxes {
    pub fn mask(self) -> [bool; 4] {
        match self {
            PoolAxes::Spatial => [false, false, true, true],
            PoolAxes::Channel => [false, true, false, false],
        }
    }
}

fn pool_plane<T: Real>(x: &Tensor<T>, axes: PoolAxes, max: bool) -> Tensor<T> {
    let [nb, c, h, w] = x.dims();
    match axes {
        PoolAxes::Spatial => {
            let mut out = Tensor::zeros(Shape::new(nb, c, 1, 1));
            for b in 0..nb {
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * h * w..][..h * w];
                    let v = if max {
                        plane.iter().copied().fold(T::neg_infinity(), T::max)
                    } else {
                        plane.iter().copied().sum::<T>() / T::lit((h * w) as f64)
                    };
                    out.set(b, ch, 0, 0, v);
                }
            }
            out
        }
        PoolAxes::Channel => {
            let mut out = Tensor::zeros(Shape::new(nb, 1, h, w));
            for b in 0..nb {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = if max { T::neg_infinity() } else { T::zero() };
                        for ch in 0..c {
                            let v = x.at(b, ch, y, xx);
                            acc = if max { acc.max(v) } else { acc + v };
                        }
                        if !max {
                            acc /= T::lit(c as f64);
                        }
                        out.set(b, 0, y, xx, acc);
                    }
                }
            }
            out
        }
    }
}

/// Average pooling applied to the real and imaginary planes separately.
pub fn pool_avg<T: Real>(input: &ComplexTensor<T>, axes: PoolAxes) -> ComplexTensor<T> {
    ComplexTensor {
        re: pool_plane(&input.re, axes, false),
        im: pool_plane(&input.im, axes, false),
    }
}

/// Max pooling applied to the real and imaginary planes independently.
pub fn pool_max<T: Real>(input: &ComplexTensor<T>, axes: PoolAxes) -> ComplexTensor<T> {
    ComplexTensor {
        re: pool_plane(&input.re, axes, true),
        im: pool_plane(&input.im, axes, true),
    }
}

/// Inverse square root of the symmetric 2x2 matrix `[[vrr, vri], [vri, vii]]`.
///
/// Returns `(w_rr, w_ii, w_ri)` of the (symmetric) result.
pub fn inv_sqrt_2x2<T: Real>(vrr: T, vii: T, vri: T) -> Result<(T, T, T)> {
    let det = vrr * vii - vri * vri;
    if !(vrr > T::zero() && vii > T::zero() && det > T::zero()) {
        return Err(Error::Numeric(format!(
            "covariance not positive definite: vrr={vrr}, vii={vii}, vri={vri}"
        )));
    }
    let s = det.sqrt();
    let t = (vrr + vii + T::lit(2.0) * s).sqrt();
    let inv = T::one() / (s * t);
    Ok(((vii + s) * inv, (vrr + s) * inv, -vri * inv))
}

/// Per-channel running statistics of complex batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning<T> {
    pub mean_r: Vec<T>,
    pub mean_i: Vec<T>,
    pub v_rr: Vec<T>,
    pub v_ii: Vec<T>,
    pub v_ri: Vec<T>,
}

impl<T: Real> BnRunning<T> {
    /// Zero mean, identity covariance.
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean_r: vec![T::zero(); channels],
            mean_i: vec![T::zero(); channels],
            v_rr: vec![T::one(); channels],
            v_ii: vec![T::one(); channels],
            v_ri: vec![T::zero(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean_r.len()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, momentum: T, batch: &BnBatchStats<T>) {
        let keep = momentum;
        let take = T::one() - momentum;
        let blend = |run: &mut Vec<T>, new: &[T]| {
            for (r, &n) in run.iter_mut().zip(new) {
                *r = keep * *r + take * n;
            }
        };
        blend(&mut self.mean_r, &batch.mean_r);
        blend(&mut self.mean_i, &batch.mean_i);
        blend(&mut self.v_rr, &batch.v_rr);
        blend(&mut self.v_ii, &batch.v_ii);
        blend(&mut self.v_ri, &batch.v_ri);
    }
}

/// Batch statistics (biased covariance, without `eps`).
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean_r: Vec<T>,
    pub mean_i: Vec<T>,
    pub v_rr: Vec<T>,
    pub v_ii: Vec<T>,
    pub v_ri: Vec<T>,
}

/// Full state of one complex batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexBNState<T> {
    pub running: BnRunning<T>,
    pub gamma_rr: Vec<T>,
    pub gamma_ii: Vec<T>,
    pub gamma_ri: Vec<T>,
    pub beta_r: Vec<T>,
    pub beta_i: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

impl<T: Real> ComplexBNState<T> {
    pub fn new(channels: usize) -> Self {
        let g = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        ComplexBNState {
            running: BnRunning::new(channels),
            gamma_rr: vec![g; channels],
            gamma_ii: vec![g; channels],
            gamma_ri: vec![T::zero(); channels],
            beta_r: vec![T::zero(); channels],
            beta_i: vec![T::zero(); channels],
            momentum: T::lit(BN_MOMENTUM),
            eps: T::lit(BN_EPS),
        }
    }
}

/// Per-channel mean and biased 2x2 covariance of a complex batch.
pub fn bn_batch_stats<T: Real>(input: &ComplexTensor<T>) -> Result<BnBatchStats<T>> {
    let [nb, c, h, w] = input.dims();
    let n = nb * h * w;
    if n < 2 {
        return Err(Error::Input(format!(
            "complex batch norm needs >= 2 samples per channel, got {n}"
        )));
    }
    let nf = T::lit(n as f64);
    let mut stats = BnBatchStats {
        mean_r: vec![T::zero(); c],
        mean_i: vec![T::zero(); c],
        v_rr: vec![T::zero(); c],
        v_ii: vec![T::zero(); c],
        v_ri: vec![T::zero(); c],
    };
    let plane = h * w;
    for ch in 0..c {
        let (mut sr, mut si) = (T::zero(), T::zero());
        for b in 0..nb {
            let o = (b * c + ch) * plane;
            sr += input.re.data()[o..o + plane].iter().copied().sum::<T>();
            si += input.im.data()[o..o + plane].iter().copied().sum::<T>();
        }
        let (mr, mi) = (sr / nf, si / nf);
        let (mut vrr, mut vii, mut vri) = (T::zero(), T::zero(), T::zero());
        for b in 0..nb {
            let o = (b * c + ch) * plane;
            for k in o..o + plane {
                let a = input.re.data()[k] - mr;
                let bb = input.im.data()[k] - mi;
                vrr += a * a;
                vii += bb * bb;
                vri += a * bb;
            }
        }
        stats.mean_r[ch] = mr;
        stats.mean_i[ch] = mi;
        stats.v_rr[ch] = vrr / nf;
        stats.v_ii[ch] = vii / nf;
        stats.v_ri[ch] = vri / nf;
    }
    Ok(stats)
}

/// Whitens each channel with the batch (training) or running (eval)
/// statistics.
pub fn complex_whiten<T: Real>(
    input: &ComplexTensor<T>,
    mean_r: &[T],
    mean_i: &[T],
    v_rr: &[T],
    v_ii: &[T],
    v_ri: &[T],
    eps: T,
) -> Result<ComplexTensor<T>> {
    let [nb, c, h, w] = input.dims();
    let plane = h * w;
    let mut out = ComplexTensor::zeros(input.shape());
    for ch in 0..c {
        let (wrr, wii, wri) = inv_sqrt_2x2(v_rr[ch] + eps, v_ii[ch] + eps, v_ri[ch])?;
        for b in 0..nb {
            let o = (b * c + ch) * plane;
            for k in o..o + plane {
                let a = input.re.data()[k] - mean_r[ch];
                let bb = input.im.data()[k] - mean_i[ch];
                out.re.data_mut()[k] = wrr * a + wri * bb;
                out.im.data_mut()[k] = wri * a + wii * bb;
            }
        }
    }
    Ok(out)
}

/// Complex batch normalisation by 2x2 covariance whitening.
///
/// In training mode the running statistics in `state` are updated (the one
/// mutating layer op).
pub fn complex_batchnorm<T: Real>(
    input: &ComplexTensor<T>,
    state: &mut ComplexBNState<T>,
    training: bool,
) -> Result<ComplexTensor<T>> {
    let c = input.dims()[1];
    if state.running.channels() != c {
        return Err(Error::dim(
            "complex_batchnorm",
            format!("state has {} channels, input {}", state.running.channels(), input.shape()),
        ));
    }
    let white = if training {
        let stats = bn_batch_stats(input)?;
        let white = complex_whiten(
            input,
            &stats.mean_r,
            &stats.mean_i,
            &stats.v_rr,
            &stats.v_ii,
            &stats.v_ri,
            state.eps,
        )?;
        state.running.update(state.momentum, &stats);
        white
    } else {
        let r = &state.running;
        complex_whiten(input, &r.mean_r, &r.mean_i, &r.v_rr, &r.v_ii, &r.v_ri, state.eps)?
    };
    let [nb, _, h, w] = input.dims();
    let plane = h * w;
    let mut out = ComplexTensor::zeros(input.shape());
    for ch in 0..c {
        let (grr, gii, gri) = (state.gamma_rr[ch], state.gamma_ii[ch], state.gamma_ri[ch]);
        for b in 0..nb {
            let o = (b * c + ch) * plane;
            for k in o..o + plane {
                let (a, bb) = (white.re.data()[k], white.im.data()[k]);
                out.re.data_mut()[k] = grr * a + gri * bb + state.beta_r[ch];
                out.im.data_mut()[k] = gri * a + gii * bb + state.beta_i[ch];
            }
        }
    }
    Ok(out)
}

/// Weights of a complex LSTM cell with hidden size `H` and input size `N`.
///
/// Gate rows are stacked in the order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexLstmWeights<T> {
    /// `(4H, N, 1, 1)`
    pub w_input: ComplexTensor<T>,
    /// `(4H, H, 1, 1)`
    pub w_hidden: ComplexTensor<T>,
    /// `(1, 4H, 1, 1)`
    pub bias: ComplexTensor<T>,
}

impl<T: Real> ComplexLstmWeights<T> {
    pub fn hidden(&self) -> usize {
        self.w_hidden.dims()[1]
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        ComplexLstmWeights {
            w_input: ComplexTensor::zeros(Shape::matrix(4 * hidden, input)),
            w_hidden: ComplexTensor::zeros(Shape::matrix(4 * hidden, hidden)),
            bias: ComplexTensor::zeros(Shape::new(1, 4 * hidden, 1, 1)),
        }
    }
}

/// One step of the complex LSTM.
///
/// The gate pre-activations are the complex affine map
/// `W_x x + W_h h + b` (real path `F_r(x_r,h_r) - F_i(x_i,h_i)`, imaginary
/// path `F_r(x_i,h_i) + F_i(x_r,h_r)`); each path then runs standard LSTM
/// gating with its own cell-state plane. `x` is `(B, N, 1, 1)` (or any shape
/// flattening to `N` per item); `h_prev`, `c_prev` are `(B, H, 1, 1)`.
pub fn complex_lstm_cell<T: Real>(
    x: &ComplexTensor<T>,
    h_prev: &ComplexTensor<T>,
    c_prev: &ComplexTensor<T>,
    weights: &ComplexLstmWeights<T>,
) -> Result<(ComplexTensor<T>, ComplexTensor<T>)> {
    let hid = weights.hidden();
    let nb = x.dims()[0];
    if h_prev.dims() != [nb, hid, 1, 1] || c_prev.dims() != [nb, hid, 1, 1] {
        return Err(Error::dim(
            "complex_lstm_cell",
            format!("state shapes {} / {} vs hidden {hid}", h_prev.shape(), c_prev.shape()),
        ));
    }
    if weights.bias.dims() != [1, 4 * hid, 1, 1] || weights.w_input.dims()[0] != 4 * hid {
        return Err(Error::dim("complex_lstm_cell", "gate weights must have 4H rows"));
    }
    let pre = complex_dense(x, &weights.w_input)?.add(&complex_dense(h_prev, &weights.w_hidden)?)?;
    let mut h = ComplexTensor::zeros(h_prev.shape());
    let mut c = ComplexTensor::zeros(c_prev.shape());
    for (pre_p, bias_p, c_prev_p, h_p, c_p) in [
        (&pre.re, &weights.bias.re, &c_prev.re, &mut h.re, &mut c.re),
        (&pre.im, &weights.bias.im, &c_prev.im, &mut h.im, &mut c.im),
    ] {
        for b in 0..nb {
            for k in 0..hid {
                let gate = |g: usize| pre_p.at(b, g * hid + k, 0, 0) + bias_p.at(0, g * hid + k, 0, 0);
                let i = sigmoid(gate(0));
                let f = sigmoid(gate(1));
                let g = gate(2).tanh();
                let o = sigmoid(gate(3));
                let cv = f * c_prev_p.at(b, k, 0, 0) + i * g;
                c_p.set(b, k, 0, 0, cv);
                h_p.set(b, k, 0, 0, o * cv.tanh());
            }
        }
    }
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(re: f64, im: f64) -> ComplexTensor<f64> {
        ComplexTensor::full(Shape::new(1, 1, 1, 1), re, im)
    }

    #[test]
    fn identity_and_j_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = ComplexTensor::<f64>::uniform(Shape::new(2, 1, 3, 4), 1.0, &mut rng);
        let id = ComplexKernel::new(single(1.0, 0.0), ConvSpec::unit()).unwrap();
        assert_eq!(complex_conv2d(&v, &id).unwrap(), v);
        assert_eq!(complex_deconv2d(&v, &id, None).unwrap(), v);

        let jk = ComplexKernel::new(single(0.0, 1.0), ConvSpec::unit()).unwrap();
        let u = complex_conv2d(&single(3.0, 4.0), &jk).unwrap();
        assert_eq!(u.at(0, 0, 0, 0), (-4.0, 3.0));
    }

    #[test]
    fn deconv_stride_two_shape() {
        let x = ComplexTensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let k = ComplexKernel::new(ComplexTensor::zeros(Shape::new(1, 1, 2, 2)), ConvSpec::new((2, 2), (0, 0))).unwrap();
        assert_eq!(complex_deconv2d(&x, &k, None).unwrap().dims(), [1, 1, 4, 4]);
    }

    #[test]
    fn dense_hand_cases() {
        let w = ComplexTensor::new(
            Tensor::from_vec(Shape::matrix(1, 2), vec![1.0, 1.0]).unwrap(),
            Tensor::zeros(Shape::matrix(1, 2)),
        )
        .unwrap();
        let x = ComplexTensor::new(
            Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap(),
            Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, -1.0]).unwrap(),
        )
        .unwrap();
        let y = complex_dense(&x, &w).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), (3.0, 0.0));
        assert!(complex_dense(&x, &ComplexTensor::zeros(Shape::matrix(1, 3))).is_err());
    }

    #[test]
    fn activations_componentwise() {
        let s = complex_sigmoid(&single(0.0, 0.0));
        assert_eq!(s.at(0, 0, 0, 0), (0.5, 0.5));
        let r = complex_relu(&single(-1.0, 2.0));
        assert_eq!(r.at(0, 0, 0, 0), (0.0, 2.0));
        let l = complex_leaky_relu(&single(-1.0, 2.0), LEAKY_SLOPE);
        assert_eq!(l.at(0, 0, 0, 0), (-0.01, 2.0));
        let t = complex_tanh(&single(40.0, -40.0));
        let (a, b) = t.at(0, 0, 0, 0);
        assert!(a <= 1.0 && b >= -1.0);
    }

    #[test]
    fn pooling_per_plane() {
        let re = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let im = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, -4.0, 1.0, 1.0]).unwrap();
        let u = ComplexTensor::new(re, im).unwrap();
        assert_eq!(pool_avg(&u, PoolAxes::Spatial).at(0, 0, 0, 0), (1.5, -0.5));
        assert_eq!(pool_max(&u, PoolAxes::Spatial).at(0, 0, 0, 0), (3.0, 1.0));
        assert_eq!(pool_max(&u, PoolAxes::Channel), u);
        let c = ComplexTensor::<f64>::full(Shape::new(2, 3, 2, 5), 0.25, -2.0);
        assert_eq!(pool_avg(&c, PoolAxes::Spatial).at(1, 2, 0, 0), (0.25, -2.0));
        assert_eq!(pool_max(&c, PoolAxes::Channel).at(1, 0, 1, 4), (0.25, -2.0));
    }

    #[test]
    fn batchnorm_whitens_to_identity_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = ComplexTensor::<f64>::uniform(Shape::new(4, 3, 5, 6), 1.0, &mut rng);
        // Correlate the planes so whitening has real work to do.
        let re = base.re().zip_map(base.im(), |a, _| 2.0 * a + 0.3).unwrap();
        let im = base.re().zip_map(base.im(), |a, b| 0.7 * a + 1.5 * b - 1.0).unwrap();
        let x = ComplexTensor::new(re, im).unwrap();
        let mut st = ComplexBNState::new(3);
        st.gamma_rr = vec![1.0; 3];
        st.gamma_ii = vec![1.0; 3];
        let y = complex_batchnorm(&x, &mut st, true).unwrap();
        let stats = bn_batch_stats(&y).unwrap();
        for ch in 0..3 {
            assert!(stats.mean_r[ch].abs() < 1e-12 && stats.mean_i[ch].abs() < 1e-12);
            assert!((stats.v_rr[ch] - 1.0).abs() < 1e-4);
            assert!((stats.v_ii[ch] - 1.0).abs() < 1e-4);
            assert!(stats.v_ri[ch].abs() < 1e-4);
        }
        // running stats moved 10% of the way toward the batch
        let batch = bn_batch_stats(&x).unwrap();
        assert!((st.running.mean_r[0] - 0.1 * batch.mean_r[0]).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let x = ComplexTensor::<f64>::full(Shape::new(2, 2, 3, 3), 0.4, -0.9);
        let mut st = ComplexBNState::new(2);
        st.beta_r = vec![0.25, -1.0];
        st.beta_i = vec![2.0, 0.5];
        let y = complex_batchnorm(&x, &mut st, true).unwrap();
        let close = |(a, b): (f64, f64), (c, d): (f64, f64)| (a - c).abs() < 1e-9 && (b - d).abs() < 1e-9;
        assert!(close(y.at(1, 0, 2, 2), (0.25, 2.0)));
        assert!(close(y.at(0, 1, 0, 1), (-1.0, 0.5)));
    }

    #[test]
    fn batchnorm_eval_with_identity_running_stats_scales_by_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ComplexTensor::<f64>::uniform(Shape::new(1, 1, 4, 4), 1.0, &mut rng);
        let mut st = ComplexBNState::new(1);
        let y = complex_batchnorm(&x, &mut st, false).unwrap();
        let g = std::f64::consts::FRAC_1_SQRT_2 / (1.0 + BN_EPS).sqrt();
        for k in 0..16 {
            assert!((y.re().data()[k] - g * x.re().data()[k]).abs() < 1e-12);
        }
        assert!(complex_batchnorm(&ComplexTensor::zeros(Shape::new(1, 1, 1, 1)), &mut st, true).is_err());
    }

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let (a, d, b) = inv_sqrt_2x2(2.0_f64, 1.5, 0.4).unwrap();
        // W*W*V = I
        let (w2_rr, w2_ii, w2_ri) = (a * a + b * b, d * d + b * b, a * b + b * d);
        let i_rr = w2_rr * 2.0 + w2_ri * 0.4;
        let i_ri = w2_rr * 0.4 + w2_ri * 1.5;
        let i_ii = w2_ri * 0.4 + w2_ii * 1.5;
        assert!((i_rr - 1.0).abs() < 1e-12 && i_ri.abs() < 1e-12 && (i_ii - 1.0).abs() < 1e-12);
        assert!(inv_sqrt_2x2(1.0_f64, 1.0, 1.0).is_err());
    }

    #[test]
    fn lstm_zero_weights_give_zero_state() {
        let w = ComplexLstmWeights::<f64>::zeros(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ComplexTensor::uniform(Shape::new(2, 3, 1, 1), 1.0, &mut rng);
        let h0 = ComplexTensor::zeros(Shape::new(2, 2, 1, 1));
        let (h, c) = complex_lstm_cell(&x, &h0, &h0, &w).unwrap();
        assert_eq!(h, h0);
        assert_eq!(c, h0);
    }
}
