//! Real-valued convolution and matrix kernels.
//!
//! These are the only routines that touch raw loops over spatial windows.
//! Complex layers combine them with the four-product rule, and the tape
//! reuses them for both forward values and gradients. Convolution is
//! cross-correlation (no kernel flip) with zero padding.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Stride and symmetric zero padding per spatial axis `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        ConvSpec { stride, padding }
    }

    pub fn unit() -> Self {
        ConvSpec::new((1, 1), (0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config(format!("stride must be >= 1, got {:?}", self.stride)));
        }
        Ok(())
    }
}

/// Output length of a strided, padded correlation along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output length of a transposed correlation without output padding.
pub fn deconv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if n == 0 {
        return None;
    }
    ((n - 1) * stride + k).checked_sub(2 * pad)
}

/// Range of output positions `o` such that `o*stride + k - pad` lies in `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = n_in as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(n_out);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// Range of kernel taps `k` in `[0, kw)` such that `o*stride + k - pad` lies in `[0, n_in)`.
#[inline]
fn tap_range(o: usize, n_in: usize, stride: usize, kw: usize, pad: usize) -> (usize, usize) {
    let base = (o * stride) as isize - pad as isize;
    let lo = (-base).max(0) as usize;
    let hi = (n_in as isize - base).clamp(0, kw as isize) as usize;
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

#[inline]
fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out[b, co, oy, ox] = Σ_{ci,ky,kx} w[co, ci, ky, kx] · in[b, ci, oy·s+ky−p, ox·s+kx−p]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let [nb, ci, h, w] = input.dims();
    let [co, wci, kh, kw] = weight.dims();
    if wci != ci {
        return Err(Error::dim(
            "conv2d",
            format!("input channels {ci} vs kernel C_in {wci} (input {}, kernel {})", input.shape(), weight.shape()),
        ));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let ho = conv_out_len(h, kh, sh, ph)
        .ok_or_else(|| Error::dim("conv2d", format!("height {h} + 2*{ph} < kernel {kh}")))?;
    let wo = conv_out_len(w, kw, sw, pw)
        .ok_or_else(|| Error::dim("conv2d", format!("width {w} + 2*{pw} < kernel {kw}")))?;

    let mut out = Tensor::zeros(Shape::new(nb, co, ho, wo));
    let x = input.data();
    let wt = weight.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    let wide_kernel = kw > wo;
    let od = out.data_mut();
    for b in 0..nb {
        for o in 0..co {
            let out_plane = &mut od[(b * co + o) * plane_out..][..plane_out];
            for c in 0..ci {
                let in_plane = &x[(b * ci + c) * plane_in..][..plane_in];
                let kbase = (o * ci + c) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, sh, ky, ph);
                    let krow = &wt[kbase + ky * kw..][..kw];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let in_row = &in_plane[iy * w..][..w];
                        let out_row = &mut out_plane[oy * wo..][..wo];
                        if wide_kernel {
                            for (ox, acc) in out_row.iter_mut().enumerate() {
                                let (k_lo, k_hi) = tap_range(ox, w, sw, kw, pw);
                                if k_lo < k_hi {
                                    let start = ox * sw + k_lo - pw;
                                    *acc += dot(&krow[k_lo..k_hi], &in_row[start..start + (k_hi - k_lo)]);
                                }
                            }
                        } else {
                            for (kx, &wv) in krow.iter().enumerate() {
                                let (ox_lo, ox_hi) = valid_range(wo, w, sw, kx, pw);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                if sw == 1 {
                                    let start = ox_lo + kx - pw;
                                    axpy(&mut out_row[ox_lo..ox_hi], wv, &in_row[start..start + (ox_hi - ox_lo)]);
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        out_row[ox] += wv * in_row[ox * sw + kx - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transposed correlation: the adjoint of [`conv2d`] with the same kernel.
///
/// `weight` is laid out `(C_in, C_out, kh, kw)` where `C_in` matches the
/// channels of `input`. `out_hw` overrides the output size; it must lie in
/// `[base, base + stride)` per axis where `base` is the unpadded transposed
/// length.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
    out_hw: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let [nb, ci, hi, wi] = input.dims();
    let [wci, co, kh, kw] = weight.dims();
    if wci != ci {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("input channels {ci} vs kernel C_in {wci} (input {}, kernel {})", input.shape(), weight.shape()),
        ));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let base_h = deconv_out_len(hi, kh, sh, ph)
        .ok_or_else(|| Error::dim("conv_transpose2d", format!("height {hi} too small for padding {ph}")))?;
    let base_w = deconv_out_len(wi, kw, sw, pw)
        .ok_or_else(|| Error::dim("conv_transpose2d", format!("width {wi} too small for padding {pw}")))?;
    let (ho, wo) = out_hw.unwrap_or((base_h, base_w));
    if ho < base_h || ho >= base_h + sh || wo < base_w || wo >= base_w + sw {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("requested output {ho}x{wo} outside [{base_h},{})x[{base_w},{})", base_h + sh, base_w + sw),
        ));
    }

    let mut out = Tensor::zeros(Shape::new(nb, co, ho, wo));
    let x = input.data();
    let wt = weight.data();
    let plane_in = hi * wi;
    let plane_out = ho * wo;
    let wide_kernel = kw > wi;
    let od = out.data_mut();
    for b in 0..nb {
        for o in 0..co {
            let out_plane = &mut od[(b * co + o) * plane_out..][..plane_out];
            for c in 0..ci {
                let in_plane = &x[(b * ci + c) * plane_in..][..plane_in];
                let kbase = (c * co + o) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(hi, ho, sh, ky, ph);
                    let krow = &wt[kbase + ky * kw..][..kw];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let in_row = &in_plane[oy * wi..][..wi];
                        let out_row = &mut out_plane[iy * wo..][..wo];
                        if wide_kernel {
                            for (ox, &a) in in_row.iter().enumerate() {
                                let (k_lo, k_hi) = tap_range(ox, wo, sw, kw, pw);
                                if k_lo < k_hi {
                                    let start = ox * sw + k_lo - pw;
                                    axpy(&mut out_row[start..start + (k_hi - k_lo)], a, &krow[k_lo..k_hi]);
                                }
                            }
                        } else {
                            for (kx, &wv) in krow.iter().enumerate() {
                                let (ox_lo, ox_hi) = valid_range(wi, wo, sw, kx, pw);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                if sw == 1 {
                                    let start = ox_lo + kx - pw;
                                    axpy(&mut out_row[start..start + (ox_hi - ox_lo)], wv, &in_row[ox_lo..ox_hi]);
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        out_row[ox * sw + kx - pw] += wv * in_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its kernel.
///
/// `grad_out` has the conv output shape; the result is `(C_out, C_in, kh, kw)`.
/// With the roles of the two tensors swapped this is also the kernel
/// gradient of [`conv_transpose2d`].
pub fn conv2d_weight_grad<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    kernel_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [nb, ci, h, w] = input.dims();
    let [gb, co, ho, wo] = grad_out.dims();
    let (kh, kw) = kernel_hw;
    if gb != nb {
        return Err(Error::dim("conv2d_weight_grad", format!("batch {nb} vs {gb}")));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let mut gw = Tensor::zeros(Shape::new(co, ci, kh, kw));
    let x = input.data();
    let g = grad_out.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    let wide_kernel = kw > wo;
    let gd = gw.data_mut();
    for o in 0..co {
        for c in 0..ci {
            let kbase = (o * ci + c) * kh * kw;
            for b in 0..nb {
                let in_plane = &x[(b * ci + c) * plane_in..][..plane_in];
                let g_plane = &g[(b * co + o) * plane_out..][..plane_out];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, sh, ky, ph);
                    let krow = &mut gd[kbase + ky * kw..][..kw];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let in_row = &in_plane[iy * w..][..w];
                        let g_row = &g_plane[oy * wo..][..wo];
                        if wide_kernel {
                            for (ox, &gv) in g_row.iter().enumerate() {
                                let (k_lo, k_hi) = tap_range(ox, w, sw, kw, pw);
                                if k_lo < k_hi {
                                    let start = ox * sw + k_lo - pw;
                                    axpy(&mut krow[k_lo..k_hi], gv, &in_row[start..start + (k_hi - k_lo)]);
                                }
                            }
                        } else {
                            for (kx, acc) in krow.iter_mut().enumerate() {
                                let (ox_lo, ox_hi) = valid_range(wo, w, sw, kx, pw);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                if sw == 1 {
                                    let start = ox_lo + kx - pw;
                                    *acc += dot(&g_row[ox_lo..ox_hi], &in_row[start..start + (ox_hi - ox_lo)]);
                                } else {
                                    let mut s = T::zero();
                                    for ox in ox_lo..ox_hi {
                                        s += g_row[ox] * in_row[ox * sw + kx - pw];
                                    }
                                    *acc += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// `out[b, r] = Σ_n w[r, n] · x[b, n]` with `x` flattened per batch item.
/// Output shape is `(B, rows, 1, 1)`.
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let nb = input.dims()[0];
    let n = input.len() / nb.max(1);
    let [rows, cols, a, b] = weight.dims();
    if a != 1 || b != 1 || cols != n {
        return Err(Error::dim(
            "dense",
            format!("input {} flattens to {n} features, weight is {}", input.shape(), weight.shape()),
        ));
    }
    let mut out = Tensor::zeros(Shape::new(nb, rows, 1, 1));
    let x = input.data();
    let w = weight.data();
    let od = out.data_mut();
    for bi in 0..nb {
        let xr = &x[bi * n..][..n];
        for r in 0..rows {
            od[bi * rows + r] = dot(&w[r * n..][..n], xr);
        }
    }
    Ok(out)
}

/// Gradients of [`dense`]: `(d input, d weight)`.
pub fn dense_grads<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let nb = input.dims()[0];
    let n = input.len() / nb.max(1);
    let rows = weight.dims()[0];
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    for bi in 0..nb {
        let xr = &x[bi * n..][..n];
        for r in 0..rows {
            let gv = g[bi * rows + r];
            axpy(&mut gx.data_mut()[bi * n..][..n], gv, &w[r * n..][..n]);
            axpy(&mut gw.data_mut()[r * n..][..n], gv, xr);
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let [nb, ci, h, wd] = x.dims();
        let [co, _, kh, kw] = w.dims();
        let ho = conv_out_len(h, kh, spec.stride.0, spec.padding.0).unwrap();
        let wo = conv_out_len(wd, kw, spec.stride.1, spec.padding.1).unwrap();
        let mut out = Tensor::zeros(Shape::new(nb, co, ho, wo));
        for b in 0..nb {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(o, c, ky, kx) * x.at(b, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn close(a: &Tensor<f64>, b: &Tensor<f64>) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_naive_over_strides_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(sh, sw, ph, pw, kh, kw) in &[(1, 1, 0, 0, 3, 3), (2, 1, 2, 0, 5, 2), (2, 3, 1, 2, 3, 4), (1, 4, 0, 0, 1, 9)] {
            let x = Tensor::uniform(Shape::new(2, 3, 8, 11), 1.0, &mut rng);
            let w = Tensor::uniform(Shape::new(4, 3, kh, kw), 1.0, &mut rng);
            let spec = ConvSpec::new((sh, sw), (ph, pw));
            close(&conv2d(&x, &w, spec).unwrap(), &naive_conv(&x, &w, spec));
        }
    }

    #[test]
    fn transpose_is_adjoint_and_weight_grad_matches_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(sh, sw, ph, pw, kh, kw) in &[(1, 1, 1, 1, 3, 3), (2, 1, 2, 0, 5, 2), (1, 3, 0, 0, 1, 12)] {
            let spec = ConvSpec::new((sh, sw), (ph, pw));
            let x = Tensor::<f64>::uniform(Shape::new(2, 2, 9, 14), 1.0, &mut rng);
            let w = Tensor::uniform(Shape::new(3, 2, kh, kw), 1.0, &mut rng);
            let y = conv2d(&x, &w, spec).unwrap();
            let t = Tensor::uniform(y.shape(), 1.0, &mut rng);
            let xt = conv_transpose2d(&t, &w, spec, Some((9, 14))).unwrap();
            let lhs = y.dot(&t);
            let rhs = x.dot(&xt);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
            // d<conv(x,w),t>/dw = weight_grad(x, t)
            let gw = conv2d_weight_grad(&x, &t, spec, (kh, kw)).unwrap();
            let mut e = Tensor::zeros(w.shape());
            e.data_mut()[5] = 1.0;
            let de = conv2d(&x, &e, spec).unwrap().dot(&t);
            assert!((gw.data()[5] - de).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_grads_match_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(Shape::new(3, 5, 1, 1), 1.0, &mut rng);
        let w = Tensor::uniform(Shape::matrix(4, 5), 1.0, &mut rng);
        let g = Tensor::uniform(Shape::new(3, 4, 1, 1), 1.0, &mut rng);
        let (gx, gw) = dense_grads(&x, &w, &g);
        let y = dense(&x, &w).unwrap();
        assert!((y.dot(&g) - x.dot(&gx)).abs() < 1e-12);
        assert!((y.dot(&g) - w.dot(&gw)).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_name_axes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d(&x, &w, ConvSpec::unit()).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 5, 5));
        assert!(conv2d(&x, &w, ConvSpec::unit()).is_err());
    }
}
