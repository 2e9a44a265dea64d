//! Complex-valued layers recorded on the tape as pairs of real nodes.

use crate::ctensor::{inv_sqrt_2x2, BnBatchStats, BnRunning, ComplexTensor, PoolAxes};
use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::tensor::{Real, Shape, Tensor};

use super::graph::{Graph, Var};

/// A complex node: one real node per plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

/// Trainable affine part of a complex batch-norm layer, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct BnVars {
    pub gamma_rr: Var,
    pub gamma_ii: Var,
    pub gamma_ri: Var,
    pub beta: CVar,
}

impl<T: Real> Graph<T> {
    pub fn cconstant(&mut self, t: &ComplexTensor<T>) -> CVar {
        CVar {
            re: self.constant(t.re().clone()),
            im: self.constant(t.im().clone()),
        }
    }

    pub fn cparam(&mut self, t: &ComplexTensor<T>) -> CVar {
        CVar {
            re: self.param(t.re().clone()),
            im: self.param(t.im().clone()),
        }
    }

    pub fn cvalue(&self, c: CVar) -> ComplexTensor<T> {
        ComplexTensor::new(self.value(c.re).clone(), self.value(c.im).clone()).expect("planes share a shape")
    }

    pub fn cshape(&self, c: CVar) -> Shape {
        self.shape(c.re)
    }

    /// Combines four real products by the complex multiplication rule.
    fn four_products(
        &mut self,
        x: CVar,
        w: CVar,
        mut f: impl FnMut(&mut Self, Var, Var) -> Result<Var>,
    ) -> Result<CVar> {
        let rr = f(self, x.re, w.re)?;
        let ii = f(self, x.im, w.im)?;
        let ri = f(self, x.re, w.im)?;
        let ir = f(self, x.im, w.re)?;
        Ok(CVar {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    pub fn cconv2d(&mut self, x: CVar, w: CVar, spec: ConvSpec) -> Result<CVar> {
        self.four_products(x, w, |g, a, b| g.conv2d(a, b, spec))
    }

    pub fn cdeconv2d(&mut self, x: CVar, w: CVar, spec: ConvSpec, out_hw: Option<(usize, usize)>) -> Result<CVar> {
        self.four_products(x, w, |g, a, b| g.conv_transpose2d(a, b, spec, out_hw))
    }

    pub fn cdense(&mut self, x: CVar, w: CVar) -> Result<CVar> {
        self.four_products(x, w, |g, a, b| g.dense(a, b))
    }

    fn planes<R>(&mut self, x: CVar, mut f: impl FnMut(&mut Self, Var) -> R) -> (R, R) {
        let re = f(self, x.re);
        let im = f(self, x.im);
        (re, im)
    }

    fn cmap(&mut self, x: CVar, f: impl FnMut(&mut Self, Var) -> Var) -> CVar {
        let (re, im) = self.planes(x, f);
        CVar { re, im }
    }

    fn ctry_map(&mut self, x: CVar, f: impl FnMut(&mut Self, Var) -> Result<Var>) -> Result<CVar> {
        let (re, im) = self.planes(x, f);
        Ok(CVar { re: re?, im: im? })
    }

    pub fn cadd(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.add(a.re, b.re)?,
            im: self.add(a.im, b.im)?,
        })
    }

    pub fn csub(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.sub(a.re, b.re)?,
            im: self.sub(a.im, b.im)?,
        })
    }

    pub fn cscale(&mut self, x: CVar, k: T) -> CVar {
        self.cmap(x, |g, v| g.scale(v, k))
    }

    pub fn crelu(&mut self, x: CVar) -> CVar {
        self.cmap(x, |g, v| g.relu(v))
    }

    pub fn cleaky_relu(&mut self, x: CVar, slope: T) -> CVar {
        self.cmap(x, |g, v| g.leaky_relu(v, slope))
    }

    pub fn csigmoid(&mut self, x: CVar) -> CVar {
        self.cmap(x, |g, v| g.sigmoid(v))
    }

    pub fn ctanh(&mut self, x: CVar) -> CVar {
        self.cmap(x, |g, v| g.tanh(v))
    }

    pub fn cpool_avg(&mut self, x: CVar, axes: PoolAxes) -> CVar {
        self.cmap(x, |g, v| g.mean_axes(v, axes.mask()))
    }

    pub fn cpool_max(&mut self, x: CVar, axes: PoolAxes) -> CVar {
        self.cmap(x, |g, v| g.max_axes(v, axes.mask()))
    }

    /// Plane-by-plane product with broadcasting: `(a_r b_r, a_i b_i)`.
    pub fn cmul_planes(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.mul(a.re, b.re)?,
            im: self.mul(a.im, b.im)?,
        })
    }

    /// Complex product `a · b` with broadcasting.
    pub fn cmul(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.mul(a.re, b.re)?;
        let ii = self.mul(a.im, b.im)?;
        let ri = self.mul(a.re, b.im)?;
        let ir = self.mul(a.im, b.re)?;
        Ok(CVar {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    pub fn cconcat(&mut self, xs: &[CVar], axis: usize) -> Result<CVar> {
        let re: Vec<Var> = xs.iter().map(|c| c.re).collect();
        let im: Vec<Var> = xs.iter().map(|c| c.im).collect();
        Ok(CVar {
            re: self.concat(&re, axis)?,
            im: self.concat(&im, axis)?,
        })
    }

    pub fn cnarrow(&mut self, x: CVar, axis: usize, start: usize, len: usize) -> Result<CVar> {
        self.ctry_map(x, |g, v| g.narrow(v, axis, start, len))
    }

    pub fn cpad(&mut self, x: CVar, axis: usize, before: usize, after: usize) -> CVar {
        self.cmap(x, |g, v| g.pad(v, axis, before, after))
    }

    pub fn creshape(&mut self, x: CVar, shape: Shape) -> Result<CVar> {
        self.ctry_map(x, |g, v| g.reshape(v, shape))
    }

    /// Complex batch normalisation by 2x2 covariance whitening.
    ///
    /// With `running = None` batch statistics are used and returned so the
    /// caller can update its running averages; otherwise the running
    /// statistics are treated as constants.
    pub fn cbatchnorm(
        &mut self,
        x: CVar,
        affine: BnVars,
        running: Option<&BnRunning<T>>,
        eps: T,
    ) -> Result<(CVar, Option<BnBatchStats<T>>)> {
        let c = self.cshape(x).dims()[1];
        let chan = Shape::new(1, c, 1, 1);
        let axes = [true, false, true, true];
        let (a, b, wrr, wii, wri, stats) = match running {
            None => {
                let mr = self.mean_axes(x.re, axes);
                let mi = self.mean_axes(x.im, axes);
                let a = self.sub(x.re, mr)?;
                let b = self.sub(x.im, mi)?;
                let aa = self.square(a);
                let bb = self.square(b);
                let ab = self.mul(a, b)?;
                let vrr_raw = self.mean_axes(aa, axes);
                let vii_raw = self.mean_axes(bb, axes);
                let vri = self.mean_axes(ab, axes);
                let vrr = self.offset(vrr_raw, eps);
                let vii = self.offset(vii_raw, eps);
                // s = sqrt(det), t = sqrt(trace + 2s), W = [[vii+s, -vri], [-vri, vrr+s]] / (s t)
                let p = self.mul(vrr, vii)?;
                let q = self.square(vri);
                let det = self.sub(p, q)?;
                let s = self.sqrt(det);
                let tr = self.add(vrr, vii)?;
                let s2 = self.scale(s, T::lit(2.0));
                let tr2 = self.add(tr, s2)?;
                let t = self.sqrt(tr2);
                let st = self.mul(s, t)?;
                let inv = self.recip(st);
                let vii_s = self.add(vii, s)?;
                let vrr_s = self.add(vrr, s)?;
                let wrr = self.mul(vii_s, inv)?;
                let wii = self.mul(vrr_s, inv)?;
                let nvri = self.neg(vri);
                let wri = self.mul(nvri, inv)?;
                let stats = BnBatchStats {
                    mean_r: self.value(mr).data().to_vec(),
                    mean_i: self.value(mi).data().to_vec(),
                    v_rr: self.value(vrr_raw).data().to_vec(),
                    v_ii: self.value(vii_raw).data().to_vec(),
                    v_ri: self.value(vri).data().to_vec(),
                };
                (a, b, wrr, wii, wri, Some(stats))
            }
            Some(run) => {
                let mut w = [Vec::with_capacity(c), Vec::with_capacity(c), Vec::with_capacity(c)];
                for ch in 0..c {
                    let (rr, ii, ri) = inv_sqrt_2x2(run.v_rr[ch] + eps, run.v_ii[ch] + eps, run.v_ri[ch])?;
                    w[0].push(rr);
                    w[1].push(ii);
                    w[2].push(ri);
                }
                let [w_rr, w_ii, w_ri] = w;
                let mr = self.constant(Tensor::from_vec(chan, run.mean_r.clone())?);
                let mi = self.constant(Tensor::from_vec(chan, run.mean_i.clone())?);
                let a = self.sub(x.re, mr)?;
                let b = self.sub(x.im, mi)?;
                let wrr = self.constant(Tensor::from_vec(chan, w_rr)?);
                let wii = self.constant(Tensor::from_vec(chan, w_ii)?);
                let wri = self.constant(Tensor::from_vec(chan, w_ri)?);
                (a, b, wrr, wii, wri, None)
            }
        };
        let t1 = self.mul(wrr, a)?;
        let t2 = self.mul(wri, b)?;
        let hr = self.add(t1, t2)?;
        let t3 = self.mul(wri, a)?;
        let t4 = self.mul(wii, b)?;
        let hi = self.add(t3, t4)?;

        let u1 = self.mul(affine.gamma_rr, hr)?;
        let u2 = self.mul(affine.gamma_ri, hi)?;
        let u12 = self.add(u1, u2)?;
        let yr = self.add(u12, affine.beta.re)?;
        let u3 = self.mul(affine.gamma_ri, hr)?;
        let u4 = self.mul(affine.gamma_ii, hi)?;
        let u34 = self.add(u3, u4)?;
        let yi = self.add(u34, affine.beta.im)?;
        Ok((CVar { re: yr, im: yi }, stats))
    }

    /// One complex LSTM step; see [`crate::ctensor::complex_lstm_cell`].
    pub fn clstm_cell(
        &mut self,
        x: CVar,
        h_prev: CVar,
        c_prev: CVar,
        w_input: CVar,
        w_hidden: CVar,
        bias: CVar,
    ) -> Result<(CVar, CVar)> {
        let hid = self.cshape(h_prev).dims()[1];
        let px = self.cdense(x, w_input)?;
        let ph = self.cdense(h_prev, w_hidden)?;
        let p = self.cadd(px, ph)?;
        let pre = self.cadd(p, bias)?;
        let mut h = [pre.re; 2];
        let mut c = [pre.re; 2];
        for (k, (plane, c_old)) in [(pre.re, c_prev.re), (pre.im, c_prev.im)].into_iter().enumerate() {
            let gi = self.narrow(plane, 1, 0, hid)?;
            let gf = self.narrow(plane, 1, hid, hid)?;
            let gg = self.narrow(plane, 1, 2 * hid, hid)?;
            let go = self.narrow(plane, 1, 3 * hid, hid)?;
            let i = self.sigmoid(gi);
            let f = self.sigmoid(gf);
            let g = self.tanh(gg);
            let o = self.sigmoid(go);
            let fc = self.mul(f, c_old)?;
            let ig = self.mul(i, g)?;
            let cn = self.add(fc, ig)?;
            let tc = self.tanh(cn);
            h[k] = self.mul(o, tc)?;
            c[k] = cn;
        }
        Ok((CVar { re: h[0], im: h[1] }, CVar { re: c[0], im: c[1] }))
    }
}
