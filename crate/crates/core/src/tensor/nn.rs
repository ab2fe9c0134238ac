//! Convolution, transposed convolution and group normalization on single
//! `C x H x W` feature maps.

use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    pub(super) fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = match x {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dimension(format!("conv input must be C x H x W, got {s:?}"))),
        };
        let (cout, k) = match wt {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 && *k1 > 0 => (*co, *k1),
            s => {
                return Err(Error::shape(format!(
                    "conv weight {s:?} does not fit input with {cin} channels"
                )))
            }
        };
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv kernel {k} stride {stride} pad {pad} does not fit {h} x {w}"
            )));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output index range along one axis whose input tap `o * s + kk - p`
    /// lies inside `0..len`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
        let hi = if len - 1 + p >= kk {
            ((len - 1 + p - kk) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv2d_forward<T: Scalar>(geo: &ConvGeometry, x: &[T], wt: &[T], bias: &[T]) -> Vec<T> {
    let ConvGeometry {
        cin, h, w, cout, k, stride, pad, oh, ow,
    } = *geo;
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let input = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = geo.valid(ky, h, oh);
                for kx in 0..k {
                    let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = geo.valid(kx, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let in_row = &input[iy * w..(iy + 1) * w];
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            out_row[ox] = out_row[ox] + wv * in_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv2d_backward_input<T: Scalar>(geo: &ConvGeometry, wt: &[T], g: &[T], s: &mut [T]) {
    let ConvGeometry {
        cin, h, w, cout, k, stride, pad, oh, ow,
    } = *geo;
    for co in 0..cout {
        let gp = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let dx = &mut s[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = geo.valid(ky, h, oh);
                for kx in 0..k {
                    let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = geo.valid(kx, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let g_row = &gp[oy * ow..(oy + 1) * ow];
                        let dx_row = &mut dx[iy * w..(iy + 1) * w];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            dx_row[ix] = dx_row[ix] + wv * g_row[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_backward_weight<T: Scalar>(geo: &ConvGeometry, x: &[T], g: &[T], s: &mut [T]) {
    let ConvGeometry {
        cin, h, w, cout, k, stride, pad, oh, ow,
    } = *geo;
    for co in 0..cout {
        let gp = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let input = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = geo.valid(ky, h, oh);
                for kx in 0..k {
                    let (ox0, ox1) = geo.valid(kx, w, ow);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let in_row = &input[iy * w..(iy + 1) * w];
                        let g_row = &gp[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            acc = acc + g_row[ox] * in_row[ox * stride + kx - pad];
                        }
                    }
                    let idx = ((co * cin + ci) * k + ky) * k + kx;
                    s[idx] = s[idx] + acc;
                }
            }
        }
    }
}

/// Adds per-channel sums of a `C x ...` gradient into `s` (length C).
pub(super) fn channel_sum_into<T: Scalar>(g: &[T], s: &mut [T]) {
    let per = g.len() / s.len();
    for (c, sc) in s.iter_mut().enumerate() {
        *sc = *sc + g[c * per..(c + 1) * per].iter().copied().sum::<T>();
    }
}

fn deconv_dims(x: &[usize], wt: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (x, wt) {
        ([cin, h, w], [ci, cout, 2, 2]) if ci == cin => Ok((*cin, *h, *w, *cout)),
        _ => Err(Error::shape(format!(
            "deconv needs C x H x W input and C x Cout x 2 x 2 weight, got {x:?} and {wt:?}"
        ))),
    }
}

pub(super) fn deconv_backward_input<T: Scalar>(xs: &[usize], ws: &[usize], wt: &[T], g: &[T], s: &mut [T]) {
    let (cin, h, w, cout) = deconv_dims(xs, ws).expect("validated in forward");
    let ow = 2 * w;
    for ci in 0..cin {
        for co in 0..cout {
            let wb = (ci * cout + co) * 4;
            let gp = &g[co * 4 * h * w..(co + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for a in 0..2 {
                        for b in 0..2 {
                            acc = acc + wt[wb + a * 2 + b] * gp[(2 * i + a) * ow + 2 * j + b];
                        }
                    }
                    let idx = (ci * h + i) * w + j;
                    s[idx] = s[idx] + acc;
                }
            }
        }
    }
}

pub(super) fn deconv_backward_weight<T: Scalar>(xs: &[usize], ws: &[usize], x: &[T], g: &[T], s: &mut [T]) {
    let (cin, h, w, cout) = deconv_dims(xs, ws).expect("validated in forward");
    let ow = 2 * w;
    for ci in 0..cin {
        let xp = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..cout {
            let gp = &g[co * 4 * h * w..(co + 1) * 4 * h * w];
            for a in 0..2 {
                for b in 0..2 {
                    let mut acc = T::zero();
                    for i in 0..h {
                        for j in 0..w {
                            acc = acc + xp[i * w + j] * gp[(2 * i + a) * ow + 2 * j + b];
                        }
                    }
                    let idx = (ci * cout + co) * 4 + a * 2 + b;
                    s[idx] = s[idx] + acc;
                }
            }
        }
    }
}

pub(super) struct GroupNormGrads<T> {
    pub(super) input: Vec<T>,
    pub(super) gamma: Vec<T>,
    pub(super) beta: Vec<T>,
}

pub(super) fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    groups: usize,
    mean: &[T],
    rstd: &[T],
    g: &[T],
) -> GroupNormGrads<T> {
    let c = x.shape()[0];
    let hw = x.len() / c;
    let cpg = c / groups;
    let n = T::lit((cpg * hw) as f64);
    let xd = x.data();
    let mut out = GroupNormGrads {
        input: vec![T::zero(); x.len()],
        gamma: vec![T::zero(); c],
        beta: vec![T::zero(); c],
    };
    for grp in 0..groups {
        let (mu, rs) = (mean[grp], rstd[grp]);
        let span = grp * cpg * hw..(grp + 1) * cpg * hw;
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for idx in span.clone() {
            let ch = idx / hw;
            let xhat = (xd[idx] - mu) * rs;
            let d = g[idx] * gamma[ch];
            sum_d = sum_d + d;
            sum_dx = sum_dx + d * xhat;
            out.gamma[ch] = out.gamma[ch] + g[idx] * xhat;
            out.beta[ch] = out.beta[ch] + g[idx];
        }
        for idx in span {
            let ch = idx / hw;
            let xhat = (xd[idx] - mu) * rs;
            let d = g[idx] * gamma[ch];
            out.input[idx] = rs / n * (n * d - sum_d - xhat * sum_dx);
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution of `x: Cin x H x W` with `weight: Cout x Cin x k x k`
    /// and `bias: Cout`, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(weight), stride, pad)?;
        if self.value(bias).len() != geo.cout {
            return Err(Error::shape(format!(
                "conv bias has {} entries, expected {}",
                self.value(bias).len(),
                geo.cout
            )));
        }
        let data = conv2d_forward(
            &geo,
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new(&[geo.cout, geo.oh, geo.ow], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                stride,
                pad,
            },
            &[x, weight, bias],
        ))
    }

    /// Stride-2 transposed convolution with a 2 x 2 kernel, doubling the
    /// spatial size. `weight: Cin x Cout x 2 x 2`.
    pub fn deconv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w, cout) = deconv_dims(self.shape(x), self.shape(weight))?;
        if self.value(bias).len() != cout {
            return Err(Error::shape("deconv bias length"));
        }
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); cout * oh * ow];
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bd[co]);
            for ci in 0..cin {
                let wb = (ci * cout + co) * 4;
                let xp = &xd[ci * h * w..(ci + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let xv = xp[i * w + j];
                        for a in 0..2 {
                            for b in 0..2 {
                                let o = (2 * i + a) * ow + 2 * j + b;
                                plane[o] = plane[o] + xv * wd[wb + a * 2 + b];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[cout, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Deconv2x2 {
                input: x,
                weight,
                bias,
            },
            &[x, weight, bias],
        ))
    }

    /// Group normalization over `groups` channel groups with per-channel
    /// affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = match xv.shape() {
            [c, _, _] => *c,
            s => return Err(Error::Dimension(format!("group norm input must be C x H x W, got {s:?}"))),
        };
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("{c} channels do not split into {groups} groups")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("group norm affine length"));
        }
        let hw = xv.len() / c;
        let span = c / groups * hw;
        let xd = xv.data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::lit(GROUP_NORM_EPS);
        let mut mean = Vec::with_capacity(groups);
        let mut rstd = Vec::with_capacity(groups);
        let mut out = vec![T::zero(); xd.len()];
        for grp in 0..groups {
            let chunk = &xd[grp * span..(grp + 1) * span];
            let n = T::lit(span as f64);
            let mu = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (k, &v) in chunk.iter().enumerate() {
                let idx = grp * span + k;
                let ch = idx / hw;
                out[idx] = (v - mu) * rs * gd[ch] + bd[ch];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                input: x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }
}
