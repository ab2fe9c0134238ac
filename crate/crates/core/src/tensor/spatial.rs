use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Source taps for one output axis under the half-pixel (align-corners =
/// false) convention: `src = (dst + 0.5) * in / out - 0.5`, clamped at 0.
struct Taps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

fn taps<T: Scalar>(input: usize, output: usize) -> Taps<T> {
    let ratio = input as f64 / output as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for d in 0..output {
        let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(T::lit(src - lo as f64));
    }
    t
}

fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w] if *h > 0 && *w > 0 => Ok((1, *h, *w)),
        [c, h, w] if *h > 0 && *w > 0 => Ok((*c, *h, *w)),
        s => Err(Error::Dimension(format!(
            "expected H x W or C x H x W, got {s:?}"
        ))),
    }
}

fn resize_raw<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

/// Bilinear resize of an `H x W` or `C x H x W` tensor to `out_h x out_w`.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = planes(x.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension("resize to an empty size".into()));
    }
    let data = resize_raw(x.data(), c, h, w, out_h, out_w);
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(&shape, data)
}

/// Block-average downsampling by an integer factor on the trailing two axes.
pub fn area_downsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = planes(x.shape())?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "cannot area-downsample {:?} by {factor}",
            x.shape()
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::lit((factor * factor) as f64);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..factor {
                    let row = (ch * h + oy * factor + dy) * w + ox * factor;
                    acc = acc + d[row..row + factor].iter().copied().sum::<T>();
                }
                out.push(acc / norm);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(&shape, out)
}

pub(super) fn bilinear_backward<T: Scalar>(in_shape: &[usize], out_shape: &[usize], g: &[T], s: &mut [T]) {
    let (c, h, w) = planes(in_shape).expect("validated in forward");
    let (_, oh, ow) = planes(out_shape).expect("validated in forward");
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let one = T::one();
    for ch in 0..c {
        let plane = &mut s[ch * h * w..(ch + 1) * h * w];
        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let gv = gp[oy * ow + ox];
                let top = gv * (one - fy);
                let bot = gv * fy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (one - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + top * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (one - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + bot * fx;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Differentiable bilinear resize (align-corners = false) of an
    /// `H x W` or `C x H x W` tensor.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Upsample(x), &[x]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 5], 0.37);
        let y = bilinear_resize(&x, 12, 20).unwrap();
        assert_eq!(y.shape(), &[2, 12, 20]);
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn half_pixel_convention() {
        // 2 -> 4 along one axis: sources -0.25 (clamped), 0.25, 0.75, 1.25.
        let x = Tensor::<f64>::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_fn(&[3, 4], |i| (i * 7 % 5) as f64);
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn area_average() {
        let x = Tensor::<f64>::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 1.0],
        ])
        .unwrap();
        let y = area_downsample(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 0.25]);
        assert!(area_downsample(&x, 3).is_err());
    }
}
