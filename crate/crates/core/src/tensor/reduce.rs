use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm below which a cosine similarity is defined as zero.
pub const COSINE_EPS: f64 = 1e-8;

/// Default smoothing term of [`Tape::soft_dice`].
pub const DICE_EPS: f64 = 1e-6;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn softmax_backward<T: Scalar>(out: &Tensor<T>, axis: usize, g: &[T], s: &mut [T]) {
    let (outer, n, inner) = axis_split(out.shape(), axis);
    let y = out.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot: T = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
            for k in 0..n {
                let j = idx(k);
                s[j] = s[j] + y[j] * (g[j] - dot);
            }
        }
    }
}

struct CosineTerms<T> {
    cos: T,
    na: T,
    nb: T,
    valid: bool,
}

fn cosine_terms<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, p: usize) -> CosineTerms<T> {
    let c = a.shape()[0];
    let pa = a.shape()[1];
    let pb = b.shape()[1];
    let bj = if pb == 1 { 0 } else { p };
    let (ad, bd) = (a.data(), b.data());
    let mut dot = T::zero();
    let mut aa = T::zero();
    let mut bb = T::zero();
    for ch in 0..c {
        let x = ad[ch * pa + p];
        let y = bd[ch * pb + bj];
        dot = dot + x * y;
        aa = aa + x * x;
        bb = bb + y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    let eps = T::lit(COSINE_EPS);
    if na <= eps || nb <= eps {
        CosineTerms {
            cos: T::zero(),
            na,
            nb,
            valid: false,
        }
    } else {
        CosineTerms {
            cos: dot / (na * nb),
            na,
            nb,
            valid: true,
        }
    }
}

pub(super) fn channel_cosine_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let c = a.shape()[0];
    let pa = a.shape()[1];
    let pb = b.shape()[1];
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..pa {
        let t = cosine_terms(a, b, p);
        if !t.valid {
            continue;
        }
        let bj = if pb == 1 { 0 } else { p };
        let inv = T::one() / (t.na * t.nb);
        let ca = t.cos / (t.na * t.na);
        let cb = t.cos / (t.nb * t.nb);
        for ch in 0..c {
            let x = ad[ch * pa + p];
            let y = bd[ch * pb + bj];
            ga[ch * pa + p] = ga[ch * pa + p] + g[p] * (y * inv - ca * x);
            gb[ch * pb + bj] = gb[ch * pb + bj] + g[p] * (x * inv - cb * y);
        }
    }
    (ga, gb)
}

impl<T: Scalar> Tape<T> {
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        self.push(out, Op::Mean(a), &[a])
    }

    fn check_map(&self, m: Var) -> Result<(usize, usize)> {
        match self.shape(m) {
            [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
            s => Err(Error::Dimension(format!(
                "expected a non-empty 2-D map, got {s:?}"
            ))),
        }
    }

    /// Maximum over each row of an `H x W` map, giving `H x 1`. The gradient
    /// of each output goes to the lowest-index maximal entry of its row.
    pub fn row_max(&mut self, m: Var) -> Result<Var> {
        let (h, w) = self.check_map(m)?;
        let x = self.value(m).data();
        let mut vals = Vec::with_capacity(h);
        let mut argmax = Vec::with_capacity(h);
        for i in 0..h {
            let row = &x[i * w..(i + 1) * w];
            let mut best = 0;
            for j in 1..w {
                if row[j] > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            argmax.push(i * w + best);
        }
        let out = Tensor::new(&[h, 1], vals)?;
        Ok(self.push(out, Op::RowMax { input: m, argmax }, &[m]))
    }

    /// Maximum over each column, giving `1 x W`. Ties route the gradient to
    /// the topmost maximal entry.
    pub fn col_max(&mut self, m: Var) -> Result<Var> {
        let (h, w) = self.check_map(m)?;
        let x = self.value(m).data();
        let mut vals = Vec::with_capacity(w);
        let mut argmax = Vec::with_capacity(w);
        for j in 0..w {
            let mut best = j;
            for i in 1..h {
                if x[i * w + j] > x[best] {
                    best = i * w + j;
                }
            }
            vals.push(x[best]);
            argmax.push(best);
        }
        let out = Tensor::new(&[1, w], vals)?;
        Ok(self.push(out, Op::ColMax { input: m, argmax }, &[m]))
    }

    /// Row-wise and column-wise max projections `(H x 1, 1 x W)`.
    pub fn rowcol_maxpool(&mut self, m: Var) -> Result<(Var, Var)> {
        Ok((self.row_max(m)?, self.col_max(m)?))
    }

    /// `out[i, j] = o[i] * v[j]` for `o: H x 1`, `v: 1 x W`.
    pub fn outer_product(&mut self, o: Var, v: Var) -> Result<Var> {
        let (h, w) = match (self.shape(o), self.shape(v)) {
            ([h, 1], [1, w]) => (*h, *w),
            (so, sv) => {
                return Err(Error::shape(format!(
                    "outer product needs H x 1 and 1 x W, got {so:?} and {sv:?}"
                )))
            }
        };
        let (od, vd) = (self.value(o).data(), self.value(v).data());
        let mut data = Vec::with_capacity(h * w);
        for &oi in od {
            data.extend(vd.iter().map(|&vj| oi * vj));
        }
        let out = Tensor::new(&[h, w], data)?;
        Ok(self.push(out, Op::Outer(o, v), &[o, v]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Axis {
                axis,
                rank: v.rank(),
            });
        }
        let out = softmax_along(v, axis);
        Ok(self.push(out, Op::Softmax { input: x, axis }, &[x]))
    }

    /// Cosine similarity between matching columns of `a: C x P` and
    /// `b: C x P` (or every column of `a` against `b: C x 1`). Returns `1 x P`.
    /// Columns whose norm is at most `1e-8` give 0 with zero gradient.
    pub fn channel_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let p = match (sa, sb) {
            ([c, p], [cb, pb]) if c == cb && (pb == p || *pb == 1) => *p,
            _ => {
                return Err(Error::shape(format!(
                    "channel cosine needs C x P against C x P or C x 1, got {sa:?} and {sb:?}"
                )))
            }
        };
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..p).map(|j| cosine_terms(av, bv, j).cos).collect();
        let out = Tensor::new(&[1, p], data)?;
        Ok(self.push(out, Op::ChannelCosine { a, b }, &[a, b]))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if na != nb {
            return Err(Error::shape(format!("cosine of {na}- and {nb}-vectors")));
        }
        let a2 = self.reshape(a, &[na, 1])?;
        let b2 = self.reshape(b, &[nb, 1])?;
        let c = self.channel_cosine(a2, b2)?;
        self.reshape(c, &[])
    }

    /// Negative soft dice, `-2 sum(p * t) / (sum(p) + sum(t) + eps)`.
    pub fn soft_dice_eps(&mut self, pred: Var, target: Var, eps: T) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        super::check_same_shape(p, t, "soft dice")?;
        let inter: T = p.data().iter().zip(t.data()).map(|(&a, &b)| a * b).sum();
        let denom = p.sum() + t.sum() + eps;
        let out = Tensor::scalar(-T::lit(2.0) * inter / denom);
        Ok(self.push(out, Op::SoftDice { pred, target, eps }, &[pred, target]))
    }

    /// [`Tape::soft_dice_eps`] with `eps = 1e-6`.
    pub fn soft_dice(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.soft_dice_eps(pred, target, T::lit(DICE_EPS))
    }
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax_along<T: Scalar>(v: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(v.shape(), axis);
    let x = v.data();
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let mx = (0..n).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..n {
                let e = (x[idx(k)] - mx).exp();
                y[idx(k)] = e;
                total = total + e;
            }
            for k in 0..n {
                y[idx(k)] = y[idx(k)] / total;
            }
        }
    }
    Tensor::new(v.shape(), y).expect("same shape")
}
